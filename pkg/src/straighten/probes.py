"""Read-outs from frozen representations.

Identity is decoded with a multinomial logistic classifier; continuous
attributes (position, scale, angle) with RBF kernel ridge regression.
Next-frame prediction reuses the attribute regressor on linearly
extrapolated embeddings. A convolutional decoder maps embeddings back to
pixels for reconstruction/prediction strips.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from . import netcore
from .datagen import EVENT_SCALE, EVENT_X, EVENT_Y, KINDS, TRUTH_FIELDS, SequenceDataset
from .errors import AttributeMissing, BadMagic, IllConditioned, NonFiniteLoss, ShapeMismatch, SingleClass
from .netcore import Conv2D, FullyConnected, NetworkSpec, ReLU, Reshape, Upsample
from .objectives import extrapolate
from .rng import stream

ATTRIBUTES = ("identity", "x", "y", "scale", "angle")
# sequences in which each attribute actually varies
ATTRIBUTE_KIND = {"x": "translation", "y": "translation", "scale": "rescale", "angle": "rotation"}
ATTRIBUTE_EVENT = {"x": EVENT_X, "y": EVENT_Y, "scale": EVENT_SCALE, "angle": 0}


def embed(spec, params, frames, tap="out", batch=500) -> np.ndarray:
    """Flattened tap activations for a stack of frames ``(N, C, H, W)``."""
    frames = np.asarray(frames)
    out = []
    for lo in range(0, len(frames), batch):
        _, trace = netcore.forward(spec, params, frames[lo : lo + batch].astype(np.float64))
        out.append(trace.flat(spec.taps[tap]))
    if not out:
        return np.zeros((0, int(np.prod(spec.shapes[spec.taps[tap]]))))
    return np.concatenate(out)


def embed_sequences(spec, params, frames, tap="out", batch=500) -> np.ndarray:
    """Embeddings of ``(B, T, C, H, W)`` sequences as ``(B, T, D)``."""
    B, T = frames.shape[:2]
    return embed(spec, params, frames.reshape((B * T,) + frames.shape[2:]), tap, batch).reshape(B, T, -1)


# ----------------------------------------------------------------------
# linear classifier


@dataclass
class LinearProbe:
    W: np.ndarray  # (K, d)
    b: np.ndarray  # (K,)
    classes: np.ndarray  # label value of each row

    def logits(self, X):
        return np.asarray(X, dtype=np.float64) @ self.W.T + self.b

    def predict(self, X):
        return self.classes[np.argmax(self.logits(X), axis=1)]

    def accuracy(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_linear_classifier(X, y, l2=1e-4, max_iter=1000, tol=1e-8) -> LinearProbe:
    """Multinomial logistic regression, full-batch L-BFGS from zero.

    Features are standardised internally and the scaling is folded back
    into the returned weights, so the probe acts on raw embeddings.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise SingleClass(f"need at least two classes, got {classes}")
    N, d = X.shape
    K = len(classes)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Xs = (X - mu) / sd
    onehot = (y[:, None] == classes[None]).astype(np.float64)

    def objective(theta):
        W = theta[: K * d].reshape(K, d)
        b = theta[K * d :]
        logits = Xs @ W.T + b
        logits -= logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(logits).sum(axis=1))
        loss = np.mean(logz - (logits * onehot).sum(axis=1)) + 0.5 * l2 * np.sum(W * W)
        g = (np.exp(logits - logz[:, None]) - onehot) / N
        gW = g.T @ Xs + l2 * W
        return loss, np.concatenate([gW.ravel(), g.sum(axis=0)])

    res = scipy.optimize.minimize(
        objective, np.zeros(K * d + K), jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": tol, "ftol": 1e-14},
    )
    W = res.x[: K * d].reshape(K, d) / sd
    b = res.x[K * d :] - W @ mu
    return LinearProbe(W, b, classes)


# ----------------------------------------------------------------------
# kernel ridge regression


def rbf_kernel(A, B, bandwidth):
    sq = (A**2).sum(1)[:, None] + (B**2).sum(1)[None] - 2.0 * A @ B.T
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * bandwidth**2))


def median_bandwidth(X, max_points=1000, seed=0) -> float:
    X = np.asarray(X, dtype=np.float64)
    if len(X) > max_points:
        X = X[stream(seed, "probes.bandwidth").choice(len(X), max_points, replace=False)]
    sq = (X**2).sum(1)[:, None] + (X**2).sum(1)[None] - 2.0 * X @ X.T
    dist = np.sqrt(np.maximum(sq[np.triu_indices(len(X), 1)], 0.0))
    dist = dist[dist > 0]
    return float(np.median(dist)) if dist.size else 1.0


@dataclass
class KernelRegressor:
    support: np.ndarray
    coef: np.ndarray  # (n_support, k)
    bandwidth: float
    ridge: float
    target_mean: np.ndarray

    def predict(self, X):
        K = rbf_kernel(np.asarray(X, dtype=np.float64), self.support, self.bandwidth)
        return K @ self.coef + self.target_mean


def fit_rbf_regressor(X, Y, bandwidth=None, ridge=1.0, max_support=2000, seed=0) -> KernelRegressor:
    """Closed-form kernel ridge regression on at most ``max_support`` points.

    Targets are centred, so predictions shrink to the target mean as the
    ridge grows. A numerically singular system raises IllConditioned.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    squeeze = Y.ndim == 1
    Y = Y.reshape(len(Y), -1)
    if len(X) < 2 or not np.all(np.isfinite(Y)):
        raise ShapeMismatch("kernel regression needs >= 2 finite targets")
    if len(X) > max_support:
        keep = np.sort(stream(seed, "probes.support").choice(len(X), max_support, replace=False))
        X, Y = X[keep], Y[keep]
    if bandwidth is None:
        bandwidth = median_bandwidth(X, seed=seed)
    if bandwidth <= 0:
        raise ShapeMismatch("bandwidth must be positive")
    mean = Y.mean(axis=0)
    K = rbf_kernel(X, X, bandwidth)
    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            coef = scipy.linalg.solve(K + ridge * np.eye(len(X)), Y - mean, assume_a="pos")
        except (scipy.linalg.LinAlgWarning, np.linalg.LinAlgError) as exc:
            raise IllConditioned(f"kernel system singular at ridge {ridge}: {exc}") from exc
    reg = KernelRegressor(X, coef, float(bandwidth), ridge, mean)
    if squeeze:
        reg.target_mean = mean  # predict still returns (n, 1); callers ravel
    return reg


def r2_score(y, pred) -> float:
    y, pred = np.asarray(y, float).reshape(len(y), -1), np.asarray(pred, float).reshape(len(y), -1)
    ss_res = ((y - pred) ** 2).sum(axis=0)
    ss_tot = ((y - y.mean(axis=0)) ** 2).sum(axis=0)
    r2 = np.where(ss_tot > 0, 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, 1.0), 0.0)
    return float(r2.mean())


# ----------------------------------------------------------------------
# attribute decoding


@dataclass
class ProbeConfig:
    tap: str = "out"
    max_train_frames: int = 2000
    max_test_frames: int = 2000
    ridge: float = 1.0  # about the regularisation of a default RBF SVR (C = 1)
    bandwidth: float | None = None
    l2: float = 1e-4
    seed: int = 0


def attribute_targets(truth, attribute):
    """Regression targets; angles become (sin, cos) pairs."""
    if attribute == "angle":
        a = np.deg2rad(truth[..., TRUTH_FIELDS.index("angle")])
        return np.stack([np.sin(a), np.cos(a)], axis=-1)
    return truth[..., TRUTH_FIELDS.index(attribute)][..., None]


def attribute_error(target, pred, attribute):
    """Per-item absolute error; angular error in degrees for angles."""
    if attribute == "angle":
        ang_t = np.arctan2(target[..., 0], target[..., 1])
        ang_p = np.arctan2(pred[..., 0], pred[..., 1])
        return np.rad2deg(np.abs(np.angle(np.exp(1j * (ang_p - ang_t)))))
    return np.abs(target[..., 0] - pred[..., 0])


def _sequences_for(dataset: SequenceDataset, attribute):
    if attribute not in ATTRIBUTES:
        raise AttributeMissing(f"unknown attribute {attribute!r}")
    if attribute == "identity":
        return np.arange(len(dataset))
    idx = np.flatnonzero(dataset.kind_mask(ATTRIBUTE_KIND[attribute]))
    if idx.size == 0:
        raise AttributeMissing(f"dataset has no {ATTRIBUTE_KIND[attribute]} sequences to decode {attribute}")
    return idx


def _frame_sample(dataset, seq_idx, cap, seed, purpose):
    """Pick up to ``cap`` (sequence, frame) pairs from the given sequences."""
    pairs = np.stack(np.meshgrid(seq_idx, np.arange(dataset.T), indexing="ij"), -1).reshape(-1, 2)
    if len(pairs) > cap:
        pairs = pairs[np.sort(stream(seed, purpose).choice(len(pairs), cap, replace=False))]
    return pairs


def decode_from_features(Ftr, Ttr, Fte, Tte, attribute, cfg: ProbeConfig = ProbeConfig()) -> dict:
    """Fit on (features, truth) and score on the test pair.

    ``T*`` are labels for identity, truth rows ``(n, 8)`` otherwise.
    """
    if attribute == "identity":
        probe = fit_linear_classifier(Ftr, Ttr, l2=cfg.l2)
        Tte = np.asarray(Tte)
        values, counts = np.unique(Tte, return_counts=True)
        return {
            "attribute": attribute,
            "accuracy": probe.accuracy(Fte, Tte),
            "chance": 1.0 / len(np.unique(Ttr)),
            "majority": float(counts.max() / counts.sum()),
            "n_train": len(Ftr),
            "n_test": len(Fte),
            "probe": probe,
        }
    ytr, yte = attribute_targets(Ttr, attribute), attribute_targets(Tte, attribute)
    reg = fit_rbf_regressor(Ftr, ytr, cfg.bandwidth, cfg.ridge, cfg.max_train_frames, cfg.seed)
    pred = reg.predict(Fte)
    err = attribute_error(yte, pred, attribute)
    return {
        "attribute": attribute,
        "r2": r2_score(yte, pred),
        "rmse": float(np.sqrt(np.mean(err**2))),
        "n_train": len(Ftr),
        "n_test": len(Fte),
        "regressor": reg,
    }


def evaluate_decoding(spec, params, train_ds, test_ds, attribute, cfg: ProbeConfig = ProbeConfig()) -> dict:
    """Decode ``attribute`` from tap embeddings; train/test come from disjoint datasets."""
    tr = _frame_sample(train_ds, _sequences_for(train_ds, attribute), cfg.max_train_frames, cfg.seed, "probes.train")
    te = _frame_sample(test_ds, _sequences_for(test_ds, attribute), cfg.max_test_frames, cfg.seed, "probes.test")
    Ftr = embed(spec, params, train_ds.frames[tr[:, 0], tr[:, 1]], cfg.tap)
    Fte = embed(spec, params, test_ds.frames[te[:, 0], te[:, 1]], cfg.tap)
    if attribute == "identity":
        rep = decode_from_features(Ftr, train_ds.labels[tr[:, 0]], Fte, test_ds.labels[te[:, 0]], attribute, cfg)
    else:
        rep = decode_from_features(Ftr, train_ds.truth[tr[:, 0], tr[:, 1]], Fte, test_ds.truth[te[:, 0], te[:, 1]],
                                   attribute, cfg)
    rep["tap"] = cfg.tap
    return rep


def prediction_errors(reg, Z, truth, events, attribute) -> dict:
    """Errors of decoding frame t+2 from extrapolated vs. previous embeddings.

    ``Z`` is ``(B, T, D)``, ``truth`` ``(B, T, 8)``, ``events`` ``(B, T)``.
    A triple counts as an event when the attribute reverses direction at
    frame t+1, which is exactly when linear extrapolation must fail.
    """
    B, T, D = Z.shape
    z_pred = extrapolate(Z[:, :-2], Z[:, 1:-1]).reshape(-1, D)
    z_prev = Z[:, 1:-1].reshape(-1, D)
    z_now = Z[:, 2:].reshape(-1, D)
    target = attribute_targets(truth[:, 2:], attribute).reshape(B * (T - 2), -1)
    bit = ATTRIBUTE_EVENT[attribute]
    event = ((events[:, 1:-1] & bit) > 0).reshape(-1) if bit else np.zeros(B * (T - 2), bool)
    errs = {name: attribute_error(target, reg.predict(z), attribute)
            for name, z in (("extrapolation", z_pred), ("control", z_prev), ("current", z_now))}
    rep = {"attribute": attribute, "n_smooth": int((~event).sum()), "n_event": int(event.sum())}
    for name, e in errs.items():
        rep[f"rmse_{name}_smooth"] = float(np.sqrt(np.mean(e[~event] ** 2))) if (~event).any() else float("nan")
        rep[f"rmse_{name}_event"] = float(np.sqrt(np.mean(e[event] ** 2))) if event.any() else float("nan")
    return rep


def evaluate_prediction(spec, params, train_ds, test_ds, attribute, cfg: ProbeConfig = ProbeConfig(),
                        max_sequences=150) -> dict:
    """Next-frame attribute prediction by extrapolation, with a previous-frame control."""
    if attribute == "identity":
        raise AttributeMissing("identity is constant within a sequence; nothing to predict")
    if test_ds.T < 3:
        raise ShapeMismatch("prediction needs T >= 3")
    tr = _frame_sample(train_ds, _sequences_for(train_ds, attribute), cfg.max_train_frames, cfg.seed, "probes.train")
    Ftr = embed(spec, params, train_ds.frames[tr[:, 0], tr[:, 1]], cfg.tap)
    ytr = attribute_targets(train_ds.truth[tr[:, 0], tr[:, 1]], attribute)
    reg = fit_rbf_regressor(Ftr, ytr, cfg.bandwidth, cfg.ridge, cfg.max_train_frames, cfg.seed)
    seqs = _sequences_for(test_ds, attribute)[:max_sequences]
    Z = embed_sequences(spec, params, test_ds.frames[seqs], cfg.tap)
    rep = prediction_errors(reg, Z, test_ds.truth[seqs], test_ds.events[seqs], attribute)
    rep["tap"] = cfg.tap
    return rep


# ----------------------------------------------------------------------
# pixel decoder


def decoder_spec(d, frame_shape, channels=(64, 32, 16)) -> NetworkSpec:
    """FC to a 1/8-resolution map, then (conv, upsample, conv) stages: 7 weight layers."""
    C, H, W = frame_shape
    if H % 8 or W % 8:
        raise ShapeMismatch("decoder needs frame sides divisible by 8")
    c0, c1, c2 = channels
    h, w = H // 8, W // 8
    layers = [
        FullyConnected(d, c0 * h * w), Reshape((c0, h, w)), ReLU(),
        Conv2D(c0, c0), ReLU(), Upsample(2),
        Conv2D(c0, c1), ReLU(), Conv2D(c1, c1), ReLU(), Upsample(2),
        Conv2D(c1, c2), ReLU(), Conv2D(c2, c2), ReLU(), Upsample(2),
        Conv2D(c2, C),
    ]
    return NetworkSpec((d,), layers)


@dataclass
class DecoderConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    grad_clip: float = 1.0  # global gradient norm
    max_frames: int = 4000
    tap: str = "out"
    seed: int = 0


def decode(dec_spec, dec_params, Z) -> np.ndarray:
    out, _ = netcore.forward(dec_spec, dec_params, np.asarray(Z, dtype=np.float64))
    return out


def train_pixel_decoder(spec, params, dataset: SequenceDataset, cfg: DecoderConfig = DecoderConfig()):
    """Fit a decoder from frozen embeddings to frames by pixel MSE.

    Returns ``(dec_spec, dec_params, losses)`` with one mean loss per epoch.
    """
    from .trainer import sgd_step

    pairs = _frame_sample(dataset, np.arange(len(dataset)), cfg.max_frames, cfg.seed, "probes.decoder")
    frames = dataset.frames[pairs[:, 0], pairs[:, 1]].astype(np.float64)
    Z = embed(spec, params, frames, cfg.tap)
    dec_spec = decoder_spec(Z.shape[1], frames.shape[1:])
    dec_params = netcore.init_params(dec_spec, stream(cfg.seed, "probes.decoder.init"))
    state, losses = None, []
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "probes.decoder.order", epoch).permutation(len(Z))
        total = 0.0
        for lo in range(0, len(Z), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            out, trace = netcore.forward(dec_spec, dec_params, Z[idx])
            diff = out - frames[idx]
            total += float((diff**2).sum())
            grads, _ = netcore.backward(dec_spec, dec_params, trace, 2.0 * diff / diff.size)
            gnorm = np.linalg.norm(netcore.flatten_params(grads))
            if not np.isfinite(gnorm):
                raise NonFiniteLoss("decoder gradient became non-finite")
            if cfg.grad_clip and gnorm > cfg.grad_clip:
                grads = [{k: v * (cfg.grad_clip / gnorm) for k, v in g.items()} for g in grads]
            dec_params, state = sgd_step(dec_params, grads, state, cfg.lr, cfg.momentum)
        losses.append(total / frames.size)
    return dec_spec, dec_params, losses


def reconstruction_mse(spec, params, dec_spec, dec_params, frames, tap="out") -> float:
    frames = np.asarray(frames, dtype=np.float64)
    return float(np.mean((decode(dec_spec, dec_params, embed(spec, params, frames, tap)) - frames) ** 2))


def prediction_rows(spec, params, dec_spec, dec_params, frames, tap="out"):
    """Reconstructions of every frame and extrapolation-based predictions.

    Prediction ``t`` (t >= 2) decodes ``extrapolate(z[t-2], z[t-1])``;
    earlier slots are NaN.
    """
    Z = embed(spec, params, frames, tap)
    recon = decode(dec_spec, dec_params, Z)
    pred = np.full_like(recon, np.nan)
    if len(Z) >= 3:
        pred[2:] = decode(dec_spec, dec_params, extrapolate(Z[:-2], Z[1:-1]))
    return recon, pred


def render_prediction_strip(spec, params, dec_spec, dec_params, sample, tap="out", gap=1) -> np.ndarray:
    """Image grid: input row, reconstruction row, prediction row.

    Returns ``(C, 3H + 2gap, T W + (T-1) gap)`` in [0, 1]; empty
    prediction slots are left black.
    """
    frames = sample.frames.astype(np.float64)
    recon, pred = prediction_rows(spec, params, dec_spec, dec_params, frames, tap)
    T, C, H, W = frames.shape
    grid = np.zeros((C, 3 * H + 2 * gap, T * W + (T - 1) * gap))
    for r, row in enumerate((frames, recon, np.nan_to_num(pred, nan=0.0))):
        for t in range(T):
            grid[:, r * (H + gap) : r * (H + gap) + H, t * (W + gap) : t * (W + gap) + W] = row[t]
    return np.clip(grid, 0.0, 1.0)


def write_pnm(path, image) -> None:
    """Binary PGM (1 channel) or PPM (3 channels) from a (C, H, W) array in [0, 1]."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    C, H, W = image.shape
    data = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
    if C == 1:
        header, body = b"P5", data[0].tobytes()
    elif C == 3:
        header, body = b"P6", np.moveaxis(data, 0, -1).tobytes()
    else:
        raise ShapeMismatch(f"PNM needs 1 or 3 channels, got {C}")
    with open(path, "wb") as fh:
        fh.write(header + f"\n{W} {H}\n255\n".encode("ascii") + body)


def read_pnm(path) -> np.ndarray:
    raw = open(path, "rb").read()
    # header: magic, width, height, maxval, then exactly one whitespace byte
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    magic, W, H = fields[0], int(fields[1]), int(fields[2])
    body = raw[pos + 1 :]
    if magic == b"P5":
        return np.frombuffer(body, np.uint8).reshape(1, H, W) / 255.0
    if magic == b"P6":
        return np.moveaxis(np.frombuffer(body, np.uint8).reshape(H, W, 3), -1, 0) / 255.0
    raise BadMagic(f"not a binary PNM file: {magic!r}")
