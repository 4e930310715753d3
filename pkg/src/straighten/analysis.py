"""Representation geometry and robustness measurements."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import netcore
from .datagen import SequenceDataset
from .errors import DegenerateCovariance, EmptyGroup, ShapeMismatch
from .objectives import cosine_terms
from .probes import embed, softmax
from .rng import stream

log = logging.getLogger(__name__)

HIST_BINS = 101
NOISE_SIGMAS = (0.0, 0.02, 0.05, 0.1, 0.2, 0.4)


# ----------------------------------------------------------------------
# layerwise straightness


def straightness_curve(spec, params, dataset: SequenceDataset, max_sequences=200, batch_sequences=20):
    """Mean straightness at every layer boundary, pixels first.

    Sequences with a degenerate (zero-length) difference vector at some
    stage are left out of that stage's mean; the count is reported and
    a warning is raised.
    """
    n = min(len(dataset), max_sequences)
    names = spec.boundary_names()
    sums = np.zeros(len(names))
    counts = np.zeros(len(names), dtype=int)
    for lo in range(0, n, batch_sequences):
        frames = dataset.frames[lo : min(n, lo + batch_sequences)].astype(np.float64)
        B, T = frames.shape[:2]
        _, trace = netcore.forward(spec, params, frames.reshape((B * T,) + frames.shape[2:]))
        for k, act in enumerate(trace.acts):
            cos = cosine_terms(act.reshape(B, T, -1), on_degenerate="exclude")
            ok = ~np.isnan(cos).any(axis=1)
            sums[k] += cos[ok].mean(axis=1).sum()
            counts[k] += ok.sum()
    excluded = n - counts
    if excluded.any():
        warnings.warn(f"excluded degenerate sequences per stage: {excluded.tolist()}")
    values = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return [
        {"stage": k, "name": names[k], "straightness": float(values[k]), "n": int(counts[k]), "excluded": int(excluded[k])}
        for k in range(len(names))
    ]


# ----------------------------------------------------------------------
# pairing histograms


class PairingCondition(str, Enum):
    SameDigitSameTransform = "same_digit_same_transform"
    SameDigitDiffTransform = "same_digit_diff_transform"
    DiffDigitSameTransform = "diff_digit_same_transform"
    DiffDigitDiffTransform = "diff_digit_diff_transform"
    VsClassifierAxis = "vs_classifier_axis"
    RandomBaseline = "random_baseline"


def difference_vectors(Z) -> np.ndarray:
    """``z_t - z_{t-1}`` for trajectories ``(B, T, d)``."""
    return np.diff(np.asarray(Z, dtype=np.float64), axis=1)


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n > 0, v / np.where(n > 0, n, 1.0), np.nan)


def histogram(cosines, bins=HIST_BINS):
    counts, edges = np.histogram(cosines, bins=bins, range=(-1.0, 1.0))
    return counts, edges


def _summarise(cos, condition, bins):
    cos = cos[~np.isnan(cos)]
    if cos.size == 0:
        raise EmptyGroup(f"no valid pairs for {condition}")
    counts, edges = histogram(cos, bins)
    return {
        "condition": condition.value,
        "n_pairs": int(cos.size),
        "mean": float(cos.mean()),
        "std": float(cos.std()),
        "mean_abs": float(np.abs(cos).mean()),
        "counts": counts,
        "edges": edges,
        "cosines": cos,
    }


def _pair_mask(cond, la, lb, ka, kb):
    same_digit, same_kind = la == lb, ka == kb
    return {
        PairingCondition.SameDigitSameTransform: same_digit & same_kind,
        PairingCondition.SameDigitDiffTransform: same_digit & ~same_kind,
        PairingCondition.DiffDigitSameTransform: ~same_digit & same_kind,
        PairingCondition.DiffDigitDiffTransform: ~same_digit & ~same_kind,
    }[cond]


def pairing_histograms(Z, labels, kinds, condition, classifier=None, max_pairs=100_000, seed=0, bins=HIST_BINS):
    """Cosine similarities between difference vectors under a pairing condition.

    Trajectory pairs are always two *distinct* sequences; time indices are
    drawn uniformly. ``classifier`` holds the decision axes (rows) for
    ``VsClassifierAxis``.
    """
    condition = PairingCondition(condition)
    Z = np.asarray(Z, dtype=np.float64)
    B, T, d = Z.shape
    rng = stream(seed, "analysis.pairs", list(PairingCondition).index(condition))
    if condition is PairingCondition.RandomBaseline:
        a = _unit(rng.normal(size=(max_pairs, d)))
        b = _unit(rng.normal(size=(max_pairs, d)))
        return _summarise((a * b).sum(1), condition, bins)
    V = _unit(difference_vectors(Z))
    if condition is PairingCondition.VsClassifierAxis:
        if classifier is None:
            raise EmptyGroup("classifier axes required")
        W = _unit(np.asarray(classifier, dtype=np.float64))
        flat = V.reshape(-1, d)
        if flat.shape[0] * W.shape[0] <= max_pairs:
            cos = (flat @ W.T).ravel()
        else:
            i = rng.integers(0, len(flat), max_pairs)
            k = rng.integers(0, len(W), max_pairs)
            cos = (flat[i] * W[k]).sum(1)
        return _summarise(cos, condition, bins)
    labels, kinds = np.asarray(labels), np.asarray(kinds)
    if B < 2:
        raise EmptyGroup("need at least two trajectories")
    chosen_a, chosen_b = [], []
    need, draws = max_pairs, 0
    while need > 0 and draws < 50:
        m = max(4 * need, 10_000)
        a = rng.integers(0, B, m)
        b = rng.integers(0, B, m)
        keep = (a != b) & _pair_mask(condition, labels[a], labels[b], kinds[a], kinds[b])
        chosen_a.append(a[keep][:need])
        chosen_b.append(b[keep][:need])
        need -= min(need, int(keep.sum()))
        draws += 1
    a, b = np.concatenate(chosen_a), np.concatenate(chosen_b)
    if a.size == 0:
        raise EmptyGroup(f"no trajectory pairs satisfy {condition.value}")
    ta = rng.integers(0, T - 1, a.size)
    tb = rng.integers(0, T - 1, a.size)
    return _summarise((V[a, ta] * V[b, tb]).sum(1), condition, bins)


# ----------------------------------------------------------------------
# dimensionality


def participation_ratio_from_eigenvalues(eigs) -> float:
    eigs = np.clip(np.asarray(eigs, dtype=np.float64), 0.0, None)
    total = eigs.sum()
    if total <= 0:
        raise DegenerateCovariance("all eigenvalues vanish")
    return float(total**2 / np.sum(eigs**2))


def participation_ratio(X) -> float:
    """(sum lambda)^2 / sum lambda^2 over covariance eigenvalues of responses ``(N, d)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise ShapeMismatch("participation ratio needs an (N >= 2, d) array")
    Xc = X - X.mean(axis=0)
    if not np.any(np.abs(Xc) > 1e-12 * max(1.0, np.abs(X).max())):
        raise DegenerateCovariance("all responses are identical")
    N, d = X.shape
    # the Gram matrix shares the covariance's non-zero spectrum and is smaller when N < d
    M = Xc @ Xc.T if N < d else Xc.T @ Xc
    return participation_ratio_from_eigenvalues(np.linalg.eigvalsh(M / (N - 1)))


def group_dimensionality(Z, labels, kinds, max_all=5000, seed=0) -> dict:
    """Participation ratio within [digit, transform] groups, within digits, and overall."""
    Z = np.asarray(Z, dtype=np.float64)
    B, T, d = Z.shape
    labels, kinds = np.asarray(labels), np.asarray(kinds)
    per_group = {}
    for lab in np.unique(labels):
        for kind in np.unique(kinds):
            members = (labels == lab) & (kinds == kind)
            if members.sum() >= 1 and members.sum() * T >= 2:
                per_group[f"{int(lab)}/{int(kind)}"] = participation_ratio(Z[members].reshape(-1, d))
    if not per_group:
        raise EmptyGroup("no [digit, transform] group has enough responses")
    per_digit = {}
    for lab in np.unique(labels):
        per_digit[int(lab)] = participation_ratio(Z[labels == lab].reshape(-1, d))
    flat = Z.reshape(-1, d)
    if len(flat) > max_all:
        flat = flat[stream(seed, "analysis.pr_all").choice(len(flat), max_all, replace=False)]
    return {
        "within_digit_transform": float(np.mean(list(per_group.values()))),
        "within_digit": float(np.mean(list(per_digit.values()))),
        "all": participation_ratio(flat),
        "per_group": per_group,
        "per_digit": per_digit,
    }


# ----------------------------------------------------------------------
# robustness


def probe_accuracy(spec, params, probe, frames, labels, tap="out") -> float:
    return probe.accuracy(embed(spec, params, frames, tap), labels)


def gaussian_noise_sweep(spec, params, probe, frames, labels, sigmas=NOISE_SIGMAS, seed=0, tap="out"):
    """Accuracy of a frozen probe under i.i.d. pixel noise (clamped to [0, 1])."""
    frames = np.asarray(frames, dtype=np.float64)
    out = []
    for k, sigma in enumerate(sigmas):
        if sigma == 0:
            noisy = frames
        else:
            noise = stream(seed, "analysis.noise", k).normal(0.0, sigma, size=frames.shape)
            noisy = np.clip(frames + noise, 0.0, 1.0)
        out.append({"sigma": float(sigma), "accuracy": probe_accuracy(spec, params, probe, noisy, labels, tap)})
    return out


@dataclass
class AttackConfig:
    """Untargeted L2 PGD; ``step_size`` defaults to a tenth of the budget."""

    budget: float
    steps: int = 500
    step_size: float | None = None
    restarts: int = 1
    early_stop: bool = True  # freeze items once misclassified

    def __post_init__(self):
        if self.budget < 0:
            raise ShapeMismatch("attack budget must be non-negative")
        if self.steps < 1:
            raise ShapeMismatch("attack needs at least one step")
        if self.step_size is None:
            self.step_size = self.budget / 10.0


def _loss_grad(spec, params, probe, x, y_idx, tap):
    """Cross-entropy of the probe on the network, and its input gradient."""
    out, trace = netcore.forward(spec, params, x)
    emb = trace.flat(spec.taps[tap])
    logits = probe.logits(emb)
    p = softmax(logits)
    n = len(x)
    loss = -np.log(np.maximum(p[np.arange(n), y_idx], 1e-300))
    g_logits = p.copy()
    g_logits[np.arange(n), y_idx] -= 1.0
    g_emb = g_logits @ probe.W
    _, gx = netcore.backward(spec, params, trace, None, {spec.taps[tap]: g_emb})
    return loss, np.argmax(logits, axis=1), gx


def pgd_l2(spec, params, probe, frames, labels, cfg: AttackConfig, tap="out", seed=0):
    """Maximise the probe's cross-entropy inside an L2 ball around each input.

    Each step moves by ``step_size`` along the normalised gradient, then
    projects onto the ball of radius ``budget`` and onto the [0, 1] box.
    Returns ``(adversarial, zero_grad)`` where ``zero_grad`` flags items
    whose gradient vanished (those are returned unchanged).
    """
    x0 = np.asarray(frames, dtype=np.float64)
    zero_grad = np.zeros(len(x0), dtype=bool)
    if cfg.budget == 0:
        return x0.copy(), zero_grad
    y_idx = np.searchsorted(probe.classes, np.asarray(labels))
    axes = tuple(range(1, x0.ndim))
    best = x0.copy()
    for restart in range(cfg.restarts):
        x = x0.copy()
        if restart > 0:
            # random start uniformly inside the ball
            rng = stream(seed, "analysis.pgd.restart", restart)
            d = rng.normal(size=x0.shape)
            d /= np.sqrt((d**2).sum(axis=axes, keepdims=True))
            r = cfg.budget * rng.random((len(x0),) + (1,) * (x0.ndim - 1)) ** (1.0 / np.prod(x0.shape[1:]))
            x = np.clip(x0 + d * r, 0.0, 1.0)
        active = np.ones(len(x0), dtype=bool)
        for _ in range(cfg.steps):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            _, pred, g = _loss_grad(spec, params, probe, x[idx], y_idx[idx], tap)
            if cfg.early_stop:
                wrong = pred != y_idx[idx]
                active[idx[wrong]] = False
                idx, g = idx[~wrong], g[~wrong]
                if idx.size == 0:
                    break
            gn = np.sqrt((g**2).sum(axis=axes))
            flat = gn == 0
            if flat.any():
                zero_grad[idx[flat]] = True
                active[idx[flat]] = False
                x[idx[flat]] = x0[idx[flat]]
                idx, g, gn = idx[~flat], g[~flat], gn[~flat]
            step = cfg.step_size * g / gn.reshape((-1,) + (1,) * (x0.ndim - 1))
            delta = x[idx] + step - x0[idx]
            dn = np.sqrt((delta**2).sum(axis=axes))
            shrink = np.minimum(1.0, cfg.budget / np.maximum(dn, 1e-300))
            x[idx] = np.clip(x0[idx] + delta * shrink.reshape((-1,) + (1,) * (x0.ndim - 1)), 0.0, 1.0)
        if cfg.restarts == 1:
            best = x
        else:
            # keep whichever restart fooled the probe
            emb = embed(spec, params, x, tap)
            fooled = probe.predict(emb) != np.asarray(labels)
            best[fooled] = x[fooled]
    return best, zero_grad


def adversarial_sweep(spec, params, probe, frames, labels, budgets, tap="out", steps=500, seed=0):
    """Probe accuracy on PGD-attacked inputs for each budget (ascending)."""
    budgets = list(budgets)
    if budgets != sorted(budgets):
        raise ShapeMismatch("budgets must be sorted ascending")
    frames = np.asarray(frames, dtype=np.float64)
    labels = np.asarray(labels)
    axes = tuple(range(1, frames.ndim))
    out = []
    for eps in budgets:
        adv, zero = pgd_l2(spec, params, probe, frames, labels, AttackConfig(eps, steps), tap, seed)
        norms = np.sqrt(((adv - frames) ** 2).sum(axis=axes))
        out.append({
            "budget": float(eps),
            "accuracy": probe_accuracy(spec, params, probe, adv, labels, tap),
            "max_norm": float(norms.max()) if len(norms) else 0.0,
            "zero_grad": int(zero.sum()),
        })
    return out
