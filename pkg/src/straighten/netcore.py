"""Small feed-forward network with hand-written reverse mode.

The layer vocabulary is deliberately fixed: convolution, ReLU, average
pooling, flatten, fully connected, plus nearest upsampling and reshape
for decoders. Activations are NCHW float64 arrays. Every layer boundary
is recorded in a :class:`ForwardTrace`; named *taps* pick out the
boundaries whose activations are exported as embeddings.

Parameters live in a ``ParamSet``: a list with one dict per layer
(``{"W": ..., "b": ...}`` for weight-bearing layers, ``{}`` otherwise).
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    BadMagic,
    ChecksumMismatch,
    FileMissing,
    ShapeMismatch,
    SpecMismatch,
    TraceReused,
    TruncatedFile,
    VersionUnsupported,
)

# ----------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Conv2D:
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    kind: str = "conv"

    def out_shape(self, shape):
        C, H, W = shape
        if C != self.in_ch:
            raise ShapeMismatch(f"conv expects {self.in_ch} channels, got {C}")
        Ho = (H + 2 * self.pad - self.kernel) // self.stride + 1
        Wo = (W + 2 * self.pad - self.kernel) // self.stride + 1
        if Ho < 1 or Wo < 1:
            raise ShapeMismatch(f"conv kernel {self.kernel} does not fit input {shape}")
        return (self.out_ch, Ho, Wo)

    def param_shapes(self):
        return {"W": (self.out_ch, self.in_ch, self.kernel, self.kernel), "b": (self.out_ch,)}

    def fan_in(self):
        return self.in_ch * self.kernel * self.kernel

    def _windows(self, x):
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))
        return win[:, :, :: self.stride, :: self.stride]  # N C Ho Wo k k

    def forward(self, x, prm):
        win = self._windows(x)
        out = np.tensordot(win, prm["W"], axes=([1, 4, 5], [1, 2, 3]))  # N Ho Wo O
        out += prm["b"]
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, x, y, g, prm):
        win = self._windows(x)
        gW = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O C k k
        gb = g.sum(axis=(0, 2, 3))
        # scatter each kernel tap back onto the padded input
        k, s, p = self.kernel, self.stride, self.pad
        N, C, H, W = x.shape
        Ho, Wo = g.shape[2:]
        cols = np.tensordot(g, prm["W"], axes=([1], [0]))  # N Ho Wo C k k
        gx = np.zeros((N, C, H + 2 * p, W + 2 * p))
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += cols[..., i, j].transpose(0, 3, 1, 2)
        if p:
            gx = gx[:, :, p:-p, p:-p]
        return np.ascontiguousarray(gx), {"W": gW, "b": gb}


@dataclass(frozen=True)
class ReLU:
    kind: str = "relu"

    def out_shape(self, shape):
        return shape

    def forward(self, x, prm):
        return np.maximum(x, 0.0)

    def backward(self, x, y, g, prm):
        return g * (x > 0), {}


@dataclass(frozen=True)
class AvgPool:
    kernel: int = 2
    stride: int = 2
    kind: str = "avgpool"

    def out_shape(self, shape):
        C, H, W = shape
        Ho = (H - self.kernel) // self.stride + 1
        Wo = (W - self.kernel) // self.stride + 1
        if Ho < 1 or Wo < 1:
            raise ShapeMismatch(f"pool kernel {self.kernel} does not fit input {shape}")
        return (C, Ho, Wo)

    def forward(self, x, prm):
        win = sliding_window_view(x, (self.kernel, self.kernel), axis=(2, 3))[:, :, :: self.stride, :: self.stride]
        return win.mean(axis=(4, 5))

    def backward(self, x, y, g, prm):
        k, s = self.kernel, self.stride
        Ho, Wo = g.shape[2:]
        gx = np.zeros_like(x)
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += share
        return gx, {}


@dataclass(frozen=True)
class Flatten:
    kind: str = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, prm):
        return x.reshape(len(x), -1)

    def backward(self, x, y, g, prm):
        return g.reshape(x.shape), {}


@dataclass(frozen=True)
class FullyConnected:
    n_in: int
    n_out: int
    kind: str = "fc"

    def out_shape(self, shape):
        if shape != (self.n_in,):
            raise ShapeMismatch(f"fc expects ({self.n_in},), got {shape}")
        return (self.n_out,)

    def param_shapes(self):
        return {"W": (self.n_out, self.n_in), "b": (self.n_out,)}

    def fan_in(self):
        return self.n_in

    def forward(self, x, prm):
        return x @ prm["W"].T + prm["b"]

    def backward(self, x, y, g, prm):
        return g @ prm["W"], {"W": g.T @ x, "b": g.sum(axis=0)}


@dataclass(frozen=True)
class Upsample:
    factor: int = 2
    kind: str = "upsample"

    def out_shape(self, shape):
        C, H, W = shape
        return (C, H * self.factor, W * self.factor)

    def forward(self, x, prm):
        f = self.factor
        return x.repeat(f, axis=2).repeat(f, axis=3)

    def backward(self, x, y, g, prm):
        N, C, H, W = x.shape
        f = self.factor
        return g.reshape(N, C, H, f, W, f).sum(axis=(3, 5)), {}


@dataclass(frozen=True)
class Reshape:
    shape: tuple
    kind: str = "reshape"

    def out_shape(self, shape):
        if int(np.prod(shape)) != int(np.prod(self.shape)):
            raise ShapeMismatch(f"cannot reshape {shape} to {self.shape}")
        return tuple(self.shape)

    def forward(self, x, prm):
        return x.reshape((len(x),) + tuple(self.shape))

    def backward(self, x, y, g, prm):
        return g.reshape(x.shape), {}


LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, ReLU, AvgPool, Flatten, FullyConnected, Upsample, Reshape)}


# ----------------------------------------------------------------------
# network description


@dataclass
class NetworkSpec:
    """Layer list plus named taps.

    ``taps`` maps a name to a boundary index: 0 is the input, ``i + 1``
    the output of layer ``i``. The final boundary is always available
    under the name ``"out"``.
    """

    input_shape: tuple
    layers: list
    taps: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(layer.out_shape(self.shapes[-1]))
        self.taps = dict(self.taps)
        self.taps.setdefault("out", len(self.layers))
        for name, idx in self.taps.items():
            if not 0 <= idx <= len(self.layers):
                raise ShapeMismatch(f"tap {name!r} points at missing boundary {idx}")

    @property
    def out_dim(self) -> int:
        return int(np.prod(self.shapes[-1]))

    def boundary_names(self) -> list[str]:
        """Readable name for every boundary, e.g. ``pixel``, ``3:conv``."""
        return ["pixel"] + [f"{i + 1}:{layer.kind}" for i, layer in enumerate(self.layers)]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [asdict(l) for l in self.layers],
            "taps": self.taps,
        }

    @classmethod
    def from_dict(cls, d) -> "NetworkSpec":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            kind = ld.pop("kind")
            if "shape" in ld:
                ld["shape"] = tuple(ld["shape"])
            layers.append(LAYER_TYPES[kind](**ld))
        return cls(tuple(d["input_shape"]), layers, dict(d.get("taps", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def __eq__(self, other):
        return isinstance(other, NetworkSpec) and self.to_json() == other.to_json()


def encoder_spec(
    input_shape=(1, 32, 32),
    channels=(8, 16, 16, 32, 32, 64),
    strides=(2, 1, 2, 1, 2, 1),
    out_dim=128,
    mid_tap=3,
) -> NetworkSpec:
    """Conv/ReLU stages followed by one fully connected projection.

    ``mid_tap`` names the ReLU output of that stage ``"mid"``, the
    second straightening attachment of the robustness track. The
    flattened conv output is tapped as ``"backbone"``; the final linear
    layer plays the role of a projector.
    """
    layers = []
    c = input_shape[0]
    taps = {}
    for i, (co, s) in enumerate(zip(channels, strides)):
        layers += [Conv2D(c, co, 3, s, 1), ReLU()]
        c = co
        if i + 1 == mid_tap:
            taps["mid"] = len(layers)
    layers.append(Flatten())
    taps["backbone"] = len(layers)
    spec = NetworkSpec(input_shape, layers)
    layers.append(FullyConnected(spec.out_dim, out_dim))
    return NetworkSpec(input_shape, layers, taps)


def identity_spec(input_shape) -> NetworkSpec:
    """Single 1x1 identity-initialisable convolution (used for sanity checks)."""
    C = input_shape[0]
    return NetworkSpec(input_shape, [Conv2D(C, C, 1, 1, 0)])


# ----------------------------------------------------------------------
# parameters


def init_params(spec: NetworkSpec, rng) -> list:
    """He-normal weights (std sqrt(2 / fan_in)) and zero biases."""
    params = []
    for layer in spec.layers:
        if hasattr(layer, "param_shapes"):
            shapes = layer.param_shapes()
            std = np.sqrt(2.0 / layer.fan_in())
            params.append({"W": rng.normal(0.0, std, size=shapes["W"]), "b": np.zeros(shapes["b"])})
        else:
            params.append({})
    return params


def zero_params(spec: NetworkSpec) -> list:
    return [
        {k: np.zeros(v) for k, v in layer.param_shapes().items()} if hasattr(layer, "param_shapes") else {}
        for layer in spec.layers
    ]


def check_params(spec: NetworkSpec, params) -> None:
    if len(params) != len(spec.layers):
        raise ShapeMismatch(f"{len(params)} parameter groups for {len(spec.layers)} layers")
    for i, (layer, prm) in enumerate(zip(spec.layers, params)):
        want = layer.param_shapes() if hasattr(layer, "param_shapes") else {}
        got = {k: v.shape for k, v in prm.items()}
        if {k: tuple(v) for k, v in want.items()} != got:
            raise ShapeMismatch(f"layer {i}: parameter shapes {got}, expected {want}")


def flatten_params(params) -> np.ndarray:
    parts = [prm[k].ravel() for prm in params for k in sorted(prm)]
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten_params(vec, like) -> list:
    out, pos = [], 0
    for prm in like:
        group = {}
        for k in sorted(prm):
            n = prm[k].size
            group[k] = vec[pos : pos + n].reshape(prm[k].shape).copy()
            pos += n
        out.append(group)
    return out


def copy_params(params) -> list:
    return [{k: v.copy() for k, v in prm.items()} for prm in params]


def params_hash(params) -> str:
    return hashlib.sha256(flatten_params(params).astype("<f8").tobytes()).hexdigest()


# ----------------------------------------------------------------------
# forward / backward


class ForwardTrace:
    """Activations at every layer boundary of one forward call."""

    def __init__(self, spec, acts):
        self.spec = spec
        self.acts = acts
        self.used = False

    def tap(self, name: str) -> np.ndarray:
        return self.acts[self.spec.taps[name]]

    def flat(self, boundary: int) -> np.ndarray:
        a = self.acts[boundary]
        return a.reshape(len(a), -1)


def forward(spec: NetworkSpec, params, x):
    """Run the network on a batch ``x`` of shape ``(N,) + input_shape``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise ShapeMismatch(f"input {x.shape[1:]} does not match spec input {spec.input_shape}")
    acts = [x]
    for layer, prm in zip(spec.layers, params):
        acts.append(layer.forward(acts[-1], prm))
    return acts[-1], ForwardTrace(spec, acts)


def backward(spec: NetworkSpec, params, trace: ForwardTrace, grad_output=None, tap_grads=None):
    """Reverse pass. Returns ``(param_grads, input_grad)``.

    ``tap_grads`` maps boundary indices (or tap names) to extra
    gradients injected when the pass reaches that boundary, which is how
    losses attached to intermediate layers are back-propagated.
    """
    if trace.used:
        raise TraceReused("a ForwardTrace can only be consumed by one backward call")
    if trace.spec is not spec and trace.spec != spec:
        raise ShapeMismatch("trace was produced by a different network spec")
    trace.used = True
    acts = trace.acts
    extra = {}
    for key, g in (tap_grads or {}).items():
        idx = spec.taps[key] if isinstance(key, str) else int(key)
        g = np.asarray(g, dtype=np.float64).reshape(acts[idx].shape)
        extra[idx] = extra[idx] + g if idx in extra else g
    n = len(spec.layers)
    if grad_output is None:
        g = np.zeros_like(acts[n])
    else:
        g = np.asarray(grad_output, dtype=np.float64)
        if g.shape != acts[n].shape:
            raise ShapeMismatch(f"grad_output {g.shape} does not match output {acts[n].shape}")
    if n in extra:
        g = g + extra[n]
    grads = [None] * n
    for i in range(n - 1, -1, -1):
        g, grads[i] = spec.layers[i].backward(acts[i], acts[i + 1], g, params[i])
        if i in extra:
            g = g + extra[i]
    return grads, g


def numerical_gradient(loss_fn, params, step=1e-5):
    """Central differences of ``loss_fn(params)`` for every coordinate.

    ``params`` may be a ParamSet or a flat array; the result has the same
    structure.
    """
    if isinstance(params, np.ndarray):
        vec = params.astype(np.float64).copy()
        wrap = lambda v: v  # noqa: E731
    else:
        vec = flatten_params(params)
        wrap = lambda v: unflatten_params(v, params)  # noqa: E731
    grad = np.zeros_like(vec)
    for i in range(vec.size):
        old = vec[i]
        vec[i] = old + step
        hi = loss_fn(wrap(vec))
        vec[i] = old - step
        lo = loss_fn(wrap(vec))
        vec[i] = old
        grad[i] = (hi - lo) / (2 * step)
    return grad if isinstance(params, np.ndarray) else unflatten_params(grad, params)


# ----------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"STRW"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(spec: NetworkSpec, params) -> bytes:
    check_params(spec, params)
    spec_json = spec.to_json().encode("utf-8")
    payload = flatten_params(params).astype("<f8").tobytes()
    body = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(spec_json)) + spec_json
    body += struct.pack("<Q", len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(spec: NetworkSpec, params, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(spec, params))


def load_checkpoint(path, expected_spec: NetworkSpec | None = None):
    """Return ``(spec, params)``; nothing is returned from a damaged file."""
    path = Path(path)
    if not path.exists():
        raise FileMissing(str(path))
    raw = path.read_bytes()
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: too short for a checkpoint header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: magic {raw[:4]!r}")
    version, n_spec = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionUnsupported(f"{path}: checkpoint version {version}")
    pos = 12 + n_spec
    if len(raw) < pos + 8 + 4:
        raise TruncatedFile(f"{path}: truncated spec block")
    (n_payload,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if len(raw) != pos + n_payload + 4:
        raise TruncatedFile(f"{path}: payload length {len(raw) - pos - 4}, header says {n_payload}")
    (stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored:
        raise ChecksumMismatch(f"{path}: checksum mismatch")
    spec = NetworkSpec.from_dict(json.loads(raw[12 : 12 + n_spec].decode("utf-8")))
    if expected_spec is not None and spec != expected_spec:
        raise SpecMismatch(f"{path}: stored architecture differs from the expected one")
    like = zero_params(spec)
    vec = np.frombuffer(raw, dtype="<f8", count=n_payload // 8, offset=pos).astype(np.float64)
    if vec.size != flatten_params(like).size:
        raise SpecMismatch(f"{path}: {vec.size} parameters for a spec needing {flatten_params(like).size}")
    return spec, unflatten_params(vec, like)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
