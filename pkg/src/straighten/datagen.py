"""Synthetic video sequences rendered from static images.

A sequence is one source image pushed through a smoothly varying
geometric transform (translation, rescale or rotation) plus linear
photometric ramps. Every frame carries its ground-truth attributes so
that probes can later try to read them back out of a representation.

Geometry conventions
--------------------
Two layouts are supported:

``paste``
    The source image is drawn into a ``window``-sized box on a black
    ``canvas`` (the sequential-MNIST layout). The box moves, scales about
    its centre or rotates about its centre.
``crop``
    The source image *is* the canvas and a ``window``-sized crop box
    moves over it (the sequential-CIFAR layout); samples falling outside
    the source are edge-clamped.

Pixel centres sit at integer coordinates. Positive angles rotate the
content counter-clockwise as displayed (rows increase downwards), so a
90 degree rotation of a square image equals ``np.rot90``.

Truth ``x``/``y`` are the box-centre offsets from the canvas centre in
output pixels; mirroring therefore negates ``x`` exactly.
"""
from __future__ import annotations

import gzip
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    ChecksumMismatch,
    CountMismatch,
    FileMissing,
    HeaderInconsistent,
    InvalidGeometry,
    InvalidRange,
    TruncatedFile,
    VersionUnsupported,
)
from .rng import stream

KINDS = ("translation", "rescale", "rotation")
TRUTH_FIELDS = ("x", "y", "scale", "angle", "brightness", "contrast", "saturation", "hue")
LUMA = np.array([0.299, 0.587, 0.114])

# reversal-event bits, one per geometric parameter
EVENT_X, EVENT_Y, EVENT_SCALE = 1, 2, 4
_REVERSAL_TOL = 1e-9


@dataclass
class SourceImage:
    pixels: np.ndarray  # (H, W) or (H, W, 3), values in [0, 1]
    id: int
    label: int

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim not in (2, 3) or p.shape[0] < 1 or p.shape[1] < 1:
            raise InvalidGeometry(f"bad source image shape {p.shape}")
        if p.ndim == 3 and p.shape[2] != 3:
            raise InvalidGeometry(f"colour sources need 3 channels, got {p.shape[2]}")
        if p.min() < 0.0 or p.max() > 1.0:
            raise InvalidRange("source intensities must lie in [0, 1]")
        self.pixels = p

    @property
    def channels_first(self) -> np.ndarray:
        if self.pixels.ndim == 2:
            return self.pixels[None]
        return np.moveaxis(self.pixels, 2, 0)


@dataclass
class GenConfig:
    """Rendering parameters. Ranges are ``(low, high)`` pairs sampled uniformly.

    The default values describe the desk-scale sequential-digits track;
    :func:`cifar_style_config` gives the three-frame colour preset.
    """

    n_sequences: int = 5000
    T: int = 20
    canvas: int = 32
    window: int = 16
    out_size: int = 32
    mode: str = "paste"
    kinds: tuple = KINDS
    speed_range: tuple = (1.5, 3.0)  # pixels / frame
    scale_range: tuple = (0.6, 1.6)  # reversal bounds for rescaling
    scale_rate_range: tuple = (0.05, 0.1)  # scale units / frame
    angle_rate_range: tuple = (10.0, 20.0)  # degrees / frame, random sign
    angle0_range: tuple = (0.0, 0.0)
    brightness_range: tuple = (1.0, 1.0)
    contrast_range: tuple = (1.0, 1.0)
    saturation_range: tuple = (1.0, 1.0)
    hue_range: tuple = (0.0, 0.0)  # fraction of a full hue turn
    p_flip: float = 0.0
    p_grayscale: float = 0.0
    p_solarize: float = 0.0
    solarize_threshold: float = 0.5
    split: str = "all"  # train | test | all, split on source id
    test_every: int = 5  # source ids divisible by this are test images


def cifar_style_config(**overrides) -> GenConfig:
    cfg = GenConfig(
        T=3,
        mode="crop",
        canvas=32,
        window=24,
        out_size=32,
        kinds=("translation", "rescale"),
        scale_range=(0.7, 1.3),
        brightness_range=(0.6, 1.4),
        contrast_range=(0.6, 1.4),
        saturation_range=(0.6, 1.4),
        hue_range=(-0.1, 0.1),
        p_flip=0.5,
        p_grayscale=0.1,
        p_solarize=0.1,
    )
    return replace(cfg, **overrides)


@dataclass
class TransformSchedule:
    kind: str
    T: int
    canvas: int
    window: int
    x: np.ndarray  # box top-left, canvas pixels
    y: np.ndarray
    scale: np.ndarray
    angle: np.ndarray  # degrees
    brightness: np.ndarray = None
    contrast: np.ndarray = None
    saturation: np.ndarray = None
    hue: np.ndarray = None
    flip: bool = False
    grayscale: np.ndarray = None
    solarize: np.ndarray = None
    events: np.ndarray = None  # uint8 reversal bitmask per frame

    def __post_init__(self):
        ones, zeros = np.ones(self.T), np.zeros(self.T)
        for name, default in (("brightness", ones), ("contrast", ones), ("saturation", ones), ("hue", zeros)):
            if getattr(self, name) is None:
                setattr(self, name, default.copy())
        for name in ("grayscale", "solarize"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.T, dtype=bool))
        if self.events is None:
            self.events = np.zeros(self.T, dtype=np.uint8)
        for name in ("x", "y", "scale", "angle", "brightness", "contrast", "saturation", "hue"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.T,):
                raise InvalidGeometry(f"{name} track has shape {arr.shape}, expected ({self.T},)")
            setattr(self, name, arr)


@dataclass
class SequenceSample:
    frames: np.ndarray  # (T, C, H, W) float32
    truth: np.ndarray  # (T, 8) float64, columns TRUTH_FIELDS
    label: int
    kind: str
    source_id: int = 0
    flipped: bool = False
    events: np.ndarray = None  # (T,) uint8
    order: np.ndarray = None  # (T,) original frame index

    def __post_init__(self):
        T = len(self.frames)
        if self.events is None:
            self.events = np.zeros(T, dtype=np.uint8)
        if self.order is None:
            self.order = np.arange(T, dtype=np.uint16)
        if self.truth.shape != (T, len(TRUTH_FIELDS)):
            raise InvalidGeometry("truth track length must equal frame count")

    @property
    def T(self) -> int:
        return len(self.frames)

    def attribute(self, name: str) -> np.ndarray:
        return self.truth[:, TRUTH_FIELDS.index(name)]


def samples_equal(a: SequenceSample, b: SequenceSample) -> bool:
    """Bitwise equality of every field."""
    return (
        a.frames.dtype == b.frames.dtype
        and a.frames.shape == b.frames.shape
        and a.frames.tobytes() == b.frames.tobytes()
        and a.truth.tobytes() == b.truth.tobytes()
        and np.array_equal(a.events, b.events)
        and np.array_equal(a.order, b.order)
        and (a.label, a.kind, a.source_id, bool(a.flipped)) == (b.label, b.kind, b.source_id, bool(b.flipped))
    )


# ----------------------------------------------------------------------
# IDX source files

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _open_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileMissing(str(path))
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX array (MNIST distribution format)."""
    raw = _open_bytes(path)
    if len(raw) < 8:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is too short for an IDX header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic == IDX_IMAGES_MAGIC:
        if len(raw) < 16:
            raise TruncatedFile(f"{path}: incomplete image header")
        rows, cols = struct.unpack(">II", raw[8:16])
        shape, offset = (count, rows, cols), 16
    elif magic == IDX_LABELS_MAGIC:
        shape, offset = (count,), 8
    else:
        raise BadMagic(f"{path}: magic 0x{magic:08x}")
    need = int(np.prod(shape))
    if len(raw) - offset < need:
        raise TruncatedFile(f"{path}: header promises {need} bytes, found {len(raw) - offset}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=offset).reshape(shape)


def write_idx(path, array) -> None:
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim == 3:
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *array.shape)
    elif array.ndim == 1:
        header = struct.pack(">II", IDX_LABELS_MAGIC, array.shape[0])
    else:
        raise InvalidGeometry("IDX writer handles (N, H, W) images or (N,) labels")
    Path(path).write_bytes(header + array.tobytes())


def load_idx(images_path, labels_path=None) -> list[SourceImage]:
    """Load IDX images (and optionally labels) as unit-interval sources."""
    images = read_idx(images_path)
    if images.ndim != 3:
        raise BadMagic(f"{images_path} holds labels, not images")
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise BadMagic(f"{labels_path} holds images, not labels")
        if len(labels) != len(images):
            raise CountMismatch(f"{len(images)} images but {len(labels)} labels")
    else:
        labels = np.full(len(images), -1)
    return [SourceImage(img / 255.0, i, int(lab)) for i, (img, lab) in enumerate(zip(images, labels))]


# ----------------------------------------------------------------------
# schedules


def _check_range(name, rng_, positive=False):
    lo, hi = rng_
    if lo > hi or (positive and lo <= 0):
        raise InvalidRange(f"{name} range {rng_} is invalid")


def bounce_track(start: float, step: float, lo: float, hi: float, T: int):
    """Constant-magnitude walk on ``[lo, hi]`` that reverses before leaving it.

    Returns the track and a bool array marking frames at which the
    direction of travel flips.
    """
    track = np.empty(T)
    flips = np.zeros(T, dtype=bool)
    track[0] = start
    for t in range(1, T):
        nxt = track[t - 1] + step
        if nxt > hi + _REVERSAL_TOL or nxt < lo - _REVERSAL_TOL:
            step = -step
            nxt = track[t - 1] + step
            flips[t - 1] = t >= 2
        track[t] = nxt
    return track, flips


def _uniform(rng, bounds):
    lo, hi = bounds
    return lo if lo == hi else rng.uniform(lo, hi)


def make_translation_schedule(rng, cfg: GenConfig, start=None, velocity=None) -> TransformSchedule:
    """Constant-velocity box motion bouncing off the canvas edges."""
    if cfg.window > cfg.canvas:
        raise InvalidGeometry(f"window {cfg.window} exceeds canvas {cfg.canvas}")
    _check_range("speed", cfg.speed_range, positive=True)
    span = float(cfg.canvas - cfg.window)
    if start is None:
        start = rng.uniform(0.0, span, size=2)
    if velocity is None:
        speed = _uniform(rng, cfg.speed_range)
        heading = rng.uniform(0.0, 2 * np.pi)
        velocity = (speed * np.cos(heading), speed * np.sin(heading))
    if span > 0 and max(abs(velocity[0]), abs(velocity[1])) > span:
        raise InvalidGeometry("speed exceeds the free span of the canvas")
    x, fx = bounce_track(start[0], velocity[0], 0.0, span, cfg.T)
    y, fy = bounce_track(start[1], velocity[1], 0.0, span, cfg.T)
    events = fx * EVENT_X | fy * EVENT_Y
    return TransformSchedule(
        "translation", cfg.T, cfg.canvas, cfg.window, x, y,
        np.ones(cfg.T), np.zeros(cfg.T), events=events.astype(np.uint8),
    )


def make_rescale_schedule(rng, cfg: GenConfig, start=None, rate=None) -> TransformSchedule:
    """Centred box whose scale ramps linearly and reverses at the range bounds."""
    s_min, s_max = cfg.scale_range
    if not 0 < s_min < s_max:
        raise InvalidGeometry(f"scale range {cfg.scale_range} must satisfy 0 < min < max")
    if start is None:
        start = rng.uniform(s_min, s_max)
    if rate is None:
        rate = _uniform(rng, cfg.scale_rate_range) * rng.choice([-1.0, 1.0])
    if abs(rate) > s_max - s_min:
        raise InvalidGeometry("scale rate exceeds the scale range")
    scale, flips = bounce_track(start, rate, s_min, s_max, cfg.T)
    centre = np.full(cfg.T, (cfg.canvas - cfg.window) / 2.0)
    return TransformSchedule(
        "rescale", cfg.T, cfg.canvas, cfg.window, centre, centre.copy(),
        scale, np.zeros(cfg.T), events=(flips * EVENT_SCALE).astype(np.uint8),
    )


def make_rotation_schedule(rng, cfg: GenConfig, start=None, rate=None) -> TransformSchedule:
    """Centred box rotating at a constant angular rate (degrees / frame)."""
    if cfg.T < 3:
        raise InvalidGeometry("rotation sequences need T >= 3")
    if start is None:
        start = _uniform(rng, cfg.angle0_range)
    if rate is None:
        rate = _uniform(rng, cfg.angle_rate_range) * rng.choice([-1.0, 1.0])
    angle = start + rate * np.arange(cfg.T)
    centre = np.full(cfg.T, (cfg.canvas - cfg.window) / 2.0)
    return TransformSchedule(
        "rotation", cfg.T, cfg.canvas, cfg.window, centre, centre.copy(), np.ones(cfg.T), angle,
    )


def linear_ramp(start: float, end: float, T: int) -> np.ndarray:
    if T == 1:
        return np.array([float(start)])
    return start + (end - start) * np.arange(T) / (T - 1)


def make_photometric_schedule(rng, cfg: GenConfig) -> dict:
    """Linear ramps for brightness, contrast, saturation and hue."""
    for name in ("brightness", "contrast", "saturation"):
        _check_range(name, getattr(cfg, f"{name}_range"), positive=True)
    _check_range("hue", cfg.hue_range)
    tracks = {}
    for name in ("brightness", "contrast", "saturation", "hue"):
        bounds = getattr(cfg, f"{name}_range")
        tracks[name] = linear_ramp(_uniform(rng, bounds), _uniform(rng, bounds), cfg.T)
    return tracks


_SCHEDULERS = {
    "translation": make_translation_schedule,
    "rescale": make_rescale_schedule,
    "rotation": make_rotation_schedule,
}


def make_schedule(rng, cfg: GenConfig, kind: str) -> TransformSchedule:
    sched = _SCHEDULERS[kind](rng, cfg)
    for name, track in make_photometric_schedule(rng, cfg).items():
        setattr(sched, name, track)
    sched.flip = bool(rng.random() < cfg.p_flip)
    sched.grayscale = rng.random(cfg.T) < cfg.p_grayscale
    sched.solarize = rng.random(cfg.T) < cfg.p_solarize
    return sched


# ----------------------------------------------------------------------
# pixel operations


def bilinear_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray, boundary: str) -> np.ndarray:
    """Sample ``img`` (C, H, W) at fractional coordinates.

    ``boundary`` is ``"zero"`` (outside reads as 0) or ``"clamp"``.
    """
    C, H, W = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros((C,) + rows.shape)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            w = wr * wc
            if boundary == "clamp":
                vals = img[:, np.clip(rr, 0, H - 1), np.clip(cc, 0, W - 1)]
            else:
                inside = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
                vals = img[:, np.clip(rr, 0, H - 1), np.clip(cc, 0, W - 1)] * inside
            # skip exact-zero weights so identity maps stay bitwise exact
            out += np.where(w == 0.0, 0.0, w * vals)
    return out


def source_coordinates(src_hw, out_size, canvas, window, x, y, scale, angle, mode):
    """Inverse map: source (row, col) sampled by every output pixel."""
    h, w = src_hw
    o = np.arange(out_size, dtype=np.float64)
    theta = np.deg2rad(angle)
    cos, sin = np.cos(theta), np.sin(theta)
    half = (window - 1) / 2.0
    if mode == "paste":
        p = (o + 0.5) * canvas / out_size - 0.5
        pr, pc = np.meshgrid(p - (y + half), p - (x + half), indexing="ij")
        qc = (pc * cos - pr * sin) / scale + half
        qr = (pc * sin + pr * cos) / scale + half
        return (qr + 0.5) * h / window - 0.5, (qc + 0.5) * w / window - 0.5
    if mode == "crop":
        q = (o + 0.5) * window / out_size - 0.5 - half
        rr, rc = np.meshgrid(q * scale, q * scale, indexing="ij")
        pc = rc * cos + rr * sin + x + half
        pr = -rc * sin + rr * cos + y + half
        return (pr + 0.5) * h / canvas - 0.5, (pc + 0.5) * w / canvas - 0.5
    raise InvalidGeometry(f"unknown layout mode {mode!r}")


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    from matplotlib.colors import rgb_to_hsv as _rgb_to_hsv

    return np.moveaxis(_rgb_to_hsv(np.moveaxis(rgb, 0, -1)), -1, 0)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    from matplotlib.colors import hsv_to_rgb as _hsv_to_rgb

    return np.moveaxis(_hsv_to_rgb(np.moveaxis(hsv, 0, -1)), -1, 0)


def luminance(frame: np.ndarray) -> np.ndarray:
    if frame.shape[0] == 1:
        return frame[0]
    return np.tensordot(LUMA, frame, axes=1)


def apply_photometric(frame, brightness=1.0, contrast=1.0, saturation=1.0, hue=0.0) -> np.ndarray:
    """Brightness, contrast, saturation then hue, clamping after each step.

    ``frame`` is (C, H, W) with C in {1, 3}; saturation and hue leave
    single-channel frames untouched.
    """
    if min(brightness, contrast, saturation) < 0:
        raise InvalidRange("photometric factors must be non-negative")
    out = np.asarray(frame, dtype=np.float64)
    if brightness != 1.0:
        out = np.clip(out * brightness, 0.0, 1.0)
    if contrast != 1.0:
        mean = luminance(out).mean()
        out = np.clip(mean + contrast * (out - mean), 0.0, 1.0)
    if out.shape[0] == 3:
        if saturation != 1.0:
            gray = luminance(out)[None]
            out = np.clip(gray + saturation * (out - gray), 0.0, 1.0)
        if hue != 0.0:
            hsv = rgb_to_hsv(out)
            hsv[0] = np.mod(hsv[0] + hue, 1.0)
            out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return out


def grayscale(frame: np.ndarray) -> np.ndarray:
    if frame.shape[0] == 1:
        return frame.copy()
    return np.repeat(luminance(frame)[None], frame.shape[0], axis=0).astype(frame.dtype)


def solarize(frame: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.where(frame >= threshold, 1.0 - frame, frame).astype(frame.dtype)


def hflip(sample: SequenceSample) -> SequenceSample:
    """Mirror every frame left-right; negates truth x and angle."""
    truth = sample.truth.copy()
    truth[:, 0] = -truth[:, 0]
    truth[:, 3] = -truth[:, 3]
    return replace(
        sample,
        frames=np.ascontiguousarray(sample.frames[..., ::-1]),
        truth=truth,
        flipped=not sample.flipped,
        events=sample.events.copy(),
        order=sample.order.copy(),
    )


def reverse_time(sample: SequenceSample) -> SequenceSample:
    return replace(
        sample,
        frames=np.ascontiguousarray(sample.frames[::-1]),
        truth=np.ascontiguousarray(sample.truth[::-1]),
        events=sample.events[::-1].copy(),
        order=sample.order[::-1].copy(),
    )


def shuffle_frames(sample: SequenceSample, rng) -> SequenceSample:
    """Apply one random permutation to frames, truth rows and event flags."""
    perm = rng.permutation(sample.T)
    return permute_frames(sample, perm)


def permute_frames(sample: SequenceSample, perm) -> SequenceSample:
    perm = np.asarray(perm)
    return replace(
        sample,
        frames=np.ascontiguousarray(sample.frames[perm]),
        truth=np.ascontiguousarray(sample.truth[perm]),
        events=sample.events[perm].copy(),
        order=sample.order[perm].copy(),
    )


# ----------------------------------------------------------------------
# rendering


def render_sequence(src: SourceImage, sched: TransformSchedule, out_size: int, mode: str = "paste") -> SequenceSample:
    """Render every frame of ``sched`` and record its truth track."""
    if sched.window > sched.canvas:
        raise InvalidGeometry(f"window {sched.window} exceeds canvas {sched.canvas}")
    if np.any(sched.scale <= 0):
        raise InvalidGeometry("scale factors must be positive")
    img = src.channels_first
    if mode == "crop" and img.shape[1:] != (sched.canvas, sched.canvas):
        raise InvalidGeometry(f"crop mode needs a {sched.canvas}x{sched.canvas} source, got {img.shape[1:]}")
    boundary = "zero" if mode == "paste" else "clamp"
    T = sched.T
    frames = np.empty((T, img.shape[0], out_size, out_size), dtype=np.float32)
    for t in range(T):
        rows, cols = source_coordinates(
            img.shape[1:], out_size, sched.canvas, sched.window,
            sched.x[t], sched.y[t], sched.scale[t], sched.angle[t], mode,
        )
        frame = bilinear_sample(img, rows, cols, boundary)
        frame = apply_photometric(frame, sched.brightness[t], sched.contrast[t], sched.saturation[t], sched.hue[t])
        if sched.grayscale[t]:
            frame = grayscale(frame)
        if sched.solarize[t]:
            frame = solarize(frame)
        frames[t] = np.clip(frame, 0.0, 1.0)

    to_out = out_size / sched.canvas
    centre = (sched.canvas - 1) / 2.0
    half = (sched.window - 1) / 2.0
    truth = np.stack(
        [
            (sched.x + half - centre) * to_out,
            (sched.y + half - centre) * to_out,
            sched.scale,
            sched.angle,
            sched.brightness,
            sched.contrast,
            sched.saturation,
            sched.hue,
        ],
        axis=1,
    )
    sample = SequenceSample(frames, truth, src.label, sched.kind, src.id, False, sched.events.copy())
    return hflip(sample) if sched.flip else sample


# ----------------------------------------------------------------------
# datasets


class SequenceDataset:
    """Column store of equally shaped sequences."""

    def __init__(self, frames, truth, labels, kinds, source_ids, flipped, events, order, label_names=None):
        self.frames = np.asarray(frames, dtype=np.float32)
        self.truth = np.asarray(truth, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int32)
        self.kinds = np.asarray(kinds, dtype=np.uint8)
        self.source_ids = np.asarray(source_ids, dtype=np.uint32)
        self.flipped = np.asarray(flipped, dtype=np.uint8)
        self.events = np.asarray(events, dtype=np.uint8)
        self.order = np.asarray(order, dtype=np.uint16)
        if label_names is None:
            label_names = {int(l): str(l) for l in np.unique(self.labels)}
        self.label_names = dict(label_names)
        n = len(self.frames)
        for name in ("truth", "labels", "kinds", "source_ids", "flipped", "events", "order"):
            if len(getattr(self, name)) != n:
                raise HeaderInconsistent(f"column {name} has {len(getattr(self, name))} rows, expected {n}")

    @classmethod
    def from_samples(cls, samples, label_names=None, frame_shape=None):
        samples = list(samples)
        if not samples:
            shape = frame_shape or (0, 1, 1, 1)
            T = shape[0]
            return cls(
                np.zeros((0,) + tuple(shape), np.float32), np.zeros((0, T, 8)), [], [], [], [], np.zeros((0, T)),
                np.zeros((0, T)), label_names,
            )
        shapes = {s.frames.shape for s in samples}
        if len(shapes) != 1:
            raise HeaderInconsistent(f"samples have differing frame shapes {shapes}")
        return cls(
            np.stack([s.frames for s in samples]),
            np.stack([s.truth for s in samples]),
            [s.label for s in samples],
            [KINDS.index(s.kind) for s in samples],
            [s.source_id for s in samples],
            [s.flipped for s in samples],
            np.stack([s.events for s in samples]),
            np.stack([s.order for s in samples]),
            label_names,
        )

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i) -> SequenceSample:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        return SequenceSample(
            self.frames[i].copy(), self.truth[i].copy(), int(self.labels[i]), KINDS[self.kinds[i]],
            int(self.source_ids[i]), bool(self.flipped[i]), self.events[i].copy(), self.order[i].copy(),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def T(self) -> int:
        return self.frames.shape[1]

    @property
    def frame_shape(self) -> tuple:
        return self.frames.shape[2:]

    def subset(self, idx) -> "SequenceDataset":
        idx = np.asarray(idx)
        return SequenceDataset(
            self.frames[idx], self.truth[idx], self.labels[idx], self.kinds[idx], self.source_ids[idx],
            self.flipped[idx], self.events[idx], self.order[idx], self.label_names,
        )

    def kind_mask(self, kind: str) -> np.ndarray:
        return self.kinds == KINDS.index(kind)

    def attribute(self, name: str) -> np.ndarray:
        """(N, T) truth column."""
        return self.truth[:, :, TRUTH_FIELDS.index(name)]


DATASET_MAGIC = b"STRQ"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<4sIIIIIII")  # magic version count T C H W n_labels
_LABEL_ENTRY = struct.Struct("<i16s")


def _record_dtype(T, C, H, W) -> np.dtype:
    return np.dtype(
        [
            ("label", "<i4"),
            ("kind", "u1"),
            ("flipped", "u1"),
            ("source_id", "<u4"),
            ("events", "u1", (T,)),
            ("order", "<u2", (T,)),
            ("truth", "<f8", (T, len(TRUTH_FIELDS))),
            ("frames", "<f4", (T, C, H, W)),
        ]
    )


def dataset_bytes(data) -> bytes:
    if not isinstance(data, SequenceDataset):
        data = SequenceDataset.from_samples(data)
    N, T, C, H, W = data.frames.shape
    header = _DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, N, T, C, H, W, len(data.label_names))
    for label, name in sorted(data.label_names.items()):
        header += _LABEL_ENTRY.pack(label, name.encode("utf-8")[:16])
    rec = np.zeros(N, dtype=_record_dtype(T, C, H, W))
    rec["label"], rec["kind"], rec["flipped"] = data.labels, data.kinds, data.flipped
    rec["source_id"], rec["events"], rec["order"] = data.source_ids, data.events, data.order
    rec["truth"], rec["frames"] = data.truth, data.frames
    body = header + rec.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def write_dataset(data, path) -> None:
    """Write samples (list or :class:`SequenceDataset`) to a STRQ file."""
    Path(path).write_bytes(dataset_bytes(data))


def read_dataset(path) -> SequenceDataset:
    path = Path(path)
    if not path.exists():
        raise FileMissing(str(path))
    raw = path.read_bytes()
    if len(raw) < _DS_HEADER.size + 4:
        raise TruncatedFile(f"{path}: too short for a dataset header")
    magic, version, N, T, C, H, W, n_labels = _DS_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise BadMagic(f"{path}: magic {magic!r}")
    if version != DATASET_VERSION:
        raise VersionUnsupported(f"{path}: dataset version {version}")
    rdt = _record_dtype(T, C, H, W)
    offset = _DS_HEADER.size + n_labels * _LABEL_ENTRY.size
    if len(raw) != offset + N * rdt.itemsize + 4:
        raise HeaderInconsistent(f"{path}: size {len(raw)} does not match header ({N} records)")
    (stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored:
        raise ChecksumMismatch(f"{path}: checksum mismatch")
    names = {}
    for k in range(n_labels):
        label, name = _LABEL_ENTRY.unpack_from(raw, _DS_HEADER.size + k * _LABEL_ENTRY.size)
        names[label] = name.rstrip(b"\0").decode("utf-8")
    rec = np.frombuffer(raw, dtype=rdt, count=N, offset=offset)
    return SequenceDataset(
        rec["frames"].copy(), rec["truth"].copy(), rec["label"], rec["kind"], rec["source_id"],
        rec["flipped"], rec["events"].copy(), rec["order"].copy(), names,
    )


def select_sources(sources, cfg: GenConfig):
    if cfg.split == "all":
        return list(sources)
    is_test = lambda s: s.id % cfg.test_every == 0  # noqa: E731
    if cfg.split == "test":
        return [s for s in sources if is_test(s)]
    if cfg.split == "train":
        return [s for s in sources if not is_test(s)]
    raise InvalidRange(f"unknown split {cfg.split!r}")


def render_one(sources, cfg: GenConfig, seed: int, index: int) -> SequenceSample:
    """Sample ``index`` of the dataset defined by ``(sources, cfg, seed)``."""
    rng = stream(seed, "datagen.sample", index)
    src = sources[rng.integers(len(sources))]
    kind = cfg.kinds[rng.integers(len(cfg.kinds))]
    sched = make_schedule(rng, cfg, kind)
    return render_sequence(src, sched, cfg.out_size, cfg.mode)


def _render_chunk(args):
    sources, cfg, seed, lo, hi = args
    return [render_one(sources, cfg, seed, i) for i in range(lo, hi)]


def generate_dataset(sources, cfg: GenConfig, seed: int, workers: int = 1) -> SequenceDataset:
    pool = select_sources(sources, cfg)
    if not pool:
        raise InvalidRange(f"no source images left for split {cfg.split!r}")
    n = cfg.n_sequences
    if workers <= 1 or n < 64:
        samples = [render_one(pool, cfg, seed, i) for i in range(n)]
    else:
        bounds = np.linspace(0, n, workers * 4 + 1).astype(int)
        jobs = [(pool, cfg, seed, lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
        with ProcessPoolExecutor(workers) as ex:
            samples = [s for chunk in ex.map(_render_chunk, jobs) for s in chunk]
    names = {int(l): str(l) for l in sorted({s.label for s in pool})}
    C = pool[0].channels_first.shape[0]
    return SequenceDataset.from_samples(samples, names, frame_shape=(cfg.T, C, cfg.out_size, cfg.out_size))
