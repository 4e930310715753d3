"""Mini-batch SGD training of a network under any objective."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import netcore
from .datagen import SequenceDataset, read_dataset
from .errors import ConfigInvalid, IndexOutOfRange, NonFiniteLoss, ShapeMismatch
from .objectives import ObjectiveConfig, sample_t0, straightness, total_loss
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class NetConfig:
    channels: tuple = (8, 16, 16, 32, 32, 64)
    strides: tuple = (2, 1, 2, 1, 2, 1)
    out_dim: int = 128
    mid_tap: int = 3

    def build(self, frame_shape) -> netcore.NetworkSpec:
        if len(self.channels) != len(self.strides):
            raise ConfigInvalid("channels and strides need the same length")
        return netcore.encoder_spec(tuple(frame_shape), tuple(self.channels), tuple(self.strides), self.out_dim, self.mid_tap)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    dataset: str = ""
    checkpoint_every: int = 0  # steps; 0 = final checkpoint only
    window: int = 0  # frames drawn per sequence each step; 0 = all
    window_sampling: str = "auto"  # "contiguous", "subset", or "auto" (subset for pure invariance)
    shuffle_frames: bool = False  # train on temporally shuffled sequences
    max_steps: int = 0  # 0 = no cap
    grad_clip: float = 0.0  # global-norm clip; 0 = off

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise ConfigInvalid("batch_size must be at least 2")
        if self.lr < 0:
            raise ConfigInvalid("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigInvalid("momentum must lie in [0, 1)")
        if self.window and self.window < 3 and self.objective.kind != "invariance":
            raise ConfigInvalid("straightening needs windows of at least 3 frames")
        if self.window_sampling not in ("auto", "contiguous", "subset"):
            raise ConfigInvalid(f"unknown window_sampling {self.window_sampling!r}")
        if self.window_sampling == "subset" and self.objective.kind != "invariance":
            raise ConfigInvalid("straightening terms need contiguous windows")
        self.objective.validate()
        return self

    def sampling(self) -> str:
        if self.window_sampling == "auto":
            return "subset" if self.objective.kind == "invariance" else "contiguous"
        return self.window_sampling


# ----------------------------------------------------------------------


def sgd_step(params, grads, state, lr, momentum=0.9, weight_decay=0.0):
    """Heavy-ball SGD with L2 weight decay folded into the gradient.

    ``state`` holds the velocity buffers (``None`` on the first call).
    Returns ``(params, state)``; the inputs are not modified.
    """
    if len(params) != len(grads):
        raise ShapeMismatch("parameter and gradient lists differ in length")
    if state is None:
        state = [{k: np.zeros_like(v) for k, v in prm.items()} for prm in params]
    new_params, new_state = [], []
    for prm, grd, vel in zip(params, grads, state):
        p_out, v_out = {}, {}
        for k, p in prm.items():
            g = grd[k]
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient {g.shape} does not match parameter {p.shape}")
            v = momentum * vel[k] + g + weight_decay * p
            p_out[k] = p - lr * v
            v_out[k] = v
        new_params.append(p_out)
        new_state.append(v_out)
    return new_params, new_state


def sequence_permutations(n_seq, T, seed):
    """Fixed per-sequence frame permutations for the shuffled-order control."""
    return np.stack([stream(seed, "trainer.shuffle", i).permutation(T) for i in range(n_seq)])


def assemble_batch(dataset: SequenceDataset, indices, select=None, perms=None):
    """Stack frames of the chosen sequences.

    ``select`` optionally holds per-sequence frame indices ``(B, T')``.
    Returns ``(frames, labels, truth)`` with frames shaped
    ``(B, T', C, H, W)`` in float64.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= len(dataset)):
        raise IndexOutOfRange(f"batch indices outside [0, {len(dataset)})")
    frames = dataset.frames[indices]
    truth = dataset.truth[indices]
    if perms is not None:
        p = perms[indices]
        frames = np.take_along_axis(frames, p[:, :, None, None, None], axis=1)
        truth = np.take_along_axis(truth, p[:, :, None], axis=1)
    if select is not None:
        sel = np.asarray(select, dtype=np.int64)
        frames = np.take_along_axis(frames, sel[:, :, None, None, None], axis=1)
        truth = np.take_along_axis(truth, sel[:, :, None], axis=1)
    return frames.astype(np.float64), dataset.labels[indices], truth


def trajectories(spec, params, frames, taps):
    """Forward ``(B, T, ...)`` frames; return tap trajectories and the trace."""
    B, T = frames.shape[:2]
    _, trace = netcore.forward(spec, params, frames.reshape((B * T,) + frames.shape[2:]))
    return {tap: trace.tap(tap).reshape(B, T, -1) for tap in taps}, trace


def loss_and_grads(spec, params, frames, cfg: ObjectiveConfig, t0=None):
    B, T = frames.shape[:2]
    batches, trace = trajectories(spec, params, frames, cfg.taps())
    value, comps, tap_grads = total_loss(batches, cfg, t0)
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss became {value}; components {comps}")
    tap_grads = {tap: g.reshape(trace.tap(tap).shape) for tap, g in tap_grads.items()}
    grads, _ = netcore.backward(spec, params, trace, None, tap_grads)
    return value, comps, grads, trace


def _step_plan(cfg: TrainConfig, n_seq: int, T: int, step: int, indices):
    """Frame selection and invariance reference frames for one step."""
    window = cfg.window if cfg.window and cfg.window < T else 0
    select = None
    if window:
        rng = stream(cfg.seed, "trainer.window", step)
        if cfg.sampling() == "subset":
            # order is irrelevant to invariance, so any subset is an unbiased sample
            select = np.sort(np.stack([rng.choice(T, window, replace=False) for _ in indices]), axis=1)
        else:
            offsets = rng.integers(0, T - window + 1, size=len(indices))
            select = offsets[:, None] + np.arange(window)
    t0 = sample_t0(stream(cfg.seed, "trainer.t0", step), len(indices), window or T)
    return select, t0


def evaluate_record(spec, params, dataset, record, cfg: TrainConfig):
    """Recompute the loss components of a logged step from given params."""
    perms = sequence_permutations(len(dataset), dataset.T, cfg.seed) if cfg.shuffle_frames else None
    indices = np.asarray(record["indices"])
    select, t0 = _step_plan(cfg, len(dataset), dataset.T, record["step"], indices)
    frames, _, _ = assemble_batch(dataset, indices, select, perms)
    batches, _ = trajectories(spec, params, frames, cfg.objective.taps())
    _, comps, _ = total_loss(batches, cfg.objective, t0)
    return comps


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    wall_time: float = 0.0

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        with open(out_dir / "history.jsonl", "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        summary = {"epochs": self.epochs, "steps": len(self.records)}
        (out_dir / "history_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))

    @classmethod
    def read(cls, out_dir) -> "TrainHistory":
        out_dir = Path(out_dir)
        records = [json.loads(line) for line in (out_dir / "history.jsonl").read_text().splitlines() if line]
        summary = json.loads((out_dir / "history_summary.json").read_text())
        return cls(records, summary["epochs"])


def fit(cfg: TrainConfig, dataset: SequenceDataset | None = None, spec=None, net: NetConfig | None = None,
        out_dir=None, params=None):
    """Train and return ``(params, history)``.

    The run is a pure function of ``(cfg, dataset, spec)``: the seed
    drives initialisation, batch order, window offsets and invariance
    reference frames through separate named streams.
    """
    cfg.validate()
    if dataset is None:
        dataset = read_dataset(cfg.dataset)
    if spec is None:
        spec = (net or NetConfig()).build(dataset.frame_shape)
    if params is None:
        params = netcore.init_params(spec, stream(cfg.seed, "trainer.init"))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    n, T = len(dataset), dataset.T
    perms = sequence_permutations(n, T, cfg.seed) if cfg.shuffle_frames else None
    history = TrainHistory()
    state = None
    step = 0
    start = time.perf_counter()
    monitor = sorted(spec.taps)
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "trainer.order", epoch).permutation(n)
        n_batches = n // cfg.batch_size
        tap_straight = {k: [] for k in monitor}
        for b in range(n_batches):
            if cfg.max_steps and step >= cfg.max_steps:
                break
            if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                netcore.save_checkpoint(spec, params, out_dir / f"ckpt_step{step:06d}.strw")
            indices = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            select, t0 = _step_plan(cfg, n, T, step, indices)
            frames, _, _ = assemble_batch(dataset, indices, select, perms)
            value, comps, grads, trace = loss_and_grads(spec, params, frames, cfg.objective, t0)
            if cfg.grad_clip:
                gnorm = np.linalg.norm(netcore.flatten_params(grads))
                if gnorm > cfg.grad_clip:
                    grads = [{k: v * (cfg.grad_clip / gnorm) for k, v in g.items()} for g in grads]
            Bw = frames.shape[1]
            for k in monitor:
                act = trace.tap(k).reshape(len(indices), Bw, -1)
                if Bw >= 3:
                    tap_straight[k].append(straightness(act, on_degenerate="exclude"))
            history.records.append(
                {"step": step, "epoch": epoch, "indices": [int(i) for i in indices], "loss": value,
                 **{k: float(v) for k, v in comps.items()}}
            )
            params, state = sgd_step(params, grads, state, cfg.lr, cfg.momentum, cfg.weight_decay)
            step += 1
        history.epochs.append(
            {"epoch": epoch, "steps": step,
             "straightness": {k: float(np.nanmean(v)) if v else None for k, v in tap_straight.items()},
             "loss": float(np.mean([r["loss"] for r in history.records if r["epoch"] == epoch] or [np.nan]))}
        )
        log.info("epoch %d loss %.4f straightness(out) %s", epoch, history.epochs[-1]["loss"],
                 history.epochs[-1]["straightness"].get("out"))
        if cfg.max_steps and step >= cfg.max_steps:
            break
    history.wall_time = time.perf_counter() - start
    if out_dir is not None:
        netcore.save_checkpoint(spec, params, out_dir / "final.strw")
        history.write(out_dir)
    return params, history


def measure_pixel_straightness(dataset) -> float:
    """Straightness of the raw flattened frames."""
    frames = dataset.frames if isinstance(dataset, SequenceDataset) else np.asarray(dataset)
    return straightness(frames.reshape(frames.shape[0], frames.shape[1], -1).astype(np.float64))
