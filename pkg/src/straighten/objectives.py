"""Straightening, whitening and invariance losses with analytic gradients.

Trajectory batches are arrays ``z`` of shape ``(B, T, d)``; intermediate
activations are flattened over channels and space before they get here.
Every loss returns ``(value, grad)`` where ``grad`` has the shape of its
input.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid, DegenerateDifference, ShapeMismatch

DELTA_NORM = 1e-12  # smallest admissible difference-vector norm
COS_STABILIZER = 1e-12  # added to |a||b| in the cosine denominator

OBJECTIVE_KINDS = ("straightening", "invariance", "composed")


@dataclass
class ObjectiveConfig:
    """Loss composition.

    ``alpha``/``beta`` weight the whitening terms of the straightening
    objective, ``lam``/``gamma`` those of the invariance objective.
    ``attach`` lists the taps carrying a straightening term; their losses
    are averaged with ``attach_weights`` (equal by default). The
    whitening terms are only ever applied at ``whiten_tap``.
    ``straight_weight`` scales the straightening regulariser added to the
    invariance loss in the ``composed`` objective.
    """

    kind: str = "straightening"
    alpha: float = 1.0
    beta: float = 0.25
    lam: float = 0.125
    gamma: float = 0.5
    eps: float = 1e-4
    attach: tuple = ("out",)
    attach_weights: tuple | None = None
    whiten_tap: str = "out"
    straight_weight: float = 1.0
    pooled: bool = True  # whitening statistics pooled over time

    def validate(self) -> "ObjectiveConfig":
        if self.kind not in OBJECTIVE_KINDS:
            raise ConfigInvalid(f"objective kind {self.kind!r} not in {OBJECTIVE_KINDS}")
        weights = [self.alpha, self.beta, self.lam, self.gamma, self.straight_weight]
        if min(weights) < 0:
            raise ConfigInvalid("loss weights must be non-negative")
        if self.eps <= 0:
            raise ConfigInvalid("eps must be positive")
        if not self.attach and self.kind != "invariance":
            raise ConfigInvalid("straightening needs at least one attachment tap")
        if self.attach_weights is not None:
            if len(self.attach_weights) != len(self.attach) or min(self.attach_weights) < 0:
                raise ConfigInvalid("attach_weights must be non-negative, one per attachment")
            if sum(self.attach_weights) <= 0:
                raise ConfigInvalid("attach_weights must not all be zero")
        return self

    def taps(self) -> set:
        needed = {self.whiten_tap}
        if self.kind != "invariance":
            needed |= set(self.attach)
        return needed


# ----------------------------------------------------------------------


def _check_trajectories(z, min_T):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 2:
        z = z[None]
    if z.ndim != 3:
        z = z.reshape(z.shape[0], z.shape[1], -1)
    if z.shape[1] < min_T:
        raise ShapeMismatch(f"need at least {min_T} timesteps, got {z.shape[1]}")
    return z


def cosine_terms(z, on_degenerate="raise"):
    """Cosines between successive difference vectors, shape ``(B, T - 2)``.

    With ``on_degenerate="exclude"`` triples touching a near-zero
    difference are returned as NaN instead of raising.
    """
    z = _check_trajectories(z, 3)
    diff = np.diff(z, axis=1)
    norms = np.linalg.norm(diff, axis=2)
    bad = norms < DELTA_NORM
    if bad.any() and on_degenerate == "raise":
        raise DegenerateDifference(f"{int(bad.sum())} difference vectors have norm < {DELTA_NORM}")
    a, b = diff[:, :-1], diff[:, 1:]
    cos = np.einsum("btd,btd->bt", a, b) / (norms[:, :-1] * norms[:, 1:] + COS_STABILIZER)
    if bad.any():
        cos = np.where(bad[:, :-1] | bad[:, 1:], np.nan, cos)
    return cos


def straightness(z, on_degenerate="raise") -> float:
    """Mean cosine between successive difference vectors (higher = straighter)."""
    cos = cosine_terms(z, on_degenerate)
    return float(np.nanmean(cos))


def straightness_loss(z, on_degenerate="raise"):
    """Negative mean cosine similarity of successive trajectory chords.

    Degenerate triples (a chord shorter than ``DELTA_NORM``) either raise
    or, with ``on_degenerate="exclude"``, are dropped from the mean and
    receive no gradient.
    """
    z = _check_trajectories(z, 3)
    B, T, d = z.shape
    diff = np.diff(z, axis=1)
    norms = np.linalg.norm(diff, axis=2)
    bad = norms < DELTA_NORM
    if bad.any() and on_degenerate == "raise":
        raise DegenerateDifference(f"{int(bad.sum())} difference vectors have norm < {DELTA_NORM}")
    a, b = diff[:, :-1], diff[:, 1:]
    na, nb = norms[:, :-1], norms[:, 1:]
    keep = ~(bad[:, :-1] | bad[:, 1:])
    count = keep.sum()
    if count == 0:
        raise DegenerateDifference("every triple is degenerate")
    dot = np.einsum("btd,btd->bt", a, b)
    den = na * nb + COS_STABILIZER
    cos = dot / den
    value = -float(np.sum(np.where(keep, cos, 0.0)) / count)

    # d cos / d a = b / den - dot * nb * a / (na * den^2), symmetric in b
    safe_na = np.where(keep, na, 1.0)
    safe_nb = np.where(keep, nb, 1.0)
    coef = np.where(keep, -1.0 / count, 0.0)  # d value / d cos
    ga = coef[..., None] * (b / den[..., None] - (dot * nb / (safe_na * den**2))[..., None] * a)
    gb = coef[..., None] * (a / den[..., None] - (dot * na / (safe_nb * den**2))[..., None] * b)
    gdiff = np.zeros_like(diff)
    gdiff[:, :-1] += ga
    gdiff[:, 1:] += gb
    gz = np.zeros_like(z)
    gz[:, 1:] += gdiff
    gz[:, :-1] -= gdiff
    return value, gz


def variance_loss(x, eps=1e-4):
    """Hinge on the per-dimension standard deviation: mean_i max(0, 1 - sqrt(var_i + eps))."""
    x = np.asarray(x, dtype=np.float64)
    N, d = x.shape
    if N < 2:
        raise ShapeMismatch("variance needs at least two samples")
    xc = x - x.mean(axis=0)
    std = np.sqrt((xc**2).sum(axis=0) / (N - 1) + eps)
    hinge = 1.0 - std
    value = float(np.maximum(hinge, 0.0).mean())
    active = hinge > 0  # kink counts as inactive
    grad = np.where(active, -1.0 / (d * std * (N - 1)), 0.0) * xc
    return value, grad


def covariance_loss(x):
    """Sum of squared off-diagonal covariances (1/(N-1) estimator), divided by d."""
    x = np.asarray(x, dtype=np.float64)
    N, d = x.shape
    if N < 2:
        raise ShapeMismatch("covariance needs at least two samples")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (N - 1)
    off = cov - np.diag(np.diag(cov))
    value = float((off**2).sum() / d)
    grad = 4.0 / (d * (N - 1)) * xc @ off
    return value, grad


def invariance_loss(z, t0):
    """Mean over sequences and t of ||z_t - z_{t0}||^2 / d.

    ``t0`` holds one zero-based reference index per sequence.
    """
    z = _check_trajectories(z, 1)
    B, T, d = z.shape
    t0 = np.asarray(t0, dtype=np.int64).reshape(B)
    if t0.min() < 0 or t0.max() >= T:
        raise ShapeMismatch(f"t0 out of range for T={T}")
    ref = z[np.arange(B), t0]
    diff = z - ref[:, None]
    value = float((diff**2).sum() / (B * T * d))
    g = 2.0 * diff / (B * T * d)
    g[np.arange(B), t0] -= g.sum(axis=1)
    return value, g


def whitening_terms(z, eps, pooled=True):
    """Variance and covariance losses for trajectories ``(B, T, d)``.

    Pooled statistics treat all ``B * T`` embeddings as one sample set;
    otherwise the terms are computed per timestep over the batch and
    averaged.
    """
    z = _check_trajectories(z, 1)
    B, T, d = z.shape
    if pooled:
        v, gv = variance_loss(z.reshape(B * T, d), eps)
        c, gc = covariance_loss(z.reshape(B * T, d))
        return v, gv.reshape(z.shape), c, gc.reshape(z.shape)
    v = c = 0.0
    gv, gc = np.zeros_like(z), np.zeros_like(z)
    for t in range(T):
        vt, gvt = variance_loss(z[:, t], eps)
        ct, gct = covariance_loss(z[:, t])
        v, c = v + vt / T, c + ct / T
        gv[:, t], gc[:, t] = gvt / T, gct / T
    return v, gv, c, gc


def sample_t0(rng, B, T):
    """Reference frame per sequence, uniform and independent of t."""
    return rng.integers(0, T, size=B)


def total_loss(batches: dict, cfg: ObjectiveConfig, t0=None):
    """Combined objective over tap trajectories.

    ``batches`` maps tap names to ``(B, T, ...)`` arrays. Returns
    ``(value, components, grads)`` with one gradient per tap.
    """
    cfg.validate()
    missing = cfg.taps() - set(batches)
    if missing:
        raise ConfigInvalid(f"objective needs taps {sorted(missing)}")
    flat = {k: np.asarray(v, dtype=np.float64).reshape(v.shape[0], v.shape[1], -1) for k, v in batches.items()}
    grads = {k: np.zeros_like(flat[k]) for k in cfg.taps()}
    comps = {}

    zw = flat[cfg.whiten_tap]
    var, gvar, cov, gcov = whitening_terms(zw, cfg.eps, cfg.pooled)
    comps["variance"], comps["covariance"] = var, cov

    straight_total = 0.0
    if cfg.kind in ("straightening", "composed"):
        weights = np.ones(len(cfg.attach)) if cfg.attach_weights is None else np.asarray(cfg.attach_weights, float)
        weights = weights / weights.sum()
        scale = 1.0 if cfg.kind == "straightening" else cfg.straight_weight
        for tap, w in zip(cfg.attach, weights):
            s, gs = straightness_loss(flat[tap], on_degenerate="exclude")
            comps[f"straightness:{tap}"] = s
            straight_total += w * s
            grads[tap] += scale * w * gs
        comps["straightness"] = straight_total

    if cfg.kind == "straightening":
        value = straight_total + cfg.alpha * var + cfg.beta * cov
        grads[cfg.whiten_tap] += cfg.alpha * gvar + cfg.beta * gcov
    else:
        if t0 is None:
            raise ConfigInvalid("invariance objectives need reference frames t0")
        inv, ginv = invariance_loss(zw, t0)
        comps["invariance"] = inv
        value = inv + cfg.lam * var + cfg.gamma * cov
        grads[cfg.whiten_tap] += ginv + cfg.lam * gvar + cfg.gamma * gcov
        if cfg.kind == "composed":
            value += cfg.straight_weight * straight_total
    comps["total"] = value
    grads = {k: g.reshape(batches[k].shape) for k, g in grads.items()}
    return value, comps, grads


def extrapolate(z_t, z_next):
    """Linear one-step prediction 2 z_{t+1} - z_t."""
    z_t, z_next = np.asarray(z_t, dtype=np.float64), np.asarray(z_next, dtype=np.float64)
    if z_t.shape != z_next.shape:
        raise ShapeMismatch(f"cannot extrapolate from shapes {z_t.shape} and {z_next.shape}")
    return 2.0 * z_next - z_t
