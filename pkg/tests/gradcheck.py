"""Finite-difference oracles shared by the unit and acceptance tests."""
import numpy as np

from straighten import netcore, objectives
from straighten.netcore import AvgPool, Conv2D, Flatten, FullyConnected, ReLU, Reshape, Upsample

STEP = 1e-5
LAYER_KINDS = ("conv", "relu", "avgpool", "flatten", "fc", "upsample", "reshape")
LOSS_KINDS = ("straightness", "variance", "covariance", "invariance", "composed")


def rel_err(a, n) -> float:
    a, n = np.ravel(a), np.ravel(n)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def numeric_array_grad(f, x, step=STEP):
    return netcore.numerical_gradient(lambda v: f(v.reshape(x.shape)), x.ravel().copy(), step).reshape(x.shape)


def layer_instance(kind, rng):
    """A random small layer, input batch and parameters."""
    N = int(rng.integers(1, 3))
    if kind == "conv":
        k = int(rng.choice([1, 3]))
        layer = Conv2D(int(rng.integers(1, 4)), int(rng.integers(1, 4)), k, int(rng.integers(1, 3)),
                       int(rng.integers(0, 2)) if k == 3 else 0)
        shape = (layer.in_ch, int(rng.integers(4, 7)), int(rng.integers(4, 7)))
    elif kind == "relu":
        layer, shape = ReLU(), (2, 3, 3)
    elif kind == "avgpool":
        s = int(rng.integers(1, 3))
        layer, shape = AvgPool(2, s), (2, 4, 6)
    elif kind == "flatten":
        layer, shape = Flatten(), (2, 3, 2)
    elif kind == "fc":
        layer = FullyConnected(int(rng.integers(2, 7)), int(rng.integers(1, 6)))
        shape = (layer.n_in,)
    elif kind == "upsample":
        layer, shape = Upsample(2), (2, 2, 3)
    elif kind == "reshape":
        layer, shape = Reshape((2, 2, 3)), (12,)
    else:
        raise KeyError(kind)
    x = rng.normal(size=(N,) + shape)
    if kind == "relu":
        # keep pre-activations away from the kink so differences do not straddle it
        x = np.sign(x) * (np.abs(x) + 0.05)
    prm = {k: rng.normal(size=s) for k, s in getattr(layer, "param_shapes", dict)().items()}
    return layer, x, prm


def check_layer(layer, x, prm, rng) -> float:
    """Largest relative error over input and parameter gradients."""
    y = layer.forward(x, prm)
    R = rng.normal(size=y.shape)
    gx, grads = layer.backward(x, y, R, prm)
    errs = [rel_err(gx, numeric_array_grad(lambda v: float((layer.forward(v, prm) * R).sum()), x))]
    for name, p in prm.items():
        def f(v, name=name):
            q = dict(prm)
            q[name] = v
            return float((layer.forward(x, q) * R).sum())
        errs.append(rel_err(grads[name], numeric_array_grad(f, p)))
    return max(errs)


def loss_instance(kind, rng):
    """Returns ``(fn, x)`` where ``fn(x) -> (value, grad)``."""
    if kind == "straightness":
        z = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(3, 7)), int(rng.integers(2, 6))))
        return (lambda v: objectives.straightness_loss(v)), z
    if kind == "variance":
        d = int(rng.integers(2, 6))
        # mixed scales: some dims under the hinge, some above it
        x = rng.normal(size=(8, d)) * rng.choice([0.3, 3.0], size=d)
        return (lambda v: objectives.variance_loss(v, 1e-4)), x
    if kind == "covariance":
        return objectives.covariance_loss, rng.normal(size=(int(rng.integers(3, 9)), int(rng.integers(2, 5))))
    if kind == "invariance":
        B, T = int(rng.integers(1, 4)), int(rng.integers(2, 6))
        t0 = rng.integers(0, T, size=B)
        return (lambda v: objectives.invariance_loss(v, t0)), rng.normal(size=(B, T, 3))
    if kind == "composed":
        B, T = 3, 5
        t0 = rng.integers(0, T, size=B)
        cfg = objectives.ObjectiveConfig(kind="composed", attach=("out", "mid"), straight_weight=0.7)
        shapes = {"out": (B, T, 4), "mid": (B, T, 2, 3)}
        sizes = {k: int(np.prod(s)) for k, s in shapes.items()}

        def fn(v):
            batches = {"out": v[: sizes["out"]].reshape(shapes["out"]), "mid": v[sizes["out"]:].reshape(shapes["mid"])}
            value, _, grads = objectives.total_loss(batches, cfg, t0)
            return value, np.concatenate([grads["out"].ravel(), grads["mid"].ravel()])

        return fn, rng.normal(size=sizes["out"] + sizes["mid"])
    raise KeyError(kind)


def check_loss(fn, x) -> float:
    _, g = fn(x)
    return rel_err(g, numeric_array_grad(lambda v: fn(v)[0], x))
