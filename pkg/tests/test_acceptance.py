"""Acceptance checks for the desk-scale reproduction.

Criteria 3-8 share one trained suite (straightening, invariance, shuffled,
composed and multilayer models on sequential digits). It is built by
``scripts/run_experiments.py`` under ``.cache/acceptance/<code version>``,
so the first run trains for about an hour on one core and later runs
only read the reports. Delete ``.cache`` to force a rebuild.
"""
import hashlib
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from straighten import analysis, cli, objectives
from straighten.analysis import AttackConfig, PairingCondition
from straighten.netcore import Flatten, NetworkSpec
from straighten.probes import LinearProbe

import gradcheck
from conftest import ACCEPTANCE, ROOT, ensure_digits

sys.path.insert(0, str(ROOT / "scripts"))
import run_experiments as rx  # noqa: E402

CACHE = ROOT / ".cache" / "acceptance"

# pinned tolerances
LAYER_TOL = 1e-4
LOSS_TOL = 1e-6
GRAD_INSTANCES = 20
GRAD_SECONDS = 60.0
ORACLE_TOL = 1e-9
CIRCLE_TOL = 1e-6
STRAIGHTER_BY = 0.2
INVARIANT_SLACK = 0.05
DECODE_MARGIN = 0.1
CHANCE_FACTOR = 3.0
SHUFFLE_MARGIN = 0.1
EVENT_FACTOR = 2.0
WITHIN_MARGIN = 0.1
ROBUST_MAJORITY = 0.7
BUDGET_SLACK = 1e-6
ORACLE_COS = 0.99
COMPOSED_GAIN = 0.15
CLEAN_WITHIN = 0.03
POSITION_SCALE = ("x", "y", "scale")


class Checks:
    """Named boolean checks; the verdict is their conjunction."""

    def __init__(self, criterion):
        self.criterion = criterion
        self.rows = []

    def add(self, name, ok, detail=""):
        self.rows.append((name, bool(ok), detail))

    def verdict(self):
        ok = all(r[1] for r in self.rows)
        ACCEPTANCE[self.criterion] = (ok, self.rows)
        lines = [f"criterion {self.criterion}: {'PASS' if ok else 'FAIL'}"]
        lines += [f"  [{'ok' if r[1] else '--'}] {r[0]} {r[2]}" for r in self.rows]
        print("\n".join(lines))
        assert ok, "\n".join(lines)


@pytest.fixture(scope="module")
def suite():
    ensure_digits()
    return rx.suite(CACHE / cli.code_version())


# ----------------------------------------------------------------------


def test_criterion_1_gradients():
    checks = Checks(1)
    start = time.perf_counter()
    for kind in gradcheck.LAYER_KINDS:
        worst = max(gradcheck.check_layer(*gradcheck.layer_instance(kind, rng), rng)
                    for rng in (np.random.default_rng(s) for s in range(GRAD_INSTANCES)))
        checks.add(f"layer {kind}", worst < LAYER_TOL, f"max rel err {worst:.2e}")
    for kind in gradcheck.LOSS_KINDS:
        worst = max(gradcheck.check_loss(*gradcheck.loss_instance(kind, np.random.default_rng(s)))
                    for s in range(GRAD_INSTANCES))
        checks.add(f"loss {kind}", worst < LOSS_TOL, f"max rel err {worst:.2e}")
    elapsed = time.perf_counter() - start
    checks.add("runtime", elapsed < GRAD_SECONDS, f"{elapsed:.1f}s")
    checks.verdict()


def test_criterion_2_loss_oracles():
    checks = Checks(2)
    line = np.linspace(0, 1, 6)[None, :, None] * np.array([1.0, -2.0, 0.5])
    v = objectives.straightness_loss(line)[0]
    checks.add("collinear", abs(v + 1) <= ORACLE_TOL, f"{v!r}")
    corner = np.array([[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]])
    v = objectives.straightness_loss(corner)[0]
    checks.add("right angle", abs(v) <= ORACLE_TOL, f"{v!r}")
    angles = np.deg2rad(45.0 * np.arange(8))
    circle = np.stack([np.cos(angles), np.sin(angles)], -1)[None]
    v = objectives.straightness_loss(circle)[0]
    checks.add("45 degree circle", abs(v + np.cos(np.pi / 4)) <= CIRCLE_TOL, f"{v!r}")
    v = objectives.variance_loss(np.ones((16, 8)), eps=1e-4)[0]
    checks.add("variance collapse", abs(v - 0.99) <= ORACLE_TOL, f"{v!r}")
    v = analysis.participation_ratio_from_eigenvalues([3.0, 1.0])
    checks.add("participation ratio {3,1}", v == 1.6, f"{v!r}")
    checks.verdict()


def test_criterion_3_straightening_emerges(suite):
    checks = Checks(3)
    s, i = suite["straightening"]["straightness"], suite["invariance"]["straightness"]
    checks.add("straightening above pixels", s["final"] - s["pixel"] >= STRAIGHTER_BY,
               f"{s['final']:.3f} vs pixel {s['pixel']:.3f}")
    checks.add("invariance not above pixels", i["final"] <= i["pixel"] + INVARIANT_SLACK,
               f"{i['final']:.3f} vs pixel {i['pixel']:.3f}")
    checks.verdict()


def _decoding(suite, name):
    return suite[name]["probe"]["decoding"]


def test_criterion_4_decoding(suite):
    checks = Checks(4)
    s, i, sh = (_decoding(suite, n) for n in ("straightening", "invariance", "shuffled"))
    for attr in POSITION_SCALE:
        checks.add(f"{attr}: straightening beats invariance", s[attr]["r2"] - i[attr]["r2"] > DECODE_MARGIN,
                   f"R2 {s[attr]['r2']:.3f} vs {i[attr]['r2']:.3f}")
        checks.add(f"{attr}: ordered beats shuffled", s[attr]["r2"] - sh[attr]["r2"] > SHUFFLE_MARGIN,
                   f"R2 {s[attr]['r2']:.3f} vs {sh[attr]['r2']:.3f}")
    for name, rep in (("straightening", s), ("invariance", i)):
        ident = rep["identity"]
        checks.add(f"{name} identity above chance", ident["accuracy"] > CHANCE_FACTOR * ident["chance"],
                   f"acc {ident['accuracy']:.3f}, chance {ident['chance']:.3f}")
    checks.verdict()


def test_criterion_5_prediction(suite):
    checks = Checks(5)
    pred = suite["straightening"]["probe"]["prediction"]
    for attr in POSITION_SCALE:
        r = pred[attr]
        checks.add(f"{attr}: extrapolation beats control", r["rmse_extrapolation_smooth"] < r["rmse_control_smooth"],
                   f"{r['rmse_extrapolation_smooth']:.4f} vs {r['rmse_control_smooth']:.4f}")
        checks.add(f"{attr}: reversals break extrapolation",
                   r["rmse_extrapolation_event"] > EVENT_FACTOR * r["rmse_extrapolation_smooth"],
                   f"{r['rmse_extrapolation_event']:.4f} vs smooth {r['rmse_extrapolation_smooth']:.4f}")
    checks.verdict()


def test_criterion_6_geometry(suite):
    checks = Checks(6)
    g = suite["straightening"]["geometry"]
    gi = suite["invariance"]["geometry"]
    c = g["conditions"]
    within = c[PairingCondition.SameDigitSameTransform.value]
    across = c[PairingCondition.DiffDigitDiffTransform.value]
    rand = c[PairingCondition.RandomBaseline.value]
    axis = c[PairingCondition.VsClassifierAxis.value]
    # motion directions are drawn with random sign, so parallelism is read off |cos|
    checks.add("within-class more parallel", within["mean_abs"] > across["mean_abs"] + WITHIN_MARGIN,
               f"|cos| {within['mean_abs']:.3f} vs across {across['mean_abs']:.3f} "
               f"(signed {within['mean']:.3f} vs {across['mean']:.3f})")
    checks.add("across-class concentrated", across["std"] < rand["std"],
               f"std {across['std']:.4f} vs random {rand['std']:.4f}")
    checks.add("orthogonal to classifier", axis["mean_abs"] < rand["mean_abs"],
               f"|cos| {axis['mean_abs']:.4f} vs random {rand['mean_abs']:.4f}")
    pr, pri = g["participation_ratio"], gi["participation_ratio"]
    checks.add("compact within class", pr["within_digit_transform"] < pri["within_digit_transform"],
               f"PR {pr['within_digit_transform']:.2f} vs invariance {pri['within_digit_transform']:.2f}")
    checks.add("higher dimensional overall", pr["all"] > pri["all"],
               f"PR {pr['all']:.2f} vs invariance {pri['all']:.2f}")
    checks.verdict()


def _linear_oracle_cosines(n=GRAD_INSTANCES, budget=0.3):
    out = []
    for seed in range(n):
        rng = np.random.default_rng(seed)
        spec = NetworkSpec((1, 6, 6), [Flatten()])
        W = rng.normal(size=(2, 36))
        probe = LinearProbe(W, np.zeros(2), np.array([0, 1]))
        x = rng.uniform(0.4, 0.6, size=(1, 1, 6, 6))
        y = probe.predict(x.reshape(1, -1))
        adv, _ = analysis.pgd_l2(spec, [{}], probe, x, y, AttackConfig(budget, steps=50, early_stop=False))
        delta = (adv - x).ravel()
        optimal = W[1 - int(y[0])] - W[int(y[0])]
        out.append(delta @ optimal / (np.linalg.norm(delta) * np.linalg.norm(optimal)))
    return np.array(out)


def _majority(a, b, key):
    wins = [pa["accuracy"] >= pb["accuracy"] for pa, pb in zip(a, b)]
    assert [p[key] for p in a] == [p[key] for p in b]
    return float(np.mean(wins)), wins


def test_criterion_7_robustness(suite):
    checks = Checks(7)
    # the robustness track straightens both the final and the mid-network tap
    s, i = suite["multilayer"], suite["invariance"]
    for kind, key in (("noise", "sigma"), ("pgd", "budget")):
        frac, _ = _majority(s[kind]["curve"], i[kind]["curve"], key)
        sa = " ".join(f"{p['accuracy']:.2f}" for p in s[kind]["curve"])
        ia = " ".join(f"{p['accuracy']:.2f}" for p in i[kind]["curve"])
        checks.add(f"{kind}: straightening at least as robust", frac >= ROBUST_MAJORITY,
                   f"{frac:.0%} of points [{sa}] vs [{ia}]")
    for name, rep in (("multilayer", s), ("invariance", i)):
        curve = rep["pgd"]["curve"]
        over = max(p["max_norm"] - p["budget"] for p in curve)
        checks.add(f"{name}: budget respected", over <= BUDGET_SLACK, f"max excess {over:.1e}")
        clean = next(p["accuracy"] for p in rep["noise"]["curve"] if p["sigma"] == 0)
        zero = next(p["accuracy"] for p in curve if p["budget"] == 0)
        checks.add(f"{name}: budget 0 is clean", zero == clean, f"{zero!r} vs {clean!r}")
    cos = _linear_oracle_cosines()
    checks.add("linear oracle direction", cos.min() >= ORACLE_COS, f"min cos {cos.min():.4f}")
    checks.verdict()


def test_criterion_8_composition(suite):
    checks = Checks(8)
    c, i = suite["composed"], suite["invariance"]
    gain = c["straightness"]["final"] - i["straightness"]["final"]
    checks.add("straighter than invariance", gain >= COMPOSED_GAIN,
               f"{c['straightness']['final']:.3f} vs {i['straightness']['final']:.3f}")
    cc, ic = c["pgd"]["curve"], i["pgd"]["curve"]
    mid = len(cc) // 2
    checks.add(f"more robust at budget {cc[mid]['budget']:g}", cc[mid]["accuracy"] > ic[mid]["accuracy"],
               f"{cc[mid]['accuracy']:.3f} vs {ic[mid]['accuracy']:.3f}")
    checks.add("clean accuracy kept", abs(cc[0]["accuracy"] - ic[0]["accuracy"]) <= CLEAN_WITHIN,
               f"{cc[0]['accuracy']:.3f} vs {ic[0]['accuracy']:.3f}")
    checks.verdict()


SMOKE = """
[experiment]
seed = 3

[sources]
images = {images}
labels = {labels}

[datagen]
n_sequences = 80
T = 8

[network]
channels = 4, 8
strides = 2, 2
out_dim = 16
mid_tap = 1

[training]
epochs = 2
batch_size = 8
window = 5

[evaluation]
max_train_frames = 300
max_test_frames = 300
curve_sequences = 40
geometry_sequences = 40
predict_sequences = 20
robust_items = 30
pgd_budgets = 0, 1
pgd_steps = 10
"""


def _digests(root: Path):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.suffix in (".strq", ".strw", ".csv")}


def test_criterion_9_determinism(tmp_path):
    checks = Checks(9)
    images, labels = ensure_digits()
    configs = tmp_path / "configs"
    configs.mkdir()
    (configs / "straightening.ini").write_text(SMOKE.format(images=images, labels=labels))
    runs = {}
    for name in ("a", "b"):
        # same paths both times: configs (and so digests) name their datasets
        out = tmp_path / "run"
        data = rx.generate(out, configs, test_sequences=40)
        rx.experiment("straightening", out, data, tuple(rx.STAGES), configs)
        runs[name] = _digests(out)
        out.rename(tmp_path / name)
    a, b = runs["a"], runs["b"]
    for suffix in (".strq", ".strw", ".csv"):
        names = [k for k in a if k.endswith(suffix)]
        same = bool(names) and a.keys() == b.keys() and all(a[k] == b[k] for k in names)
        checks.add(f"identical {suffix} files", same, f"{len(names)} files")
    checks.verdict()
