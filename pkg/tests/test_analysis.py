import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import special_ortho_group

from straighten import analysis, datagen, netcore, probes
from straighten.analysis import AttackConfig, PairingCondition
from straighten.errors import DegenerateCovariance, EmptyGroup, ShapeMismatch
from straighten.netcore import Flatten, NetworkSpec
from straighten.probes import LinearProbe
from straighten.trainer import NetConfig

TINY = NetConfig(channels=(3, 4), strides=(2, 2), out_dim=6)
seeds = st.integers(0, 2**31 - 1)


@pytest.fixture(scope="module")
def tiny_model(digit_dataset):
    spec = TINY.build(digit_dataset.frame_shape)
    return spec, netcore.init_params(spec, np.random.default_rng(0))


@pytest.fixture(scope="module")
def balanced(digit_sources):
    """Thirty frames of each of the ten labels."""
    data = datagen.generate_dataset(digit_sources, datagen.GenConfig(n_sequences=600, T=3), seed=5)
    pick = np.concatenate([np.flatnonzero(data.labels == k)[:30] for k in range(10)])
    assert len(pick) == 300
    return data.frames[pick, 1].astype(np.float64), data.labels[pick]


def test_curve_random_init(tiny_model, digit_dataset):
    spec, params = tiny_model
    curve = analysis.straightness_curve(spec, params, digit_dataset)
    assert [c["stage"] for c in curve] == list(range(len(spec.layers) + 1))
    assert curve[0]["name"] == "pixel"
    assert all(c["straightness"] <= 1.0 for c in curve if c["n"])


def test_curve_identity_network(digit_dataset):
    spec = netcore.identity_spec(digit_dataset.frame_shape)
    W = np.ones((1, 1, 1, 1))
    curve = analysis.straightness_curve(spec, [{"W": W, "b": np.zeros(1)}], digit_dataset)
    assert curve[1]["straightness"] == curve[0]["straightness"]


def test_curve_excludes_degenerate(digit_dataset):
    spec = netcore.identity_spec(digit_dataset.frame_shape)
    zero = [{"W": np.zeros((1, 1, 1, 1)), "b": np.zeros(1)}]
    with pytest.warns(UserWarning, match="excluded"):
        curve = analysis.straightness_curve(spec, zero, digit_dataset)
    assert curve[1]["n"] == 0 and curve[1]["excluded"] == len(digit_dataset)
    assert np.isnan(curve[1]["straightness"])


def axis_trajectories(B, T, d):
    """Trajectory i moves along axis i only."""
    Z = np.zeros((B, T, d))
    for i in range(B):
        Z[i, :, i] = np.arange(T) * (1.0 + i)
    return Z


def test_pairs_are_distinct_trajectories():
    Z = axis_trajectories(4, 5, 6)
    res = analysis.pairing_histograms(Z, np.zeros(4), np.zeros(4), PairingCondition.SameDigitSameTransform,
                                      max_pairs=2000)
    # a self-pair would contribute cosine 1; cross pairs are orthogonal
    assert res["n_pairs"] == 2000
    assert np.all(res["cosines"] == 0.0)


def test_random_baseline_centered():
    res = analysis.pairing_histograms(np.zeros((2, 3, 128)), [0, 1], [0, 0], "random_baseline", max_pairs=100_000)
    se = res["std"] / np.sqrt(res["n_pairs"])
    assert abs(res["mean"]) < 3 * se
    assert res["std"] == pytest.approx(1 / np.sqrt(128), rel=0.02)
    assert len(res["counts"]) == 101 and res["counts"].sum() == res["n_pairs"]
    np.testing.assert_allclose(res["edges"][[0, -1]], [-1.0, 1.0])


def test_pairing_conditions_select_groups():
    rng = np.random.default_rng(0)
    B, T, d = 40, 5, 8
    labels, kinds = np.arange(B) % 4, (np.arange(B) // 4) % 2
    # every [label, kind] group shares one direction of travel
    dirs = rng.normal(size=(4, 2, d))
    Z = np.cumsum(np.repeat(dirs[labels, kinds][:, None], T, axis=1), axis=1)
    same = analysis.pairing_histograms(Z, labels, kinds, "same_digit_same_transform", max_pairs=5000)
    diff = analysis.pairing_histograms(Z, labels, kinds, "diff_digit_diff_transform", max_pairs=5000)
    np.testing.assert_allclose(same["cosines"], 1.0, atol=1e-12)
    assert diff["mean_abs"] < 0.9
    for cond in ("same_digit_diff_transform", "diff_digit_same_transform"):
        assert analysis.pairing_histograms(Z, labels, kinds, cond, max_pairs=500)["n_pairs"] == 500


def test_pairing_empty_groups():
    Z = np.random.default_rng(1).normal(size=(3, 4, 5))
    with pytest.raises(EmptyGroup):
        analysis.pairing_histograms(Z, [1, 1, 1], [0, 0, 0], "diff_digit_same_transform")
    with pytest.raises(EmptyGroup):
        analysis.pairing_histograms(Z, [1, 2, 3], [0, 0, 0], "vs_classifier_axis")
    with pytest.raises(EmptyGroup):
        analysis.pairing_histograms(Z[:1], [1], [0], "same_digit_same_transform")


def test_vs_classifier_axis():
    Z = axis_trajectories(3, 4, 5)
    W = np.zeros((2, 5))
    W[0, 4], W[1, 3] = 2.0, -1.0  # axes orthogonal to every trajectory
    res = analysis.pairing_histograms(Z, [0, 1, 2], [0, 0, 0], "vs_classifier_axis", classifier=W)
    assert res["n_pairs"] == 3 * 3 * 2
    assert np.all(res["cosines"] == 0.0)


def test_participation_ratio_examples():
    iso = np.concatenate([np.eye(4), -np.eye(4)])
    assert analysis.participation_ratio(iso) == pytest.approx(4.0, abs=1e-12)
    rank1 = np.outer(np.arange(6.0), [1.0, -2.0, 0.5])
    assert analysis.participation_ratio(rank1) == pytest.approx(1.0, abs=1e-12)
    assert analysis.participation_ratio_from_eigenvalues([3.0, 1.0]) == pytest.approx(1.6)
    two = np.array([[np.sqrt(3), 0], [-np.sqrt(3), 0], [0, 1], [0, -1]]) * np.sqrt(1.5)
    assert analysis.participation_ratio(two) == pytest.approx(1.6, abs=1e-12)
    with pytest.raises(DegenerateCovariance):
        analysis.participation_ratio(np.ones((5, 3)))
    with pytest.raises(ShapeMismatch):
        analysis.participation_ratio(np.ones((1, 3)))


def test_participation_ratio_gram_path():
    X = np.random.default_rng(2).normal(size=(5, 40))
    Xc = X - X.mean(0)
    direct = analysis.participation_ratio_from_eigenvalues(np.linalg.eigvalsh(Xc.T @ Xc / 4))
    assert analysis.participation_ratio(X) == pytest.approx(direct, rel=1e-10)


def test_group_dimensionality():
    rng = np.random.default_rng(3)
    B, T, d = 24, 6, 10
    labels, kinds = np.arange(B) % 3, (np.arange(B) // 3) % 2
    Z = rng.normal(size=(3, 2, 1, 1, d)) * 5 + rng.normal(size=(3, 2, 1, 1, d)) * np.arange(T)[:, None]
    Z = Z[labels, kinds, 0] + 0.01 * rng.normal(size=(B, T, d))
    rep = analysis.group_dimensionality(Z, labels, kinds)
    assert set(rep["per_group"]) == {f"{l}/{k}" for l in range(3) for k in range(2)}
    assert rep["within_digit_transform"] < rep["within_digit"] < rep["all"]
    assert rep["all"] <= d


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(1e-3, 1e3))
def test_participation_ratio_invariances(seed, c):
    X = np.random.default_rng(seed).normal(size=(20, 6)) * np.arange(1, 7)
    Q = special_ortho_group.rvs(6, random_state=seed % 1000)
    base = analysis.participation_ratio(X)
    assert 1.0 <= base <= 6.0
    assert analysis.participation_ratio(X @ Q.T) == pytest.approx(base, rel=1e-9)
    assert analysis.participation_ratio(c * X) == pytest.approx(base, rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_cosines_ignore_per_vector_scale(seed):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(6, 4, 5))
    # rescaling each difference vector by its own positive factor
    D = analysis.difference_vectors(Z) * rng.uniform(0.1, 10, size=(6, 3, 1))
    Z2 = np.concatenate([Z[:, :1], Z[:, :1] + np.cumsum(D, axis=1)], axis=1)
    labels, kinds = np.zeros(6), np.zeros(6)
    a = analysis.pairing_histograms(Z, labels, kinds, "same_digit_same_transform", max_pairs=300, seed=1)
    b = analysis.pairing_histograms(Z2, labels, kinds, "same_digit_same_transform", max_pairs=300, seed=1)
    np.testing.assert_allclose(a["cosines"], b["cosines"], atol=1e-12)


def test_histogram_mean_seed_stable():
    rng = np.random.default_rng(4)
    B, T, d = 60, 6, 16
    labels, kinds = np.arange(B) % 5, np.arange(B) % 3
    Z = np.cumsum(rng.normal(size=(B, T, d)) + rng.normal(size=(5, 1, d))[labels], axis=1)
    means = [analysis.pairing_histograms(Z, labels, kinds, "same_digit_diff_transform", max_pairs=20_000,
                                         seed=s)["mean"] for s in (0, 1, 2)]
    assert max(means) - min(means) < 1e-2


# ----------------------------------------------------------------------
# robustness


@pytest.fixture(scope="module")
def clean_probe(tiny_model, balanced):
    spec, params = tiny_model
    frames, labels = balanced
    return probes.fit_linear_classifier(probes.embed(spec, params, frames), labels)


def test_noise_sweep_zero_and_saturation(tiny_model, balanced, clean_probe):
    spec, params = tiny_model
    frames, labels = balanced
    clean = analysis.probe_accuracy(spec, params, clean_probe, frames, labels)
    sweep = analysis.gaussian_noise_sweep(spec, params, clean_probe, frames, labels, sigmas=(0.0, 0.1, 10.0))
    assert sweep[0]["accuracy"] == clean
    assert abs(sweep[-1]["accuracy"] - 0.1) <= 0.05
    again = analysis.gaussian_noise_sweep(spec, params, clean_probe, frames, labels, sigmas=(0.0, 0.1, 10.0))
    assert sweep == again


def test_attack_config():
    assert AttackConfig(2.0).step_size == pytest.approx(0.2)
    assert AttackConfig(2.0).steps == 500
    with pytest.raises(ShapeMismatch):
        AttackConfig(-1.0)
    with pytest.raises(ShapeMismatch):
        AttackConfig(1.0, steps=0)


def test_pgd_zero_budget_bitwise(tiny_model, balanced, clean_probe):
    spec, params = tiny_model
    frames, labels = balanced
    adv, _ = analysis.pgd_l2(spec, params, clean_probe, frames[:10], labels[:10], AttackConfig(0.0))
    assert adv.tobytes() == frames[:10].tobytes()


@settings(max_examples=10, deadline=None)
@given(st.floats(0.01, 3.0), st.integers(0, 10))
def test_pgd_respects_budget_and_box(tiny_model, balanced, clean_probe, budget, start):
    spec, params = tiny_model
    frames, labels = balanced
    x, y = frames[start * 20 : start * 20 + 8], labels[start * 20 : start * 20 + 8]
    adv, _ = analysis.pgd_l2(spec, params, clean_probe, x, y, AttackConfig(budget, steps=15))
    norms = np.sqrt(((adv - x) ** 2).sum(axis=(1, 2, 3)))
    assert norms.max() <= budget + 1e-6
    assert adv.min() >= 0.0 and adv.max() <= 1.0
    # untargeted attack with early stopping never repairs a mistake
    clean_ok = clean_probe.predict(probes.embed(spec, params, x)) == y
    adv_ok = clean_probe.predict(probes.embed(spec, params, adv)) == y
    assert np.all(adv_ok <= clean_ok)


def test_pgd_linear_oracle():
    """On a linear pixel classifier the optimal L2 attack moves along w_other - w_true."""
    rng = np.random.default_rng(5)
    spec = NetworkSpec((1, 4, 4), [Flatten()])
    W = rng.normal(size=(2, 16))
    probe = LinearProbe(W, np.zeros(2), np.array([0, 1]))
    x = np.full((1, 1, 4, 4), 0.5)
    y = probe.predict(x.reshape(1, -1))
    adv, zero = analysis.pgd_l2(spec, [{}], probe, x, y, AttackConfig(0.3, steps=50, early_stop=False))
    delta = (adv - x).ravel()
    other = 1 - int(y[0])
    optimal = W[other] - W[int(y[0])]
    cos = delta @ optimal / (np.linalg.norm(delta) * np.linalg.norm(optimal))
    assert cos >= 0.99
    assert np.linalg.norm(delta) == pytest.approx(0.3, abs=1e-6)
    assert not zero.any()


def test_pgd_zero_gradient_flag():
    spec = NetworkSpec((1, 2, 2), [Flatten()])
    probe = LinearProbe(np.zeros((2, 4)), np.array([1.0, 0.0]), np.array([0, 1]))
    x = np.full((3, 1, 2, 2), 0.5)
    adv, zero = analysis.pgd_l2(spec, [{}], probe, x, np.zeros(3, int), AttackConfig(1.0, steps=5))
    assert zero.all()
    assert adv.tobytes() == x.tobytes()


def test_adversarial_sweep(tiny_model, balanced, clean_probe):
    spec, params = tiny_model
    frames, labels = balanced
    x, y = frames[::5], labels[::5]
    clean = analysis.probe_accuracy(spec, params, clean_probe, x, y)
    sweep = analysis.adversarial_sweep(spec, params, clean_probe, x, y, (0.0, 0.1, 0.5, 2.0), steps=20)
    acc = [r["accuracy"] for r in sweep]
    assert acc[0] == clean
    assert all(b <= a + 0.02 for a, b in zip(acc, acc[1:]))
    assert all(r["max_norm"] <= r["budget"] + 1e-6 for r in sweep)
    with pytest.raises(ShapeMismatch):
        analysis.adversarial_sweep(spec, params, clean_probe, x, y, (0.5, 0.1))
