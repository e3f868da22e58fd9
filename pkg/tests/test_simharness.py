import math

import numpy as np
import pytest
from scipy import stats

from groupr2.errors import DomainError
from groupr2.sampler import SamplerConfig
from groupr2.simharness import (
    SIGNALS,
    ScenarioSpec,
    coverage_and_roc,
    delta_metric,
    elpd,
    gen_coefficients,
    gen_design,
    rmse_posterior,
    run_replication,
    sigma_from_r2,
    sigma_x,
    simulate_dataset,
)


def spec(**kw):
    base = dict(n=100, p=40, r2_target=0.8, signal="Concentrated")
    base.update(kw)
    return ScenarioSpec(**base)


def test_spec_validation():
    with pytest.raises(DomainError):
        spec(p=45)
    with pytest.raises(DomainError):
        spec(signal="Sparse")
    with pytest.raises(DomainError):
        spec(rho_in=0.1, rho_out=0.9)  # not positive definite
    with pytest.raises(DomainError):
        spec(r2_target=1.0)


def test_design_correlations():
    s = spec(n=5000, p=20)
    X = gen_design(s, np.random.default_rng(0))
    np.testing.assert_allclose(X.std(axis=0, ddof=1), 1.0, rtol=1e-12)
    C = np.corrcoef(X, rowvar=False)
    block = np.repeat(np.arange(2), 10)
    same = (block[:, None] == block[None, :]) & ~np.eye(20, dtype=bool)
    diff = block[:, None] != block[None, :]
    # Fisher-z standard error at n = 5000 is about 0.014 for single pairs; the block means are tighter
    assert abs(C[same].mean() - 0.8) < 0.03 and np.all(np.abs(C[same] - 0.8) < 0.03)
    assert abs(C[diff].mean() - 0.2) < 0.03 and np.all(np.abs(C[diff] - 0.2) < 0.06)


def test_identity_design_when_uncorrelated():
    s = spec(n=5000, p=20, rho_in=0.0, rho_out=0.0)
    np.testing.assert_array_equal(sigma_x(s), np.eye(20))
    C = np.corrcoef(gen_design(s, np.random.default_rng(1)), rowvar=False)
    # max over 190 pairs of |r| with sd 1/sqrt(n): 5 sd keeps the false-alarm rate below 1e-4
    assert np.max(np.abs(C - np.eye(20))) < 5 / math.sqrt(5000)


def test_concentrated_pattern():
    b, mask = gen_coefficients(spec(p=100), np.random.default_rng(0))
    assert mask.sum() == 10
    np.testing.assert_array_equal(np.flatnonzero(b), np.arange(0, 100, 10))
    assert np.all(b[mask] == 2.0)


def test_distributed_pattern():
    b, mask = gen_coefficients(spec(p=100, signal="Distributed"), np.random.default_rng(0))
    np.testing.assert_array_equal(b[:10], [0.5] * 5 + [1.0] * 5)
    assert not b[10:].any() and mask.sum() == 10


def test_random_patterns():
    rng = np.random.default_rng(4)
    b, mask = gen_coefficients(spec(signal="RandomConcentrated"), rng)
    assert mask.sum() == 4 and set(np.flatnonzero(b)) == {0, 10, 20, 30}
    b, mask = gen_coefficients(spec(signal="RandomDistributed"), rng)
    assert mask[:10].all() and not mask[10:].any()
    with pytest.raises(DomainError):
        gen_coefficients(spec(p=40, group_size=5, signal="Distributed"), rng)


def test_random_coefficients_frequencies():
    s = spec(p=100, signal="RandomCoefficients")
    rng = np.random.default_rng(7)
    active = np.zeros(10)
    first_conc = 0
    n = 10_000
    for _ in range(n):
        b, _ = gen_coefficients(s, rng)
        groups = b.reshape(10, 10)
        active += groups.any(axis=1)
        first_conc += np.count_nonzero(groups[0]) == 1
    assert active[0] == n
    # binomial sd of the pooled frequency: sqrt(.4 * .6 / 9e4) ~ 0.0016
    assert abs(active[1:].mean() / n - 0.4) < 0.02
    assert abs(first_conc / n - 0.5) < 0.02


def test_sigma_from_r2_arithmetic():
    S = np.eye(2)
    b = np.array([1.0, 0.0])
    assert sigma_from_r2(b, S, 0.5) == 1.0
    assert sigma_from_r2(b, S, 0.8) == pytest.approx(0.25)
    with pytest.raises(DomainError):
        sigma_from_r2(np.zeros(2), S, 0.5)


@pytest.mark.parametrize("signal", SIGNALS)
def test_empirical_r2_hits_target(signal):
    s = spec(n=100_000, signal=signal, r2_target=0.25, seed=3)
    d = simulate_dataset(s, np.random.default_rng(5))
    fitted = d.X @ d.b
    r2 = fitted.var() / d.y.var()
    assert abs(r2 - 0.25) < 0.01


def test_elpd_single_draw_and_duplication():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 3))
    y = rng.normal(size=6)
    one = {"b": rng.normal(size=(1, 3)), "b0": np.array([0.3]), "sigma": np.array([1.4])}
    direct = stats.norm.logpdf(y, 0.3 + X @ one["b"][0], 1.4).sum()
    assert elpd(y, X, one) == pytest.approx(direct, rel=1e-13)
    many = {"b": rng.normal(size=(5, 3)), "b0": rng.normal(size=5), "sigma": rng.uniform(0.5, 2, 5)}
    doubled = {k: np.concatenate([v, v]) for k, v in many.items()}
    perm = rng.permutation(5)
    shuffled = {k: v[perm] for k, v in many.items()}
    assert elpd(y, X, doubled) == pytest.approx(elpd(y, X, many), rel=1e-13)
    assert elpd(y, X, shuffled) == pytest.approx(elpd(y, X, many), rel=1e-13)


def test_elpd_hand_instance():
    # three draws, two observations, one predictor, worked by hand
    X = np.array([[1.0], [-1.0]])
    y = np.array([0.5, 0.0])
    draws = {"b": np.array([[0.0], [1.0], [0.5]]), "b0": np.zeros(3), "sigma": np.ones(3)}
    def dens(r):
        return math.exp(-0.5 * r * r) / math.sqrt(2 * math.pi)
    expected = (math.log((dens(0.5) + dens(0.5) + dens(0.0)) / 3)
                + math.log((dens(0.0) + dens(1.0) + dens(0.5)) / 3))
    assert elpd(y, X, draws) == pytest.approx(expected, rel=1e-14)
    with pytest.raises(DomainError):
        elpd(y, np.ones((2, 2)), draws)


def test_rmse_arithmetic():
    b_true = np.array([0.0, 2.0])
    assert rmse_posterior(np.tile(b_true, (4, 1)), b_true) == 0.0
    draws = np.array([[1.0, 3.0], [-1.0, 1.0]])
    assert rmse_posterior(draws, b_true) == pytest.approx(1.0)
    assert rmse_posterior(draws, b_true, "zero") == pytest.approx(1.0)
    rng = np.random.default_rng(2)
    d = rng.normal(size=(4, 3))
    t = np.array([0.0, 1.0, -2.0])
    manual = np.mean([math.sqrt(np.mean((d[:, i] - t[i]) ** 2)) for i in range(3)])
    assert rmse_posterior(d, t) == pytest.approx(manual, rel=1e-14)
    manual_nz = np.mean([math.sqrt(np.mean((d[:, i] - t[i]) ** 2)) for i in (1, 2)])
    assert rmse_posterior(d, t, "nonzero") == pytest.approx(manual_nz, rel=1e-14)
    assert rmse_posterior(d[::-1], t) == pytest.approx(rmse_posterior(d, t), rel=1e-14)
    with pytest.raises(DomainError):
        rmse_posterior(d, np.ones(3), "zero")


def test_delta_metric():
    assert delta_metric(3.0, 3.0) == 0.0
    assert delta_metric(3.0, 3.0, "asinh") == 0.0
    assert delta_metric(1.0, 3.0, "asinh") == -delta_metric(3.0, 1.0, "asinh")
    assert delta_metric(10.0, 0.0, "asinh") == pytest.approx(math.log(10 + math.sqrt(101)), rel=1e-15)


def test_coverage_point_mass_and_limits():
    b_true = np.array([0.0, 1.5, -2.0])
    point = np.tile(b_true, (50, 1))
    out = coverage_and_roc(point, b_true)
    assert np.all(out["coverage"] == 1.0)
    assert np.all(out["sensitivity"] == 1.0) and np.all(out["specificity"] == 1.0)
    with pytest.raises(DomainError):
        coverage_and_roc(point[:10], b_true)


def test_roc_endpoints_and_monotonicity():
    rng = np.random.default_rng(3)
    b_true = np.array([0.0] * 10 + [1.0] * 10)
    draws = b_true + rng.normal(scale=0.7, size=(400, 20))
    out = coverage_and_roc(draws, b_true, levels=[1e-9, 0.5, 1 - 1e-9])
    assert out["roc_points"][0] == (0.0, 0.0)
    assert out["roc_points"][-1] == (1.0, 1.0)
    full = coverage_and_roc(draws, b_true)
    fpr, tpr = np.array(full["roc_points"]).T
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


def test_specificity_calibrated_for_null_truth():
    rng = np.random.default_rng(9)
    b_true = np.zeros(400)
    # each coefficient's posterior is centred at a random offset drawn from the posterior itself
    centers = rng.normal(size=400)
    draws = centers + rng.normal(size=(4000, 400))
    out = coverage_and_roc(draws, b_true, levels=[0.5, 0.8, 0.95])
    np.testing.assert_allclose(out["specificity"], [0.5, 0.8, 0.95], atol=0.05)


@pytest.mark.slow
def test_pipeline_is_deterministic():
    s = ScenarioSpec(n=40, p=20, r2_target=0.8, signal="Distributed", seed=11)
    cfg = SamplerConfig(n_chains=2, n_warmup=150, n_samples=100, max_tree_depth=6)
    a = run_replication(s, ["R2-1.0", "nongrouped-R2D2-1.0"], cfg, replication=2)
    b = run_replication(s, ["R2-1.0", "nongrouped-R2D2-1.0"], cfg, replication=2)
    assert a == b
    assert a["R2-1.0"].elpd != a["nongrouped-R2D2-1.0"].elpd
    for rep in a.values():
        assert 0 <= rep.coverage95 <= 1 and 0 <= rep.sensitivity <= 1 and 0 <= rep.specificity <= 1
