import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from groupr2.errors import DomainError
from groupr2.model import (
    GroupR2Model,
    RegressionData,
    UnconstrainedParams,
    constrain,
    log_joint,
    pointwise_predictive_logdens,
    standardize,
)
from groupr2.prior_core import (
    GroupStructure,
    Hyperparams,
    InterceptPrior,
    PriorDraw,
    SigmaPrior,
    sample_prior,
)


def make_problem(rng, sizes, n=20, flat=False):
    structure = GroupStructure(tuple(sizes))
    X = standardize(rng.normal(size=(n, structure.p)))
    y = X[:, 0] - 0.5 * X[:, -1] + rng.normal(size=n) + 2.0
    hyper = Hyperparams(a1=rng.uniform(0.3, 2), a2=rng.uniform(0.3, 2), a_G=rng.uniform(0.3, 2),
                        c=tuple(rng.uniform(0.2, 2, size=structure.G)),
                        intercept_prior=InterceptPrior(flat=flat))
    return GroupR2Model(RegressionData(y, X, structure), hyper)


def reference_log_joint(model, theta):
    """Independent recomputation from scipy densities on the constrained scale."""
    draw, log_j = model.constrain(theta)
    d = model.data
    sigma = math.sqrt(draw.sigma2)
    out = stats.norm.logpdf(d.y, draw.b0 + d.X @ draw.b, sigma).sum()
    out += stats.norm.logpdf(draw.b, 0.0, sigma * np.sqrt(draw.lambda2)).sum()
    h = model.hyper
    out += stats.betaprime.logpdf(draw.tau2, h.a1, h.a2)
    if model.G > 1:
        out += stats.dirichlet.logpdf(draw.phi, np.full(model.G, h.a_G))
    for g, sl in enumerate(model.structure.slices()):
        v = draw.varphi[sl]
        if len(v) > 1:
            out += stats.dirichlet.logpdf(v, np.full(len(v), h.c[g]))
    out += math.log(2.0) + stats.t.logpdf(sigma, model.sigma_df, scale=model.sigma_scale)
    if not model.intercept_flat:
        out += stats.norm.logpdf(draw.b0, model.intercept_mean, model.intercept_sd)
    return out + log_j


def flat_constrained(model, theta):
    """Constrained coordinates with one simplex entry dropped per simplex."""
    draw, _ = model.constrain(theta)
    parts = [draw.b, [draw.tau2], draw.phi[:-1]]
    for sl in model.structure.slices():
        parts.append(draw.varphi[sl][:-1])
    parts.append([math.sqrt(draw.sigma2), draw.b0])
    return np.concatenate(parts)


def test_zero_vector_gives_uniform_simplices():
    structure = GroupStructure((3, 1, 4))
    hyper = Hyperparams(1, 1, 1, (1, 1, 1))
    draw, _ = constrain(UnconstrainedParams.zeros(structure), hyper, structure)
    np.testing.assert_allclose(draw.phi, 1.0 / 3, rtol=1e-14)
    np.testing.assert_allclose(draw.varphi, [1 / 3] * 3 + [1.0] + [0.25] * 4, rtol=1e-14)
    assert draw.tau2 == 1.0 and draw.sigma2 == 1.0


def test_single_coefficient_has_no_sticks():
    structure = GroupStructure((1,))
    hyper = Hyperparams(1, 1, 1, (1,))
    theta = np.array([0.7, math.log(4.0), math.log(0.5), 0.3])
    draw, _ = constrain(theta, hyper, structure)
    assert draw.phi[0] == 1.0 and draw.varphi[0] == 1.0
    assert draw.b[0] == pytest.approx(0.7 * 0.5 * 2.0, rel=1e-14)
    assert draw.b0 == 0.3


def test_constrain_rejects_non_finite():
    structure = GroupStructure((2,))
    hyper = Hyperparams(1, 1, 1, (1,))
    theta = np.zeros(6)
    theta[2] = np.nan
    with pytest.raises(DomainError):
        constrain(theta, hyper, structure)


@given(st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_constrain_gives_valid_draw_and_round_trips(seed):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 5, size=rng.integers(1, 4))
    model = make_problem(rng, sizes)
    theta = rng.normal(scale=2.0, size=model.dim)
    draw, log_j = model.constrain(theta)
    assert math.isfinite(log_j)
    assert draw.phi.sum() == pytest.approx(1.0, abs=1e-12)
    for sl in model.structure.slices():
        assert draw.varphi[sl].sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(draw.lambda2 > 0) and draw.sigma2 > 0
    np.testing.assert_allclose(model.unconstrain(draw), theta, rtol=0, atol=1e-10)


@pytest.mark.parametrize("sizes", [(2, 1), (3,), (2, 2)])
def test_log_jacobian_matches_finite_difference_determinant(sizes):
    rng = np.random.default_rng(11)
    model = make_problem(rng, sizes)
    h = 1e-6
    for _ in range(3):
        theta = rng.normal(size=model.dim)
        J = np.empty((model.dim, model.dim))
        for j in range(model.dim):
            e = np.zeros(model.dim)
            e[j] = h
            J[:, j] = (flat_constrained(model, theta + e) - flat_constrained(model, theta - e)) / (2 * h)
        sign, logdet = np.linalg.slogdet(J)
        _, log_j = model.constrain(theta)
        assert sign != 0
        assert abs(logdet - log_j) < 1e-5 * max(1.0, abs(log_j))


@pytest.mark.parametrize("flat", [False, True])
def test_log_joint_matches_scipy_reference(flat):
    rng = np.random.default_rng(5)
    model = make_problem(rng, (3, 1, 2), flat=flat)
    for _ in range(10):
        theta = rng.normal(size=model.dim)
        value, _ = model.log_joint(theta)
        assert value == pytest.approx(reference_log_joint(model, theta), rel=1e-11, abs=1e-9)


def _fd_gradient(model, theta, step=1e-5):
    g = np.empty(model.dim)
    for j in range(model.dim):
        hj = step * max(1.0, abs(theta[j]))
        e = np.zeros(model.dim)
        e[j] = hj
        g[j] = (model.log_joint(theta + e)[0] - model.log_joint(theta - e)[0]) / (2 * hj)
    return g


def test_gradient_matches_finite_differences_random_instances():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(5):
        sizes = rng.integers(1, 6, size=rng.integers(1, 5))
        model = make_problem(rng, sizes, n=int(rng.integers(5, 40)))
        for _ in range(10):
            theta = rng.normal(scale=1.5, size=model.dim)
            _, grad = model.log_joint(theta)
            fd = _fd_gradient(model, theta)
            err = np.max(np.abs(grad - fd) / np.maximum(1.0, np.abs(fd)))
            worst = max(worst, err)
    assert worst < 1e-4


def test_gradient_small_instance():
    rng = np.random.default_rng(3)
    model = make_problem(rng, (4, 2), n=20)
    theta = rng.normal(size=model.dim)
    _, grad = model.log_joint(theta)
    np.testing.assert_allclose(grad, _fd_gradient(model, theta), rtol=1e-5, atol=1e-5)


def test_empty_data_is_prior_plus_jacobian():
    rng = np.random.default_rng(8)
    structure = GroupStructure((2, 3))
    hyper = Hyperparams(0.5, 0.5, 1.0, (0.5, 0.5), sigma_prior=SigmaPrior(3, 1.0))
    model = GroupR2Model(RegressionData.empty(structure), hyper)
    theta = rng.normal(size=model.dim)
    value, grad = model.log_joint(theta)
    assert value == pytest.approx(reference_log_joint(model, theta), rel=1e-12)
    np.testing.assert_allclose(grad, _fd_gradient(model, theta), rtol=1e-5, atol=1e-6)
    # the defaults for missing data: unit scale, intercept N(0, 10)
    assert model.sigma_scale == 1.0
    assert model.intercept_mean == 0.0 and model.intercept_sd == 10.0


def test_log_joint_is_deterministic_and_functional_form_agrees():
    rng = np.random.default_rng(9)
    model = make_problem(rng, (2, 2))
    theta = rng.normal(size=model.dim)
    params = UnconstrainedParams.from_vector(theta, model.structure)
    v1, g1 = log_joint(params, model.data, model.hyper)
    v2, g2 = model.log_joint(theta)
    assert v1 == v2
    np.testing.assert_array_equal(g1, g2)
    other = theta + 0.1
    assert model.log_joint(other)[0] - v2 == pytest.approx(
        reference_log_joint(model, other) - reference_log_joint(model, theta), rel=1e-9)


def test_log_joint_invariant_under_group_permutation():
    rng = np.random.default_rng(12)
    model = make_problem(rng, (2, 3, 1))
    theta = rng.normal(size=model.dim)
    draw, _ = model.constrain(theta)
    order = [2, 0, 1]
    s = model.structure
    cols = np.concatenate([np.arange(s.starts[g], s.starts[g] + s.group_sizes[g]) for g in order])
    new_struct = GroupStructure(tuple(s.group_sizes[g] for g in order))
    h = model.hyper
    new_hyper = Hyperparams(h.a1, h.a2, h.a_G, tuple(h.c[g] for g in order))
    new_model = GroupR2Model(RegressionData(model.data.y, model.data.X[:, cols], new_struct), new_hyper)
    new_draw = PriorDraw(draw.tau2, draw.phi[order], draw.varphi[cols], draw.sigma2,
                         draw.lambda2[cols], draw.b[cols], draw.b0, new_struct)
    v_old = model.log_joint(theta)[0]
    v_new = new_model.log_joint(new_model.unconstrain(new_draw))[0]
    # the stick-breaking Jacobian depends on the order, the density on the simplex does not
    j_old = model.constrain(theta)[1]
    j_new = new_model.constrain(new_model.unconstrain(new_draw))[1]
    assert v_old - j_old == pytest.approx(v_new - j_new, rel=1e-10)


def test_unstandardized_design_is_rejected():
    structure = GroupStructure((2,))
    X = np.random.default_rng(0).normal(size=(10, 2)) * 3
    with pytest.raises(DomainError):
        RegressionData(np.zeros(10), X, structure)
    with pytest.raises(DomainError):
        RegressionData(np.zeros(9), standardize(X), structure)


def test_pointwise_predictive():
    structure = GroupStructure((2,))
    draw = PriorDraw(1.0, np.array([1.0]), np.array([0.5, 0.5]), 4.0, np.array([0.5, 0.5]),
                     np.zeros(2), 0.0, structure)
    assert pointwise_predictive_logdens(1.3, [0.2, -1.0], draw) == pytest.approx(
        stats.norm.logpdf(1.3, 0, 2.0), rel=1e-14)
    rng = np.random.default_rng(4)
    hyper = Hyperparams(1, 1, 1, (1, 1))
    s2 = GroupStructure((3, 2))
    d = sample_prior(hyper, s2, rng, sigma=1.5)
    x = rng.normal(size=5)
    mu = d.b0 + sum(x[i] * d.b[i] for i in range(5))
    direct = -0.5 * math.log(2 * math.pi * d.sigma2) - (0.7 - mu) ** 2 / (2 * d.sigma2)
    assert pointwise_predictive_logdens(0.7, x, d) == pytest.approx(direct, rel=1e-12)
    # adding a zero-coefficient column changes nothing
    s3 = GroupStructure((3, 3))
    d3 = PriorDraw(d.tau2, d.phi, np.concatenate([d.varphi[:3], [0.3, 0.3, 0.4]]), d.sigma2,
                   np.concatenate([d.lambda2, [1.0]]), np.concatenate([d.b, [0.0]]), d.b0, s3)
    assert pointwise_predictive_logdens(0.7, np.append(x, 5.0), d3) == pytest.approx(direct, rel=1e-12)


def test_compiled_kernel_matches_numpy_path():
    rng = np.random.default_rng(21)
    for sizes in [(1,), (3,), (2, 1, 4), (5, 5)]:
        for flat in (False, True):
            model = make_problem(rng, sizes, flat=flat)
            fn, args = model.kernel
            for _ in range(5):
                theta = rng.normal(scale=2.0, size=model.dim)
                v1, g1 = model.log_joint(theta)
                v2, g2 = fn(theta, args)
                assert v2 == pytest.approx(v1, rel=1e-12, abs=1e-10)
                np.testing.assert_allclose(g2, g1, rtol=1e-10, atol=1e-10)
    structure = GroupStructure((2, 3))
    empty = GroupR2Model(RegressionData.empty(structure), Hyperparams(1, 1, 1, (1, 1)))
    theta = rng.normal(size=empty.dim)
    fn, args = empty.kernel
    assert fn(theta, args)[0] == pytest.approx(empty.log_joint(theta)[0], rel=1e-12)
