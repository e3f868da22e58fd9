"""Synthetic grouped-regression benchmarks and the metrics used to compare priors.

Data: ``x ~ N(0, Sigma_X)`` with exchangeable blocks (``rho_in`` within a
group, ``rho_out`` across groups), standardized columns, one of five
coefficient patterns, and a noise variance set to hit a target population R².

Metrics: ELPD on a fresh test set, draw-wise RMSE (all / zero / nonzero
coefficients), credible-interval coverage with selection by zero exclusion,
ROC over the credible level, and convergence summaries.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special

from .errors import DomainError
from .hyperopt import resolve_preset
from .model import GroupR2Model, RegressionData
from .prior_core import GroupStructure
from .sampler import SamplerConfig, ess, rhat, sample

SIGNALS = ("Concentrated", "RandomConcentrated", "Distributed", "RandomDistributed",
           "RandomCoefficients")
ROC_LEVELS = tuple(np.round(np.linspace(0.005, 0.995, 99), 3))
MIN_DRAWS_FOR_INTERVALS = 20

_DISTRIBUTED_PATTERN = np.array([0.5] * 5 + [1.0] * 5)
_CONCENTRATED_VALUE = 2.0
_RANDOM_SD = 3.0


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation cell.

    ``Sigma_X`` must be positive definite; that is checked by a Cholesky
    factorization when the spec is built.
    """

    n: int
    p: int
    r2_target: float
    signal: str
    group_size: int = 10
    rho_in: float = 0.8
    rho_out: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.p < 1 or self.group_size < 1:
            raise DomainError("n, p and group_size must be positive")
        if self.p % self.group_size:
            raise DomainError(f"p = {self.p} is not a multiple of group_size = {self.group_size}")
        if not 0 < self.r2_target < 1:
            raise DomainError("r2_target must lie in (0, 1)")
        if self.signal not in SIGNALS:
            raise DomainError(f"unknown signal {self.signal!r}; expected one of {SIGNALS}")
        try:
            np.linalg.cholesky(sigma_x(self))
        except np.linalg.LinAlgError:
            raise DomainError("the block correlation matrix is not positive definite") from None

    @property
    def G(self):
        return self.p // self.group_size

    @property
    def structure(self):
        return GroupStructure.uniform(self.G, self.group_size)


def sigma_x(spec):
    """Block-exchangeable covariance with unit diagonal."""
    block = np.repeat(np.arange(spec.G), spec.group_size)
    S = np.where(block[:, None] == block[None, :], spec.rho_in, spec.rho_out)
    np.fill_diagonal(S, 1.0)
    return S


def _standardize(X, center=None, scale=None):
    if center is None:
        center = X.mean(axis=0)
        scale = X.std(axis=0, ddof=1)
    return (X - center) / scale, center, scale


def gen_design(spec, rng, n=None):
    """``n`` rows (default ``spec.n``) from ``N(0, Sigma_X)``, standardized to unit sample variance."""
    n = spec.n if n is None else n
    L = np.linalg.cholesky(sigma_x(spec))
    X = rng.standard_normal((n, spec.p)) @ L.T
    return _standardize(X)[0]


def gen_coefficients(spec, rng):
    """Coefficient vector and active mask for the scenario's signal pattern.

    ``RandomCoefficients`` uses the fixed concentrated (``b_g1 = 2``) and
    distributed (``0.5 x 5, 1 x 5``) patterns for the groups it activates.
    """
    p, k, G = spec.p, spec.group_size, spec.G
    b = np.zeros(p)
    needs_ten = spec.signal in ("Distributed", "RandomDistributed", "RandomCoefficients")
    if needs_ten and k < 10:
        raise DomainError(f"{spec.signal} needs group_size >= 10")
    if spec.signal == "Concentrated":
        b[::k] = _CONCENTRATED_VALUE
    elif spec.signal == "RandomConcentrated":
        b[::k] = rng.normal(0.0, _RANDOM_SD, size=G)
    elif spec.signal == "Distributed":
        b[:10] = _DISTRIBUTED_PATTERN
    elif spec.signal == "RandomDistributed":
        b[:10] = rng.normal(0.0, _RANDOM_SD, size=10)
    else:
        first = "concentrated" if rng.random() < 0.5 else "distributed"
        kinds = [first]
        for _ in range(1, G):
            u = rng.random()
            kinds.append("concentrated" if u < 0.2 else "distributed" if u < 0.4 else "none")
        for g, kind in enumerate(kinds):
            if kind == "concentrated":
                b[g * k] = _CONCENTRATED_VALUE
            elif kind == "distributed":
                b[g * k:g * k + 10] = _DISTRIBUTED_PATTERN
    return b, b != 0


def sigma_from_r2(b, sigma_x_matrix, r2_target):
    """Noise variance that gives population R² ``r2_target``: ``b'Sb (1 - R²) / R²``."""
    if not 0 < r2_target < 1:
        raise DomainError("r2_target must lie in (0, 1)")
    b = np.asarray(b, dtype=float)
    signal = float(b @ np.asarray(sigma_x_matrix) @ b)
    if not signal > 0:
        raise DomainError("b' Sigma b must be > 0 to reach a target R2")
    return signal * (1.0 - r2_target) / r2_target


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    b: np.ndarray
    active: np.ndarray
    sigma2: float
    spec: ScenarioSpec

    def regression_data(self, structure=None):
        return RegressionData(self.y, self.X, structure or self.spec.structure)


def simulate_dataset(spec, rng=None):
    """Training data and an independent test set of the same size.

    The test design is standardized with the training column means and
    standard deviations; responses use the same coefficients and noise.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    S = sigma_x(spec)
    L = np.linalg.cholesky(S)
    b, active = gen_coefficients(spec, rng)
    sigma2 = sigma_from_r2(b, S, spec.r2_target)
    sd = math.sqrt(sigma2)
    X, center, scale = _standardize(rng.standard_normal((spec.n, spec.p)) @ L.T)
    y = X @ b + sd * rng.standard_normal(spec.n)
    X_test = _standardize(rng.standard_normal((spec.n, spec.p)) @ L.T, center, scale)[0]
    y_test = X_test @ b + sd * rng.standard_normal(spec.n)
    return Dataset(X, y, X_test, y_test, b, active, sigma2, spec)


# -- metrics ----------------------------------------------------------------------


def _draw_arrays(draws):
    """``(b, b0, sigma)`` with draws along the first axis."""
    if hasattr(draws, "transformed"):
        t = draws.transformed
        return (t["b"].reshape(-1, t["b"].shape[-1]), t["b0"].reshape(-1),
                t["sigma"].reshape(-1))
    b = np.atleast_2d(np.asarray(draws["b"], dtype=float))
    S = b.shape[0]
    b0 = np.broadcast_to(np.asarray(draws.get("b0", 0.0), dtype=float), (S,))
    sigma = np.broadcast_to(np.asarray(draws["sigma"], dtype=float), (S,))
    return b, b0, sigma


def elpd(test_y, test_X, draws):
    """``sum_i log( (1/S) sum_s N(y_i; b0_s + x_i'b_s, sigma_s²) )``.

    ``draws`` is a :class:`~groupr2.sampler.ChainDraws` or a mapping with
    ``b`` (S, p), ``b0`` and ``sigma`` (S,) entries.
    """
    b, b0, sigma = _draw_arrays(draws)
    test_X = np.atleast_2d(np.asarray(test_X, dtype=float))
    test_y = np.asarray(test_y, dtype=float).reshape(-1)
    if test_X.shape != (test_y.shape[0], b.shape[1]):
        raise DomainError("test data dimensions do not match the draws")
    mu = b0[:, None] + b @ test_X.T
    ll = (-0.5 * math.log(2 * math.pi) - np.log(sigma)[:, None]
          - 0.5 * ((test_y[None, :] - mu) / sigma[:, None]) ** 2)
    return float(np.sum(special.logsumexp(ll, axis=0) - math.log(b.shape[0])))


def rmse_posterior(draws, b_true, subset="all"):
    """Average over coefficients of ``sqrt(mean_s (b_i^(s) - b_i)²)``.

    ``subset`` picks all coefficients, the true zeros or the true nonzeros.
    """
    b = _draw_arrays(draws)[0] if not isinstance(draws, np.ndarray) else np.atleast_2d(draws)
    b_true = np.asarray(b_true, dtype=float)
    if b.shape[1] != b_true.shape[0]:
        raise DomainError("draws and b_true have different lengths")
    if subset == "all":
        keep = np.ones(b_true.shape, dtype=bool)
    elif subset == "zero":
        keep = b_true == 0
    elif subset == "nonzero":
        keep = b_true != 0
    else:
        raise DomainError(f"unknown subset {subset!r}")
    if not keep.any():
        raise DomainError(f"subset {subset!r} is empty")
    per = np.sqrt(np.mean((b[:, keep] - b_true[keep]) ** 2, axis=0))
    return float(per.mean())


def delta_metric(q_grouped, q_nongrouped, transform="identity"):
    """``transform(q_grouped - q_nongrouped)`` with ``transform`` identity or asinh."""
    d = q_grouped - q_nongrouped
    if transform == "identity":
        return d
    if transform == "asinh":
        return math.asinh(d)
    raise DomainError(f"unknown transform {transform!r}")


def coverage_and_roc(draws, b_true, levels=ROC_LEVELS, active=None):
    """Equal-tailed marginal intervals at each credible level.

    A coefficient is selected when its interval excludes 0 strictly; a
    zero-width interval sitting exactly on the true value counts as covering.
    ``active`` defaults to ``b_true != 0``.

    Returns
    -------
    dict
        ``coverage``, ``width``, ``sensitivity``, ``specificity`` (arrays over
        ``levels``), the same at 95% as scalars, and ``roc_points`` as
        ``(fpr, tpr)`` pairs sorted by fpr.
    """
    b = _draw_arrays(draws)[0] if not isinstance(draws, np.ndarray) else np.atleast_2d(draws)
    if b.shape[0] < MIN_DRAWS_FOR_INTERVALS:
        raise DomainError(f"need at least {MIN_DRAWS_FOR_INTERVALS} draws for interval quantiles")
    levels = np.asarray(levels, dtype=float)
    if np.any((levels <= 0) | (levels >= 1)):
        raise DomainError("credible levels must lie in (0, 1)")
    b_true = np.asarray(b_true, dtype=float)
    active = (b_true != 0) if active is None else np.asarray(active, dtype=bool)
    alpha = (1.0 - levels) / 2.0
    lo = np.quantile(b, alpha, axis=0)
    hi = np.quantile(b, 1.0 - alpha, axis=0)
    covered = (lo <= b_true) & (b_true <= hi)
    selected = (lo > 0) | (hi < 0)
    n_act, n_null = active.sum(), (~active).sum()
    sens = selected[:, active].mean(axis=1) if n_act else np.full(len(levels), np.nan)
    spec_ = (~selected[:, ~active]).mean(axis=1) if n_null else np.full(len(levels), np.nan)
    out = {
        "levels": levels,
        "coverage": covered.mean(axis=1),
        "width": (hi - lo).mean(axis=1),
        "sensitivity": sens,
        "specificity": spec_,
    }
    fpr = 1.0 - spec_
    order = np.lexsort((sens, fpr))
    out["roc_points"] = [(float(fpr[i]), float(sens[i])) for i in order]
    i95 = int(np.argmin(np.abs(levels - 0.95)))
    out["coverage95"] = float(out["coverage"][i95])
    out["width95"] = float(out["width"][i95])
    out["sensitivity95"] = float(sens[i95])
    out["specificity95"] = float(spec_[i95])
    return out


@dataclass
class MetricsReport:
    elpd: float
    rmse_all: float
    rmse_zero: float
    rmse_nonzero: float
    coverage95: float
    interval_width_mean: float
    sensitivity: float
    specificity: float
    roc_points: list
    rhat_max: float
    ess_min: float
    divergence_rate: float = 0.0
    roc_by_level: list = None

    def row(self):
        d = asdict(self)
        d.pop("roc_points")
        d.pop("roc_by_level")
        return d


def _nan_if_empty(fn, *args):
    try:
        return fn(*args)
    except DomainError:
        return math.nan


def convergence_summary(draws):
    """Worst R-hat and smallest bulk ESS over coefficients, R², σ and b0.

    Quantities that are constant in every draw are skipped.
    """
    t = draws.transformed
    series = [t["b"][:, :, j] for j in range(t["b"].shape[2])]
    series += [t["r2"], t["sigma"], t["b0"]]
    rh, es = [], []
    for x in series:
        if np.ptp(x) == 0:
            continue
        rh.append(rhat(x))
        es.append(ess(x))
    return (max(rh) if rh else math.nan, min(es) if es else math.nan)


def evaluate(draws, data):
    """Compute a :class:`MetricsReport` for one fit against its dataset."""
    cov = coverage_and_roc(draws, data.b, ROC_LEVELS, data.active)
    rh, es = convergence_summary(draws)
    return MetricsReport(
        elpd=elpd(data.y_test, data.X_test, draws),
        rmse_all=rmse_posterior(draws, data.b, "all"),
        rmse_zero=_nan_if_empty(rmse_posterior, draws, data.b, "zero"),
        rmse_nonzero=_nan_if_empty(rmse_posterior, draws, data.b, "nonzero"),
        coverage95=cov["coverage95"],
        interval_width_mean=cov["width95"],
        sensitivity=cov["sensitivity95"],
        specificity=cov["specificity95"],
        roc_points=cov["roc_points"],
        rhat_max=rh,
        ess_min=es,
        divergence_rate=draws.divergence_rate,
        roc_by_level=[(float(lv), float(1.0 - sp), float(se)) for lv, sp, se
                      in zip(cov["levels"], cov["specificity"], cov["sensitivity"])],
    )


def fit(data, preset_name, config):
    """Fit one preset to a dataset and return the draws."""
    preset = resolve_preset(preset_name, data.spec.structure)
    model = GroupR2Model(data.regression_data(preset.structure), preset.hyper)
    return sample(model, config)


def scenario_seed(base_seed, signal_index, r2_index):
    """Seed for one (signal, R²) cell of a study grid."""
    ss = np.random.SeedSequence(int(base_seed), spawn_key=(int(signal_index), int(r2_index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def replication_seeds(base_seed, replication):
    """Independent data and sampler seeds for one replication."""
    ss = np.random.SeedSequence(int(base_seed), spawn_key=(int(replication),))
    data_seed, sampler_seed = ss.generate_state(2, dtype=np.uint64)
    return int(data_seed), int(sampler_seed)


def run_replication(spec, presets, config, replication=0):
    """Simulate one dataset and evaluate every preset on it.

    All presets share the dataset and the sampler seed, which is what makes
    grouped/nongrouped differences paired.

    Returns
    -------
    dict
        Preset name to :class:`MetricsReport`.
    """
    data_seed, sampler_seed = replication_seeds(spec.seed, replication)
    data = simulate_dataset(spec, np.random.default_rng(data_seed))
    cfg = SamplerConfig(**{**asdict(config), "seed": sampler_seed})
    return {name: evaluate(fit(data, name, cfg), data) for name in presets}
