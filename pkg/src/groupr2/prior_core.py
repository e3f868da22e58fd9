"""The Group-R2 prior hierarchy.

The prior places a Beta(a1, a2) law on the coefficient of determination R²,
which fixes the total prior variance ``tau2 = R² / (1 - R²)``. That variance
is split across groups by a symmetric Dirichlet(a_G) vector ``phi`` and then
within group ``g`` by a symmetric Dirichlet(c_g) vector ``varphi_g``, so that
coefficient ``(g, l)`` receives variance ``lambda2 = varphi_gl * phi_g * tau2``
(times the noise variance).

This module holds the hyperparameter algebra, prior simulation, and the
closed-form densities and moments implied by the hierarchy.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from . import specfun
from .errors import DomainError, NumericError, Pole

# Dirichlet sampling: below this concentration the gamma draws are made in log
# space; any coordinate under the floor is redrawn.
_LOG_SPACE_ALPHA = 0.05
_SIMPLEX_FLOOR = 1e-300
_MAX_SIMPLEX_RETRIES = 100


# ---------------------------------------------------------------------------
# Structures and hyperparameters


@dataclass(frozen=True)
class GroupStructure:
    """Partition of ``p`` coefficients into ``G`` contiguous groups.

    Coefficients are ordered group by group: group ``g`` owns the slice
    ``starts[g]:starts[g] + group_sizes[g]``.
    """

    group_sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.group_sizes)
        if len(sizes) == 0:
            raise DomainError("a group structure needs at least one group")
        if any(s < 1 for s in sizes):
            raise DomainError(f"group sizes must be >= 1, got {sizes}")
        if any(s != g for s, g in zip(sizes, self.group_sizes)):
            raise DomainError("group sizes must be integers")
        object.__setattr__(self, "group_sizes", sizes)

    @classmethod
    def uniform(cls, n_groups, size):
        return cls((size,) * n_groups)

    @classmethod
    def from_labels(cls, labels):
        """Build from per-coefficient labels that are already contiguous.

        Returns the structure and the list of distinct labels in order.
        """
        labels = list(labels)
        if not labels:
            raise DomainError("no labels given")
        order, sizes = [], []
        for lab in labels:
            if order and lab == order[-1]:
                sizes[-1] += 1
            elif lab in order:
                raise DomainError(f"group {lab!r} is not contiguous")
            else:
                order.append(lab)
                sizes.append(1)
        return cls(tuple(sizes)), order

    @property
    def G(self):
        return len(self.group_sizes)

    @property
    def p(self):
        return sum(self.group_sizes)

    @property
    def starts(self):
        return np.concatenate([[0], np.cumsum(self.group_sizes)[:-1]]).astype(int)

    @property
    def group_index(self):
        """Group id of every coefficient, shape ``(p,)``."""
        return np.repeat(np.arange(self.G), self.group_sizes)

    def slices(self):
        return [slice(s, s + n) for s, n in zip(self.starts, self.group_sizes)]

    def locate(self, i):
        """Map a flat coefficient index to its ``(g, l)`` pair (0-based)."""
        if not 0 <= i < self.p:
            raise DomainError(f"index {i} outside 0..{self.p - 1}")
        g = int(self.group_index[i])
        return g, i - int(self.starts[g])

    def flat_index(self, g, l):
        if not (0 <= g < self.G and 0 <= l < self.group_sizes[g]):
            raise DomainError(f"no coefficient at (g={g}, l={l})")
        return int(self.starts[g]) + l


@dataclass(frozen=True)
class SigmaPrior:
    """Half Student-t prior on the noise scale.

    ``scale=None`` defers the scale to the data: the model uses the sample
    standard deviation of ``y``, and prior-only simulation uses 1.
    """

    df: float = 3.0
    scale: Optional[float] = None

    def __post_init__(self):
        _positive("sigma df", self.df)
        if self.scale is not None:
            _positive("sigma scale", self.scale)


@dataclass(frozen=True)
class InterceptPrior:
    """Normal prior on the intercept, or an improper flat prior.

    ``mean=None`` / ``sd=None`` resolve to ``mean(y)`` and ``10 * sd(y)``
    when data are available, and to 0 and 10 otherwise.
    """

    mean: Optional[float] = None
    sd: Optional[float] = None
    flat: bool = False

    def __post_init__(self):
        if self.sd is not None:
            _positive("intercept sd", self.sd)


@dataclass(frozen=True)
class Hyperparams:
    """Hyperparameters of the Group-R2 prior.

    Parameters
    ----------
    a1, a2 : float
        Beta shapes of the R² prior.
    a_G : float
        Symmetric Dirichlet concentration across groups.
    c : tuple of float
        Within-group symmetric Dirichlet concentrations, one per group.
    sigma_prior : SigmaPrior
    intercept_prior : InterceptPrior
    """

    a1: float
    a2: float
    a_G: float
    c: tuple
    sigma_prior: SigmaPrior = field(default_factory=SigmaPrior)
    intercept_prior: InterceptPrior = field(default_factory=InterceptPrior)

    def __post_init__(self):
        for name in ("a1", "a2", "a_G"):
            _positive(name, getattr(self, name))
        c = tuple(float(x) for x in np.atleast_1d(self.c))
        if len(c) == 0:
            raise DomainError("c needs one entry per group")
        for x in c:
            _positive("c_g", x)
        object.__setattr__(self, "c", c)

    @property
    def mu_r2(self):
        return self.a1 / (self.a1 + self.a2)

    @property
    def nu_r2(self):
        return self.a1 + self.a2

    def check_structure(self, structure):
        if len(self.c) != structure.G:
            raise DomainError(
                f"{len(self.c)} within-group concentrations for {structure.G} groups")


@dataclass(frozen=True)
class PriorDraw:
    """One joint draw of the prior quantities.

    ``varphi`` is stored flat (length ``p``, group by group) and ``lambda2``
    holds the per-coefficient variance scales ``varphi_gl * phi_g * tau2``.
    """

    tau2: float
    phi: np.ndarray
    varphi: np.ndarray
    sigma2: float
    lambda2: np.ndarray
    b: np.ndarray
    b0: float
    structure: GroupStructure

    @property
    def r2(self):
        return tau2_to_r2(self.tau2)

    @property
    def tau2_groups(self):
        return self.phi * self.tau2

    @property
    def r2_groups(self):
        return self.phi * self.r2

    def varphi_group(self, g):
        return self.varphi[self.structure.slices()[g]]


def _positive(name, x):
    if not (np.isfinite(x) and x > 0):
        raise DomainError(f"{name} must be a finite positive number, got {x!r}")


# ---------------------------------------------------------------------------
# Hyperparameter algebra


def tau2_to_r2(tau2):
    """Map total variance to R²: ``tau2 / (tau2 + 1)``."""
    t = np.asarray(tau2, dtype=float)
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        raise DomainError(f"tau2 must be finite and >= 0, got {tau2!r}")
    out = t / (t + 1.0)
    return float(out) if out.ndim == 0 else out


def r2_to_tau2(r2):
    """Inverse of :func:`tau2_to_r2`, defined on ``[0, 1)``."""
    r = np.asarray(r2, dtype=float)
    if not np.all(np.isfinite(r)) or np.any(r < 0) or np.any(r >= 1):
        raise DomainError(f"r2 must lie in [0, 1), got {r2!r}")
    out = r / (1.0 - r)
    return float(out) if out.ndim == 0 else out


def beta_shapes_from_mean_precision(mu, nu):
    """Beta shapes ``(a1, a2) = (mu * nu, (1 - mu) * nu)``."""
    if not (np.isfinite(mu) and 0 < mu < 1):
        raise DomainError(f"mu must lie in (0, 1), got {mu!r}")
    _positive("nu", nu)
    return mu * nu, (1.0 - mu) * nu


def mean_precision_from_beta_shapes(a1, a2):
    _positive("a1", a1)
    _positive("a2", a2)
    return a1 / (a1 + a2), a1 + a2


def couple_cg_from_ag(a_G, p_g):
    """Within-group concentration ``a_G / p_g`` that makes every variance
    scale ``lambda2_gl`` marginally BetaPrime(c_g, a2)."""
    _positive("a_G", a_G)
    if int(p_g) != p_g or p_g < 1:
        raise DomainError(f"p_g must be a positive integer, got {p_g!r}")
    return a_G / p_g


def couple_ag_from_cg(structure, c):
    """Group concentration ``(1/G) sum_g p_g c_g``."""
    c = list(c)
    if len(c) != structure.G:
        raise DomainError(f"{len(c)} concentrations for {structure.G} groups")
    for x in c:
        _positive("c_g", x)
    return sum(p * x for p, x in zip(structure.group_sizes, c)) / structure.G


# ---------------------------------------------------------------------------
# Simulation


def sample_symmetric_dirichlet(rng, alpha, k, size):
    """Draw ``size`` vectors from a symmetric Dirichlet(alpha) on ``k`` parts.

    Returns an array of shape ``(size, k)``. Small concentrations are sampled
    in log space (``log G = log G' + log(U) / alpha`` with ``G' ~ Gamma(alpha+1)``)
    so that normalization does not underflow; rows with a coordinate below
    1e-300 are redrawn.
    """
    _positive("alpha", alpha)
    if k == 1:
        return np.ones((size, 1))
    out = np.empty((size, k))
    todo = np.arange(size)
    for _ in range(_MAX_SIMPLEX_RETRIES):
        m = len(todo)
        if m == 0:
            return out
        if alpha < _LOG_SPACE_ALPHA:
            lg = np.log(rng.standard_gamma(alpha + 1.0, size=(m, k)))
            lg += np.log(rng.uniform(size=(m, k))) / alpha
            lg -= special.logsumexp(lg, axis=1, keepdims=True)
            x = np.exp(lg)
        else:
            g = rng.standard_gamma(alpha, size=(m, k))
            x = g / g.sum(axis=1, keepdims=True)
        bad = ~np.all(x >= _SIMPLEX_FLOOR, axis=1)
        out[todo[~bad]] = x[~bad]
        todo = todo[bad]
    if len(todo):
        raise NumericError("simplex draw underflowed repeatedly",
                           context={"alpha": alpha, "k": k})
    return out


def sample_betaprime(rng, s1, s2, size=None):
    """BetaPrime(s1, s2) draws via ``xi ~ Gamma(s2, 1)``, ``x | xi ~ Gamma(s1, rate=xi)``."""
    _positive("s1", s1)
    _positive("s2", s2)
    xi = rng.standard_gamma(s2, size=size)
    return rng.standard_gamma(s1, size=size) / xi


def sample_half_t(rng, df, scale, size=None):
    return np.abs(rng.standard_t(df, size=size)) * scale


@dataclass(frozen=True)
class PriorSample:
    """A batch of prior draws stored as arrays (leading axis = draw)."""

    tau2: np.ndarray
    phi: np.ndarray
    varphi: np.ndarray
    sigma2: np.ndarray
    lambda2: np.ndarray
    b: np.ndarray
    b0: np.ndarray
    structure: GroupStructure

    def __len__(self):
        return len(self.tau2)

    def draw(self, i):
        return PriorDraw(float(self.tau2[i]), self.phi[i], self.varphi[i],
                         float(self.sigma2[i]), self.lambda2[i], self.b[i],
                         float(self.b0[i]), self.structure)


def sample_prior_batch(hyper, structure, n, rng, sigma=None):
    """Draw ``n`` independent samples from the full hierarchy.

    Parameters
    ----------
    hyper : Hyperparams
    structure : GroupStructure
    n : int
    rng : numpy.random.Generator
    sigma : float, optional
        Hold the noise scale fixed at this value instead of drawing it from
        the half-t prior.

    Returns
    -------
    PriorSample
    """
    hyper.check_structure(structure)
    if n < 0:
        raise DomainError("n must be >= 0")
    tau2 = sample_betaprime(rng, hyper.a1, hyper.a2, size=n)
    phi = sample_symmetric_dirichlet(rng, hyper.a_G, structure.G, n)
    varphi = np.empty((n, structure.p))
    for g, sl in enumerate(structure.slices()):
        varphi[:, sl] = sample_symmetric_dirichlet(rng, hyper.c[g], structure.group_sizes[g], n)
    if sigma is None:
        scale = hyper.sigma_prior.scale if hyper.sigma_prior.scale is not None else 1.0
        sig = sample_half_t(rng, hyper.sigma_prior.df, scale, size=n)
    else:
        _positive("sigma", sigma)
        sig = np.full(n, float(sigma))
    lambda2 = varphi * phi[:, structure.group_index] * tau2[:, None]
    b = rng.standard_normal((n, structure.p)) * np.sqrt(lambda2) * sig[:, None]
    ip = hyper.intercept_prior
    if ip.flat:
        b0 = np.zeros(n)
    else:
        mean = 0.0 if ip.mean is None else ip.mean
        sd = 10.0 if ip.sd is None else ip.sd
        b0 = mean + sd * rng.standard_normal(n)
    return PriorSample(tau2, phi, varphi, sig ** 2, lambda2, b, b0, structure)


def sample_prior(hyper, structure, rng, sigma=None):
    """A single :class:`PriorDraw` from the hierarchy."""
    return sample_prior_batch(hyper, structure, 1, rng, sigma=sigma).draw(0)


# ---------------------------------------------------------------------------
# Densities


def betaprime_logpdf(x, s1, s2):
    """Log density of BetaPrime(s1, s2): ``x^(s1-1) (1+x)^(-s1-s2) / B(s1, s2)``."""
    _positive("s1", s1)
    _positive("s2", s2)
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)) or not np.all(np.isfinite(x)):
        raise DomainError("x must be finite and > 0")
    out = (s1 - 1.0) * np.log(x) - (s1 + s2) * np.log1p(x) - special.betaln(s1, s2)
    return float(out) if out.ndim == 0 else out


def marginal_b_logdensity(b, c_g, a2):
    """Log marginal prior density of one coefficient (at unit noise scale).

    Integrating the normal kernel against ``lambda2 ~ BetaPrime(c_g, a2)``
    gives ``Gamma(eta) U(eta, nu, b²/2) / (sqrt(2 pi) B(c_g, a2))`` with
    ``eta = a2 + 1/2`` and ``nu = 3/2 - c_g``.

    At ``b = 0`` the density is infinite for ``c_g <= 1/2``; a :class:`Pole`
    is returned (kind ``"power"`` below 1/2, ``"log"`` at 1/2).
    """
    _positive("c_g", c_g)
    _positive("a2", a2)
    if not np.isfinite(b):
        raise DomainError(f"b must be finite, got {b!r}")
    eta = a2 + 0.5
    nu = 1.5 - c_g
    norm = -0.5 * math.log(2 * math.pi) - special.betaln(c_g, a2) + special.gammaln(eta)
    if b == 0:
        if c_g < 0.5:
            return Pole("power")
        if c_g == 0.5:
            return Pole("log")
        # U(eta, nu, 0) = Gamma(1 - nu) / Gamma(eta - nu + 1) for nu < 1
        return norm + special.gammaln(1 - nu) - special.gammaln(eta - nu + 1)
    return norm + specfun.log_hyp_u(eta, nu, 0.5 * b * b)


def joint_group_logdensity(b_g, varphi_g, c_g, a2, sigma2=1.0):
    """Log joint density of one group's coefficients given ``varphi_g``.

    The group variance ``tau_g2`` is integrated out against
    BetaPrime(c_g, a2), which yields ``eta = a2 + p_g/2``,
    ``nu = 1 + p_g/2 - c_g`` and ``z = sum_l b_l² / (2 varphi_l sigma2)``.
    An all-zero ``b_g`` gives a :class:`Pole` when ``c_g <= p_g / 2``.
    """
    b_g = np.atleast_1d(np.asarray(b_g, dtype=float))
    varphi_g = np.atleast_1d(np.asarray(varphi_g, dtype=float))
    if b_g.shape != varphi_g.shape or b_g.ndim != 1:
        raise DomainError("b_g and varphi_g must be vectors of equal length")
    if np.any(varphi_g <= 0) or abs(varphi_g.sum() - 1.0) > 1e-10:
        raise DomainError("varphi_g must be a positive simplex vector")
    if not np.all(np.isfinite(b_g)):
        raise DomainError("b_g must be finite")
    _positive("c_g", c_g)
    _positive("a2", a2)
    _positive("sigma2", sigma2)
    p = len(b_g)
    eta = a2 + 0.5 * p
    nu = 1.0 + 0.5 * p - c_g
    norm = (-0.5 * p * math.log(2 * math.pi * sigma2) - 0.5 * np.sum(np.log(varphi_g))
            - special.betaln(c_g, a2) + special.gammaln(eta))
    z = 0.5 * float(np.sum(b_g ** 2 / varphi_g)) / sigma2
    if z == 0.0:
        if c_g < 0.5 * p:
            return Pole("power")
        if c_g == 0.5 * p:
            return Pole("log")
        return float(norm + special.gammaln(1 - nu) - special.gammaln(eta - nu + 1))
    return float(norm + specfun.log_hyp_u(eta, nu, z))


# ---------------------------------------------------------------------------
# Moments and dependence


def rg2_moment(k, alpha_g, alpha0, a1, a2):
    """k-th moment of the group share ``R_g² = phi_g R²``.

    ``phi_g`` is the Beta(alpha_g, alpha0 - alpha_g) margin of the Dirichlet
    and R² is Beta(a1, a2), independent of it.
    """
    if int(k) != k or k < 0:
        raise DomainError(f"k must be a non-negative integer, got {k!r}")
    for name, v in (("alpha_g", alpha_g), ("alpha0", alpha0), ("a1", a1), ("a2", a2)):
        _positive(name, v)
    if alpha0 < alpha_g:
        raise DomainError("alpha0 must be >= alpha_g")
    i = np.arange(int(k))
    return float(np.prod((alpha_g + i) / (alpha0 + i)) * np.prod((a1 + i) / (a1 + a2 + i)))


def _check_corr_args(a_G, G, c_g, p_g):
    _positive("a_G", a_G)
    _positive("c_g", c_g)
    if int(G) != G or G < 1:
        raise DomainError(f"G must be a positive integer, got {G!r}")
    if int(p_g) != p_g or p_g < 2:
        raise DomainError(f"two distinct coefficients need p_g >= 2, got {p_g!r}")


def log_variance_correlation(a_G, G, c_g, p_g):
    """Correlation of ``log(phi_g varphi_gj)`` and ``log(phi_g varphi_gk)``, j != k.

    Uses ``Var(log x_i) = psi1(alpha_i) - psi1(alpha_0)`` and
    ``Cov(log x_i, log x_j) = -psi1(alpha_0)`` for Dirichlet vectors. With
    ``G = 1`` the group share is fixed at 1 and contributes no variance.
    """
    _check_corr_args(a_G, G, c_g, p_g)
    v_group = 0.0 if G == 1 else special.polygamma(1, a_G) - special.polygamma(1, G * a_G)
    t_pc = special.polygamma(1, p_g * c_g)
    return float((v_group - t_pc) / (v_group + special.polygamma(1, c_g) - t_pc))


def variance_covariance(a_G, G, c_g, p_g):
    """Covariance of the raw variance proportions ``phi_g varphi_gj`` and
    ``phi_g varphi_gk`` for j != k.

    ``E[phi_g²] = a_G (a_G + 1) / (G a_G (G a_G + 1))`` and, for the
    within-group Dirichlet, ``E[varphi_j varphi_k] = c_g / (p_g (p_g c_g + 1))``.
    (The alternative ``c_g² / (p_g² (p_g c_g + 1))`` for the second factor
    disagrees with Monte Carlo and is not used.)
    """
    _check_corr_args(a_G, G, c_g, p_g)
    e_phi2 = a_G * (a_G + 1) / (G * a_G * (G * a_G + 1))
    e_cross = c_g / (p_g * (p_g * c_g + 1))
    return float(e_phi2 * e_cross - 1.0 / (G * G * p_g * p_g))
