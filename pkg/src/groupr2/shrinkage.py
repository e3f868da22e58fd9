"""Shrinkage factors and the effective number of nonzero coefficients.

In the normal-means setting the posterior mean of a coefficient is
``(1 - kappa) * y`` with shrinkage factor ``kappa = 1 / (1 + lambda2)``.
The functions here give the prior law of ``kappa`` implied by the Group-R2
hierarchy (conditional moments, joint and marginal densities) and the
effective model size ``m_eff = sum(1 - kappa)`` with its group split.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from . import specfun
from .errors import DomainError, Pole
from .prior_core import sample_prior_batch

SURFACE_TOL = 1e-8
_SHARD_SIZE = 20_000


@dataclass(frozen=True)
class ShrinkageDraw:
    """Shrinkage factors of one prior draw and the implied effective sizes."""

    kappa: np.ndarray
    meff_group: np.ndarray
    meff_total: float

    @classmethod
    def from_prior_draw(cls, draw):
        kappa = kappa_from_lambda2(draw.lambda2)
        groups = meff_groups(kappa, draw.structure)
        return cls(kappa, groups, float(groups.sum()))


def kappa_from_lambda2(lambda2):
    """``1 / (1 + lambda2)``, elementwise."""
    lam = np.asarray(lambda2, dtype=float)
    if np.any(np.isnan(lam)) or np.any(lam < 0):
        raise DomainError("lambda2 must be >= 0")
    out = 1.0 / (1.0 + lam)
    return float(out) if out.ndim == 0 else out


def posterior_mean_normal_means(y, kappa):
    """Posterior mean ``(1 - kappa) y`` of a normal mean with known scale."""
    k = np.asarray(kappa, dtype=float)
    if np.any(k < 0) or np.any(k > 1):
        raise DomainError("kappa must lie in [0, 1]")
    out = (1.0 - k) * np.asarray(y, dtype=float)
    return float(out) if out.ndim == 0 else out


def kappa_moment_conditional(m, c_g, p_g, tau_g2):
    """``E[kappa^m | tau_g2]`` for one coefficient of a group of size ``p_g``.

    With ``varphi_gl ~ Beta(c_g, (p_g - 1) c_g)`` this is
    ``2F1(m, c_g; c_g p_g; -tau_g2)``.
    """
    if int(m) != m or m < 1:
        raise DomainError(f"m must be a positive integer, got {m!r}")
    if int(p_g) != p_g or p_g < 1:
        raise DomainError(f"p_g must be a positive integer, got {p_g!r}")
    if not (np.isfinite(c_g) and c_g > 0):
        raise DomainError("c_g must be > 0")
    if not (np.isfinite(tau_g2) and tau_g2 >= 0):
        raise DomainError("tau_g2 must be finite and >= 0")
    if p_g == 1:
        return (1.0 + tau_g2) ** (-m)
    return specfun.hyp_2f1(m, c_g, c_g * p_g, -tau_g2)


def kappa_cov_taylor(c_g, p_g, tau_g2):
    """Second-order delta-method approximation of ``Cov(kappa_gk, kappa_gl | tau_g2)``.

    Expands ``f(x) = 1 / (1 + x tau_g2)`` around ``E[varphi] = 1 / p_g`` using
    the Dirichlet variance and covariance of the within-group weights.
    """
    t = tau_g2
    denom = 1.0 + t / p_g
    d1 = -t / denom ** 2
    d2 = 2.0 * t * t / denom ** 3
    var = c_g * (p_g - 1) / (p_g ** 2 * (p_g * c_g + 1))
    cov = -c_g / (p_g ** 2 * (p_g * c_g + 1))
    return d1 * d1 * cov - 0.25 * d2 * d2 * var * var


def _check_kappa_open(kappa):
    k = np.atleast_1d(np.asarray(kappa, dtype=float))
    if k.ndim != 1 or np.any(~((k > 0) & (k < 1))):
        raise DomainError("kappa entries must lie in (0, 1)")
    return k


def kappa_joint_logdensity_conditional(kappa_g, tau_g2, c_g):
    """Log density of a group's shrinkage factors given ``tau_g2``.

    The vector lives on the surface ``sum_l (1 - kappa_l) / kappa_l = tau_g2``.
    The density is taken with respect to ``delta(s(kappa) - tau_g2) dkappa``
    and is normalized on that surface::

        Gamma(p c) / Gamma(c)^p * tau_g2^(1 - p c)
            * prod_l (1 - kappa_l)^(c - 1) kappa_l^-(c + 1)

    Raises
    ------
    DomainError
        If the point is off the surface (relative residual above 1e-8).
    """
    k = _check_kappa_open(kappa_g)
    if not (np.isfinite(tau_g2) and tau_g2 > 0):
        raise DomainError("tau_g2 must be > 0")
    if not (np.isfinite(c_g) and c_g > 0):
        raise DomainError("c_g must be > 0")
    s = float(np.sum((1.0 - k) / k))
    resid = (s - tau_g2) / max(1.0, tau_g2)
    if abs(resid) > SURFACE_TOL:
        raise DomainError(f"kappa is off the constraint surface (relative residual {resid:.3e})")
    p = len(k)
    return float(special.gammaln(p * c_g) - p * special.gammaln(c_g)
                 + (1.0 - p * c_g) * math.log(tau_g2)
                 + np.sum((c_g - 1.0) * np.log1p(-k) - (c_g + 1.0) * np.log(k)))


def kappa_joint_logdensity(kappa_g, c_g, a_G, a2):
    """Log joint density of a group's shrinkage factors with ``tau_g2`` integrated out.

    Taking ``tau_g2 ~ BetaPrime(a_G, a2)`` and ``varphi_g ~ Dirichlet(c_g)``,
    the variances ``lambda_l = varphi_l tau_g2`` have density
    ``Gamma(pc)/(Gamma(c)^p B(a_G, a2)) prod lambda^(c-1) s^(a_G - pc) (1+s)^-(a_G + a2)``
    with ``s = sum lambda``. Mapping to ``kappa = 1/(1 + lambda)`` gives the
    value returned here. It is a proper density on ``(0, 1)^p`` for all
    positive parameters.
    """
    k = _check_kappa_open(kappa_g)
    for name, v in (("c_g", c_g), ("a_G", a_G), ("a2", a2)):
        if not (np.isfinite(v) and v > 0):
            raise DomainError(f"{name} must be > 0")
    p = len(k)
    s = float(np.sum((1.0 - k) / k))
    return float(special.gammaln(p * c_g) - p * special.gammaln(c_g) - special.betaln(a_G, a2)
                 + np.sum((c_g - 1.0) * np.log1p(-k) - (c_g + 1.0) * np.log(k))
                 + (a_G - p * c_g) * math.log(s) - (a_G + a2) * math.log1p(s))


def kappa_marginal_logdensity(kappa, c_g, a_G, p_g, a2):
    """Log marginal prior density of a single shrinkage factor.

    Under the coupling ``a_G = p_g c_g`` the variance scale is
    BetaPrime(c_g, a2), so ``kappa ~ Beta(a2, c_g)``; that closed form is
    used whenever the coupling holds. Otherwise the marginal of
    ``lambda = varphi tau_g2`` (Beta times BetaPrime) is integrated
    numerically. At the boundary a :class:`Pole` is returned where the
    density diverges.
    """
    for name, v in (("c_g", c_g), ("a_G", a_G), ("a2", a2)):
        if not (np.isfinite(v) and v > 0):
            raise DomainError(f"{name} must be > 0")
    if int(p_g) != p_g or p_g < 1:
        raise DomainError("p_g must be a positive integer")
    if not (0.0 <= kappa <= 1.0):
        raise DomainError("kappa must lie in [0, 1]")
    coupled = math.isclose(a_G, p_g * c_g, rel_tol=1e-12)
    if kappa in (0.0, 1.0):
        shape = a2 if kappa == 0.0 else (c_g if coupled else min(c_g, a_G))
        if shape < 1:
            return Pole("power")
        if not coupled:
            raise DomainError("boundary values are only available under the coupling a_G = p_g c_g")
        if shape > 1:
            return -math.inf
        return float(-special.betaln(a2, c_g))
    if coupled:
        return float((a2 - 1.0) * math.log(kappa) + (c_g - 1.0) * math.log1p(-kappa)
                     - special.betaln(a2, c_g))
    lam = (1.0 - kappa) / kappa
    return float(_product_logdensity(lam, c_g, (p_g - 1) * c_g, a_G, a2) - 2.0 * math.log(kappa))


def _product_logdensity(x, b1, b2, s1, s2):
    """log density of ``U * V`` with U ~ Beta(b1, b2) (b2 may be 0) and V ~ BetaPrime(s1, s2)."""
    if b2 == 0:
        return (s1 - 1) * math.log(x) - (s1 + s2) * math.log1p(x) - special.betaln(s1, s2)
    # substitute u = e^w so the integrand is smooth for small concentrations
    lb = special.betaln(b1, b2)
    lbp = special.betaln(s1, s2)

    def h(w):
        u = math.exp(w)
        v = x / u
        return (b1 * w + (b2 - 1) * math.log1p(-u) - lb
                + (s1 - 1) * math.log(v) - (s1 + s2) * math.log1p(v) - lbp - w)

    grid = np.linspace(-60.0, -1e-12, 400)
    hv = np.array([h(w) for w in grid])
    top = hv.max()
    f = lambda w: math.exp(h(w) - top)
    knots = np.concatenate([[-200.0], np.linspace(-60, -1e-300, 13)])
    total = sum(integrate.quad(f, lo, hi, epsabs=0, epsrel=1e-10, limit=200)[0]
                for lo, hi in zip(knots[:-1], knots[1:]))
    return top + math.log(total)


def meff(kappa):
    """Effective number of nonzero coefficients ``sum(1 - kappa)`` along the last axis."""
    k = np.asarray(kappa, dtype=float)
    if np.any(np.isnan(k)) or np.any(k < 0) or np.any(k > 1):
        raise DomainError("kappa must lie in [0, 1]")
    out = np.sum(1.0 - k, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def meff_groups(kappa, structure):
    """Per-group effective sizes; the last axis of ``kappa`` has length ``p``."""
    k = np.asarray(kappa, dtype=float)
    if k.shape[-1] != structure.p:
        raise DomainError(f"expected {structure.p} shrinkage factors, got {k.shape[-1]}")
    if np.any(np.isnan(k)) or np.any(k < 0) or np.any(k > 1):
        raise DomainError("kappa must lie in [0, 1]")
    return np.stack([np.sum(1.0 - k[..., sl], axis=-1) for sl in structure.slices()], axis=-1)


def prior_predictive_meff(hyper, structure, n_sims, rng, workers=1, with_r2=False):
    """Simulate ``(m_eff,1, ..., m_eff,G)`` from the prior.

    The noise scale is held at 1; shrinkage factors do not depend on it.
    Work is cut into fixed-size shards, each with its own seed drawn from
    ``rng``, so results do not depend on ``workers``.

    Returns
    -------
    ndarray, shape (n_sims, G)
        With ``with_r2=True``, also the matching R² draws, shape ``(n_sims,)``.
    """
    if int(n_sims) != n_sims or n_sims < 0:
        raise DomainError("n_sims must be a non-negative integer")
    hyper.check_structure(structure)
    n_shards = -(-int(n_sims) // _SHARD_SIZE)
    seeds = rng.integers(0, 2 ** 63, size=n_shards)
    sizes = [min(_SHARD_SIZE, n_sims - i * _SHARD_SIZE) for i in range(n_shards)]

    def run(i):
        sub = np.random.default_rng(int(seeds[i]))
        batch = sample_prior_batch(hyper, structure, sizes[i], sub, sigma=1.0)
        return meff_groups(kappa_from_lambda2(batch.lambda2), structure), batch.tau2

    if n_shards == 0:
        empty = np.empty((0, structure.G))
        return (empty, np.empty(0)) if with_r2 else empty
    if workers > 1 and n_shards > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(n_shards)))
    else:
        parts = [run(i) for i in range(n_shards)]
    meff_all = np.concatenate([m for m, _ in parts], axis=0)
    if with_r2:
        tau2 = np.concatenate([t for _, t in parts])
        return meff_all, tau2 / (1.0 + tau2)
    return meff_all
