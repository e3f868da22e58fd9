"""Linear regression with the Group-R2 prior, on an unconstrained scale.

The sampler works with a flat real vector ``theta`` of length ``2p + 2``:

=============  ===========  ===========================================
block          length       meaning
=============  ===========  ===========================================
``z``          p            innovations, ``b = z * sigma * sqrt(lambda2)``
``log_tau2``   1            log total prior variance
``phi_raw``    G - 1        stick-breaking reals for the group simplex
``varphi_raw`` p - G        stick-breaking reals, group by group
``log_sigma``  1            log noise scale
``b0``         1            intercept
=============  ===========  ===========================================

Stick-breaking is centered: a zero block maps to the uniform simplex.
"""

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import special

from .errors import DomainError, NumericError
from .prior_core import GroupStructure, PriorDraw

_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
STANDARDIZE_TOL = 1e-6


@dataclass(frozen=True)
class RegressionData:
    """Response, design matrix and group structure.

    Columns of ``X`` must already have zero mean and unit sample variance
    (``ddof=1``); this is checked, not applied. Pass ``n = 0`` rows for
    prior-only sampling.
    """

    y: np.ndarray
    X: np.ndarray
    structure: GroupStructure
    check_standardized: bool = True

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            X = X.reshape(len(y), -1)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        if X.shape[0] != y.shape[0]:
            raise DomainError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
        if X.shape[1] != self.structure.p:
            raise DomainError(f"X has {X.shape[1]} columns, structure expects {self.structure.p}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DomainError("data contain non-finite values")
        if self.check_standardized and self.n > 1:
            mean = X.mean(axis=0)
            sd = X.std(axis=0, ddof=1)
            if np.max(np.abs(mean)) > STANDARDIZE_TOL or np.max(np.abs(sd - 1)) > STANDARDIZE_TOL:
                raise DomainError("design columns must be centered with unit sample variance")

    @property
    def n(self):
        return self.y.shape[0]

    @classmethod
    def empty(cls, structure):
        """Zero observations: the posterior is the prior."""
        return cls(np.zeros(0), np.zeros((0, structure.p)), structure)


def standardize(X):
    """Center columns and scale them to unit sample variance."""
    X = np.asarray(X, dtype=float)
    sd = X.std(axis=0, ddof=1)
    if np.any(sd == 0):
        raise DomainError("constant design column cannot be standardized")
    return (X - X.mean(axis=0)) / sd


@dataclass
class UnconstrainedParams:
    z: np.ndarray
    log_tau2: float
    phi_raw: np.ndarray
    varphi_raw: np.ndarray
    log_sigma: float
    b0: float

    def to_vector(self):
        return np.concatenate([self.z, [self.log_tau2], self.phi_raw, self.varphi_raw,
                               [self.log_sigma, self.b0]])

    @classmethod
    def from_vector(cls, theta, structure):
        theta = np.asarray(theta, dtype=float)
        p, G = structure.p, structure.G
        if theta.shape != (2 * p + 2,):
            raise DomainError(f"expected a vector of length {2 * p + 2}, got shape {theta.shape}")
        return cls(theta[:p].copy(), float(theta[p]), theta[p + 1:p + G].copy(),
                   theta[p + G:2 * p].copy(), float(theta[2 * p]), float(theta[2 * p + 1]))

    @classmethod
    def zeros(cls, structure):
        return cls.from_vector(np.zeros(2 * structure.p + 2), structure)


def _log_sigmoid(u):
    return -np.logaddexp(0.0, -u)


class _Sticks:
    """Index bookkeeping for a set of simplices stacked into one vector.

    ``sizes`` lists the simplex dimensions K; the raw vector holds K - 1 reals
    per simplex, concatenated.
    """

    def __init__(self, sizes):
        sizes = np.asarray(sizes, dtype=int)
        self.sizes = sizes
        self.n_out = int(sizes.sum())
        self.n_raw = int((sizes - 1).sum())
        owner = np.repeat(np.arange(len(sizes)), sizes - 1)
        raw_start = np.concatenate([[0], np.cumsum(sizes - 1)[:-1]])
        out_start = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        pos = np.arange(self.n_raw) - raw_start[owner]  # 0-based k
        K = sizes[owner]
        self.offset = np.log(K - 1 - pos).astype(float)  # log(K - k), 1-based k
        self.owner = owner
        self.raw_start = raw_start
        self.raw_end = raw_start + sizes - 1
        # flat positions of x_1..x_{K-1} and of the last coordinate x_K
        self.head_idx = out_start[owner] + pos
        self.tail_idx = out_start + sizes - 1
        self.n_after = (K - 2 - pos).astype(float)  # sticks after k within its simplex
        self.nonempty = sizes > 1

    def _group_cumsum(self, v):
        """Exclusive cumulative sum of ``v`` within each simplex block."""
        if self.n_raw == 0:
            return v.copy()
        c = np.cumsum(v)
        base = np.where(self.raw_start > 0, c[self.raw_start - 1], 0.0)
        return c - v - base[self.owner]

    def _group_total(self, v):
        out = np.zeros(len(self.sizes))
        if self.n_raw:
            np.add.at(out, self.owner, v)
        return out

    def forward(self, y):
        """Return ``(log_x, log_jacobian, cache)`` for the raw vector ``y``."""
        u = y - self.offset
        ls_pos = _log_sigmoid(u)
        ls_neg = _log_sigmoid(-u)
        log_r = self._group_cumsum(ls_neg)
        log_x = np.empty(self.n_out)
        log_x[self.head_idx] = ls_pos + log_r
        log_x[self.tail_idx] = self._group_total(ls_neg)
        log_j = float(np.sum(ls_pos + ls_neg + log_r))
        z = np.exp(ls_pos)
        return log_x, log_j, z

    def backward(self, g_logx, z):
        """Gradient w.r.t. the raw reals of ``sum(g_logx * log_x) + log_jacobian``."""
        if self.n_raw == 0:
            return np.zeros(0)
        g_head = g_logx[self.head_idx]
        # sum over k > j within the simplex, including the last coordinate
        total = self._group_total(g_head)[self.owner] + g_logx[self.tail_idx][self.owner]
        after = total - self._group_cumsum(g_head) - g_head
        return g_head * (1.0 - z) - z * after + 1.0 - 2.0 * z - z * self.n_after

    def inverse(self, x):
        """Raw reals that map to the simplex stack ``x``."""
        y = np.empty(self.n_raw)
        for s, (a, b) in enumerate(zip(self.raw_start, self.raw_end)):
            K = self.sizes[s]
            if K == 1:
                continue
            xs = x[self.head_idx[a:b]]
            rem = 1.0 - np.concatenate([[0.0], np.cumsum(xs)[:-1]])
            zk = xs / rem
            y[a:b] = special.logit(zk) + self.offset[a:b]
        return y


class GroupR2Model:
    """Joint log density and gradient of the regression posterior.

    Parameters
    ----------
    data : RegressionData
    hyper : Hyperparams
        ``sigma_prior.scale=None`` resolves to ``sd(y)``; unset intercept
        prior fields resolve to ``mean(y)`` and ``10 * sd(y)``. With no data
        (or constant ``y``) the fallbacks are scale 1, mean 0 and sd 10.
    """

    def __init__(self, data, hyper):
        hyper.check_structure(data.structure)
        self.data = data
        self.hyper = hyper
        s = data.structure
        self.structure = s
        self.p, self.G = s.p, s.G
        self.dim = 2 * s.p + 2
        y = data.y
        sd_y = float(np.std(y, ddof=1)) if data.n > 1 else 0.0
        if not sd_y > 0:
            sd_y = 1.0
        mean_y = float(np.mean(y)) if data.n > 0 else 0.0
        sp = hyper.sigma_prior
        self.sigma_df = sp.df
        self.sigma_scale = sp.scale if sp.scale is not None else sd_y
        ip = hyper.intercept_prior
        self.intercept_flat = ip.flat
        self.intercept_mean = ip.mean if ip.mean is not None else mean_y
        self.intercept_sd = ip.sd if ip.sd is not None else 10.0 * sd_y

        self._phi_sticks = _Sticks([s.G])
        self._varphi_sticks = _Sticks(s.group_sizes)
        self._gidx = s.group_index
        self._c = np.asarray(hyper.c)[self._gidx]
        self._Xt = np.ascontiguousarray(data.X.T)
        self._X = np.ascontiguousarray(data.X)
        self._y = data.y
        self._n = data.n
        self._const = self._log_const()

    # -- constants -----------------------------------------------------------

    def _log_const(self):
        h, s = self.hyper, self.structure
        out = -special.betaln(h.a1, h.a2)
        out += special.gammaln(s.G * h.a_G) - s.G * special.gammaln(h.a_G)
        for g, K in enumerate(s.group_sizes):
            out += special.gammaln(K * h.c[g]) - K * special.gammaln(h.c[g])
        out -= self.p * _HALF_LOG_2PI
        nu, sc = self.sigma_df, self.sigma_scale
        out += (math.log(2.0) + special.gammaln(0.5 * (nu + 1)) - special.gammaln(0.5 * nu)
                - 0.5 * math.log(nu * math.pi) - math.log(sc))
        if not self.intercept_flat:
            out -= _HALF_LOG_2PI + math.log(self.intercept_sd)
        out -= self._n * _HALF_LOG_2PI
        return out

    # -- transforms ------------------------------------------------------------

    def split(self, theta):
        p, G = self.p, self.G
        return (theta[:p], theta[p], theta[p + 1:p + G], theta[p + G:2 * p],
                theta[2 * p], theta[2 * p + 1])

    def constrain(self, theta):
        """Map ``theta`` to a :class:`PriorDraw` and the log-Jacobian.

        The Jacobian is that of the full map from ``theta`` to
        ``(b, tau2, phi[:-1], varphi minus each group's last entry, sigma, b0)``.
        """
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,) or not np.all(np.isfinite(theta)):
            raise DomainError("theta must be a finite vector of the model dimension")
        z, lt, phi_raw, varphi_raw, ls, b0 = self.split(theta)
        log_phi, lj_phi, _ = self._phi_sticks.forward(phi_raw)
        log_varphi, lj_varphi, _ = self._varphi_sticks.forward(varphi_raw)
        log_lam = log_varphi + log_phi[self._gidx] + lt
        sigma = math.exp(ls)
        b = z * sigma * np.exp(0.5 * log_lam)
        # full transform: z -> b contributes sum(log(sigma * sqrt(lambda2)))
        log_j = lj_phi + lj_varphi + lt + ls + self.p * ls + 0.5 * float(log_lam.sum())
        draw = PriorDraw(math.exp(lt), np.exp(log_phi), np.exp(log_varphi), sigma * sigma,
                         np.exp(log_lam), b, float(b0), self.structure)
        return draw, log_j

    def unconstrain(self, draw):
        """Inverse of :meth:`constrain`."""
        lt = math.log(draw.tau2)
        ls = 0.5 * math.log(draw.sigma2)
        phi_raw = self._phi_sticks.inverse(draw.phi)
        varphi_raw = self._varphi_sticks.inverse(draw.varphi)
        lam = draw.varphi * draw.phi[self._gidx] * draw.tau2
        z = draw.b / (math.sqrt(draw.sigma2) * np.sqrt(lam))
        return np.concatenate([z, [lt], phi_raw, varphi_raw, [ls, draw.b0]])

    def transformed(self, thetas):
        """Constrained quantities for a stack of draws ``(S, dim)``.

        Returns a dict of arrays: ``tau2``, ``r2``, ``phi``, ``varphi``,
        ``lambda2``, ``b``, ``sigma``, ``b0``.
        """
        thetas = np.atleast_2d(thetas)
        out = {k: [] for k in ("tau2", "phi", "varphi", "lambda2", "b", "sigma", "b0")}
        for th in thetas:
            d, _ = self.constrain(th)
            out["tau2"].append(d.tau2)
            out["phi"].append(d.phi)
            out["varphi"].append(d.varphi)
            out["lambda2"].append(d.lambda2)
            out["b"].append(d.b)
            out["sigma"].append(math.sqrt(d.sigma2))
            out["b0"].append(d.b0)
        res = {k: np.asarray(v) for k, v in out.items()}
        res["r2"] = res["tau2"] / (1.0 + res["tau2"])
        return res

    # -- density ---------------------------------------------------------------

    def log_joint(self, theta):
        """Log posterior density (up to the evidence) and its gradient.

        Includes the Gaussian likelihood, the prior densities of every
        hierarchy level, and the log-Jacobian of the transform.
        """
        h = self.hyper
        p, G = self.p, self.G
        z = theta[:p]
        lt = theta[p]
        phi_raw = theta[p + 1:p + G]
        varphi_raw = theta[p + G:2 * p]
        ls = theta[2 * p]
        b0 = theta[2 * p + 1]

        log_phi, lj_phi, zs_phi = self._phi_sticks.forward(phi_raw)
        log_varphi, lj_varphi, zs_varphi = self._varphi_sticks.forward(varphi_raw)
        log_lam = log_varphi + log_phi[self._gidx] + lt
        scale = np.exp(0.5 * log_lam)
        sigma = math.exp(ls)
        b = z * sigma * scale

        # likelihood
        if self._n:
            r = self._y - b0 - self._X @ b
            inv_s2 = math.exp(-2.0 * ls)
            rss = float(r @ r)
            ll = -self._n * ls - 0.5 * rss * inv_s2
            gb = (self._Xt @ r) * inv_s2
            g_ls = -self._n + rss * inv_s2
            g_b0 = float(r.sum()) * inv_s2
        else:
            ll = 0.0
            gb = np.zeros(p)
            g_ls = 0.0
            g_b0 = 0.0

        # innovations
        lp = -0.5 * float(z @ z)
        gbb = gb * b
        g_z = gb * sigma * scale - z
        g_ls += float(gbb.sum())
        g_loglam = 0.5 * gbb

        # tau2 ~ BetaPrime(a1, a2), density on log scale
        sp = 1.0 / (1.0 + math.exp(-lt)) if lt > -700 else 0.0
        lp += h.a1 * lt - (h.a1 + h.a2) * float(np.logaddexp(0.0, lt))
        g_lt = float(g_loglam.sum()) + h.a1 - (h.a1 + h.a2) * sp

        # simplices: Dirichlet kernels are (alpha - 1) * log x
        lp += (h.a_G - 1.0) * float(log_phi.sum()) + lj_phi
        lp += float(((self._c - 1.0) * log_varphi).sum()) + lj_varphi
        g_logvarphi = g_loglam + (self._c - 1.0)
        g_logphi = np.bincount(self._gidx, weights=g_loglam, minlength=G) + (h.a_G - 1.0)
        g_phi_raw = self._phi_sticks.backward(g_logphi, zs_phi)
        g_varphi_raw = self._varphi_sticks.backward(g_logvarphi, zs_varphi)

        # sigma ~ half-t(df, scale), plus log-Jacobian ls
        nu, sc = self.sigma_df, self.sigma_scale
        q = math.exp(2.0 * (ls - math.log(sc))) / nu
        lp += -0.5 * (nu + 1.0) * math.log1p(q) + ls
        g_ls += 1.0 - (nu + 1.0) * q / (1.0 + q)

        # intercept
        if not self.intercept_flat:
            d0 = (b0 - self.intercept_mean) / self.intercept_sd
            lp -= 0.5 * d0 * d0
            g_b0 -= d0 / self.intercept_sd

        value = ll + lp + self._const
        grad = np.empty(self.dim)
        grad[:p] = g_z
        grad[p] = g_lt
        grad[p + 1:p + G] = g_phi_raw
        grad[p + G:2 * p] = g_varphi_raw
        grad[2 * p] = g_ls
        grad[2 * p + 1] = g_b0
        if not math.isfinite(value) or not np.all(np.isfinite(grad)):
            raise NumericError("non-finite log density or gradient",
                               context={"theta": np.array(theta, copy=True)})
        return value, grad

    def __call__(self, theta):
        return self.log_joint(theta)

    def kernel_args(self):
        """Arguments for :func:`kernel_log_joint`, the compiled twin of :meth:`log_joint`."""
        s = self.structure
        return (self._X, self._y, self._gidx.astype(np.int64),
                np.asarray(s.group_sizes, dtype=np.int64), np.asarray(s.starts, dtype=np.int64),
                np.ascontiguousarray(self._c, dtype=float), float(self.hyper.a1),
                float(self.hyper.a2), float(self.hyper.a_G), float(self.sigma_df),
                float(self.sigma_scale), bool(self.intercept_flat), float(self.intercept_mean),
                float(self.intercept_sd), float(self._const))

    @property
    def kernel(self):
        """``(function, args)`` pair accepted by the sampler's compiled path."""
        return kernel_log_joint, self.kernel_args()


def constrain(params, hyper, structure):
    """Functional form of :meth:`GroupR2Model.constrain` for a parameter record."""
    model = GroupR2Model(RegressionData.empty(structure), hyper)
    theta = params.to_vector() if isinstance(params, UnconstrainedParams) else params
    return model.constrain(np.asarray(theta, dtype=float))


def log_joint(params, data, hyper):
    """Functional form of :meth:`GroupR2Model.log_joint`."""
    model = GroupR2Model(data, hyper)
    theta = params.to_vector() if isinstance(params, UnconstrainedParams) else params
    return model.log_joint(np.asarray(theta, dtype=float))


def pointwise_predictive_logdens(y_new, x_new, draw):
    """``log Normal(y_new; b0 + x_new . b, sigma²)`` for one draw; vectorized over rows."""
    x_new = np.asarray(x_new, dtype=float)
    if x_new.shape[-1] != len(draw.b):
        raise DomainError("x_new does not match the coefficient dimension")
    mu = draw.b0 + x_new @ draw.b
    r = np.asarray(y_new, dtype=float) - mu
    out = -_HALF_LOG_2PI - 0.5 * math.log(draw.sigma2) - 0.5 * r * r / draw.sigma2
    return float(out) if np.ndim(out) == 0 else out


# -- compiled kernel -----------------------------------------------------------
#
# The same density and gradient as GroupR2Model.log_joint, written as loops
# so that the sampler can run whole trajectories without returning to Python.

@numba.njit(cache=True)
def _log1pexp(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@numba.njit(cache=True)
def _sticks_forward(raw, roff, K, logx, xoff, zs):
    log_r = 0.0
    lj = 0.0
    for k in range(K - 1):
        u = raw[roff + k] - math.log(K - 1 - k)
        lsp = -_log1pexp(-u)
        lsn = -_log1pexp(u)
        logx[xoff + k] = lsp + log_r
        lj += lsp + lsn + log_r
        log_r += lsn
        zs[roff + k] = math.exp(lsp)
    logx[xoff + K - 1] = log_r
    return lj


@numba.njit(cache=True)
def _sticks_backward(g_logx, xoff, K, zs, roff, out):
    after = g_logx[xoff + K - 1]
    for k in range(K - 2, -1, -1):
        gk = g_logx[xoff + k]
        z = zs[roff + k]
        out[roff + k] = gk * (1.0 - z) - z * after + 1.0 - 2.0 * z - z * (K - 2 - k)
        after += gk


@numba.njit(cache=True, nogil=True)
def kernel_log_joint(theta, args):
    """Compiled log density and gradient; ``args`` comes from :meth:`GroupR2Model.kernel_args`."""
    (X, y, gidx, sizes, starts, cvec, a1, a2, a_G, nu, sc, flat, m0, s0, const) = args
    n, p = X.shape
    G = sizes.shape[0]
    dim = 2 * p + 2
    grad = np.zeros(dim)
    zs = np.empty(dim)
    lt = theta[p]
    ls = theta[2 * p]
    b0 = theta[2 * p + 1]

    log_phi = np.empty(G)
    lj = _sticks_forward(theta, p + 1, G, log_phi, 0, zs)
    log_varphi = np.empty(p)
    for g in range(G):
        lj += _sticks_forward(theta, p + G + starts[g] - g, sizes[g], log_varphi, starts[g], zs)

    sigma = math.exp(ls)
    b = np.empty(p)
    scale = np.empty(p)
    lp = 0.0
    for j in range(p):
        scale[j] = math.exp(0.5 * (log_varphi[j] + log_phi[gidx[j]] + lt))
        b[j] = theta[j] * sigma * scale[j]
        lp -= 0.5 * theta[j] * theta[j]

    gb = np.zeros(p)
    ll = 0.0
    g_ls = 0.0
    g_b0 = 0.0
    if n > 0:
        inv_s2 = math.exp(-2.0 * ls)
        rss = 0.0
        rsum = 0.0
        for i in range(n):
            mu = b0
            for j in range(p):
                mu += X[i, j] * b[j]
            r = y[i] - mu
            rss += r * r
            rsum += r
            for j in range(p):
                gb[j] += X[i, j] * r
        for j in range(p):
            gb[j] *= inv_s2
        ll = -n * ls - 0.5 * rss * inv_s2
        g_ls = -n + rss * inv_s2
        g_b0 = rsum * inv_s2

    g_logphi = np.full(G, a_G - 1.0)
    g_logvarphi = np.empty(p)
    g_lt = a1
    sum_logphi = 0.0
    for g in range(G):
        sum_logphi += log_phi[g]
    for j in range(p):
        gbb = gb[j] * b[j]
        grad[j] = gb[j] * sigma * scale[j] - theta[j]
        g_ls += gbb
        half = 0.5 * gbb
        g_lt += half
        g_logphi[gidx[j]] += half
        g_logvarphi[j] = half + cvec[j] - 1.0
        lp += (cvec[j] - 1.0) * log_varphi[j]

    sp = 1.0 / (1.0 + math.exp(-lt)) if lt > -700.0 else 0.0
    lp += a1 * lt - (a1 + a2) * _log1pexp(lt)
    g_lt -= (a1 + a2) * sp
    lp += (a_G - 1.0) * sum_logphi + lj

    _sticks_backward(g_logphi, 0, G, zs, p + 1, grad)
    for g in range(G):
        _sticks_backward(g_logvarphi, starts[g], sizes[g], zs, p + G + starts[g] - g, grad)

    q = math.exp(2.0 * (ls - math.log(sc))) / nu
    lp += -0.5 * (nu + 1.0) * math.log1p(q) + ls
    g_ls += 1.0 - (nu + 1.0) * q / (1.0 + q)
    if not flat:
        d0 = (b0 - m0) / s0
        lp -= 0.5 * d0 * d0
        g_b0 -= d0 / s0

    grad[p] = g_lt
    grad[2 * p] = g_ls
    grad[2 * p + 1] = g_b0
    return ll + lp + const, grad
