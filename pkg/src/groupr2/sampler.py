"""No-U-Turn Hamiltonian Monte Carlo with warmup adaptation, and chain diagnostics.

One transition is written once, in a subset of Python that numba can
compile. Targets that expose a compiled ``(function, args)`` pair (see
:attr:`groupr2.model.GroupR2Model.kernel`) run the compiled copy; any other
callable ``theta -> (log_density, gradient)`` runs the same code
uninterpreted. All randomness is drawn in Python from one Philox stream per
chain and handed to the transition as arrays, so both paths consume the same
random numbers in the same order.
"""

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import special, stats

from .errors import DomainError, NumericError

DIVERGENCE_THRESHOLD = 1000.0


@dataclass(frozen=True)
class SamplerConfig:
    """Run lengths and adaptation settings.

    ``seed`` feeds one independent Philox stream per chain (chain ``k`` uses
    ``SeedSequence(seed, spawn_key=(k,))``), so adding chains does not change
    the existing ones.
    """

    n_chains: int = 4
    n_warmup: int = 1000
    n_samples: int = 1000
    target_accept: float = 0.95
    max_tree_depth: int = 10
    seed: int = 0
    adapt: bool = True
    init_radius: float = 2.0
    workers: int = 1

    def __post_init__(self):
        for name in ("n_chains", "n_samples"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise DomainError(f"{name} must be a positive integer")
        if int(self.n_warmup) != self.n_warmup or self.n_warmup < 0:
            raise DomainError("n_warmup must be a non-negative integer")
        if self.adapt and self.n_warmup < 150:
            raise DomainError("adaptation needs n_warmup >= 150")
        if not 0.6 <= self.target_accept <= 0.99:
            raise DomainError("target_accept must lie in [0.6, 0.99]")
        if int(self.max_tree_depth) != self.max_tree_depth or not 1 <= self.max_tree_depth <= 12:
            raise DomainError("max_tree_depth must be an integer in [1, 12]")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise DomainError("seed must fit in 64 unsigned bits")
        if self.init_radius <= 0:
            raise DomainError("init_radius must be > 0")


@dataclass
class ChainDraws:
    """Post-warmup output, arrays indexed ``[chain, draw, ...]``."""

    theta: np.ndarray
    log_density: np.ndarray
    divergent: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    accept_stat: np.ndarray
    energy: np.ndarray
    step_size: np.ndarray
    inv_metric: np.ndarray
    config: SamplerConfig
    transformed: dict = field(default_factory=dict)

    @property
    def n_chains(self):
        return self.theta.shape[0]

    @property
    def n_draws(self):
        return self.theta.shape[1]

    @property
    def divergence_rate(self):
        return float(self.divergent.mean())

    def quantity(self, name):
        """A named scalar quantity as a ``(chains, draws)`` array.

        Names are keys of :attr:`transformed`, optionally indexed like
        ``"b[3]"``, or ``"theta[k]"`` / ``"lp"`` for raw coordinates.
        """
        if name == "lp":
            return self.log_density
        base, idx = name, None
        if name.endswith("]") and "[" in name:
            base, rest = name[:-1].split("[", 1)
            idx = int(rest)
        src = self.theta if base == "theta" else self.transformed.get(base)
        if src is None:
            raise DomainError(f"unknown quantity {name!r}")
        if idx is None:
            if src.ndim != 2:
                raise DomainError(f"{name!r} is a vector; index it")
            return src
        return src[:, :, idx]

    def flat(self, name):
        """``(chains * draws, ...)`` view of a transformed array or of ``theta``."""
        src = self.theta if name == "theta" else self.transformed[name]
        return src.reshape((-1,) + src.shape[2:])


# -- one transition -------------------------------------------------------------


def _transition(logp_fn, args, theta0, lp0, grad0, eps, inv_metric, max_depth, normals, unif):
    """One multinomial NUTS step built iteratively.

    Returns ``(theta, lp, grad, depth, n_leapfrog, divergent, mean_accept, energy)``.
    ``unif`` must hold at least ``2**max_depth + 2*max_depth`` uniforms.
    """
    dim = theta0.shape[0]
    p0 = normals / np.sqrt(inv_metric)
    kin0 = 0.0
    for i in range(dim):
        kin0 += 0.5 * p0[i] * p0[i] * inv_metric[i]
    H0 = -lp0 + kin0

    th_m = theta0.copy()
    p_m = p0.copy()
    g_m = grad0.copy()
    ps_m = inv_metric * p0
    th_p = theta0.copy()
    p_p = p0.copy()
    g_p = grad0.copy()
    ps_p = ps_m.copy()
    rho = p0.copy()

    s_theta = theta0.copy()
    s_lp = lp0
    s_grad = grad0.copy()
    s_H = H0
    log_w = 0.0

    ck_ps = np.zeros((max_depth + 1, dim))
    ck_rho = np.zeros((max_depth + 1, dim))

    ui = 0
    depth = 0
    n_leap = 0
    divergent = False
    sum_acc = 0.0
    while depth < max_depth:
        forward = unif[ui] < 0.5
        ui += 1
        if forward:
            th = th_p.copy()
            p = p_p.copy()
            g = g_p.copy()
            step = eps
        else:
            th = th_m.copy()
            p = p_m.copy()
            g = g_m.copy()
            step = -eps
        lp = 0.0
        ps = ps_m
        sub_rho = np.zeros(dim)
        sub_log_w = -np.inf
        sub_theta = th.copy()
        sub_lp = 0.0
        sub_grad = g.copy()
        sub_H = 0.0
        ok = True
        n_sub = 1 << depth
        for leaf in range(n_sub):
            for i in range(dim):
                p[i] += 0.5 * step * g[i]
                th[i] += step * inv_metric[i] * p[i]
            lp, g = logp_fn(th, args)
            kin = 0.0
            for i in range(dim):
                p[i] += 0.5 * step * g[i]
                kin += 0.5 * p[i] * p[i] * inv_metric[i]
            n_leap += 1
            H = -lp + kin
            dH = H - H0
            if not dH <= DIVERGENCE_THRESHOLD:
                divergent = True
                ok = False
                break
            if dH > 0:
                sum_acc += math.exp(-dH)
            else:
                sum_acc += 1.0
            lw = -dH
            if lw > sub_log_w:
                new_w = lw + math.log1p(math.exp(sub_log_w - lw))
            else:
                new_w = sub_log_w + math.log1p(math.exp(lw - sub_log_w))
            if math.log(unif[ui]) < lw - new_w:
                sub_theta = th.copy()
                sub_lp = lp
                sub_grad = g.copy()
                sub_H = H
            ui += 1
            sub_log_w = new_w
            ps = inv_metric * p
            for k in range(1, depth + 1):
                if leaf % (1 << k) == 0:
                    ck_ps[k, :] = ps
                    ck_rho[k, :] = sub_rho
            sub_rho += p
            for k in range(1, depth + 1):
                if (leaf + 1) % (1 << k) == 0:
                    r = sub_rho - ck_rho[k]
                    if np.dot(ck_ps[k], r) <= 0.0 or np.dot(ps, r) <= 0.0:
                        ok = False
                        break
            if not ok:
                break
        if not ok:
            depth += 1
            break
        if forward:
            th_p = th
            p_p = p
            g_p = g
            ps_p = ps
        else:
            th_m = th
            p_m = p
            g_m = g
            ps_m = ps
        if math.log(unif[ui]) < sub_log_w - log_w:
            s_theta = sub_theta
            s_lp = sub_lp
            s_grad = sub_grad
            s_H = sub_H
        ui += 1
        if sub_log_w > log_w:
            log_w = sub_log_w + math.log1p(math.exp(log_w - sub_log_w))
        else:
            log_w = log_w + math.log1p(math.exp(sub_log_w - log_w))
        rho += sub_rho
        depth += 1
        if np.dot(ps_m, rho) <= 0.0 or np.dot(ps_p, rho) <= 0.0:
            break
    mean_acc = sum_acc / n_leap if n_leap > 0 else 0.0
    return s_theta, s_lp, s_grad, depth, n_leap, divergent, mean_acc, s_H


_transition_compiled = numba.njit(nogil=True)(_transition)


def _python_adapter(theta, fn):
    value, grad = fn(theta)
    return float(value), np.asarray(grad, dtype=float)


class _Target:
    """Uniform view over compiled and plain-Python targets."""

    def __init__(self, target):
        kernel = getattr(target, "kernel", None)
        if kernel is not None:
            self.fn, self.args = kernel
            self.step = _transition_compiled
        else:
            if not callable(target):
                raise DomainError("target must be callable or expose a compiled kernel")
            self.fn, self.args = _python_adapter, target
            self.step = _transition
        self.source = target

    def __call__(self, theta):
        value, grad = self.fn(theta, self.args)
        return float(value), grad


# -- adaptation -----------------------------------------------------------------


class _DualAveraging:
    def __init__(self, eps, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(eps)

    def restart(self, eps):
        self.mu = math.log(10.0 * eps)
        self.s_bar = 0.0
        self.x_bar = 0.0
        self.count = 0

    def update(self, accept):
        self.count += 1
        eta = 1.0 / (self.count + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept)
        x = self.mu - self.s_bar * math.sqrt(self.count) / self.gamma
        w = self.count ** (-self.kappa)
        self.x_bar = w * x + (1.0 - w) * self.x_bar
        return math.exp(x)

    @property
    def final(self):
        return math.exp(self.x_bar)


def warmup_windows(n_warmup, init_frac=0.15, term_frac=0.10, base=25):
    """Slow-adaptation windows as ``(start, end)`` pairs within the warmup.

    The first 15% and the last 10% only adapt the step size. Between them,
    windows double in length; a window that would leave less than twice its
    successor's length is stretched to the end of the slow phase.
    """
    init = int(round(init_frac * n_warmup))
    term = int(round(term_frac * n_warmup))
    end = n_warmup - term
    windows = []
    start, size = init, base
    while start < end:
        if start + size + 2 * size > end:
            size = end - start
        windows.append((start, start + size))
        start += size
        size *= 2
    return windows


def _initial_step_size(target, theta, lp, grad, inv_metric, eps, rng):
    """Double or halve ``eps`` until one leapfrog's acceptance crosses 0.8."""
    log_08 = math.log(0.8)

    def delta(e):
        p = rng.standard_normal(theta.shape[0]) / np.sqrt(inv_metric)
        h0 = -lp + 0.5 * float(np.sum(p * p * inv_metric))
        p_half = p + 0.5 * e * grad
        th = theta + e * inv_metric * p_half
        lp1, g1 = target(th)
        p1 = p_half + 0.5 * e * g1
        h1 = -lp1 + 0.5 * float(np.sum(p1 * p1 * inv_metric))
        d = h0 - h1
        return d if math.isfinite(d) else -math.inf

    direction = 1 if delta(eps) > log_08 else -1
    for _ in range(100):
        eps = eps * 2.0 ** direction
        d = delta(eps)
        if direction == 1 and not d > log_08:
            break
        if direction == -1 and not d < log_08:
            break
    return eps


def _initial_point(target, dim, radius, rng, init):
    if init is not None:
        theta = np.array(getattr(init, "to_vector", lambda: init)(), dtype=float)
        if theta.shape != (dim,):
            raise DomainError(f"init has shape {theta.shape}, expected ({dim},)")
        lp, grad = target(theta)
        if math.isfinite(lp) and np.all(np.isfinite(grad)):
            return theta, lp, grad
    for _ in range(100):
        theta = rng.uniform(-radius, radius, size=dim)
        try:
            lp, grad = target(theta)
        except NumericError:
            continue
        if math.isfinite(lp) and np.all(np.isfinite(grad)):
            return theta, lp, grad
    raise NumericError("no finite initial point found after 100 tries")


def _chain_rng(seed, chain):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(chain,))))


def _run_chain(target, dim, config, chain, init):
    rng = _chain_rng(config.seed, chain)
    D = config.max_tree_depth
    n_unif = (1 << D) + 2 * D
    theta, lp, grad = _initial_point(target, dim, config.init_radius, rng, init)
    inv_metric = np.ones(dim)
    eps = 1.0
    if config.adapt:
        eps = _initial_step_size(target, theta, lp, grad, inv_metric, eps, rng)
    da = _DualAveraging(eps, config.target_accept)
    windows = warmup_windows(config.n_warmup) if config.adapt else []
    win_end = {e: s for s, e in windows}
    win_start = {s for s, _ in windows}

    n_total = config.n_warmup + config.n_samples
    S = config.n_samples
    out_theta = np.empty((S, dim))
    out = {k: np.empty(S) for k in ("lp", "acc", "energy")}
    out_div = np.zeros(S, dtype=bool)
    out_depth = np.zeros(S, dtype=np.int64)
    out_leap = np.zeros(S, dtype=np.int64)
    w_mean = w_m2 = None
    w_n = 0
    step = target.step
    for it in range(n_total):
        normals = rng.standard_normal(dim)
        unif = rng.random(n_unif)
        theta, lp, grad, depth, n_leap, div, acc, energy = step(
            target.fn, target.args, theta, lp, grad, eps, inv_metric, D, normals, unif)
        if it < config.n_warmup:
            if config.adapt:
                eps = da.update(acc)
                if it in win_start:
                    w_mean, w_m2, w_n = np.zeros(dim), np.zeros(dim), 0
                if w_mean is not None:
                    w_n += 1
                    d = theta - w_mean
                    w_mean += d / w_n
                    w_m2 += d * (theta - w_mean)
                if it + 1 in win_end:
                    var = w_m2 / (w_n - 1)
                    inv_metric = (w_n / (w_n + 5.0)) * var + 1e-3 * (5.0 / (w_n + 5.0))
                    w_mean = None
                    eps = _initial_step_size(target, theta, lp, grad, inv_metric, eps, rng)
                    da.restart(eps)
                if it + 1 == config.n_warmup:
                    eps = da.final
            continue
        s = it - config.n_warmup
        out_theta[s] = theta
        out["lp"][s] = lp
        out["acc"][s] = acc
        out["energy"][s] = energy
        out_div[s] = div
        out_depth[s] = depth
        out_leap[s] = n_leap
    return out_theta, out, out_div, out_depth, out_leap, eps, inv_metric


def sample(target, config=None, init=None, dim=None):
    """Run NUTS chains on ``target``.

    Parameters
    ----------
    target : callable or model
        ``target(theta) -> (log_density, gradient)``. Objects with a
        ``kernel`` attribute (compiled function and its arguments) run the
        compiled transition; objects with ``transformed(thetas)`` get their
        constrained quantities stored in :attr:`ChainDraws.transformed`.
    config : SamplerConfig, optional
    init : array or UnconstrainedParams, optional
        Shared starting point; otherwise each chain draws uniformly from
        ``[-init_radius, init_radius]`` (redrawn up to 100 times).
    dim : int, optional
        Required when the target has no ``dim`` attribute and no ``init``.

    Returns
    -------
    ChainDraws
        A divergence rate above 25% is reported with a warning.
    """
    config = config or SamplerConfig()
    if dim is None:
        dim = getattr(target, "dim", None)
    if dim is None and init is not None:
        dim = len(getattr(init, "to_vector", lambda: init)())
    if dim is None:
        raise DomainError("cannot infer the dimension; pass dim or init")
    tgt = _Target(target)

    def run(k):
        return _run_chain(tgt, dim, config, k, init)

    if config.workers > 1 and config.n_chains > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run, range(config.n_chains)))
    else:
        results = [run(k) for k in range(config.n_chains)]

    draws = ChainDraws(
        theta=np.stack([r[0] for r in results]),
        log_density=np.stack([r[1]["lp"] for r in results]),
        divergent=np.stack([r[2] for r in results]),
        tree_depth=np.stack([r[3] for r in results]),
        n_leapfrog=np.stack([r[4] for r in results]),
        accept_stat=np.stack([r[1]["acc"] for r in results]),
        energy=np.stack([r[1]["energy"] for r in results]),
        step_size=np.array([r[5] for r in results]),
        inv_metric=np.stack([r[6] for r in results]),
        config=config,
    )
    if hasattr(target, "transformed"):
        flat = target.transformed(draws.theta.reshape(-1, dim))
        C, S = draws.theta.shape[:2]
        draws.transformed = {k: np.asarray(v).reshape((C, S) + np.shape(v)[1:]) for k, v in flat.items()}
    if draws.divergence_rate > 0.25:
        warnings.warn(f"{100 * draws.divergence_rate:.1f}% of post-warmup transitions diverged",
                      RuntimeWarning, stacklevel=2)
    return draws


# -- diagnostics ----------------------------------------------------------------


def _as_chains(draws, quantity):
    if isinstance(draws, ChainDraws):
        x = draws.quantity(quantity) if isinstance(quantity, str) else np.asarray(quantity)
    else:
        x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DomainError("expected a (chains, draws) array")
    if x.shape[1] < 4:
        raise DomainError("need at least 4 draws per chain")
    if not np.all(np.isfinite(x)):
        raise DomainError("draws contain non-finite values")
    return np.asarray(x, dtype=float)


def _split(x):
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def _rank_normalize(x):
    r = stats.rankdata(x, method="average").reshape(x.shape)
    return special.ndtri((r - 0.375) / (x.size + 0.25))


def _constant(x, what):
    if np.ptp(x) == 0:
        warnings.warn(f"constant draws: {what} is undefined and reported as NaN", RuntimeWarning,
                      stacklevel=3)
        return True
    return False


def _rhat_basic(x):
    m, n = x.shape
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return math.sqrt(var_plus / w)


def rhat(draws, quantity=None):
    """Rank-normalized split R-hat: the larger of the bulk and folded-tail values.

    Needs at least two chains (split halves count); constant input returns NaN
    with a warning.
    """
    x = _as_chains(draws, quantity)
    if _constant(x, "R-hat"):
        return math.nan
    xs = _split(x)
    if xs.shape[0] < 2:
        raise DomainError("R-hat needs at least two (split) chains")
    bulk = _rhat_basic(_rank_normalize(xs))
    fold = np.abs(xs - np.median(xs))
    tail = _rhat_basic(_rank_normalize(fold)) if np.ptp(fold) > 0 else bulk
    return max(bulk, tail)


def _autocov(x):
    n = x.shape[-1]
    size = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, size, axis=-1)
    return np.fft.irfft(f * np.conj(f), size, axis=-1)[..., :n] / n


def _ess_core(x):
    m, n = x.shape
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1.0)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho_s = np.zeros(n)
    rho_s[0] = 1.0
    even, odd = 1.0, rho[1]
    rho_s[1] = odd
    # Geyer's initial positive sequence over lag pairs (0, 1), (2, 3), ...
    t = 1
    while t < n - 4 and even + odd > 0:
        even, odd = rho[t + 1], rho[t + 2]
        if even + odd >= 0:
            rho_s[t + 1], rho_s[t + 2] = even, odd
        t += 2
    max_t = t
    if even > 0:
        rho_s[max_t + 1] = even
    # initial monotone sequence
    for t in range(1, max_t - 1, 2):
        if rho_s[t + 1] + rho_s[t + 2] > rho_s[t - 1] + rho_s[t]:
            rho_s[t + 1] = rho_s[t + 2] = 0.5 * (rho_s[t - 1] + rho_s[t])
    tau = -1.0 + 2.0 * rho_s[:max_t].sum() + rho_s[max_t + 1]
    tau = max(tau, 1.0 / math.log10(m * n))
    return m * n / tau


def ess(draws, quantity=None, kind="bulk"):
    """Effective sample size from split chains.

    ``kind="bulk"`` ranks and normal-scores the draws first; ``"mean"`` uses
    the raw values (the right one for the Monte Carlo error of a mean);
    ``"tail"`` is the smaller of the 5% and 95% quantile-indicator ESS.
    """
    x = _as_chains(draws, quantity)
    if _constant(x, "ESS"):
        return math.nan
    xs = _split(x)
    if kind == "bulk":
        return _ess_core(_rank_normalize(xs))
    if kind == "mean":
        return _ess_core(xs)
    if kind == "tail":
        vals = []
        for q in (0.05, 0.95):
            ind = (xs <= np.quantile(xs, q)).astype(float)
            vals.append(_ess_core(ind) if np.ptp(ind) > 0 else math.nan)
        return float(np.nanmin(vals))
    raise DomainError(f"unknown ESS kind {kind!r}")


def mcse_mean(draws, quantity=None):
    """Monte Carlo standard error of the posterior mean."""
    x = _as_chains(draws, quantity)
    if np.ptp(x) == 0:
        return 0.0
    return float(x.std(ddof=1) / math.sqrt(ess(x, kind="mean")))


def mcse_var(draws, quantity=None):
    """Monte Carlo standard error of the posterior variance (delta method on centered squares)."""
    x = _as_chains(draws, quantity)
    sq = (x - x.mean()) ** 2
    if np.ptp(sq) == 0:
        return 0.0
    return float(sq.std(ddof=1) / math.sqrt(ess(sq, kind="mean")))


def ebfmi(draws):
    """Energy Bayesian fraction of missing information, one value per chain."""
    e = draws.energy if isinstance(draws, ChainDraws) else np.atleast_2d(draws)
    num = np.sum(np.diff(e, axis=1) ** 2, axis=1)
    den = np.sum((e - e.mean(axis=1, keepdims=True)) ** 2, axis=1)
    return num / den
