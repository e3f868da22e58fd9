"""Special functions behind the closed-form prior densities and moments.

Elementary functions (log-gamma, trigamma, error function) delegate to
``scipy.special`` behind domain checks. The confluent hypergeometric function
of the second kind ``U`` and the Gauss function ``2F1`` on the negative real
axis are implemented here, because no single library routine is accurate
across the parameter ranges the prior induces.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, interpolate, special

from .errors import DomainError, NumericError

__all__ = [
    "SpecFunResult",
    "ln_gamma",
    "ln_beta",
    "digamma",
    "trigamma",
    "erf",
    "hyp_u",
    "log_hyp_u",
    "hyp_2f1",
]

SERIES_RTOL = 1e-14
SERIES_MAX_TERMS = 10_000

# U regime switches
_U_SERIES_ZMAX = 2.0
_U_ASYMPTOTIC_ZMIN = 20.0
_U_MAX_CANCELLATION = 1e4
_U_INTEGER_B_TOL = 1e-12
_U_NEAR_INTEGER_B = 1e-4

# half-width of the band around integer a - b treated as degenerate
_F_DEGENERATE_TOL = 1e-3
_F_MAX_CANCELLATION = 1e5


@dataclass(frozen=True)
class SpecFunResult:
    """A special-function value, optionally stored as a natural logarithm.

    Attributes
    ----------
    value : float
        The value, or its natural log when ``log_scale`` is set.
    log_scale : bool
        Whether ``value`` is a logarithm.
    """

    value: float
    log_scale: bool = False

    @property
    def linear(self):
        return math.exp(self.value) if self.log_scale else self.value

    @property
    def log(self):
        return self.value if self.log_scale else math.log(self.value)

    def __float__(self):
        return float(self.linear)


def _check_finite(name, x):
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name} must be finite, got {x!r}")


def _check_positive(name, x):
    _check_finite(name, x)
    if np.any(np.asarray(x) <= 0):
        raise DomainError(f"{name} must be > 0, got {x!r}")


def ln_gamma(x):
    """Natural log of the gamma function for ``x > 0``."""
    _check_positive("x", x)
    return special.gammaln(x)


def ln_beta(a, b):
    """Natural log of the beta function ``B(a, b)`` for positive arguments."""
    _check_positive("a", a)
    _check_positive("b", b)
    return special.betaln(a, b)


def digamma(x):
    _check_positive("x", x)
    return special.digamma(x)


def trigamma(x):
    """Trigamma function, the derivative of the digamma function, for ``x > 0``."""
    _check_positive("x", x)
    return special.polygamma(1, x)


def erf(x):
    """Error function; odd, with absolute error near machine precision."""
    _check_finite("x", x)
    return special.erf(x)


# ---------------------------------------------------------------------------
# Confluent hypergeometric function of the second kind


def _sum_series(first, ratio, args, max_terms=SERIES_MAX_TERMS):
    """Sum ``first + t1 + t2 + ...`` where ``t_{k+1} = t_k * ratio(k)``.

    Returns the sum and the sum of absolute values of the terms. Stops when
    two consecutive terms are below ``SERIES_RTOL`` relative to the partial
    sum, or when a term is exactly zero (terminating series).
    """
    term = first
    total = first
    abs_total = abs(first)
    small = 0
    for k in range(max_terms):
        term = term * ratio(k)
        total += term
        abs_total += abs(term)
        if term == 0.0:
            return total, abs_total
        if abs(term) <= SERIES_RTOL * abs(total):
            small += 1
            if small == 2:
                return total, abs_total
        else:
            small = 0
    raise NumericError("series did not converge", context=args)


def _kummer_m(a, b, z, args):
    """Kummer's M(a, b, z) by its power series; returns (value, abs_sum)."""
    return _sum_series(1.0, lambda k: (a + k) / ((b + k) * (k + 1)) * z, args)


def _u_series_noninteger(a, b, z):
    # U = G(1-b)/G(a-b+1) M(a,b,z) + G(b-1)/G(a) z^(1-b) M(a-b+1,2-b,z)
    args = (a, b, z)
    m1, abs1 = _kummer_m(a, b, z, args)
    m2, abs2 = _kummer_m(a - b + 1, 2 - b, z, args)
    c1 = special.gamma(1 - b) * special.rgamma(a - b + 1)
    c2 = special.gamma(b - 1) * special.rgamma(a) * z ** (1 - b)
    value = c1 * m1 + c2 * m2
    scale = abs(c1) * abs1 + abs(c2) * abs2
    return value, scale


def _u_series_integer(a, n, z):
    """U(a, n + 1, z) for integer n >= 0 via the logarithmic series."""
    args = (a, n + 1, z)
    lz = math.log(z)
    # logarithmic part; terms are (a)_k / ((n+1)_k k!) z^k [...]
    coef = (-1) ** (n + 1) * special.rgamma(a - n) / math.factorial(n)
    log_part = 0.0
    abs_log = 0.0
    if coef != 0.0:
        pk = 1.0
        small = 0
        for k in range(SERIES_MAX_TERMS):
            bracket = (lz + special.digamma(a + k) - special.digamma(1 + k)
                       - special.digamma(n + k + 1))
            term = pk * bracket
            log_part += term
            abs_log += abs(term)
            if pk == 0.0:
                break
            if abs(term) <= SERIES_RTOL * abs(log_part):
                small += 1
                if small == 2:
                    break
            else:
                small = 0
            pk *= (a + k) / ((n + 1 + k) * (k + 1)) * z
        else:
            raise NumericError("series did not converge", context=args)
        log_part *= coef
        abs_log *= abs(coef)
    # finite principal part
    finite = 0.0
    abs_fin = 0.0
    for k in range(1, n + 1):
        term = (math.factorial(k - 1) * special.poch(1 - a + k, n - k)
                / math.factorial(n - k) * z ** (-k))
        finite += term
        abs_fin += abs(term)
    ra = special.rgamma(a)
    value = log_part + ra * finite
    return value, abs_log + abs(ra) * abs_fin


def _u_small_z(a, b, z):
    """Convergent-series regime; returns log U or None if too ill-conditioned."""
    if b > 60.0:
        # the gamma prefactors overflow; leave it to quadrature
        return None
    nearest = round(b)
    if abs(b - nearest) <= _U_INTEGER_B_TOL:
        value, scale = _u_series_integer(a, int(nearest) - 1, z)
    elif abs(b - nearest) < _U_NEAR_INTEGER_B:
        return None
    else:
        value, scale = _u_series_noninteger(a, b, z)
    if not value > 0 or scale > _U_MAX_CANCELLATION * value:
        return None
    return math.log(value)


def _u_asymptotic(a, b, z):
    """Large-z expansion ``z^-a sum (a)_k (a-b+1)_k / k! (-z)^-k``.

    Returns log U, or None when the terms start growing before the
    truncation error drops below the series tolerance.
    """
    term = 1.0
    total = 1.0
    for k in range(SERIES_MAX_TERMS):
        new = term * (a + k) * (a - b + 1 + k) / ((k + 1) * (-z))
        if new == 0.0:
            break
        if abs(new) > abs(term):
            return None
        total += new
        term = new
        if abs(term) <= 1e-16 * abs(total):
            break
    else:
        return None
    if total <= 0:
        return None
    return -a * math.log(z) + math.log(total)


def _u_quadrature(a, b, z):
    """log U from the integral representation, substituting t = exp(u).

    U = Gamma(a)^-1 int exp(-z e^u + a u + (b - a - 1) log(1 + e^u)) du,
    integrated on a finite window around the mode of the log-integrand,
    scaled by its maximum.
    """
    def h(u):
        return -z * np.exp(u) + a * u + (b - a - 1) * np.logaddexp(0.0, u)

    centre = math.log(max(a, abs(b - 1), 1e-3) / z)
    grid = np.linspace(centre - 60.0 / min(a, 1.0) - 20.0, centre + 8.0, 2001)
    hg = h(grid)
    i = int(np.argmax(hg))
    u_mode, h_max = grid[i], hg[i]
    # walk outwards until the integrand is negligible
    drop = 46.0
    lo = u_mode - 1.0
    step = 1.0
    while h(lo) - h_max > -drop:
        lo -= step
        step *= 1.5
    hi = u_mode + 1.0
    step = 0.5
    while h(hi) - h_max > -drop:
        hi += step
        step *= 1.5

    def f(u):
        return math.exp(h(u) - h_max)

    opts = dict(epsabs=0.0, epsrel=1e-13, limit=400)
    left, err_l = integrate.quad(f, lo, u_mode, **opts)
    right, err_r = integrate.quad(f, u_mode, hi, **opts)
    total = left + right
    if not total > 0 or (err_l + err_r) > 1e-9 * total:
        raise NumericError("quadrature for U did not converge", context=(a, b, z))
    return h_max + math.log(total) - special.gammaln(a)


def log_hyp_u(eta, nu, z):
    """Natural log of ``U(eta, nu, z)`` for ``eta > 0`` and ``z > 0``.

    U is positive on this domain. The computation switches between the
    convergent series in M (small ``z``), the large-``z`` asymptotic series,
    and quadrature of the integral representation elsewhere.
    """
    for name, v in (("eta", eta), ("nu", nu), ("z", z)):
        _check_finite(name, v)
    if eta <= 0:
        raise DomainError(f"eta must be > 0, got {eta!r}")
    if z <= 0:
        raise DomainError(f"z must be > 0, got {z!r}")
    a, b, z = float(eta), float(nu), float(z)
    shift = 0.0
    if b < 1.0:
        # U(a, b, z) = z^(1-b) U(a-b+1, 2-b, z)
        shift = (1.0 - b) * math.log(z)
        a, b = a - b + 1.0, 2.0 - b
    out = None
    if z >= _U_ASYMPTOTIC_ZMIN:
        out = _u_asymptotic(a, b, z)
    if out is None and z <= _U_SERIES_ZMAX:
        out = _u_small_z(a, b, z)
    if out is None:
        out = _u_quadrature(a, b, z)
    if not math.isfinite(out):
        raise NumericError("non-finite U", context=(eta, nu, z))
    return shift + out


def hyp_u(eta, nu, z, log=False):
    """Confluent hypergeometric function of the second kind ``U(eta, nu, z)``.

    Parameters
    ----------
    eta : float
        First parameter, ``> 0``.
    nu : float
        Second parameter, any real.
    z : float
        Argument, ``> 0``.
    log : bool
        Return the natural logarithm. The log is also returned whenever the
        linear value would overflow a double.

    Returns
    -------
    SpecFunResult
    """
    lu = log_hyp_u(eta, nu, z)
    if log or lu > 700.0 or lu < -700.0:
        return SpecFunResult(lu, log_scale=True)
    return SpecFunResult(math.exp(lu), log_scale=False)


# ---------------------------------------------------------------------------
# Gauss hypergeometric function on the negative real axis


def _f_series(a, b, c, x, with_scale=False):
    """Plain 2F1 power series for ``|x| < 1``; optionally the sum of |terms|."""
    if c <= 0 and c == round(c):
        raise NumericError("2F1 series with non-positive integer c", context=(a, b, c, x))
    total, abs_total = _sum_series(
        1.0, lambda k: (a + k) * (b + k) / ((c + k) * (k + 1)) * x, (a, b, c, x))
    if with_scale:
        return total, abs_total
    return total


def _f_pfaff(a, b, c, z):
    """2F1(a, b; c; z) for -1 <= z <= 0 via Pfaff's transformation."""
    w = z / (z - 1.0)
    return (1.0 - z) ** (-a) * _f_series(a, c - b, c, w)


def _gamma_ratio(num, den):
    """prod Gamma(num) / prod Gamma(den); a Gamma pole in ``den`` gives 0."""
    for x in den:
        if x <= 0 and x == round(x):
            return 0.0
    log_mag = sum(special.gammaln(x) for x in num) - sum(special.gammaln(x) for x in den)
    sign = np.prod([special.gammasgn(x) for x in num + den])
    return float(sign * math.exp(log_mag))


def _f_large_negative(a, b, c, z, with_scale=False):
    """2F1 for z < -1 through the 1/(1-z) connection formula.

    Requires ``a - b`` not to be an integer.
    """
    w = 1.0 / (1.0 - z)
    k1 = _gamma_ratio((c, b - a), (b, c - a)) * (1.0 - z) ** (-a)
    s1, abs1 = _f_series(a, c - b, a - b + 1.0, w, with_scale=True)
    k2 = _gamma_ratio((c, a - b), (a, c - b)) * (1.0 - z) ** (-b)
    s2, abs2 = _f_series(b, c - a, b - a + 1.0, w, with_scale=True)
    value = k1 * s1 + k2 * s2
    if with_scale:
        # the gamma ratios pass through exp(log), which loses roughly
        # |log Gamma(c)| ulps; fold that into the error scale
        amplify = 1.0 + abs(special.gammaln(c))
        return value, (abs(k1) * abs1 + abs(k2) * abs2) * amplify
    return value


def _psi_over_gamma(x):
    """psi(x) / Gamma(x), including its finite limit at the poles x = -n."""
    if x <= 0 and x == round(x):
        n = int(-x)
        return (-1.0) ** (n + 1) * math.factorial(n)
    return special.digamma(x) * special.rgamma(x)


def _f_integer_gap(a, m, c, z):
    """2F1(a, a + m; c; z) for integer m >= 0 and z < -1 (logarithmic case).

    The connection formula in 1/z has a finite sum of ``m`` terms plus a
    series whose coefficients carry log(-z) and digamma terms. Reciprocal
    gammas and the psi/Gamma ratios are advanced by their recurrences so
    that poles of Gamma at non-positive integers are handled exactly.
    """
    args = (a, a + m, c, z)
    lz = math.log(-z)
    finite = 0.0
    for k in range(m):
        finite += (special.poch(a, k) * math.factorial(m - k - 1)
                   / math.factorial(k) * special.rgamma(c - a - k) * z ** (-k))
    x = c - a - m
    r = special.rgamma(x)
    q = _psi_over_gamma(x)
    pk = z ** (-m) / math.factorial(m)
    series = 0.0
    small = 0
    for k in range(SERIES_MAX_TERMS):
        bracket = lz + special.digamma(1 + m + k) + special.digamma(1 + k)
        if pk != 0.0:
            bracket -= special.digamma(a + m + k)
        term = pk * (r * bracket - q)
        series += term
        if pk == 0.0:
            break
        if abs(term) <= SERIES_RTOL * abs(series):
            small += 1
            if small == 2:
                break
        else:
            small = 0
        # advance x -> x - 1
        q = (x - 1.0) * q - r
        r = r * (x - 1.0)
        x -= 1.0
        pk *= -(a + m + k) / ((k + 1) * (k + m + 1) * z)
    else:
        raise NumericError("series did not converge", context=args)
    head = (-z) ** (-a)
    out = head * (special.rgamma(a + m) * finite + special.rgamma(a) * series)
    return special.gamma(c) * out


def _f_degenerate(a, b, c, z):
    """2F1 for z < -1 when ``b - a`` is within tolerance of an integer.

    An exact integer gap uses the logarithmic formula. A near-integer gap
    interpolates quadratically through the exact point and two offsets far
    enough away for the regular connection formula to be well conditioned.
    """
    if b < a:
        a, b = b, a
    m = int(round(b - a))
    d = (b - a) - m
    exact = _f_integer_gap(a, m, c, z)
    if d == 0.0:
        return exact
    # quartic Lagrange interpolation through the exact point and four
    # offsets at which the regular formula loses at most ~3 digits
    h = 2.0 * _F_DEGENERATE_TOL
    nodes = np.array([-2.0 * h, -h, 0.0, h, 2.0 * h])
    values = [_f_large_negative(a, a + m + t, c, z) if t != 0.0 else exact
              for t in nodes]
    return float(interpolate.BarycentricInterpolator(nodes, values)(d))


def _f_euler(a, b, c, z):
    """Euler integral for ``c > b > 0``.

    The endpoint singularities ``t^(b-1)`` and ``(1-t)^(c-b-1)`` are passed
    to QUADPACK as algebraic weights on the outer pieces; the interior is
    split geometrically so that the layer of width ``~1/(|z| + c)`` near the
    origin is resolved.
    """
    e1, e2 = b - 1.0, c - b - 1.0
    edge = min(0.25, 1.0 / (abs(z) + c))
    opts = dict(epsabs=0.0, epsrel=1e-13, limit=400)
    pieces = []
    val, err = integrate.quad(lambda t: (1.0 - z * t) ** (-a) * (1.0 - t) ** e2,
                              0.0, edge, weight="alg", wvar=(e1, 0.0), **opts)
    pieces.append((val, err))
    lo = edge
    while lo < 0.5:
        hi = min(0.5, 4.0 * lo)
        pieces.append(integrate.quad(
            lambda t: t ** e1 * (1.0 - t) ** e2 * (1.0 - z * t) ** (-a), lo, hi, **opts)[:2])
        lo = hi
    pieces.append(integrate.quad(lambda t: t ** e1 * (1.0 - z * t) ** (-a), 0.5, 1.0,
                                 weight="alg", wvar=(0.0, e2), **opts))
    val = math.fsum(p[0] for p in pieces)
    err = sum(p[1] for p in pieces)
    if not (val > 0 and err <= 1e-10 * val):
        raise NumericError("2F1 quadrature did not converge", context=(a, b, c, z))
    return val * math.exp(special.gammaln(c) - special.gammaln(b) - special.gammaln(c - b))


def _f_euler_or_none(a, b, c, z):
    if c > b > 0:
        return _f_euler(a, b, c, z)
    if c > a > 0:
        return _f_euler(b, a, c, z)
    return None


def hyp_2f1(a, b, c, z):
    """Gauss hypergeometric function ``2F1(a, b; c; z)`` for ``z <= 0``.

    For ``-3 <= z <= 0`` the Pfaff transformation maps the argument into
    ``[0, 3/4]`` before summing the power series. For ``z < -3`` the
    connection formula in ``1/(1 - z)`` is used. When its two terms cancel
    badly, or when ``a - b`` is (close to) an integer, the Euler integral is
    used instead if ``c > b > 0`` (or ``c > a > 0``); otherwise the
    logarithmic connection formula handles the integer case.
    """
    for name, v in (("a", a), ("b", b), ("c", c), ("z", z)):
        _check_finite(name, v)
    if c <= 0:
        raise DomainError(f"c must be > 0, got {c!r}")
    if z > 0:
        raise DomainError(f"only z <= 0 is supported, got {z!r}")
    a, b, c, z = float(a), float(b), float(c), float(z)
    if z == 0.0:
        return 1.0
    if z >= -3.0:
        # w = z / (z - 1) stays within [0, 3/4]
        return _f_pfaff(a, b, c, z)
    gap = a - b
    if abs(gap - round(gap)) > _F_DEGENERATE_TOL:
        value, scale = _f_large_negative(a, b, c, z, with_scale=True)
        if math.isfinite(scale) and scale <= _F_MAX_CANCELLATION * abs(value):
            return value
        alt = _f_euler_or_none(a, b, c, z)
        if alt is None:
            raise NumericError("2F1 connection formula is ill-conditioned",
                               context=(a, b, c, z))
        return alt
    alt = _f_euler_or_none(a, b, c, z)
    if alt is not None:
        return alt
    return _f_degenerate(a, b, c, z)
