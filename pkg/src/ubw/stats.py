"""Student-t distribution and the one-sided paired T-test with a margin.

The CDF goes through the regularized incomplete beta function, evaluated by
its continued fraction (modified Lentz).  For ``t`` with ``dof`` degrees of
freedom::

    x = dof / (dof + t^2)
    P(T > |t|) = I_x(dof / 2, 1 / 2) / 2
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

_TINY = 1e-300
_EPS = 1e-16
_MAX_ITER = 10_000


def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta, valid for ``x < (a+1)/(a+b+2)``."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """``I_x(a, b)`` for ``a, b > 0`` and ``0 <= x <= 1``."""
    if a <= 0 or b <= 0:
        raise DomainError(f"incomplete beta needs a, b > 0, got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"incomplete beta needs 0 <= x <= 1, got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def _check(t, dof):
    if not math.isfinite(t):
        raise DomainError(f"Student-t needs a finite statistic, got {t}")
    if not dof >= 1:
        raise DomainError(f"Student-t needs dof >= 1, got {dof}")


def _two_sided_tail(t: float, dof: float) -> float:
    # P(|T| > |t|).  Near t = 0, x is within rounding of 1, so go through the
    # complement I_y(1/2, dof/2) with y = t^2/(dof+t^2) formed directly.
    t2 = t * t
    x = dof / (dof + t2)
    if x < 0.5:
        return betainc_regularized(dof / 2.0, 0.5, x)
    return 1.0 - betainc_regularized(0.5, dof / 2.0, t2 / (dof + t2))


def student_t_cdf(t: float, dof: float) -> float:
    """``P(T <= t)`` for Student's t with ``dof`` degrees of freedom."""
    t, dof = float(t), float(dof)
    _check(t, dof)
    tail = 0.5 * _two_sided_tail(t, dof)
    return 1.0 - tail if t > 0 else tail


def student_t_sf(t: float, dof: float) -> float:
    """Upper tail ``P(T > t)``, accurate for large ``t``."""
    t, dof = float(t), float(dof)
    _check(t, dof)
    tail = 0.5 * _two_sided_tail(t, dof)
    return tail if t > 0 else 1.0 - tail


@dataclass(frozen=True)
class TTestResult:
    t: float
    dof: int
    p: float
    mean_d: float
    std_d: float
    degenerate: bool = False


def paired_t_test(p_benign, p_poisoned, tau: float = 0.25) -> TTestResult:
    """One-sided paired test of ``H0: P_b = P_p + tau`` against ``H1: P_b > P_p + tau``.

    With ``d_i = P_b,i - P_p,i - tau``: ``t = mean(d) sqrt(m) / s`` (``s`` the
    ``m - 1`` sample standard deviation), ``dof = m - 1`` and ``p = P(T > t)``.
    If ``s == 0`` the statistic is undefined; ``p`` is then 0 when
    ``mean(d) > 0`` and 1 otherwise, and ``t`` is reported as ``+inf``,
    ``-inf`` or 0.
    """
    pb = np.asarray(p_benign, dtype=np.float64).reshape(-1)
    pp = np.asarray(p_poisoned, dtype=np.float64).reshape(-1)
    if pb.shape != pp.shape:
        raise ConfigError(f"paired samples need equal lengths, got {pb.size} and {pp.size}")
    m = pb.size
    if m < 2:
        raise ConfigError(f"the paired test needs m >= 2 samples, got {m}")
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    for name, v in (("P_b", pb), ("P_p", pp)):
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise DomainError(f"{name} values must lie in [0, 1]")
    d = pb - pp - tau
    mean = float(d.mean())
    std = float(d.std(ddof=1))
    if std == 0.0:
        if mean > 0:
            return TTestResult(math.inf, m - 1, 0.0, mean, 0.0, True)
        return TTestResult(-math.inf if mean < 0 else 0.0, m - 1, 1.0, mean, 0.0, True)
    t = mean * math.sqrt(m) / std
    return TTestResult(t, m - 1, student_t_sf(t, m - 1), mean, std)
