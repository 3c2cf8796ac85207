"""Success-count statistics: exact accuracy, Clopper-Pearson intervals, and
a self-contained regularized incomplete beta function with its inverse.

The special functions use only the standard library (``math.lgamma`` plus
Lentz's continued fraction for the incomplete beta; a bisection-safeguarded
Newton iteration for the inverse), so interval arithmetic is reproducible
without any third-party numerics dependency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import TYPE_CHECKING, Iterable

from .dataset import SOURCE_LABELS

if TYPE_CHECKING:  # pragma: no cover
    from .pipeline import RunState

__all__ = [
    "SuccessSummary",
    "accuracy",
    "beta_inv",
    "clopper_pearson",
    "regularized_incomplete_beta",
    "round_half_away",
    "summarize",
]

_CF_MAX_ITER = 200
_CF_EPS = 1e-15
_CF_TINY = 1e-300
_INV_MAX_ITER = 200
_INV_TOL = 1e-12


@dataclass(frozen=True)
class SuccessSummary:
    """Per-group success counts with accuracy and an exact binomial interval.

    ``metric`` labels which success vector the row aggregates: ``zero_shot``,
    ``reasoning_only`` (stage-2 successes over the full group size), or
    ``combined`` (solved at either stage).
    """

    group: str
    metric: str
    n: int
    x: int
    rate: float
    ci_low: float
    ci_high: float
    alpha: float = 0.05

    def __post_init__(self) -> None:
        if not 0 <= self.x <= self.n:
            raise ValueError(f"x={self.x} outside [0, n={self.n}]")
        if not 0.0 <= self.ci_low <= self.rate <= self.ci_high <= 1.0:
            raise ValueError(
                f"interval ({self.ci_low}, {self.ci_high}) does not bracket rate {self.rate}"
            )


def accuracy(x: int, n: int) -> float:
    """Exact proportion of successes, x/n, carried at full float precision.

    No rounding or adjustment is applied; callers that need display rounding
    use :func:`round_half_away` in the report layer.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= x <= n:
        raise ValueError(f"x={x} outside [0, {n}]")
    return x / n


def _log_beta(a: float, b: float) -> float:
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def _beta_cont_frac(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta, evaluated by Lentz's method."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        # even step
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        # odd step
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(
        f"incomplete beta continued fraction failed to converge for a={a}, b={b}, x={x}"
    )


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b): the CDF of the Beta(a, b) distribution at x."""
    if not (math.isfinite(a) and math.isfinite(b)) or a <= 0 or b <= 0:
        raise ValueError(f"shape parameters must be finite and positive, got a={a}, b={b}")
    if not math.isfinite(x):
        raise ValueError(f"x must be finite, got {x}")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = _log_beta(a, b)
    front = math.exp(a * math.log(x) + b * math.log1p(-x) - ln_front)
    # Use the symmetry I_x(a,b) = 1 - I_{1-x}(b,a) so the continued fraction
    # is always evaluated in its rapidly converging region.
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cont_frac(a, b, x) / a
    return 1.0 - front * _beta_cont_frac(b, a, 1.0 - x) / b


def beta_inv(p: float, a: float, b: float) -> float:
    """Inverse beta CDF: the x in [0, 1] with I_x(a, b) = p.

    Newton iteration on the continued-fraction CDF, safeguarded by a
    bisection bracket so every step stays inside [0, 1]; capped at
    200 iterations. Monotone in p by construction. Upper-tail requests are
    mirrored through I_x(a,b) = 1 - I_{1-x}(b,a) so quantiles keep full
    precision near both endpoints.
    """
    if not (math.isfinite(p) and math.isfinite(a) and math.isfinite(b)):
        raise ValueError(f"inputs must be finite, got p={p}, a={a}, b={b}")
    if a <= 0 or b <= 0:
        raise ValueError(f"shape parameters must be positive, got a={a}, b={b}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return 1.0
    if p > 0.5:
        return 1.0 - beta_inv(1.0 - p, b, a)

    ln_front = _log_beta(a, b)
    lo, hi = 0.0, 1.0
    x = a / (a + b)  # mean as the starting point
    for _ in range(_INV_MAX_ITER):
        f = regularized_incomplete_beta(x, a, b) - p
        if abs(f) <= _INV_TOL:
            return x
        if f > 0.0:
            hi = x
        else:
            lo = x
        # Newton step using the beta density; fall back to bisection when the
        # step leaves the bracket or the density under- or overflows.
        try:
            pdf = math.exp((a - 1.0) * math.log(x) + (b - 1.0) * math.log1p(-x) - ln_front)
        except (ValueError, OverflowError):
            pdf = 0.0
        if pdf > 0.0 and math.isfinite(pdf):
            step = x - f / pdf
        else:
            step = lo  # force bisection
        if lo < step < hi:
            x = step
        else:
            x = 0.5 * (lo + hi)
        # relative-width convergence: tiny quantiles need the bracket to
        # shrink far below any fixed absolute cutoff
        if hi - lo <= hi * 4e-16:
            return x
    return x


def clopper_pearson(x: int, n: int, alpha: float = 0.05) -> tuple[float, float]:
    """Exact (conservative) binomial confidence interval for x successes in n trials.

    Lower bound is the alpha/2 beta quantile with shapes (x, n-x+1), upper the
    1-alpha/2 quantile with shapes (x+1, n-x); the bounds pin to 0 and 1 at
    the x=0 and x=n boundaries where the corresponding shape degenerates.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= x <= n:
        raise ValueError(f"x={x} outside [0, {n}]")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie strictly in (0, 1), got {alpha}")
    lower = 0.0 if x == 0 else beta_inv(alpha / 2.0, x, n - x + 1)
    upper = 1.0 if x == n else beta_inv(1.0 - alpha / 2.0, x + 1, n - x)
    return lower, upper


def round_half_away(value: float, ndigits: int = 2) -> float:
    """Round with ties going away from zero (display rounding for reports)."""
    quantum = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def _group_summaries(
    group: str, ids: Iterable[str], s_zero: dict[str, int], s_reason: dict[str, int], alpha: float
) -> list[SuccessSummary]:
    ids = list(ids)
    n = len(ids)
    if n == 0:
        raise ValueError(f"group {group!r} is empty")
    counts = {
        "zero_shot": sum(s_zero[i] for i in ids),
        "reasoning_only": sum(s_reason.get(i, 0) for i in ids),
        "combined": sum(1 for i in ids if s_zero[i] or s_reason.get(i, 0)),
    }
    out = []
    for metric, x in counts.items():
        lo, hi = clopper_pearson(x, n, alpha)
        out.append(
            SuccessSummary(
                group=group, metric=metric, n=n, x=x,
                rate=accuracy(x, n), ci_low=lo, ci_high=hi, alpha=alpha,
            )
        )
    return out


def summarize(run: "RunState", grouping: str = "by_source", alpha: float = 0.05) -> list[SuccessSummary]:
    """Aggregate a run's success vectors into per-group summaries.

    Emits three rows per group (zero-shot, reasoning-only, combined).
    ``reasoning_only`` deliberately uses the full group size as denominator
    even though stage 2 only runs for zero-shot failures; the combined row is
    the headline number. ``grouping`` is ``by_source`` or ``overall``.
    """
    if grouping not in ("by_source", "overall"):
        raise ValueError(f"unknown grouping {grouping!r}")
    s_zero = run.s_zero
    s_reason = run.s_reason
    if not s_zero:
        raise ValueError("run has no scored problems")
    rows: list[SuccessSummary] = []
    if grouping == "by_source":
        by_source: dict[str, list[str]] = {}
        for pid in s_zero:
            by_source.setdefault(run.problem_sources[pid], []).append(pid)
        # canonical label order (courses, then topics); anything else last
        ordered = sorted(
            by_source,
            key=lambda g: (SOURCE_LABELS.index(g) if g in SOURCE_LABELS else len(SOURCE_LABELS), g),
        )
        for group in ordered:
            rows.extend(_group_summaries(group, by_source[group], s_zero, s_reason, alpha))
    else:
        rows.extend(_group_summaries("overall", list(s_zero), s_zero, s_reason, alpha))
    return rows
