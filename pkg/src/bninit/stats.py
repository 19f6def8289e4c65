"""Multi-seed evaluation: seed derivation, summaries, one-sided paired t-test."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

ALPHA = 0.05
DEFAULT_NUM_SEEDS = 15


def md5_seed(index: int) -> int:
    """First 8 bytes of MD5(decimal index), read as big-endian uint64."""
    if index < 1:
        raise ValueError(f"seed index must be >= 1, got {index}")
    digest = hashlib.md5(str(int(index)).encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class RunSet:
    label: str
    seeds: list[int] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)

    def __post_init__(self):
        # an empty seed list means the seeds are not recorded
        if self.seeds and len(self.seeds) != len(self.accuracies):
            raise ValueError(f"{self.label}: {len(self.seeds)} seeds but "
                             f"{len(self.accuracies)} accuracies")

    def __len__(self):
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        if not self.accuracies:
            raise ValueError(f"{self.label}: no runs")
        return math.fsum(self.accuracies) / len(self.accuracies)


def _mean_std(xs: Sequence[float]) -> tuple[float, float]:
    n = len(xs)
    mean = math.fsum(xs) / n
    return mean, math.sqrt(math.fsum((x - mean) ** 2 for x in xs) / (n - 1))


def summarize(runs: RunSet) -> tuple[float, float]:
    """Mean and sample std (divisor n - 1) of the accuracies."""
    if len(runs) < 2:
        raise ValueError(f"{runs.label}: std needs at least 2 runs, got {len(runs)}")
    return _mean_std(runs.accuracies)


# -- Student t distribution -------------------------------------------------

def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 1000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def student_t_cdf(t: float, df: float) -> float:
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    if math.isnan(t):
        raise ValueError("t is NaN")
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    if t == 0.0:
        return 0.5
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return 1.0 - tail if t > 0 else tail


# -- paired test --------------------------------------------------------------

@dataclass
class TTestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value: float
    mean_difference: float
    significant: bool


def one_sided_paired_ttest(candidate: RunSet, baseline: RunSet,
                           alpha: float = ALPHA) -> TTestResult:
    """H1: candidate accuracies exceed baseline on average (paired by index).

    When every difference is identical the t statistic is degenerate: all
    zero gives p = 0.5, a constant positive shift p = 0, a constant
    negative shift p = 1.
    """
    n = len(candidate)
    if n != len(baseline):
        raise ValueError(f"cannot pair {n} runs of {candidate.label} with "
                         f"{len(baseline)} runs of {baseline.label}")
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    if candidate.seeds and baseline.seeds and candidate.seeds != baseline.seeds:
        raise ValueError(f"{candidate.label} and {baseline.label} use different seeds")
    d = [c - b for c, b in zip(candidate.accuracies, baseline.accuracies)]
    mean_d, sd_d = _mean_std(d)
    df = n - 1
    if sd_d == 0.0:
        if mean_d == 0.0:
            t, p = 0.0, 0.5
        else:
            t = math.copysign(math.inf, mean_d)
            p = 0.0 if mean_d > 0 else 1.0
    else:
        t = mean_d / (sd_d / math.sqrt(n))
        p = student_t_cdf(-t, df)  # upper tail, by symmetry
    return TTestResult(t, df, p, mean_d, p <= alpha)
