"""Error metrics and the paired signed-rank test."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

from egfrlmm.errors import MetricError, PairingError

MAPE_EPSILON = 1e-9
MIN_PAIRS = 6
EXACT_MAX_N = 25


def _check(actuals: Sequence[float], predictions: Sequence[float]) -> None:
    if len(actuals) != len(predictions):
        raise MetricError(f"length mismatch: {len(actuals)} actuals vs {len(predictions)} predictions")
    if not actuals:
        raise MetricError("metrics need at least one value")


def mae(actuals: Sequence[float], predictions: Sequence[float]) -> float:
    _check(actuals, predictions)
    return math.fsum(abs(a - p) for a, p in zip(actuals, predictions)) / len(actuals)


def mape(actuals: Sequence[float], predictions: Sequence[float]) -> float:
    """Mean absolute percentage error, in percent."""
    _check(actuals, predictions)
    for a in actuals:
        if not a >= MAPE_EPSILON:
            raise MetricError(f"actual value {a!r} below {MAPE_EPSILON}; MAPE undefined")
    return 100.0 * math.fsum(abs(a - p) / a for a, p in zip(actuals, predictions)) / len(actuals)


@dataclass(frozen=True)
class SignificanceResult:
    system_a: str
    system_b: str
    split: str
    test: str
    statistic: float
    p_value: float
    n_pairs: int
    n_nonzero: int
    method: str  # "exact", "normal" or "no-difference"

    @property
    def no_difference(self) -> bool:
        return self.method == "no-difference"


def average_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks with ties sharing their average rank."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _exact_lower_tail(doubled_ranks: list[int], threshold: int) -> float:
    """P(sum of a uniformly random subset of ``doubled_ranks`` <= threshold)."""
    total = sum(doubled_ranks)
    counts = [0] * (total + 1)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks:
        for s in range(reach, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
        reach += r
    return sum(counts[: threshold + 1]) / 2 ** len(doubled_ranks)


def wilcoxon_signed_rank(differences: Sequence[float], exact_max_n: int = EXACT_MAX_N):
    """Two-sided Wilcoxon signed-rank test.

    Zero differences are dropped. Returns (statistic, p_value, n_nonzero, method) where the
    statistic is min(W+, W-). Exact null distribution (tie-aware, via doubled ranks) for
    n <= ``exact_max_n``; otherwise a normal approximation with tie and continuity correction.
    """
    d = [x for x in differences if x != 0]
    n = len(d)
    if n == 0:
        return 0.0, 1.0, 0, "no-difference"
    ranks = average_ranks([abs(x) for x in d])
    w_plus = math.fsum(r for r, x in zip(ranks, d) if x > 0)
    w_minus = math.fsum(r for r, x in zip(ranks, d) if x < 0)
    stat = min(w_plus, w_minus)
    if n <= exact_max_n:
        doubled = [round(2 * r) for r in ranks]
        p = min(1.0, 2.0 * _exact_lower_tail(doubled, round(2 * stat)))
        return stat, p, n, "exact"
    mean = n * (n + 1) / 4.0
    ties: dict[float, int] = {}
    for r in ranks:
        ties[r] = ties.get(r, 0) + 1
    var = n * (n + 1) * (2 * n + 1) / 24.0 - sum(t**3 - t for t in ties.values()) / 48.0
    if var <= 0:
        return stat, 1.0, n, "normal"
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return stat, min(1.0, math.erfc(z / math.sqrt(2.0))), n, "normal"


def paired_test(
    errors_a: Mapping[str, float],
    errors_b: Mapping[str, float],
    system_a: str = "A",
    system_b: str = "B",
    split: str = "validation",
) -> SignificanceResult:
    """Signed-rank test on per-window absolute errors, paired by window id."""
    if set(errors_a) != set(errors_b):
        only_a = sorted(set(errors_a) - set(errors_b))[:5]
        only_b = sorted(set(errors_b) - set(errors_a))[:5]
        raise PairingError(f"window sets differ (only in A: {only_a}, only in B: {only_b})")
    if len(errors_a) < MIN_PAIRS:
        raise PairingError(f"need at least {MIN_PAIRS} paired windows, got {len(errors_a)}")
    keys = sorted(errors_a)
    stat, p, n_nonzero, method = wilcoxon_signed_rank([errors_a[k] - errors_b[k] for k in keys])
    return SignificanceResult(
        system_a=system_a,
        system_b=system_b,
        split=split,
        test="wilcoxon-signed-rank",
        statistic=stat,
        p_value=p,
        n_pairs=len(keys),
        n_nonzero=n_nonzero,
        method=method,
    )
