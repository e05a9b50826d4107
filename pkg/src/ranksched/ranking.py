"""Rank correlation, listwise ranking loss, and latency metrics.

The pieces here are deliberately free of scheduling concerns: they take
plain arrays and return numbers, so they can be unit-tested against slow
reference implementations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TauResult:
    tau: float
    concordant: int
    discordant: int
    n_pairs: int


def kendall_tau_b(x, y) -> TauResult:
    """Kendall rank correlation with the tie-aware (tau-b) normalization.

    For every unordered pair (i, j): concordant when x and y move the same
    way, discordant when they move opposite ways; pairs tied in either
    coordinate count toward neither.  tau = (C - D) / sqrt((n0-n1)(n0-n2))
    where n0 = n(n-1)/2 and n1, n2 are the tied-pair counts within x and y.
    Degenerate inputs (all of x or all of y tied) return tau = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("kendall_tau_b expects two equal-length 1-d arrays")
    n = len(x)
    n0 = n * (n - 1) // 2
    if n0 == 0:
        return TauResult(0.0, 0, 0, 0)

    concordant = 0
    discordant = 0
    # Row-at-a-time keeps memory O(n) while staying vectorized.
    for i in range(n - 1):
        dx = np.sign(x[i + 1:] - x[i])
        dy = np.sign(y[i + 1:] - y[i])
        prod = dx * dy
        concordant += int(np.count_nonzero(prod > 0))
        discordant += int(np.count_nonzero(prod < 0))

    def tied_pairs(v):
        _, counts = np.unique(v, return_counts=True)
        return int(np.sum(counts * (counts - 1) // 2))

    n1 = tied_pairs(x)
    n2 = tied_pairs(y)
    # One sqrt of the integer product: exact for the tie-free case, where
    # the product is a perfect square and tau must hit +/-1 exactly.
    denom = math.sqrt((n0 - n1) * (n0 - n2))
    if denom == 0.0:
        return TauResult(0.0, concordant, discordant, n0)
    return TauResult((concordant - discordant) / denom, concordant, discordant, n0)


# ---------------------------------------------------------------------------
# Listwise ranking loss (Plackett-Luce likelihood)
# ---------------------------------------------------------------------------


def _check_listmle_args(scores, true_order):
    scores = np.asarray(scores, dtype=np.float64)
    order = np.asarray(true_order, dtype=np.int64)
    if scores.ndim != 1 or order.shape != scores.shape:
        raise ValueError("scores and true_order must be equal-length 1-d arrays")
    if len(order) and (np.sort(order) != np.arange(len(order))).any():
        raise ValueError("true_order must be a permutation of 0..n-1")
    return scores, order


def _suffix_logsumexp(t: np.ndarray) -> np.ndarray:
    # lse[i] = log sum_{k>=i} exp(t[k]), computed stably in one pass.
    return np.logaddexp.accumulate(t[::-1])[::-1]


def list_mle_loss(scores, true_order) -> float:
    """Negative log-likelihood of the target permutation under scores.

    true_order lists item indices from best (should rank first) to worst.
    loss = sum_i [logsumexp(t[i:]) - t[i]] with t = scores[true_order].
    Invariant under adding a constant to all scores; minimized when the
    scores are strictly decreasing along true_order.
    """
    scores, order = _check_listmle_args(scores, true_order)
    if len(scores) == 0:
        return 0.0
    t = scores[order]
    lse = _suffix_logsumexp(t)
    return float(np.sum(lse - t))


def list_mle_gradient(scores, true_order) -> np.ndarray:
    """Gradient of :func:`list_mle_loss` with respect to ``scores``.

    d loss / d t_j = sum_{i <= j} exp(t_j) / sum_{k >= i} exp(t_k)  -  1,
    evaluated stably via cumulative logsumexp of the -lse terms, then
    scattered back from target order to input order.
    """
    scores, order = _check_listmle_args(scores, true_order)
    n = len(scores)
    grad = np.zeros(n)
    if n == 0:
        return grad
    t = scores[order]
    lse = _suffix_logsumexp(t)
    # L[j] = log sum_{i<=j} exp(-lse[i]); grad in target order is
    # exp(t_j + L[j]) - 1.
    L = np.logaddexp.accumulate(-lse)
    grad[order] = np.exp(t + L) - 1.0
    return grad


def bucket_lengths(lengths, bucket_width: int = 10) -> np.ndarray:
    """Map raw token lengths to coarse labels: label = length // width.

    Collapsing near-equal lengths into one bucket stops the ranking loss
    from spending effort on orderings the scheduler cannot benefit from.
    """
    if bucket_width < 1:
        raise ValueError("bucket_width must be >= 1")
    arr = np.asarray(lengths, dtype=np.int64)
    return arr // bucket_width


# ---------------------------------------------------------------------------
# Latency metrics
# ---------------------------------------------------------------------------


def max_waiting_time(first_token_time: float, arrival_time: float,
                     token_times) -> float:
    """Longest stretch a request spent waiting for its next token.

    Covers both the time to the first token and every inter-token gap, so
    starvation shows up whether it happens before or after a preemption.
    """
    waits = [first_token_time - arrival_time]
    times = list(token_times)
    for a, b in zip(times, times[1:]):
        waits.append(b - a)
    return max(waits)


@dataclass(frozen=True)
class LatencyStats:
    mean_latency: float
    p90_latency: float
    mean_per_token_latency: float
    p90_per_token_latency: float
    throughput: float
    mean_max_waiting_time: float
    p90_max_waiting_time: float
    makespan: float
    n: int


def _p90(values: list[float]) -> float:
    # Nearest-rank percentile: the smallest value with >= 90% of the mass
    # at or below it. Exact on small samples, no interpolation.
    s = sorted(values)
    k = math.ceil(0.9 * len(s))
    return s[k - 1]


def latency_stats(latencies, per_token, max_waits, makespan: float) -> LatencyStats:
    """Aggregate per-request metrics into the summary used by reports.

    Means use math.fsum so they do not depend on summation order, which
    keeps aggregate numbers identical across schedulers that merely finish
    requests in a different sequence.
    """
    lat = [float(v) for v in latencies]
    ptl = [float(v) for v in per_token]
    mw = [float(v) for v in max_waits]
    if not (len(lat) == len(ptl) == len(mw)):
        raise ValueError("metric lists must have equal length")
    n = len(lat)
    if n == 0:
        return LatencyStats(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, float(makespan), 0)
    throughput = n / makespan if makespan > 0 else 0.0
    return LatencyStats(
        mean_latency=math.fsum(lat) / n,
        p90_latency=_p90(lat),
        mean_per_token_latency=math.fsum(ptl) / n,
        p90_per_token_latency=_p90(ptl),
        throughput=throughput,
        mean_max_waiting_time=math.fsum(mw) / n,
        p90_max_waiting_time=_p90(mw),
        makespan=float(makespan),
        n=n,
    )
