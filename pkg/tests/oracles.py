"""Slow reference implementations used to check the fast library code.

Everything here is written for obviousness, not speed: direct pair
enumeration, naive permutation search, finite differences.  Test modules
import from here so the acceptance checks and the unit tests agree on what
"correct" means.
"""

import itertools
import math
from fractions import Fraction


def brute_tau(x, y):
    """Tie-aware rank correlation by direct enumeration of all pairs."""
    n = len(x)
    conc = disc = ties_x = ties_y = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = int(x[i] > x[j]) - int(x[i] < x[j])
            dy = int(y[i] > y[j]) - int(y[i] < y[j])
            if dx == 0:
                ties_x += 1
            if dy == 0:
                ties_y += 1
            if dx * dy > 0:
                conc += 1
            elif dx * dy < 0:
                disc += 1
    n0 = n * (n - 1) // 2
    denom = math.sqrt((n0 - ties_x) * (n0 - ties_y))
    if denom == 0:
        return 0.0
    return (conc - disc) / denom


def brute_list_mle_loss(scores, true_order):
    """Plackett-Luce negative log likelihood, term by term."""
    t = [scores[i] for i in true_order]
    loss = 0.0
    for i in range(len(t)):
        loss += math.log(sum(math.exp(v) for v in t[i:])) - t[i]
    return loss


def fd_gradient(f, x, h=1e-5):
    """Central finite differences of a scalar function of a vector."""
    g = []
    for i in range(len(x)):
        up = list(x)
        dn = list(x)
        up[i] += h
        dn[i] -= h
        g.append((f(up) - f(dn)) / (2 * h))
    return g


def best_mean_per_token_latency(lengths, batch_size=1):
    """Exhaustive search over serve orders of a burst on a unit-cost server.

    Returns the minimum achievable mean per-token latency over all n!
    non-preemptive orders (batch_size=1: one request at a time, one token
    per second) as an exact Fraction.  Only usable for small n.  With all
    requests released at time zero, preemption cannot beat the best
    non-preemptive order, so the search space is complete.
    """
    assert batch_size == 1
    n = len(lengths)
    best = None
    for perm in itertools.permutations(range(n)):
        t = 0
        total = Fraction(0)
        for idx in perm:
            t += lengths[idx]
            total += Fraction(t, lengths[idx])
        mean = total / n
        if best is None or mean < best:
            best = mean
    return best


def srtf_mean_per_token_latency(lengths):
    """Mean per-token latency of shortest-first service of a burst,
    batch 1, unit cost; ties by index.  Exact Fraction."""
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    t = 0
    total = Fraction(0)
    for idx in order:
        t += lengths[idx]
        total += Fraction(t, lengths[idx])
    return total / len(lengths)
