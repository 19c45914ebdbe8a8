"""Independent brute-force oracles used to pin expected values.

Everything here is written as a straight-line reimplementation from the
operation definitions, deliberately avoiding the vectorized code paths in
the package so the two sides of each check stay independent.
"""

import itertools
import math

import numpy as np


def sqdist(a, b):
    return sum((float(x) - float(y)) ** 2 for x, y in zip(a, b))


def brute_knn(points, query, k):
    order = sorted(range(len(points)), key=lambda i: (sqdist(points[i], query), i))
    return order[:k]


def brute_fps(points, n, start):
    selected = [start]
    mind = [sqdist(p, points[start]) for p in points]
    while len(selected) < n:
        best, best_d = 0, -1.0
        for i, d in enumerate(mind):
            if d > best_d:
                best, best_d = i, d
        selected.append(best)
        for i, p in enumerate(points):
            d = sqdist(p, points[best])
            if d < mind[i]:
                mind[i] = d
    return selected


def brute_chamfer_l2(a, b):
    fwd = sum(min(sqdist(p, q) for q in b) for p in a) / len(a)
    bwd = sum(min(sqdist(q, p) for p in a) for q in b) / len(b)
    return (fwd + bwd) / 2.0


def brute_uhd(partial, completed):
    return sum(
        math.sqrt(min(sqdist(p, q) for q in completed)) for p in partial
    ) / len(partial)


def brute_fscore(a, b, tau):
    prec = sum(1 for p in a if min(sqdist(p, q) for q in b) < tau) / len(a)
    rec = sum(1 for q in b if min(sqdist(q, p) for p in a) < tau) / len(b)
    if prec + rec == 0:
        return 0.0
    return 2.0 * prec * rec / (prec + rec)


def brute_emd(a, b):
    """Exact optimal assignment by exhaustive permutation search (n <= 8)."""
    n = len(a)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(math.sqrt(sqdist(a[i], b[perm[i]])) for i in range(n))
        if cost < best:
            best = cost
    return best / n


def hungarian_min_cost(cost):
    """O(n^3) Hungarian algorithm (potentials form) on a square cost matrix.

    Returns the minimal total assignment cost. Independent of
    scipy.optimize.linear_sum_assignment, which the package uses.
    """
    cost = np.asarray(cost, dtype=float)
    n = cost.shape[0]
    assert cost.shape == (n, n)
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0, delta, j1 = match[j0], inf, -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    total = 0.0
    for j in range(1, n + 1):
        if match[j]:
            total += cost[match[j] - 1][j - 1]
    return total


def brute_topk_rows(w, k):
    """Per-row indices of the k largest entries, ties by lowest index."""
    rows = []
    for row in w:
        order = sorted(range(len(row)), key=lambda i: (-row[i], i))
        rows.append(order[:k])
    return rows


def central_diff(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2.0 * h)
