"""Loop-based reference implementations used to validate vectorised code."""

import math

import numpy as np


def cos(a, b):
    na, nb = math.sqrt(sum(x * x for x in a)), math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def centroids(soft, x):
    n, m = len(soft), len(soft[0])
    out, defined = [], []
    for j in range(m):
        w = sum(soft[k][j] for k in range(n))
        defined.append(w > 0)
        out.append([sum(soft[k][j] * x[k][d] for k in range(n)) / w if w > 0 else 0.0 for d in range(len(x[0]))])
    return out, defined


def members(hard, j):
    return [i for i in range(len(hard)) if hard[i][j] > 0.5]


def included(soft, hard, x):
    _, defined = centroids(soft, x)
    return [j for j in range(len(soft[0])) if len(members(hard, j)) >= 2 and defined[j]]


def entropy(soft, hard, x):
    cent, _ = centroids(soft, x)
    out = {}
    for j in included(soft, hard, x):
        c = [cos(x[i], cent[j]) for i in members(hard, j)]
        z = sum(math.exp(v) for v in c)
        p = [math.exp(v) / z for v in c]
        out[j] = -sum(pi * math.log(pi) for pi in p)
    return out


def ics(soft, hard, x):
    cent, _ = centroids(soft, x)
    return {j: sum(cos(x[i], cent[j]) for i in members(hard, j)) / len(members(hard, j))
            for j in included(soft, hard, x)}


def icd(soft, hard, x):
    cent, _ = centroids(soft, x)
    inc = included(soft, hard, x)
    if len(inc) < 2:
        return float("nan")
    tot = sum(1 - cos(cent[a], cent[b]) for a in inc for b in inc if a != b)
    return tot / (len(inc) * (len(inc) - 1))


def silhouette(soft, hard, x, literal=False):
    inc = included(soft, hard, x)

    def d(i, v):
        if i == v:
            return 0.0
        val = 1 - cos(x[i], x[v])
        return 0.0 if abs(val) < 1e-12 else val

    def mean_dist(i, k):
        pairs = [(soft[v][k], d(i, v)) for v in members(hard, k) if v != i]
        w = sum(p for p, _ in pairs)
        return None if w <= 0 else sum(p * dv for p, dv in pairs) / w

    vals = {}
    for j in inc:
        for i in members(hard, j):
            a = mean_dist(i, j)
            bs = [mean_dist(i, k) for k in inc if k != j]
            bs = [b for b in bs if b is not None]
            if a is None or not bs:
                continue
            b = min(bs)
            hi = max(a, b)
            vals[(i, j)] = 0.0 if hi == 0 else (b - a) / hi
    if not vals:
        return vals, float("nan")
    total = sum(vals.values())
    return vals, total / (len(soft) * len(soft[0])) if literal else total / len(vals)


def random_graph(rng, n_max=12, m_max=6, d=4):
    n = int(rng.integers(3, n_max + 1))
    m = int(rng.integers(2, m_max + 1))
    soft = rng.uniform(0, 1, size=(n, m))
    hard = (soft > 0.5).astype(float)
    x = rng.normal(size=(n, d))
    return soft, hard, x


def tolist(*arrays):
    return [np.asarray(a).tolist() for a in arrays]
