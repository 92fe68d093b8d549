"""Brute-force reference implementations shared by the test modules."""

import itertools

import numpy as np


def enumerate_marginals(beta, xi0):
    """Exact marginals by summing over every consistent association event."""
    J, M = beta.shape[0], beta.shape[1] - 1
    pa = np.zeros((J, M + 1))
    pb = np.zeros((M, J + 1))
    for a in itertools.product(range(M + 1), repeat=J):
        used = [x for x in a if x > 0]
        if len(used) != len(set(used)):
            continue
        w = np.prod([beta[j, a[j]] for j in range(J)])
        b = np.zeros(M, dtype=int)
        for j, x in enumerate(a):
            if x > 0:
                b[x - 1] = j + 1
        w *= np.prod([xi0[m] for m in range(M) if b[m] == 0])
        for j in range(J):
            pa[j, a[j]] += w
        for m in range(M):
            pb[m, b[m]] += w
    return pa / pa.sum(axis=1, keepdims=True), pb / pb.sum(axis=1, keepdims=True)


def bp_new_marginals(xi0, iota):
    p = np.concatenate([(xi0 * iota[:, 0])[:, None], iota[:, 1:]], axis=1)
    return p / p.sum(axis=1, keepdims=True)


def ospa_bruteforce(X, Y, c, p):
    X, Y = np.asarray(X, float).reshape(-1, 3), np.asarray(Y, float).reshape(-1, 3)
    if len(X) > len(Y):
        X, Y = Y, X
    m, n = len(X), len(Y)
    if n == 0:
        return 0.0
    if m == 0:
        return c
    best = min(
        sum(min(np.linalg.norm(X[i] - Y[j]), c) ** p for i, j in enumerate(perm))
        for perm in itertools.permutations(range(n), m)
    )
    return ((best + c ** p * (n - m)) / n) ** (1 / p)
