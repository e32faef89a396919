#!/usr/bin/env python3
"""Straight-line reference values for the loss unit tests.

Each quantity is evaluated term by term with numpy, independently of the C++
code. Run it to regenerate the constants frozen in tests/test_losses.cpp.
"""
import numpy as np

np.set_printoptions(precision=17)


def row_softmax(s, tau):
    e = np.exp((s - s.max(axis=1, keepdims=True)) / tau)
    return e / e.sum(axis=1, keepdims=True)


def col_softmax(s, tau):
    e = np.exp((s - s.max(axis=0, keepdims=True)) / tau)
    return e / e.sum(axis=0, keepdims=True)


def naive(s1, s2, tau_row):
    p1 = row_softmax(s1, tau_row)
    p2 = row_softmax(s2, tau_row)
    return float(np.mean(-(p2 * np.log(p1)).sum(axis=1)))


def uniform_prior(s1, s2, tau_row, tau_col):
    n, c = s1.shape
    p_y_v1 = row_softmax(s1, tau_row)
    p_v2_y = col_softmax(s2, tau_col)
    total = 0.0
    for i in range(n):
        w = p_v2_y[i] / p_v2_y[i].sum()
        for y in range(c):
            arg = (n / c) * p_y_v1[i, y] / p_y_v1[:, y].sum()
            total += -w[y] * np.log(max(arg, 1e-12))
    return total / n


def incorrect_entropy(yhat, g):
    n, k = yhat.shape
    total = 0.0
    for i in range(n):
        r = 1.0 - yhat[i, g[i]]
        if r <= 1e-12:
            continue
        for j in range(k):
            if j == g[i]:
                continue
            q = yhat[i, j] / r
            if q > 0:
                total -= q * np.log(q)
    return total / n


def col(s1, s2, gamma, tau_row, tau_col):
    k = s1.shape[1]
    beta = gamma / (k - 1)
    sym = 0.5 * (uniform_prior(s1, s2, tau_row, tau_col) + uniform_prior(s2, s1, tau_row, tau_col))
    y1 = row_softmax(s1, tau_row)
    y2 = row_softmax(s2, tau_row)
    o = 0.5 * (incorrect_entropy(y1, y2.argmax(axis=1)) + incorrect_entropy(y2, y1.argmax(axis=1)))
    return sym + beta * o


def vne_rows(h):
    h = h / np.linalg.norm(h, axis=1, keepdims=True)
    z = h.T @ h / h.shape[0]
    lam = np.linalg.eigvalsh(z)
    return float(-sum(l * np.log(l) for l in lam if l > 1e-12))


S1 = np.array([[0.3, -1.2, 0.8], [1.5, 0.1, -0.4], [-0.7, 0.9, 0.2], [0.05, -0.3, 1.1]])
S2 = np.array([[0.6, -0.9, 0.4], [1.1, 0.3, -0.8], [-0.2, 1.3, 0.1], [0.4, -0.6, 0.7]])
H = np.array([[0.9, -0.3, 0.2], [0.1, 1.0, -0.5], [-0.4, 0.2, 0.8], [0.7, 0.7, 0.1],
              [0.2, -0.6, -0.9], [-1.1, 0.3, 0.4], [0.5, 0.5, 0.5], [0.3, -0.8, 0.6]])

if __name__ == "__main__":
    print("naive (1,0) vs (0,1), tau 1:", repr(naive(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), 1.0)))
    print("incorrect entropy (0.5,0.3,0.2) g=0:", repr(incorrect_entropy(np.array([[0.5, 0.3, 0.2]]), [0])))
    z = np.array([[0.75, 0.25], [0.25, 0.25]])
    lam = np.linalg.eigvalsh(z)
    print("vne [[.75,.25],[.25,.25]]:", repr(float(-(lam * np.log(lam)).sum())))
    print("uniform prior S1|S2:", repr(uniform_prior(S1, S2, 0.1, 0.05)))
    print("uniform prior S2|S1:", repr(uniform_prior(S2, S1, 0.1, 0.05)))
    print("naive S1|S2 tau .1:", repr(naive(S1, S2, 0.1)))
    print("col S1,S2 gamma -1:", repr(col(S1, S2, -1.0, 0.1, 0.05)))
    print("vne(H):", repr(vne_rows(H)))
    print("total = col - 1.0*vne:", repr(col(S1, S2, -1.0, 0.1, 0.05) - vne_rows(H)))
