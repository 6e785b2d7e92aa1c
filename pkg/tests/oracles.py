"""Independent reference computations used across the test suite."""
import itertools

import numpy as np
import torch


def central_diff_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Gradient of scalar ``f`` (numpy in, float out) by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def central_diff_jacobian(f, z: np.ndarray, h: float = 1e-6) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    cols = []
    for k in range(len(z)):
        e = np.zeros_like(z)
        e[k] = h
        cols.append((f(z + e) - f(z - e)) / (2 * h))
    return np.stack(cols, axis=1)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max entrywise error relative to the larger gradient magnitude."""
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def autograd(fn, *arrays):
    """Gradients of ``fn(*tensors)`` w.r.t. every input, in float64."""
    ts = [torch.tensor(a, dtype=torch.float64, requires_grad=True) for a in arrays]
    out = fn(*ts)
    out.backward()
    return [t.grad.numpy().copy() for t in ts]


def scalar(fn, *arrays) -> float:
    with torch.no_grad():
        return float(fn(*[torch.tensor(a, dtype=torch.float64) for a in arrays]))


def gradient_check(fn, arrays, h=1e-6):
    """Worst relative error over all inputs of ``fn``."""
    grads = autograd(fn, *arrays)
    worst = 0.0
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = list(arrays)
            args[k] = v
            return scalar(fn, *args)
        worst = max(worst, relative_error(grads[k], central_diff_grad(f, a, h)))
    return worst


def info_nce_reference(zp: np.ndarray, zg: np.ndarray, tau: float) -> float:
    """Symmetric InfoNCE written out with explicit loops."""
    n = len(zp)
    a = zp / np.linalg.norm(zp, axis=1, keepdims=True)
    b = zg / np.linalg.norm(zg, axis=1, keepdims=True)
    s = a @ b.T / tau
    total = 0.0
    for i in range(n):
        row = s[i] - s[i].max()
        col = s[:, i] - s[:, i].max()
        total += row[i] - np.log(np.exp(row).sum())
        total += col[i] - np.log(np.exp(col).sum())
    return -total / n


def pairwise_auc(scores, labels) -> float:
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def gd_least_squares(Z, Y, alpha, steps=200000, tol=1e-14):
    """Ridge by plain gradient descent on the normal equations (unpenalized intercept)."""
    A = np.hstack([Z, np.ones((len(Z), 1))])
    P = np.eye(A.shape[1]) * alpha
    P[-1, -1] = 0.0
    H = A.T @ A + P
    step = 1.0 / np.linalg.eigvalsh(H).max()
    W = np.zeros((A.shape[1], Y.shape[1]))
    for _ in range(steps):
        grad = H @ W - A.T @ Y
        W_next = W - step * grad
        if np.abs(W_next - W).max() < tol:
            W = W_next
            break
        W = W_next
    return W[:-1], W[-1]


def all_permutations(n):
    return list(itertools.permutations(range(n)))


def full_lattice(n_rows, n_cols):
    rows, cols = [], []
    for r in range(n_rows):
        for j in range(n_cols):
            rows.append(r)
            cols.append(2 * j + r % 2)
    return np.array(rows), np.array(cols)


def naive_smooth(X, neighbors):
    out = np.empty_like(X)
    for i in range(X.shape[0]):
        nb = neighbors[i]
        for g in range(X.shape[1]):
            if len(nb) == 0:
                ctx = X[i, g]
            else:
                s = 0.0
                for j in nb:
                    s += X[j, g]
                ctx = s / len(nb)
            out[i, g] = (X[i, g] + ctx) / 2
    return out
