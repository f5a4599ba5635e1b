"""Dense numeric kernels: distances, K-means, rank AUC, softmax, gradient checks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import InputError, PreconditionError, UndefinedMetricError

NORM_EPS = 1e-12


class DegenerateVectorWarning(UserWarning):
    """Cosine similarity was asked for a (near) zero vector."""


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise InputError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def l2_distance(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.sum((a - b) ** 2)))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``.

    A vector with norm below 1e-12 has no direction; the result is then 0.0
    and a :class:`DegenerateVectorWarning` is emitted.
    """
    a, b = _pair(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        warnings.warn("cosine similarity of a zero vector", DegenerateVectorWarning, stacklevel=2)
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def logsumexp(v) -> float:
    v = np.asarray(v, dtype=float)
    m = np.max(v)
    return float(m + np.log(np.sum(np.exp(v - m))))


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    e = np.exp(v - np.max(v))
    return e / e.sum()


# ---------------------------------------------------------------------------
# K-means

@dataclass
class KMeansResult:
    centroids: np.ndarray          # (B, 2)
    assignment: np.ndarray         # (n,)
    inertia: float
    history: list[float] = field(default_factory=list)  # best restart, one entry per Lloyd update


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # X (n, p), C (R, B, p) -> (R, n, B)
    diff = X[None, :, None, :] - C[:, None, :, :]
    return np.einsum("rnbp,rnbp->rnb", diff, diff)


def _plus_plus_seeds(X: np.ndarray, B: int, restarts: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding, all restarts at once: each new centre is drawn with probability ~ D^2."""
    n = X.shape[0]
    rows = np.arange(restarts)
    idx = rng.integers(n, size=restarts)
    C = np.empty((restarts, B, X.shape[1]))
    C[:, 0] = X[idx]
    d2 = np.sum((X[None] - C[:, 0, None]) ** 2, axis=2)          # (R, n)
    for j in range(1, B):
        cum = np.cumsum(d2, axis=1)
        total = cum[:, -1]
        u = rng.random(restarts)
        drawn = np.minimum((cum <= (u * total)[:, None]).sum(axis=1), n - 1)
        # all points already coincide with a centre: fall back to a uniform draw
        uniform = rng.integers(n, size=restarts)
        idx = np.where(total > 0.0, drawn, uniform)
        C[:, j] = X[idx]
        d2 = np.minimum(d2, np.sum((X[None] - C[rows, j, None]) ** 2, axis=2))
    return C


def _repair_empty(X, C, assign, B) -> None:
    """Reseed empty clusters in place with the point farthest from its centroid."""
    for r in range(C.shape[0]):
        counts = np.bincount(assign[r], minlength=B)
        if counts.min() > 0:
            continue
        for empty in np.flatnonzero(counts == 0):
            d2 = np.sum((X - C[r, assign[r]]) ** 2, axis=1)
            # stable: among equal distances prefer the lower index
            for idx in np.argsort(-d2, kind="stable"):
                if counts[assign[r, idx]] > 1:
                    break
            counts[assign[r, idx]] -= 1
            counts[empty] += 1
            assign[r, idx] = empty
            C[r, empty] = X[idx]


def _update(X, assign, B) -> tuple[np.ndarray, np.ndarray]:
    onehot = np.eye(B)[assign]                       # (R, n, B)
    counts = onehot.sum(axis=1)                      # (R, B)
    C = np.einsum("rnb,np->rbp", onehot, X) / counts[..., None]
    return C, onehot


def _cost(X, C, assign) -> np.ndarray:
    R = C.shape[0]
    diff = X[None] - C[np.arange(R)[:, None], assign]
    return np.sum(diff ** 2, axis=(1, 2))


def kmeans(points, B: int, restarts: int = 20, max_iters: int = 100, seed=0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; the best of ``restarts`` runs is returned.

    All restarts are iterated together as one batched array problem.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim != 2:
        raise InputError("points must be an (n, p) array")
    n = X.shape[0]
    if B < 1 or n < B:
        raise PreconditionError(f"kmeans needs len(points) >= B >= 1, got n={n}, B={B}")
    restarts = max(1, int(restarts))
    rng = np.random.default_rng(seed)

    C = _plus_plus_seeds(X, B, restarts, rng)
    assign = np.argmin(_sq_dists(X, C), axis=2)
    _repair_empty(X, C, assign, B)
    histories: list[list[float]] = [[] for _ in range(restarts)]
    for _ in range(max_iters):
        C, _ = _update(X, assign, B)
        cost = _cost(X, C, assign)
        for r in range(restarts):
            histories[r].append(float(cost[r]))
        new = np.argmin(_sq_dists(X, C), axis=2)
        _repair_empty(X, C, new, B)
        done = np.array_equal(new, assign)
        assign = new
        if done:
            break
    cost = _cost(X, C, assign)
    best = int(np.argmin(cost))
    return KMeansResult(
        centroids=C[best].copy(),
        assignment=assign[best].copy(),
        inertia=float(cost[best]),
        history=histories[best],
    )


# ---------------------------------------------------------------------------
# Metrics and checks

def auc_binary(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with mid-ranks for ties."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise InputError("scores and labels differ in length")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def grad_check(f: Callable[[np.ndarray], float], x, analytic_grad, h: float = 1e-5) -> float:
    """Max over coordinates of |numeric - analytic| / max(1, |analytic|), central differences."""
    x = np.array(x, dtype=float).ravel()
    g = np.asarray(analytic_grad, dtype=float).ravel()
    if g.shape != x.shape:
        raise InputError("gradient shape does not match x")
    worst = 0.0
    for k in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        fp, fm = f(xp), f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise InputError(f"non-finite function value at coordinate {k}")
        num = (fp - fm) / (2.0 * h)
        worst = max(worst, abs(num - g[k]) / max(1.0, abs(g[k])))
    return worst
