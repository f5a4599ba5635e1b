"""Independent reference implementations used by the tests.

These are deliberately naive (loops, brute force, scipy) and share no code
with the package beyond the data types they read.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import ndimage


def pair_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else (0.5 if a == b else 0.0)
    return total / (len(pos) * len(neg))


def best_partition_inertia(points, B: int) -> float:
    """Minimum within-cluster sum of squares over every assignment to B non-empty clusters."""
    X = np.asarray(points, dtype=float)
    best = math.inf
    for assign in itertools.product(range(B), repeat=len(X)):
        if assign[0] != 0 or len(set(assign)) != B:   # fix one label to skip mirror images
            continue
        a = np.array(assign)
        cost = sum(np.sum((X[a == k] - X[a == k].mean(axis=0)) ** 2) for k in range(B))
        best = min(best, cost)
    return best


def isolated(candidates, coords, conn8: bool = True) -> set[int]:
    out = set()
    for i in candidates:
        ri, ci = coords[i]
        has = False
        for j in candidates:
            if j == i:
                continue
            dr, dc = abs(int(coords[j][0]) - int(ri)), abs(int(coords[j][1]) - int(ci))
            if (max(dr, dc) == 1) if conn8 else (dr + dc == 1):
                has = True
                break
        if not has:
            out.add(i)
    return out


def components8(grid_bool: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(grid_bool, structure=np.ones((3, 3), dtype=int))


def numeric_grad(f, x, h=1e-6) -> np.ndarray:
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for k in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        g[k] = (f(xp) - f(xm)) / (2 * h)
    return g


def mean_pairwise_distance(coords) -> float:
    P = np.asarray(coords, dtype=float)
    if len(P) < 2:
        return 0.0
    return float(np.mean([np.linalg.norm(P[i] - P[j]) for i, j in itertools.combinations(range(len(P)), 2)]))


def blob_level_scores(bag, rng, tumour_tag: int = 1, noise: float = 0.3) -> np.ndarray:
    """Scores of a spatially coherent scorer: each tumour blob gets its own level in [1, 3]."""
    G = bag.grid_size
    grid = np.zeros((G, G), dtype=bool)
    t = bag.coords[bag.mask == tumour_tag]
    grid[t[:, 0], t[:, 1]] = True
    labels, n = components8(grid)
    level = rng.uniform(1.0, 3.0, size=n + 1)
    level[0] = 0.0
    return rng.normal(scale=noise, size=len(bag)) + level[labels[bag.coords[:, 0], bag.coords[:, 1]]]


def diversity_wins(n_bags: int = 100, cfg=None) -> int:
    """Bags (of ``n_bags`` three-blob bags) where diversified positives spread at least as far as top-B."""
    from pagmil_lab.patch_selector import SelectorConfig, select
    from pagmil_lab.synth_data import SlideSpec, generate_bag

    cfg = cfg or SelectorConfig()
    wins = 0
    for seed in range(n_bags):
        bag = generate_bag(SlideSpec(n_tumor_blobs=3, blob_size_range=(4, 12), label=1, seed=seed, feature_dim=4))
        s = blob_level_scores(bag, np.random.default_rng(seed))
        r = select(bag, s, cfg, seed=seed)
        top = sorted(range(len(bag)), key=lambda i: (-s[i], i))[:cfg.B]
        wins += mean_pairwise_distance(bag.coords[r.positives]) >= mean_pairwise_distance(bag.coords[top])
    return wins
