"""Representative patch selection.

Negatives are the B lowest-scoring patches.  Positive candidates are the top
k% by score; candidates with no adjacent candidate are dropped as isolated
(stain artefacts, noise), and the survivors are spread out by K-means on
their grid coordinates, taking the patch closest to each centroid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, SelectionError
from .numerics import kmeans

CONN8 = "8-conn"
CONN4 = "4-conn"


@dataclass(frozen=True)
class SelectorConfig:
    B: int = 8
    k_percent: float = 10.0
    neighborhood: str = CONN8
    kmeans_restarts: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.B < 1:
            raise InputError("B must be >= 1")
        if not 0 < self.k_percent <= 100:
            raise InputError("k_percent must be in (0, 100]")
        if self.neighborhood not in (CONN8, CONN4):
            raise InputError(f"neighborhood must be {CONN8!r} or {CONN4!r}")


@dataclass
class SelectionResult:
    negatives: list[int]
    candidates: list[int]
    survivors: list[int]
    positives: list[int]
    fallback_used: bool = False


def _order_desc(scores: np.ndarray) -> np.ndarray:
    # highest first, lower index wins ties
    return np.lexsort((np.arange(scores.size), -scores))


def select_negatives(scores, B: int) -> list[int]:
    s = np.asarray(scores, dtype=float)
    if s.size < 2 * B:
        raise SelectionError(f"bag of {s.size} patches is too small for B={B} positives and negatives")
    return [int(i) for i in np.lexsort((np.arange(s.size), s))[:B]]


def candidate_positives(scores, k_percent: float) -> list[int]:
    s = np.asarray(scores, dtype=float)
    # round before ceil so e.g. 100 * 7 / 100 does not become 8 through float error
    count = min(s.size, math.ceil(round(s.size * k_percent / 100.0, 9)))
    return [int(i) for i in _order_desc(s)[:count]]


def _adjacent(a, b, neighborhood: str) -> bool:
    dr, dc = abs(int(a[0]) - int(b[0])), abs(int(a[1]) - int(b[1]))
    if neighborhood == CONN8:
        return max(dr, dc) == 1
    return dr + dc == 1


def adjacency_filter(candidates, coords, neighborhood: str = CONN8) -> list[int]:
    """Keep the candidates that have at least one other candidate as a grid neighbour."""
    coords = np.asarray(coords)
    cand = list(candidates)
    lookup = {(int(coords[i, 0]), int(coords[i, 1])): i for i in cand}
    if len(lookup) != len(cand):
        raise InputError("candidate coordinates are not unique")
    steps = ([(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if dr or dc]
             if neighborhood == CONN8 else [(-1, 0), (1, 0), (0, -1), (0, 1)])
    keep = set()
    for i in cand:
        r, c = int(coords[i, 0]), int(coords[i, 1])
        nbrs = [lookup[(r + dr, c + dc)] for dr, dc in steps if (r + dr, c + dc) in lookup]
        if nbrs:
            keep.add(i)
            keep.update(nbrs)
    return [i for i in cand if i in keep]


def diversify(survivors, coords, B: int, cfg: SelectorConfig, scores=None,
              candidates=None, seed=None) -> tuple[list[int], bool]:
    """Return (positives, fallback_used)."""
    coords = np.asarray(coords, dtype=float)
    surv = list(survivors)
    s = np.zeros(coords.shape[0]) if scores is None else np.asarray(scores, dtype=float)
    if len(surv) == B:
        return surv, False
    if len(surv) > B:
        res = kmeans(coords[surv], B, restarts=cfg.kmeans_restarts,
                     seed=cfg.seed if seed is None else seed)
        picked = []
        for j in range(B):
            members = [surv[i] for i in np.flatnonzero(res.assignment == j)]
            d2 = [float(np.sum((coords[m] - res.centroids[j]) ** 2)) for m in members]
            # nearest to centroid, then higher score, then lower index
            picked.append(min(zip(d2, members), key=lambda t: (t[0], -s[t[1]], t[1]))[1])
        return picked, False
    cand = list(candidates) if candidates is not None else []
    rest = [i for i in cand if i not in set(surv)]
    rest.sort(key=lambda i: (-s[i], i))
    return (surv + rest)[:B], True


def select(bag, scores, cfg: SelectorConfig, seed=None) -> SelectionResult:
    """Full selection on one bag.  ``scores`` are the raw attention scores."""
    s = np.asarray(scores, dtype=float)
    if s.size != len(bag):
        raise InputError("score count does not match bag size")
    B = cfg.B
    negatives = select_negatives(s, B)
    candidates = candidate_positives(s, cfg.k_percent)
    survivors = adjacency_filter(candidates, bag.coords, cfg.neighborhood)
    positives, fallback = diversify(survivors, bag.coords, B, cfg, s, candidates, seed)

    neg = set(negatives)
    if len(positives) < B or neg.intersection(positives):
        # replace collisions (and fill shortfalls) with the next-best non-negative patch
        kept = [p for p in positives if p not in neg]
        pool = [int(i) for i in _order_desc(s) if int(i) not in neg and int(i) not in set(kept)]
        need = B - len(kept)
        if need > len(pool):
            raise SelectionError("cannot choose disjoint positive and negative sets")
        positives = kept + pool[:need]
        fallback = True
    return SelectionResult(negatives, candidates, survivors, positives, fallback)


ROLE_ORDER = ("pos", "neg", "survivor", "candidate")


def selection_table(bag, scores, result: SelectionResult) -> str:
    """Text table of every patch with a role: index, row, col, raw score, role."""
    roles = {}
    for role, idxs in (("candidate", result.candidates), ("survivor", result.survivors),
                       ("neg", result.negatives), ("pos", result.positives)):
        for i in idxs:
            roles[i] = role   # later (more specific) roles overwrite
    lines = ["index\trow\tcol\tscore\trole"]
    for i in sorted(roles):
        r, c = bag.coords[i]
        lines.append(f"{i}\t{r}\t{c}\t{float(scores[i])!r}\t{roles[i]}")
    return "\n".join(lines) + "\n"
