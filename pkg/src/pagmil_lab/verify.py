"""Self-verification: gradient checks and independent oracles for the numeric core.

Each check returns the worst error it saw next to its tolerance.  Passing a
check name in ``perturb`` corrupts that check's analytic gradient (or metric)
on purpose; the check must then fail, which is how the suite proves it can.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import mil_core as mc
from . import patch_selector as ps
from . import prompt_guide as pg
from .numerics import auc_binary, grad_check, kmeans
from .synth_data import NOISE, SlideSpec, generate_bag

GRAD_TOL = 1e-4
AUC_TOL = 1e-12
PERTURBATION = 1e-2


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0


def _bump(g: np.ndarray, on: bool) -> np.ndarray:
    g = np.array(g, dtype=float)
    if on:
        g.flat[0] += PERTURBATION
    return g


# ---------------------------------------------------------------------------
# gradient checks: each returns the max relative error over one random point

def _gc_intra(rng, bad):
    n, p = rng.integers(1, 5), rng.integers(2, 6)
    P, mbar = rng.normal(size=(n, p)), rng.normal(size=p)
    _, g = pg.intra_loss(P, mbar)
    return grad_check(lambda x: pg.intra_loss(x.reshape(n, p), mbar)[0], P, _bump(g, bad))


def _inter_point(rng, variant, bad):
    n, p, T = rng.integers(1, 4), rng.integers(2, 5), rng.integers(1, 4)
    means = rng.normal(size=(T, p))
    # keep distances away from the hinge corner and from zero
    P = means[rng.integers(T, size=n)] + rng.normal(scale=0.6, size=(n, p))
    margin = float(rng.uniform(0.5, 2.0))
    d = np.linalg.norm(P[:, None] - means[None], axis=2)
    if np.min(np.abs(d - margin)) < 1e-3 or d.min() < 1e-3:
        P = P + 1e-2
    f = lambda x: pg.inter_loss(x.reshape(n, p), means, margin, variant)[0]
    _, g = pg.inter_loss(P, means, margin, variant)
    return grad_check(f, P, _bump(g, bad))


def _gc_inter_hinge(rng, bad):
    return _inter_point(rng, pg.HINGE_ONLY, bad)


def _gc_inter_eq2(rng, bad):
    return _inter_point(rng, pg.EQ2_VERBATIM, bad)


def _gc_ssvm(rng, bad):
    C = rng.integers(2, 6)
    s, y, tau = rng.normal(scale=2.0, size=C), int(rng.integers(C)), float(rng.uniform(0.2, 2.0))
    _, g = mc.smooth_svm_loss(s, y, tau)
    return grad_check(lambda x: mc.smooth_svm_loss(x, y, tau)[0], s, _bump(g, bad))


def _gc_slide(rng, bad):
    C = rng.integers(2, 6)
    z, y = rng.normal(scale=2.0, size=C), int(rng.integers(C))
    _, g = mc.slide_loss(z, y)
    return grad_check(lambda x: mc.slide_loss(x, y)[0], z, _bump(g, bad))


def _gc_scorer(rng, bad):
    n, d, h = rng.integers(2, 7), rng.integers(2, 5), rng.integers(2, 5)
    H = rng.normal(size=(n, d))
    p = mc.AttentionNetParams(rng.normal(size=(h, d)), rng.normal(size=(h, d)), rng.normal(size=h))
    r = rng.normal(size=n)   # L = r . s, so dL/ds = r
    _, cache = mc.score_patches(H, p, return_cache=True)
    g = mc.score_backward(r, cache, p)
    shapes = [(h, d), (h, d), (h,)]
    x0 = np.concatenate([p.V.ravel(), p.U.ravel(), p.w])
    g0 = np.concatenate([g["attn.V"].ravel(), g["attn.U"].ravel(), g["attn.w"]])

    def f(x):
        parts = np.split(x, np.cumsum([int(np.prod(s)) for s in shapes])[:-1])
        q = mc.AttentionNetParams(*(a.reshape(s) for a, s in zip(parts, shapes)))
        return float(r @ mc.score_patches(H, q).raw)

    return grad_check(f, x0, _bump(g0, bad))


def _gc_generator(rng, bad):
    S, hid, p = 2, rng.integers(2, 5), rng.integers(2, 5)
    params = pg.PromptGeneratorParams.init(S, hid, p, rng.integers(1 << 30))
    thumb = rng.uniform(size=(S, S, 3))
    r = rng.normal(size=p)   # L = r . m
    _, cache = pg.generate_prompt(thumb, params, return_cache=True)
    g = pg.generator_backward(r, cache, params)
    names = ("W1", "b1", "W2", "b2")
    shapes = [getattr(params, k).shape for k in names]
    x0 = np.concatenate([getattr(params, k).ravel() for k in names])
    g0 = np.concatenate([g[f"gen.{k}"].ravel() for k in names])

    def f(x):
        parts = np.split(x, np.cumsum([int(np.prod(s)) for s in shapes])[:-1])
        q = pg.PromptGeneratorParams(*(a.reshape(s) for a, s in zip(parts, shapes)))
        return float(r @ pg.generate_prompt(thumb, q))

    return grad_check(f, x0, _bump(g0, bad))


def _small_model(rng, dim=4, thumb=2):
    state = mc.ModelState.init(dim, thumb, hidden=3, gen_hidden=3, p_dim=3, seed=int(rng.integers(1 << 30)))
    state.heads.new_head(2, dim, int(rng.integers(1 << 30)), task_id=0)
    pg.finalize_task(rng.normal(size=(3, 3)), state.prompts, 0, 0)
    state.heads.freeze_active()
    state.heads.new_head(3, dim, int(rng.integers(1 << 30)), task_id=1)
    return state


def _gc_total(rng, bad):
    """Whole training objective with every branch on, all trainable tensors at once."""
    state = _small_model(rng)
    bag = generate_bag(SlideSpec(grid_size=8, feature_dim=4, n_tumor_blobs=1, label=2, task_id=1,
                                 thumb_size=2, seed=int(rng.integers(1 << 30))))
    cfg = ps.SelectorConfig(B=2, k_percent=10.0, kmeans_restarts=2)
    ctx = mc.PromptContext(mbar=rng.normal(size=3), n_task=5, variant=pg.HINGE_ONLY)
    w = mc.LossWeights(1.0, 0.1, 0.1)
    _, grads, diag = mc.loss_and_grads(state, bag, cfg, w, ctx, kmeans_seed=0)
    names = sorted(grads)
    arrays = {n: state.param(n) for n in names}
    x0 = np.concatenate([arrays[n].ravel() for n in names])
    g0 = np.concatenate([grads[n].ravel() for n in names])
    sizes = np.cumsum([arrays[n].size for n in names])[:-1]

    def f(x):
        trial = state.copy()
        for n, part in zip(names, np.split(x, sizes)):
            trial.param(n)[...] = part.reshape(arrays[n].shape)
        # the selection is pinned: it is a discrete choice, not part of the gradient
        return mc.loss_and_grads(trial, bag, cfg, w, ctx, selection=diag.selection)[0]

    return grad_check(f, x0, _bump(g0, bad))


GRADIENT_CHECKS: dict[str, Callable] = {
    "grad: intra-task prompt loss": _gc_intra,
    "grad: inter-task loss (hinge-only)": _gc_inter_hinge,
    "grad: inter-task loss (eq2-verbatim)": _gc_inter_eq2,
    "grad: smooth SVM loss": _gc_ssvm,
    "grad: slide cross-entropy": _gc_slide,
    "grad: attention scorer": _gc_scorer,
    "grad: prompt generator": _gc_generator,
}


def check_gradients(name: str, n_points: int = 100, seed: int = 0, perturb: bool = False) -> CheckResult:
    fn = GRADIENT_CHECKS.get(name) or {"grad: total training loss": _gc_total}[name]
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = max(fn(rng, perturb) for _ in range(n_points))
    return CheckResult(name, worst < GRAD_TOL, worst, GRAD_TOL, f"{n_points} random points")


# ---------------------------------------------------------------------------
# oracles

def pair_count_auc(scores, labels) -> float:
    """Brute-force AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    pos, neg = s[y == 1], s[y == 0]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def check_auc(n_instances: int = 200, seed: int = 0, perturb: bool = False) -> CheckResult:
    rng = np.random.default_rng([seed, 2])
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        # coarse scores so ties are common
        s = rng.integers(0, 6, size=n).astype(float) if rng.random() < 0.5 else rng.normal(size=n)
        got = auc_binary(s, y) + (PERTURBATION if perturb else 0.0)
        worst = max(worst, abs(got - pair_count_auc(s, y)))
    return CheckResult("oracle: rank AUC vs pair counting", worst < AUC_TOL, worst, AUC_TOL,
                       f"{n_instances} instances")


def exhaustive_two_means(X: np.ndarray) -> float:
    """Optimal 2-cluster within-cluster sum of squares by enumerating every bipartition."""
    n = X.shape[0]
    best = np.inf
    for mask in range(1, 2 ** (n - 1)):
        side = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        cost = sum(float(np.sum((P - P.mean(axis=0)) ** 2)) for P in (X[side], X[~side]))
        best = min(best, cost)
    return best


def check_kmeans(n_trials: int = 100, required: int = 95, seed: int = 0, perturb: bool = False) -> CheckResult:
    rng = np.random.default_rng([seed, 3])
    hits, worst = 0, 0.0
    for t in range(n_trials):
        n = int(rng.integers(3, 9))
        X = rng.normal(size=(n, 2))
        got = kmeans(X, 2, restarts=20, seed=[seed, t]).inertia * (1.0 + PERTURBATION if perturb else 1.0)
        opt = exhaustive_two_means(X)
        gap = (got - opt) / max(opt, 1e-12)
        worst = max(worst, gap)
        hits += gap <= 1e-9
    return CheckResult("oracle: K-means vs exhaustive partition", hits >= required, worst, 1e-9,
                       f"optimal in {hits}/{n_trials} trials (need {required})")


def isolated_by_scan(candidates, coords) -> set[int]:
    """Candidates with no other candidate among their 8 neighbours, by direct grid scan."""
    cells = {(int(coords[i][0]), int(coords[i][1])) for i in candidates}
    out = set()
    for i in candidates:
        r, c = int(coords[i][0]), int(coords[i][1])
        if not any((r + dr, c + dc) in cells for dr in (-1, 0, 1) for dc in (-1, 0, 1) if dr or dc):
            out.add(i)
    return out


def planted_noise_bag(seed: int, grid_size: int = 16):
    """A tumour bag whose isolated noise patches score highest, so they enter the candidates."""
    rng = np.random.default_rng([seed, 4])
    bag = generate_bag(SlideSpec(grid_size=grid_size, feature_dim=4, n_tumor_blobs=int(rng.integers(1, 4)),
                                 n_isolated_noise=int(rng.integers(1, 5)), label=1, seed=seed))
    scores = rng.normal(scale=0.1, size=len(bag))
    scores[bag.mask == 1] += 2.0
    scores[bag.mask == NOISE] += 3.0
    return bag, scores


def check_selector(n_bags: int = 100, seed: int = 0, perturb: bool = False) -> CheckResult:
    cfg = ps.SelectorConfig(B=8, k_percent=10.0)
    violations, bags_with_noise_cands, leaked = 0, 0, 0
    for i in range(n_bags):
        bag, scores = planted_noise_bag(seed * 100_003 + i)
        cands = ps.candidate_positives(scores, cfg.k_percent)
        surv = ps.adjacency_filter(cands, bag.coords, cfg.neighborhood)
        if perturb:
            surv = list(cands)
        iso = isolated_by_scan(cands, bag.coords)
        bags_with_noise_cands += bool(iso)
        # survivors must be exactly the non-isolated candidates
        if set(surv) != set(cands) - iso:
            violations += 1
        res = ps.select(bag, scores, cfg, seed=i)
        if perturb:
            res.survivors = surv
        leaked += bool(set(res.survivors) & iso)
        neg_oracle = sorted(range(len(bag)), key=lambda j: (scores[j], j))[:cfg.B]
        violations += res.negatives != neg_oracle
    worst = float(violations + leaked)
    return CheckResult("oracle: selector isolation and negatives", worst == 0, worst, 0.0,
                       f"{bags_with_noise_cands}/{n_bags} bags had isolated candidates")


# ---------------------------------------------------------------------------

ALL_CHECKS = (*GRADIENT_CHECKS, "grad: total training loss",
              "oracle: rank AUC vs pair counting", "oracle: K-means vs exhaustive partition",
              "oracle: selector isolation and negatives")


def run_checks(seed: int = 0, n_points: int = 100, perturb: frozenset | set = frozenset()) -> list[CheckResult]:
    unknown = set(perturb) - set(ALL_CHECKS)
    if unknown:
        raise KeyError(f"unknown checks: {sorted(unknown)}")
    results = []
    for name in ALL_CHECKS:
        t0 = time.perf_counter()
        bad = name in perturb
        if name.startswith("grad:"):
            # the whole-objective check is slower; fewer points keep the suite quick
            n = n_points if name in GRADIENT_CHECKS else max(1, n_points // 10)
            r = check_gradients(name, n, seed, bad)
        elif name.startswith("oracle: rank AUC"):
            r = check_auc(seed=seed, perturb=bad)
        elif name.startswith("oracle: K-means"):
            r = check_kmeans(seed=seed, perturb=bad)
        else:
            r = check_selector(seed=seed, perturb=bad)
        r.seconds = time.perf_counter() - t0
        results.append(r)
    return results


def format_checks(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  max_error   tolerance  time_s  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.max_error:<10.3e}  "
                     f"{r.tolerance:<9.1e}  {r.seconds:6.2f}  {r.detail}")
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
