"""Gated-attention MIL backbone with hand-written gradients.

Forward pass for one bag with patch features H (n x d):

    s_i = w . (tanh(V h_i) * sigmoid(U h_i))     raw attention score
    a   = softmax(s)
    M   = sum_i a_i h_i                          slide embedding
    y   = W_head M + b_head                      slide logits

The instance classifier sees the selected positive/negative patches directly
and is trained with the smooth SVM loss.  The prompt generator sees only the
thumbnail.  Gradients of every term are derived by hand below.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import patch_selector as ps
from . import prompt_guide as pg
from .errors import InputError, InvariantViolation
from .numerics import logsumexp, softmax
from .task_heads import HeadRegistry


@dataclass
class AttentionNetParams:
    V: np.ndarray   # (hidden, d)
    U: np.ndarray   # (hidden, d)
    w: np.ndarray   # (hidden,)

    @classmethod
    def init(cls, dim: int, hidden: int, seed) -> "AttentionNetParams":
        rng = np.random.default_rng(seed)
        bd, bh = 1.0 / np.sqrt(dim), 1.0 / np.sqrt(hidden)
        return cls(rng.uniform(-bd, bd, (hidden, dim)), rng.uniform(-bd, bd, (hidden, dim)),
                   rng.uniform(-bh, bh, hidden))


@dataclass
class InstanceClassifierParams:
    W: np.ndarray   # (2, d)
    b: np.ndarray   # (2,)

    @classmethod
    def init(cls, dim: int, seed) -> "InstanceClassifierParams":
        rng = np.random.default_rng(seed)
        bd = 1.0 / np.sqrt(dim)
        return cls(rng.uniform(-bd, bd, (2, dim)), rng.uniform(-bd, bd, 2))


@dataclass
class AttentionScores:
    raw: np.ndarray
    normalized: np.ndarray


@dataclass
class _AttnCache:
    H: np.ndarray
    av: np.ndarray
    au: np.ndarray
    gated: np.ndarray
    a: np.ndarray


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def score_patches(bag_or_features, p: AttentionNetParams, return_cache: bool = False):
    H = getattr(bag_or_features, "features", bag_or_features)
    H = np.asarray(H, dtype=float)
    if H.shape[1] != p.V.shape[1]:
        raise InputError(f"feature dim {H.shape[1]} does not match scorer dim {p.V.shape[1]}")
    av = np.tanh(H @ p.V.T)
    au = _sigmoid(H @ p.U.T)
    gated = av * au
    s = gated @ p.w
    a = softmax(s)
    scores = AttentionScores(s, a)
    if return_cache:
        return scores, _AttnCache(H, av, au, gated, a)
    return scores


def score_backward(ds: np.ndarray, cache: _AttnCache, p: AttentionNetParams) -> dict[str, np.ndarray]:
    """Gradients of the scorer parameters given dL/ds (raw scores)."""
    dgated = np.outer(ds, p.w)
    dzv = dgated * cache.au * (1.0 - cache.av ** 2)
    dzu = dgated * cache.av * cache.au * (1.0 - cache.au)
    return {"attn.V": dzv.T @ cache.H, "attn.U": dzu.T @ cache.H, "attn.w": cache.gated.T @ ds}


def aggregate(bag_or_features, scores: AttentionScores) -> np.ndarray:
    H = np.asarray(getattr(bag_or_features, "features", bag_or_features), dtype=float)
    if H.shape[0] != scores.normalized.shape[0]:
        raise InputError("attention length does not match bag size")
    return scores.normalized @ H


def smooth_svm_loss(scores, label: int, tau: float = 1.0) -> tuple[float, np.ndarray]:
    """Temperature-smoothed top-1 multiclass hinge.

    loss = tau * logsumexp_j((delta_j + s_j - s_y) / tau),  delta_j = [j != y].
    As tau -> 0 this tends to max_j(delta_j + s_j - s_y), the Crammer-Singer hinge.
    """
    if tau <= 0:
        raise InputError("smooth SVM temperature must be > 0")
    s = np.asarray(scores, dtype=float)
    if s.size < 2:
        raise InputError("smooth SVM needs at least two classes")
    delta = np.ones_like(s)
    delta[label] = 0.0
    z = (delta + s - s[label]) / tau
    loss = tau * logsumexp(z)
    grad = softmax(z)
    grad[label] -= 1.0
    return loss, grad


def smooth_svm_rows(Z: np.ndarray, labels, tau: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`smooth_svm_loss` for an (m, C) score matrix."""
    if tau <= 0:
        raise InputError("smooth SVM temperature must be > 0")
    Z = np.asarray(Z, dtype=float)
    rows = np.arange(Z.shape[0])
    y = np.asarray(labels, dtype=int)
    delta = np.ones_like(Z)
    delta[rows, y] = 0.0
    z = (delta + Z - Z[rows, y][:, None]) / tau
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    tot = e.sum(axis=1, keepdims=True)
    losses = tau * (zmax[:, 0] + np.log(tot[:, 0]))
    grad = e / tot
    grad[rows, y] -= 1.0
    return losses, grad


def slide_loss(logits, label: int) -> tuple[float, np.ndarray]:
    z = np.asarray(logits, dtype=float)
    loss = logsumexp(z) - z[label]
    grad = softmax(z)
    grad[label] -= 1.0
    return float(loss), grad


# ---------------------------------------------------------------------------
# Model state and optimizer

@dataclass
class ModelState:
    attn: AttentionNetParams
    inst: InstanceClassifierParams
    gen: pg.PromptGeneratorParams
    heads: HeadRegistry = field(default_factory=HeadRegistry)
    prompts: pg.TaskPromptRegistry = field(default_factory=pg.TaskPromptRegistry)

    @classmethod
    def init(cls, dim: int, thumb_size: int, hidden: int = 32, gen_hidden: int = 32,
             p_dim: int = 32, min_margin: float = 1.0, seed=0) -> "ModelState":
        ss = np.random.SeedSequence(seed)
        s_attn, s_inst, s_gen = ss.spawn(3)
        return cls(
            AttentionNetParams.init(dim, hidden, s_attn),
            InstanceClassifierParams.init(dim, s_inst),
            pg.PromptGeneratorParams.init(thumb_size, gen_hidden, p_dim, s_gen),
            HeadRegistry(),
            pg.TaskPromptRegistry(min_margin=min_margin),
        )

    @property
    def dim(self) -> int:
        return self.attn.V.shape[1]

    @property
    def thumb_size(self) -> int:
        return int(round(np.sqrt(self.gen.W1.shape[1] / 3)))

    def named_params(self):
        """Yield (name, array, frozen) for every parameter tensor."""
        for k in ("V", "U", "w"):
            yield f"attn.{k}", getattr(self.attn, k), False
        for k in ("W", "b"):
            yield f"inst.{k}", getattr(self.inst, k), False
        for k in ("W1", "b1", "W2", "b2"):
            yield f"gen.{k}", getattr(self.gen, k), False
        for i, h in enumerate(self.heads.heads):
            yield f"head.{i}.W", h.W, h.frozen
            yield f"head.{i}.b", h.b, h.frozen

    def param(self, name: str) -> np.ndarray:
        for n, arr, _ in self.named_params():
            if n == name:
                return arr
        raise KeyError(name)

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def snapshot(self) -> dict[str, bytes]:
        snap = {n: arr.tobytes() for n, arr, _ in self.named_params()}
        for e in self.prompts.entries:
            snap[f"prompt.{e.task_id}"] = e.mean.tobytes()
        return snap


class SGD:
    """SGD with heavy-ball momentum: v <- mu v + g, p <- p - lr v."""

    def __init__(self, lr: float = 1e-2, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, state: ModelState, grads: dict[str, np.ndarray]) -> None:
        frozen = {n for n, _, f in state.named_params() if f}
        bad = frozen.intersection(grads)
        if bad:
            raise InvariantViolation(f"gradient step on frozen parameters: {sorted(bad)}")
        for name, arr, _ in state.named_params():
            g = grads.get(name)
            if g is None:
                continue
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            arr -= self.lr * v


# ---------------------------------------------------------------------------
# Training step

@dataclass(frozen=True)
class LossWeights:
    instance: float = 1.0   # smooth SVM on selected patches
    intra: float = 0.1
    inter: float = 0.1


@dataclass
class PromptContext:
    """Per-epoch prompt state needed by a training step."""

    mbar: np.ndarray
    n_task: int
    variant: str = pg.HINGE_ONLY


@dataclass
class StepDiagnostics:
    total: float
    slide: float
    instance: float = 0.0
    intra: float = 0.0
    inter: float = 0.0
    selection: ps.SelectionResult | None = None
    prompt: np.ndarray | None = None


def instance_targets(bag_label: int, sel: ps.SelectionResult) -> tuple[list[int], list[int]]:
    """Patch indices and their instance labels.

    Negatives are always class 0.  Positives are class 1 in tumour-bearing
    slides and class 0 in normal slides.
    """
    pos_label = 1 if bag_label > 0 else 0
    return list(sel.positives) + list(sel.negatives), [pos_label] * len(sel.positives) + [0] * len(sel.negatives)


def loss_and_grads(state: ModelState, bag, selector_cfg: ps.SelectorConfig | None,
                   weights: LossWeights, prompt_ctx: PromptContext | None = None,
                   head_id: int | None = None, tau: float = 1.0, kmeans_seed=None,
                   selection: ps.SelectionResult | None = None):
    """Total loss, its gradient for every trainable tensor, and diagnostics.

    ``selector_cfg=None`` disables the instance branch; ``prompt_ctx=None``
    disables the prompt branch.  A precomputed ``selection`` pins the chosen
    patches (used by finite-difference checks).
    """
    hid = state.heads.active_id if head_id is None else head_id
    if hid is None:
        raise InvariantViolation("no trainable head is active")
    head = state.heads.get(hid)
    if head.frozen:
        raise InvariantViolation(f"head {hid} is frozen")

    scores, cache = score_patches(bag, state.attn, return_cache=True)
    H = cache.H
    M = scores.normalized @ H
    logits = head.W @ M + head.b
    l_slide, dlogits = slide_loss(logits, bag.label)
    grads = {f"head.{hid}.W": np.outer(dlogits, M), f"head.{hid}.b": dlogits.copy()}
    dM = head.W.T @ dlogits
    da = H @ dM
    a = scores.normalized
    ds = a * (da - a @ da)
    grads.update(score_backward(ds, cache, state.attn))
    diag = StepDiagnostics(total=0.0, slide=l_slide)

    total = l_slide
    if selector_cfg is not None:
        sel = selection or ps.select(bag, scores.raw, selector_cfg, seed=kmeans_seed)
        idx, labels = instance_targets(bag.label, sel)
        X = H[idx]
        losses, G = smooth_svm_rows(X @ state.inst.W.T + state.inst.b, labels, tau)
        k = len(idx)
        l_inst = float(losses.mean())
        c = weights.instance
        grads["inst.W"] = c * (G.T @ X) / k
        grads["inst.b"] = c * G.sum(axis=0) / k
        total += c * l_inst
        diag.instance = l_inst
        diag.selection = sel

    if prompt_ctx is not None:
        m, gcache = pg.generate_prompt(bag.thumbnail, state.gen, return_cache=True)
        l_intra, g_intra = pg.intra_loss(m[None], prompt_ctx.mbar)
        means = state.prompts.means()
        l_inter, g_inter = pg.inter_loss(m[None], means, state.prompts.min_margin,
                                         prompt_ctx.variant, n_total=prompt_ctx.n_task)
        dm = weights.intra * g_intra[0] + weights.inter * g_inter[0]
        grads.update(pg.generator_backward(dm, gcache, state.gen))
        total += weights.intra * l_intra + weights.inter * l_inter
        diag.intra, diag.inter, diag.prompt = l_intra, l_inter, m

    diag.total = total
    return total, grads, diag


def train_step(state: ModelState, bag, selector_cfg, weights: LossWeights, optimizer: SGD,
               prompt_ctx: PromptContext | None = None, tau: float = 1.0, kmeans_seed=None):
    """One forward/backward/update on a single bag.  Mutates ``state`` and returns it."""
    _, grads, diag = loss_and_grads(state, bag, selector_cfg, weights, prompt_ctx,
                                    tau=tau, kmeans_seed=kmeans_seed)
    optimizer.step(state, grads)
    return state, diag


def embed(state: ModelState, bag) -> tuple[AttentionScores, np.ndarray]:
    scores = score_patches(bag, state.attn)
    return scores, aggregate(bag, scores)
