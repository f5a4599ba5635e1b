"""Thumbnail prompts: generator, intra/inter-task prompt losses, task registry and routing."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, RegistryError, RoutingError
from .numerics import DegenerateVectorWarning, cosine_similarity

HINGE_ONLY = "hinge-only"
EQ2_VERBATIM = "eq2-verbatim"
INTER_VARIANTS = (HINGE_ONLY, EQ2_VERBATIM)
INPUT_CENTER = 0.5


@dataclass
class PromptGeneratorParams:
    """Two-layer tanh perceptron over the flattened S x S x 3 thumbnail."""

    W1: np.ndarray   # (hidden, S*S*3)
    b1: np.ndarray
    W2: np.ndarray   # (p_dim, hidden)
    b2: np.ndarray

    @classmethod
    def init(cls, thumb_size: int, hidden: int, p_dim: int, seed) -> "PromptGeneratorParams":
        rng = np.random.default_rng(seed)
        n_in = thumb_size * thumb_size * 3
        # Glorot-uniform bounds
        b_in, b_h = np.sqrt(6.0 / (n_in + hidden)), np.sqrt(6.0 / (hidden + p_dim))
        return cls(
            rng.uniform(-b_in, b_in, (hidden, n_in)),
            rng.uniform(-b_in, b_in, hidden),
            rng.uniform(-b_h, b_h, (p_dim, hidden)),
            rng.uniform(-b_h, b_h, p_dim),
        )

    @property
    def p_dim(self) -> int:
        return self.W2.shape[0]


def generate_prompt(thumbnail: np.ndarray, params: PromptGeneratorParams, return_cache: bool = False):
    # pixels are centred on mid-grey before the first layer
    x = np.asarray(thumbnail, dtype=float).ravel() - INPUT_CENTER
    if x.size != params.W1.shape[1]:
        raise InputError(f"thumbnail has {x.size} values, generator expects {params.W1.shape[1]}")
    hidden = np.tanh(params.W1 @ x + params.b1)
    m = params.W2 @ hidden + params.b2
    if return_cache:
        return m, (x, hidden)
    return m


def generator_backward(dm: np.ndarray, cache, params: PromptGeneratorParams) -> dict[str, np.ndarray]:
    x, hidden = cache
    dz = (params.W2.T @ dm) * (1.0 - hidden ** 2)
    return {
        "gen.W1": np.outer(dz, x),
        "gen.b1": dz,
        "gen.W2": np.outer(dm, hidden),
        "gen.b2": dm.copy(),
    }


def intra_loss(prompts, mbar) -> tuple[float, np.ndarray]:
    """0.5 * sum_i ||m_i - mbar||^2; ``mbar`` is held constant, so dL/dm_i = m_i - mbar."""
    P = np.atleast_2d(np.asarray(prompts, dtype=float))
    mbar = np.asarray(mbar, dtype=float)
    if P.shape[0] == 0:
        raise InputError("intra_loss needs at least one prompt")
    if P.shape[1] != mbar.shape[0]:
        raise InputError("prompt and mean dimensions differ")
    diff = P - mbar
    return 0.5 * float(np.sum(diff ** 2)), diff


def inter_loss(prompts, task_means, min_margin: float = 1.0, variant: str = HINGE_ONLY,
               n_total: int | None = None) -> tuple[float, np.ndarray]:
    """Separation loss between current prompts and the stored means of earlier tasks.

    ``hinge-only``:    (1/2NT) sum_t sum_i max(0, min - d_it)^2
    ``eq2-verbatim``: -(1/2NT) sum_t sum_i [d_it^2 + max(0, min - d_it)^2]

    with d_it = ||m_i - mean_t||.  ``n_total`` overrides N when the prompts
    passed are a slice of a larger task (one bag per step).
    """
    if variant not in INTER_VARIANTS:
        raise InputError(f"unknown inter-loss variant {variant!r}")
    P = np.atleast_2d(np.asarray(prompts, dtype=float))
    means = np.asarray(task_means, dtype=float).reshape(-1, P.shape[1]) if len(task_means) else np.zeros((0, P.shape[1]))
    T = means.shape[0]
    if T == 0:
        return 0.0, np.zeros_like(P)
    N = n_total if n_total is not None else P.shape[0]
    scale = 1.0 / (2.0 * N * T)
    diff = P[:, None, :] - means[None, :, :]           # (n, T, p)
    d = np.sqrt(np.sum(diff ** 2, axis=2))             # (n, T)
    gap = np.maximum(0.0, min_margin - d)
    safe = np.where(d > 1e-12, d, 1.0)
    # d/dm of max(0, min-d)^2 = -2 gap * diff / d  (zero at d == 0 by convention)
    hinge_grad = np.where((d > 1e-12)[..., None], -2.0 * (gap / safe)[..., None] * diff, 0.0)
    if variant == HINGE_ONLY:
        loss = scale * float(np.sum(gap ** 2))
        grad = scale * hinge_grad.sum(axis=1)
    else:
        loss = -scale * float(np.sum(d ** 2 + gap ** 2))
        grad = -scale * (2.0 * diff + hinge_grad).sum(axis=1)
    return loss, grad


@dataclass
class RunningPromptMean:
    total: np.ndarray | None = None
    count: int = 0

    def add(self, m: np.ndarray) -> None:
        self.total = m.astype(float).copy() if self.total is None else self.total + m
        self.count += 1

    @property
    def mean(self) -> np.ndarray:
        if not self.count:
            raise InputError("no prompts accumulated")
        return self.total / self.count

    def reset(self) -> None:
        self.total, self.count = None, 0


@dataclass
class PromptEntry:
    task_id: int
    mean: np.ndarray
    head_id: int


@dataclass
class TaskPromptRegistry:
    entries: list[PromptEntry] = field(default_factory=list)
    min_margin: float = 1.0

    def __len__(self) -> int:
        return len(self.entries)

    def means(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 0))
        return np.stack([e.mean for e in self.entries])

    def task_ids(self) -> list[int]:
        return [e.task_id for e in self.entries]


def finalize_task(prompts, registry: TaskPromptRegistry, task_id: int, head_id: int) -> TaskPromptRegistry:
    """Append the mean of ``prompts`` as the stored prompt of ``task_id`` (in place)."""
    if task_id in registry.task_ids():
        raise RegistryError(f"task {task_id} already finalized")
    P = np.atleast_2d(np.asarray(prompts, dtype=float))
    if P.shape[0] == 0:
        raise InputError("cannot finalize a task without prompts")
    mean = P.mean(axis=0)
    mean.setflags(write=False)
    registry.entries.append(PromptEntry(task_id, mean, head_id))
    return registry


def route(prompt, registry: TaskPromptRegistry) -> tuple[int, int, float]:
    """Pick the stored task whose mean prompt is most cosine-similar; ties go to the earlier entry."""
    if not registry.entries:
        raise RoutingError("cannot route with an empty prompt registry")
    best, best_sim = 0, -np.inf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateVectorWarning)
        for i, e in enumerate(registry.entries):
            sim = cosine_similarity(prompt, e.mean)
            if sim > best_sim:
                best, best_sim = i, sim
    e = registry.entries[best]
    return e.task_id, e.head_id, float(best_sim)
