"""Per-task linear classification heads with freeze-on-completion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, InvariantViolation, RegistryError


@dataclass
class Head:
    W: np.ndarray        # (C, d)
    b: np.ndarray        # (C,)
    task_id: int
    frozen: bool = False

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    def freeze(self) -> None:
        # read-only buffers turn any stray in-place update into an error
        self.W.setflags(write=False)
        self.b.setflags(write=False)
        self.frozen = True


@dataclass
class HeadRegistry:
    heads: list[Head] = field(default_factory=list)
    active_id: int | None = None

    def __len__(self) -> int:
        return len(self.heads)

    def new_head(self, n_classes: int, dim: int, init_seed, task_id: int | None = None) -> int:
        if self.active_id is not None:
            raise InvariantViolation(f"head {self.active_id} is still unfrozen")
        if n_classes < 2:
            raise InputError("a head needs at least two classes")
        rng = np.random.default_rng(init_seed)
        bound = 1.0 / np.sqrt(dim)
        W = rng.uniform(-bound, bound, (n_classes, dim))
        b = rng.uniform(-bound, bound, n_classes)
        head_id = len(self.heads)
        self.heads.append(Head(W, b, head_id if task_id is None else task_id))
        self.active_id = head_id
        return head_id

    def freeze_active(self) -> None:
        if self.active_id is None:
            raise InvariantViolation("no active head to freeze")
        self.heads[self.active_id].freeze()
        self.active_id = None

    def get(self, head_id: int) -> Head:
        if not 0 <= head_id < len(self.heads):
            raise RegistryError(f"unknown head id {head_id}")
        return self.heads[head_id]

    def predict(self, M: np.ndarray, head_id: int) -> np.ndarray:
        h = self.get(head_id)
        return h.W @ M + h.b

    def head_for_task(self, task_id: int) -> int:
        for i, h in enumerate(self.heads):
            if h.task_id == task_id:
                return i
        raise RegistryError(f"no head for task {task_id}")
