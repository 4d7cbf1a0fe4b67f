"""Low-rank task adapters: a frozen base projection is steered by
``delta = scaling * B @ A`` with rank far below the base dimensions.

The factored path ``B @ (A @ x)`` is the hot path; the dense delta matrix is
materialized only for inspection and as a test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Matrix, matmul, seeded_rng

ADAPTER_INIT_STD = 0.02
PREMERGED_ID = "premerged"


@dataclass
class LoraAdapter:
    """One expert's rank decomposition against a d x k base projection."""

    adapter_id: str
    task_id: str
    B: Matrix  # [d, r]
    A: Matrix  # [r, k]
    scaling: float = 1.0

    def __post_init__(self):
        d, rb = self.B.shape
        ra, k = self.A.shape
        if rb != ra:
            raise ValueError(f"rank mismatch: B is {self.B.shape}, A is {self.A.shape}")
        if not 1 <= rb <= min(d, k):
            raise ValueError(f"rank {rb} out of range for {d}x{k}")
        if self.scaling <= 0:
            raise ValueError(f"scaling must be positive, got {self.scaling}")

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.B.shape[0], self.A.shape[1])

    def param_count(self) -> int:
        return self.B.size + self.A.size


def init_adapter(d: int, k: int, r: int, seed: int,
                 adapter_id: str = "adapter", task_id: str = "task") -> LoraAdapter:
    """Fresh adapter: A ~ N(0, 0.02^2), B = 0, so the initial delta is zero."""
    if not 1 <= r <= min(d, k):
        raise ValueError(f"rank {r} out of range for {d}x{k}")
    rng = seeded_rng(seed)
    A = rng.normal(0.0, ADAPTER_INIT_STD, size=(r, k))
    B = np.zeros((d, r))
    return LoraAdapter(adapter_id=adapter_id, task_id=task_id, B=B, A=A, scaling=1.0)


def delta_weight(adapter: LoraAdapter) -> Matrix:
    """Dense ``scaling * B @ A`` (test/inspection path)."""
    return adapter.scaling * matmul(adapter.B, adapter.A)


def apply(adapter: LoraAdapter, x: np.ndarray) -> np.ndarray:
    """Factored application ``scaling * B @ (A @ x)`` for a length-k vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (adapter.A.shape[1],):
        raise ValueError(f"expected input of length {adapter.A.shape[1]}, got shape {x.shape}")
    return adapter.scaling * (adapter.B @ (adapter.A @ x))


@dataclass
class AdapterSet:
    """Ordered adapters keyed by id; exactly one carries the pre-merged task."""

    adapters: dict[str, LoraAdapter] = field(default_factory=dict)

    def __post_init__(self):
        premerged = [a for a in self.adapters.values() if a.task_id == PREMERGED_ID]
        if len(premerged) != 1:
            raise ValueError(f"expected exactly one pre-merged adapter, found {len(premerged)}")
        self.premerged_id = premerged[0].adapter_id

    def __getitem__(self, adapter_id: str) -> LoraAdapter:
        try:
            return self.adapters[adapter_id]
        except KeyError:
            raise KeyError(f"unknown adapter id: {adapter_id!r}") from None

    def __contains__(self, adapter_id: str) -> bool:
        return adapter_id in self.adapters

    def premerged(self) -> LoraAdapter:
        return self.adapters[self.premerged_id]

    def task_ids(self) -> list[str]:
        return [a.adapter_id for a in self.adapters.values() if a.task_id != PREMERGED_ID]
