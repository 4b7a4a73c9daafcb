"""LoRA adapters and the base / low-rank split of an adapted projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import FlopCounter, ShapeError, as_matrix, matmul


@dataclass(frozen=True)
class LoraAdapter:
    """Down-projection ``a`` (d_in x r), up-projection ``b`` (r x d_out)."""

    a: np.ndarray
    b: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        a = as_matrix(self.a, self.a.dtype if isinstance(self.a, np.ndarray) else None)
        b = as_matrix(self.b, a.dtype)
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"adapter rank mismatch: A is {a.shape}, B is {b.shape}")
        if a.shape[1] > min(a.shape[0], b.shape[1]):
            raise ShapeError(f"rank {a.shape[1]} exceeds min(d_in, d_out) for A {a.shape}, B {b.shape}")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be finite and positive, got {self.alpha}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def d_in(self) -> int:
        return self.a.shape[0]

    @property
    def d_out(self) -> int:
        return self.b.shape[1]

    @property
    def scale(self) -> float:
        # rank 0 carries no update; any finite scale works
        return self.alpha / self.rank if self.rank else 1.0

    def scaled_b(self) -> np.ndarray:
        return self.b * self.b.dtype.type(self.scale)


@dataclass(frozen=True)
class MultiLoraSet:
    """A frozen base weight plus one adapter per agent.

    With ``shared_a`` every adapter holds its own copy of the same
    down-projection; equality is checked here, never assumed through aliasing.
    """

    base_weight: np.ndarray
    adapters: tuple
    shared_a: bool = False

    def __post_init__(self):
        w = as_matrix(self.base_weight, self.base_weight.dtype)
        object.__setattr__(self, "base_weight", w)
        object.__setattr__(self, "adapters", tuple(self.adapters))
        if not self.adapters:
            raise ValueError("MultiLoraSet needs at least one adapter")
        first = self.adapters[0]
        for ad in self.adapters:
            if (ad.d_in, ad.d_out) != w.shape:
                raise ShapeError(f"adapter maps {ad.d_in}->{ad.d_out} but base weight is {w.shape}")
            if ad.rank != first.rank:
                raise ShapeError("all adapters in a set must share one rank")
            if self.shared_a and not np.array_equal(ad.a, first.a):
                raise ValueError("shared_a is set but down-projections differ")

    @property
    def n_agents(self) -> int:
        return len(self.adapters)

    @property
    def rank(self) -> int:
        return self.adapters[0].rank

    def adapter(self, agent: int) -> LoraAdapter:
        if not 0 <= agent < len(self.adapters):
            raise IndexError(f"agent {agent} out of range for {len(self.adapters)} adapters")
        return self.adapters[agent]

    def merged_weight(self, agent: int) -> np.ndarray:
        """``W_0 + s * A B`` for one agent (dense reference, not used on the hot path)."""
        ad = self.adapter(agent)
        return self.base_weight + ad.scale * (ad.a.astype(np.float64) @ ad.b.astype(np.float64)).astype(ad.a.dtype)


def down_project(x, adapter: LoraAdapter, counter: FlopCounter | None = None) -> np.ndarray:
    """LR-cache rows ``x A`` (unscaled)."""
    return matmul(x, adapter.a, counter, "lora_down")


def expand_lr(y_lr, adapter: LoraAdapter, counter: FlopCounter | None = None) -> np.ndarray:
    """Reconstruct the adapter contribution ``s * (y_lr B)`` from LR-cache rows."""
    y_lr = np.asarray(y_lr)
    if y_lr.ndim != 2 or y_lr.shape[1] != adapter.rank:
        raise ShapeError(f"LR rows {y_lr.shape} do not match adapter rank {adapter.rank}")
    return matmul(y_lr, adapter.scaled_b(), counter, "lora_up")


def forward_decomposed(lset: MultiLoraSet, agent: int, x, counter: FlopCounter | None = None,
                       base_category: str = "qkv_proj"):
    """Return ``(y_base, y_lr, y_full)`` for ``x`` under ``agent``'s adapter.

    ``y_full = y_base + expand_lr(y_lr)``; the scale lives with B so LR rows
    stay agent-agnostic when A is shared.
    """
    ad = lset.adapter(agent)
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != lset.base_weight.shape[0]:
        raise ShapeError(f"input {x.shape} does not match d_in={lset.base_weight.shape[0]}")
    y_base = matmul(x, lset.base_weight, counter, base_category)
    y_lr = down_project(x, ad, counter)
    y_full = y_base + expand_lr(y_lr, ad, counter)
    return y_base, y_lr, y_full
