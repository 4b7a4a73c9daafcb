"""Dense matrix primitives and MAC instrumentation.

Matrices are plain 2-D numpy arrays. ``matmul`` accumulates every output
entry strictly left to right over the inner dimension (no FMA, no blocked
summation), so results are reproducible bit-for-bit and agree with a naive
triple loop. Every product can report its multiply-accumulate count to a
``FlopCounter``.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numba
import numpy as np

MAC_CATEGORIES = (
    "qkv_proj",
    "lora_down",
    "lora_up",
    "attn_qk",
    "attn_pv",
    "attn_lr",
    "out_proj",
    "mlp",
    "lm_head",
)

_DTYPES = {"float32": np.float32, "float64": np.float64, "f32": np.float32, "f64": np.float64}
_dtype = np.dtype(np.float64)


class ShapeError(ValueError):
    pass


def resolve_dtype(name) -> np.dtype:
    if isinstance(name, str):
        try:
            return np.dtype(_DTYPES[name.lower()])
        except KeyError:
            raise ValueError(f"unsupported dtype {name!r}; use f32 or f64") from None
    dt = np.dtype(name)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def get_dtype() -> np.dtype:
    return _dtype


def set_dtype(name) -> None:
    global _dtype
    _dtype = resolve_dtype(name)


@contextlib.contextmanager
def working_dtype(name):
    """Temporarily switch the default dtype used for new matrices."""
    global _dtype
    old = _dtype
    _dtype = resolve_dtype(name)
    try:
        yield _dtype
    finally:
        _dtype = old


def as_matrix(x, dtype=None) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous 2-D array of the working dtype."""
    dt = get_dtype() if dtype is None else resolve_dtype(dtype)
    m = np.ascontiguousarray(np.asarray(x, dtype=dt))
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


@dataclass
class FlopCounter:
    """MAC tallies per category plus the number of token-layer hidden passes."""

    macs_by_category: dict = field(default_factory=lambda: dict.fromkeys(MAC_CATEGORIES, 0))
    hidden_token_passes: int = 0

    def add(self, category: str, macs: int) -> None:
        if category not in self.macs_by_category:
            raise KeyError(f"unknown MAC category {category!r}")
        if macs < 0:
            raise ValueError("MAC counts are non-negative")
        self.macs_by_category[category] += int(macs)

    @property
    def total(self) -> int:
        return sum(self.macs_by_category.values())

    def copy(self) -> "FlopCounter":
        return FlopCounter(dict(self.macs_by_category), self.hidden_token_passes)

    def __sub__(self, other: "FlopCounter") -> "FlopCounter":
        return FlopCounter(
            {k: v - other.macs_by_category[k] for k, v in self.macs_by_category.items()},
            self.hidden_token_passes - other.hidden_token_passes,
        )

    def __add__(self, other: "FlopCounter") -> "FlopCounter":
        return FlopCounter(
            {k: v + other.macs_by_category[k] for k, v in self.macs_by_category.items()},
            self.hidden_token_passes + other.hidden_token_passes,
        )

    def to_dict(self) -> dict:
        return {
            "macs_by_category": dict(self.macs_by_category),
            "total_macs": self.total,
            "hidden_token_passes": self.hidden_token_passes,
        }


@numba.njit(cache=True)
def _ordered_matmul(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out


def _mm(a: np.ndarray, b: np.ndarray, counter: FlopCounter | None, category: str | None) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    if a.size and b.size:
        _ordered_matmul(np.ascontiguousarray(a), np.ascontiguousarray(b, dtype=a.dtype), out)
    if counter is not None:
        counter.add(category, a.shape[0] * a.shape[1] * b.shape[1])
    return out


@numba.njit(cache=True)
def _ordered_row_sum(p, out):
    for i in range(p.shape[0]):
        acc = 0.0
        for j in range(p.shape[1]):
            acc += p[i, j]
        out[i] = acc
    return out


def row_sum(p: np.ndarray) -> np.ndarray:
    """Sequential per-row sum.

    numpy's pairwise summation regroups terms with the row length, so a row
    padded with zeros could round differently; this one cannot.
    """
    p = np.ascontiguousarray(p)
    return _ordered_row_sum(p, np.empty(p.shape[0], dtype=p.dtype))


def matmul(a, b, counter: FlopCounter | None = None, category: str | None = None) -> np.ndarray:
    """Return ``a @ b`` with fixed left-to-right accumulation.

    When ``counter`` is given, ``a.rows * a.cols * b.cols`` MACs are charged
    to ``category``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul dtype mismatch: {a.dtype} x {b.dtype}")
    out = _mm(a, b, counter, category)
    if not np.isfinite(out).all():
        raise FloatingPointError("matmul produced non-finite entries")
    return out


def row_softmax(s) -> np.ndarray:
    """Softmax along rows with row-max subtraction.

    Entries equal to ``-inf`` get exactly zero weight; every row needs at
    least one finite entry.
    """
    s = np.asarray(s)
    if s.ndim != 2:
        raise ShapeError(f"row_softmax expects a 2-D matrix, got {s.shape}")
    m = s.max(axis=1, keepdims=True)
    if not np.isfinite(m).all():
        raise FloatingPointError("row_softmax needs a finite entry in every row")
    e = np.exp(s - m)
    return e / e.sum(axis=1, keepdims=True)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero-norm matrix is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def l1_norm_mean(a) -> float:
    a = np.asarray(a)
    if a.size == 0:
        return 0.0
    return float(np.abs(a).mean(dtype=np.float64))
