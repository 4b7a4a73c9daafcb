"""Causal attention over a base value cache plus a low-rank value cache.

``naive_attention`` expands the LR cache to full width and applies a dense
softmax; it is the reference. ``flash_lora_attention`` streams key/value
blocks with an online softmax and keeps a rank-r accumulator per query block,
applying the up-projection once after the key loop. ``expand_first_attention``
is the blocked kernel without that reordering, kept as a counted baseline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import FlopCounter, ShapeError, _mm, get_dtype, row_softmax, row_sum


@dataclass(frozen=True)
class BlockConfig:
    b_r: int = 64
    b_c: int = 64
    # Skip key blocks that are masked for every row of the query block.
    skip_masked: bool = True

    def __post_init__(self):
        if self.b_r < 1 or self.b_c < 1:
            raise ValueError(f"block sizes must be >= 1, got b_r={self.b_r}, b_c={self.b_c}")


@dataclass(frozen=True)
class AttentionInputs:
    """One head's attention problem.

    Query row ``i`` sits at absolute position ``query_offset + i`` and may
    attend to key positions ``<= query_offset + i``. ``query_offset`` defaults
    to ``L - L_c`` (queries are the last rows of the sequence).
    """

    q: np.ndarray
    k: np.ndarray
    v_base: np.ndarray
    v_lr: np.ndarray
    b_up: np.ndarray
    query_offset: int | None = None
    scale: float = 1.0

    def __post_init__(self):
        q, k, vb, vl, b = (np.asarray(x) for x in (self.q, self.k, self.v_base, self.v_lr, self.b_up))
        if any(x.ndim != 2 for x in (q, k, vb, vl, b)):
            raise ShapeError("attention inputs must all be 2-D")
        lc, d = q.shape
        L = k.shape[0]
        if k.shape[1] != d or vb.shape != (L, d):
            raise ShapeError(f"q {q.shape}, k {k.shape}, v_base {vb.shape} disagree on L or d_head")
        if vl.shape[0] != L:
            raise ShapeError(f"v_lr has {vl.shape[0]} rows, expected {L}")
        if b.shape != (vl.shape[1], d):
            raise ShapeError(f"b_up {b.shape} does not map rank {vl.shape[1]} to d_head {d}")
        offset = L - lc if self.query_offset is None else int(self.query_offset)
        if offset < 0 or offset + lc > L:
            raise ShapeError(f"query_offset {offset} with {lc} queries needs at least {offset + lc} keys, got {L}")
        if lc == 0 or d == 0:
            raise ShapeError("attention needs at least one query and a non-empty head")
        object.__setattr__(self, "query_offset", offset)

    @property
    def rank(self) -> int:
        return self.v_lr.shape[1]


def _scaled_b(inp: AttentionInputs) -> np.ndarray:
    b = np.asarray(inp.b_up)
    return b * b.dtype.type(inp.scale)


def _causal_mask(n_rows: int, n_cols: int, row_pos0: int, col_pos0: int) -> np.ndarray:
    rows = np.arange(row_pos0, row_pos0 + n_rows)[:, None]
    cols = np.arange(col_pos0, col_pos0 + n_cols)[None, :]
    return cols > rows


def naive_attention(inp: AttentionInputs, counter: FlopCounter | None = None) -> np.ndarray:
    """``softmax(mask(Q K^T / sqrt(d))) (V_base + s V_lr B)`` computed densely."""
    q, k = np.asarray(inp.q), np.asarray(inp.k)
    lc, d = q.shape
    L = k.shape[0]
    s = _mm(q, np.ascontiguousarray(k.T), counter, "attn_qk") * q.dtype.type(1.0 / math.sqrt(d))
    s[_causal_mask(lc, L, inp.query_offset, 0)] = -np.inf
    p = row_softmax(s)
    v = np.asarray(inp.v_base) + _mm(np.asarray(inp.v_lr), _scaled_b(inp), counter, "attn_lr")
    return _mm(p, v, counter, "attn_pv")


def _blocked(inp: AttentionInputs, cfg: BlockConfig, counter, reorder: bool) -> np.ndarray:
    q = np.asarray(inp.q)
    k = np.asarray(inp.k)
    v_base = np.asarray(inp.v_base)
    v_lr = np.asarray(inp.v_lr)
    lc, d = q.shape
    L = k.shape[0]
    r = v_lr.shape[1]
    dt = q.dtype.type
    qk_scale = dt(1.0 / math.sqrt(d))
    b_s = _scaled_b(inp)
    offset = inp.query_offset
    kt = np.ascontiguousarray(k.T)

    v_exp = None
    if not reorder:
        # materialise s * V_lr B for every cached row before attending
        v_exp = _mm(v_lr, b_s, counter, "attn_lr")

    out = np.empty((lc, d), dtype=q.dtype)
    for i0 in range(0, lc, cfg.b_r):
        i1 = min(i0 + cfg.b_r, lc)
        qi = q[i0:i1]
        n = i1 - i0
        first_pos, last_pos = offset + i0, offset + i1 - 1
        o = np.zeros((n, d), dtype=q.dtype)
        o_lr = np.zeros((n, r), dtype=q.dtype)
        m = np.full(n, -np.inf, dtype=q.dtype)
        ell = np.zeros(n, dtype=q.dtype)
        for j0 in range(0, L, cfg.b_c):
            if cfg.skip_masked and j0 > last_pos:
                break
            j1 = min(j0 + cfg.b_c, L)
            s = _mm(qi, kt[:, j0:j1], counter, "attn_qk") * qk_scale
            if j1 - 1 > first_pos:
                s[_causal_mask(n, j1 - j0, first_pos, j0)] = -np.inf
            # block 0 always holds position 0, so m is finite from the first block on
            m_new = np.maximum(m, s.max(axis=1))
            alpha = np.exp(m - m_new)
            p = np.exp(s - m_new[:, None])
            ell = alpha * ell + row_sum(p)
            o = alpha[:, None] * o + _mm(p, v_base[j0:j1], counter, "attn_pv")
            if reorder:
                o_lr = alpha[:, None] * o_lr + _mm(p, v_lr[j0:j1], counter, "attn_lr")
            else:
                o = o + _mm(p, v_exp[j0:j1], counter, "attn_lr")
            m = m_new
        if reorder:
            o = o + _mm(o_lr, b_s, counter, "attn_lr")
        out[i0:i1] = o / ell[:, None]
    return out


def flash_lora_attention(inp: AttentionInputs, cfg: BlockConfig = BlockConfig(),
                         counter: FlopCounter | None = None) -> np.ndarray:
    """Blocked attention with a rank-r accumulator; never forms ``V_lr B`` over L rows.

    Output rows are independent of how queries are chunked into calls or
    blocks: key blocks are aligned to absolute position 0 and masked keys add
    exact zeros.
    """
    return _blocked(inp, cfg, counter, reorder=True)


def expand_first_attention(inp: AttentionInputs, cfg: BlockConfig = BlockConfig(),
                           counter: FlopCounter | None = None) -> np.ndarray:
    return _blocked(inp, cfg, counter, reorder=False)


KERNELS = {"reorder": flash_lora_attention, "expand_first": expand_first_attention}


def gqa_attention(q, k, v_base, v_lr, b_up, n_q_heads: int, n_kv_heads: int,
                  query_offset: int | None = None, scale: float = 1.0,
                  cfg: BlockConfig = BlockConfig(), counter: FlopCounter | None = None,
                  kernel: str = "reorder") -> np.ndarray:
    """Multi-head attention where query head ``h`` reads kv head ``h // (n_q / n_kv)``.

    ``q`` is ``L_c x (n_q*d_head)``; ``k`` and ``v_base`` are ``L x (n_kv*d_head)``;
    ``v_lr`` (``L x r``) is shared by all heads and ``b_up`` (``r x n_kv*d_head``)
    is sliced per kv head.
    """
    if n_q_heads < 1 or n_kv_heads < 1 or n_q_heads % n_kv_heads:
        raise ValueError(f"n_q_heads={n_q_heads} is not a multiple of n_kv_heads={n_kv_heads}")
    q = np.asarray(q)
    k = np.asarray(k)
    d_head, rem = divmod(q.shape[1], n_q_heads)
    if rem or k.shape[1] != n_kv_heads * d_head:
        raise ShapeError(f"q {q.shape} / k {k.shape} do not split into {n_q_heads}/{n_kv_heads} heads")
    group = n_q_heads // n_kv_heads
    fn = KERNELS[kernel]
    out = np.empty_like(q)
    for h in range(n_q_heads):
        kv = h // group
        qs = slice(h * d_head, (h + 1) * d_head)
        ks = slice(kv * d_head, (kv + 1) * d_head)
        inp = AttentionInputs(q[:, qs], k[:, ks], np.asarray(v_base)[:, ks], v_lr,
                              np.asarray(b_up)[:, ks], query_offset, scale)
        out[:, qs] = fn(inp, cfg, counter)
    return out


def lr_mac_counts(L: int, L_c: int, r: int, d_head: int) -> tuple[int, int]:
    """MACs of the LR value path: ``(expand-first, reordered)``.

    expand-first: ``L r d_head + L_c L d_head``; reordered: ``L_c L r + L_c r d_head``.
    """
    for name, v in (("L", L), ("L_c", L_c), ("r", r), ("d_head", d_head)):
        if v < 0:
            raise ValueError(f"{name} must be non-negative, got {v}")
    return L * r * d_head + L_c * L * d_head, L_c * L * r + L_c * r * d_head


def processed_pairs(L: int, L_c: int, query_offset: int, cfg: BlockConfig) -> int:
    """Query-key pairs the blocked kernels score, after block skipping."""
    if not cfg.skip_masked:
        return L_c * L
    total = 0
    for i0 in range(0, L_c, cfg.b_r):
        i1 = min(i0 + cfg.b_r, L_c)
        last_pos = query_offset + i1 - 1
        cols = min(L, (last_pos // cfg.b_c + 1) * cfg.b_c)
        total += (i1 - i0) * cols
    return total


def kernel_mac_counts(L: int, L_c: int, r: int, d_head: int, query_offset: int,
                      cfg: BlockConfig) -> dict:
    """Exact per-category MACs of one head through either blocked kernel."""
    pairs = processed_pairs(L, L_c, query_offset, cfg)
    return {
        "attn_qk": pairs * d_head,
        "attn_pv": pairs * d_head,
        "attn_lr_reorder": pairs * r + L_c * r * d_head,
        "attn_lr_expand_first": L * r * d_head + pairs * d_head,
    }


@dataclass
class FuzzReport:
    dtype: str
    iterations: int
    seed: int
    tolerance: float
    max_rel_error: float
    mean_rel_error: float
    failures: int

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def to_dict(self) -> dict:
        return {**self.__dict__, "passed": self.passed}


FUZZ_TOLERANCE = {"float64": 1e-10, "float32": 1e-4}
FUZZ_BLOCKS = (1, 3, 8, 64)
FUZZ_RANKS = (0, 1, 2, 8)
FUZZ_HEAD_DIMS = (4, 16, 64)


def random_inputs(rng: np.random.Generator, dtype, max_len: int = 64) -> AttentionInputs:
    """Random head-wise inputs over the fuzz domain; score temperature spans
    mild to near-underflow ranges."""
    L = int(rng.integers(1, max_len + 1))
    lc = int(rng.integers(1, L + 1))
    offset = int(rng.integers(0, L - lc + 1))
    r = int(rng.choice(FUZZ_RANKS))
    d = int(rng.choice(FUZZ_HEAD_DIMS))
    temp = float(rng.choice([1.0, 4.0, 30.0]))
    g = lambda *shape: rng.standard_normal(shape).astype(dtype)
    return AttentionInputs(g(lc, d) * dtype(temp), g(L, d), g(L, d), g(L, r), g(r, d),
                           query_offset=offset, scale=float(rng.choice([0.5, 2.0])))


def relative_error(got: np.ndarray, ref: np.ndarray) -> float:
    """Max-norm error normalised by the max-norm of the reference."""
    ref = np.asarray(ref, dtype=np.float64)
    denom = max(float(np.abs(ref).max()), np.finfo(np.float64).tiny)
    return float(np.abs(np.asarray(got, dtype=np.float64) - ref).max() / denom)


def fuzz_against_naive(iterations: int, seed: int = 0, dtype=None) -> FuzzReport:
    """Compare the blocked kernel with the naive reference on random problems.

    Inputs are generated in the working precision; the reference always runs
    in float64 on the same (upcast) inputs.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    dt = np.dtype(dtype) if dtype is not None else get_dtype()
    tol = FUZZ_TOLERANCE[dt.name]
    rng = np.random.default_rng(seed)
    errs = []
    failures = 0
    for _ in range(iterations):
        inp = random_inputs(rng, dt.type)
        cfg = BlockConfig(int(rng.choice(FUZZ_BLOCKS)), int(rng.choice(FUZZ_BLOCKS)),
                          skip_masked=bool(rng.integers(0, 2)))
        got = flash_lora_attention(inp, cfg)
        ref_inp = AttentionInputs(*(np.asarray(x, dtype=np.float64) for x in
                                    (inp.q, inp.k, inp.v_base, inp.v_lr, inp.b_up)),
                                  query_offset=inp.query_offset, scale=inp.scale)
        err = relative_error(got, naive_attention(ref_inp))
        errs.append(err)
        failures += not err <= tol
    return FuzzReport(dt.name, iterations, seed, tol, max(errs), float(np.mean(errs)), failures)
