"""Scheme-aware KV cache store, step planning and byte accounting.

Schemes:

* ``NonShared``: every agent owns its own key and full value caches.
* ``FullShared``: one key and one full value cache for all agents.
* ``BaseShared``: shared key and base value caches, one LR cache per agent.
* ``BaseLRShared``: shared key, base value and a single LR cache.
* ``SelectiveRecompute``: one shared KV cache whose critical layers are
  recomputed by each agent over context it has not seen, plus a hidden-state
  cache at the input of the first recomputed layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ._container import read_container, write_container

SCHEME_NAMES = ("NonShared", "FullShared", "BaseShared", "BaseLRShared", "SelectiveRecompute")
_ALIASES = {
    "nonshared": "NonShared", "non-shared": "NonShared",
    "fullshared": "FullShared",
    "baseshared": "BaseShared",
    "baselrshared": "BaseLRShared",
    "selectiverecompute": "SelectiveRecompute", "droidspeak": "SelectiveRecompute",
}


class PlanError(RuntimeError):
    """Cache contents disagree with what a step plan requires."""


class OverwriteError(PlanError):
    """A shared row that already exists was written again with different content."""


def default_recompute_layers(n_layers: int, seed: int = 0) -> frozenset:
    """ceil(n_layers / 3) layers drawn with a fixed seed."""
    k = -(-n_layers // 3)
    rng = np.random.default_rng([seed, n_layers, 0x5e1])
    return frozenset(int(i) for i in rng.choice(n_layers, size=k, replace=False))


@dataclass(frozen=True)
class CacheScheme:
    variant: str
    recompute_layers: frozenset = frozenset()
    hidden_cache: bool = True

    def __post_init__(self):
        if self.variant not in SCHEME_NAMES:
            raise ValueError(f"unknown scheme {self.variant!r}; choose from {SCHEME_NAMES}")
        object.__setattr__(self, "recompute_layers", frozenset(int(i) for i in self.recompute_layers))
        if self.variant != "SelectiveRecompute" and self.recompute_layers:
            raise ValueError("recompute_layers only apply to SelectiveRecompute")
        if any(i < 0 for i in self.recompute_layers):
            raise ValueError("recompute layer indices must be non-negative")

    @classmethod
    def parse(cls, text: str, n_layers: int | None = None, seed: int = 0) -> "CacheScheme":
        """Parse ``Name`` or ``SelectiveRecompute:0,3,5``.

        A bare ``SelectiveRecompute`` uses ``default_recompute_layers``.
        """
        name, _, layers = text.partition(":")
        variant = _ALIASES.get(name.strip().lower().replace("_", ""), name.strip())
        if variant != "SelectiveRecompute":
            if layers:
                raise ValueError(f"{variant} takes no layer list")
            return cls(variant)
        if layers.strip():
            chosen = frozenset(int(t) for t in layers.split(","))
        elif n_layers is None:
            raise ValueError("SelectiveRecompute without layers needs n_layers for the default set")
        else:
            chosen = default_recompute_layers(n_layers, seed)
        return cls(variant, chosen)

    @property
    def name(self) -> str:
        if self.variant == "SelectiveRecompute":
            return "SelectiveRecompute:" + ",".join(str(i) for i in sorted(self.recompute_layers))
        return self.variant

    def validate(self, n_layers: int) -> None:
        bad = [i for i in self.recompute_layers if i >= n_layers]
        if bad:
            raise ValueError(f"recompute layers {sorted(bad)} out of range for {n_layers} layers")

    def boundary_layer(self, n_layers: int) -> int:
        """Input layer of the hidden-state cache (first recomputed layer)."""
        return min(self.recompute_layers, default=n_layers)


Range = tuple  # (start, stop), half-open token interval


@dataclass(frozen=True)
class PrefillPlan:
    """Token intervals one step must compute.

    ``hidden_pass_range`` rows get hidden states, ``kv_project_range`` rows get
    key/base-value projections, ``lr_project_range`` rows get LR rows for the
    active agent. For ``SelectiveRecompute`` the layers in
    ``recompute_layers`` use ``recompute_range`` for key/value projection and
    rows older than ``L`` enter the forward pass at ``hidden_skip_layers``.
    """

    hidden_pass_range: Range
    kv_project_range: Range
    lr_project_range: Range
    length_before: int
    recompute_layers: frozenset = frozenset()
    recompute_range: Range | None = None
    hidden_skip_layers: int = 0

    @property
    def new_range(self) -> Range:
        return (self.length_before, self.hidden_pass_range[1])

    def kv_range(self, layer: int) -> Range:
        if layer in self.recompute_layers:
            return self.recompute_range
        return self.kv_project_range

    def lr_range(self, layer: int) -> Range:
        if self.recompute_layers:
            return self.kv_range(layer)
        return self.lr_project_range

    def rows_at(self, layer: int) -> Range:
        """Rows whose hidden state is computed at ``layer``."""
        start, stop = self.hidden_pass_range
        if layer < self.hidden_skip_layers:
            start = max(start, self.length_before)
        return start, stop

    def to_dict(self) -> dict:
        d = {
            "hidden_pass_range": list(self.hidden_pass_range),
            "kv_project_range": list(self.kv_project_range),
            "lr_project_range": list(self.lr_project_range),
        }
        if self.recompute_range is not None:
            d["recompute_range"] = list(self.recompute_range)
            d["hidden_skip_layers"] = self.hidden_skip_layers
        return d


class RowBuffer:
    """Append-mostly row storage; ``view()`` exposes the filled rows."""

    def __init__(self, cols: int, dtype):
        self.cols = cols
        self._data = np.empty((16, cols), dtype=dtype)
        self.n = 0

    @property
    def dtype(self):
        return self._data.dtype

    def view(self) -> np.ndarray:
        return self._data[: self.n]

    @property
    def nbytes(self) -> int:
        return self.n * self.cols * self._data.itemsize

    def _reserve(self, n: int) -> None:
        if n > self._data.shape[0]:
            cap = max(n, 2 * self._data.shape[0])
            grown = np.empty((cap, self.cols), dtype=self._data.dtype)
            grown[: self.n] = self._data[: self.n]
            self._data = grown

    def _check(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=self._data.dtype)
        if rows.ndim != 2 or rows.shape[1] != self.cols:
            raise PlanError(f"row block {rows.shape} does not have {self.cols} columns")
        return rows

    def append(self, start: int, rows, what: str = "cache") -> None:
        """First-writer-wins append: rows below ``n`` must match what is stored."""
        rows = self._check(rows)
        if start > self.n:
            raise PlanError(f"{what}: append at row {start} leaves a gap after row {self.n}")
        overlap = min(self.n - start, rows.shape[0])
        if overlap > 0:
            if not np.array_equal(self._data[start:start + overlap], rows[:overlap]):
                raise OverwriteError(f"{what}: rows [{start}, {start + overlap}) already exist")
            rows = rows[overlap:]
            start += overlap
        self._reserve(start + rows.shape[0])
        self._data[start:start + rows.shape[0]] = rows
        self.n = start + rows.shape[0]

    def write(self, start: int, rows) -> None:
        """Overwrite rows from ``start`` on, extending if needed."""
        rows = self._check(rows)
        if start > self.n:
            raise PlanError(f"write at row {start} leaves a gap after row {self.n}")
        self._reserve(start + rows.shape[0])
        self._data[start:start + rows.shape[0]] = rows
        self.n = max(self.n, start + rows.shape[0])


@dataclass
class LayerCache:
    key: RowBuffer | None = None
    value: RowBuffer | None = None
    value_base: RowBuffer | None = None
    lr: RowBuffer | None = None
    agent_key: dict = field(default_factory=dict)
    agent_value: dict = field(default_factory=dict)
    agent_lr: dict = field(default_factory=dict)

    def buffers(self):
        """(component, owner, buffer) for every populated buffer."""
        for comp, buf in (("key", self.key), ("value", self.value), ("value", self.value_base),
                          ("lr", self.lr)):
            if buf is not None:
                yield comp, None, buf
        for comp, table in (("key", self.agent_key), ("value", self.agent_value), ("lr", self.agent_lr)):
            for agent in sorted(table):
                yield comp, agent, table[agent]


@dataclass(frozen=True)
class CacheBytes:
    key: int
    value: int
    lr: int
    hidden: int

    @property
    def value_path(self) -> int:
        return self.value + self.lr

    @property
    def total(self) -> int:
        return self.key + self.value + self.lr + self.hidden

    def to_dict(self) -> dict:
        return {"key": self.key, "value": self.value, "lr": self.lr, "hidden": self.hidden,
                "value_path": self.value_path, "total": self.total}


class KvStore:
    """Per-layer caches for one trajectory under one scheme.

    Width conventions: key/value rows are ``n_kv_heads * d_head`` wide, LR rows
    are ``rank`` wide (one LR cache per layer, shared by all heads), hidden rows
    are ``d_model`` wide.
    """

    def __init__(self, scheme: CacheScheme, n_layers: int, n_agents: int, d_kv: int, rank: int,
                 d_model: int, dtype=np.float64):
        scheme.validate(n_layers)
        self.scheme = scheme
        self.n_layers = n_layers
        self.n_agents = n_agents
        self.d_kv = d_kv
        self.rank = rank
        self.d_model = d_model
        self.dtype = np.dtype(dtype)
        self.length = 0
        self.tokens = np.zeros(0, dtype=np.int64)
        self.seen_upto: dict = {}
        self.layers = [self._make_layer() for _ in range(n_layers)]
        self.hidden = (RowBuffer(d_model, self.dtype)
                       if scheme.variant == "SelectiveRecompute" and scheme.hidden_cache else None)

    @classmethod
    def for_model(cls, scheme: CacheScheme, cfg, dtype=None) -> "KvStore":
        from .linalg import get_dtype, resolve_dtype
        dt = get_dtype() if dtype is None else resolve_dtype(dtype)
        return cls(scheme, cfg.n_layers, cfg.n_agents, cfg.n_kv_heads * cfg.d_head, cfg.rank,
                   cfg.d_model, dt)

    def _make_layer(self) -> LayerCache:
        v, dkv, dt = self.scheme.variant, self.d_kv, self.dtype
        lc = LayerCache()
        if v != "NonShared":
            lc.key = RowBuffer(dkv, dt)
        if v in ("FullShared", "SelectiveRecompute"):
            lc.value = RowBuffer(dkv, dt)
        if v in ("BaseShared", "BaseLRShared"):
            lc.value_base = RowBuffer(dkv, dt)
        if v == "BaseLRShared":
            lc.lr = RowBuffer(self.rank, dt)
        return lc

    def _agent_buffer(self, table: dict, agent: int, cols: int) -> RowBuffer:
        if agent not in table:
            table[agent] = RowBuffer(cols, self.dtype)
        return table[agent]

    def check_agent(self, agent: int) -> None:
        if not 0 <= agent < self.n_agents:
            raise KeyError(f"unknown agent {agent}; store has {self.n_agents} agents")

    def seen(self, agent: int) -> int:
        return self.seen_upto.get(agent, 0)

    # -- reads ---------------------------------------------------------------
    def keys(self, layer: int, agent: int) -> np.ndarray:
        lc = self.layers[layer]
        if self.scheme.variant == "NonShared":
            return self._agent_buffer(lc.agent_key, agent, self.d_kv).view()
        return lc.key.view()

    def values(self, layer: int, agent: int) -> np.ndarray:
        """Value rows attended over: full values, or the base part for LR schemes."""
        lc = self.layers[layer]
        v = self.scheme.variant
        if v == "NonShared":
            return self._agent_buffer(lc.agent_value, agent, self.d_kv).view()
        if v in ("BaseShared", "BaseLRShared"):
            return lc.value_base.view()
        return lc.value.view()

    def lr_rows(self, layer: int, agent: int) -> np.ndarray:
        """LR rows attended over; width 0 when the scheme stores full values."""
        lc = self.layers[layer]
        v = self.scheme.variant
        if v == "BaseShared":
            return self._agent_buffer(lc.agent_lr, agent, self.rank).view()
        if v == "BaseLRShared":
            return lc.lr.view()
        return np.zeros((self.rows_for(layer, agent), 0), dtype=self.dtype)

    def rows_for(self, layer: int, agent: int) -> int:
        return self.keys(layer, agent).shape[0]

    # -- writes --------------------------------------------------------------
    def append(self, layer: int, agent: int, start: int, *, key=None, value=None,
               value_base=None, lr=None) -> None:
        """Write one step's projected rows for ``layer``.

        Shared rows follow first-writer-wins: re-sending identical rows is a
        no-op, different content raises ``OverwriteError``.
        """
        self.check_agent(agent)
        lc = self.layers[layer]
        v = self.scheme.variant
        if key is not None:
            buf = self._agent_buffer(lc.agent_key, agent, self.d_kv) if v == "NonShared" else lc.key
            buf.append(start, key, f"layer {layer} key")
        if value is not None:
            if v == "NonShared":
                buf = self._agent_buffer(lc.agent_value, agent, self.d_kv)
            elif lc.value is not None:
                buf = lc.value
            else:
                raise PlanError(f"{v} stores base values, not full values")
            buf.append(start, value, f"layer {layer} value")
        if value_base is not None:
            if lc.value_base is None:
                raise PlanError(f"{v} has no base value cache")
            lc.value_base.append(start, value_base, f"layer {layer} base value")
        if lr is not None:
            if v == "BaseShared":
                buf = self._agent_buffer(lc.agent_lr, agent, self.rank)
            elif v == "BaseLRShared":
                buf = lc.lr
            else:
                raise PlanError(f"{v} has no LR cache")
            buf.append(start, lr, f"layer {layer} LR")

    def recompute(self, layer: int, start: int, key, value) -> None:
        """Overwrite shared key/value rows of a recomputed layer (SelectiveRecompute)."""
        if layer not in self.scheme.recompute_layers:
            raise PlanError(f"layer {layer} is not a recompute layer")
        lc = self.layers[layer]
        lc.key.write(start, key)
        lc.value.write(start, value)

    def append_hidden(self, start: int, rows) -> None:
        if self.hidden is None:
            raise PlanError("scheme keeps no hidden-state cache")
        self.hidden.append(start, rows, "hidden cache")

    def commit(self, agent: int, tokens) -> None:
        """Close a step: extend the trajectory and mark ``agent`` as up to date."""
        tokens = np.asarray(tokens, dtype=np.int64).ravel()
        self.tokens = np.concatenate([self.tokens, tokens])
        self.length += tokens.shape[0]
        self.seen_upto[agent] = self.length
        self.check_invariants()

    def check_invariants(self) -> None:
        L = self.length
        for li, lc in enumerate(self.layers):
            for comp, owner, buf in lc.buffers():
                expect = L if owner is None else self.seen_upto.get(owner, 0)
                if buf.n != expect:
                    raise PlanError(f"layer {li} {comp} (agent {owner}) has {buf.n} rows, expected {expect}")
        if self.hidden is not None and self.hidden.n != L:
            raise PlanError(f"hidden cache has {self.hidden.n} rows, expected {L}")
        for agent, s in self.seen_upto.items():
            if s > L:
                raise PlanError(f"agent {agent} seen_upto {s} exceeds length {L}")

    # -- snapshots -----------------------------------------------------------
    def save(self, path) -> None:
        tensors = {}
        for li, lc in enumerate(self.layers):
            for name, buf in (("key", lc.key), ("value", lc.value), ("value_base", lc.value_base),
                              ("lr", lc.lr)):
                if buf is not None:
                    tensors[f"layer{li}/{name}"] = buf.view()
            for name, table in (("key", lc.agent_key), ("value", lc.agent_value), ("lr", lc.agent_lr)):
                for agent in sorted(table):
                    tensors[f"layer{li}/agent{agent}/{name}"] = table[agent].view()
        if self.hidden is not None:
            tensors["hidden"] = self.hidden.view()
        tensors["tokens"] = self.tokens
        header = {
            "format": "lrshare-kv-snapshot", "version": 1,
            "scheme": self.scheme.name, "hidden_cache": self.scheme.hidden_cache,
            "n_layers": self.n_layers, "n_agents": self.n_agents, "d_kv": self.d_kv,
            "rank": self.rank, "d_model": self.d_model, "dtype": self.dtype.name,
            "length": self.length,
            "seen_upto": {str(a): s for a, s in sorted(self.seen_upto.items())},
        }
        write_container(path, header, tensors)

    @classmethod
    def load(cls, path) -> "KvStore":
        header, tensors = read_container(path)
        if header.get("format") != "lrshare-kv-snapshot":
            raise ValueError(f"{path}: not a KV snapshot")
        scheme = CacheScheme.parse(header["scheme"])
        if not header["hidden_cache"]:
            scheme = CacheScheme(scheme.variant, scheme.recompute_layers, False)
        store = cls(scheme, header["n_layers"], header["n_agents"], header["d_kv"], header["rank"],
                    header["d_model"], header["dtype"])
        store.length = header["length"]
        store.seen_upto = {int(a): s for a, s in header["seen_upto"].items()}
        store.tokens = tensors.pop("tokens").astype(np.int64)
        for name, arr in tensors.items():
            if name == "hidden":
                store.hidden.write(0, arr)
                continue
            parts = name.split("/")
            lc = store.layers[int(parts[0][5:])]
            if len(parts) == 2:
                buf = getattr(lc, parts[1])
            else:
                agent = int(parts[1][5:])
                table = {"key": lc.agent_key, "value": lc.agent_value, "lr": lc.agent_lr}[parts[2]]
                cols = store.rank if parts[2] == "lr" else store.d_kv
                buf = store._agent_buffer(table, agent, cols)
            buf.write(0, arr)
        store.check_invariants()
        return store


def plan_step(store: KvStore, scheme: CacheScheme, agent: int, new_tokens: int) -> PrefillPlan:
    """Decide which rows a step for ``agent`` appending ``new_tokens`` must compute."""
    if scheme != store.scheme:
        raise PlanError(f"store was built for {store.scheme.name}, not {scheme.name}")
    store.check_agent(agent)
    if new_tokens < 0:
        raise ValueError("new_tokens must be >= 0")
    L = store.length
    end = L + new_tokens
    new = (L, end)
    unseen = (store.seen(agent), end)
    v = scheme.variant
    if v == "NonShared":
        return PrefillPlan(unseen, unseen, unseen, L)
    if v in ("FullShared", "BaseLRShared"):
        return PrefillPlan(new, new, new, L)
    if v == "BaseShared":
        return PrefillPlan(unseen, new, unseen, L)
    skip = scheme.boundary_layer(store.n_layers) if scheme.hidden_cache else 0
    return PrefillPlan(unseen, new, new, L, scheme.recompute_layers, unseen, skip)


def cache_bytes(store: KvStore) -> CacheBytes:
    """Exact bytes held by the store, by component."""
    totals = {"key": 0, "value": 0, "lr": 0}
    for lc in store.layers:
        for comp, _, buf in lc.buffers():
            totals[comp] += buf.nbytes
    hidden = store.hidden.nbytes if store.hidden is not None else 0
    return CacheBytes(totals["key"], totals["value"], totals["lr"], hidden)


def value_path_ratio(variant: str, n_agents: int, rank: int, d_out: int) -> Fraction:
    """Value-path bytes relative to NonShared when every agent has seen the whole trajectory."""
    n = Fraction(1, n_agents)
    if variant == "NonShared":
        return Fraction(1)
    if variant in ("FullShared", "SelectiveRecompute"):
        return n
    if variant == "BaseShared":
        return n + Fraction(rank, d_out)
    if variant == "BaseLRShared":
        return n + Fraction(rank, n_agents * d_out)
    raise ValueError(f"unknown scheme {variant!r}")


def key_ratio(variant: str, n_agents: int) -> Fraction:
    return Fraction(1) if variant == "NonShared" else Fraction(1, n_agents)
