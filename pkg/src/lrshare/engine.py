"""Toy decoder-only transformer executing steps under a cache-sharing scheme.

Each layer is pre-norm attention followed by a pre-norm two-matmul MLP.
Query and value projections carry per-agent LoRA adapters. Every matmul
charges its MACs to exactly one ``FlopCounter`` category; softmax,
normalisation and nonlinearities are not counted.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from ._container import read_container, write_container
from .attention import BlockConfig, gqa_attention
from .kvcache import CacheScheme, KvStore, PlanError, PrefillPlan, plan_step
from .linalg import FlopCounter, get_dtype, matmul, resolve_dtype, row_sum
from .lora import LoraAdapter, MultiLoraSet, down_project, expand_lr, forward_decomposed

RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 32
    n_q_heads: int = 4
    n_kv_heads: int = 2
    d_head: int = 8
    d_mlp: int = 64
    n_agents: int = 3
    rank: int = 4
    rope: bool = True
    vocab: int = 64
    seed: int = 0
    lora_alpha: float = 8.0
    shared_a: bool = True
    lora_b_std: float = 0.05
    rope_theta: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_q_heads", "n_kv_heads", "d_head", "d_mlp",
                     "n_agents", "vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.rank < 0:
            raise ValueError("rank must be >= 0")
        if self.d_model != self.n_q_heads * self.d_head:
            raise ValueError(f"d_model={self.d_model} != n_q_heads*d_head={self.n_q_heads * self.d_head}")
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError(f"n_q_heads={self.n_q_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.rank > min(self.d_model, self.d_kv):
            raise ValueError(f"rank {self.rank} exceeds min(d_model, d_kv)={min(self.d_model, self.d_kv)}")
        if self.rope and self.d_head % 2:
            raise ValueError("rotary embedding needs an even d_head")
        if not self.lora_alpha > 0:
            raise ValueError("lora_alpha must be positive")

    @property
    def d_kv(self) -> int:
        return self.n_kv_heads * self.d_head

    @property
    def group_size(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class LayerWeights:
    q: MultiLoraSet
    k: np.ndarray
    v: MultiLoraSet
    o: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    embed: np.ndarray
    layers: tuple
    unembed: np.ndarray

    @property
    def dtype(self) -> np.dtype:
        return self.embed.dtype


def _adapters(rng, cfg: ModelConfig, d_out: int, dt) -> tuple:
    d_in, r = cfg.d_model, cfg.rank
    shared = (rng.standard_normal((d_in, r)) / np.sqrt(d_in)).astype(dt)
    out = []
    for _ in range(cfg.n_agents):
        a = shared.copy() if cfg.shared_a else (rng.standard_normal((d_in, r)) / np.sqrt(d_in)).astype(dt)
        b = (rng.standard_normal((r, d_out)) * cfg.lora_b_std).astype(dt)
        out.append(LoraAdapter(a, b, cfg.lora_alpha))
    return tuple(out)


def build_model(cfg: ModelConfig, dtype=None) -> Model:
    """Deterministic weights from ``cfg.seed``: Gaussian scaled by 1/sqrt(fan_in)."""
    dt = resolve_dtype(dtype) if dtype is not None else get_dtype()
    rng = np.random.default_rng(cfg.seed)

    def w(d_in, d_out):
        return (rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)).astype(dt)

    layers = []
    for _ in range(cfg.n_layers):
        wq, wk, wv, wo = w(cfg.d_model, cfg.d_model), w(cfg.d_model, cfg.d_kv), w(cfg.d_model, cfg.d_kv), \
            w(cfg.d_model, cfg.d_model)
        w1, w2 = w(cfg.d_model, cfg.d_mlp), w(cfg.d_mlp, cfg.d_model)
        q_set = MultiLoraSet(wq, _adapters(rng, cfg, cfg.d_model, dt), cfg.shared_a)
        v_set = MultiLoraSet(wv, _adapters(rng, cfg, cfg.d_kv, dt), cfg.shared_a)
        layers.append(LayerWeights(q_set, wk, v_set, wo, w1, w2))
    embed = rng.standard_normal((cfg.vocab, cfg.d_model)).astype(dt)
    unembed = w(cfg.d_model, cfg.vocab)
    return Model(cfg, embed, tuple(layers), unembed)


def with_zero_adapters(model: Model) -> Model:
    """Same base weights with every A and B zeroed."""
    def zero(lset):
        ads = tuple(LoraAdapter(np.zeros_like(a.a), np.zeros_like(a.b), a.alpha) for a in lset.adapters)
        return MultiLoraSet(lset.base_weight, ads, lset.shared_a)
    layers = tuple(LayerWeights(zero(l.q), l.k, zero(l.v), l.o, l.w1, l.w2) for l in model.layers)
    return Model(model.config, model.embed, layers, model.unembed)


def save_model(model: Model, path) -> None:
    tensors = {"embed": model.embed, "unembed": model.unembed}
    for i, lw in enumerate(model.layers):
        tensors.update({f"layer{i}/wq": lw.q.base_weight, f"layer{i}/wk": lw.k,
                        f"layer{i}/wv": lw.v.base_weight, f"layer{i}/wo": lw.o,
                        f"layer{i}/w1": lw.w1, f"layer{i}/w2": lw.w2})
        for name, lset in (("q", lw.q), ("v", lw.v)):
            for a, ad in enumerate(lset.adapters):
                tensors[f"layer{i}/{name}_a{a}"] = ad.a
                tensors[f"layer{i}/{name}_b{a}"] = ad.b
    header = {"format": "lrshare-model", "version": 1, "config": model.config.to_dict(),
              "dtype": model.dtype.name}
    write_container(path, header, tensors)


def load_model(path) -> Model:
    header, t = read_container(path)
    if header.get("format") != "lrshare-model":
        raise ValueError(f"{path}: not a model file")
    cfg = ModelConfig.from_dict(header["config"])
    layers = []
    for i in range(cfg.n_layers):
        sets = {}
        for name in ("q", "v"):
            ads = tuple(LoraAdapter(t[f"layer{i}/{name}_a{a}"], t[f"layer{i}/{name}_b{a}"], cfg.lora_alpha)
                        for a in range(cfg.n_agents))
            sets[name] = MultiLoraSet(t[f"layer{i}/w{name}"], ads, cfg.shared_a)
        layers.append(LayerWeights(sets["q"], t[f"layer{i}/wk"], sets["v"], t[f"layer{i}/wo"],
                                   t[f"layer{i}/w1"], t[f"layer{i}/w2"]))
    return Model(cfg, t["embed"], tuple(layers), t["unembed"])


def new_store(model: Model, scheme: CacheScheme) -> KvStore:
    cfg = model.config
    return KvStore(scheme, cfg.n_layers, cfg.n_agents, cfg.d_kv, cfg.rank, cfg.d_model, model.dtype)


def rms_norm(x: np.ndarray) -> np.ndarray:
    ms = row_sum(x * x) / x.dtype.type(x.shape[1])
    return x / np.sqrt(ms + x.dtype.type(RMS_EPS))[:, None]


def silu(x: np.ndarray) -> np.ndarray:
    return x / (x.dtype.type(1) + np.exp(-x))


def apply_rope(x: np.ndarray, start: int, n_heads: int, d_head: int, theta: float) -> np.ndarray:
    """Rotate each head's halves by position-dependent angles (positions start..)."""
    n = x.shape[0]
    half = d_head // 2
    inv = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / d_head)
    ang = np.arange(start, start + n, dtype=np.float64)[:, None] * inv[None, :]
    cos = np.cos(ang).astype(x.dtype)[:, None, :]
    sin = np.sin(ang).astype(x.dtype)[:, None, :]
    xh = x.reshape(n, n_heads, d_head)
    x1, x2 = xh[..., :half], xh[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1).reshape(n, n_heads * d_head)


class StepResult(NamedTuple):
    logits: np.ndarray
    store: KvStore
    delta: FlopCounter
    plan: PrefillPlan


MODES = ("prefill", "decode")


def step(model: Model, store: KvStore, scheme: CacheScheme, agent: int, tokens, mode: str = "prefill",
         *, blocks: BlockConfig = BlockConfig(), kernel: str = "reorder",
         counter: FlopCounter | None = None, recorder: dict | None = None) -> StepResult:
    """Run one prefill chunk or one decode token for ``agent``.

    Computes exactly the rows ``plan_step`` asks for, writes them to ``store``
    and returns logits for the appended tokens. ``recorder`` (layer ->
    list of (first_row, normed_rows)) captures projection inputs.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    tokens = np.asarray(tokens, dtype=np.int64).ravel()
    if mode == "decode" and tokens.shape[0] != 1:
        raise ValueError("decode steps append exactly one token")
    cfg = model.config
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ValueError("token id out of vocabulary")
    if store.dtype != model.dtype:
        raise PlanError(f"store dtype {store.dtype} != model dtype {model.dtype}")
    counter = counter if counter is not None else FlopCounter()
    before = counter.copy()
    plan = plan_step(store, scheme, agent, tokens.shape[0])
    L = plan.length_before
    stop = plan.hidden_pass_range[1]
    all_tokens = np.concatenate([store.tokens, tokens])
    boundary = scheme.boundary_layer(cfg.n_layers) if store.hidden is not None else None

    x_start = plan.rows_at(0)[0]
    x = model.embed[all_tokens[x_start:stop]]
    for li, lw in enumerate(model.layers):
        r0 = plan.rows_at(li)[0]
        if r0 < x_start:
            # old rows resume from the hidden-state cache
            x = np.concatenate([store.hidden.view()[r0:x_start], x])
            x_start = r0
        if li == boundary:
            store.append_hidden(L, x[L - x_start:])
        if x.shape[0] == 0:
            continue
        x = _layer(model, lw, li, store, scheme, plan, agent, x, x_start, stop, blocks, kernel,
                   counter, recorder)
        counter.hidden_token_passes += x.shape[0]
    if boundary == cfg.n_layers:
        store.append_hidden(L, x[L - x_start:])

    new_rows = x[L - x_start:] if x.shape[0] else x
    logits = matmul(rms_norm(new_rows), model.unembed, counter, "lm_head")
    store.commit(agent, tokens)
    return StepResult(logits, store, counter - before, plan)


def _layer(model, lw: LayerWeights, li, store, scheme, plan, agent, x, x_start, stop, blocks, kernel,
           counter, recorder):
    cfg = model.config
    v = scheme.variant
    h = rms_norm(x)
    if recorder is not None:
        recorder.setdefault(li, []).append((x_start, h))

    q = forward_decomposed(lw.q, agent, h, counter)[2]
    kv0 = plan.kv_range(li)[0]
    hk = h[kv0 - x_start:]
    k = matmul(hk, lw.k, counter, "qkv_proj")
    if cfg.rope:
        k = apply_rope(k, kv0, cfg.n_kv_heads, cfg.d_head, cfg.rope_theta)
        q = apply_rope(q, x_start, cfg.n_q_heads, cfg.d_head, cfg.rope_theta)

    ad = lw.v.adapter(agent)
    if v in ("BaseShared", "BaseLRShared"):
        base = matmul(hk, lw.v.base_weight, counter, "qkv_proj")
        lr0 = plan.lr_range(li)[0]
        lr = down_project(h[lr0 - x_start:], ad, counter)
        if v == "BaseShared":
            store.append(li, agent, kv0, key=k, value_base=base)
            store.append(li, agent, lr0, lr=lr)
        else:
            store.append(li, agent, kv0, key=k, value_base=base, lr=lr)
        b_up, scale = ad.b, ad.scale
    else:
        full = forward_decomposed(lw.v, agent, hk, counter)[2]
        if li in plan.recompute_layers:
            store.recompute(li, kv0, k, full)
        else:
            store.append(li, agent, kv0, key=k, value=full)
        b_up, scale = np.zeros((0, cfg.d_kv), dtype=model.dtype), 1.0

    attn = gqa_attention(q, store.keys(li, agent), store.values(li, agent), store.lr_rows(li, agent),
                         b_up, cfg.n_q_heads, cfg.n_kv_heads, query_offset=x_start, scale=scale,
                         cfg=blocks, counter=counter, kernel=kernel)
    x = x + matmul(attn, lw.o, counter, "out_proj")
    hidden = silu(matmul(rms_norm(x), lw.w1, counter, "mlp"))
    return x + matmul(hidden, lw.w2, counter, "mlp")


@dataclass
class OracleRun:
    """Each agent replaying the whole trajectory alone (NonShared semantics)."""

    model: Model
    stores: dict = field(default_factory=dict)
    logits: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)

    def projection_inputs(self, agent: int, layer: int) -> np.ndarray:
        """Normed hidden rows feeding the q/k/v projections, in token order."""
        chunks = sorted(self.inputs[agent][layer], key=lambda c: c[0])
        return np.concatenate([c[1] for c in chunks]) if chunks else np.zeros((0, self.model.config.d_model))

    def value_parts(self, agent: int, layer: int):
        """``(value_base, lr, full_value)`` of ``agent``'s own cache at ``layer``."""
        h = self.projection_inputs(agent, layer)
        lset = self.model.layers[layer].v
        base = matmul(h, lset.base_weight)
        lr = down_project(h, lset.adapter(agent))
        full = self.stores[agent].values(layer, agent)
        return base, lr, full


def oracle_run(model: Model, trace, seed: int = 0, blocks: BlockConfig = BlockConfig(),
               kernel: str = "reorder", agents=None) -> OracleRun:
    """Every agent processes every token of ``trace`` itself, chunked exactly like the trace."""
    from .traces import schedule

    nonshared = CacheScheme("NonShared")
    chunks = schedule(trace, seed, model.config.vocab)
    run = OracleRun(model)
    for a in (range(model.config.n_agents) if agents is None else agents):
        store = new_store(model, nonshared)
        rec: dict = {}
        run.logits[a] = [step(model, store, nonshared, a, c.tokens, c.mode, blocks=blocks, kernel=kernel,
                              recorder=rec).logits for c in chunks]
        run.stores[a] = store
        run.inputs[a] = rec
    return run
