"""Cross-agent cache similarity and the base-versus-full cosine bound."""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .kvcache import CacheScheme
from .linalg import cosine_similarity, l1_norm_mean, matmul
from .lora import down_project, expand_lr

# Values measured on trained 8B checkpoints, carried in reports for contrast only.
REPORTED_REFERENCE = {
    "source": "published measurements on 8B instruction-tuned models; annotation only, never asserted",
    "value_cache_cosine": {
        "LLaMA-3.1-8B-Instruct": {"full": 0.9576, "base": 0.9726, "adapter": 0.0538},
        "Ministral-8B-Instruct": {"full": 0.9200, "base": 0.9530, "adapter": 0.0225},
    },
    "key_cache_cosine": {"LLaMA-3.1-8B-Instruct": 0.9922, "Ministral-8B-Instruct": 0.9840},
    "lr_cache_cosine_shared_a": {
        "LLaMA-3.1-8B-Instruct": {"plan-action": 0.9486, "action-reflect": 0.9634, "reflect-plan": 0.9607},
        "Ministral-8B-Instruct": {"plan-action": 0.9473, "action-reflect": 0.9526, "reflect-plan": 0.9498},
    },
    "base_over_adapter_l1": {"LLaMA-3.1-8B-Instruct": 27.3, "Ministral-8B-Instruct": 14.77},
}

COSINE_FIELDS = ("cos_base", "cos_full", "cos_adapter", "cos_key", "cos_lr")


def _cos(a, b):
    """Cosine, or None when either side is identically zero."""
    if not np.any(a) or not np.any(b):
        return None
    return cosine_similarity(a, b)


def pair_similarity(h_i, h_j, layer, agent_i: int, agent_j: int, rope=None) -> dict:
    """Similarity of two agents' caches given their projection inputs at one layer.

    ``layer`` is an engine ``LayerWeights``; ``rope`` optionally maps key rows
    to their rotated form.
    """
    h_i, h_j = np.asarray(h_i), np.asarray(h_j)
    if h_i.shape != h_j.shape:
        raise ValueError(f"hidden blocks differ in shape: {h_i.shape} vs {h_j.shape}")
    parts = []
    for h, a in ((h_i, agent_i), (h_j, agent_j)):
        ad = layer.v.adapter(a)
        base = matmul(h, layer.v.base_weight)
        lr = down_project(h, ad)
        delta = expand_lr(lr, ad)
        key = matmul(h, layer.k)
        if rope is not None:
            key = rope(key)
        parts.append({"base": base, "lr": lr, "delta": delta, "full": base + delta, "key": key})
    p, q = parts
    return {
        "cos_base": _cos(p["base"], q["base"]),
        "cos_full": _cos(p["full"], q["full"]),
        "cos_adapter": _cos(p["delta"], q["delta"]),
        "cos_key": _cos(p["key"], q["key"]),
        "cos_lr": _cos(p["lr"], q["lr"]),
        "l1_base": (l1_norm_mean(p["base"]) + l1_norm_mean(q["base"])) / 2,
        "l1_adapter": (l1_norm_mean(p["delta"]) + l1_norm_mean(q["delta"])) / 2,
    }


@dataclass
class SimilarityReport:
    """Per (layer, pair) averages over samples."""

    entries: list = field(default_factory=list)
    n_samples: int = 0
    header: dict = field(default_factory=dict)

    def mean(self, name: str):
        vals = [e[name] for e in self.entries if e[name] is not None]
        return float(np.mean(vals)) if vals else None

    def summary(self) -> dict:
        out = {name: self.mean(name) for name in COSINE_FIELDS + ("l1_base", "l1_adapter")}
        if out["l1_base"] is not None and out["l1_adapter"]:
            out["base_over_adapter_l1"] = out["l1_base"] / out["l1_adapter"]
        else:
            out["base_over_adapter_l1"] = None
        return out

    def to_dict(self) -> dict:
        return {"header": self.header, "n_samples": self.n_samples, "summary": self.summary(),
                "entries": self.entries, "reported_reference": REPORTED_REFERENCE}

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ("layer", "agent_i", "agent_j") + COSINE_FIELDS + ("l1_base", "l1_adapter")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for e in self.entries:
            w.writerow(["" if e[c] is None else (repr(e[c]) if isinstance(e[c], float) else e[c]) for c in cols])
        return buf.getvalue()


def agent_inputs(model, tokens, agent: int) -> dict:
    """Run ``agent`` alone over ``tokens``; return layer -> normed projection inputs."""
    from .engine import new_store, step

    scheme = CacheScheme("NonShared")
    store = new_store(model, scheme)
    rec: dict = {}
    step(model, store, scheme, agent, tokens, "prefill", recorder=rec)
    return {li: chunks[0][1] for li, chunks in rec.items()}


def measure_similarity(model, contexts) -> SimilarityReport:
    """Average pairwise cache similarity when every agent reads the same context(s).

    ``contexts`` is one token sequence or a list of them; cosines are taken
    over each sample's whole token-by-feature block, then averaged.
    """
    from .engine import apply_rope

    cfg = model.config
    if cfg.n_agents < 2:
        raise ValueError("similarity needs at least two agents")
    if len(contexts) and np.ndim(contexts[0]) == 0:
        contexts = [contexts]
    if not contexts:
        raise ValueError("no context samples given")
    rope = ((lambda k: apply_rope(k, 0, cfg.n_kv_heads, cfg.d_head, cfg.rope_theta)) if cfg.rope else None)
    acc: dict = {}
    for tokens in contexts:
        inputs = [agent_inputs(model, tokens, a) for a in range(cfg.n_agents)]
        for li in range(cfg.n_layers):
            for i, j in itertools.combinations(range(cfg.n_agents), 2):
                m = pair_similarity(inputs[i][li], inputs[j][li], model.layers[li], i, j, rope)
                acc.setdefault((li, i, j), []).append(m)
    entries = []
    for (li, i, j), ms in sorted(acc.items()):
        e = {"layer": li, "agent_i": i, "agent_j": j}
        for k in ms[0]:
            vals = [m[k] for m in ms if m[k] is not None]
            e[k] = float(np.mean(vals)) if vals else None
        entries.append(e)
    header = {"model": cfg.to_dict(), "dtype": model.dtype.name,
              "context_lengths": [int(len(t)) for t in contexts],
              "averaging": "per-sample cosine over the flattened token x feature block, then mean over samples"}
    return SimilarityReport(entries, len(contexts), header)


# -- cosine bound ------------------------------------------------------------

def _unit(v):
    return v / np.linalg.norm(v)


def _orthonormal(basis):
    out = []
    for b in basis:
        b = _orthogonalize(b, out)
        out.append(_unit(b))
    return out


def _orthogonalize(v, basis):
    """Remove components along the span of ``basis``; projection-subtraction applied twice."""
    ortho = basis if _is_orthonormal(basis) else _orthonormal(basis)
    for _ in range(2):
        for b in ortho:
            v = v - (v @ b) * b
    return v


def _is_orthonormal(basis) -> bool:
    if not basis:
        return True
    g = np.array([[x @ y for y in basis] for x in basis])
    return bool(np.allclose(g, np.eye(len(basis)), atol=1e-14, rtol=0))


@dataclass
class BoundReport:
    dims: tuple
    trials: int
    seed: int
    zero_delta: bool
    violations: int
    equalities: int
    max_full_over_base: float
    max_orthogonality_residual: float
    cases: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["passed"] = self.passed
        return d


def bound_case(rng, n: int, cos_target: float, energy_i: float, energy_j: float):
    """One construction: returns (cos_base, cos_full, max |cos| among the cross terms)."""
    u = _unit(rng.standard_normal(n))
    w = _unit(_orthogonalize(rng.standard_normal(n), [u]))
    base_i = rng.uniform(0.5, 2.0) * u
    base_j = rng.uniform(0.5, 2.0) * (cos_target * u + np.sqrt(1.0 - cos_target ** 2) * w)
    dy_i = _orthogonalize(rng.standard_normal(n), [base_i, base_j])
    dy_j = _orthogonalize(rng.standard_normal(n), [base_i, base_j, dy_i])
    dy_i *= np.sqrt(energy_i) * np.linalg.norm(base_i) / np.linalg.norm(dy_i)
    dy_j *= np.sqrt(energy_j) * np.linalg.norm(base_j) / np.linalg.norm(dy_j)
    pairs = [(x, y) for x, y in ((dy_i, base_i), (dy_i, base_j), (dy_j, base_i), (dy_j, base_j), (dy_i, dy_j))
             if np.any(x) and np.any(y)]
    resid = max((abs(np.dot(_unit(x), _unit(y))) for x, y in pairs), default=0.0)
    cb = cosine_similarity(base_i, base_j)
    cf = cosine_similarity(base_i + dy_i, base_j + dy_j)
    return cb, cf, float(resid)


def verify_cosine_bound(dims=256, trials: int = 1000, seed: int = 0, zero_delta: bool = False,
                        energy: float | None = None, keep_cases: bool = False) -> BoundReport:
    """Check cos(base_i, base_j) >= cos(base_i + dY_i, base_j + dY_j) on constructed cases.

    Bases have a non-negative inner product; perturbations are orthogonal to
    both bases and to each other. ``energy`` fixes ||dY||^2 / ||base||^2
    (otherwise drawn from [0.05, 2]); ``zero_delta`` sets dY to zero.
    """
    shape = (dims,) if np.ndim(dims) == 0 else tuple(int(x) for x in dims)
    n = int(np.prod(shape))
    if n < 4:
        raise ValueError(f"need at least 4 dimensions to orthogonalize, got {n}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    violations = equalities = 0
    worst = 0.0
    worst_resid = 0.0
    cases = []
    for _ in range(trials):
        c = float(rng.uniform(0.05, 0.99))
        if zero_delta:
            e_i = e_j = 0.0
        elif energy is not None:
            e_i = e_j = float(energy)
        else:
            e_i, e_j = (float(x) for x in rng.uniform(0.05, 2.0, size=2))
        cb, cf, resid = bound_case(rng, n, c, e_i, e_j)
        violations += cf > cb
        equalities += cf == cb
        worst = max(worst, cf / cb)
        worst_resid = max(worst_resid, resid)
        if keep_cases:
            cases.append({"cos_base": cb, "cos_full": cf, "energy_i": e_i, "energy_j": e_j})
    return BoundReport(shape, trials, seed, zero_delta, int(violations), int(equalities), worst, worst_resid, cases)


def report_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
