"""Emulated plan/action/reflect traces and cost reports for running them."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .attention import BlockConfig
from .kvcache import CacheScheme, CacheBytes, cache_bytes
from .linalg import FlopCounter

AGENT_ROLES = ("plan", "action", "reflect")
MAC_NOTE = ("MACs count one multiply-accumulate per matmul term; softmax, normalisation and "
            "activation functions are not counted.")


@dataclass(frozen=True)
class TraceStep:
    agent: int
    prefill_len: int
    gen_len: int

    def __post_init__(self):
        if self.agent < 0:
            raise ValueError("agent index must be >= 0")
        if self.prefill_len < 0 or self.gen_len < 0:
            raise ValueError("prefill and generation lengths must be >= 0")

    @property
    def role(self) -> str:
        return AGENT_ROLES[self.agent] if self.agent < len(AGENT_ROLES) else f"agent{self.agent}"

    def to_dict(self) -> dict:
        return {"agent": self.agent, "prefill": self.prefill_len, "gen": self.gen_len}


def generate_trace(l_ctx: int) -> list[TraceStep]:
    """The 17-step plan/action/reflect schedule with retrieved context ``l_ctx``."""
    if l_ctx < 0:
        raise ValueError("l_ctx must be >= 0")
    steps = [TraceStep(0, 512, 32), TraceStep(0, 8, 8), TraceStep(1, 8, 8)]
    for _ in range(4):
        steps += [TraceStep(0, l_ctx, 32), TraceStep(0, 8, 8), TraceStep(1, 8, 8)]
    steps += [TraceStep(2, 32, 32), TraceStep(2, 8, 8)]
    return steps


def total_seq_len(trace) -> int:
    return sum(s.prefill_len + s.gen_len for s in trace)


def shorthand(n: int) -> str:
    """Column-head style length, e.g. 1936 -> '1.9k'."""
    return f"{n / 1000:.1f}k" if n >= 1000 else str(n)


def save_trace(trace, path) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in trace], indent=2) + "\n")


def load_trace(path) -> list[TraceStep]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise ValueError(f"{path}: a trace file holds a JSON array")
    try:
        return [TraceStep(int(d["agent"]), int(d["prefill"]), int(d["gen"])) for d in data]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed trace entry ({exc})") from None


class Chunk(NamedTuple):
    step_index: int
    agent: int
    mode: str
    tokens: np.ndarray


def schedule(trace, seed: int, vocab: int) -> list[Chunk]:
    """Expand steps into engine calls: one prefill chunk, then one decode call per generated token.

    Token ids are a deterministic function of (seed, step index, first position).
    """
    chunks = []
    pos = 0
    for i, s in enumerate(trace):
        chunks.append(Chunk(i, s.agent, "prefill", _tokens(seed, i, pos, s.prefill_len, vocab)))
        pos += s.prefill_len
        for _ in range(s.gen_len):
            chunks.append(Chunk(i, s.agent, "decode", _tokens(seed, i, pos, 1, vocab)))
            pos += 1
    return chunks


def _tokens(seed: int, step_index: int, start: int, n: int, vocab: int) -> np.ndarray:
    return np.random.default_rng([seed, step_index, start]).integers(0, vocab, size=n, dtype=np.int64)


@dataclass
class CostReport:
    scheme: str
    total_seq_len: int
    counters: FlopCounter
    cache_bytes: CacheBytes
    ttft_proxy: int
    per_step: list = field(default_factory=list)
    header: dict = field(default_factory=dict)

    @property
    def throughput_proxy(self) -> float:
        total = self.counters.total
        return self.total_seq_len / total if total else 0.0

    def to_dict(self) -> dict:
        return {
            "header": self.header,
            "scheme": self.scheme,
            "total_seq_len": self.total_seq_len,
            "counters": self.counters.to_dict(),
            "cache_bytes": self.cache_bytes.to_dict(),
            "ttft_proxy_macs": self.ttft_proxy,
            "throughput_proxy_tokens_per_mac": self.throughput_proxy,
            "per_step": self.per_step,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def run_trace(model, scheme: CacheScheme, trace, seed: int = 0, blocks: BlockConfig = BlockConfig(),
              kernel: str = "reorder", store=None, verbose: bool = False) -> CostReport:
    """Execute ``trace`` under ``scheme`` and account every step.

    Wall-clock time is only printed (``verbose``), never stored, so reports
    stay reproducible.
    """
    from .engine import new_store, step

    trace = list(trace)
    bad = [s.agent for s in trace if s.agent >= model.config.n_agents]
    if bad:
        raise ValueError(f"trace uses agent {bad[0]} but the model has {model.config.n_agents} agents")
    store = new_store(model, scheme) if store is None else store
    counter = FlopCounter()
    ttft = 0
    log = []
    entry = None
    t0 = time.perf_counter()
    for chunk in schedule(trace, seed, model.config.vocab):
        length_before = store.length
        res = step(model, store, scheme, chunk.agent, chunk.tokens, chunk.mode, blocks=blocks, kernel=kernel,
                   counter=counter)
        if chunk.mode == "prefill":
            ttft += res.delta.total
            s = trace[chunk.step_index]
            entry = {"step": chunk.step_index, "agent": chunk.agent, "role": s.role,
                     "prefill": s.prefill_len, "gen": s.gen_len, "length_before": length_before,
                     "plan": res.plan.to_dict(), "prefill_macs": res.delta.to_dict(),
                     "decode_macs": FlopCounter()}
            log.append(entry)
        else:
            entry["decode_macs"] = entry["decode_macs"] + res.delta
        entry["length_after"] = store.length
    for e in log:
        e["decode_macs"] = e["decode_macs"].to_dict()
    if verbose:
        import sys
        print(f"[{scheme.name}] {store.length} tokens in {time.perf_counter() - t0:.2f}s", file=sys.stderr)
    header = {
        "seed": seed, "model": model.config.to_dict(), "dtype": model.dtype.name,
        "block_r": blocks.b_r, "block_c": blocks.b_c, "skip_masked": blocks.skip_masked,
        "kernel": kernel, "mac_note": MAC_NOTE, "trace": [s.to_dict() for s in trace],
    }
    return CostReport(scheme.name, total_seq_len(trace), counter, cache_bytes(store), ttft, log, header)


# -- tabular output --------------------------------------------------------

METRICS = {
    "throughput_proxy": ("tokens per MMAC", lambda r: f"{r.throughput_proxy * 1e6:.4f}"),
    "ttft_proxy": ("prefill MMACs", lambda r: f"{r.ttft_proxy / 1e6:.3f}"),
    "hidden_token_passes": ("token-layer passes", lambda r: str(r.counters.hidden_token_passes)),
    "cache_bytes": ("cache bytes", lambda r: str(r.cache_bytes.total)),
}


def markdown_tables(reports: dict, metrics=("throughput_proxy", "ttft_proxy")) -> str:
    """Schemes as rows, trajectory lengths as columns; ``reports`` maps (scheme, l_ctx) -> CostReport."""
    schemes = list(dict.fromkeys(k[0] for k in reports))
    lctxs = sorted({k[1] for k in reports})
    out = []
    for m in metrics:
        title, fmt = METRICS[m]
        heads = []
        for l in lctxs:
            n = next(r.total_seq_len for (s, lc), r in reports.items() if lc == l)
            heads.append(f"{n} ({shorthand(n)})")
        out.append(f"### {title}\n")
        out.append("| scheme | " + " | ".join(heads) + " |")
        out.append("|---" * (len(heads) + 1) + "|")
        for s in schemes:
            cells = [fmt(reports[(s, l)]) if (s, l) in reports else "" for l in lctxs]
            out.append(f"| {s} | " + " | ".join(cells) + " |")
        out.append("")
    return "\n".join(out)


def csv_table(reports: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "l_ctx", "total_seq_len", "total_macs", "ttft_proxy_macs",
                "throughput_proxy_tokens_per_mac", "hidden_token_passes", "key_bytes", "value_bytes",
                "lr_bytes", "hidden_bytes"])
    for (s, l), r in reports.items():
        b = r.cache_bytes
        w.writerow([s, l, r.total_seq_len, r.counters.total, r.ttft_proxy, repr(r.throughput_proxy),
                    r.counters.hidden_token_passes, b.key, b.value, b.lr, b.hidden])
    return buf.getvalue()
