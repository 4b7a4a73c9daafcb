"""Command-line entry point: ``lrshare {kernel-fuzz,run-trace,analyze,make-model,make-trace}``.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

OUT_ENV = "LRSHARE_OUT_DIR"
DEFAULT_OUT = "lrshare-out"
FORMATS = ("json", "md", "csv")
DEFAULT_SCHEMES = ("NonShared", "FullShared", "BaseShared", "BaseLRShared", "SelectiveRecompute")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    model: dict = field(default_factory=dict)
    model_path: str | None = None
    schemes: list = field(default_factory=lambda: list(DEFAULT_SCHEMES))
    l_ctx: list = field(default_factory=lambda: [256])
    dtype: str = "float64"
    block_r: int = 64
    block_c: int = 64
    kernel: str = "reorder"
    out: str | None = None
    formats: list = field(default_factory=lambda: list(FORMATS))
    trace_path: str | None = None

    def validate(self) -> None:
        if not self.schemes:
            raise UsageError("at least one scheme is required")
        if not self.l_ctx and self.trace_path is None:
            raise UsageError("at least one l_ctx value is required")
        if any(l < 0 for l in self.l_ctx):
            raise UsageError("l_ctx values must be >= 0")
        if self.block_r < 1 or self.block_c < 1:
            raise UsageError("block sizes must be >= 1")
        bad = [f for f in self.formats if f not in FORMATS]
        if bad or not self.formats:
            raise UsageError(f"formats must be a non-empty subset of {FORMATS}")


def _int_list(text: str) -> list:
    text = text.strip()
    if not text:
        return []
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list:
    # scheme specs may contain commas (SelectiveRecompute:0,3), so split on ';' or whitespace
    return [t for t in text.replace(";", " ").split() if t]


def _out_dir(value) -> Path:
    return Path(value or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return data


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(f"wrote {path}")


def _model(cfg_dict: dict, model_path, seed: int, dtype: str):
    from .engine import ModelConfig, build_model, load_model
    if model_path:
        try:
            return load_model(model_path)
        except FileNotFoundError:
            raise UsageError(f"model file not found: {model_path}") from None
    try:
        mc = ModelConfig(**{"seed": seed, **cfg_dict})
    except TypeError as exc:
        raise UsageError(f"bad model config: {exc}") from None
    return build_model(mc, dtype)


# -- commands -----------------------------------------------------------------

def cmd_kernel_fuzz(args) -> int:
    from .attention import fuzz_against_naive
    conf = _load_config(args.config)
    iterations = args.iterations if args.iterations is not None else conf.get("iterations", 1000)
    seed = args.seed if args.seed is not None else conf.get("seed", 0)
    dtypes = [args.dtype] if args.dtype else conf.get("dtypes", ["float64", "float32"])
    if iterations < 1:
        raise UsageError("iterations must be >= 1")
    from .linalg import resolve_dtype
    reports = [fuzz_against_naive(iterations, seed, resolve_dtype(d)) for d in dtypes]
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.dtype}: {r.iterations} cases, max rel error {r.max_rel_error:.3e} "
              f"(tolerance {r.tolerance:g}), {r.failures} failures")
    if args.out or os.environ.get(OUT_ENV):
        _write(_out_dir(args.out) / "kernel_fuzz.json",
               json.dumps({"seed": seed, "reports": [r.to_dict() for r in reports]}, indent=2, sort_keys=True) + "\n")
    return 0 if all(r.passed for r in reports) else 1


def build_run_config(args) -> RunConfig:
    conf = _load_config(args.config)
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(conf) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    rc = RunConfig(**conf)
    for name in ("seed", "dtype", "block_r", "block_c", "kernel", "out", "model_path", "trace_path"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(rc, name, v)
    if args.scheme is not None:
        rc.schemes = args.scheme
    if args.lctx is not None:
        rc.l_ctx = args.lctx
    if args.format is not None:
        rc.formats = args.format
    rc.validate()
    return rc


def cmd_run_trace(args) -> int:
    from .attention import KERNELS, BlockConfig
    from .kvcache import CacheScheme
    from .traces import csv_table, generate_trace, load_trace, markdown_tables, run_trace

    rc = build_run_config(args)
    if rc.kernel not in KERNELS:
        raise UsageError(f"kernel must be one of {sorted(KERNELS)}")
    model = _model(rc.model, rc.model_path, rc.seed, rc.dtype)
    try:
        schemes = [CacheScheme.parse(s, model.config.n_layers, rc.seed) for s in rc.schemes]
        for s in schemes:
            s.validate(model.config.n_layers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if rc.trace_path:
        try:
            traces = {"custom": load_trace(rc.trace_path)}
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    else:
        traces = {l: generate_trace(l) for l in rc.l_ctx}
    blocks = BlockConfig(rc.block_r, rc.block_c)
    out = _out_dir(rc.out)
    reports = {}
    for l, trace in traces.items():
        for s in schemes:
            rep = run_trace(model, s, trace, seed=rc.seed, blocks=blocks, kernel=rc.kernel, verbose=True)
            rep.header["l_ctx"] = l
            reports[(s.name, l)] = rep
            if "json" in rc.formats:
                _write(out / f"{_slug(s.name)}_lctx{l}.json", rep.to_json())
    if "md" in rc.formats:
        _write(out / "summary.md", f"Root seed {rc.seed}. Proxies are MAC-normalised, not wall-clock.\n\n"
               + markdown_tables(reports, ("throughput_proxy", "ttft_proxy", "hidden_token_passes", "cache_bytes")))
    if "csv" in rc.formats:
        _write(out / "summary.csv", csv_table(reports))
    return 0


def _slug(name: str) -> str:
    return name.replace(":", "-").replace(",", "_")


def cmd_analyze(args) -> int:
    from .analysis import REPORTED_REFERENCE, measure_similarity, report_json, verify_cosine_bound

    conf = _load_config(args.config)
    seed = args.seed if args.seed is not None else conf.get("seed", 0)
    trials = args.trials if args.trials is not None else conf.get("trials", 1000)
    dims = args.dims if args.dims is not None else conf.get("dims", 256)
    samples = args.samples if args.samples is not None else conf.get("samples", 4)
    ctx_len = args.context_len if args.context_len is not None else conf.get("context_len", 64)
    formats = args.format or conf.get("formats", ["json", "csv"])
    if trials < 1:
        raise UsageError("trials must be >= 1")
    try:
        bound = verify_cosine_bound(dims, trials, seed, zero_delta=args.zero_delta)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = {"seed": seed, "bound": bound.to_dict(), "reported_reference": REPORTED_REFERENCE}
    sim = None
    if samples > 0:
        model = _model(conf.get("model", {}), args.model_path or conf.get("model_path"), seed,
                       args.dtype or conf.get("dtype", "float64"))
        if model.config.n_agents < 2:
            raise UsageError("similarity analysis needs a model with at least two agents")
        rng = np.random.default_rng([seed, 0xA11])
        contexts = [rng.integers(0, model.config.vocab, size=ctx_len) for _ in range(samples)]
        sim = measure_similarity(model, contexts)
        result["similarity"] = sim.to_dict()
    status = "PASS" if bound.passed else "FAIL"
    print(f"{status} cosine bound: {bound.trials} trials, {bound.violations} violations, "
          f"{bound.equalities} exact equalities")
    if sim is not None:
        s = sim.summary()
        print("similarity means: " + ", ".join(f"{k}={v:.4f}" for k, v in s.items() if v is not None))
    out = _out_dir(args.out)
    if "json" in formats:
        _write(out / "analysis.json", report_json(result))
    if "csv" in formats and sim is not None:
        _write(out / "similarity.csv", sim.to_csv())
    return 0 if bound.passed else 1


def cmd_make_model(args) -> int:
    from .engine import save_model
    conf = _load_config(args.config)
    model = _model(conf.get("model", {}), None, args.seed if args.seed is not None else conf.get("seed", 0),
                   args.dtype or conf.get("dtype", "float64"))
    save_model(model, args.path)
    print(f"wrote {args.path}")
    return 0


def cmd_make_trace(args) -> int:
    from .traces import generate_trace, save_trace, total_seq_len
    trace = generate_trace(args.lctx)
    save_trace(trace, args.path)
    print(f"wrote {args.path} ({len(trace)} steps, {total_seq_len(trace)} tokens)")
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lrshare", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, fmt=True):
        sp.add_argument("--config", help="JSON config file; flags override its keys")
        sp.add_argument("--seed", type=int, help="root seed")
        sp.add_argument("--dtype", choices=("float32", "float64", "f32", "f64"))
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        if fmt:
            sp.add_argument("--format", action="append", choices=FORMATS,
                            help="report format; repeat for several (default: all)")

    f = sub.add_parser("kernel-fuzz", help="compare the blocked kernel with the naive reference")
    common(f, fmt=False)
    f.add_argument("--iterations", type=int)
    f.set_defaults(func=cmd_kernel_fuzz)

    r = sub.add_parser("run-trace", help="run emulated agent traces under cache schemes")
    common(r)
    r.add_argument("--scheme", type=_str_list, help="scheme names separated by ';' or spaces")
    r.add_argument("--lctx", type=_int_list, help="comma-separated retrieved-context lengths")
    r.add_argument("--block-r", dest="block_r", type=int)
    r.add_argument("--block-c", dest="block_c", type=int)
    r.add_argument("--kernel", choices=("reorder", "expand_first"))
    r.add_argument("--model", dest="model_path", help="model file (otherwise generated from the seed)")
    r.add_argument("--trace", dest="trace_path", help="trace JSON file instead of generated traces")
    r.set_defaults(func=cmd_run_trace)

    a = sub.add_parser("analyze", help="cache similarity and cosine-bound verification")
    common(a)
    a.add_argument("--trials", type=int)
    a.add_argument("--dims", type=int)
    a.add_argument("--zero-delta", action="store_true", help="use zero perturbations (exact equality case)")
    a.add_argument("--samples", type=int, help="context samples for the similarity measurement (0 skips it)")
    a.add_argument("--context-len", dest="context_len", type=int)
    a.add_argument("--model", dest="model_path")
    a.set_defaults(func=cmd_analyze)

    m = sub.add_parser("make-model", help="write a model file generated from a seed")
    m.add_argument("path")
    m.add_argument("--config")
    m.add_argument("--seed", type=int)
    m.add_argument("--dtype", choices=("float32", "float64", "f32", "f64"))
    m.set_defaults(func=cmd_make_model)

    t = sub.add_parser("make-trace", help="write a generated trace as JSON")
    t.add_argument("path")
    t.add_argument("--lctx", type=int, default=256)
    t.set_defaults(func=cmd_make_trace)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
