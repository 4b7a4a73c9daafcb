"""Replay the plan/action/reflect trace under each scheme and tabulate the proxies."""
from lrshare import CacheScheme, ModelConfig, build_model, generate_trace, run_trace
from lrshare.traces import markdown_tables, total_seq_len

cfg = ModelConfig(n_layers=2, d_model=32, n_agents=3, rank=4)
model = build_model(cfg)

reports = {}
for l_ctx in (64, 256):
    trace = generate_trace(l_ctx)
    print(f"l_ctx={l_ctx}: {len(trace)} steps, {total_seq_len(trace)} tokens")
    for name in ("NonShared", "FullShared", "BaseShared", "BaseLRShared", "SelectiveRecompute:0"):
        scheme = CacheScheme.parse(name, cfg.n_layers)
        reports[(scheme.name, l_ctx)] = run_trace(model, scheme, trace, seed=0)

print()
print(markdown_tables(reports, ("throughput_proxy", "ttft_proxy", "hidden_token_passes", "cache_bytes")))

r = reports[("BaseLRShared", 256)]
print("first steps of the BaseLRShared run:")
for e in r.per_step[:4]:
    print(f"  step {e['step']:>2} {e['role']:<7} len {e['length_before']:>4} -> {e['length_after']:>4}"
          f"  prefill MACs {e['prefill_macs']['total_macs']}")
