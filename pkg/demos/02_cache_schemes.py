"""Same prompt, three agents, five cache schemes: what gets stored and what it costs."""
import numpy as np

from lrshare import CacheScheme, ModelConfig, build_model, step
from lrshare.engine import new_store, with_zero_adapters
from lrshare.kvcache import cache_bytes

cfg = ModelConfig(n_layers=3, n_agents=3, rank=4)
model = build_model(cfg)
prompt = np.random.default_rng(1).integers(0, cfg.vocab, size=96)

schemes = [CacheScheme.parse(s, cfg.n_layers) for s in
           ("NonShared", "FullShared", "BaseShared", "BaseLRShared", "SelectiveRecompute:1")]

print(f"{'scheme':<22}{'key B':>9}{'value B':>9}{'lr B':>7}{'hidden B':>10}{'MACs':>11}{'passes':>8}")
for scheme in schemes:
    store = new_store(model, scheme)
    macs = passes = 0
    # the planner reads the whole prompt, then the other two agents join
    for agent in range(cfg.n_agents):
        tokens = prompt if agent == 0 else prompt[:0]
        res = step(model, store, scheme, agent, tokens)
        macs += res.delta.total
        passes += res.delta.hidden_token_passes
    b = cache_bytes(store)
    print(f"{scheme.name:<22}{b.key:>9}{b.value:>9}{b.lr:>7}{b.hidden:>10}{macs:>11}{passes:>8}")

# with zero adapters every scheme produces the same logits
zero = with_zero_adapters(model)
logits = []
for scheme in schemes:
    store = new_store(zero, scheme)
    logits.append(step(zero, store, scheme, 0, prompt).logits)
print("identical logits with zero adapters:", all(np.array_equal(logits[0], x) for x in logits[1:]))
