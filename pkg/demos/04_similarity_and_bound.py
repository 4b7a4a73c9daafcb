"""How alike are the agents' caches, and why base values are the safer thing to share."""
import numpy as np

from lrshare import ModelConfig, build_model, measure_similarity, verify_cosine_bound

cfg = ModelConfig(n_layers=2, n_agents=3, rank=4, lora_b_std=0.05)
model = build_model(cfg)
rng = np.random.default_rng(3)
contexts = [rng.integers(0, cfg.vocab, size=48) for _ in range(4)]

rep = measure_similarity(model, contexts)
for k, v in rep.summary().items():
    print(f"{k:<22}{'n/a' if v is None else f'{v:.4f}'}")

# random weights are not trained checkpoints, so only the ordering is of interest here
print("\nper layer, agents 0/1:")
for e in rep.entries:
    if (e["agent_i"], e["agent_j"]) == (0, 1):
        print(f"  layer {e['layer']}: base {e['cos_base']:.4f}  full {e['cos_full']:.4f}  lr {e['cos_lr']:.4f}")

# adding perturbations orthogonal to both bases never raises the cosine
b = verify_cosine_bound(dims=256, trials=500, seed=0)
print(f"\nbound: {b.violations} violations in {b.trials} trials, max full/base {b.max_full_over_base:.4f}")
z = verify_cosine_bound(dims=256, trials=200, seed=0, zero_delta=True)
print(f"zero perturbation: {z.equalities}/{z.trials} exact equalities")
