"""Attention over a low-rank value cache, with and without reordering.

The reordered kernel keeps the per-token LR rows (L x r) and only applies the
up-projection to the r-wide accumulator at the end of each query block.
"""
import numpy as np

from lrshare import AttentionInputs, BlockConfig, FlopCounter, lr_mac_counts, naive_attention
from lrshare.attention import expand_first_attention, flash_lora_attention

rng = np.random.default_rng(0)
L, d, r = 512, 64, 8

q = rng.standard_normal((L, d))
k = rng.standard_normal((L, d))
v_base = rng.standard_normal((L, d))
v_lr = rng.standard_normal((L, r))
b_up = 0.1 * rng.standard_normal((r, d))
inp = AttentionInputs(q, k, v_base, v_lr, b_up, scale=d ** -0.5)

ref = naive_attention(inp)

# no block skipping, so the counters line up with the closed form
blocks = BlockConfig(64, 64, skip_masked=False)
c_re, c_ex = FlopCounter(), FlopCounter()
out_re = flash_lora_attention(inp, blocks, c_re)
out_ex = expand_first_attention(inp, blocks, c_ex)

print("max |reorder - naive|      ", np.abs(out_re - ref).max())
print("max |expand_first - naive| ", np.abs(out_ex - ref).max())

no_reorder, reorder = lr_mac_counts(L, L, r, d)
print("LR path MACs, expand first:", c_ex.macs_by_category["attn_lr"], "closed form", no_reorder)
print("LR path MACs, reordered:   ", c_re.macs_by_category["attn_lr"], "closed form", reorder)
print(f"reordered / expand first = {reorder / no_reorder:.3f}  (about r / d_head = {r / d:.3f})")

# decode: one query row against the whole cache
one = AttentionInputs(q[-1:], k, v_base, v_lr, b_up, scale=d ** -0.5)
print("decode step, expand first vs reordered:", lr_mac_counts(L, 1, r, d))
print("decode row matches naive:", np.allclose(flash_lora_attention(one), naive_attention(one)[-1:]))
