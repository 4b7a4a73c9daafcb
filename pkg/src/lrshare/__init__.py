"""Shared KV caches for multi-LoRA agents: kernels, cache schemes and cost accounting."""
from .attention import (AttentionInputs, BlockConfig, expand_first_attention, flash_lora_attention,
                        gqa_attention, lr_mac_counts, naive_attention)
from .kvcache import CacheScheme, KvStore, PrefillPlan, cache_bytes, plan_step
from .linalg import FlopCounter, matmul
from .lora import LoraAdapter, MultiLoraSet, down_project, expand_lr, forward_decomposed
from .engine import ModelConfig, build_model, oracle_run, step
from .traces import CostReport, TraceStep, generate_trace, run_trace
from .analysis import measure_similarity, verify_cosine_bound

__version__ = "0.1.0"
