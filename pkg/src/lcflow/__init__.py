"""Latent cache fusion between frozen toy transformers.

Learned adapters edit a receiver model's key/value cache using a sharer
model's cache, either position by position (shared context) or through a
pooled, position-free summary (cross context).
"""

from .accounting import adapter_size_mb, lcf_params_per_layer, lcf_total_params, lcfx_pool_params
from .c2c import C2CAdapter, C2CConfig, c2c_fuse_layer
from .fusion import FusedBatch, fuse_cache, fused_ntp_loss
from .lcf import LcfAdapter, LcfConfig, gate_temperature_at, gumbel_sigmoid_gate, lcf_fuse_layer
from .pool import PooledSummary, SpanScheme, partition_spans, pool_across_spans, pool_within_spans
from .toy_lm import KVCache, ModelGeometry, ToyLM, build_lookup_model, decode_greedy, mcq_logit_score

__version__ = "0.1.0"

__all__ = [
    "adapter_size_mb", "lcf_params_per_layer", "lcf_total_params", "lcfx_pool_params",
    "C2CAdapter", "C2CConfig", "c2c_fuse_layer", "FusedBatch", "fuse_cache", "fused_ntp_loss",
    "LcfAdapter", "LcfConfig", "gate_temperature_at", "gumbel_sigmoid_gate", "lcf_fuse_layer",
    "PooledSummary", "SpanScheme", "partition_spans", "pool_across_spans", "pool_within_spans",
    "KVCache", "ModelGeometry", "ToyLM", "build_lookup_model", "decode_greedy", "mcq_logit_score",
]
