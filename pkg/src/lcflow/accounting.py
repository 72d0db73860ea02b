"""Closed-form adapter parameter and footprint accounting.

Counts follow the projector layout in :mod:`lcflow.lcf` exactly (biases on
every linear map), so instantiated adapters and these formulas agree to the
parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

# Published totals that cannot be derived from the text.
C2C_TOTAL_PARAMS = 477_850_000
C2C_PARAMS_PER_LAYER = 17_100_000
BF16_BYTES = 2


@dataclass(frozen=True)
class GeometrySpec:
    sharer_kv_heads: int
    sharer_head_dim: int
    layers: int
    kv_heads: int
    head_dim: int

    def __post_init__(self):
        if min(self.sharer_kv_heads, self.sharer_head_dim, self.layers, self.kv_heads, self.head_dim) < 1:
            raise ValueError("geometry sizes must be positive")

    @property
    def joint_width(self) -> int:
        return 2 * self.sharer_kv_heads * self.sharer_head_dim + 2 * self.kv_heads * self.head_dim


# Qwen2.5-0.5B sharer (2 KV heads x 64) into Qwen3-0.6B receiver (28 layers, 8 x 128).
PAPER_PAIR = GeometrySpec(sharer_kv_heads=2, sharer_head_dim=64, layers=28, kv_heads=8, head_dim=128)
# Qwen3-0.6B to itself, used for the cross-context runs.
SYMMETRIC_PAIR = GeometrySpec(sharer_kv_heads=8, sharer_head_dim=128, layers=28, kv_heads=8, head_dim=128)
PAIRS = {"paper": PAPER_PAIR, "symmetric": SYMMETRIC_PAIR}


def lcf_params_per_layer(geom: GeometrySpec, d: int) -> int:
    if d % 2:
        raise ValueError("latent dim must be even")
    hd = geom.kv_heads * geom.head_dim
    down = geom.joint_width * d + d
    mlp = 2 * (d * 4 * d + 4 * d + 4 * d * d + d)
    gate_head = d * 2 * geom.kv_heads + 2 * geom.kv_heads
    up = 2 * ((d // 2) * hd + hd)
    return down + mlp + gate_head + up + 2


def lcf_total_params(geom: GeometrySpec, d: int, retained_layers: int | None = None) -> int:
    k = geom.layers if retained_layers is None else retained_layers
    if not 0 <= k <= geom.layers:
        raise ValueError("retained layer count outside [0, layers]")
    return k * lcf_params_per_layer(geom, d)


def lcfx_pool_params_per_layer(geom: GeometrySpec) -> int:
    return 2 * geom.kv_heads * geom.head_dim


def lcfx_pool_params(geom: GeometrySpec) -> int:
    return geom.layers * lcfx_pool_params_per_layer(geom)


def c2c_params_per_layer(sharer_kv_width: int, receiver_kv_width: int, hidden: int, kv_heads: int) -> int:
    """Structural count for the toy C2C fuser in :mod:`lcflow.c2c` (both pipelines)."""
    one = ((sharer_kv_width + receiver_kv_width) * hidden + hidden
           + hidden * 4 * hidden + 4 * hidden + 4 * hidden * hidden + hidden
           + hidden * receiver_kv_width + receiver_kv_width
           + hidden * kv_heads + kv_heads
           + 1)
    return 2 * one


def adapter_size_bytes(param_count: int) -> int:
    """bf16 projector footprint in bytes."""
    if param_count < 0:
        raise ValueError("parameter count must be non-negative")
    return param_count * BF16_BYTES


def adapter_size_mb(param_count: int) -> int:
    """Reported footprint in whole megabytes (10^6 bytes).

    The size is first taken to one decimal and that figure is then rounded
    half-up, e.g. 12.486 MB -> 12.5 -> 13 MB.
    """
    mb = Decimal(adapter_size_bytes(param_count)) / Decimal(10 ** 6)
    tenths = mb.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    return int(tenths.quantize(Decimal("1"), rounding=ROUND_HALF_UP))


def exact_size_mb(param_count: int) -> float:
    return adapter_size_bytes(param_count) / 1e6


def reduction_vs_c2c(param_count: int, c2c_total: int = C2C_TOTAL_PARAMS) -> float:
    return c2c_total / param_count if param_count else math.inf


def param_table(pair: str, adapter: str, d: int, retained_layers: int | None = None) -> dict:
    """One row of the ``count-params`` CSV."""
    geom = PAIRS[pair]
    k = geom.layers if retained_layers is None else retained_layers
    if not 0 <= k <= geom.layers:
        raise ValueError("retained layer count outside [0, layers]")
    if adapter == "lcf":
        per_layer = lcf_params_per_layer(geom, d)
        total = per_layer * k
    elif adapter == "lcfx":
        per_layer = lcf_params_per_layer(geom, d) + lcfx_pool_params_per_layer(geom)
        total = per_layer * k
    elif adapter == "pool":
        per_layer = lcfx_pool_params_per_layer(geom)
        total = per_layer * k
    elif adapter == "c2c":
        per_layer = C2C_PARAMS_PER_LAYER
        total = C2C_TOTAL_PARAMS
    else:
        raise ValueError(f"unknown adapter kind {adapter!r}")
    return {"pair": pair, "adapter": adapter, "d": d, "layers": k, "joint_width": geom.joint_width,
            "params_per_layer": per_layer, "total_params": total, "size_mb": adapter_size_mb(total)}
