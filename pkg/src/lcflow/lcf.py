"""The LCF projector: joint-KV latent bottleneck with gated residual edits.

Per receiver layer the projector reads the sharer's key/value features next
to the receiver's own per token, compresses them to a ``d``-wide latent,
refines it with residual MLP blocks, and emits one key edit and one value
edit, each scaled per head and switched by a Gumbel-sigmoid layer gate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .seeding import stream
from .tensor import ContractError, ShapeError, Tensor

MODES = ("train", "eval")


@dataclass(frozen=True)
class GateSchedule:
    """Geometric temperature anneal from ``start`` to ``end`` over ``steps``."""

    start: float = 1.0
    end: float = 0.001
    steps: int = 400

    def __post_init__(self):
        if self.start <= 0 or self.end <= 0:
            raise ContractError("gate temperatures must be positive")
        if self.steps < 0:
            raise ContractError("anneal window must be non-negative")


LCF_SCHEDULE = GateSchedule(1.0, 0.001, 400)
LCFX_SCHEDULE = GateSchedule(1.0, 0.5, 400)


def gate_temperature_at(step: int, schedule: GateSchedule = LCF_SCHEDULE) -> float:
    if step < 0:
        raise ContractError("step must be >= 0")
    if schedule.steps == 0 or step >= schedule.steps:
        return schedule.end
    frac = step / schedule.steps
    return float(math.exp((1 - frac) * math.log(schedule.start) + frac * math.log(schedule.end)))


def gumbel_sigmoid_gate(logit: Tensor, temperature: float, mode: str, rng: np.random.Generator | None = None,
                        batch: int = 1) -> Tensor:
    """Layer gate with shape (batch, 1, 1, 1).

    Train mode draws one logistic sample (difference of two Gumbels) per batch
    element; ``rng=None`` disables the noise. Eval mode returns the hard 0/1
    gate, which carries no gradient.
    """
    if temperature <= 0:
        raise ContractError("gate temperature must be positive")
    if mode == "eval":
        hard = 1.0 if float(logit.data.reshape(-1)[0]) > 0 else 0.0
        return Tensor(np.full((batch, 1, 1, 1), hard), dtype=logit.data.dtype)
    if mode != "train":
        raise ContractError(f"mode must be one of {MODES}")
    x = T.reshape(logit, (1, 1, 1, 1))
    if rng is not None:
        noise = rng.gumbel(size=(batch, 1, 1, 1)) - rng.gumbel(size=(batch, 1, 1, 1))
        x = x + Tensor(noise, dtype=logit.data.dtype)
    return T.sigmoid(x * (1.0 / temperature))


@dataclass(frozen=True)
class LcfConfig:
    d: int
    layers: int
    kv_heads: int
    head_dim: int
    sharer_layers: int
    sharer_kv_heads: int
    sharer_head_dim: int
    mlp_blocks: int = 2
    dropout: float = 0.1
    gate_init: float = 0.0
    up_scale: float = 0.06
    alpha_bias: float = 1.0
    pool: bool = False
    pool_scale: float = 0.02
    schedule: GateSchedule = field(default_factory=lambda: LCF_SCHEDULE)

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise ContractError("latent dim d must be even and >= 2")
        if min(self.layers, self.kv_heads, self.head_dim, self.sharer_layers,
               self.sharer_kv_heads, self.sharer_head_dim) < 1:
            raise ContractError("geometry sizes must be positive")
        if not 0 <= self.dropout < 1:
            raise ContractError("dropout must lie in [0, 1)")

    @property
    def intermediate(self) -> int:
        return 4 * self.d

    @property
    def sharer_width(self) -> int:
        return 2 * self.sharer_kv_heads * self.sharer_head_dim

    @property
    def receiver_width(self) -> int:
        return 2 * self.kv_heads * self.head_dim

    @property
    def joint_width(self) -> int:
        return self.sharer_width + self.receiver_width

    def sharer_layer(self, layer: int) -> int:
        """Sharer layer read by receiver ``layer`` (floor-proportional)."""
        return layer * self.sharer_layers // self.layers

    def to_dict(self) -> dict:
        out = asdict(self)
        out["schedule"] = asdict(self.schedule)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LcfConfig":
        d = dict(d)
        d["schedule"] = GateSchedule(**d.get("schedule", {}))
        return cls(**d)

    @classmethod
    def for_models(cls, sharer_geom, receiver_geom, d: int, **kw) -> "LcfConfig":
        return cls(d=d, layers=receiver_geom.layers, kv_heads=receiver_geom.kv_heads,
                   head_dim=receiver_geom.head_dim, sharer_layers=sharer_geom.layers,
                   sharer_kv_heads=sharer_geom.kv_heads, sharer_head_dim=sharer_geom.head_dim, **kw)


def layer_param_shapes(cfg: LcfConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of one layer's projector tensors (weights stored input-major)."""
    d, hd, H = cfg.d, cfg.kv_heads * cfg.head_dim, cfg.kv_heads
    shapes = {"w_down": (cfg.joint_width, d), "b_down": (d,)}
    for b in range(cfg.mlp_blocks):
        shapes[f"mlp{b}.w1"] = (d, cfg.intermediate)
        shapes[f"mlp{b}.b1"] = (cfg.intermediate,)
        shapes[f"mlp{b}.w2"] = (cfg.intermediate, d)
        shapes[f"mlp{b}.b2"] = (d,)
    shapes.update({"w_alpha": (d, 2 * H), "b_alpha": (2 * H,),
                   "w_up_k": (d // 2, hd), "b_up_k": (hd,),
                   "w_up_v": (d // 2, hd), "b_up_v": (hd,),
                   "gate_k": (1,), "gate_v": (1,)})
    return shapes


def pool_param_shapes(cfg: LcfConfig) -> dict[str, tuple[int, ...]]:
    return {"q_base": (cfg.sharer_kv_heads, cfg.sharer_head_dim),
            "q_layer": (cfg.sharer_kv_heads, cfg.sharer_head_dim)}


class LcfAdapter:
    """Per-layer projectors (and, for LCF-X, per-layer pool queries).

    ``layers`` lists the receiver layers that carry a projector; any other
    layer behaves as a permanently closed gate.
    """

    kind = "lcf"

    def __init__(self, config: LcfConfig, params: dict[str, Tensor], layers=None):
        self.config = config
        self.params = params
        self.layers = tuple(sorted(range(config.layers) if layers is None else layers))
        if any(not 0 <= i < config.layers for i in self.layers):
            raise ContractError("retained layer index out of range")

    @classmethod
    def init(cls, config: LcfConfig, seed: int) -> "LcfAdapter":
        c = config
        params: dict[str, Tensor] = {}
        for i in range(c.layers):
            rng = stream(seed, "adapter-init", i)
            for name, shape in layer_param_shapes(c).items():
                key = f"layers.{i}.{name}"
                if name.startswith("b_") or name.endswith((".b1", ".b2")):
                    t = Tensor(np.zeros(shape), requires_grad=True)
                elif name.startswith("gate_"):
                    t = Tensor(np.full(shape, c.gate_init), requires_grad=True)
                elif name.startswith("w_up"):
                    t = T.init_kaiming_scaled(shape, shape[0], c.up_scale, rng)
                else:
                    t = T.init_kaiming_scaled(shape, shape[0], 1.0, rng)
                params[key] = t
            params[f"layers.{i}.b_alpha"].data[:] = c.alpha_bias
            if c.pool:
                for name, shape in pool_param_shapes(c).items():
                    params[f"pool.{i}.{name}"] = T.init_kaiming_scaled(shape, shape[-1], c.pool_scale, rng)
        return cls(config, params)

    def layer_params(self, i: int) -> dict[str, Tensor]:
        pre = f"layers.{i}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def pool_params(self, i: int) -> tuple[Tensor, Tensor]:
        return self.params[f"pool.{i}.q_base"], self.params[f"pool.{i}.q_layer"]

    def gate_logits(self, i: int) -> tuple[float, float]:
        return (float(self.params[f"layers.{i}.gate_k"].data[0]),
                float(self.params[f"layers.{i}.gate_v"].data[0]))

    def trainable(self) -> dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def restrict(self, keep) -> "LcfAdapter":
        """Copy holding only the projectors of ``keep`` (pool queries follow)."""
        keep = sorted(set(keep))
        prefixes = tuple(f"{p}.{i}." for i in keep for p in ("layers", "pool"))
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()
                  if k.startswith(prefixes)}
        return type(self)(self.config, params, keep)

    def close_gates(self) -> "LcfAdapter":
        """Copy with every gate logit forced negative (hard gate 0 at eval)."""
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        for i in self.layers:
            params[f"layers.{i}.gate_k"].data[:] = -1.0
            params[f"layers.{i}.gate_v"].data[:] = -1.0
        return type(self)(self.config, params, self.layers)


def _flatten_heads(x: Tensor) -> Tensor:
    """(B, H, N, D) -> (B, N, H*D)."""
    B, H, N, D = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, H * D)


def _unflatten_heads(x: Tensor, heads: int) -> Tensor:
    """(B, N, H*D) -> (B, H, N, D)."""
    B, N, W = x.shape
    return x.reshape(B, N, heads, W // heads).transpose(0, 2, 1, 3)


def latent(p: dict[str, Tensor], x: Tensor, blocks: int, dropout: float, rng: np.random.Generator | None) -> Tensor:
    z = T.linear(x, p["w_down"], p["b_down"])
    for b in range(blocks):
        hid = T.silu(T.linear(z, p[f"mlp{b}.w1"], p[f"mlp{b}.b1"]))
        hid = T.dropout(hid, dropout, rng)
        z = z + T.linear(hid, p[f"mlp{b}.w2"], p[f"mlp{b}.b2"])
    return z


def lcf_fuse_layer(params: dict[str, Tensor], config: LcfConfig, sharer_kv: Tensor, R_K: Tensor, R_V: Tensor,
                   mode: str = "eval", temperature: float = 1.0, rng: np.random.Generator | None = None,
                   noise: bool = True) -> tuple[Tensor, Tensor]:
    """Fuse one receiver layer.

    ``sharer_kv`` is (B, N, sharer_width) with the sharer's flattened keys then
    values per receiver position, or (B, 1, sharer_width) for a broadcast
    pooled summary. ``R_K``/``R_V`` are (B, H_kv, N, D).
    """
    if R_K.shape != R_V.shape or R_K.ndim != 4:
        raise ShapeError(f"receiver key/value shapes differ: {R_K.shape} vs {R_V.shape}")
    B, H, N, D = R_K.shape
    if (H, D) != (config.kv_heads, config.head_dim):
        raise ShapeError(f"receiver cache heads {(H, D)} do not match configured {(config.kv_heads, config.head_dim)}")
    if sharer_kv.ndim != 3 or sharer_kv.shape[0] != B or sharer_kv.shape[1] not in (1, N):
        raise ShapeError(f"sharer features {sharer_kv.shape} do not match receiver cache {R_K.shape}")
    if sharer_kv.shape[2] + 2 * H * D != config.joint_width:
        raise ShapeError(f"joint width {sharer_kv.shape[2] + 2 * H * D} != configured {config.joint_width}")
    train = mode == "train"
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}")
    gk = gumbel_sigmoid_gate(params["gate_k"], temperature, mode, rng if (train and noise) else None, B)
    gv = gumbel_sigmoid_gate(params["gate_v"], temperature, mode, rng if (train and noise) else None, B)
    if not train and not gk.data.any() and not gv.data.any():
        return R_K, R_V

    s = sharer_kv if sharer_kv.shape[1] == N else T.broadcast_to(sharer_kv, (B, N, sharer_kv.shape[2]))
    x = T.concat([s, _flatten_heads(R_K), _flatten_heads(R_V)], axis=-1)
    z = latent(params, x, config.mlp_blocks, config.dropout if train else 0.0, rng if train else None)
    half = config.d // 2
    alpha = T.linear(z, params["w_alpha"], params["b_alpha"])            # (B, N, 2H)
    alpha = alpha.transpose(0, 2, 1).reshape(B, 2 * H, N, 1)
    out = []
    for i, (R, g, zi) in enumerate(((R_K, gk, z[..., :half]), (R_V, gv, z[..., half:]))):
        if not train and not g.data.any():
            out.append(R)
            continue
        tag = "k" if i == 0 else "v"
        delta = _unflatten_heads(T.linear(zi, params[f"w_up_{tag}"], params[f"b_up_{tag}"]), H)
        a = alpha[:, i * H:(i + 1) * H]
        edit = a * delta
        out.append(R + (edit if not train and g.data.all() else g * edit))
    return out[0], out[1]
