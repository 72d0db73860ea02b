"""Baseline fuser with two independent key and value pipelines.

Each pipeline projects the aligned sharer entry together with the receiver
entry to the receiver's hidden width, mixes it with one MLP at 4x width and
emits a per-head update, a per-head weight and a gated residual. Sizes are
structural only; they do not reproduce any published checkpoint.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .align import AlignmentMap
from .lcf import LCF_SCHEDULE, MODES, GateSchedule, gumbel_sigmoid_gate
from .seeding import stream
from .tensor import ContractError, ShapeError, Tensor


@dataclass(frozen=True)
class C2CConfig:
    hidden: int
    layers: int
    kv_heads: int
    head_dim: int
    sharer_layers: int
    sharer_kv_heads: int
    sharer_head_dim: int
    gate_init: float = 0.0
    schedule: GateSchedule = field(default_factory=lambda: LCF_SCHEDULE)

    @property
    def in_width(self) -> int:
        return self.sharer_kv_heads * self.sharer_head_dim + self.kv_heads * self.head_dim

    def sharer_layer(self, layer: int) -> int:
        return layer * self.sharer_layers // self.layers

    def to_dict(self) -> dict:
        out = asdict(self)
        out["schedule"] = asdict(self.schedule)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "C2CConfig":
        d = dict(d)
        d["schedule"] = GateSchedule(**d.get("schedule", {}))
        return cls(**d)

    @classmethod
    def for_models(cls, sharer_geom, receiver_geom, **kw) -> "C2CConfig":
        return cls(hidden=receiver_geom.hidden, layers=receiver_geom.layers, kv_heads=receiver_geom.kv_heads,
                   head_dim=receiver_geom.head_dim, sharer_layers=sharer_geom.layers,
                   sharer_kv_heads=sharer_geom.kv_heads, sharer_head_dim=sharer_geom.head_dim, **kw)


def pipeline_shapes(cfg: C2CConfig) -> dict[str, tuple[int, ...]]:
    h, hd = cfg.hidden, cfg.kv_heads * cfg.head_dim
    return {"w_in": (cfg.in_width, h), "b_in": (h,),
            "w1": (h, 4 * h), "b1": (4 * h,), "w2": (4 * h, h), "b2": (h,),
            "w_proj": (h, hd), "b_proj": (hd,),
            "w_weight": (h, cfg.kv_heads), "b_weight": (cfg.kv_heads,),
            "gate": (1,)}


class C2CAdapter:
    kind = "c2c"

    def __init__(self, config: C2CConfig, params: dict[str, Tensor], layers=None):
        self.config = config
        self.params = params
        self.layers = tuple(sorted(range(config.layers) if layers is None else layers))

    @classmethod
    def init(cls, config: C2CConfig, seed: int) -> "C2CAdapter":
        params: dict[str, Tensor] = {}
        for i in range(config.layers):
            for tag in ("k", "v"):
                rng = stream(seed, "c2c-init", i, 0 if tag == "k" else 1)
                for name, shape in pipeline_shapes(config).items():
                    if name == "gate":
                        t = Tensor(np.full(shape, config.gate_init), requires_grad=True)
                    elif name.startswith("b"):
                        t = Tensor(np.zeros(shape), requires_grad=True)
                    else:
                        t = T.init_kaiming_scaled(shape, shape[0], 1.0, rng)
                    params[f"layers.{i}.{tag}.{name}"] = t
        return cls(config, params)

    def layer_params(self, i: int) -> dict[str, Tensor]:
        pre = f"layers.{i}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def gate_logits(self, i: int) -> tuple[float, float]:
        return (float(self.params[f"layers.{i}.k.gate"].data[0]),
                float(self.params[f"layers.{i}.v.gate"].data[0]))

    def param_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))


def _pipeline(p: dict[str, Tensor], tag: str, S: Tensor, R: Tensor, gate: Tensor, train: bool) -> Tensor:
    B, H, N, D = R.shape
    Hs, Ds = S.shape[1], S.shape[3]
    x = T.concat([S.transpose(0, 2, 1, 3).reshape(B, N, Hs * Ds),
                  R.transpose(0, 2, 1, 3).reshape(B, N, H * D)], axis=-1)
    h = T.linear(x, p[f"{tag}.w_in"], p[f"{tag}.b_in"])
    h = h + T.linear(T.silu(T.linear(h, p[f"{tag}.w1"], p[f"{tag}.b1"])), p[f"{tag}.w2"], p[f"{tag}.b2"])
    delta = T.linear(h, p[f"{tag}.w_proj"], p[f"{tag}.b_proj"]).reshape(B, N, H, D).transpose(0, 2, 1, 3)
    weight = T.linear(h, p[f"{tag}.w_weight"], p[f"{tag}.b_weight"]).transpose(0, 2, 1).reshape(B, H, N, 1)
    edit = weight * delta
    return R + (gate * edit if train else edit)


def c2c_fuse_layer(params: dict[str, Tensor], config: C2CConfig, S_K: Tensor, S_V: Tensor, R_K: Tensor, R_V: Tensor,
                   align: AlignmentMap | None, mode: str = "eval", temperature: float = 1.0,
                   rng: np.random.Generator | None = None, noise: bool = True) -> tuple[Tensor, Tensor]:
    """Fuse one layer; sharer tensors are re-indexed through ``align`` first."""
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}")
    if align is not None:
        idx = (slice(None), slice(None), align.indices())
        S_K, S_V = T.getitem(S_K, idx), T.getitem(S_V, idx)
    if S_K.shape[2] != R_K.shape[2] or S_V.shape[2] != R_V.shape[2] or S_K.shape[0] != R_K.shape[0]:
        raise ShapeError(f"aligned sharer {S_K.shape} does not match receiver {R_K.shape}")
    if S_K.shape[1] * S_K.shape[3] + R_K.shape[1] * R_K.shape[3] != config.in_width:
        raise ShapeError(f"pipeline input width does not match configured {config.in_width}")
    train = mode == "train"
    B = R_K.shape[0]
    out = []
    for tag, S, R in (("k", S_K, R_K), ("v", S_V, R_V)):
        g = gumbel_sigmoid_gate(params[f"{tag}.gate"], temperature, mode, rng if (train and noise) else None, B)
        if not train and not g.data.any():
            out.append(R)
        else:
            out.append(_pipeline(params, tag, S, R, g, train))
    return out[0], out[1]
