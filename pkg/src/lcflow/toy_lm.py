"""A small frozen decoder-only transformer that exposes its KV cache.

Pre-RMSNorm blocks, grouped-query attention with rotary positions, a SiLU-gated
MLP and untied embeddings. Keys are cached *after* rotation, so the cache holds
exactly what attention consumes and adapters edit that representation.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .seeding import stream
from .tensor import Tensor


class InputError(ValueError):
    pass


# ---------------------------------------------------------------- vocab

SPECIALS = ["<pad>", "<bos>", "<eos>", ";", "?", "=", "#"]
LETTERS = ["A", "B", "C", "D"]
DIGITS = [str(i) for i in range(10)]
MAX_KEYS = 24
MAX_VALUES = 16


class Vocab:
    """Fixed symbolic vocabulary shared by every toy model."""

    def __init__(self):
        self.tokens = (SPECIALS + LETTERS + DIGITS
                       + [f"k{i}" for i in range(MAX_KEYS)]
                       + [f"v{i}" for i in range(MAX_VALUES)])
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    def encode(self, tokens) -> list[int]:
        return [self.index[t] for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def key(self, i: int) -> int:
        return self.index[f"k{i}"]

    def value(self, i: int) -> int:
        return self.index[f"v{i}"]

    @property
    def bos(self) -> int:
        return self.index["<bos>"]

    @property
    def eos(self) -> int:
        return self.index["<eos>"]


VOCAB = Vocab()


# ------------------------------------------------------------- geometry


@dataclass(frozen=True)
class ModelGeometry:
    layers: int
    hidden: int
    q_heads: int
    kv_heads: int
    head_dim: int
    vocab: int = len(VOCAB)
    max_seq: int = 128
    mlp: int = 0  # 0 -> 4 * hidden
    rope_base: float = 10000.0

    def __post_init__(self):
        if min(self.layers, self.hidden, self.q_heads, self.kv_heads, self.head_dim, self.vocab) < 1:
            raise ValueError("geometry sizes must be positive")
        if self.q_heads % self.kv_heads:
            raise ValueError("q_heads must be a multiple of kv_heads")
        if self.hidden != self.q_heads * self.head_dim:
            raise ValueError("hidden must equal q_heads * head_dim")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary embeddings")

    @property
    def mlp_dim(self) -> int:
        return self.mlp or 4 * self.hidden

    @property
    def kv_width(self) -> int:
        """Flattened K (or V) width per token: kv_heads * head_dim."""
        return self.kv_heads * self.head_dim

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------- cache


class KVCache:
    """Per-layer keys/values of shape (batch, kv_heads, N, head_dim).

    ``last_logits`` holds next-token logits (batch, vocab) after the most recent
    forward pass, which lets generation resume from a cache alone.
    """

    def __init__(self, keys: list[Tensor], values: list[Tensor], last_logits: np.ndarray | None = None):
        if len(keys) != len(values):
            raise ValueError("keys and values must have one entry per layer")
        self.keys = list(keys)
        self.values = list(values)
        self.last_logits = last_logits

    def __len__(self) -> int:
        return self.keys[0].shape[2] if self.keys else 0

    @property
    def layers(self) -> int:
        return len(self.keys)

    def layer(self, i: int) -> tuple[Tensor, Tensor]:
        return self.keys[i], self.values[i]

    def copy(self) -> "KVCache":
        return KVCache(self.keys, self.values, self.last_logits)

    def detach(self) -> "KVCache":
        return KVCache([k.detach() for k in self.keys], [v.detach() for v in self.values], self.last_logits)


# --------------------------------------------------------------- model


def _rope_tables(geom: ModelGeometry) -> tuple[np.ndarray, np.ndarray]:
    half = geom.head_dim // 2
    inv = geom.rope_base ** (-np.arange(half) / half)
    ang = np.outer(np.arange(geom.max_seq), inv)
    return np.cos(ang), np.sin(ang)


class ToyLM:
    def __init__(self, geometry: ModelGeometry, params: dict[str, Tensor]):
        self.geometry = geometry
        self.params = params
        self._cos, self._sin = _rope_tables(geometry)

    @classmethod
    def init(cls, geometry: ModelGeometry, seed: int) -> "ToyLM":
        g = geometry
        rng = stream(seed, "init")
        p: dict[str, Tensor] = {}

        def w(name, shape, std):
            p[name] = Tensor(rng.standard_normal(shape) * std)

        w("embed", (g.vocab, g.hidden), 1.0)
        for i in range(g.layers):
            pre = f"layers.{i}."
            p[pre + "attn_norm"] = Tensor(np.ones(g.hidden))
            w(pre + "wq", (g.hidden, g.q_heads * g.head_dim), g.hidden ** -0.5)
            w(pre + "wk", (g.hidden, g.kv_width), g.hidden ** -0.5)
            w(pre + "wv", (g.hidden, g.kv_width), g.hidden ** -0.5)
            w(pre + "wo", (g.q_heads * g.head_dim, g.hidden), (2 * g.layers * g.hidden) ** -0.5)
            p[pre + "mlp_norm"] = Tensor(np.ones(g.hidden))
            w(pre + "w_gate", (g.hidden, g.mlp_dim), g.hidden ** -0.5)
            w(pre + "w_up", (g.hidden, g.mlp_dim), g.hidden ** -0.5)
            w(pre + "w_down", (g.mlp_dim, g.hidden), (2 * g.layers * g.mlp_dim) ** -0.5)
        p["final_norm"] = Tensor(np.ones(g.hidden))
        w("unembed", (g.hidden, g.vocab), g.hidden ** -0.5)
        return cls(geometry, p)

    # -- bookkeeping

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    # -- forward

    def _check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.size == 0:
            raise InputError("token sequence must be non-empty")
        if ids.min() < 0 or ids.max() >= self.geometry.vocab:
            raise InputError(f"token id outside vocabulary of size {self.geometry.vocab}")
        return ids

    def forward(self, tokens, past: KVCache | None = None) -> tuple[Tensor, KVCache]:
        """Run ``tokens`` (batch, T) after an optional cache.

        Returns logits (batch, T, vocab) and a new cache covering past + T.
        """
        g, p = self.geometry, self.params
        ids = self._check_tokens(tokens)
        B, n = ids.shape
        start = len(past) if past is not None else 0
        if start + n > g.max_seq:
            raise InputError(f"sequence length {start + n} exceeds max_seq {g.max_seq}")
        dt = p["embed"].data.dtype
        cos = self._cos[start:start + n].astype(dt)
        sin = self._sin[start:start + n].astype(dt)
        total = start + n
        mask = np.where(np.arange(total)[None, :] <= (start + np.arange(n))[:, None], 0.0, -np.inf)
        mask = Tensor(mask, dtype=dt)
        group = g.q_heads // g.kv_heads
        scale = 1.0 / np.sqrt(g.head_dim)

        h = T.take_rows(p["embed"], ids)
        keys, values = [], []
        for i in range(g.layers):
            pre = f"layers.{i}."
            a = T.rms_norm(h, p[pre + "attn_norm"])
            q = T.linear(a, p[pre + "wq"]).reshape(B, n, g.q_heads, g.head_dim).transpose(0, 2, 1, 3)
            k = T.linear(a, p[pre + "wk"]).reshape(B, n, g.kv_heads, g.head_dim).transpose(0, 2, 1, 3)
            v = T.linear(a, p[pre + "wv"]).reshape(B, n, g.kv_heads, g.head_dim).transpose(0, 2, 1, 3)
            q = T.rotary(q, cos, sin)
            k = T.rotary(k, cos, sin)
            if past is not None:
                k = T.concat([past.keys[i], k], axis=2)
                v = T.concat([past.values[i], v], axis=2)
            keys.append(k)
            values.append(v)
            o = attend(q, k, v, mask, group, scale)
            o = o.transpose(0, 2, 1, 3).reshape(B, n, g.q_heads * g.head_dim)
            h = h + T.linear(o, p[pre + "wo"])
            m = T.rms_norm(h, p[pre + "mlp_norm"])
            ff = T.silu(T.linear(m, p[pre + "w_gate"])) * T.linear(m, p[pre + "w_up"])
            h = h + T.linear(ff, p[pre + "w_down"])
        h = T.rms_norm(h, p["final_norm"])
        logits = T.linear(h, p["unembed"])
        return logits, KVCache(keys, values, logits.data[:, -1, :])

    def prefill_with_cache(self, tokens) -> tuple[np.ndarray, KVCache]:
        """Prefill one sequence; returns final-position logits (vocab,) and the cache."""
        if np.asarray(tokens).ndim != 1:
            raise InputError("prefill_with_cache takes a single token sequence")
        logits, cache = self.forward(tokens)
        return logits.data[0, -1], cache


def attend(q: Tensor, k: Tensor, v: Tensor, mask: Tensor, group: int, scale: float) -> Tensor:
    """Grouped-query attention; query head j reads KV head ``j // group``.

    q (B, Hq, n, D); k, v (B, Hkv, M, D); mask (n, M) additive.
    """
    B, Hq, n, D = q.shape
    Hkv, M = k.shape[1], k.shape[2]
    qg = q.reshape(B, Hkv, group, n, D)
    kt = k.transpose(0, 1, 3, 2).reshape(B, Hkv, 1, D, M)
    scores = T.matmul(qg, kt) * scale + mask
    w = T.softmax_lastdim(scores)
    o = T.matmul(w, v.reshape(B, Hkv, 1, M, D))
    return o.reshape(B, Hq, n, D)


def decode_greedy(model: ToyLM, cache: KVCache, max_new: int, stop_id: int | None = None) -> list[int]:
    """Argmax decoding from ``cache.last_logits``; extends ``cache`` in place."""
    if len(cache) == 0 or cache.last_logits is None:
        raise InputError("decode_greedy needs a non-empty cache with pending logits")
    out: list[int] = []
    with T.no_grad():
        for _ in range(max_new):
            nxt = int(np.argmax(cache.last_logits[0]))
            out.append(nxt)
            if nxt == stop_id or len(out) == max_new:
                break
            _, new = model.forward([nxt], past=cache)
            cache.keys, cache.values, cache.last_logits = new.keys, new.values, new.last_logits
    return out


def mcq_logit_score(final_logits, choice_token_ids) -> int:
    """Index of the highest-logit choice; ties go to the lowest index."""
    ids = list(choice_token_ids)
    if len(ids) < 2:
        raise InputError("need at least two choices")
    if len(set(ids)) != len(ids):
        raise InputError("duplicate choice token ids")
    scores = np.asarray(final_logits)[ids]
    return int(np.argmax(scores))


# ------------------------------------------------------ constructed base

LOOKUP_GEOMETRY = ModelGeometry(layers=4, hidden=128, q_heads=2, kv_heads=2, head_dim=64, max_seq=128)

# Residual-stream layout of the constructed lookup model.
_TOK = 0            # one-hot token identity, len(VOCAB) dims
_CONST = 61         # constant 1
_PREV_KEY = 62      # previous token, if a key: 24 dims
_PREV_NONE = 86     # previous token is not a key
_PREV_HASH = 87     # previous token is '#'
_RETR = 88          # retrieved value: 16 dims
_RETR_DIGIT = 104   # digit after '#': 10 dims


def build_lookup_model(seed: int = 0, mcq_head: bool = False) -> ToyLM:
    """Frozen base model with analytically set weights for in-context lookup.

    Layer 0 holds a previous-token head (a rotary phase offset of one
    position); layer 1 holds an induction head that finds the position whose
    previous token equals the current previous token and copies the value
    there into a dedicated residual slot. With ``mcq_head`` a second layer-1
    head copies the digit following ``#``. Layers 2 and 3 are attention-sink
    layers with random projections: they leave the output unchanged, but
    their caches carry the retrieved answer and edits to their values reach
    the residual stream through a full-rank output map.
    """
    g = LOOKUP_GEOMETRY
    assert len(VOCAB) <= _CONST
    model = ToyLM.init(g, seed)
    p = {k: v.data for k, v in model.params.items()}
    D, half = g.head_dim, g.head_dim // 2
    theta = g.rope_base ** (-np.arange(half) / half)
    rng = stream(seed, "init", 7)

    emb = np.zeros((g.vocab, g.hidden))
    emb[np.arange(g.vocab), _TOK + np.arange(g.vocab)] = 1.0
    emb[:, _CONST] = 1.0
    p["embed"] = emb
    for i in (0, 1):
        for name in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"):
            p[f"layers.{i}.{name}"] = np.zeros_like(p[f"layers.{i}.{name}"])

    # layer 0: previous-token head; input rms = sqrt(2/h)
    s0 = np.sqrt(2 / g.hidden)
    wq, wk, wv, wo = (p[f"layers.0.{n}"] for n in ("wq", "wk", "wv", "wo"))
    amp = 10.0
    for j in range(8):
        wq[_CONST, j] = amp * amp * np.cos(theta[j]) * s0
        wq[_CONST, j + half] = -amp * amp * np.sin(theta[j]) * s0
        wk[_CONST, j] = s0
    for t, name in enumerate(VOCAB.tokens):
        if name.startswith("k") and name[1:].isdigit():
            slot = int(name[1:])
        elif name == "#":
            slot = 25
        else:
            slot = 24
        wv[_TOK + t, slot] = s0
    for i in range(24):
        wo[i, _PREV_KEY + i] = 1.0
    wo[24, _PREV_NONE] = 1.0
    wo[25, _PREV_HASH] = 1.0

    # layer 1: induction head (head 0) and optional digit head (head 1); input rms = sqrt(3/h)
    s1 = np.sqrt(3 / g.hidden)
    wq, wk, wv, wo = (p[f"layers.1.{n}"] for n in ("wq", "wk", "wv", "wo"))
    match = 15.0
    low = [j for j in range(half - 12, half)]
    key_dims = low + [j + half for j in low]
    for i in range(24):
        wq[_PREV_KEY + i, key_dims[i]] = match * match * s1
        wk[_PREV_KEY + i, key_dims[i]] = s1
    penalty = 15.5
    wq[_CONST, half - 13] = penalty * penalty * s1
    wk[_TOK + VOCAB["="], half - 13] = -s1
    for i in range(MAX_VALUES):
        wv[_TOK + VOCAB.value(i), i] = s1
        wo[i, _RETR + i] = 1.0
    if mcq_head:
        wq[_CONST, D + half - 1] = penalty * penalty * s1
        wk[_PREV_HASH, D + half - 1] = s1
        for d in range(10):
            wv[_TOK + VOCAB[str(d)], D + d] = s1
            wo[D + d, _RETR_DIGIT + d] = 1.0

    # cached keys stay O(1); the score gain sits on the (uncached) queries
    # layers 2-3: every query attends to <bos>, whose value vector is exactly
    # zero, so the base output is untouched while the caches carry random
    # projections of the residual stream
    s2 = 1.0 / np.sqrt(g.hidden)
    sink = 15.5
    for i in (2, 3):
        wq = np.zeros_like(p[f"layers.{i}.wq"])
        wk = rng.standard_normal(p[f"layers.{i}.wk"].shape) * s2
        wv = rng.standard_normal(p[f"layers.{i}.wv"].shape) * s2
        for h in range(g.q_heads):
            wq[_CONST, h * D + half - 1] = sink * sink * s1
        for h in range(g.kv_heads):
            wk[:, h * D + half - 1] = 0.0
            wk[_TOK + VOCAB.bos, h * D + half - 1] = s1
        wv[[_TOK + VOCAB.bos, _CONST, _PREV_NONE]] = 0.0
        p[f"layers.{i}.wq"], p[f"layers.{i}.wk"], p[f"layers.{i}.wv"] = wq, wk, wv
        p[f"layers.{i}.wo"] = rng.standard_normal(p[f"layers.{i}.wo"].shape) * s2
        p[f"layers.{i}.w_down"] = np.zeros_like(p[f"layers.{i}.w_down"])

    unembed = np.zeros((g.hidden, g.vocab))
    readout = 2.0
    for i in range(MAX_VALUES):
        unembed[_RETR + i, VOCAB.value(i)] = readout
        unembed[_TOK + VOCAB.value(i), VOCAB.eos] = readout
    for d in range(10):
        unembed[_RETR_DIGIT + d, VOCAB[LETTERS[d % 4]]] = readout
    p["unembed"] = unembed

    dt = model.params["embed"].data.dtype
    return ToyLM(g, {k: Tensor(v, dtype=dt) for k, v in p.items()})
