"""Pre-norm transformer encoder with global self-attention over all tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .modality import TokenSequence
from .tensor import ParamStore, Tensor

PRESETS = {
    "desk": dict(embed_dim=96, num_heads=4, depth=4),
    "base": dict(embed_dim=768, num_heads=12, depth=12),
    "large": dict(embed_dim=1024, num_heads=16, depth=24),
    "huge": dict(embed_dim=1280, num_heads=16, depth=32),
}


def default_taps(depth: int, levels: int) -> list[int]:
    """``levels`` evenly spaced layers ending at ``depth`` (3,6,9,12 for 12/4)."""
    taps = sorted({max(1, round(depth * k / levels)) for k in range(1, levels + 1)})
    return taps


@dataclass
class EncoderConfig:
    embed_dim: int = 96
    num_heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    tap_layers: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not self.tap_layers:
            self.tap_layers = default_taps(self.depth, 4)
        self.tap_layers = sorted(self.tap_layers)
        if self.tap_layers[0] < 1 or self.tap_layers[-1] > self.depth:
            raise ValueError(f"tap layers {self.tap_layers} outside 1..{self.depth}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "EncoderConfig":
        return cls(**{**PRESETS[name], **overrides})

    def block_param_count(self) -> int:
        E, h = self.embed_dim, self.mlp_ratio * self.embed_dim
        attn = E * 3 * E + 3 * E + E * E + E
        mlp = E * h + h + h * E + E
        norms = 4 * E
        return attn + mlp + norms

    def param_count(self) -> int:
        return self.depth * self.block_param_count()


@dataclass
class EncoderOutput:
    final: Tensor
    taps: dict[int, Tensor]
    provenance: list[tuple[str, int]]


def _param(store: ParamStore, name: str, shape, init, rng, dtype, meta: bool):
    if meta:
        return store.add(name, np.broadcast_to(np.zeros((), dtype=dtype), shape))
    if init == "normal":
        value = 0.02 * rng.standard_normal(shape)
    elif init == "ones":
        value = np.ones(shape)
    else:
        value = np.zeros(shape)
    return store.add(name, value.astype(dtype))


def init_linear(store, name, n_in, n_out, rng, dtype=np.float64, meta=False):
    _param(store, f"{name}.w", (n_in, n_out), "normal", rng, dtype, meta)
    _param(store, f"{name}.b", (n_out,), "zeros", rng, dtype, meta)


def init_layer_norm(store, name, dim, rng, dtype=np.float64, meta=False):
    _param(store, f"{name}.g", (dim,), "ones", rng, dtype, meta)
    _param(store, f"{name}.b", (dim,), "zeros", rng, dtype, meta)


def init_blocks(store: ParamStore, prefix: str, embed_dim: int, depth: int, mlp_ratio: int,
                rng: np.random.Generator, dtype=np.float64, meta: bool = False) -> None:
    E = embed_dim
    for i in range(depth):
        b = f"{prefix}.blocks.{i}"
        init_layer_norm(store, f"{b}.ln1", E, rng, dtype, meta)
        init_linear(store, f"{b}.attn.qkv", E, 3 * E, rng, dtype, meta)
        init_linear(store, f"{b}.attn.proj", E, E, rng, dtype, meta)
        init_layer_norm(store, f"{b}.ln2", E, rng, dtype, meta)
        init_linear(store, f"{b}.mlp.fc1", E, mlp_ratio * E, rng, dtype, meta)
        init_linear(store, f"{b}.mlp.fc2", mlp_ratio * E, E, rng, dtype, meta)


def init_encoder(store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float64, meta: bool = False, prefix: str = "encoder") -> None:
    """Add encoder weights to ``store``.

    With ``meta=True`` every tensor is a zero-stride view, so the large
    presets can be built for shape and count checks without allocating.
    """
    init_blocks(store, prefix, cfg.embed_dim, cfg.depth, cfg.mlp_ratio, rng, dtype, meta)


def linear(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return T.add(T.matmul(x, store[f"{name}.w"]), store[f"{name}.b"])


def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
              proj_w: Tensor | None = None, proj_b: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention per head on ``[T, E]`` inputs."""
    n, E = q.shape
    dh = E // num_heads

    def heads(x):
        return T.transpose(T.reshape(x, (n, num_heads, dh)), (1, 0, 2))

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = T.mul(T.matmul(qh, T.swap_last(kh)), 1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    out = T.reshape(T.transpose(T.matmul(weights, vh), (1, 0, 2)), (n, E))
    if proj_w is not None:
        out = T.matmul(out, proj_w)
        if proj_b is not None:
            out = T.add(out, proj_b)
    return out


def self_attention(x: Tensor, store: ParamStore, name: str, num_heads: int) -> Tensor:
    E = x.shape[1]
    qkv = linear(x, store, f"{name}.qkv")
    q, k, v = qkv[:, :E], qkv[:, E:2 * E], qkv[:, 2 * E:]
    return attention(q, k, v, num_heads, store[f"{name}.proj.w"], store[f"{name}.proj.b"])


def block(x: Tensor, store: ParamStore, name: str, num_heads: int) -> Tensor:
    h = T.layer_norm(x, store[f"{name}.ln1.g"], store[f"{name}.ln1.b"])
    x = T.add(x, self_attention(h, store, f"{name}.attn", num_heads))
    h = T.layer_norm(x, store[f"{name}.ln2.g"], store[f"{name}.ln2.b"])
    h = linear(T.gelu(linear(h, store, f"{name}.mlp.fc1")), store, f"{name}.mlp.fc2")
    return T.add(x, h)


def run_blocks(x: Tensor, store: ParamStore, prefix: str, depth: int, num_heads: int,
               taps=()) -> tuple[Tensor, dict[int, Tensor]]:
    captured = {}
    wanted = set(taps)
    for i in range(depth):
        x = block(x, store, f"{prefix}.blocks.{i}", num_heads)
        if i + 1 in wanted:
            captured[i + 1] = x
    return x, captured


def encode(cfg: EncoderConfig, store: ParamStore, seq: TokenSequence, prefix: str = "encoder") -> EncoderOutput:
    """Run all blocks over the full token sequence; no attention mask."""
    if len(seq) < 1:
        raise ValueError("cannot encode an empty token sequence")
    final, taps = run_blocks(seq.tokens, store, prefix, cfg.depth, cfg.num_heads, cfg.tap_layers)
    return EncoderOutput(final, taps, list(seq.provenance))
