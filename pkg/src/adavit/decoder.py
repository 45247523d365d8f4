"""UNETR-style segmentation head with modality fusion at every tapped level."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import EncoderOutput
from .modality import ModalityRegistry, case_volumes, project_with
from .tensor import ParamStore, ShapeError, Tensor


@dataclass
class SegHeadConfig:
    num_classes: int = 1
    fusion: str = "max"
    feature_size: int = 8
    patch_size: int = 8
    volume_shape: tuple[int, int, int] = (32, 32, 32)
    activation: str = "sigmoid"

    def __post_init__(self):
        self.volume_shape = tuple(self.volume_shape)
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.fusion not in ("max", "mean"):
            raise ValueError(f"fusion must be 'max' or 'mean', got {self.fusion!r}")
        if self.activation not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.patch_size & (self.patch_size - 1) or self.patch_size < 2:
            raise ValueError("patch_size must be a power of two >= 2")

    @property
    def levels(self) -> int:
        return int(math.log2(self.patch_size))

    @property
    def channels(self) -> list[int]:
        return [self.feature_size * 2 ** k for k in range(self.levels + 1)]


class CoverageError(ShapeError):
    """A patch position received no token to fuse."""


def fuse_modalities(tokens: Tensor, provenance: Sequence[tuple[str, int]], grid, fusion: str = "max") -> Tensor:
    """Collapse the modality axis: ``[T_total, E]`` -> ``[E, gx, gy, gz]``.

    Every patch index takes the elementwise max (or mean) over all tokens
    carrying that index.
    """
    n = int(np.prod(grid))
    idx = np.fromiter((i for _, i in provenance), dtype=np.int64, count=len(provenance))
    if idx.size != tokens.shape[0]:
        raise ShapeError("provenance length does not match token count")
    if idx.size == 0 or np.any(np.bincount(idx, minlength=n)[:n] == 0) or idx.max() >= n:
        raise CoverageError("some patch index has no contributing token")
    fused = T.segment_reduce(tokens, idx, n, fusion)
    E = tokens.shape[1]
    return T.reshape(T.transpose(fused, (1, 0)), (E,) + tuple(grid))


def _he(rng, shape, fan_in, dtype):
    return (math.sqrt(2.0 / fan_in) * rng.standard_normal(shape)).astype(dtype)


def init_seg_head(store: ParamStore, cfg: SegHeadConfig, embed_dim: int, rng: np.random.Generator,
                  dtype=np.float64, in_channels: int = 1, vec_dim: int | None = None,
                  prefix: str = "seg") -> None:
    """Decoder weights. ``vec_dim`` adds the modality-conditioned stem projector."""
    ch, L, E = cfg.channels, cfg.levels, embed_dim
    store.add(f"{prefix}.stem.W", _he(rng, (ch[0], in_channels, 3, 3, 3), 27 * in_channels, dtype))
    store.add(f"{prefix}.stem.B", np.zeros(ch[0], dtype=dtype))
    if vec_dim is not None:
        store.add(f"{prefix}.stem.projector.w", np.zeros((vec_dim, 2 * ch[0]), dtype=dtype))
        store.add(f"{prefix}.stem.projector.b", np.ones(2 * ch[0], dtype=dtype))
    store.add(f"{prefix}.bottleneck.W", _he(rng, (ch[L], E, 1, 1, 1), E, dtype))
    store.add(f"{prefix}.bottleneck.B", np.zeros(ch[L], dtype=dtype))
    for k in range(1, L):
        c_in = E
        for j in range(L - k):
            store.add(f"{prefix}.skip{k}.up{j}.W", _he(rng, (c_in, ch[k], 2, 2, 2), c_in, dtype))
            store.add(f"{prefix}.skip{k}.up{j}.B", np.zeros(ch[k], dtype=dtype))
            c_in = ch[k]
    for k in range(L - 1, -1, -1):
        store.add(f"{prefix}.up{k}.W", _he(rng, (ch[k + 1], ch[k], 2, 2, 2), ch[k + 1], dtype))
        store.add(f"{prefix}.up{k}.B", np.zeros(ch[k], dtype=dtype))
        store.add(f"{prefix}.conv{k}.W", _he(rng, (ch[k], 2 * ch[k], 3, 3, 3), 27 * 2 * ch[k], dtype))
        store.add(f"{prefix}.conv{k}.B", np.zeros(ch[k], dtype=dtype))
    store.add(f"{prefix}.out.W", _he(rng, (cfg.num_classes, ch[0], 1, 1, 1), ch[0], dtype))
    store.add(f"{prefix}.out.B", np.zeros(cfg.num_classes, dtype=dtype))


def tap_slots(cfg: SegHeadConfig, tap_layers: Sequence[int]) -> list[int]:
    """Encoder layers feeding decoder levels 1..L (the last one is the bottleneck)."""
    L = cfg.levels
    taps = sorted(tap_layers)
    if len(taps) < L:
        raise ValueError(f"decoder with {L} levels needs >= {L} tapped layers, got {taps}")
    return taps[-L:]


def dynamic_stem(cfg: SegHeadConfig, store: ParamStore, registry: ModalityRegistry, case,
                 prefix: str = "seg") -> Tensor:
    """Modality-conditioned 3x3x3 conv on each volume, fused over modalities."""
    volumes = case_volumes(case)
    W, B = store[f"{prefix}.stem.W"], store[f"{prefix}.stem.B"]
    pw, pb = store[f"{prefix}.stem.projector.w"], store[f"{prefix}.stem.projector.b"]
    c0 = W.shape[0]
    feats = []
    for mid in registry.order(list(volumes)):
        vol = volumes[mid]
        x = vol if isinstance(vol, Tensor) else Tensor(np.asarray(vol, dtype=W.dtype))
        w_mod, b_mod = project_with(registry, pw, pb, mid, c0)
        y = T.conv3d(T.reshape(x, (1,) + x.shape), T.channel_scale(W, w_mod), T.mul(B, b_mod), padding=1)
        feats.append(y)
    if len(feats) == 1:
        fused = feats[0]
    elif cfg.fusion == "max":
        fused = T.max_over_axis(T.stack(feats, axis=0), axis=0)
    else:
        fused = T.mean(T.stack(feats, axis=0), axis=0)
    return T.gelu(fused)


def concat_stem(store: ParamStore, x: Tensor, prefix: str = "seg") -> Tensor:
    return T.gelu(T.conv3d(x, store[f"{prefix}.stem.W"], store[f"{prefix}.stem.B"], padding=1))


def decode(cfg: SegHeadConfig, store: ParamStore, levels: Sequence[Tensor], stem: Tensor,
           prefix: str = "seg") -> Tensor:
    """Decoder body: ``levels[i]`` is the fused grid feeding level ``i + 1``.

    Returns probabilities ``[C, X, Y, Z]``.
    """
    L = cfg.levels
    p = lambda name: store[f"{prefix}.{name}"]
    d = T.gelu(T.conv3d(levels[L - 1], p("bottleneck.W"), p("bottleneck.B"), stride=1))
    skips = {0: stem}
    for k in range(1, L):
        s = levels[k - 1]
        for j in range(L - k):
            s = T.gelu(T.transposed_conv3d(s, p(f"skip{k}.up{j}.W"), p(f"skip{k}.up{j}.B"), stride=2))
        skips[k] = s
    for k in range(L - 1, -1, -1):
        up = T.transposed_conv3d(d, p(f"up{k}.W"), p(f"up{k}.B"), stride=2)
        d = T.gelu(T.conv3d(T.concat([up, skips[k]], axis=0), p(f"conv{k}.W"), p(f"conv{k}.B"), padding=1))
    logits = T.conv3d(d, p("out.W"), p("out.B"), stride=1)
    if cfg.activation == "softmax" and cfg.num_classes > 1:
        C = cfg.num_classes
        flat = T.transpose(T.reshape(logits, (C, -1)), (1, 0))
        probs = T.transpose(T.softmax(flat, axis=-1), (1, 0))
        return T.reshape(probs, logits.shape)
    return T.sigmoid(logits)


def fused_levels(cfg: SegHeadConfig, enc_out: EncoderOutput, tap_layers: Sequence[int], grid) -> list[Tensor]:
    return [fuse_modalities(enc_out.taps[t], enc_out.provenance, grid, cfg.fusion)
            for t in tap_slots(cfg, tap_layers)]


def segment(cfg: SegHeadConfig, store: ParamStore, registry: ModalityRegistry, enc_out: EncoderOutput,
            case, tap_layers: Sequence[int], grid, prefix: str = "seg") -> Tensor:
    """Voxelwise class probabilities ``[C, X, Y, Z]`` for one case."""
    levels = fused_levels(cfg, enc_out, tap_layers, grid)
    stem = dynamic_stem(cfg, store, registry, case, prefix)
    return decode(cfg, store, levels, stem, prefix)
