"""Model assemblies: the AdaViT segmenter and the channel-concat ViT baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .decoder import SegHeadConfig, concat_stem, decode, fused_levels, init_seg_head, segment
from .encoder import EncoderConfig, EncoderOutput, PRESETS, default_taps, encode, init_encoder
from .modality import (
    DctParams, ModalityRegistry, TokenSequence, build_case_sequence, case_volumes, dct_from_store,
    init_dct, init_tables, patch_grid, tables_from_store,
)
from .tensor import ParamStore, ShapeError, Tensor


@dataclass
class ModelConfig:
    volume_shape: tuple[int, int, int] = (32, 32, 32)
    patch_size: int = 8
    embed_dim: int = 96
    num_heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    tap_layers: list[int] = field(default_factory=list)
    modality_dim: int = 16
    pos_embedding: str = "learnable"
    encoder_modality_embedding: bool = True
    num_classes: int = 1
    fusion: str = "max"
    feature_size: int = 8
    activation: str = "sigmoid"
    dtype: str = "float32"

    def __post_init__(self):
        self.volume_shape = tuple(self.volume_shape)
        patch_grid(self.volume_shape, self.patch_size)
        if not self.tap_layers:
            self.tap_layers = default_taps(self.depth, self.seg_config().levels)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        return cls(**{**PRESETS[name], **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["volume_shape"] = list(self.volume_shape)
        return d

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.embed_dim, self.num_heads, self.depth, self.mlp_ratio, list(self.tap_layers))

    def seg_config(self) -> SegHeadConfig:
        return SegHeadConfig(self.num_classes, self.fusion, self.feature_size, self.patch_size,
                             self.volume_shape, self.activation)

    @property
    def grid(self) -> tuple[int, int, int]:
        return patch_grid(self.volume_shape, self.patch_size)


class AdaViT:
    """DCT tokenizer + global-attention encoder + fused UNETR head.

    Parameters (including modality vectors) live in one :class:`ParamStore`;
    any nonempty subset of registered modalities can be segmented with it.
    """

    kind = "adavit"

    def __init__(self, cfg: ModelConfig, modalities: Sequence[str] = (), seed: int = 0,
                 store: ParamStore | None = None, with_seg_head: bool = True):
        self.cfg = cfg
        self.seed = seed
        self.enc_cfg = cfg.encoder_config()
        self.seg_cfg = cfg.seg_config()
        dtype = cfg.np_dtype
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng(seed)
            self.registry = ModalityRegistry(store, cfg.embed_dim, cfg.modality_dim, seed, dtype)
            self.dct = init_dct(store, cfg.embed_dim, cfg.patch_size, rng, dtype)
            self.tables = init_tables(store, self.registry, cfg.volume_shape, cfg.patch_size, rng,
                                      cfg.pos_embedding, dtype)
            init_encoder(store, self.enc_cfg, rng, dtype)
            if with_seg_head:
                init_seg_head(store, self.seg_cfg, cfg.embed_dim, rng, dtype, vec_dim=cfg.modality_dim)
            self.store = store
            for mid in modalities:
                self.registry.register(mid)
        else:
            self.store = store
            self.registry = ModalityRegistry.attach(store, cfg.embed_dim, cfg.modality_dim, modalities, seed)
            self.dct = dct_from_store(store)
            self.tables = tables_from_store(store, self.registry, cfg.volume_shape, cfg.patch_size,
                                            cfg.pos_embedding)

    @property
    def modalities(self) -> list[str]:
        return list(self.registry.ids)

    def register_modality(self, modality_id: str) -> None:
        self.registry.register(modality_id)

    def sequence(self, case, keep=None) -> TokenSequence:
        return build_case_sequence(self.dct, self.registry, self.tables, case, keep,
                                   self.cfg.encoder_modality_embedding)

    def encode(self, case, keep=None) -> EncoderOutput:
        return encode(self.enc_cfg, self.store, self.sequence(case, keep))

    def forward(self, case) -> Tensor:
        """Probabilities ``[C, X, Y, Z]``."""
        self._check_case(case)
        enc = self.encode(case)
        return segment(self.seg_cfg, self.store, self.registry, enc, case, self.cfg.tap_layers, self.cfg.grid)

    __call__ = forward

    def _check_case(self, case) -> None:
        vols = case_volumes(case)
        if not vols:
            raise ValueError("case has no modalities")
        for v in vols.values():
            if tuple(np.shape(v)) != self.cfg.volume_shape:
                raise ShapeError(f"volume shape {np.shape(v)} != configured {self.cfg.volume_shape}")


class IncompatibleInputError(ShapeError):
    """The baseline got a modality set it was not built for."""

    def __init__(self, expected, got):
        self.expected, self.got = list(expected), list(got)
        super().__init__(f"channel mismatch: model expects {self.expected}, case has {self.got}")


class ConcatViT:
    """Standard ViT + UNETR head with modalities stacked as input channels.

    The modality list is fixed at construction. Missing modalities are an
    error unless ``zero_fill`` is set, in which case they become all-zero
    volumes.
    """

    kind = "concat"

    def __init__(self, cfg: ModelConfig, modalities: Sequence[str], seed: int = 0,
                 store: ParamStore | None = None, zero_fill: bool = False):
        self.cfg = cfg
        self.seed = seed
        self.channels = list(modalities)
        self.zero_fill = zero_fill
        self.enc_cfg = cfg.encoder_config()
        self.seg_cfg = cfg.seg_config()
        dtype = cfg.np_dtype
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng(seed)
            init_dct(store, cfg.embed_dim, cfg.patch_size, rng, dtype, in_channels=len(self.channels),
                     prefix="patch_embed")
            init_tables(store, _NoRegistry(cfg.embed_dim, dtype), cfg.volume_shape, cfg.patch_size, rng,
                        cfg.pos_embedding, dtype)
            init_encoder(store, self.enc_cfg, rng, dtype)
            init_seg_head(store, self.seg_cfg, cfg.embed_dim, rng, dtype, in_channels=len(self.channels))
        self.store = store
        self.dct = dct_from_store(store, "patch_embed")
        self.tables = tables_from_store(store, _NoRegistry(cfg.embed_dim, dtype), cfg.volume_shape,
                                        cfg.patch_size, cfg.pos_embedding)

    @property
    def modalities(self) -> list[str]:
        return list(self.channels)

    def stack_input(self, case) -> Tensor:
        vols = case_volumes(case)
        extra = [m for m in vols if m not in self.channels]
        missing = [m for m in self.channels if m not in vols]
        if extra or (missing and not self.zero_fill):
            raise IncompatibleInputError(self.channels, list(vols))
        dtype = self.cfg.np_dtype
        shape = self.cfg.volume_shape
        chans = [np.asarray(vols[m], dtype=dtype) if m in vols else np.zeros(shape, dtype=dtype)
                 for m in self.channels]
        return Tensor(np.stack(chans, axis=0))

    def forward(self, case) -> Tensor:
        x = self.stack_input(case)
        out = T.conv3d(x, self.dct.W, self.dct.B, stride=self.cfg.patch_size)
        n = int(np.prod(self.cfg.grid))
        toks = T.add(T.transpose(T.reshape(out, (self.cfg.embed_dim, n)), (1, 0)), self.tables.pos)
        seq = TokenSequence(toks, [("concat", i) for i in range(n)], self.cfg.grid)
        enc = encode(self.enc_cfg, self.store, seq)
        levels = fused_levels(self.seg_cfg, enc, self.cfg.tap_layers, self.cfg.grid)
        return decode(self.seg_cfg, self.store, levels, concat_stem(self.store, x))

    __call__ = forward


class _NoRegistry:
    """Minimal stand-in so the concat baseline can reuse the embedding tables."""

    def __init__(self, embed_dim, dtype):
        self.embed_dim = embed_dim
        self.dtype = np.dtype(dtype)
