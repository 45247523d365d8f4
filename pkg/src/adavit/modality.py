"""Modality registry and the dynamic convolution tokenizer (DCT).

Each modality owns a learnable code vector ``m``. A projector shared by all
modalities maps ``m`` to ``2 * E`` numbers, split into a per-output-channel
kernel scaling ``w_mod`` and bias scaling ``b_mod`` of one shared
patch-embedding convolution.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import ParamStore, ShapeError, Tensor


class ModalityError(KeyError):
    """Unknown or duplicate modality id."""


@dataclass
class ModalityVector:
    id: str
    m: Tensor


def _id_seed(seed: int, modality_id: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(modality_id.encode())) % (2**63)


class ModalityRegistry:
    """Ordered modality ids with their code vectors, embeddings and projector.

    All tensors live in ``store`` so the optimizer and checkpoints see them:
    ``modality.projector.w`` [l, 2E], ``modality.projector.b`` [2E],
    ``modality.vec.<id>`` [l] and ``modality.emb.<id>`` [E].

    The projector starts at ``w = 0, b = 1`` so every modality, including
    one registered after training, begins as the identity scaling.
    """

    prefix = "modality"

    def __init__(self, store: ParamStore, embed_dim: int, vec_dim: int = 16,
                 seed: int = 0, dtype=np.float64):
        self.store = store
        self.embed_dim = embed_dim
        self.vec_dim = vec_dim
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.ids: list[str] = []
        pw, pb = f"{self.prefix}.projector.w", f"{self.prefix}.projector.b"
        if pw not in store:
            store.add(pw, np.zeros((vec_dim, 2 * embed_dim), dtype=self.dtype))
            store.add(pb, np.ones(2 * embed_dim, dtype=self.dtype))

    @classmethod
    def attach(cls, store: ParamStore, embed_dim: int, vec_dim: int, ids: Sequence[str],
               seed: int = 0) -> "ModalityRegistry":
        """Rebuild a registry view over a store that already holds its tensors."""
        reg = cls(store, embed_dim, vec_dim, seed, store[f"{cls.prefix}.projector.w"].dtype)
        for mid in ids:
            if f"{cls.prefix}.vec.{mid}" not in store:
                raise ModalityError(mid)
            reg.ids.append(mid)
        return reg

    def __contains__(self, modality_id: str) -> bool:
        return modality_id in self.ids

    def __len__(self) -> int:
        return len(self.ids)

    def register(self, modality_id: str) -> ModalityVector:
        if modality_id in self.ids:
            raise ModalityError(f"modality {modality_id!r} already registered")
        rng = np.random.default_rng(_id_seed(self.seed, modality_id))
        m = self.store.add(f"{self.prefix}.vec.{modality_id}",
                           (0.02 * rng.standard_normal(self.vec_dim)).astype(self.dtype))
        self.store.add(f"{self.prefix}.emb.{modality_id}", np.zeros(self.embed_dim, dtype=self.dtype))
        self.ids.append(modality_id)
        return ModalityVector(modality_id, m)

    def ensure(self, modality_ids) -> list[str]:
        """Register any ids not yet known; returns the newly added ones."""
        added = [mid for mid in modality_ids if mid not in self.ids]
        for mid in added:
            self.register(mid)
        return added

    def vector(self, modality_id: str) -> Tensor:
        self._check(modality_id)
        return self.store[f"{self.prefix}.vec.{modality_id}"]

    def embedding(self, modality_id: str) -> Tensor:
        self._check(modality_id)
        return self.store[f"{self.prefix}.emb.{modality_id}"]

    def order(self, modality_ids) -> list[str]:
        """Sort ``modality_ids`` into registry order."""
        for mid in modality_ids:
            self._check(mid)
        wanted = set(modality_ids)
        return [mid for mid in self.ids if mid in wanted]

    def _check(self, modality_id: str) -> None:
        if modality_id not in self.ids:
            raise ModalityError(f"unknown modality {modality_id!r}")


def project_with(registry: ModalityRegistry, w: Tensor, b: Tensor, modality_id: str,
                 width: int) -> tuple[Tensor, Tensor]:
    """Project a modality vector through ``(w, b)`` and split it in two halves of ``width``."""
    m = registry.vector(modality_id)
    out = T.matmul(T.reshape(m, (1, -1)), w)
    out = T.add(T.reshape(out, (-1,)), b)
    return out[:width], out[width:]


def project_modality(registry: ModalityRegistry, modality_id: str) -> tuple[Tensor, Tensor]:
    """``(w_mod, b_mod)`` for one modality, each of length ``embed_dim``."""
    p = registry.prefix
    return project_with(registry, registry.store[f"{p}.projector.w"], registry.store[f"{p}.projector.b"],
                        modality_id, registry.embed_dim)


@dataclass
class DctParams:
    W: Tensor  # [E, 1, p, p, p]
    B: Tensor  # [E]
    patch_size: int
    embed_dim: int


def init_dct(store: ParamStore, embed_dim: int, patch_size: int, rng: np.random.Generator,
             dtype=np.float64, in_channels: int = 1, prefix: str = "dct") -> DctParams:
    p = patch_size
    fan_in = in_channels * p ** 3
    std = np.sqrt(2.0 / (fan_in + embed_dim))
    W = store.add(f"{prefix}.W", (std * rng.standard_normal((embed_dim, in_channels, p, p, p))).astype(dtype))
    B = store.add(f"{prefix}.B", np.zeros(embed_dim, dtype=dtype))
    return DctParams(W, B, p, embed_dim)


def dct_from_store(store: ParamStore, prefix: str = "dct") -> DctParams:
    W = store[f"{prefix}.W"]
    return DctParams(W, store[f"{prefix}.B"], W.shape[2], W.shape[0])


def patch_grid(shape: Sequence[int], patch_size: int) -> tuple[int, int, int]:
    if len(shape) != 3:
        raise ShapeError(f"expected a 3D volume, got shape {tuple(shape)}")
    for e in shape:
        if e % patch_size:
            raise ShapeError(f"extent {e} not divisible by patch size {patch_size}")
    return tuple(e // patch_size for e in shape)


def plain_patch_embed(dct: DctParams, volume: Tensor) -> Tensor:
    """Unconditioned patch embedding with the base ``(W, B)``: [T, E]."""
    grid = patch_grid(volume.shape, dct.patch_size)
    x = T.reshape(volume, (1,) + volume.shape)
    out = T.conv3d(x, dct.W, dct.B, stride=dct.patch_size)
    return T.transpose(T.reshape(out, (dct.embed_dim, int(np.prod(grid)))), (1, 0))


def dynamic_tokenize(dct: DctParams, registry: ModalityRegistry, volume: Tensor, modality_id: str) -> Tensor:
    """Tokens of one modality volume, [T, E], patches in z-fastest order.

    ``W_updated[c] = W[c] * w_mod[c]`` and ``B_updated[c] = B[c] * b_mod[c]``.
    """
    grid = patch_grid(volume.shape, dct.patch_size)
    w_mod, b_mod = project_modality(registry, modality_id)
    W_upd = T.channel_scale(dct.W, w_mod)
    B_upd = T.mul(dct.B, b_mod)
    x = T.reshape(volume, (1,) + volume.shape)
    out = T.conv3d(x, W_upd, B_upd, stride=dct.patch_size)
    return T.transpose(T.reshape(out, (dct.embed_dim, int(np.prod(grid)))), (1, 0))


def sinusoidal_3d(grid: Sequence[int], embed_dim: int) -> np.ndarray:
    """Fixed sin/cos table: one third of the channels per axis, zero padded."""
    per_axis = 2 * (embed_dim // 6)
    if per_axis == 0:
        raise ValueError("embed_dim too small for a 3D sinusoidal table")
    coords = np.stack(np.meshgrid(*[np.arange(g) for g in grid], indexing="ij"), axis=-1).reshape(-1, 3)
    half = per_axis // 2
    freqs = 1.0 / (10000 ** (np.arange(half) / half))
    parts = []
    for ax in range(3):
        ang = coords[:, ax:ax + 1] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    table = np.concatenate(parts, axis=1)
    pad = embed_dim - table.shape[1]
    return np.pad(table, ((0, 0), (0, pad)))


@dataclass
class EmbeddingTables:
    pos: Tensor  # [gx*gy*gz, E]
    grid: tuple[int, int, int]
    registry: ModalityRegistry
    learnable: bool = True

    def mod_emb(self, modality_id: str) -> Tensor:
        return self.registry.embedding(modality_id)


def init_tables(store: ParamStore, registry: ModalityRegistry, volume_shape: Sequence[int],
                patch_size: int, rng: np.random.Generator, kind: str = "learnable",
                dtype=np.float64) -> EmbeddingTables:
    grid = patch_grid(volume_shape, patch_size)
    n = int(np.prod(grid))
    E = registry.embed_dim
    if kind == "learnable":
        pos = store.add("pos_embed", (0.02 * rng.standard_normal((n, E))).astype(dtype))
    elif kind == "sinusoidal":
        pos = Tensor(sinusoidal_3d(grid, E).astype(dtype))
    else:
        raise ValueError(f"unknown positional embedding {kind!r}")
    return EmbeddingTables(pos, grid, registry, kind == "learnable")


def tables_from_store(store: ParamStore, registry: ModalityRegistry, volume_shape, patch_size,
                      kind: str = "learnable") -> EmbeddingTables:
    grid = patch_grid(volume_shape, patch_size)
    if kind == "learnable":
        pos = store["pos_embed"]
    else:
        pos = Tensor(sinusoidal_3d(grid, registry.embed_dim).astype(registry.dtype))
    return EmbeddingTables(pos, grid, registry, kind == "learnable")


@dataclass
class TokenSequence:
    tokens: Tensor  # [T_total, E]
    provenance: list[tuple[str, int]]
    grid: tuple[int, int, int]
    conv_out: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.provenance)

    @property
    def patch_index(self) -> np.ndarray:
        return np.array([i for _, i in self.provenance], dtype=np.int64)

    @property
    def modalities(self) -> list[str]:
        return list(dict.fromkeys(m for m, _ in self.provenance))

    def permuted(self, perm: Sequence[int]) -> "TokenSequence":
        perm = np.asarray(perm)
        return TokenSequence(T.take_rows(self.tokens, perm), [self.provenance[i] for i in perm], self.grid)


def case_volumes(case) -> Mapping[str, np.ndarray]:
    return case.volumes if hasattr(case, "volumes") else case


def build_case_sequence(dct: DctParams, registry: ModalityRegistry, tables: EmbeddingTables, case,
                        keep: Mapping[str, Sequence[int]] | None = None,
                        modality_embedding: bool = True) -> TokenSequence:
    """Tokenize every modality of ``case`` (registry order) into one sequence.

    Each token gets ``pos[patch]`` and, unless disabled, the modality's
    embedding. With ``keep``, only the listed patch indices of each modality
    survive.
    """
    volumes = case_volumes(case)
    if not volumes:
        raise ValueError("case has no modalities")
    ordered = registry.order(list(volumes))
    shapes = {tuple(np.shape(volumes[m])) for m in ordered}
    if len(shapes) != 1:
        raise ShapeError(f"heterogeneous volume shapes within a case: {sorted(shapes)}")
    grid = patch_grid(next(iter(shapes)), dct.patch_size)
    if grid != tables.grid:
        raise ShapeError(f"volume grid {grid} does not match embedding grid {tables.grid}")
    n = int(np.prod(grid))
    dtype = dct.W.dtype
    pieces, provenance, conv_out = [], [], {}
    for mid in ordered:
        vol = volumes[mid]
        vol = vol if isinstance(vol, Tensor) else Tensor(np.asarray(vol, dtype=dtype))
        toks = dynamic_tokenize(dct, registry, vol, mid)
        conv_out[mid] = toks
        toks = T.add(toks, tables.pos)
        if modality_embedding:
            toks = T.add(toks, registry.embedding(mid))
        idx = np.arange(n) if keep is None else np.sort(np.asarray(keep[mid], dtype=np.int64))
        if keep is not None:
            toks = T.take_rows(toks, idx)
        pieces.append(toks)
        provenance += [(mid, int(i)) for i in idx]
    tokens = pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=0)
    return TokenSequence(tokens, provenance, grid, conv_out)
