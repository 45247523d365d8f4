"""Masked-autoencoder pretraining over variable modality sets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .encoder import init_blocks, init_layer_norm, init_linear, linear, run_blocks
from .model import AdaViT, ModelConfig
from .modality import case_volumes, patch_grid
from .tensor import ParamStore, Tensor


@dataclass
class MaeConfig:
    ratio: float = 0.7
    decoder_depth: int = 4
    decoder_heads: int = 4
    decoder_dim: int | None = None  # defaults to embed_dim // 2
    loss_all_patches: bool = False
    norm_pix_loss: bool = False

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"mask ratio must be in [0, 1), got {self.ratio}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskPlan:
    ratio: float
    keep: dict[str, np.ndarray]
    mask: dict[str, np.ndarray]
    num_patches: int

    @property
    def modalities(self) -> list[str]:
        return list(self.keep)


def masked_count(ratio: float, num_patches: int) -> int:
    n = int(np.floor(ratio * num_patches + 0.5))
    return min(n, num_patches - 1)


def sample_mask(ratio: float, num_patches: int, seed: int, modalities: Sequence[str] = ("volume",)) -> MaskPlan:
    """Mask ``round(ratio * T)`` patches per modality, always keeping one."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    if num_patches < 1:
        raise ValueError("num_patches must be >= 1")
    n_mask = masked_count(ratio, num_patches)
    keep, mask = {}, {}
    for i, mid in enumerate(modalities):
        perm = np.random.default_rng([seed, i]).permutation(num_patches)
        mask[mid] = np.sort(perm[:n_mask])
        keep[mid] = np.sort(perm[n_mask:])
    return MaskPlan(ratio, keep, mask, num_patches)


def patchify(volume: np.ndarray, p: int) -> np.ndarray:
    X, Y, Z = volume.shape
    return (volume.reshape(X // p, p, Y // p, p, Z // p, p)
                  .transpose(0, 2, 4, 1, 3, 5)
                  .reshape(-1, p ** 3))


def unpatchify(rows: Tensor, grid, p: int) -> Tensor:
    gx, gy, gz = grid
    x = T.reshape(rows, (gx, gy, gz, p, p, p))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5))
    return T.reshape(x, (gx * p, gy * p, gz * p))


def patch_mask_volume(indices, grid, p: int, dtype=np.float64) -> np.ndarray:
    flat = np.zeros(int(np.prod(grid)), dtype=dtype)
    flat[np.asarray(indices, dtype=np.int64)] = 1.0
    return np.kron(flat.reshape(grid), np.ones((p, p, p), dtype=dtype))


def mse_masked(pred: Mapping[str, Tensor], target: Mapping[str, np.ndarray], plan: MaskPlan,
               patch_size: int, all_patches: bool = False) -> Tensor:
    """Mean of ``(pred - target)^2`` over voxels of masked patches.

    With nothing masked the loss is defined as 0. ``target`` is a constant.
    """
    terms, count = [], 0
    for mid in plan.modalities:
        shape = np.shape(target[mid])
        grid = patch_grid(shape, patch_size)
        idx = np.arange(plan.num_patches) if all_patches else plan.mask[mid]
        if len(idx) == 0:
            continue
        weight = patch_mask_volume(idx, grid, patch_size, pred[mid].dtype)
        diff = T.sub(pred[mid], Tensor(np.asarray(target[mid], dtype=pred[mid].dtype)))
        terms.append(T.tsum(T.mul(T.square(diff), weight)))
        count += len(idx) * patch_size ** 3
    if not terms:
        return Tensor(np.zeros((), dtype=next(iter(pred.values())).dtype))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, 1.0 / count)


def _normalise_patches(volume: np.ndarray, p: int) -> np.ndarray:
    rows = patchify(volume, p)
    rows = (rows - rows.mean(axis=1, keepdims=True)) / np.sqrt(rows.var(axis=1, keepdims=True) + 1e-6)
    X, Y, Z = volume.shape
    g = (X // p, Y // p, Z // p)
    return rows.reshape(*g, p, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(X, Y, Z)


@dataclass
class MaeOutput:
    recon: dict[str, Tensor]
    loss: Tensor
    encoder_length: int
    decoder_length: int
    decoder_provenance: list[tuple[str, int]] = field(repr=False, default_factory=list)
    decoder_embeddings: Tensor | None = field(repr=False, default=None)


class MaePretrainer:
    """AdaViT backbone plus a shallow decoder that reconstructs masked patches.

    The backbone tensors use the same names as :class:`AdaViT`, so a
    pretrained store can be copied into a segmenter by name.
    """

    def __init__(self, cfg: ModelConfig, mae_cfg: MaeConfig | None = None, modalities: Sequence[str] = (),
                 seed: int = 0, store: ParamStore | None = None):
        self.cfg = cfg
        self.mae_cfg = mae_cfg or MaeConfig()
        fresh = store is None
        self.backbone = AdaViT(cfg, modalities, seed, store=store, with_seg_head=False)
        self.store = self.backbone.store
        E = cfg.embed_dim
        Ed = self.mae_cfg.decoder_dim or max(self.mae_cfg.decoder_heads, E // 2)
        if Ed % self.mae_cfg.decoder_heads:
            raise ValueError("decoder_dim must be divisible by decoder_heads")
        self.decoder_dim = Ed
        if fresh or "mae.mask_token" not in self.store:
            rng = np.random.default_rng([seed, 7])
            dtype = cfg.np_dtype
            init_linear(self.store, "mae.enc_to_dec", E, Ed, rng, dtype)
            self.store.add("mae.mask_token", (0.02 * rng.standard_normal(Ed)).astype(dtype))
            init_blocks(self.store, "mae.decoder", Ed, self.mae_cfg.decoder_depth, 4, rng, dtype)
            init_layer_norm(self.store, "mae.decoder_norm", Ed, rng, dtype)
            init_linear(self.store, "mae.pred", Ed, cfg.patch_size ** 3, rng, dtype)

    @property
    def registry(self):
        return self.backbone.registry

    @property
    def modalities(self) -> list[str]:
        return self.backbone.modalities

    def plan(self, case, seed: int) -> MaskPlan:
        mods = self.registry.order(list(case_volumes(case)))
        n = int(np.prod(self.cfg.grid))
        return sample_mask(self.mae_cfg.ratio, n, seed, mods)

    def forward(self, case, plan: MaskPlan) -> MaeOutput:
        vols = case_volumes(case)
        mods = self.registry.order(list(vols))
        if set(plan.modalities) != set(mods):
            raise ValueError(f"mask plan covers {sorted(plan.modalities)}, case has {sorted(mods)}")
        p = self.cfg.patch_size
        grid = self.cfg.grid
        n = int(np.prod(grid))
        s = self.store

        enc = self.backbone.encode(case, keep=plan.keep)
        kept = linear(enc.final, s, "mae.enc_to_dec")
        n_kept = kept.shape[0]

        # slot of every (modality, patch) in the full-length decoder sequence
        slot_of = {(m, i): k for k, (m, i) in enumerate((m, i) for m in mods for i in range(n))}
        full_len = len(slot_of)
        source = np.empty(full_len, dtype=np.int64)
        for row, key in enumerate(enc.provenance):
            source[slot_of[key]] = row
        masked_keys = [(m, int(i)) for m in mods for i in plan.mask[m]]
        for j, key in enumerate(masked_keys):
            source[slot_of[key]] = n_kept + j
        pieces = [kept]
        if masked_keys:
            pieces.append(T.take_rows(T.reshape(s["mae.mask_token"], (1, -1)), np.zeros(len(masked_keys), dtype=np.int64)))
        x = T.take_rows(T.concat(pieces, axis=0) if len(pieces) > 1 else kept, source)

        # positional + modality embeddings again, from the encoder tables mapped into decoder width
        emb = T.concat([T.add(self.backbone.tables.pos, self.registry.embedding(m)) for m in mods], axis=0)
        emb_dec = T.matmul(emb, s["mae.enc_to_dec.w"])
        x = T.add(x, emb_dec)

        x, _ = run_blocks(x, s, "mae.decoder", self.mae_cfg.decoder_depth, self.mae_cfg.decoder_heads)
        x = T.layer_norm(x, s["mae.decoder_norm.g"], s["mae.decoder_norm.b"])
        rows = linear(x, s, "mae.pred")

        recon = {m: unpatchify(rows[k * n:(k + 1) * n], grid, p) for k, m in enumerate(mods)}
        target = {m: np.asarray(vols[m]) for m in mods}
        if self.mae_cfg.norm_pix_loss:
            target = {m: _normalise_patches(v, p) for m, v in target.items()}
        loss = mse_masked(recon, target, plan, p, self.mae_cfg.loss_all_patches)
        prov = [(m, i) for m in mods for i in range(n)]
        return MaeOutput(recon, loss, n_kept, full_len, prov, emb)

    __call__ = forward


def reconstruction_panels(case, plan: MaskPlan, out: MaeOutput, patch_size: int) -> dict[str, dict[str, np.ndarray]]:
    """Original / masked-with-zeros / reconstructed volume per modality."""
    vols = case_volumes(case)
    panels = {}
    for m in plan.modalities:
        grid = patch_grid(np.shape(vols[m]), patch_size)
        keep = patch_mask_volume(plan.keep[m], grid, patch_size, np.float32)
        orig = np.asarray(vols[m], dtype=np.float32)
        panels[m] = {"original": orig, "masked": orig * keep,
                     "reconstructed": np.asarray(out.recon[m].data, dtype=np.float32)}
    return panels
