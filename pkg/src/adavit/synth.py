"""Synthetic multi-contrast 3D phantoms, volume files and corpus manifests.

A case is one latent anatomy (smooth tissue texture inside a head-shaped
ellipsoid plus an ellipsoidal lesion) rendered through several contrast
transfer functions. The lesion mask is the label and is shared by every
contrast of the case.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import binary_erosion, gaussian_filter

VOLUME_MAGIC = b"AVOL1"
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1, np.dtype(np.uint8): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

SPLITS = ("pretrain-train", "pretrain-val", "pretrain-test",
          "finetune-train", "finetune-val", "finetune-test", "ssl-pretrain")


@dataclass
class Contrast:
    """How one modality renders the latent anatomy.

    ``tissue`` scales the smooth background texture (negative inverts it),
    ``lesion`` is the lesion interior offset, ``rim`` the offset on the
    lesion boundary shell, ``core`` an extra offset on the inner core.
    """
    tissue: float
    lesion: float
    rim: float = 0.0
    core: float = 0.0
    base: float = 0.4
    gamma: float = 1.0


CONTRASTS: dict[str, Contrast] = {
    # diffusion contrasts: strong on the core, faint on the outer shell
    "ADC": Contrast(tissue=0.35, lesion=-0.08, core=-0.25, base=0.55),
    "TraceW": Contrast(tissue=0.25, lesion=0.10, core=0.30, base=0.35, gamma=0.9),
    # bright over the whole lesion and its boundary: supplies the extent ADC/TraceW blur
    "T2": Contrast(tissue=-0.30, lesion=0.35, rim=0.15, core=-0.15, base=0.45),
    "FLAIR": Contrast(tissue=0.20, lesion=0.45, rim=0.10, base=0.3),
    "T1": Contrast(tissue=0.40, lesion=-0.15, base=0.45, gamma=1.2),
    "T1CE": Contrast(tissue=0.35, lesion=0.05, rim=0.35, core=0.2, base=0.4),
    "GRE": Contrast(tissue=-0.25, lesion=-0.20, base=0.6),
    "SWI": Contrast(tissue=0.30, lesion=0.20, rim=-0.2, base=0.45, gamma=1.3),
}


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    lesion_radius: tuple[float, float] = (4.0, 7.0)
    core_fraction: tuple[float, float] = (0.45, 0.75)
    head_fraction: float = 0.9
    texture_sigma: float = 2.0
    texture_amplitude: float = 1.0
    noise_sigma: float = 0.02
    num_classes: int = 1
    contrasts: dict[str, Contrast] = field(default_factory=lambda: dict(CONTRASTS))

    def __post_init__(self):
        self.shape = tuple(self.shape)
        self.lesion_radius = tuple(self.lesion_radius)
        self.core_fraction = tuple(self.core_fraction)
        if not 0 < self.core_fraction[0] <= self.core_fraction[1] < 1:
            raise ValueError(f"core_fraction must lie in (0, 1), got {self.core_fraction}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        lo, hi = self.lesion_radius
        if not 0 < lo <= hi or 2 * hi + 2 > min(self.shape) * self.head_fraction:
            raise ValueError(f"lesion radii {self.lesion_radius} do not fit in {self.shape}")
        if self.num_classes not in (1, 3):
            raise ValueError("num_classes must be 1 (lesion) or 3 (nested core/whole/enhancing)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["lesion_radius"] = list(self.lesion_radius)
        d["core_fraction"] = list(self.core_fraction)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PhantomSpec":
        d = dict(d)
        if "contrasts" in d:
            d["contrasts"] = {k: Contrast(**v) if isinstance(v, Mapping) else v for k, v in d["contrasts"].items()}
        return cls(**d)


@dataclass
class Case:
    case_id: str
    volumes: dict[str, np.ndarray]
    label: np.ndarray | None = None

    def __post_init__(self):
        if not self.volumes:
            raise ValueError("a case needs at least one modality")
        shapes = {v.shape for v in self.volumes.values()}
        if len(shapes) != 1:
            raise ValueError(f"volumes of case {self.case_id} differ in shape: {shapes}")

    @property
    def modalities(self) -> list[str]:
        return list(self.volumes)

    @property
    def shape(self) -> tuple[int, ...]:
        return next(iter(self.volumes.values())).shape

    def label_channels(self) -> np.ndarray:
        """Label as ``[C, X, Y, Z]``."""
        if self.label is None:
            raise ValueError(f"case {self.case_id} has no label")
        return self.label[None] if self.label.ndim == 3 else self.label

    def subset(self, modalities: Sequence[str]) -> "Case":
        return Case(self.case_id, {m: self.volumes[m] for m in modalities}, self.label)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    return splitmix64((seed * 0x100000001B3 + index) & 0xFFFFFFFFFFFFFFFF)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n) + 0.5 for n in shape], indexing="ij")
    r = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, radii))
    return r <= 1.0


def _anatomy(spec: PhantomSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    shape = spec.shape
    half = np.array(shape) / 2.0
    head = _ellipsoid(shape, half, half * spec.head_fraction)
    texture = gaussian_filter(rng.standard_normal(shape), spec.texture_sigma)
    texture = spec.texture_amplitude * texture / (np.abs(texture).max() + 1e-12)
    radii = rng.uniform(*spec.lesion_radius, size=3)
    # keep the lesion inside the head ellipsoid
    margin = radii + 1.0
    inner = half * spec.head_fraction
    lo = half - inner / np.sqrt(3) + margin * 0.5
    hi = half + inner / np.sqrt(3) - margin * 0.5
    center = rng.uniform(np.minimum(lo, half), np.maximum(hi, half))
    lesion = _ellipsoid(shape, center, radii) & head
    core = _ellipsoid(shape, center, radii * rng.uniform(*spec.core_fraction)) & lesion
    rim = lesion & ~binary_erosion(lesion, iterations=1)
    return dict(head=head, texture=texture, lesion=lesion, core=core, rim=rim, center=center, radii=radii)


def _render(anat, contrast: Contrast, noise_sigma: float, rng: np.random.Generator) -> np.ndarray:
    v = contrast.base + contrast.tissue * anat["texture"]
    v = v + contrast.lesion * anat["lesion"] + contrast.rim * anat["rim"] + contrast.core * anat["core"]
    v = np.where(anat["head"], v, 0.0)
    v = np.clip(v, 0.0, 1.0) ** contrast.gamma
    if noise_sigma > 0:
        v = v + noise_sigma * rng.standard_normal(v.shape)
    return np.clip(v, 0.0, 1.0)


def _labels(anat, num_classes: int) -> np.ndarray:
    if num_classes == 1:
        return anat["lesion"].astype(np.float32)
    core = anat["core"]
    enhancing = core & ~binary_erosion(core, iterations=1)
    # channel order mirrors TC / WT / ET
    return np.stack([core, anat["lesion"], enhancing]).astype(np.float32)


def generate_case(spec: PhantomSpec, modality_set: Sequence[str], seed: int, case_id: str | None = None,
                  dtype=np.float32) -> Case:
    """Render one case; identical inputs give bitwise identical output."""
    if not modality_set:
        raise ValueError("modality_set must be nonempty")
    rng = np.random.default_rng(seed)
    anat = _anatomy(spec, rng)
    vols = {}
    for mid in modality_set:
        if mid not in spec.contrasts:
            raise KeyError(f"no contrast definition for modality {mid!r}")
        # per-modality noise stream independent of which other modalities are rendered
        mrng = np.random.default_rng([seed, sum(map(ord, mid)), len(mid)])
        vols[mid] = _render(anat, spec.contrasts[mid], spec.noise_sigma, mrng).astype(dtype)
    return Case(case_id or f"case-{seed:x}", vols, _labels(anat, spec.num_classes))


# ---------------------------------------------------------------------------
# volume files
# ---------------------------------------------------------------------------

def write_volume(path, arr: np.ndarray, sidecar: Mapping | None = None) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ValueError(f"volume files hold 3D arrays, got shape {arr.shape}")
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    path = Path(path)
    header = VOLUME_MAGIC + struct.pack("<B3Q", code, *arr.shape)
    path.write_bytes(header + np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    if sidecar is not None:
        meta = dict(sidecar)
        meta["shape"] = list(arr.shape)
        path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))


def read_volume(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:5] != VOLUME_MAGIC:
        raise ValueError(f"{path}: not a volume file")
    code, x, y, z = struct.unpack_from("<B3Q", buf, 5)
    dtype = _CODE_DTYPES[code]
    arr = np.frombuffer(buf, dtype=dtype.newbyteorder("<"), count=x * y * z, offset=5 + 1 + 24)
    return arr.reshape(x, y, z).astype(dtype)


def encode_label(label: np.ndarray) -> np.ndarray:
    """Pack ``[C, X, Y, Z]`` binary channels into one uint8 bitmask volume."""
    if label.ndim == 3:
        return label.astype(np.uint8)
    out = np.zeros(label.shape[1:], dtype=np.uint8)
    for c in range(label.shape[0]):
        out |= (label[c] > 0.5).astype(np.uint8) << c
    return out


def decode_label(packed: np.ndarray, num_classes: int) -> np.ndarray:
    if num_classes == 1:
        return packed.astype(np.float32)
    return np.stack([(packed >> c) & 1 for c in range(num_classes)]).astype(np.float32)


# ---------------------------------------------------------------------------
# corpus and manifest
# ---------------------------------------------------------------------------

@dataclass
class CaseEntry:
    case_id: str
    modalities: list[str]
    files: dict[str, str]
    label: str | None
    split: str


@dataclass
class CorpusManifest:
    root: str
    spec: dict
    cases: list[CaseEntry]
    seed: int = 0
    site_profiles: dict = field(default_factory=dict)

    def split(self, name: str) -> list[CaseEntry]:
        return [c for c in self.cases if c.split == name]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for c in self.cases:
            out[c.split] = out.get(c.split, 0) + 1
        return out

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec.from_dict(self.spec)

    def load(self, entry: CaseEntry) -> Case:
        cached = getattr(self, "_cases", None)
        if cached is not None and entry.case_id in cached:
            return cached[entry.case_id]
        root = Path(self.root)
        vols = {m: read_volume(root / entry.files[m]) for m in entry.modalities}
        label = None
        if entry.label is not None:
            label = decode_label(read_volume(root / entry.label), self.spec.get("num_classes", 1))
        return Case(entry.case_id, vols, label)

    def load_split(self, name: str) -> list[Case]:
        return [self.load(e) for e in self.split(name)]

    def to_json(self) -> str:
        d = dict(root=".", spec=self.spec, seed=self.seed, site_profiles=self.site_profiles,
                 cases=[asdict(c) for c in self.cases])
        return json.dumps(d, indent=1, sort_keys=True)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def read(cls, path) -> "CorpusManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        cases = [CaseEntry(**c) for c in d["cases"]]
        m = cls(str(path.parent), d["spec"], cases, d.get("seed", 0), d.get("site_profiles", {}))
        m.validate()
        return m

    def validate(self) -> None:
        ids = [c.case_id for c in self.cases]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate case ids across splits")
        root = Path(self.root)
        for c in self.cases:
            if c.split not in SPLITS:
                raise ValueError(f"unknown split tag {c.split!r}")
            for f in list(c.files.values()) + ([c.label] if c.label else []):
                if not (root / f).exists():
                    raise FileNotFoundError(root / f)


DEFAULT_SITES = {
    "pretrain": ["ADC", "TraceW"],
    "finetune": ["ADC", "TraceW", "T2"],
    "optional": ["T2"],
    "drop_prob": 0.0,
    "ssl": ["ADC", "TraceW", "T2", "FLAIR", "T1", "T1CE", "GRE", "SWI"],
}


def case_modalities(split: str, sites: Mapping, rng: np.random.Generator) -> list[str]:
    if split.startswith("pretrain"):
        return list(sites["pretrain"])
    if split == "ssl-pretrain":
        pool = list(sites.get("ssl", sites["finetune"]))
        k = int(rng.integers(1, len(pool) + 1))
        idx = np.sort(rng.choice(len(pool), size=k, replace=False))
        return [pool[i] for i in idx]
    mods = list(sites["finetune"])
    q = float(sites.get("drop_prob", 0.0))
    for opt in sites.get("optional", []):
        if opt in mods and rng.random() < q:
            mods.remove(opt)
    return mods


def generate_corpus(spec: PhantomSpec, site_profiles: Mapping | None, counts: Mapping[str, int], seed: int,
                    out_dir=None) -> CorpusManifest:
    """Generate every split; writes volumes and ``manifest.json`` when ``out_dir`` is given.

    Pretrain splits use modality set ``sites['pretrain']``; finetune splits use
    ``sites['finetune']`` with each optional modality dropped per case with
    probability ``drop_prob``.
    """
    sites = dict(DEFAULT_SITES, **(site_profiles or {}))
    if not set(sites["pretrain"]) < set(sites["finetune"]) and counts.get("finetune-train", 0):
        raise ValueError("finetune modality set must strictly extend the pretrain set")
    for split, n in counts.items():
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        if n < 1:
            raise ValueError(f"split {split} needs at least one case")
    entries, cases = [], []
    index = 0
    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        (root / "volumes").mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        for _ in range(counts.get(split, 0)):
            cseed = derive_seed(seed, index)
            rng = np.random.default_rng(cseed)
            mods = case_modalities(split, sites, rng)
            case_id = f"{split}-{index:04d}"
            case = generate_case(spec, mods, cseed, case_id)
            files, label_file = {}, None
            if root is not None:
                for m in mods:
                    rel = f"volumes/{case_id}_{m}.avol"
                    write_volume(root / rel, case.volumes[m], {"case_id": case_id, "modality": m})
                    files[m] = rel
                if split != "ssl-pretrain":
                    label_file = f"volumes/{case_id}_label.avol"
                    write_volume(root / label_file, encode_label(case.label), {"case_id": case_id, "modality": "label"})
            entries.append(CaseEntry(case_id, mods, files, label_file, split))
            cases.append(case)
            index += 1
    manifest = CorpusManifest(str(root) if root else ".", spec.to_dict(), entries, seed, sites)
    manifest._cases = {c.case_id: c for c in cases}
    if root is not None:
        manifest.write(root / "manifest.json")
    return manifest


def cases_for(manifest: CorpusManifest, split: str) -> list[Case]:
    """Cases of a split, from memory when the manifest was just generated."""
    cached = getattr(manifest, "_cases", None)
    if cached is not None:
        return [cached[e.case_id] for e in manifest.split(split)]
    return manifest.load_split(split)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
