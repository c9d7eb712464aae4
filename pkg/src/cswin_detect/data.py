"""Volume files, preprocessing and synthetic prostate-like phantoms.

A volume on disk is a JSON header ``<stem>.json`` next to a raw payload
``<stem>.raw`` of little-endian float32 values in row-major ``(C, H, W, D)``
order.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .numeric import ShapeError, numpy_rng

CHANNELS = ("T2W", "DWI", "ADC")
DTYPE = "f32le"
STD_EPS = 1e-8


@dataclass
class Volume:
    data: np.ndarray                    # (C, H, W, D) float32
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    channels: tuple = CHANNELS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ShapeError("volume data must be (C, H, W, D)", self.data.shape, ("C", "H", "W", "D"))
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.channels = tuple(self.channels)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")
        if len(self.channels) != self.data.shape[0]:
            raise ValueError(f"{len(self.channels)} channel names for {self.data.shape[0]} channels")

    @property
    def shape(self):
        return self.data.shape

    def header(self) -> dict:
        h = {
            "shape": list(self.data.shape),
            "spacing_mm": list(self.spacing_mm),
            "channels": list(self.channels),
            "dtype": DTYPE,
        }
        if self.meta:
            h["meta"] = self.meta
        return h


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".raw") else p


def write_volume(path, vol: Volume) -> Path:
    """Write ``<stem>.json`` + ``<stem>.raw``; returns the header path."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(vol.header(), sort_keys=True, indent=1) + "\n"
    stem.with_suffix(".json").write_text(header)
    stem.with_suffix(".raw").write_bytes(vol.data.astype("<f4", copy=False).tobytes(order="C"))
    return stem.with_suffix(".json")


def read_volume(path) -> Volume:
    stem = _stem(path)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("dtype") != DTYPE:
        raise ValueError(f"unsupported dtype {header.get('dtype')!r}; only {DTYPE} is defined")
    shape = tuple(int(s) for s in header["shape"])
    payload = stem.with_suffix(".raw").read_bytes()
    if len(payload) != 4 * math.prod(shape):
        raise ValueError(f"{stem}.raw holds {len(payload)} bytes, header shape {shape} needs {4 * math.prod(shape)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return Volume(data, header["spacing_mm"], header["channels"], header.get("meta", {}))


# -- preprocessing --------------------------------------------------------

@dataclass
class PreprocessConfig:
    target_spacing: tuple = (0.5, 0.5, 3.6)
    crop_shape: tuple = (144, 144, 16)
    out_shape: tuple = (160, 160, 32)
    order: int = 3
    zscore_channels: tuple = (0, 1)
    global_channel: int = 2
    global_mean: float = 1.0
    global_std: float = 0.5

    def __post_init__(self):
        self.target_spacing = tuple(float(s) for s in self.target_spacing)
        self.crop_shape = tuple(int(s) for s in self.crop_shape)
        self.out_shape = tuple(int(s) for s in self.out_shape)
        self.zscore_channels = tuple(int(c) for c in self.zscore_channels)
        if self.global_std <= 0:
            raise ValueError("global_std must be positive")

    @property
    def out_spacing(self) -> tuple:
        return tuple(t * c / o for t, c, o in zip(self.target_spacing, self.crop_shape, self.out_shape))

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def resample(vol: Volume, cfg: PreprocessConfig) -> tuple[np.ndarray, list[str]]:
    """Resample, center-crop and resize in one B-spline interpolation.

    Output voxel ``j`` sits at physical offset ``(j - (n_out - 1)/2) * s_out``
    from the volume center, where ``s_out`` is the spacing left after
    resizing the crop. Composing the three steps avoids interpolating twice,
    and an input already on the output grid maps onto itself exactly.
    """
    in_shape = np.array(vol.shape[1:], dtype=np.float64)
    s_in = np.array(vol.spacing_mm)
    s_out = np.array(cfg.out_spacing)
    n_out = np.array(cfg.out_shape, dtype=np.float64)
    scale = s_out / s_in
    offset = (in_shape - 1) / 2 - scale * (n_out - 1) / 2
    notes = []
    fov_in = in_shape * s_in
    fov_crop = np.array(cfg.crop_shape) * np.array(cfg.target_spacing)
    if np.any(fov_in < fov_crop - 1e-6):
        notes.append(f"volume field of view {fov_in.round(3).tolist()} mm smaller than crop {fov_crop.round(3).tolist()} mm; zero-padded")
    out = np.empty((vol.shape[0], *cfg.out_shape), dtype=np.float32)
    for c in range(vol.shape[0]):
        out[c] = ndimage.affine_transform(
            vol.data[c].astype(np.float64), np.diag(scale), offset=offset, output_shape=cfg.out_shape,
            order=cfg.order, mode="constant", cval=0.0,
        )
    return out, notes


def zscore(x: np.ndarray) -> np.ndarray:
    """Per-array z-score; a constant array maps to zeros."""
    x = x.astype(np.float64)
    return ((x - x.mean()) / max(x.std(), STD_EPS)).astype(np.float32)


def normalize_intensity(data: np.ndarray, cfg: PreprocessConfig, global_done: bool = False) -> np.ndarray:
    out = data.astype(np.float32, copy=True)
    for c in cfg.zscore_channels:
        out[c] = zscore(out[c])
    g = cfg.global_channel
    if g is not None and 0 <= g < out.shape[0] and not global_done:
        out[g] = (out[g] - cfg.global_mean) / cfg.global_std
    return out


def preprocess(vol: Volume, cfg: PreprocessConfig | None = None) -> Volume:
    """Bring a scan onto the network grid and normalize intensities.

    The fixed-constant normalization of the global channel is not idempotent
    by itself, so the output carries ``meta["preprocessed"] = True`` and a
    second pass skips that step.
    """
    cfg = cfg or PreprocessConfig()
    data, notes = resample(vol, cfg)
    for n in notes:
        warnings.warn(n, stacklevel=2)
    data = normalize_intensity(data, cfg, global_done=bool(vol.meta.get("preprocessed")))
    meta = dict(vol.meta)
    meta["preprocessed"] = True
    if notes:
        meta["warnings"] = list(meta.get("warnings", [])) + notes
    return Volume(data, cfg.out_spacing, vol.channels, meta)


def preprocess_mask(mask: Volume, cfg: PreprocessConfig | None = None) -> np.ndarray:
    """Nearest-neighbour version of the spatial part of :func:`preprocess`."""
    cfg = cfg or PreprocessConfig()
    nn_cfg = PreprocessConfig(**{**cfg.to_dict(), "order": 0})
    data, _ = resample(mask, nn_cfg)
    return (data[0] > 0.5).astype(np.uint8)


# -- synthetic phantoms ---------------------------------------------------

@dataclass
class SynthConfig:
    shape: tuple = (32, 32, 16)
    spacing_mm: tuple = (2.25, 2.25, 3.6)
    negative_fraction: float = 0.3
    max_lesions: int = 3
    lesion_radius: tuple = (2.0, 4.0)       # in-plane radius range, voxels
    lesion_radius_z: tuple = (1.5, 3.0)
    lesion_contrast: tuple = (0.5, 1.0)
    max_distractors: int = 2                # benign DWI-bright spots that are not dark on ADC
    noise: float = 0.1
    bias_strength: float = 0.15

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.lesion_radius = tuple(float(s) for s in self.lesion_radius)
        self.lesion_radius_z = tuple(float(s) for s in self.lesion_radius_z)
        self.lesion_contrast = tuple(float(s) for s in self.lesion_contrast)
        if not 0.0 <= self.negative_fraction <= 1.0:
            raise ValueError("negative_fraction must lie in [0, 1]")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def preprocess_config(self) -> PreprocessConfig:
        """Preprocessing that keeps phantoms on their own grid (identity resampling)."""
        return PreprocessConfig(self.spacing_mm, self.shape, self.shape)


@dataclass
class Lesion:
    center: tuple
    radii: tuple
    contrast: tuple       # additive change per channel (T2W, DWI, ADC)

    def to_dict(self):
        return {"center": list(self.center), "radii": list(self.radii), "contrast": list(self.contrast)}


@dataclass
class Phantom:
    volume: Volume
    mask: np.ndarray              # (H, W, D) uint8
    lesions: list

    @property
    def label(self) -> int:
        return int(self.mask.any())


def _grid(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")


def ellipsoid_mask(shape, center, radii) -> np.ndarray:
    """Voxels whose centers lie inside the axis-aligned ellipsoid."""
    g = _grid(shape)
    r = sum(((g[a] - center[a]) / radii[a]) ** 2 for a in range(3))
    return r <= 1.0


def smooth_field(rng: np.random.Generator, shape, strength: float) -> np.ndarray:
    """Low-order multiplicative field ``exp(strength * p(x))`` with ``|p| <= ~1``."""
    g = _grid(shape)
    u = [(g[a] - (shape[a] - 1) / 2) / max(shape[a] / 2, 1) for a in range(3)]
    terms = [u[0], u[1], u[2], u[0] * u[1], u[0] ** 2, u[1] ** 2]
    coef = rng.uniform(-1, 1, len(terms)) / math.sqrt(len(terms))
    return np.exp(strength * sum(c * t for c, t in zip(coef, terms)))


def make_phantom(cfg: SynthConfig, seed: int, index: int) -> Phantom:
    """One phantom, fully determined by ``(cfg, seed, index)``.

    The gland is a bright-ish ellipsoid; the rectum is a dark tube posterior
    to it (toward larger ``H``), which fixes the in-plane orientation.
    Lesions sit inside the gland: bright on DWI, dark on ADC and T2W.
    Distractors are equally DWI-bright but bright on ADC too, so only the
    channel combination separates them from lesions.
    """
    rng = numpy_rng(seed, index)
    shape = cfg.shape
    H, W, D = shape
    g = _grid(shape)
    gc = np.array([H * rng.uniform(0.42, 0.5), W * rng.uniform(0.45, 0.55), (D - 1) / 2])
    gr = np.array([H * rng.uniform(0.2, 0.25), W * rng.uniform(0.25, 0.3), D * rng.uniform(0.3, 0.4)])
    gland = sum(((g[a] - gc[a]) / gr[a]) ** 2 for a in range(3))
    gland_soft = 1 / (1 + np.exp(6 * (gland - 1)))
    rect_c = gc[0] + gr[0] + H * 0.12
    rect = ((g[0] - rect_c) / (H * 0.09)) ** 2 + ((g[1] - gc[1]) / (W * 0.12)) ** 2
    rect_soft = 1 / (1 + np.exp(6 * (rect - 1)))

    t2 = 0.6 + 0.5 * gland_soft - 0.55 * rect_soft
    dwi = 0.4 + 0.3 * gland_soft - 0.3 * rect_soft
    adc = 1.2 - 0.2 * gland_soft - 0.7 * rect_soft

    mask = np.zeros(shape, dtype=bool)
    lesions = []
    n_les = 0 if rng.random() < cfg.negative_fraction else int(rng.integers(1, cfg.max_lesions + 1))
    for _ in range(n_les):
        radii = (rng.uniform(*cfg.lesion_radius), rng.uniform(*cfg.lesion_radius), rng.uniform(*cfg.lesion_radius_z))
        # center within the inner part of the gland
        u = rng.normal(size=3)
        u = u / np.linalg.norm(u) * rng.uniform(0, 0.5)
        center = tuple(float(np.clip(gc[a] + u[a] * gr[a], radii[a], shape[a] - 1 - radii[a])) for a in range(3))
        k = rng.uniform(*cfg.lesion_contrast)
        contrast = (-0.35 * k, 0.9 * k, -0.6 * k)
        les = ellipsoid_mask(shape, center, radii)
        for ch, dc in zip((t2, dwi, adc), contrast):
            ch += dc * les
        mask |= les
        lesions.append(Lesion(tuple(round(c, 6) for c in center), tuple(round(r, 6) for r in radii), tuple(round(c, 6) for c in contrast)))

    for _ in range(int(rng.integers(0, cfg.max_distractors + 1))):
        radii = (rng.uniform(*cfg.lesion_radius), rng.uniform(*cfg.lesion_radius), rng.uniform(*cfg.lesion_radius_z))
        u = rng.normal(size=3)
        u = u / np.linalg.norm(u) * rng.uniform(0, 0.8)
        center = [float(np.clip(gc[a] + u[a] * gr[a], 0, shape[a] - 1)) for a in range(3)]
        k = rng.uniform(*cfg.lesion_contrast)
        spot = ellipsoid_mask(shape, center, radii) & ~mask
        for ch, dc in zip((t2, dwi, adc), (0.2 * k, 0.9 * k, 0.4 * k)):
            ch += dc * spot

    data = np.stack([t2, dwi, adc])
    data = data * smooth_field(rng, shape, cfg.bias_strength)[None]
    data = data + cfg.noise * rng.normal(size=data.shape)
    vol = Volume(data.astype(np.float32), cfg.spacing_mm, CHANNELS, {})
    return Phantom(vol, mask.astype(np.uint8), lesions)


def mask_volume(mask: np.ndarray, spacing, name: str = "GT") -> Volume:
    return Volume(np.asarray(mask, dtype=np.float32)[None], spacing, (name,))


def case_id(index: int) -> str:
    return f"case_{index:04d}"


def synth(n: int, seed: int, out_dir, cfg: SynthConfig | None = None) -> dict:
    """Write ``n`` phantoms plus ``manifest.json`` to ``out_dir``; returns the manifest."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = cfg or SynthConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(n):
        ph = make_phantom(cfg, seed, i)
        cid = case_id(i)
        write_volume(out / f"{cid}_img", ph.volume)
        write_volume(out / f"{cid}_mask", mask_volume(ph.mask, cfg.spacing_mm))
        cases.append({
            "id": cid,
            "image": f"{cid}_img.json",
            "mask": f"{cid}_mask.json",
            "label": ph.label,
            "lesions": [l.to_dict() for l in ph.lesions],
        })
    manifest = {
        "seed": int(seed),
        "synth": cfg.to_dict(),
        "preprocess": cfg.preprocess_config().to_dict(),
        "cases": cases,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


@dataclass
class Dataset:
    ids: list
    images: np.ndarray            # (N, C, H, W, D) float32, preprocessed
    masks: np.ndarray             # (N, H, W, D) uint8
    labels: np.ndarray

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset([self.ids[i] for i in idx], self.images[idx], self.masks[idx], self.labels[idx])

    def __len__(self):
        return len(self.ids)


def load_dataset(data_dir, preprocess_cfg: PreprocessConfig | dict | None = None) -> Dataset:
    """Read a synthesized directory and preprocess every image."""
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    pcfg = preprocess_cfg if preprocess_cfg is not None else manifest.get("preprocess", {})
    if isinstance(pcfg, dict):
        pcfg = PreprocessConfig(**pcfg)
    ids, imgs, masks, labels = [], [], [], []
    for case in manifest["cases"]:
        vol = preprocess(read_volume(d / case["image"]), pcfg)
        m = preprocess_mask(read_volume(d / case["mask"]), pcfg)
        if m.shape != vol.shape[1:]:
            raise ShapeError(f"{case['id']}: mask does not align with preprocessed image", m.shape, vol.shape[1:])
        ids.append(case["id"])
        imgs.append(vol.data)
        masks.append((m > 0.5).astype(np.uint8))
        labels.append(int(case.get("label", int(m.any()))))
    return Dataset(ids, np.stack(imgs), np.stack(masks), np.array(labels))
