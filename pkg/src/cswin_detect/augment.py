"""Two-view augmentation for self-supervised pretraining.

Each view is rotated by ``k * 90`` degrees about the slice axis and
intensity-augmented. That clean view is the restoration target. The network
input is the target after cut-out and patch shuffling, so input and target
agree exactly outside the corruption mask.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .data import smooth_field
from .numeric import numpy_rng


@dataclass
class AugmentConfig:
    cutout_range: tuple = (0.10, 0.48)
    n_patches: int = 14
    patch_size: tuple = (12, 12, 4)
    contrast_range: tuple = (0.75, 1.25)
    gamma_range: tuple = (0.7, 1.5)
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.25, 1.0)
    bias_strength: float = 0.2

    def __post_init__(self):
        self.cutout_range = tuple(float(v) for v in self.cutout_range)
        self.patch_size = tuple(int(v) for v in self.patch_size)
        self.contrast_range = tuple(float(v) for v in self.contrast_range)
        self.gamma_range = tuple(float(v) for v in self.gamma_range)
        self.blur_sigma = tuple(float(v) for v in self.blur_sigma)
        lo, hi = self.cutout_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError(f"cutout_range must satisfy 0 < lo <= hi < 1, got {self.cutout_range}")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class AugmentedPair:
    view_a: np.ndarray
    view_b: np.ndarray
    rot_label_a: int
    rot_label_b: int
    mask_a: np.ndarray          # (H, W, D) bool, corrupted voxels
    mask_b: np.ndarray
    target_a: np.ndarray        # restoration targets
    target_b: np.ndarray


def rotate(x: np.ndarray, k: int) -> np.ndarray:
    """Rotate ``(C, H, W, D)`` by ``k * 90`` degrees in the H-W plane."""
    return np.ascontiguousarray(np.rot90(x, k % 4, axes=(1, 2)))


def cutout_box(shape, ratio: float, rng: np.random.Generator, bounds=(0.10, 0.48)):
    """Box extents and origin whose volume fraction is close to ``ratio``.

    The realized fraction is clamped into ``bounds`` by growing or shrinking
    one axis at a time, so it never leaves the configured range.
    """
    shape = np.array(shape)
    n = shape.prod()
    w = rng.dirichlet(np.ones(3))
    ext = np.clip(np.round(shape * ratio ** w), 1, shape).astype(int)
    lo, hi = bounds
    for _ in range(int(shape.sum()) * 2):
        frac = ext.prod() / n
        if frac < lo:
            room = (shape - ext) / shape
            a = int(np.argmax(room))
            ext[a] += 1
        elif frac > hi:
            a = int(np.argmax(ext / shape))
            ext[a] -= 1
        else:
            break
    origin = np.array([rng.integers(0, s - e + 1) for s, e in zip(shape, ext)])
    return origin, ext


def shuffle_patch(x: np.ndarray, origin, size, rng: np.random.Generator) -> np.ndarray:
    """Permute voxel positions inside one box; channel vectors move together."""
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    block = x[(slice(None), *sl)]
    c = block.shape[0]
    flat = block.reshape(c, -1)
    perm = rng.permutation(flat.shape[1])
    x[(slice(None), *sl)] = flat[:, perm].reshape(block.shape)
    return x


def adjust_intensity(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        ch = x[c].astype(np.float64)
        m = ch.mean()
        ch = (ch - m) * rng.uniform(*cfg.contrast_range) + m
        lo, hi = ch.min(), ch.max()
        if hi > lo:
            r = (ch - lo) / (hi - lo)
            ch = r ** rng.uniform(*cfg.gamma_range) * (hi - lo) + lo
        if rng.random() < cfg.blur_prob:
            ch = ndimage.gaussian_filter(ch, rng.uniform(*cfg.blur_sigma))
        out[c] = ch
    return out


def augment_view(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """One view: returns (corrupted, rotation label, mask, target)."""
    if x.shape[1] != x.shape[2]:
        raise ValueError(f"in-plane extents must be equal for 90-degree rotation, got {x.shape[1:3]}")
    k = int(rng.integers(0, 4))
    target = rotate(x, k)
    target = adjust_intensity(target, cfg, rng)
    target = target * smooth_field(rng, target.shape[1:], cfg.bias_strength)[None]
    target = target.astype(np.float32)

    view = target.copy()
    spatial = view.shape[1:]
    mask = np.zeros(spatial, dtype=bool)
    origin, ext = cutout_box(spatial, rng.uniform(*cfg.cutout_range), rng, cfg.cutout_range)
    sl = tuple(slice(o, o + e) for o, e in zip(origin, ext))
    view[(slice(None), *sl)] = 0.0
    mask[sl] = True
    size = np.minimum(cfg.patch_size, spatial)
    for _ in range(cfg.n_patches):
        o = [int(rng.integers(0, s - p + 1)) for s, p in zip(spatial, size)]
        shuffle_patch(view, o, size, rng)
        mask[tuple(slice(a, a + p) for a, p in zip(o, size))] = True
    return view, k, mask, target


def augment(x: np.ndarray, seed: int, cfg: AugmentConfig | None = None, stream=()) -> AugmentedPair:
    """Two independent views of ``x`` (``(C, H, W, D)``), deterministic in ``seed``."""
    cfg = cfg or AugmentConfig()
    x = np.asarray(x, dtype=np.float32)
    if not np.isfinite(x).all():
        raise ValueError("augment input contains non-finite values")
    va, ka, ma, ta = augment_view(x, cfg, numpy_rng(seed, *stream, 0))
    vb, kb, mb, tb = augment_view(x, cfg, numpy_rng(seed, *stream, 1))
    return AugmentedPair(va, vb, ka, kb, ma, mb, ta, tb)
