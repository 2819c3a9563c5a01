"""Intensity preprocessing, uniform-size transforms and their inverses, augmentation, phantoms."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import GeometryError, Volume

TARGET = (256, 256)
ISO_SPACING = 0.5
METHODS = ("pad_cut", "resize2d", "resize3d")

# validation cases: index -> ((d, h, w), (sz, sy, sx) mm)
VALIDATION_GEOMETRIES = {
    5: ((42, 512, 512), (2.20, 0.27, 0.27)),
    15: ((20, 320, 320), (3.60, 0.63, 0.63)),
    25: ((18, 256, 256), (4.00, 0.75, 0.75)),
    35: ((23, 256, 256), (3.30, 0.70, 0.70)),
    45: ((24, 320, 320), (3.60, 0.63, 0.63)),
}


# --------------------------------------------------------------------------
# intensity


def clahe(img: np.ndarray, clip_limit: float = 2.0, tiles=(8, 8), bins: int = 256) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation of a 2-D slice.

    The slice is min-max quantised into ``bins`` levels. Each tile histogram
    is clipped at ``clip_limit * tile_pixels / bins`` with the excess spread
    evenly over all bins, and its normalised CDF becomes the tile's mapping.
    Pixels blend the four nearest tile mappings bilinearly (tile centres as
    nodes, clamped at the borders). Output lies in [0, 1].
    """
    if not clip_limit > 0:
        raise ValueError(f"clip_limit must be positive, got {clip_limit}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or not np.isfinite(img).all():
        raise ValueError("clahe expects a finite 2-D slice")
    h, w = img.shape
    ty, tx = min(int(tiles[0]), h), min(int(tiles[1]), w)
    lo, hi = img.min(), img.max()
    if hi > lo:
        q = np.minimum(((img - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
    else:
        q = np.zeros(img.shape, dtype=np.int64)

    ey = (np.arange(ty + 1) * h) // ty
    ex = (np.arange(tx + 1) * w) // tx
    maps = np.empty((ty, tx, bins))
    for i in range(ty):
        for j in range(tx):
            tile = q[ey[i]:ey[i + 1], ex[j]:ex[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=bins).astype(np.float64)
            if np.isfinite(clip_limit):
                limit = clip_limit * tile.size / bins
                excess = np.maximum(hist - limit, 0).sum()
                hist = np.minimum(hist, limit) + excess / bins
            maps[i, j] = np.cumsum(hist) / tile.size

    def _weights(edges, n, size):
        centres = (edges[:-1] + edges[1:] - 1) / 2.0
        pos = np.interp(np.arange(size), centres, np.arange(n)) if n > 1 else np.zeros(size)
        i0 = np.floor(pos).astype(np.int64)
        i1 = np.minimum(i0 + 1, n - 1)
        return i0, i1, pos - i0

    y0, y1, wy = _weights(ey, ty, h)
    x0, x1, wx = _weights(ex, tx, w)
    wy, wx = wy[:, None], wx[None, :]
    Y0, Y1, X0, X1 = y0[:, None], y1[:, None], x0[None, :], x1[None, :]
    out = ((1 - wy) * (1 - wx) * maps[Y0, X0, q] + (1 - wy) * wx * maps[Y0, X1, q]
           + wy * (1 - wx) * maps[Y1, X0, q] + wy * wx * maps[Y1, X1, q])
    return np.clip(out, 0.0, 1.0)


def gaussian_normalize(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    std = img.std()
    if std < 1e-8:
        return np.zeros_like(img)
    return (img - img.mean()) / std


# --------------------------------------------------------------------------
# uniform-size transforms


@dataclass
class GeometryRecord:
    method: str
    shape: tuple
    spacing: tuple
    target: tuple = TARGET
    offsets: tuple = (0, 0)  # pad_cut: >0 crop start, <0 leading pad
    iso_shape: tuple = None  # resize3d


def nn_indices(src_len: int, dst_len: int) -> np.ndarray:
    """Source index for each destination index: floor(i * src_len / dst_len)."""
    return (np.arange(dst_len, dtype=np.int64) * src_len) // dst_len


def _fit_axis(arr, axis, offset, out_len):
    """Crop (offset >= 0) or zero-pad (offset < 0) ``arr`` along ``axis`` to ``out_len``."""
    n = arr.shape[axis]
    if offset >= 0:
        return np.take(arr, np.arange(offset, offset + out_len), axis=axis)
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (-offset, out_len - n + offset)
    return np.pad(arr, pad)


def _pad_cut_offset(n, t):
    return (n - t) // 2 if n >= t else -((t - n) // 2)


def unify_pad_cut(v: Volume, target=TARGET):
    oy = _pad_cut_offset(v.shape[1], target[0])
    ox = _pad_cut_offset(v.shape[2], target[1])
    data = _fit_axis(_fit_axis(v.data, 1, oy, target[0]), 2, ox, target[1])
    rec = GeometryRecord("pad_cut", v.shape, v.spacing, tuple(target), (oy, ox))
    return Volume(data, v.spacing, v.kind), rec


def reconstruct_pad_cut(m: Volume, rec: GeometryRecord) -> Volume:
    _, h, w = rec.shape
    oy, ox = rec.offsets
    # inverse of crop is pad and vice versa
    data = _fit_axis(_fit_axis(m.data, 1, -oy, h), 2, -ox, w)
    return Volume(data, rec.spacing, m.kind)


def _nn_resize(data, shape):
    idx = [nn_indices(s, t) for s, t in zip(data.shape, shape)]
    return data[np.ix_(*idx)]


def _linear_resize(data, shape):
    """Separable linear interpolation with source coordinate i * src_len / dst_len."""
    out = data.astype(np.float64)
    for axis, t in enumerate(shape):
        n = out.shape[axis]
        if n == t:
            continue
        c = np.arange(t) * (n / t)
        i0 = np.minimum(np.floor(c).astype(np.int64), n - 1)
        i1 = np.minimum(i0 + 1, n - 1)
        wgt = (c - i0).reshape([-1 if a == axis else 1 for a in range(out.ndim)])
        out = (1 - wgt) * np.take(out, i0, axis=axis) + wgt * np.take(out, i1, axis=axis)
    return out


def unify_resize2d(v: Volume, target=TARGET):
    d, h, w = v.shape
    data = _nn_resize(v.data, (d, target[0], target[1]))
    sz, sy, sx = v.spacing
    spacing = (sz, sy * h / target[0], sx * w / target[1])
    rec = GeometryRecord("resize2d", v.shape, v.spacing, tuple(target))
    return Volume(data, spacing, v.kind), rec


def reconstruct_resize2d(m: Volume, rec: GeometryRecord) -> Volume:
    d = m.shape[0]
    return Volume(_nn_resize(m.data, (d, rec.shape[1], rec.shape[2])), rec.spacing, m.kind)


def iso_shape(shape, spacing, iso=ISO_SPACING) -> tuple:
    out = tuple(int(math.floor(n * s / iso + 0.5)) for n, s in zip(shape, spacing))
    if min(out) < 1:
        raise GeometryError(f"isotropic resampling of {shape} at {spacing} gives empty dims {out}")
    return out


def unify_resize3d(v: Volume, target=TARGET):
    iso = iso_shape(v.shape, v.spacing)
    if v.kind == "mask":
        stage1 = _nn_resize(v.data, iso)
    else:
        stage1 = _linear_resize(v.data, iso).astype(np.float32)
    data = _nn_resize(stage1, (iso[0], target[0], target[1]))
    spacing = (ISO_SPACING, ISO_SPACING * iso[1] / target[0], ISO_SPACING * iso[2] / target[1])
    rec = GeometryRecord("resize3d", v.shape, v.spacing, tuple(target), iso_shape=iso)
    return Volume(data, spacing, v.kind), rec


def reconstruct_resize3d(m: Volume, rec: GeometryRecord) -> Volume:
    stage1 = _nn_resize(m.data, rec.iso_shape)
    return Volume(_nn_resize(stage1, rec.shape), rec.spacing, m.kind)


_UNIFY = {"pad_cut": unify_pad_cut, "resize2d": unify_resize2d, "resize3d": unify_resize3d}
_RECONSTRUCT = {"pad_cut": reconstruct_pad_cut, "resize2d": reconstruct_resize2d,
                "resize3d": reconstruct_resize3d}


def unify(v: Volume, method: str, target=TARGET):
    if method not in _UNIFY:
        raise ValueError(f"unknown uniform-size method {method!r}; choose from {METHODS}")
    return _UNIFY[method](v, target)


def reconstruct(m: Volume, rec: GeometryRecord) -> Volume:
    return _RECONSTRUCT[rec.method](m, rec)


def preprocess_volume(v: Volume, method: str, target=TARGET, clip_limit=2.0, tiles=(8, 8)):
    """unify size -> CLAHE -> per-slice Gaussian normalisation. Returns ``(slices, record)``."""
    u, rec = unify(v, method, target)
    slices = np.stack([gaussian_normalize(clahe(s, clip_limit, tiles)) for s in u.data])
    return slices.astype(np.float32), rec


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentSpec:
    rotation: float = 15.0  # degrees, sampled uniformly from [-rotation, rotation]
    flip: bool = True
    zoom: tuple = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        if not (-180 < self.rotation <= 180):
            raise ValueError("rotation must lie in (-180, 180]")
        if self.zoom[0] <= 0 or self.zoom[1] < self.zoom[0]:
            raise ValueError(f"bad zoom range {self.zoom}")


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1]


def apply_transform(img, mask, angle_deg: float, flip: bool, zoom: float):
    """Rotate about the centre, zoom about the centre, then optionally flip horizontally.

    Intensities use bilinear sampling, masks nearest neighbour; outside samples are 0.
    """
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if flip:
        xx = (w - 1) - xx
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    dy, dx = (yy - cy) / zoom, (xx - cx) / zoom
    sy = cy + c * dy + s * dx
    sx = cx - s * dy + c * dx
    coords = np.stack([sy, sx])
    out_img = ndimage.map_coordinates(np.asarray(img, np.float64), coords, order=1, cval=0.0)
    out_mask = ndimage.map_coordinates(np.asarray(mask), coords, order=0, cval=0)
    return out_img.astype(np.asarray(img).dtype), out_mask.astype(np.asarray(mask).dtype)


def augment(img, mask, spec: AugmentSpec, rng: np.random.Generator | None = None):
    if img.shape != mask.shape:
        raise ValueError(f"slice {img.shape} and mask {mask.shape} differ")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    angle = rng.uniform(-spec.rotation, spec.rotation) if spec.rotation else 0.0
    flip = bool(spec.flip and rng.random() < 0.5)
    zoom = rng.uniform(*spec.zoom) if spec.zoom[0] != spec.zoom[1] else spec.zoom[0]
    return apply_transform(img, mask, angle, flip, zoom)


# --------------------------------------------------------------------------
# phantoms


@dataclass
class PhantomParams:
    radius_mm: float = 20.0  # sphere
    radii_mm: tuple = (18.0, 16.0, 20.0)  # ellipsoid (rz, ry, rx)
    center: tuple = None  # voxel indices, default dims // 2
    background: float = 100.0
    foreground: float = 200.0
    noise: float = 15.0
    noise_sigma: tuple = (0.5, 2.0, 2.0)


def phantom_mask(dims, spacing, shape: str = "ellipsoid", params: PhantomParams | None = None) -> np.ndarray:
    params = params or PhantomParams()
    center = params.center if params.center is not None else tuple(n // 2 for n in dims)
    if shape == "sphere":
        radii = (params.radius_mm,) * 3
    elif shape == "ellipsoid":
        radii = tuple(params.radii_mm)
    else:
        raise ValueError(f"unknown phantom shape {shape!r}")
    for n, c, r, s in zip(dims, center, radii, spacing):
        reach = r / s
        if c - reach < 0 or c + reach > n - 1:
            raise GeometryError(f"{shape} of radius {r} mm at {center} does not fit in {dims}")
    axes = [((np.arange(n) - c) * s) for n, c, s in zip(dims, center, spacing)]
    if shape == "sphere":
        r2 = radii[0] ** 2
        dz, dy, dx = axes[0] ** 2, axes[1] ** 2, axes[2] ** 2
        inside = (dz[:, None, None] + dy[None, :, None]) + dx[None, None, :] <= r2
    else:
        dz, dy, dx = [(a / r) ** 2 for a, r in zip(axes, radii)]
        inside = (dz[:, None, None] + dy[None, :, None]) + dx[None, None, :] <= 1.0
    return inside.astype(np.uint8)


def make_phantom(dims, spacing, shape: str = "ellipsoid", params: PhantomParams | None = None, seed: int = 0):
    """Analytic solid mask plus a noisy intensity volume. Returns ``(intensity, mask)``."""
    params = params or PhantomParams()
    mask = phantom_mask(dims, spacing, shape, params)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(tuple(dims)).astype(np.float32)
    noise = ndimage.gaussian_filter(noise, params.noise_sigma)
    noise /= max(float(noise.std()), 1e-12)
    img = params.background + (params.foreground - params.background) * mask + params.noise * noise
    return Volume(img.astype(np.float32), spacing, "intensity"), Volume(mask, spacing, "mask")


def disk_slices(n: int, size: int = 32, radii=(10, 14), noise: float = 0.0, seed: int = 0):
    """``n`` 2-D disk masks with jittered centres plus matching intensity slices, as (n, 1, size, size)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    masks = np.zeros((n, 1, size, size), np.float32)
    for i in range(n):
        r = rng.uniform(*radii)
        cy, cx = size / 2 + rng.uniform(-2, 2, size=2)
        masks[i, 0] = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    imgs = 2 * masks - 1 + noise * rng.standard_normal(masks.shape).astype(np.float32)
    return imgs.astype(np.float32), masks
