"""Weak (geometric) and strong (photometric + CutMix) augmentation.

Images are float arrays (C, H, W); label maps are integer arrays (H, W).
Every random choice lands in an :class:`AugRecord` so label maps, teacher
outputs and feature maps can be pushed through exactly the same transform.

Geometry is a centred rescale (crop when zooming in, pad when zooming out)
followed by optional flips. Flips commute with a centred rescale, so the
inverse of a record is the same flips with the reciprocal scale.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DimensionError

IGNORE = 255
SCALE_RANGE = (0.75, 1.25)
CUTMIX_RANGE = (0.2, 0.5)
BLUR_MAX = 1.0
NOISE_MAX = 0.05


@dataclass(frozen=True)
class CutMix:
    box: tuple  # (x0, y0, x1, y1), half-open pixel bounds
    source_index: int
    lam: float = 0.0

    @property
    def area(self):
        x0, y0, x1, y1 = self.box
        return (x1 - x0) * (y1 - y0)


@dataclass(frozen=True)
class AugRecord:
    hflip: bool = False
    vflip: bool = False
    scale: float = 1.0
    cutmix: Optional[CutMix] = None
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0

    def geometric(self):
        return AugRecord(self.hflip, self.vflip, self.scale)

    def inverse(self):
        """Inverse of the geometric part (photometric and CutMix dropped)."""
        return AugRecord(self.hflip, self.vflip, 1.0 / self.scale)

    @property
    def is_identity(self):
        return self == AugRecord()


def _source_coords(n, scale):
    # output pixel centre -> source pixel coordinate for a centred rescale
    c = n / 2.0
    return (np.arange(n) + 0.5 - c) / scale + c - 0.5


def _bilinear_matrix(n, scale):
    src = _source_coords(n, scale)
    m = np.zeros((n, n))
    i0 = np.floor(src).astype(int)
    frac = src - i0
    for o in range(n):
        for idx, wgt in ((i0[o], 1.0 - frac[o]), (i0[o] + 1, frac[o])):
            if 0 <= idx < n and wgt > 0:
                m[o, idx] += wgt
    return m


def _nearest_index(n, scale):
    idx = np.floor(_source_coords(n, scale) + 0.5).astype(int)
    return np.where((idx >= 0) & (idx < n), idx, -1)


def resample(arr, scale, nearest=False, fill=0):
    """Centred rescale of (..., H, W) keeping the extent; outside -> ``fill``."""
    if scale == 1.0:
        return arr.copy()
    h, w = arr.shape[-2:]
    if nearest:
        iy, ix = _nearest_index(h, scale), _nearest_index(w, scale)
        out = arr[..., np.clip(iy, 0, None)[:, None], np.clip(ix, 0, None)[None, :]]
        out = np.array(out)
        out[..., (iy < 0)[:, None] | (ix < 0)[None, :]] = fill
        return out
    my, mx = _bilinear_matrix(h, scale), _bilinear_matrix(w, scale)
    return np.matmul(np.matmul(my, arr), mx.T).astype(arr.dtype)


def apply_geometry(arr, record, nearest=False, fill=0):
    out = resample(arr, record.scale, nearest=nearest, fill=fill)
    if record.hflip:
        out = out[..., :, ::-1]
    if record.vflip:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


def weak_augment(x, rng, p_flip=0.5, scale_range=SCALE_RANGE):
    """Random flips and centred rescale; returns (image, record)."""
    u = rng.random(3)
    lo, hi = scale_range
    record = AugRecord(hflip=bool(u[0] < p_flip), vflip=bool(u[1] < p_flip),
                       scale=float(lo + (hi - lo) * u[2]))
    return apply_geometry(x, record), record


def sample_box(h, w, lam):
    """Box of area ~lam*h*w; returns half-open (x0, y0, x1, y1) size and origin drawn later."""
    bh = int(np.clip(round(h * np.sqrt(lam)), 1, h))
    bw = int(np.clip(round(w * np.sqrt(lam)), 1, w))
    return bh, bw


def paste(dst, src, box):
    x0, y0, x1, y1 = box
    out = np.array(dst, copy=True)
    out[..., y0:y1, x0:x1] = src[..., y0:y1, x0:x1]
    return out


def photometric(x, blur_sigma, noise_sigma, rng):
    out = x
    if blur_sigma > 0:
        sig = [0.0] * (x.ndim - 2) + [blur_sigma, blur_sigma]
        out = gaussian_filter(out, sigma=sig, mode="nearest")
    if noise_sigma > 0:
        out = out + noise_sigma * rng.standard_normal(x.shape)
    return np.clip(out, 0.0, 1.0).astype(x.dtype) if out is not x else x.copy()


def strong_augment(x, batch, rng, index=None, cutmix_range=CUTMIX_RANGE,
                   blur_max=BLUR_MAX, noise_max=NOISE_MAX):
    """Blur + noise, then paste a CutMix box from a donor in ``batch``.

    ``index`` is x's own position in ``batch``; when given and the batch has
    other members, the donor is drawn among the others.
    """
    if len(batch) == 0:
        raise ValueError("strong_augment needs a non-empty donor batch")
    h, w = x.shape[-2:]
    u = rng.random(6)
    blur = float(blur_max * u[0])
    noise = float(noise_max * u[1])
    lam = float(cutmix_range[0] + (cutmix_range[1] - cutmix_range[0]) * u[2])
    n = len(batch)
    if index is not None and n > 1:
        donor = int(u[3] * (n - 1))
        donor += donor >= index
    else:
        donor = min(int(u[3] * n), n - 1)
    bh, bw = sample_box(h, w, lam)
    y0 = min(int(u[4] * (h - bh + 1)), h - bh)
    x0 = min(int(u[5] * (w - bw + 1)), w - bw)
    box = (x0, y0, x0 + bw, y0 + bh)
    out = photometric(x, blur, noise, rng)
    out = paste(out, np.asarray(batch[donor]), box)
    record = AugRecord(cutmix=CutMix(box, donor, lam), blur_sigma=blur, noise_sigma=noise)
    return out, record


def apply_to_labels(record, labels, donor_labels=None, fill=IGNORE):
    """Push a label map through the record's geometry and CutMix box."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DimensionError(f"label map must be H x W, got {labels.shape}")
    out = apply_geometry(labels, record.geometric(), nearest=True, fill=fill)
    if record.cutmix is not None:
        if donor_labels is None:
            raise ValueError("record has a CutMix box but no donor labels were given")
        donor_labels = np.asarray(donor_labels)
        if donor_labels.shape != labels.shape:
            raise DimensionError(f"donor labels {donor_labels.shape} vs labels {labels.shape}")
        x0, y0, x1, y1 = record.cutmix.box
        if not (0 <= x0 < x1 <= labels.shape[1] and 0 <= y0 < y1 <= labels.shape[0]):
            raise DimensionError(f"CutMix box {record.cutmix.box} outside {labels.shape}")
        out = paste(out, donor_labels, record.cutmix.box)
    return out


def scaled_box(box, factor):
    """Box on a grid downsampled by ``factor`` (covering, never empty)."""
    x0, y0, x1, y1 = box
    return (x0 // factor, y0 // factor, max(-(-x1 // factor), x0 // factor + 1),
            max(-(-y1 // factor), y0 // factor + 1))


def mix_maps(maps, records, factor=1):
    """CutMix a batch of maps (N, ..., h, w) with each record's box and donor.

    ``factor`` is the downsampling of the maps relative to the image grid.
    """
    out = np.array(maps, copy=True)
    for i, rec in enumerate(records):
        if rec.cutmix is None:
            continue
        x0, y0, x1, y1 = scaled_box(rec.cutmix.box, factor)
        out[i, ..., y0:y1, x0:x1] = maps[rec.cutmix.source_index, ..., y0:y1, x0:x1]
    return out

