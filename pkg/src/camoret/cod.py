"""Stand-in for a camouflaged-object-detection model.

Supplies soft masks of controllable quality, applies them to images, and
measures mask quality (binarised IoU, soft MAE).

Degradation recipe, keyed by ``seed`` through ``Stream(seed, "degrade")``
(draw order matters): ``direction`` (u < 0.5 erodes, otherwise dilates),
``wobble`` weight in [0.5, 1.5], blur sigma in [0.5, 1.5], threshold jitter in
[-0.5, 0.5] px, then a fractal-noise field (cell 16, 3 octaves) on the
sub-seed ``seed`` with stream ``"degrade-field"``. At strength ``s`` the
binary ground truth's signed distance ``dist`` (positive outside) is compared
with the boundary offset
``r = s * (sign * 1 + wobble * (2 * field - 1)) + jitter * s / 4``;
the soft mask is ``gaussian_blur(sigmoid(r - dist), sigma)``. Strength is
bisected until the binarised IoU is within tolerance of the target.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConvergenceError, ShapeError
from .noise import fractal_noise
from .numerics import Stream

IOU_TOLERANCE = 0.05


@dataclass
class SoftMask:
    values: np.ndarray
    provenance: str = "ground_truth"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"mask must be H x W, got {self.values.shape}")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")

    @property
    def shape(self):
        return self.values.shape

    def binary(self):
        return self.values > 0.5


def _values(m):
    return m.values if isinstance(m, SoftMask) else np.asarray(m, dtype=np.float64)


def apply_mask(image, mask):
    """Expert-branch input: per-pixel, per-channel product of mask and image."""
    img = np.asarray(image, dtype=np.float64)
    m = _values(mask)
    if img.shape[-3:-1] != m.shape[-2:] or (m.ndim == 3 and img.shape[0] != m.shape[0]):
        raise ShapeError(f"apply_mask: image {img.shape} vs mask {m.shape}")
    return img * m[..., None]


def mask_iou(a, b):
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ShapeError(f"mask_iou: {a.shape} vs {b.shape}")
    ba, bb = a > 0.5, b > 0.5
    union = np.logical_or(ba, bb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(ba, bb).sum() / union)


def mask_mae(a, b):
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ShapeError(f"mask_mae: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


def white_mask(H, W):
    return SoftMask(np.ones((H, W)), provenance="white")


def _degraded_at(strength, dist, field, sign, wobble, sigma, jitter):
    r = strength * (sign + wobble * (2.0 * field - 1.0)) + jitter * strength / 4.0
    soft = 0.5 * (1.0 + np.tanh(0.5 * (r - dist)))
    return np.clip(ndimage.gaussian_filter(soft, sigma, mode="nearest"), 0.0, 1.0)


def degrade_mask(gt, target_iou, seed, max_iter=60):
    """Seeded degradation of ``gt`` whose binarised IoU with ``gt`` is ``target_iou`` +/- 0.05."""
    gt_vals = _values(gt)
    if not 0.0 < target_iou <= 1.0:
        raise ValueError(f"target_iou must lie in (0, 1], got {target_iou}")
    fg = gt_vals > 0.5
    if not fg.any():
        raise ValueError("ground-truth mask has no foreground")
    if target_iou >= 1.0:
        return SoftMask(gt_vals.copy(), provenance="degraded(1.0)")

    st = Stream(seed, "degrade")
    sign = -1.0 if st.uniform() < 0.5 else 1.0
    wobble = st.uniform(low=0.5, high=1.5)
    sigma = st.uniform(low=0.5, high=1.5)
    jitter = st.uniform(low=-0.5, high=0.5)
    H, W = gt_vals.shape
    field = fractal_noise(H, W, seed, base_cell=16.0, octaves=3, stream="degrade-field")
    dist = ndimage.distance_transform_edt(~fg) - ndimage.distance_transform_edt(fg)

    def attempt(s):
        out = _degraded_at(s, dist, field, sign, wobble, sigma, jitter)
        return out, mask_iou(out, gt_vals)

    lo, hi = 0.0, 1.0
    out, iou = attempt(hi)
    iters = 0
    while iou > target_iou and iters < max_iter:
        lo, hi = hi, hi * 2.0
        out, iou = attempt(hi)
        iters += 1
    best_out, best_iou = out, iou
    while abs(best_iou - target_iou) > IOU_TOLERANCE and iters < max_iter:
        mid = 0.5 * (lo + hi)
        out, iou = attempt(mid)
        if abs(iou - target_iou) < abs(best_iou - target_iou):
            best_out, best_iou = out, iou
        if iou > target_iou:
            lo = mid
        else:
            hi = mid
        iters += 1
    if abs(best_iou - target_iou) > IOU_TOLERANCE:
        raise ConvergenceError(
            f"could not reach IoU {target_iou:.3f} (achieved {best_iou:.3f})", achieved=best_iou)
    return SoftMask(best_out, provenance=f"degraded({target_iou:g})")


def oracle_masks(gt_masks, condition, seeds=None):
    """Masks for a batch of ground-truth masks under an experiment condition.

    ``condition`` is ``"gt"``, ``"white"`` or ``"iou:<target>"``.
    """
    gt_masks = np.asarray(gt_masks, dtype=np.float64)
    if condition == "gt":
        return gt_masks.copy()
    if condition == "white":
        return np.ones_like(gt_masks)
    if condition.startswith("iou:"):
        target = float(condition.split(":", 1)[1])
        if seeds is None:
            seeds = range(len(gt_masks))
        return np.stack([degrade_mask(m, target, int(s)).values for m, s in zip(gt_masks, seeds)])
    raise ValueError(f"unknown mask condition {condition!r}")
