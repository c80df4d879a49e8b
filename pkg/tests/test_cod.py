import numpy as np
import pytest

from camoret.c2ga import patch_confidence
from camoret.cod import (IOU_TOLERANCE, SoftMask, apply_mask, degrade_mask, mask_iou, mask_mae,
                         oracle_masks, white_mask)
from camoret.errors import ConvergenceError, ShapeError


def ellipse(H=64, W=64, cy=32, cx=30, ry=14, rx=20):
    yy, xx = np.mgrid[0:H, 0:W]
    return (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.float64)


def test_apply_mask_identity_zero_and_pixelwise(rng):
    img = rng.random((16, 16, 3))
    assert np.array_equal(apply_mask(img, np.ones((16, 16))), img)
    assert not apply_mask(img, np.zeros((16, 16))).any()
    m = ellipse(16, 16, 8, 8, 5, 6)
    out = apply_mask(img, m)
    assert not out[m == 0].any()
    assert np.array_equal(out[m == 1], img[m == 1])


def test_apply_mask_is_linear_in_image(rng):
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    m = rng.random((8, 8))
    assert np.allclose(apply_mask(2 * a + b, m), 2 * apply_mask(a, m) + apply_mask(b, m),
                       atol=1e-15)


def test_apply_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        apply_mask(np.zeros((8, 8, 3)), np.zeros((4, 4)))


def test_softmask_validation():
    with pytest.raises(ValueError):
        SoftMask(np.full((2, 2), 1.5))
    with pytest.raises(ShapeError):
        SoftMask(np.zeros(4))


def test_iou_and_mae_examples():
    m = ellipse()
    assert mask_iou(m, m) == 1.0 and mask_mae(m, m) == 0.0
    a, b = np.zeros((8, 8)), np.zeros((8, 8))
    a[:4, :4], b[4:, 4:] = 1, 1
    assert mask_iou(a, b) == 0.0
    # equal squares overlapping by half: |A n B| = 8, |A u B| = 24
    a, b = np.zeros((8, 8)), np.zeros((8, 8))
    a[0:4, 0:4], b[0:4, 2:6] = 1, 1
    assert mask_iou(a, b) == pytest.approx(1 / 3, abs=1e-15)


def test_white_mask():
    w = white_mask(12, 20)
    assert w.provenance == "white" and (w.values == 1.0).all()
    img = np.random.default_rng(0).random((12, 20, 3))
    assert np.array_equal(apply_mask(img, w), img)
    assert (patch_confidence(w, 4)[1:] == 1).all()


def test_degrade_target_one_is_identity():
    gt = ellipse()
    out = degrade_mask(gt, 1.0, seed=3)
    assert np.array_equal(out.values, gt)


@pytest.mark.parametrize("target", [0.6, 0.8])
def test_degrade_hits_target(target):
    gt = ellipse()
    for seed in range(5):
        out = degrade_mask(gt, target, seed)
        assert abs(mask_iou(out, gt) - target) <= IOU_TOLERANCE
        assert 0.0 <= out.values.min() and out.values.max() <= 1.0


def test_degrade_example_range():
    iou = mask_iou(degrade_mask(ellipse(), 0.6, seed=0), ellipse())
    assert 0.55 <= iou <= 0.65


def test_degrade_deterministic():
    gt = ellipse()
    assert np.array_equal(degrade_mask(gt, 0.7, 42).values, degrade_mask(gt, 0.7, 42).values)
    assert not np.array_equal(degrade_mask(gt, 0.7, 42).values, degrade_mask(gt, 0.7, 43).values)


def test_degrade_iou_monotone_in_target():
    gt = ellipse()
    means = [np.mean([mask_iou(degrade_mask(gt, t, s), gt) for s in range(10)])
             for t in (0.4, 0.6, 0.8, 0.95)]
    assert means == sorted(means)


def test_degrade_errors():
    with pytest.raises(ValueError):
        degrade_mask(np.zeros((16, 16)), 0.5, 0)
    with pytest.raises(ConvergenceError) as ei:
        degrade_mask(ellipse(), 0.5, 0, max_iter=0)
    assert ei.value.achieved is not None


def test_oracle_conditions():
    gts = np.stack([ellipse(), ellipse(cx=40)])
    assert np.array_equal(oracle_masks(gts, "gt"), gts)
    assert (oracle_masks(gts, "white") == 1).all()
    deg = oracle_masks(gts, "iou:0.8", seeds=[5, 6])
    assert all(abs(mask_iou(d, g) - 0.8) <= IOU_TOLERANCE for d, g in zip(deg, gts))
    with pytest.raises(ValueError):
        oracle_masks(gts, "blurry")


def test_white_mask_quality_arithmetic():
    gt = ellipse()
    w = white_mask(64, 64).values
    fg_frac = (gt > 0.5).mean()
    assert mask_iou(w, gt) == pytest.approx(fg_frac)
    assert mask_mae(w, gt) == pytest.approx(1.0 - gt.mean())
