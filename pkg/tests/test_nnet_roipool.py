"""ROI pooling against the exhaustive bin-enumeration oracle."""

import numpy as np
import pytest

from adasiam.nnet import finite_diff_grad, roi_pool, roi_pool_batch, roi_pool_backward
from adasiam.nnet.gradcheck import relative_error

from oracles import roi_pool_reference


def test_identity_partition():
    rng = np.random.default_rng(0)
    feat = rng.normal(size=(1, 7, 7))
    pooled, degenerate = roi_pool(feat, (0.0, 0.0, 7.0, 7.0), spatial_scale=1.0)
    assert not degenerate
    assert np.array_equal(pooled[0], feat[0])


def test_constant_feature_constant_output():
    feat = np.full((3, 12, 12), 4.2)
    for roi in [(1.0, 2.0, 9.0, 7.0), (0.0, 0.0, 48.0, 48.0), (5.5, 5.5, 3.0, 3.0)]:
        pooled, degenerate = roi_pool(feat, roi, spatial_scale=0.25
                                      if roi[2] > 12 else 1.0)
        assert not degenerate
        filled = pooled != 0.0
        assert np.all(pooled[filled] == 4.2)


@pytest.mark.parametrize("seed", range(6))
def test_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    feat = rng.normal(size=(4, 16, 16))
    roi = (float(rng.uniform(-8, 48)), float(rng.uniform(-8, 48)),
           float(rng.uniform(4, 60)), float(rng.uniform(4, 60)))
    pooled, _ = roi_pool(feat, roi, spatial_scale=0.25)
    want = roi_pool_reference(feat, roi, 0.25)
    assert np.array_equal(pooled, want)


def test_batch_equals_per_roi():
    rng = np.random.default_rng(11)
    feat = rng.normal(size=(5, 20, 20))
    rois = np.column_stack([
        rng.uniform(-10, 70, 40), rng.uniform(-10, 70, 40),
        rng.uniform(4, 50, 40), rng.uniform(4, 50, 40)])
    batch, deg = roi_pool_batch(feat, rois, spatial_scale=0.25)
    for i in range(40):
        single, dsingle = roi_pool(feat, rois[i], spatial_scale=0.25)
        assert np.array_equal(batch[i], single)
        assert deg[i] == dsingle


def test_fully_outside_roi_degenerate_zero():
    feat = np.ones((2, 8, 8))
    pooled, degenerate = roi_pool(feat, (200.0, 200.0, 10.0, 10.0),
                                  spatial_scale=0.25)
    assert degenerate
    assert np.all(pooled == 0.0)


def test_rejects_nonpositive_roi():
    with pytest.raises(ValueError):
        roi_pool(np.ones((1, 4, 4)), (0.0, 0.0, -1.0, 2.0), spatial_scale=1.0)


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(800 + seed)
    feat = rng.normal(size=(2, 8, 8))
    # perturbing ties would flip argmax; random floats are almost surely distinct
    roi = (1.0, 0.5, 22.0, 26.0)
    gy = rng.normal(size=(2, 7, 7))
    gx = roi_pool_backward(feat, roi, 0.25, gy)

    def loss(fv):
        return float((roi_pool(fv, roi, 0.25)[0] * gy).sum())

    assert relative_error(gx, finite_diff_grad(loss, feat.copy())) < 1e-4
