import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bce_ref
from splitfed import losses, nn
from splitfed.errors import ShapeError, ValidationError


def test_bce_at_zero_logits_is_ln2():
    y = (np.random.default_rng(0).random((2, 1, 8, 8)) < 0.5).astype(np.float32)
    assert abs(losses.bce_from_logits(np.zeros_like(y), y).loss - math.log(2)) < 1e-6


def test_bce_saturated_correct_is_tiny():
    y = (np.random.default_rng(1).random((1, 1, 6, 6)) < 0.5).astype(np.float32)
    assert losses.bce_from_logits(np.where(y == 1, 20.0, -20.0).astype(np.float32), y).loss < 1e-8


def test_bce_single_pixel_gradient():
    r = losses.bce_from_logits(np.zeros((1, 1, 1, 1)), np.ones((1, 1, 1, 1)))
    assert r.d_logits.item() == -0.5


def test_bce_is_stable_for_huge_logits():
    z = np.array([[[[1e4, -1e4]]]], np.float32)
    y = np.array([[[[0.0, 1.0]]]], np.float32)
    r = losses.bce_from_logits(z, y)
    assert math.isfinite(r.loss) and abs(r.loss - 1e4) < 1
    assert np.all(np.isfinite(r.d_logits))


@given(st.integers(0, 2**32 - 1))
def test_bce_matches_direct_definition(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((2, 1, 4, 4)) * 4
    y = (rng.random(z.shape) < 0.5).astype(np.float64)
    assert math.isclose(losses.bce_from_logits(z, y).loss, bce_ref(z, y), rel_tol=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_bce_batch_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((4, 1, 3, 3))
    y = (rng.random(z.shape) < 0.5).astype(np.float64)
    perm = rng.permutation(4)
    assert math.isclose(losses.bce_from_logits(z, y).loss, losses.bce_from_logits(z[perm], y[perm]).loss,
                        rel_tol=1e-12)


def test_bce_validation():
    with pytest.raises(ValidationError, match="binary"):
        losses.bce_from_logits(np.zeros((1, 1, 2, 2)), np.full((1, 1, 2, 2), 0.5))
    with pytest.raises(ShapeError):
        losses.bce_from_logits(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


def test_bce_overfits_single_batch_with_adam():
    y = (np.random.default_rng(2).random((2, 1, 4, 4)) < 0.5).astype(np.float32)
    p = nn.ParamSet([("z", np.zeros_like(y))])
    state = nn.AdamState(lr=0.1)
    for _ in range(500):
        r = losses.bce_from_logits(p["z"], y)
        p, state = nn.adam_step(p, {"z": r.d_logits}, state)
    assert losses.bce_from_logits(p["z"], y).loss < 0.05


def _half_masks():
    # 4x4: P covers columns 0-2, G columns 1-3 -> overlap 2 columns of 4
    p = np.zeros((1, 4, 4))
    g = np.zeros((1, 4, 4))
    p[:, :, :2] = 1
    g[:, :, 1:3] = 1
    return p, g


def test_iou_identities():
    m = np.zeros((1, 4, 4))
    m[0, 1:3, 1:3] = 1
    assert losses.miou([m], [m]).miou == 1.0
    other = np.zeros((1, 4, 4))
    other[0, 0, 0] = 1
    assert losses.miou([other], [m]).miou == 0.0
    p, g = _half_masks()
    r = losses.score([p], [g])
    assert r.miou == pytest.approx(1 / 3) and r.dice == pytest.approx(0.5)


def test_empty_empty_is_one_and_empty_list_errors():
    z = np.zeros((1, 3, 3))
    assert losses.score([z], [z]).miou == 1.0 and losses.score([z], [z]).dice == 1.0
    with pytest.raises(ValidationError):
        losses.miou([], [])


def test_threshold_is_inclusive():
    assert losses.score([np.full((1, 2, 2), 0.5)], [np.ones((1, 2, 2))]).miou == 1.0


@given(st.integers(0, 2**32 - 1))
def test_dice_iou_identity_and_permutation(seed):
    rng = np.random.default_rng(seed)
    probs = [rng.random((1, 6, 6)) for _ in range(5)]
    masks = [(rng.random((1, 6, 6)) < 0.4).astype(np.float32) for _ in range(5)]
    r = losses.score(probs, masks)
    for iou, dice in zip(r.per_image_iou, r.per_image_dice):
        assert 0 <= iou <= 1
        assert dice == pytest.approx(2 * iou / (1 + iou))
    perm = rng.permutation(5)
    r2 = losses.score([probs[i] for i in perm], [masks[i] for i in perm])
    assert r2.miou == pytest.approx(r.miou) and r2.dice == pytest.approx(r.dice)


def test_csv_row_format():
    r = losses.MetricReport(0.62345, 0.7, [0.6, 0.64690], [0.7, 0.7])
    assert r.csv_row("D2", "FtEn") == ["D2", "FtEn", "62.3", "70.0", "2"]
