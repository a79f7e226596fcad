import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dynlidar.imagefilter import FilterConfig, FilterKernel, box_filter, window_scores
from dynlidar.scan import Label, LabelImage

S, D, I = Label.STATIC, Label.DYNAMIC, Label.INVALID


def image(dyn_mask):
    return LabelImage(np.where(dyn_mask, D, S).astype(np.int8))


def naive_scores(binary, kernel=FilterKernel()):
    """Loop oracle: wrapped columns, windows must fit vertically."""
    H, W = binary.shape
    ar, ac = kernel.anchor
    out = np.full((H, W), -1)
    for r in range(ar, H - (2 - ar)):
        for c in range(W):
            s = 0
            for i in range(3):
                for j in range(4):
                    s += int(binary[r - ar + i, (c - ac + j) % W] == kernel.pattern[i, j])
            out[r, c] = s
    return out


def test_streak_is_removed():
    m = np.zeros((5, 12), bool)
    m[2, 3:7] = True
    assert window_scores(m)[2, 4] == 12
    out = box_filter(image(m))
    assert not (out.labels == D).any()


def test_all_static_window_scores_eight():
    m = np.zeros((5, 12), bool)
    assert (window_scores(m)[1:4] == 8).all()
    assert box_filter(image(m)) == image(m)


def test_solid_block_is_kept():
    m = np.zeros((5, 12), bool)
    m[1:4, 4:8] = True
    assert window_scores(m)[2, 5] == 4
    assert box_filter(image(m)) == image(m)


def test_two_row_region_untouched_and_idempotent():
    m = np.zeros((6, 20), bool)
    m[2:4, :] = True
    assert box_filter(image(m)) == image(m)
    for pattern in (np.zeros((5, 12), bool),):
        once = box_filter(image(pattern))
        assert box_filter(once) == once


def test_wraparound_columns():
    m = np.zeros((3, 10), bool)
    m[1, [8, 9, 0, 1]] = True
    assert not (box_filter(image(m)).labels == D).any()


def test_invalid_cells_score_as_zero():
    lab = np.full((3, 8), I, np.int8)
    lab[1, 2:6] = D
    out = box_filter(LabelImage(lab))
    assert (out.labels[1, 2:6] == S).all()
    assert (out.labels[out.labels != S] == I).all()


def test_needs_three_rows():
    with pytest.raises(ValueError):
        box_filter(image(np.zeros((2, 8), bool)))


def test_config_and_kernel_validation():
    with pytest.raises(ValueError):
        FilterConfig(13)
    with pytest.raises(ValueError):
        FilterKernel(anchor=(0, 0))
    with pytest.raises(ValueError):
        FilterKernel(np.ones((2, 4)))


masks = arrays(bool, st.tuples(st.integers(3, 7), st.integers(4, 12)))


@settings(max_examples=150, deadline=None)
@given(masks)
def test_scores_match_loop_oracle(m):
    assert np.array_equal(window_scores(m), naive_scores(m))


@settings(max_examples=150, deadline=None)
@given(masks, st.integers(0, 12))
def test_never_adds_dynamic(m, thr):
    out = box_filter(image(m), cfg=FilterConfig(thr))
    assert not np.any((out.labels == D) & ~m)


@settings(max_examples=150, deadline=None)
@given(masks, st.data())
def test_full_width_two_row_band_survives(m, data):
    r = data.draw(st.integers(0, m.shape[0] - 2))
    m = m.copy()
    m[r:r + 2] = True
    out = box_filter(image(m))
    assert (out.labels[r:r + 2] == D).all()
