import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vtsplat.gaussians import GaussianScene
from vtsplat.metrics import (PSNR_IDENTICAL, EvalReport, ViewScore, chamfer, chamfer_bruteforce, config_hash,
                             dilate_mask, extract_surface, psnr, score_view, ssim)


def test_ssim_identical_is_one():
    a = np.random.default_rng(0).random((32, 40, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_drops_with_noise():
    rng = np.random.default_rng(1)
    a = rng.random((32, 32, 3))
    assert ssim(a, np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)) < 0.9


def test_psnr_closed_form_20db():
    a = np.zeros((10, 10, 3))
    b = np.full((10, 10, 3), 0.1)   # MSE = 0.01
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)


def test_psnr_identical_and_masked():
    a = np.random.default_rng(2).random((8, 8, 3))
    assert psnr(a, a) == PSNR_IDENTICAL
    b = a.copy()
    b[:4] += 0.1
    m = np.zeros((8, 8), bool)
    m[4:] = True
    assert psnr(a, b, m) == PSNR_IDENTICAL
    with pytest.raises(ValueError):
        psnr(a, b, np.zeros((8, 8), bool))


def test_chamfer_known_offset():
    a = np.random.default_rng(3).random((50, 3))
    assert chamfer(a, a + [0.001, 0, 0]) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(100))
def test_chamfer_indexed_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((rng.integers(1, 60), 3))
    b = rng.random((rng.integers(1, 60), 3))
    assert chamfer(a, b) == pytest.approx(chamfer_bruteforce(a, b), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**31))
def test_chamfer_symmetric_and_nonnegative(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((n, 3)), rng.random((m, 3))
    assert chamfer(a, b) == pytest.approx(chamfer(b, a))
    assert chamfer(a, b) >= 0


def test_chamfer_empty_raises():
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), np.zeros((3, 3)))


def test_dilate_mask_grows_by_pixels():
    m = np.zeros((9, 9), bool)
    m[4, 4] = True
    assert dilate_mask(m, 2).sum() == 25


def test_extract_surface_threshold_and_anchors():
    s = GaussianScene(np.arange(9.0).reshape(3, 3), [[1, 0, 0, 0]] * 3, np.full((3, 3), 0.01), [0.2, 0.7, 0.1],
                      np.zeros((3, 3)), [False, False, True], [[np.nan] * 3, [np.nan] * 3, [0, 0, 1]])
    pts = extract_surface(s, 0.5)
    assert len(pts) == 2
    # the box drops the opaque point at (3, 4, 5) but never an anchor
    assert np.array_equal(extract_surface(s, 0.5, ([-1, -1, -1], [1, 1, 1])), [[6.0, 7.0, 8.0]])
    with pytest.raises(ValueError):
        extract_surface(s.subset([0]), 0.5)


def test_report_roundtrip_and_hash():
    r = EvalReport([ViewScore("a", 20.0, 0.8, 18.0, 0.7)], chamfer_mm=3.2, n_views=9, n_touches=10,
                   config_hash=config_hash({"b": 1, "a": 2}))
    assert config_hash({"a": 2, "b": 1}) == r.config_hash
    back = EvalReport.from_dict(json.loads(r.to_json()))
    assert back == r
    assert r.summary()["psnr_masked"] == 18.0


def test_score_view_masked():
    rng = np.random.default_rng(4)
    t = rng.random((16, 16, 3))
    m = np.zeros((16, 16), bool)
    m[6:10, 6:10] = True
    s = score_view("v", t, t, m)
    assert s.psnr == PSNR_IDENTICAL and s.psnr_masked == PSNR_IDENTICAL
