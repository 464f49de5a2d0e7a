import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import psnr_loops, ssim_loops
from specgen.metrics import (
    MetricError,
    batch_compare,
    match_gallery,
    psnr,
    report_summary,
    ssim,
    write_report_csv,
)
from specgen.numerics import RngState


def rand_pair(seed, shape=(16, 16)):
    rng = RngState(seed)
    return rng.uniform(shape), rng.uniform(shape)


# -- psnr -------------------------------------------------------------------------


def test_psnr_identical_is_infinite():
    a, _ = rand_pair(1)
    assert psnr(a, a) == math.inf


def test_psnr_zero_db_when_mse_equals_max_squared():
    a = np.zeros((4, 4))
    b = np.ones((4, 4))
    assert psnr(a, b, max_value=1.0) == pytest.approx(0.0, abs=1e-12)


def test_psnr_twenty_db_analytic():
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)  # MSE = max^2 / 100
    assert psnr(a, b, max_value=1.0) == pytest.approx(20.0, abs=1e-12)


def test_psnr_shape_mismatch():
    with pytest.raises(MetricError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_matches_loop_oracle():
    for seed in range(5):
        a, b = rand_pair(seed)
        assert psnr(a, b) == pytest.approx(psnr_loops(a, b, 1.0), abs=1e-9)


@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
@settings(max_examples=25, deadline=None)
def test_psnr_strictly_decreasing_in_mse(seed, scale):
    rng = RngState(seed)
    a = rng.uniform((8, 8))
    delta = rng.normal((8, 8)) * 0.05 * scale
    p1 = psnr(a, a + delta)
    p2 = psnr(a, a + 2.0 * delta)
    if np.any(delta != 0):
        assert p2 < p1


# -- ssim -------------------------------------------------------------------------


def test_ssim_self_is_one():
    a, _ = rand_pair(2)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_ssim_symmetry():
    a, b = rand_pair(3)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_constant_images_closed_form():
    c1, c2 = 0.3, 0.7
    a = np.full((12, 12), c1)
    b = np.full((12, 12), c2)
    c1k = (0.01 * 1.0) ** 2
    expected = (2 * c1 * c2 + c1k) / (c1 * c1 + c2 * c2 + c1k)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-12)


def test_ssim_matches_loop_oracle_on_100_random_pairs():
    worst = 0.0
    for seed in range(100):
        a, b = rand_pair(seed + 100)
        got = ssim(a, b)
        want = ssim_loops(a, b)
        worst = max(worst, abs(got - want))
    assert worst < 1e-6, f"worst deviation {worst:.2e}"


def test_ssim_matches_skimage_when_available():
    skimage_metrics = pytest.importorskip("skimage.metrics")
    for seed in range(5):
        a, b = rand_pair(seed + 500, shape=(32, 32))
        ref = skimage_metrics.structural_similarity(
            a, b, win_size=7, gaussian_weights=False, data_range=1.0
        )
        assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_ssim_bounded(seed):
    rng = RngState(seed)
    a = rng.uniform((10, 10))
    b = rng.uniform((10, 10))
    val = ssim(a, b)
    assert -1.0 - 1e-12 <= val <= 1.0 + 1e-12
    assert val < 1.0  # random pairs are never identical


def test_ssim_validation():
    with pytest.raises(MetricError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)), window=7)
    with pytest.raises(MetricError):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(MetricError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)), k1=0.0)


# -- batch_compare -----------------------------------------------------------------


def stack(seeds, shape=(12, 12)):
    return np.stack([RngState(s).uniform(shape) for s in seeds])


def test_batch_compare_self_comparison():
    refs = stack([1, 2, 3])
    report = batch_compare(refs, refs)
    assert all(r.ssim == pytest.approx(1.0, abs=1e-9) for r in report.records)
    assert all(math.isinf(r.psnr_db) for r in report.records)
    assert [r.ref_id for r in report.records] == [0, 1, 2]


def test_batch_compare_singleton_zero_ci():
    report = batch_compare(stack([4]), stack([5]))
    assert len(report.records) == 1
    assert report.ci_psnr == 0.0 and report.ci_ssim == 0.0


def test_batch_compare_permutation_invariant():
    gen = stack([10, 11, 12, 13])
    ref = stack([20, 21, 22, 23, 24])
    r1 = batch_compare(gen, ref)
    perm = [3, 1, 4, 0, 2]
    r2 = batch_compare(gen, ref[perm])
    for a, b in zip(r1.records, r2.records):
        assert a.ssim == pytest.approx(b.ssim, abs=1e-12)
        assert a.psnr_db == pytest.approx(b.psnr_db, abs=1e-12)
    assert r1.mean_ssim == pytest.approx(r2.mean_ssim, abs=1e-12)
    assert r1.mean_psnr == pytest.approx(r2.mean_psnr, abs=1e-12)


def test_batch_compare_best_match_maximizes_ssim():
    ref = stack([30, 31, 32])
    gen = ref[1:2] + 0.001 * RngState(40).normal((1, 12, 12))
    report = batch_compare(np.clip(gen, 0, 1), ref)
    assert report.records[0].ref_id == 1


def test_batch_compare_label_counts():
    gen = stack([1, 2, 3, 4])
    report = batch_compare(gen, stack([5, 6]), labels=[0, 1, 3, 4])
    assert report.noise_count == 1
    assert report.overlap_count == 2
    summary = report_summary(report)
    assert "non-noise" in summary and "10.36" in summary


def test_batch_compare_validation():
    with pytest.raises(MetricError):
        batch_compare(np.zeros((0, 4, 4)), np.zeros((2, 4, 4)))
    with pytest.raises(MetricError):
        batch_compare(np.zeros((2, 4, 4)), np.zeros((2, 5, 5)))
    with pytest.raises(MetricError):
        batch_compare(stack([1]), stack([2]), labels=[0, 1])


def test_ci_half_width_formula():
    gen = stack([50, 51, 52, 53, 54])
    ref = stack([60, 61])
    report = batch_compare(gen, ref)
    vals = np.array([r.ssim for r in report.records])
    want = 1.96 * vals.std(ddof=1) / math.sqrt(len(vals))
    assert report.ci_ssim == pytest.approx(want, rel=1e-12)


# -- gallery ------------------------------------------------------------------------


def test_match_gallery_writes_four_panels(tmp_path):
    report = batch_compare(stack([70, 71, 72, 73]), stack([80, 81, 82]))
    files = match_gallery(report, 3, tmp_path)
    assert len(files) == 4
    names = {f.name for f in files}
    assert names == {
        "gallery_best_psnr.png",
        "gallery_worst_psnr.png",
        "gallery_best_ssim.png",
        "gallery_worst_ssim.png",
    }
    again = match_gallery(report, 3, tmp_path)
    assert {f.name for f in again} == names


def test_match_gallery_rejects_bad_k(tmp_path):
    report = batch_compare(stack([90]), stack([91]))
    with pytest.raises(MetricError):
        match_gallery(report, 0, tmp_path)
    with pytest.raises(MetricError):
        match_gallery(report, 2, tmp_path)


def test_report_csv_round_trip(tmp_path):
    report = batch_compare(stack([95, 96]), stack([97]))
    path = tmp_path / "report.csv"
    write_report_csv(report, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "gen_id,best_ref_id,psnr_db,ssim"
    assert len(lines) == 3
