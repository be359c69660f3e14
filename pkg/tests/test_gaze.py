"""Fixation parsing, attention heatmaps, threshold masks."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steerdiff import gaze
from steerdiff.gaze import (BinaryMask, Fixation, FixationSequence, HvaMap,
                            compute_hva, parse_fixations, threshold_hva)


# --- parsing ------------------------------------------------------------------

def test_parse_empty_body():
    seq, warn = parse_fixations("x,y,duration_ms\n", 64, 64)
    assert len(seq) == 0 and warn == 0


def test_parse_single_row():
    seq, warn = parse_fixations("x,y,duration_ms\n10,20,300\n", 64, 64)
    assert warn == 0
    assert len(seq) == 1
    f = seq.fixations[0]
    assert (f.x, f.y, f.duration_ms) == (10.0, 20.0, 300.0)


def test_parse_clamps_out_of_bounds_with_warning():
    seq, warn = parse_fixations("x,y,duration_ms\n-5,20,300\n", 64, 64)
    assert warn == 1
    f = seq.fixations[0]
    assert (f.x, f.y, f.duration_ms) == (0.0, 20.0, 300.0)


def test_parse_preserves_order():
    body = "x,y,duration_ms\n1,1,100\n2,2,200\n3,3,300\n"
    seq, _ = parse_fixations(body, 8, 8)
    assert [f.duration_ms for f in seq.fixations] == [100.0, 200.0, 300.0]


@pytest.mark.parametrize("body,row", [
    ("x,y,duration_ms\n1,2\n", 2),
    ("x,y,duration_ms\n1,2,abc\n", 2),
    ("x,y,duration_ms\n1,1,100\n5,5,-3\n", 3),
])
def test_parse_malformed_row_reports_row_number(body, row):
    with pytest.raises(ValueError, match=f"row {row}"):
        parse_fixations(body, 64, 64)


def test_parse_rejects_bad_header():
    with pytest.raises(ValueError, match="row 1"):
        parse_fixations("a,b,c\n1,2,3\n", 64, 64)


def test_fixation_csv_roundtrip(tmp_path):
    seq = FixationSequence([Fixation(3.25, 4.5, 120.0), Fixation(10, 20, 300)], 64, 64)
    path = tmp_path / "fix.csv"
    gaze.write_fixations(path, seq)
    back, warn = gaze.read_fixations(path, 64, 64)
    assert warn == 0
    assert [(f.x, f.y, f.duration_ms) for f in back.fixations] == \
           [(f.x, f.y, f.duration_ms) for f in seq.fixations]


# --- heatmaps -----------------------------------------------------------------

def one_fixation(x=32, y=32, dur=250.0, size=64):
    return FixationSequence([Fixation(x, y, dur)], size, size)


def test_hva_empty_sequence_is_all_zero():
    v = compute_hva(FixationSequence([], 64, 64), 64, 64, sigma=4.0)
    assert np.array_equal(v.grid, np.zeros((64, 64), dtype=np.float32))


def test_hva_single_fixation_analytic_gaussian():
    v = compute_hva(one_fixation(), 64, 64, sigma=4.0)
    assert v.grid[32, 32] == 1.0
    # exp(-16 / (2*16)) at 4 pixels away
    assert abs(v.grid[32, 36] - 0.6065306597126334) < 1e-4
    probes = [(32, 32, 1.0), (32, 36, np.exp(-0.5)), (36, 32, np.exp(-0.5)),
              (32, 40, np.exp(-2.0)), (28, 32, np.exp(-0.5)), (35, 36, np.exp(-25 / 32)),
              (32, 33, np.exp(-1 / 32)), (30, 30, np.exp(-8 / 32)), (32, 44, np.exp(-4.5)),
              (20, 32, np.exp(-144 / 32))]
    for y, x, want in probes:
        assert abs(v.grid[y, x] - want) < 1e-4


def test_hva_peak_is_exactly_one():
    rng = np.random.default_rng(0)
    fixes = [Fixation(float(rng.integers(0, 64)), float(rng.integers(0, 64)),
                      float(rng.uniform(50, 500))) for _ in range(7)]
    v = compute_hva(FixationSequence(fixes, 64, 64), 64, 64, sigma=3.0)
    assert v.grid.max() == 1.0


def test_hva_mirror_symmetry():
    fixes = FixationSequence([Fixation(20, 30, 200.0), Fixation(43, 30, 200.0)], 64, 64)
    v = compute_hva(fixes, 64, 64, sigma=4.0).grid
    # mirror line between columns 20 and 43 -> flipping columns 0..63 maps 20<->43
    assert np.abs(v - v[:, ::-1]).max() < 1e-6


def test_hva_duration_scaling_invariance():
    fixes = [Fixation(10, 12, 100.0), Fixation(40, 50, 320.0)]
    a = compute_hva(FixationSequence(fixes, 64, 64), 64, 64, sigma=5.0).grid
    scaled = [Fixation(f.x, f.y, f.duration_ms * 37.5) for f in fixes]
    b = compute_hva(FixationSequence(scaled, 64, 64), 64, 64, sigma=5.0).grid
    assert np.abs(a.astype(np.float64) - b.astype(np.float64)).max() < 1e-9


def test_hva_duration_weighting_matters():
    fixes = [Fixation(16, 16, 1000.0), Fixation(48, 48, 100.0)]
    weighted = compute_hva(FixationSequence(fixes, 64, 64), 64, 64, 4.0)
    counts = compute_hva(FixationSequence(fixes, 64, 64), 64, 64, 4.0,
                         duration_weighting=False)
    assert weighted.grid[48, 48] < 1.0
    assert counts.grid[48, 48] == 1.0


def test_hva_resolution_equivariance():
    """Scaling fixations and sigma by s gives the s-rescaled map (bilinear tol 1e-2)."""
    fixes32 = FixationSequence([Fixation(8, 9, 150.0), Fixation(20, 22, 300.0)], 32, 32)
    small = compute_hva(fixes32, 32, 32, sigma=5.0).grid.astype(np.float64)
    big = compute_hva(fixes32, 64, 64, sigma=10.0).grid.astype(np.float64)

    def bilinear(img, y, x):
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        y1, x1 = min(y0 + 1, img.shape[0] - 1), min(x0 + 1, img.shape[1] - 1)
        fy, fx = y - y0, x - x0
        return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])

    # probe interior points only: the fine grid's outermost half-pixel band has
    # no bilinear support on the coarse grid
    worst = max(abs(big[v, u] - bilinear(small, v / 2.0, u / 2.0))
                for v in range(0, 62, 3) for u in range(0, 62, 3))
    assert worst < 1e-2


def test_hva_rejects_bad_arguments():
    with pytest.raises(ValueError, match="positive"):
        compute_hva(one_fixation(), -4, 64, sigma=2.0)
    with pytest.raises(ValueError, match="sigma"):
        compute_hva(one_fixation(), 64, 64, sigma=0.0)


# --- thresholding -------------------------------------------------------------

def test_threshold_all_zero_map():
    for lam in (0.0, 0.4, 1.0):
        m = threshold_hva(HvaMap(np.zeros((16, 16))), lam)
        assert not m.as_bool().any()


def test_threshold_lambda_zero_keeps_everything():
    v = compute_hva(one_fixation(), 64, 64, sigma=4.0)
    m = threshold_hva(v, 0.0)
    assert m.as_bool().all()


def test_threshold_disc_matches_per_pixel_oracle():
    v = compute_hva(one_fixation(), 64, 64, sigma=4.0)
    lam = 0.6065306597126334  # exp(-0.5): cut exactly at radius 4
    m = threshold_hva(v, lam).grid
    # brute-force comparison, and the analytic disc of radius 4 around the peak
    oracle = np.zeros((64, 64), dtype=np.uint8)
    for y in range(64):
        for x in range(64):
            if v.grid[y, x] >= lam * v.grid.max():
                oracle[y, x] = 255
    assert np.array_equal(m, oracle)
    ys, xs = np.mgrid[0:64, 0:64]
    disc = ((ys - 32.0) ** 2 + (xs - 32.0) ** 2) <= 16.0 + 1e-9
    assert np.array_equal(m == 255, disc)


def test_threshold_rejects_lambda_outside_unit_interval():
    v = HvaMap(np.ones((4, 4)) * 0.5)
    for lam in (-0.1, 1.5):
        with pytest.raises(ValueError, match="lambda"):
            threshold_hva(v, lam)


def test_threshold_idempotent_on_induced_binary_map():
    v = compute_hva(one_fixation(), 64, 64, sigma=4.0)
    for lam in (0.2, 0.6, 1.0):
        m1 = threshold_hva(v, lam)
        induced = HvaMap(m1.grid.astype(np.float32) / 255.0)
        m2 = threshold_hva(induced, lam)
        assert np.array_equal(m1.grid, m2.grid)


@settings(max_examples=30, deadline=None)
@given(lam1=st.floats(0.0, 1.0), lam2=st.floats(0.0, 1.0), seed=st.integers(0, 10))
def test_threshold_monotonicity(lam1, lam2, seed):
    if lam1 > lam2:
        lam1, lam2 = lam2, lam1
    rng = np.random.default_rng(seed)
    fixes = [Fixation(float(rng.integers(0, 48)), float(rng.integers(0, 48)),
                      float(rng.uniform(100, 400))) for _ in range(3)]
    v = compute_hva(FixationSequence(fixes, 48, 48), 48, 48, sigma=3.0)
    inner = threshold_hva(v, lam2).as_bool()
    outer = threshold_hva(v, lam1).as_bool()
    assert not (inner & ~outer).any()  # mask(lam2) subset of mask(lam1)


def test_absolute_threshold_mode():
    grid = np.zeros((8, 8), dtype=np.float32)
    grid[2, 2] = 0.5
    grid[5, 5] = 1.0
    m = threshold_hva(HvaMap(grid), 0.6, absolute=True)
    assert m.grid[5, 5] == 255 and m.grid[2, 2] == 0


# --- png formats --------------------------------------------------------------

def test_hva_png_roundtrip(tmp_path):
    v = compute_hva(one_fixation(), 64, 64, sigma=4.0)
    path = tmp_path / "v.png"
    gaze.save_hva(path, v)
    back = gaze.load_hva(path)
    assert np.abs(back.grid - v.grid).max() <= 1.0 / 65535.0 + 1e-7


def test_mask_png_roundtrip_and_binary_rejection(tmp_path):
    m = threshold_hva(compute_hva(one_fixation(), 64, 64, 4.0), 0.6)
    path = tmp_path / "m.png"
    gaze.save_mask(path, m)
    assert np.array_equal(gaze.load_mask(path).grid, m.grid)
    with pytest.raises(ValueError, match="non-binary"):
        BinaryMask(np.array([[0, 7], [255, 0]]))
