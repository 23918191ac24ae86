import json
import math

import numpy as np
import pytest

from axon import metrics as mt
from axon import voxcore as vc


def unit_volume(data):
    data = np.asarray(data, dtype=np.float64)
    return vc.Volume(data.shape, (1, 1, 1), data, vc.NORMALIZED_01)


def random_unit_pair(dims, seed):
    rng = vc.SeededRng(seed)
    a = unit_volume(rng.uniform(0, 1, dims))
    b = unit_volume(rng.uniform(0, 1, dims))
    return a, b


def test_mae_mse_identical_and_constant_offset():
    a = unit_volume(np.full((4, 4, 4), 0.5))
    assert mt.mae(a, a) == 0.0
    assert mt.mse(a, a) == 0.0
    b = unit_volume(np.full((4, 4, 4), 0.6))
    assert mt.mae(a, b) == pytest.approx(0.1)
    assert mt.mse(a, b) == pytest.approx(0.01)


def test_mae_mse_match_bruteforce():
    a, b = random_unit_pair((6, 5, 4), 1)
    mae_o = 0.0
    mse_o = 0.0
    for x in range(6):
        for y in range(5):
            for z in range(4):
                d = a.data[x, y, z] - b.data[x, y, z]
                mae_o += abs(d)
                mse_o += d * d
    n = 6 * 5 * 4
    assert abs(mt.mae(a, b) - mae_o / n) < 1e-12
    assert abs(mt.mse(a, b) - mse_o / n) < 1e-12


def test_metrics_reject_mismatch():
    a = unit_volume(np.zeros((4, 4, 4)))
    b = unit_volume(np.zeros((5, 4, 4)))
    with pytest.raises(vc.VoxError):
        mt.mae(a, b)
    c = vc.volume_new((4, 4, 4), (1, 1, 1), 0.0)  # HU domain
    with pytest.raises(vc.VoxError):
        mt.mse(a, c)


def test_symmetry():
    a, b = random_unit_pair((8, 8, 8), 2)
    assert mt.mae(a, b) == mt.mae(b, a)
    assert mt.mse(a, b) == mt.mse(b, a)
    assert mt.ssim3d(a, b) == pytest.approx(mt.ssim3d(b, a), abs=1e-14)


def test_psnr_values():
    a = unit_volume(np.zeros((4, 4, 4)))
    b = unit_volume(np.full((4, 4, 4), 0.1))
    assert mt.psnr(a, b) == pytest.approx(20.0)
    assert mt.psnr(a, a) == math.inf
    assert 10 * math.log10(1 / 0.0078) == pytest.approx(21.08, abs=0.005)


def test_psnr_decreasing_in_mse():
    base = unit_volume(np.zeros((4, 4, 4)))
    last = math.inf
    for amp in (0.01, 0.02, 0.05, 0.1, 0.3):
        cur = mt.psnr(base, unit_volume(np.full((4, 4, 4), amp)))
        assert cur < last
        last = cur


def brute_force_ssim(a, b, window=7, k1=0.01, k2=0.03, L=1.0):
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    vals = []
    nx, ny, nz = a.shape
    for x in range(nx - window + 1):
        for y in range(ny - window + 1):
            for z in range(nz - window + 1):
                wa = a[x : x + window, y : y + window, z : z + window]
                wb = b[x : x + window, y : y + window, z : z + window]
                mx, my = wa.mean(), wb.mean()
                vx, vy = wa.var(), wb.var()
                cov = ((wa - mx) * (wb - my)).mean()
                vals.append(((2 * mx * my + c1) * (2 * cov + c2))
                            / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_identical_is_one():
    a, _ = random_unit_pair((9, 9, 9), 3)
    assert mt.ssim3d(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_bruteforce():
    a, b = random_unit_pair((12, 12, 12), 4)
    assert abs(mt.ssim3d(a, b) - brute_force_ssim(a.data, b.data)) < 1e-10


def test_ssim_anticorrelated_negative():
    rng = vc.SeededRng(5)
    bits = (rng.uniform(0, 1, (8, 8, 8)) > 0.5).astype(np.float64)
    a = unit_volume(bits)
    b = unit_volume(1.0 - bits)
    # windows with nonzero variance score negative
    assert mt.ssim3d(a, b, window=7) < 0.0


def test_ssim_bounds_and_window_guard():
    a, b = random_unit_pair((8, 8, 8), 6)
    val = mt.ssim3d(a, b)
    assert -1.0 <= val <= 1.0
    small = unit_volume(np.zeros((4, 4, 4)))
    with pytest.raises(vc.VoxError):
        mt.ssim3d(small, small)


def test_to_unit_range():
    v = vc.Volume((2, 2, 2), (1, 1, 1), np.full((2, 2, 2), -1.0), vc.NORMALIZED_PM1)
    u = mt.to_unit_range(v)
    assert u.domain_tag == vc.NORMALIZED_01
    assert np.all(u.data == 0.0)
    hu = vc.volume_new((2, 2, 2), (1, 1, 1), 0.0)
    with pytest.raises(vc.VoxError):
        mt.to_unit_range(hu)


def test_paper_table_psnr_consistency():
    # The evaluation convention must reproduce the published MSE<->PSNR
    # relation within 0.5 dB for all four pipeline rows.
    rows = [(0.0078, 21.21), (0.0077, 21.24), (0.0096, 20.30), (0.0099, 20.15)]
    for mse_val, psnr_val in rows:
        assert abs(10 * math.log10(1 / mse_val) - psnr_val) < 0.5


def test_evaluate_batch_and_report():
    a, b = random_unit_pair((8, 8, 8), 7)
    report = mt.evaluate_batch([(a, b)])
    assert report.mean_std("psnr")[1] == 0.0  # single sample -> std 0

    base = unit_volume(np.zeros((8, 8, 8)))
    p20 = unit_volume(np.full((8, 8, 8), 0.1))
    p22 = unit_volume(np.full((8, 8, 8), 10 ** (-22 / 20)))
    report = mt.evaluate_batch([(base, p20), (base, p22)], ids=["a", "b"])
    mean, std = report.mean_std("psnr")
    assert mean == pytest.approx(21.0, abs=1e-9)
    assert std == pytest.approx(1.0, abs=1e-9)


def test_report_json_roundtrip():
    a, b = random_unit_pair((8, 8, 8), 8)
    c, d = random_unit_pair((8, 8, 8), 9)
    report = mt.evaluate_batch([(a, b), (c, d)], ids=["s0", "s1"])
    text = report.to_json_lines()
    back = mt.MetricReport.from_json_lines(text)
    assert back.ids == report.ids
    assert back.per_sample == report.per_sample
    lines = [json.loads(x) for x in text.strip().splitlines()]
    assert lines[-1]["summary"] is True


def test_empty_batch_rejected():
    with pytest.raises(vc.VoxError):
        mt.evaluate_batch([])
