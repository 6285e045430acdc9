import csv
import io
import math

import numpy as np
import pytest

from hfshield.freq_mask import laplacian_edge
from hfshield.image import generate_dataset
from hfshield.metrics import (
    REPORT_COLUMNS,
    ConditionResult,
    build_report,
    hf_energy,
    mse,
    nearest_mse,
    psnr,
    retention_ratio,
)
from hfshield.purify import gaussian_blur


def test_mse_psnr_identical():
    a = np.random.default_rng(0).uniform(size=(4, 4, 3))
    assert mse(a, a) == 0.0
    assert psnr(a, a) == math.inf


def test_mse_psnr_constant_offset():
    a = np.full((5, 5, 3), 0.3)
    b = a + 0.1
    assert abs(mse(a, b) - 0.01) < 1e-15
    assert abs(psnr(a, b) - 20.0) < 1e-9


def test_psnr_symmetric(rng):
    a, b = rng.uniform(size=(2, 6, 6, 3))
    assert psnr(a, b) == psnr(b, a)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape"):
        mse(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_nearest_mse():
    refs = np.stack([np.zeros((2, 2, 3)), np.ones((2, 2, 3))])
    samples = np.stack([np.full((2, 2, 3), 0.1), np.full((2, 2, 3), 0.8)])
    assert abs(nearest_mse(samples, refs) - (0.01 + 0.04) / 2) < 1e-15


def _checker(h, w, amp=0.01):
    return amp * np.where((np.add.outer(np.arange(h), np.arange(w)) % 2) == 0, 1.0, -1.0)[..., None] * np.ones(3)


def test_retention_identity_exactly_one(rng):
    x = rng.uniform(0.1, 0.9, size=(8, 8, 3))
    d = rng.normal(0, 0.02, size=x.shape)
    assert retention_ratio(x, d, lambda im: im) == 1.0


def test_retention_heavy_gaussian_on_high_frequency_delta(rng):
    x = rng.uniform(0.2, 0.8, size=(16, 16, 3))
    r = retention_ratio(x, _checker(16, 16), lambda im: gaussian_blur(im, sigma=4.0, radius=8))
    assert 0.0 <= r < 0.5


@pytest.mark.parametrize("c", [0.5, 2.0])
def test_retention_scale_invariant_for_linear_purifier(c, rng):
    x = rng.uniform(0.3, 0.7, size=(12, 12, 3))
    d = rng.normal(0, 0.02, size=x.shape)

    def blur(im):
        return gaussian_blur(im, 1.0, 2)

    assert abs(retention_ratio(x, c * d, blur) - retention_ratio(x, d, blur)) < 1e-9


def test_retention_rejects_zero_delta():
    with pytest.raises(ValueError, match="zero"):
        retention_ratio(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), lambda im: im)


def test_hf_energy_constant_zero():
    assert hf_energy(np.full((6, 6, 3), 0.4)) == 0.0


def test_hf_energy_checkerboard_interior():
    board = (np.add.outer(np.arange(10), np.arange(10)) % 2).astype(float)
    edges = laplacian_edge(board[..., None])
    np.testing.assert_allclose(edges[1:-1, 1:-1], 4.0, rtol=0, atol=1e-12)
    assert hf_energy(np.repeat(board[..., None], 3, axis=2)) > 3.0


def test_hf_energy_increases_with_noise():
    smooth = generate_dataset(1, seed=2)[0].images[0]
    wins = 0
    for seed in range(20):
        noisy = smooth + np.random.default_rng(seed).normal(0, 0.1, size=smooth.shape)
        wins += hf_energy(noisy) > hf_energy(smooth)
    assert wins == 20


def _results():
    return [
        ConditionResult("hf", "bilateral", l1=0.01, linf=0.1, retention=0.8, psnr=30.0, gen_mse=0.02, gen_hf=0.1),
        ConditionResult("hf", "bilateral", l1=0.02, linf=0.1, retention=0.6, psnr=32.0, gen_mse=0.04, gen_hf=0.3),
        ConditionResult("hf", "bilateral", l1=0.03, linf=0.1, retention=0.7, psnr=31.0, gen_mse=0.03, gen_hf=0.2),
        ConditionResult("uniform", "bilateral", l1=0.02, linf=0.02, retention=0.5, psnr=33.0, gen_mse=0.01,
                        gen_hf=0.15),
    ]


def test_report_matches_two_pass_oracle():
    results = _results()
    report = build_report(results)
    assert [r["method"] for r in report.rows] == ["hf", "uniform"]
    row = report.row("hf", "bilateral")
    assert row["n"] == 3
    for key in ("l1", "linf", "retention", "psnr", "gen_mse", "gen_hf"):
        vals = [getattr(r, key) for r in results[:3]]
        mean = sum(vals) / len(vals)
        std = math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))
        assert abs(row[f"{key}_mean"] - mean) < 1e-12
        assert abs(row[f"{key}_std"] - std) < 1e-12


def test_report_single_identity_std_zero():
    row = build_report(_results()[3:]).row("uniform", "bilateral")
    assert row["n"] == 1 and row["retention_std"] == 0.0 and row["gen_hf_std"] == 0.0


def test_report_empty_rejected():
    with pytest.raises(ValueError):
        build_report([])


def test_report_missing_values_and_infinite_psnr():
    rows = [ConditionResult("none", "identity", l1=0.0, psnr=math.inf), ConditionResult("none", "identity", l1=0.0)]
    row = build_report(rows).row("none", "identity")
    assert math.isnan(row["retention_mean"])
    assert row["psnr_mean"] == math.inf


def test_report_csv_and_table():
    report = build_report(_results())
    parsed = list(csv.DictReader(io.StringIO(report.to_csv())))
    assert tuple(parsed[0].keys()) == REPORT_COLUMNS
    assert float(parsed[0]["retention_mean"]) == report.rows[0]["retention_mean"]
    table = report.to_table().splitlines()
    assert table[0].split()[:3] == ["method", "purifier", "n"]
    assert len(table) == 2 + len(report.rows)
    with pytest.raises(KeyError):
        report.row("clean", "diffpure")
