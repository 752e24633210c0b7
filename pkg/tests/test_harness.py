import os

import numpy as np
import pytest

from serq._validation import ValidationError
from serq.harness import (
    QSNR_CAP_DB,
    emit_report,
    load_report,
    output_mse,
    qsnr,
    run_calibration_sensitivity,
    run_rank_sweep,
    run_saf_ablation,
    run_serq_vs_svd,
)
from serq.quantcore import IntQuantConfig
from serq.tensorio import SyntheticSpec

SMALL = SyntheticSpec(rows=64, cols=32, n_outlier_channels=4, outlier_magnitude=30, seed=0)
W4 = IntQuantConfig(bits=4, symmetric=True, group_size="per-row")


def test_qsnr_exact_match_caps():
    y = np.random.default_rng(0).standard_normal((4, 4))
    assert qsnr(y, y) == QSNR_CAP_DB


def test_qsnr_zero_estimate():
    y = np.random.default_rng(1).standard_normal((4, 4))
    assert abs(qsnr(y, np.zeros_like(y))) < 1e-12


def test_qsnr_ten_percent_error_is_20db():
    y = np.random.default_rng(2).standard_normal((8, 8))
    assert abs(qsnr(y, 1.1 * y) - 20.0) < 1e-9


def test_qsnr_orthogonal_invariance():
    rng = np.random.default_rng(3)
    y = rng.standard_normal((8, 8))
    y_hat = y + 0.01 * rng.standard_normal((8, 8))
    q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    assert abs(qsnr(y, y_hat) - qsnr(y @ q, y_hat @ q)) < 1e-9


def test_qsnr_rejects_zero_reference():
    with pytest.raises(ValidationError):
        qsnr(np.zeros((2, 2)), np.ones((2, 2)))


def test_serq_vs_svd_full_rank_unquantized_is_capped():
    # at rank = dim with unquantized compensators both recover the whole error
    rep = run_serq_vs_svd(SMALL, [32], W4, [0], quantize_r=False)
    by = {r.method: r.qsnr_db for r in rep.records}
    assert by["svd"] == QSNR_CAP_DB
    assert by["serq_wo_saf"] == QSNR_CAP_DB


def test_serq_vs_svd_direction_on_planted():
    rep = run_serq_vs_svd(SMALL, [4, 8], W4, range(10))
    by = {}
    for r in rep.records:
        by.setdefault((r.method, r.rank), {})[r.seed] = r.qsnr_db
    for rank in (4, 8):
        wins = sum(
            by[("serq_wo_saf", rank)][s] > by[("svd", rank)][s] for s in range(10)
        )
        assert wins >= 9


def test_rank_sweep_rank0_is_flattened_baseline():
    spec = SyntheticSpec(rows=48, cols=32, n_outlier_channels=4, outlier_magnitude=10, seed=1)
    rep = run_rank_sweep(spec, [0, 8], range(2), head_dim=8, eval_rows=32)
    assert {r.rank for r in rep.records} == {0, 8}
    for s in (0, 1):
        m = {r.rank: r.output_mse for r in rep.records if r.seed == s}
        assert m[8] <= m[0]


def test_rank_sweep_saturation():
    spec = SyntheticSpec(rows=64, cols=64, n_outlier_channels=6, outlier_magnitude=20, seed=2)
    rep = run_rank_sweep(spec, [16, 32, 48, 64], range(6), head_dim=16, eval_rows=64)
    gains_low, gains_high = [], []
    for s in range(6):
        m = {r.rank: r.output_mse for r in rep.records if r.seed == s}
        gains_low.append(m[16] - m[32])
        gains_high.append(m[48] - m[64])
    assert np.median(gains_low) >= np.median(gains_high)


def test_saf_ablation_no_outliers_agrees():
    spec = SyntheticSpec(rows=64, cols=32, seed=3)
    rep = run_saf_ablation(spec, 8, range(8), configs=("w4a4",), weight_profile="gaussian")
    med = {}
    for r in rep.records:
        med.setdefault(r.method, []).append(r.output_mse)
    ratio = np.median(med["serq"]) / np.median(med["serq_wo_saf"])
    assert 0.95 <= ratio <= 1.05


def test_saf_ablation_flattening_helps_on_outliers():
    spec = SyntheticSpec(rows=64, cols=32, n_outlier_channels=4, outlier_magnitude=8, seed=4)
    rep = run_saf_ablation(spec, 8, range(8), configs=("w4a4",), weight_profile="heavy")
    med = {}
    for r in rep.records:
        med.setdefault(r.method, []).append(r.output_mse)
    assert np.median(med["only_saf"]) < np.median(med["rtn"])
    assert np.median(med["serq"]) <= np.median(med["serq_wo_saf"])


def test_saf_ablation_covers_all_configs():
    spec = SyntheticSpec(rows=32, cols=32, n_outlier_channels=2, outlier_magnitude=5, seed=5)
    rep = run_saf_ablation(spec, 32, [0], configs=("w4a8", "w4a4", "mxfp4"))
    assert {r.bits for r in rep.records} == {"w4a8", "w4a4", "mxfp4"}


def test_calibration_sensitivity_single_row_valid():
    spec = SyntheticSpec(rows=4, cols=16, n_outlier_channels=2, outlier_magnitude=10, seed=6)
    rep = run_calibration_sensitivity(spec, [1, 4], [0], rank=4)
    assert len(rep.records) == 2
    assert all(np.isfinite(r.output_mse) for r in rep.records)


def test_calibration_sensitivity_deterministic():
    spec = SyntheticSpec(rows=64, cols=32, n_outlier_channels=4, outlier_magnitude=20, seed=7)
    a = run_calibration_sensitivity(spec, [8, 32], range(3), rank=4)
    b = run_calibration_sensitivity(spec, [8, 32], range(3), rank=4)
    assert [r.output_mse for r in a.records] == [r.output_mse for r in b.records]


def test_thread_count_does_not_change_results(monkeypatch):
    spec = SyntheticSpec(rows=48, cols=32, n_outlier_channels=4, outlier_magnitude=15, seed=8)
    one = run_serq_vs_svd(spec, [4], W4, range(4))
    monkeypatch.setenv("SERQ_THREADS", "3")
    multi = run_serq_vs_svd(spec, [4], W4, range(4))
    assert [(r.seed, r.method, r.qsnr_db) for r in one.records] == [
        (r.seed, r.method, r.qsnr_db) for r in multi.records
    ]


def test_emit_report_empty_has_header(tmp_path):
    from serq.harness import MetricsReport

    path = tmp_path / "empty.csv"
    emit_report(MetricsReport("x"), "csv", path)
    assert path.read_text() == "experiment,method,bits,rank,group,seed,qsnr_db,output_mse,eff_bits\n"


def test_emit_report_csv_row_count(tmp_path):
    rep = run_serq_vs_svd(SMALL, [4], W4, range(3))
    path = tmp_path / "r.csv"
    emit_report(rep, "csv", path)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 1 + len(rep.records)


def test_report_json_roundtrip_stable(tmp_path):
    rep = run_serq_vs_svd(SMALL, [4], W4, range(2))
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    emit_report(rep, "json", p1)
    emit_report(load_report(p1), "json", p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_rerun_byte_identical(tmp_path):
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    emit_report(run_serq_vs_svd(SMALL, [4, 8], W4, range(3)), "json", p1)
    emit_report(run_serq_vs_svd(SMALL, [4, 8], W4, range(3)), "json", p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_every_record_carries_seed():
    rep = run_saf_ablation(SMALL, 4, [11, 13], configs=("w4a8",))
    assert {r.seed for r in rep.records} == {11, 13}
