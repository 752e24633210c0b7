import dataclasses

import numpy as np
import pytest

from serq._validation import ValidationError
from serq.tensorio import (
    CalibStats,
    LayerRecord,
    ModelManifest,
    SyntheticSpec,
    collect_calib_stats,
    gen_synthetic_activations,
    load_manifest,
    load_tensor,
    outlier_channels,
    save_manifest,
    save_tensor,
)


def test_format_roundtrip_simple(tmp_path):
    path = tmp_path / "t.bin"
    save_tensor(path, np.array([[1.0, 2.0], [3.0, 4.0]]))
    t = load_tensor(path)
    assert t.shape == (2, 2)
    assert np.array_equal(t, [[1.0, 2.0], [3.0, 4.0]])


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((17, 9))
    x[0, 0] = np.nextafter(0.0, 1.0)  # subnormal survives
    x[0, 1] = -0.0
    path = tmp_path / "t.bin"
    save_tensor(path, x)
    back = load_tensor(path)
    assert back.tobytes() == x.tobytes()


def test_short_payload_rejected(tmp_path):
    path = tmp_path / "t.bin"
    save_tensor(path, np.ones((2, 2)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])  # drop one value
    with pytest.raises(ValidationError, match="payload length"):
        load_tensor(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "t.bin"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 24)
    with pytest.raises(ValidationError, match="magic"):
        load_tensor(path)


def test_nonfinite_rejected_on_save():
    with pytest.raises(ValidationError, match="non-finite"):
        save_tensor("/tmp/never-written.bin", np.array([[np.inf, 1.0]]))


def test_synthetic_deterministic():
    spec = SyntheticSpec(rows=32, cols=16, n_outlier_channels=3, outlier_magnitude=10, seed=42)
    a = gen_synthetic_activations(spec)
    b = gen_synthetic_activations(spec)
    assert np.array_equal(a, b)


def test_synthetic_no_outliers_uniform_scale():
    spec = SyntheticSpec(rows=256, cols=32, seed=1)
    x = gen_synthetic_activations(spec)
    col_max = np.abs(x).max(axis=0)
    assert col_max.max() / col_max.min() < 10.0


def test_synthetic_planted_columns_detectable():
    # derived oracle: recompute column statistics from the generated tensor
    spec = SyntheticSpec(rows=256, cols=64, n_outlier_channels=8, outlier_magnitude=50, seed=7)
    x = gen_synthetic_activations(spec)
    col_max = np.abs(x).max(axis=0)
    med = np.median(col_max)
    big = np.flatnonzero(col_max > 10 * med)
    assert big.size == 8
    assert np.array_equal(np.sort(big), outlier_channels(spec))


def test_synthetic_invariants():
    with pytest.raises(ValidationError):
        SyntheticSpec(rows=4, cols=4, n_outlier_channels=5)
    with pytest.raises(ValidationError):
        SyntheticSpec(rows=4, cols=4, outlier_magnitude=0.5)


def test_calib_stats_definition():
    stats = collect_calib_stats(np.array([[1.0, -2.0], [0.5, 1.0]]))
    assert np.array_equal(stats.max_abs, [1.0, 2.0])
    assert stats.sample_count == 2


def test_calib_stats_all_zero():
    stats = collect_calib_stats(np.zeros((3, 4)))
    assert np.array_equal(stats.max_abs, np.zeros(4))


def test_calib_stats_planted_top_channels():
    spec = SyntheticSpec(rows=128, cols=32, n_outlier_channels=4, outlier_magnitude=40, seed=3)
    x = gen_synthetic_activations(spec)
    stats = collect_calib_stats(x)
    # brute-force column scan
    expect = np.array([np.abs(x[:, j]).max() for j in range(32)])
    assert np.array_equal(stats.max_abs, expect)
    top4 = np.sort(np.argsort(-stats.max_abs)[:4])
    assert np.array_equal(top4, outlier_channels(spec))


def test_calib_stats_permutation_equivariant():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((20, 10))
    perm = rng.permutation(10)
    a = collect_calib_stats(x).max_abs
    b = collect_calib_stats(x[:, perm]).max_abs
    assert np.array_equal(a[perm], b)


def test_calib_stats_invariants():
    with pytest.raises(ValidationError):
        CalibStats(2, np.array([1.0, -1.0]), 1)
    with pytest.raises(ValidationError):
        CalibStats(2, np.array([1.0, 1.0]), 0)


def test_manifest_roundtrip(tmp_path):
    m = ModelManifest(
        layers=[LayerRecord("q_proj", 8, 8, "q.bin", "q_proj")],
        nodes={"ln1": "rmsnorm", "attn": "attention_mix"},
        graph_edges=[("ln1", "q_proj", "in"), ("q_proj", "attn", "q")],
        hidden_dim=8,
        head_dim=4,
        n_heads=2,
    )
    path = tmp_path / "manifest.json"
    save_manifest(path, m)
    back = load_manifest(path)
    assert back.layers[0].name == "q_proj"
    assert back.graph_edges == m.graph_edges
    assert back.hidden_dim == 8


def test_manifest_rejects_undeclared_edge():
    m = ModelManifest(
        layers=[LayerRecord("a", 2, 2, "a.bin")],
        graph_edges=[("a", "ghost", "in")],
    )
    with pytest.raises(ValidationError, match="undeclared"):
        m.validate()


def test_manifest_rejects_bad_head_split():
    m = ModelManifest(hidden_dim=10, head_dim=4, n_heads=2)
    with pytest.raises(ValidationError, match="head_dim"):
        m.validate()


def test_save_is_idempotent_bytes(tmp_path):
    x = np.random.default_rng(9).standard_normal((5, 5))
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_tensor(p1, x)
    save_tensor(p2, x)
    assert p1.read_bytes() == p2.read_bytes()
