"""Tensor containers, synthetic data generation, and file I/O.

The on-disk tensor format is a fixed-layout binary: a 16-byte magic field
(ASCII ``SERQTNSR`` padded with zero bytes), little-endian u32 row and column
counts, then rows*cols little-endian float64 values in row-major order.
Model manifests are JSON documents listing layer records and channel-flow
graph edges.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ._validation import ValidationError, as_matrix

MAGIC = b"SERQTNSR" + b"\x00" * 8
_HEADER = struct.Struct("<II")


@dataclass(frozen=True)
class CalibStats:
    """Per-channel calibration statistics of an activation matrix."""

    channels: int
    max_abs: np.ndarray  # shape (channels,), nonnegative
    sample_count: int

    def __post_init__(self):
        if self.max_abs.shape != (self.channels,):
            raise ValidationError("max_abs length must equal channels")
        if (self.max_abs < 0).any():
            raise ValidationError("max_abs entries must be nonnegative")
        if self.sample_count < 1:
            raise ValidationError("sample_count must be >= 1")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a deterministic synthetic activation matrix.

    Entries are standard normal; after a seeded shuffle of column identities,
    the first ``n_outlier_channels`` columns are multiplied by
    ``outlier_magnitude``, planting channel-wise outliers.
    """

    rows: int
    cols: int
    n_outlier_channels: int = 0
    outlier_magnitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValidationError("rows and cols must be positive")
        if not 0 <= self.n_outlier_channels <= self.cols:
            raise ValidationError("n_outlier_channels must be <= cols")
        if self.outlier_magnitude < 1:
            raise ValidationError("outlier_magnitude must be >= 1")


@dataclass
class LayerRecord:
    name: str
    rows: int
    cols: int
    path: str
    role: str = "linear"


@dataclass
class ModelManifest:
    """Layer records plus producer->consumer channel-flow edges."""

    layers: list[LayerRecord] = field(default_factory=list)
    nodes: dict[str, str] = field(default_factory=dict)  # name -> node kind
    graph_edges: list[tuple[str, str, str]] = field(default_factory=list)
    hidden_dim: int = 0
    head_dim: int = 0
    n_heads: int = 0

    def validate(self) -> None:
        declared = {rec.name for rec in self.layers} | set(self.nodes)
        for src, dst, _port in self.graph_edges:
            if src not in declared or dst not in declared:
                raise ValidationError(f"edge ({src}, {dst}) references undeclared node")
        if self.n_heads and self.hidden_dim != self.head_dim * self.n_heads:
            raise ValidationError("hidden_dim must equal head_dim * n_heads")

    def to_dict(self) -> dict:
        return {
            "layers": [vars(rec).copy() for rec in self.layers],
            "nodes": dict(self.nodes),
            "graph_edges": [list(e) for e in self.graph_edges],
            "hidden_dim": self.hidden_dim,
            "head_dim": self.head_dim,
            "n_heads": self.n_heads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelManifest":
        m = cls(
            layers=[LayerRecord(**rec) for rec in d.get("layers", [])],
            nodes=dict(d.get("nodes", {})),
            graph_edges=[tuple(e) for e in d.get("graph_edges", [])],
            hidden_dim=int(d.get("hidden_dim", 0)),
            head_dim=int(d.get("head_dim", 0)),
            n_heads=int(d.get("n_heads", 0)),
        )
        m.validate()
        return m


def save_tensor(path: str | os.PathLike, x) -> None:
    """Write a matrix in the binary tensor format (atomic replace)."""
    x = as_matrix(x, "tensor")
    rows, cols = x.shape
    payload = np.ascontiguousarray(x, dtype="<f8").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(rows, cols))
        f.write(payload)
    os.replace(tmp, path)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    """Read a matrix written by :func:`save_tensor`.

    Raises ValidationError on a malformed header, a payload shorter or longer
    than rows*cols, or non-finite values.
    """
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValidationError(f"{path}: bad magic, not a tensor file")
        header = f.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValidationError(f"{path}: truncated header")
        rows, cols = _HEADER.unpack(header)
        payload = f.read()
    expected = rows * cols * 8
    if len(payload) != expected:
        raise ValidationError(
            f"{path}: payload length {len(payload)} does not match {rows}x{cols} shape"
        )
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)
    if data.size and not np.isfinite(data).all():
        raise ValidationError(f"{path}: tensor contains non-finite values")
    return data


def gen_synthetic_activations(spec: SyntheticSpec) -> np.ndarray:
    """Generate a standard-normal matrix with planted channel outliers.

    Pure function of its recipe: the same seed always yields the same matrix.
    """
    rng = np.random.default_rng(spec.seed)
    x = rng.standard_normal((spec.rows, spec.cols))
    if spec.n_outlier_channels:
        channel_ids = rng.permutation(spec.cols)
        outlier_cols = channel_ids[: spec.n_outlier_channels]
        x[:, outlier_cols] *= spec.outlier_magnitude
    return x


def outlier_channels(spec: SyntheticSpec) -> np.ndarray:
    """Indices of the planted outlier columns for ``spec`` (sorted)."""
    rng = np.random.default_rng(spec.seed)
    rng.standard_normal((spec.rows, spec.cols))
    if not spec.n_outlier_channels:
        return np.empty(0, dtype=np.intp)
    channel_ids = rng.permutation(spec.cols)
    return np.sort(channel_ids[: spec.n_outlier_channels])


def collect_calib_stats(activations) -> CalibStats:
    """Per-channel max-abs statistics over the rows of an activation matrix."""
    x = as_matrix(activations, "activations")
    return CalibStats(
        channels=x.shape[1],
        max_abs=np.abs(x).max(axis=0),
        sample_count=x.shape[0],
    )


def save_manifest(path: str | os.PathLike, manifest: ModelManifest) -> None:
    manifest.validate()
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def load_manifest(path: str | os.PathLike) -> ModelManifest:
    with open(path) as f:
        return ModelManifest.from_dict(json.load(f))
