"""Group-wise integer quantization and effective-bit accounting.

Symmetric max-scaling quantization for weights and asymmetric min/max
quantization for activations, both with round-half-to-even and grouped
scales:

    codes = clip(rint(x / s), -(2^(n-1)-1), 2^(n-1)-1),  s = max|x| / (2^(n-1)-1)

Groups either partition the rows (scale per group-of-rows x column, the
weight layout) or the columns (scale per row x group-of-columns, the
activation layout). ``group_size="per-row"`` gives one scale per row.
All-zero groups get scale 1 so reconstruction stays exact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._validation import ValidationError, as_matrix

ROW_GROUPS = "row"
COL_GROUPS = "col"
PER_ROW = "per-row"


@dataclass(frozen=True)
class IntQuantConfig:
    bits: int = 4
    symmetric: bool = True
    group_size: int | str = PER_ROW
    axis: str = ROW_GROUPS  # which dimension the groups partition

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValidationError(f"bits must be in [2, 8], got {self.bits}")
        if self.axis not in (ROW_GROUPS, COL_GROUPS):
            raise ValidationError(f"unknown axis {self.axis!r}")
        if self.group_size != PER_ROW and (
            not isinstance(self.group_size, int) or self.group_size < 1
        ):
            raise ValidationError(f"invalid group_size {self.group_size!r}")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def levels(self) -> int:
        return 2**self.bits - 1


# Activation default: per-token (per-row) asymmetric.
def per_token_config(bits: int = 8) -> IntQuantConfig:
    return IntQuantConfig(bits=bits, symmetric=False, group_size=PER_ROW)


@dataclass
class QuantizedTensor:
    """Integer codes plus grouped scales (and zero points when asymmetric).

    ``scales`` has shape (n_groups, cols) for row-grouped tensors and
    (rows, n_groups) for column-grouped tensors; ``zero_points`` matches
    ``scales`` and is absent for symmetric quantization.
    """

    codes: np.ndarray  # int32, shape (rows, cols)
    scales: np.ndarray
    zero_points: np.ndarray | None
    config: IntQuantConfig
    shape: tuple[int, int]

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]


def _resolve_groups(cfg: IntQuantConfig, shape: tuple[int, int]) -> tuple[str, int]:
    """Return (axis, group_size) with 'per-row' resolved to one group per row."""
    rows, cols = shape
    if cfg.group_size == PER_ROW:
        return COL_GROUPS, cols
    gs = int(cfg.group_size)
    grouped = rows if cfg.axis == ROW_GROUPS else cols
    if grouped % gs != 0:
        raise ValidationError(
            f"group_size {gs} does not divide grouped dimension {grouped}"
        )
    return cfg.axis, gs


def _group_reduce(x: np.ndarray, axis: str, gs: int, fn) -> np.ndarray:
    rows, cols = x.shape
    if axis == ROW_GROUPS:
        return fn(x.reshape(rows // gs, gs, cols), axis=1)
    return fn(x.reshape(rows, cols // gs, gs), axis=2)


def _expand_groupwise(v: np.ndarray, axis: str, gs: int) -> np.ndarray:
    return np.repeat(v, gs, axis=0 if axis == ROW_GROUPS else 1)


def quantize_symmetric(x, cfg: IntQuantConfig) -> QuantizedTensor:
    """Max-scaling symmetric quantization; scale per group, no zero point."""
    if not cfg.symmetric:
        raise ValidationError("config is not symmetric")
    x = as_matrix(x, "x")
    axis, gs = _resolve_groups(cfg, x.shape)
    scales = _group_reduce(np.abs(x), axis, gs, np.max) / cfg.qmax
    scales = np.where(scales == 0.0, 1.0, scales)
    codes = np.rint(x / _expand_groupwise(scales, axis, gs))
    np.clip(codes, -cfg.qmax, cfg.qmax, out=codes)
    return QuantizedTensor(codes.astype(np.int32), scales, None, cfg, x.shape)


def quantize_asymmetric(x, cfg: IntQuantConfig) -> QuantizedTensor:
    """Min/max asymmetric quantization with rounded integer zero points."""
    if cfg.symmetric:
        raise ValidationError("config is not asymmetric")
    x = as_matrix(x, "x")
    axis, gs = _resolve_groups(cfg, x.shape)
    lo = _group_reduce(x, axis, gs, np.min)
    hi = _group_reduce(x, axis, gs, np.max)
    scales = (hi - lo) / cfg.levels
    scales = np.where(scales == 0.0, 1.0, scales)
    zps = np.rint(-lo / scales).astype(np.int64)
    codes = np.rint(x / _expand_groupwise(scales, axis, gs))
    codes += _expand_groupwise(zps, axis, gs)
    np.clip(codes, 0, cfg.levels, out=codes)
    return QuantizedTensor(
        codes.astype(np.int32), scales, zps.astype(np.int32), cfg, x.shape
    )


def quantize(x, cfg: IntQuantConfig) -> QuantizedTensor:
    return quantize_symmetric(x, cfg) if cfg.symmetric else quantize_asymmetric(x, cfg)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    axis, gs = _resolve_groups(q.config, q.shape)
    scales = _expand_groupwise(q.scales, axis, gs)
    if q.zero_points is None:
        return scales * q.codes
    zps = _expand_groupwise(q.zero_points, axis, gs)
    return scales * (q.codes.astype(np.float64) - zps)


def fake_quant(x, cfg: IntQuantConfig) -> np.ndarray:
    """Quantize-dequantize round trip (the Q(.) operator)."""
    return dequantize(quantize(x, cfg))


def gather_columns(q: QuantizedTensor, idx) -> QuantizedTensor:
    """Restrict a column-grouped tensor with one group per row to columns ``idx``.

    The slice reuses the parent's per-row scales and zero points, so no
    re-quantization happens.
    """
    axis, gs = _resolve_groups(q.config, q.shape)
    if axis != COL_GROUPS or gs != q.cols:
        raise ValidationError("gather_columns requires one scale group per row")
    idx = np.asarray(idx, dtype=np.intp)
    sliced_cfg = replace(q.config, group_size=PER_ROW)
    return QuantizedTensor(
        np.ascontiguousarray(q.codes[:, idx]),
        q.scales,
        q.zero_points,
        sliced_cfg,
        (q.rows, idx.size),
    )


def effective_bits(
    layer_shapes: list[tuple[int, int]],
    cfg: IntQuantConfig,
    rank: int = 0,
    scale_bits: int = 16,
    include_smoothing: bool = False,
) -> float:
    """Average stored bits per weight parameter.

    Counts the integer codes, the grouped scales, the rank x cols compensator
    codes with their per-row grouped scales, and optionally one smoothing
    scale per column.
    """
    total_bits = 0
    total_params = 0
    for rows, cols in layer_shapes:
        if rank > min(rows, cols):
            raise ValidationError(f"rank {rank} exceeds layer dims ({rows}, {cols})")
        axis, gs = _resolve_groups(cfg, (rows, cols))
        n_scales = (rows // gs) * cols if axis == ROW_GROUPS else rows * (cols // gs)
        bits = rows * cols * cfg.bits + n_scales * scale_bits
        if rank:
            gs_r = min(cols, gs)
            bits += rank * cols * cfg.bits
            bits += rank * (cols // gs_r) * scale_bits
        if include_smoothing:
            bits += cols * scale_bits
        total_bits += bits
        total_params += rows * cols
    return total_bits / total_params
