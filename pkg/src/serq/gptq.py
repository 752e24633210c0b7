"""Calibration-Hessian construction and column-sequential weight rounding.

Weights are processed one input dimension at a time in natural order. After
quantizing dimension i, the rounding error propagates into the remaining
dimensions through the inverse Hessian:

    w_j <- w_j - e_i * Hinv[j, i] / Hinv[i, i]   for j > i

where H accumulates X^T X over calibration rows and is damped by a fraction
of its mean diagonal before inversion. After each step the inverse is
downdated by Gaussian elimination of the processed dimension, which is the
direct sequential formulation (no Cholesky shortcuts), kept deliberately
simple so oracle comparisons stay clean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError, as_matrix
from .quantcore import (
    COL_GROUPS,
    PER_ROW,
    ROW_GROUPS,
    IntQuantConfig,
    QuantizedTensor,
    dequantize,
)


@dataclass(frozen=True)
class HessianState:
    """Accumulated X^T X proxy Hessian over calibration samples."""

    H: np.ndarray
    samples_seen: int = 0
    damping: float | None = None  # explicit lambda; None = derive from config

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @classmethod
    def zeros(cls, dim: int) -> "HessianState":
        return cls(H=np.zeros((dim, dim)), samples_seen=0)

    @classmethod
    def identity(cls, dim: int) -> "HessianState":
        return cls(H=np.eye(dim), samples_seen=1)


@dataclass(frozen=True)
class GptqConfig:
    bits: int = 4
    group_size: int | str = PER_ROW
    damping_fraction: float = 0.01
    order: str = "natural"

    def __post_init__(self):
        if self.damping_fraction <= 0:
            raise ValidationError("damping_fraction must be > 0")
        if self.order != "natural":
            raise ValidationError("only natural processing order is supported")


def accumulate_hessian(state: HessianState, x) -> HessianState:
    """Add X^T X of a calibration batch; rows of ``x`` are samples."""
    x = as_matrix(x, "x")
    if x.shape[1] != state.dim:
        raise ValidationError(
            f"sample width {x.shape[1]} != Hessian dim {state.dim}"
        )
    return HessianState(
        H=state.H + x.T @ x,
        samples_seen=state.samples_seen + x.shape[0],
        damping=state.damping,
    )


def _damped_inverse(state: HessianState, cfg: GptqConfig) -> tuple[np.ndarray, float]:
    lam = state.damping
    if lam is None:
        lam = cfg.damping_fraction * float(np.mean(np.diag(state.H)))
        if lam <= 0:
            lam = cfg.damping_fraction
    hd = state.H + lam * np.eye(state.dim)
    if not np.allclose(hd, hd.T, atol=1e-12):
        raise ValidationError("Hessian is not symmetric")
    try:
        np.linalg.cholesky(hd)
    except np.linalg.LinAlgError as exc:
        raise ValidationError("damped Hessian is not positive-definite") from exc
    return np.linalg.inv(hd), lam


def gptq_quantize(w, state: HessianState, cfg: GptqConfig) -> QuantizedTensor:
    """Sequentially quantize all rows of ``w`` with error compensation.

    Group scales are frozen from the (already updated) weight slice when the
    group's first row is reached. ``group_size="per-row"`` gives one scale
    per row, an integer group size a (row-group x column) scale grid.
    """
    w = as_matrix(w, "w").copy()
    d, cols = w.shape
    if state.dim != d:
        raise ValidationError(f"Hessian dim {state.dim} != weight rows {d}")
    qmax = 2 ** (cfg.bits - 1) - 1
    per_row = cfg.group_size == PER_ROW
    gs = 1 if per_row else int(cfg.group_size)
    if not per_row and d % gs != 0:
        raise ValidationError(f"group_size {gs} does not divide {d} rows")

    hinv, _ = _damped_inverse(state, cfg)
    codes = np.zeros((d, cols), dtype=np.int32)
    if per_row:
        scales = np.ones((d, 1))
    else:
        scales = np.ones((d // gs, cols))

    for i in range(d):
        if per_row:
            s = np.abs(w[i]).max() / qmax
            s = 1.0 if s == 0.0 else s
            scales[i, 0] = s
            s_row = s
        else:
            if i % gs == 0:
                g = i // gs
                smax = np.abs(w[i : i + gs, :]).max(axis=0) / qmax
                scales[g, :] = np.where(smax == 0.0, 1.0, smax)
            s_row = scales[i // gs, :]
        q = np.clip(np.rint(w[i] / s_row), -qmax, qmax)
        codes[i] = q
        err = w[i] - s_row * q
        if i + 1 < d:
            w[i + 1 :, :] -= np.outer(hinv[i + 1 :, i] / hinv[i, i], err)
            hinv = hinv - np.outer(hinv[:, i], hinv[i, :]) / hinv[i, i]

    out_cfg = IntQuantConfig(
        bits=cfg.bits,
        symmetric=True,
        group_size=PER_ROW if per_row else gs,
        axis=COL_GROUPS if per_row else ROW_GROUPS,
    )
    return QuantizedTensor(codes, scales, None, out_cfg, (d, cols))


def proxy_loss(w, wq: QuantizedTensor, state: HessianState) -> float:
    """trace(dW^T H dW): the calibration-weighted squared output error."""
    w = as_matrix(w, "w")
    if w.shape != wq.shape:
        raise ValidationError("weight and quantized shapes disagree")
    if state.dim != w.shape[0]:
        raise ValidationError("Hessian dim does not match weight rows")
    dw = w - dequantize(wq)
    return float(np.sum(dw * (state.H @ dw)))
