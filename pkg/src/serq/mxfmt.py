"""Bit-exact MXFP4 block format and reference simulated GEMMs.

MXFP4 stores blocks of 32 four-bit E2M1 elements that share one signed 8-bit
power-of-two scale. The E2M1 element code is (sign << 3) | magnitude_index
with magnitude values {0, 0.5, 1, 1.5, 2, 3, 4, 6}; there are no NaN/Inf
codes and negative zero decodes to 0. The block exponent follows the
max-value rule e = floor(log2(max|x|)) - 2, since the largest element
magnitude 6 = 1.5 * 2^2.

The integer GEMM here is the exactness reference for the quantized forward
path: per aligned scale group it accumulates code products in 64-bit
integers, applies the group scales (and zero-point corrections), and sums
groups in ascending order, so the result equals exact rational arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError, as_matrix
from .quantcore import COL_GROUPS, ROW_GROUPS, QuantizedTensor, _resolve_groups, dequantize

E2M1_MAGNITUDES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
# Magnitude indices reordered so even mantissa codes win argmin ties.
_EVEN_FIRST = np.array([0, 2, 4, 6, 1, 3, 5, 7])
E2M1_VALUES_16 = np.concatenate([E2M1_MAGNITUDES, -E2M1_MAGNITUDES])
_HALF_GAPS = np.array([0.25, 0.25, 0.25, 0.25, 0.5, 0.5, 1.0, 1.0])

MAGIC_MX = b"SERQMXB0" + b"\x00" * 8


@dataclass
class MxBlockTensor:
    """Unpacked in-memory MX tensor; nibbles are packed only on disk."""

    element_codes: np.ndarray  # uint8, shape (rows, cols), values 0..15
    block_scale_exponents: np.ndarray  # int32, shape (rows, cols // block_size)
    block_size: int
    shape: tuple[int, int]

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]


def e2m1_nearest(v):
    """Nearest E2M1 code/value pair for each element of ``v``.

    Ties go to the value with even mantissa code; magnitudes beyond 6 clamp
    to 6. Values rounding to zero always return the +0 code. Returns
    (codes uint8, values float64) with the input's shape (scalars stay
    scalar).
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.size and not np.isfinite(arr).all():
        raise ValidationError("e2m1_nearest requires finite input")
    a = np.abs(arr)
    dist = np.abs(a[..., None] - E2M1_MAGNITUDES[_EVEN_FIRST])
    mag_idx = _EVEN_FIRST[np.argmin(dist, axis=-1)]
    values = E2M1_MAGNITUDES[mag_idx]
    neg = (arr < 0) & (mag_idx > 0)
    codes = np.where(neg, mag_idx + 8, mag_idx).astype(np.uint8)
    values = np.where(neg, -values, values)
    if arr.ndim == 0:
        return codes[()], float(values[()])
    return codes, values


def e2m1_decode(codes) -> np.ndarray:
    codes = np.asarray(codes)
    mag = E2M1_MAGNITUDES[codes & 0x7]
    sign = np.where((codes & 0x8) != 0, -1.0, 1.0)
    return sign * mag


def e2m1_half_gap(values) -> np.ndarray:
    """Half the local grid gap at each (absolute) value, for error bounds."""
    idx = np.searchsorted(E2M1_MAGNITUDES, np.abs(values), side="right") - 1
    return _HALF_GAPS[np.clip(idx, 0, 7)]


def _block_exponents(x: np.ndarray, block_size: int) -> np.ndarray:
    rows, cols = x.shape
    amax = np.abs(x).reshape(rows, cols // block_size, block_size).max(axis=2)
    mant, exp = np.frexp(amax)  # amax = mant * 2^exp, mant in [0.5, 1)
    e = exp - 1 - 2  # floor(log2(amax)) - 2
    e = np.where(amax == 0.0, 0, e)
    return np.clip(e, -127, 127).astype(np.int32)


def mx_encode(x, block_size: int = 32) -> MxBlockTensor:
    """Encode a matrix into MX blocks laid out along each row."""
    x = as_matrix(x, "x")
    rows, cols = x.shape
    if cols % block_size != 0:
        raise ValidationError(
            f"row length {cols} not divisible by block_size {block_size}"
        )
    exps = _block_exponents(x, block_size)
    scale = np.ldexp(1.0, np.repeat(exps, block_size, axis=1))
    codes, _ = e2m1_nearest(x / scale)
    return MxBlockTensor(codes, exps, block_size, (rows, cols))


def mx_decode(t: MxBlockTensor) -> np.ndarray:
    scale = np.ldexp(1.0, np.repeat(t.block_scale_exponents, t.block_size, axis=1))
    return e2m1_decode(t.element_codes) * scale


def _scale_layout(q: QuantizedTensor):
    """(axis, group_size, expanded zero point or None) for GEMM use."""
    axis, gs = _resolve_groups(q.config, q.shape)
    return axis, gs


def _int_matmul_exact(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Integer matmul with int64 semantics.

    Partial sums up to 2^53 stay exact in float64, so small problems route
    through BLAS; anything larger falls back to true int64 accumulation.
    """
    k = a.shape[1]
    bound = k * float(np.abs(a).max(initial=0)) * float(np.abs(b).max(initial=0))
    if bound < 2**53:
        return np.rint(a.astype(np.float64) @ b.astype(np.float64)).astype(np.int64)
    return a.astype(np.int64) @ b.astype(np.int64)


def int_gemm_reference(
    xq: QuantizedTensor, wq: QuantizedTensor, return_partials: bool = False
):
    """Exact simulated integer GEMM between quantized operands.

    ``xq`` must be column-grouped (scale per row x column-group). For a
    row-grouped ``wq`` (scale per row-group x column), one operand's group
    boundaries along the inner dimension must refine the other's; per
    refined group the zero-corrected code products accumulate with int64
    semantics, and group results combine in ascending order, matching exact
    rational arithmetic. A column-grouped ``wq`` (scale per row, e.g. the
    per-row compensator layout) degenerates to singleton inner groups; the
    reference then multiplies the exact zero-corrected codes by the exactly
    dequantized weight in one pass.
    """
    if xq.cols != wq.rows:
        raise ValidationError(
            f"inner dimensions disagree: {xq.shape} x {wq.shape}"
        )
    x_axis, x_gs = _scale_layout(xq)
    if x_axis != COL_GROUPS:
        raise ValidationError("xq must use column groups (per-token scales)")
    w_axis, w_gs = _scale_layout(wq)
    k = xq.cols

    xc = xq.codes.astype(np.int64)
    if xq.zero_points is not None:
        zp = np.repeat(xq.zero_points.astype(np.int64), x_gs, axis=1)
        xc = xc - zp

    if w_axis == COL_GROUPS:
        # Scale varies along the inner dim: one exact scaled-code product.
        w_hat = dequantize(wq)
        if x_gs == k:
            out = xq.scales[:, [0]] * (xc.astype(np.float64) @ w_hat)
        else:
            sx_cols = np.repeat(xq.scales, x_gs, axis=1)
            out = (xc.astype(np.float64) * sx_cols) @ w_hat
        if return_partials:
            return out, []
        return out

    x_bounds = set(range(0, k + 1, x_gs))
    w_bounds = set(range(0, k + 1, w_gs))
    if not (x_bounds <= w_bounds or w_bounds <= x_bounds):
        raise ValidationError("scale group boundaries are misaligned")
    bounds = sorted(x_bounds | w_bounds)

    wc = wq.codes
    out = np.zeros((xq.rows, wq.cols))
    partials = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        acc = _int_matmul_exact(xc[:, a:b], wc[a:b, :])
        sx = xq.scales[:, [a // x_gs]]
        sw = wq.scales[[a // w_gs], :]
        out += sx * acc * sw
        if return_partials:
            partials.append(((a, b), acc))
    if return_partials:
        return out, partials
    return out


def mx_gemm_reference(x: MxBlockTensor, wt: MxBlockTensor) -> np.ndarray:
    """Simulated MX GEMM; computes X @ W with W supplied transposed.

    Both operands are blocked along the reduction dimension, so ``wt`` is
    the MX encoding of the weight's transpose. Per aligned block pair the
    decoded-value dot product accumulates in float64 and the block scales
    combine as 2^(ex + ew); blocks sum in ascending order.
    """
    if x.block_size != wt.block_size:
        raise ValidationError("block sizes disagree")
    if x.cols != wt.cols:
        raise ValidationError(
            f"inner dimensions disagree: {x.shape} x {wt.shape} (transposed)"
        )
    bs = x.block_size
    n_blocks = x.cols // bs
    xv = e2m1_decode(x.element_codes)
    wv = e2m1_decode(wt.element_codes)
    out = np.zeros((x.rows, wt.rows))
    for b in range(n_blocks):
        sl = slice(b * bs, (b + 1) * bs)
        acc = xv[:, sl] @ wv[:, sl].T
        scale = np.ldexp(
            1.0,
            x.block_scale_exponents[:, [b]] + wt.block_scale_exponents[:, [b]].T,
        )
        out += acc * scale
    return out


def save_mx(path, t: MxBlockTensor) -> None:
    """Write the packed MX layout: per block one biased-exponent byte then
    block_size/2 bytes of packed nibbles (low nibble = even index)."""
    import os
    import struct

    if t.block_size % 2 != 0:
        raise ValidationError("block_size must be even for nibble packing")
    rows, cols = t.shape
    n_blocks = cols // t.block_size
    buf = bytearray()
    buf += MAGIC_MX
    buf += struct.pack("<III", rows, cols, t.block_size)
    for r in range(rows):
        for b in range(n_blocks):
            e = int(t.block_scale_exponents[r, b])
            buf.append(e + 127)
            blk = t.element_codes[r, b * t.block_size : (b + 1) * t.block_size]
            packed = (blk[0::2] & 0xF) | ((blk[1::2] & 0xF) << 4)
            buf += packed.astype(np.uint8).tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf)
    os.replace(tmp, path)


def load_mx(path) -> MxBlockTensor:
    import struct

    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC_MX)] != MAGIC_MX:
        raise ValidationError(f"{path}: bad magic, not an MX file")
    off = len(MAGIC_MX)
    rows, cols, bs = struct.unpack_from("<III", raw, off)
    off += 12
    n_blocks = cols // bs
    codes = np.zeros((rows, cols), dtype=np.uint8)
    exps = np.zeros((rows, n_blocks), dtype=np.int32)
    per_block = 1 + bs // 2
    expected = off + rows * n_blocks * per_block
    if len(raw) != expected:
        raise ValidationError(f"{path}: payload length mismatch")
    for r in range(rows):
        for b in range(n_blocks):
            exps[r, b] = raw[off] - 127
            packed = np.frombuffer(raw, dtype=np.uint8, count=bs // 2, offset=off + 1)
            blk = np.empty(bs, dtype=np.uint8)
            blk[0::2] = packed & 0xF
            blk[1::2] = packed >> 4
            codes[r, b * bs : (b + 1) * bs] = blk
            off += per_block
    return MxBlockTensor(codes, exps, bs, (rows, cols))
