"""Single-low-rank error compensators and the decomposed quantized forward.

Three compensator modes:

* ``rtn_residual``: the main weight is quantized as-is and the compensator
  stores the quantized residual of the r salient rows,
  R = Ws - Q(Ws). The forward path adds X_s,q @ Q(R) with one auxiliary
  matrix product over the salient activation slice.
* ``gptq_swapped``: R = Q(Ws) holds the salient rows themselves; the main
  matrix gets its salient rows replaced by the residual Ws - dequant(R)
  before Hessian-guided quantization, which migrates the high-variance
  content out of the main weights.
* ``svd_baseline``: classic truncated-SVD error reconstruction with two
  factors L1 = U_r sqrt(S_r), L2 = sqrt(S_r) V_r^T and a sequential
  two-product forward path.

The salient activation slice reuses the per-token scales of the full
quantized activation, so no second online quantization pass is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import ValidationError, as_matrix
from .gptq import GptqConfig, HessianState, gptq_quantize
from .mxfmt import MxBlockTensor, int_gemm_reference, mx_decode, mx_encode, mx_gemm_reference
from .quantcore import (
    COL_GROUPS,
    IntQuantConfig,
    QuantizedTensor,
    dequantize,
    fake_quant,
    gather_columns,
    quantize_asymmetric,
    quantize_symmetric,
)
from .saliency import SaliencyPlan
from .tensorio import CalibStats

RTN_RESIDUAL = "rtn_residual"
GPTQ_SWAPPED = "gptq_swapped"
SVD_BASELINE = "svd_baseline"


@dataclass
class Compensator:
    mode: str
    rank: int
    salient_idx: np.ndarray | None = None
    r_q: QuantizedTensor | MxBlockTensor | None = None  # quantized R (r x cols)
    r_dense: np.ndarray | None = None  # unquantized R, test mode
    l1: np.ndarray | None = None  # SVD factors
    l2: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in (RTN_RESIDUAL, GPTQ_SWAPPED, SVD_BASELINE):
            raise ValidationError(f"unknown compensator mode {self.mode!r}")
        if self.rank and self.mode == SVD_BASELINE:
            if self.l1 is None or self.l2 is None:
                raise ValidationError("SVD mode carries two factors")
            if self.r_q is not None or self.r_dense is not None:
                raise ValidationError("SVD mode must not carry a residual matrix")
        if self.rank and self.mode in (RTN_RESIDUAL, GPTQ_SWAPPED):
            have = (self.r_q is not None) + (self.r_dense is not None)
            if have != 1:
                raise ValidationError("single-matrix modes carry exactly one R")


@dataclass
class OpProbe:
    """Counts auxiliary (compensator-path) matrix products in a forward."""

    aux_matmuls: int = 0
    notes: list = field(default_factory=list)


def default_r_config(cols: int, bits: int = 4, main_group: int | str = 128) -> IntQuantConfig:
    """Per-row grouped config for R: groups never span rows, so each salient
    row's correction is independent of the others (rank monotonicity)."""
    gs = cols if main_group == "per-row" else min(cols, int(main_group))
    if cols % gs != 0:
        gs = cols
    return IntQuantConfig(bits=bits, symmetric=True, group_size=gs, axis="col")


def build_serq_rtn(
    w_folded,
    plan: SaliencyPlan,
    wcfg: IntQuantConfig,
    rcfg: IntQuantConfig | None,
) -> tuple[QuantizedTensor, Compensator]:
    """Quantize all rows as the main path and compensate the salient rows.

    ``rcfg=None`` keeps R unquantized (exactness test mode).
    """
    w = as_matrix(w_folded, "w_folded")
    if plan.scores.shape[0] != w.shape[0]:
        raise ValidationError("plan was not built for this weight")
    main = quantize_symmetric(w, wcfg)
    r = plan.rank
    if r == 0:
        return main, Compensator(mode=RTN_RESIDUAL, rank=0, salient_idx=np.empty(0, np.intp))
    ws = w[plan.salient_idx, :]
    resid = ws - fake_quant(ws, wcfg)
    if rcfg is None:
        comp = Compensator(RTN_RESIDUAL, r, plan.salient_idx.copy(), r_dense=resid)
    else:
        comp = Compensator(
            RTN_RESIDUAL, r, plan.salient_idx.copy(), r_q=quantize_symmetric(resid, rcfg)
        )
    return main, comp


def build_serq_gptq_swapped(
    w_folded,
    plan: SaliencyPlan,
    wcfg: GptqConfig,
    rcfg: IntQuantConfig | None,
    hessian: HessianState,
) -> tuple[QuantizedTensor, Compensator]:
    """Swap salient rows for their residual before GPTQ on the whole matrix."""
    w = as_matrix(w_folded, "w_folded")
    if plan.scores.shape[0] != w.shape[0]:
        raise ValidationError("plan was not built for this weight")
    r = plan.rank
    if r == 0:
        main = gptq_quantize(w, hessian, wcfg)
        return main, Compensator(mode=GPTQ_SWAPPED, rank=0, salient_idx=np.empty(0, np.intp))
    ws = w[plan.salient_idx, :]
    if rcfg is None:
        r_payload = {"r_dense": ws.copy()}
        ws_hat = ws
    else:
        r_q = quantize_symmetric(ws, rcfg)
        r_payload = {"r_q": r_q}
        ws_hat = dequantize(r_q)
    swapped = w.copy()
    swapped[plan.salient_idx, :] = ws - ws_hat
    main = gptq_quantize(swapped, hessian, wcfg)
    comp = Compensator(GPTQ_SWAPPED, r, plan.salient_idx.copy(), **r_payload)
    return main, comp


def jacobi_svd(a, tol: float = 1e-12, max_sweeps: int | None = None):
    """One-sided Jacobi SVD with deterministic ordering and signs.

    Returns (U, s, Vt) with singular values descending and each left vector's
    first nonzero component positive. Single-threaded and platform-stable.
    """
    a = as_matrix(a, "a", allow_empty=True)
    transposed = a.shape[0] < a.shape[1]
    b = a.T.copy() if transposed else a.copy()
    m, n = b.shape
    v = np.eye(n)
    if max_sweeps is None:
        max_sweeps = 10 * max(n, 1)
    norms = np.sum(b * b, axis=0)  # column squared norms, updated in place
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                app, aqq = norms[p], norms[q]
                if app <= 0.0 or aqq <= 0.0:
                    continue  # numerically zero column, orthogonal already
                apq = b[:, p] @ b[:, q]
                if abs(apq) <= tol * np.sqrt(app * aqq):
                    continue
                rotated = True
                zeta = (aqq - app) / (2.0 * apq)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s_ = c * t
                bp = b[:, p].copy()
                b[:, p] = c * bp - s_ * b[:, q]
                b[:, q] = s_ * bp + c * b[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - s_ * v[:, q]
                v[:, q] = s_ * vp + c * v[:, q]
                # rotation annihilates apq; norms shift along the diagonal
                norms[p] = max(app - t * apq, 0.0)
                norms[q] = max(aqq + t * apq, 0.0)
        if not rotated:
            break
    sigma = np.sqrt(np.sum(b * b, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    b = b[:, order]
    v = v[:, order]
    u = np.zeros_like(b)
    nz = sigma > 0
    u[:, nz] = b[:, nz] / sigma[nz]
    # sign convention: first nonzero component of each left vector positive
    for j in range(n):
        col = u[:, j]
        idx = np.flatnonzero(col)
        if idx.size and col[idx[0]] < 0:
            u[:, j] = -col
            v[:, j] = -v[:, j]
    if transposed:
        return v, sigma, u.T
    return u, sigma, v.T


def build_svd_baseline(
    w, wcfg: IntQuantConfig, r: int
) -> tuple[QuantizedTensor, Compensator]:
    """Truncated-SVD reconstruction of the full quantization error."""
    w = as_matrix(w, "w")
    if r > min(w.shape):
        raise ValidationError(f"rank {r} exceeds min dim of {w.shape}")
    main = quantize_symmetric(w, wcfg)
    if r == 0:
        return main, Compensator(mode=SVD_BASELINE, rank=0)
    err = w - dequantize(main)
    u, s, vt = jacobi_svd(err)
    root = np.sqrt(s[:r])
    l1 = u[:, :r] * root[None, :]
    l2 = root[:, None] * vt[:r, :]
    return main, Compensator(SVD_BASELINE, r, l1=l1, l2=l2)


def scatter_compensator(comp: Compensator, rows: int, cols: int) -> np.ndarray:
    """Dense (rows x cols) matrix the compensator adds to the main weight."""
    full = np.zeros((rows, cols))
    if comp.rank == 0:
        return full
    if comp.mode == SVD_BASELINE:
        return comp.l1 @ comp.l2
    if comp.r_dense is not None:
        r_hat = comp.r_dense
    elif isinstance(comp.r_q, MxBlockTensor):
        r_hat = mx_decode(comp.r_q).T
    else:
        r_hat = dequantize(comp.r_q)
    full[comp.salient_idx, :] = r_hat
    return full


def truncate_compensator(comp: Compensator, r: int) -> Compensator:
    """Restrict a single-matrix compensator to its first ``r`` salient rows.

    Valid because R is quantized with per-row groups: each row's codes and
    scales are independent of the rest.
    """
    if comp.mode == SVD_BASELINE:
        raise ValidationError("cannot truncate a two-factor compensator")
    if r > comp.rank:
        raise ValidationError("cannot grow a compensator")
    if r == comp.rank:
        return comp
    idx = comp.salient_idx[:r]
    if r == 0:
        return Compensator(comp.mode, 0, np.empty(0, np.intp))
    if comp.r_dense is not None:
        return Compensator(comp.mode, r, idx, r_dense=comp.r_dense[:r, :])
    q = comp.r_q
    if isinstance(q, MxBlockTensor):
        raise ValidationError("cannot truncate an MX compensator row-wise")
    if q.config.axis != COL_GROUPS and q.config.group_size != "per-row":
        raise ValidationError("truncation needs per-row grouped R scales")
    sliced = QuantizedTensor(
        q.codes[:r, :].copy(), q.scales[:r, :].copy(), None, q.config, (r, q.cols)
    )
    return Compensator(comp.mode, r, idx, r_q=sliced)


def forward_reconstructed(
    x,
    main: QuantizedTensor | MxBlockTensor,
    comp: Compensator | None,
    act_cfg: IntQuantConfig | None,
    probe: OpProbe | None = None,
) -> np.ndarray:
    """Fully quantized decomposed forward: main GEMM plus compensator path.

    For integer mains, ``act_cfg`` must be asymmetric per-token; the salient
    slice of the quantized activation shares the token scales. For MX mains
    (stored as the transposed encoding), activations are MX-encoded with the
    main's block size and the salient slice is re-encoded from the gathered
    full-precision columns.
    """
    x = as_matrix(x, "x")
    if isinstance(main, np.ndarray):
        # quantization-disabled mode: exact product plus the dense compensator
        y = x @ main
        if comp is not None and comp.rank:
            y = y + x @ scatter_compensator(comp, main.shape[0], main.shape[1])
        return y
    if isinstance(main, MxBlockTensor):
        return _forward_mx(x, main, comp, probe)
    if x.shape[1] != main.rows:
        raise ValidationError("x columns must equal main rows")
    if act_cfg is None or act_cfg.symmetric:
        raise ValidationError("act_cfg must be asymmetric (per-token)")
    xq = quantize_asymmetric(x, act_cfg)
    y = int_gemm_reference(xq, main)
    if comp is None or comp.rank == 0:
        return y
    if comp.mode == SVD_BASELINE:
        x_hat = dequantize(xq)
        t = x_hat @ comp.l1
        if probe is not None:
            probe.aux_matmuls += 2
            probe.notes.append("sequential two-factor path")
        return y + t @ comp.l2
    xs = gather_columns(xq, comp.salient_idx)
    if probe is not None:
        probe.aux_matmuls += 1
    if comp.r_dense is not None:
        return y + dequantize(xs) @ comp.r_dense
    return y + int_gemm_reference(xs, comp.r_q)


def _forward_mx(x, main_t: MxBlockTensor, comp, probe):
    if x.shape[1] != main_t.cols:
        raise ValidationError("x columns must equal weight input dim")
    bs = main_t.block_size
    x_mx = mx_encode(x, bs)
    y = mx_gemm_reference(x_mx, main_t)
    if comp is None or comp.rank == 0:
        return y
    if comp.mode == SVD_BASELINE:
        x_hat = mx_decode(x_mx)
        t = x_hat @ comp.l1
        if probe is not None:
            probe.aux_matmuls += 2
        return y + t @ comp.l2
    if comp.rank % bs != 0:
        raise ValidationError("MX residual path needs rank divisible by block size")
    xs = mx_encode(np.ascontiguousarray(x[:, comp.salient_idx]), bs)
    if probe is not None:
        probe.aux_matmuls += 1
    if comp.r_dense is not None:
        return y + mx_decode(xs) @ comp.r_dense
    return y + mx_gemm_reference(xs, comp.r_q)


def build_serq_rtn_mx(
    w_folded, plan: SaliencyPlan, block_size: int = 32
) -> tuple[MxBlockTensor, Compensator]:
    """MXFP4 variant: main is the transposed encoding; R holds the exact
    salient-row residual of that encoding, itself MX-encoded (transposed)."""
    w = as_matrix(w_folded, "w_folded")
    main_t = mx_encode(w.T, block_size)
    r = plan.rank
    if r == 0:
        return main_t, Compensator(RTN_RESIDUAL, 0, np.empty(0, np.intp))
    if r % block_size != 0:
        raise ValidationError("MX mode needs rank divisible by block size")
    resid = (w - mx_decode(main_t).T)[plan.salient_idx, :]
    r_q = mx_encode(np.ascontiguousarray(resid.T), block_size)
    return main_t, Compensator(RTN_RESIDUAL, r, plan.salient_idx.copy(), r_q=r_q)


def restricted_svd_experiment(
    w, act: CalibStats, wcfg: IntQuantConfig, rank: int, row_counts
) -> list[tuple[int, float]]:
    """Error-vs-coverage curve for SVD restricted to the top-m salient rows.

    Rows rank by activation-channel scale (descending, ties to lower index).
    The reported error is the activation-weighted residual norm
    sqrt(sum_j max_abs_j^2 * ||row_j||^2), an output-error proxy computable
    from calibration statistics alone.
    """
    w = as_matrix(w, "w")
    row_counts = list(row_counts)
    if rank > min(row_counts):
        raise ValidationError("rank must not exceed the smallest row count")
    if act.channels != w.shape[0]:
        raise ValidationError("activation channels must match weight rows")
    err = w - fake_quant(w, wcfg)
    order = np.argsort(-act.max_abs, kind="stable")
    weights = act.max_abs**2
    curve = []
    for m in row_counts:
        top = order[:m]
        u, s, vt = jacobi_svd(err[top, :])
        k = min(rank, s.shape[0])
        recon = (u[:, :k] * s[:k][None, :]) @ vt[:k, :]
        resid = err.copy()
        resid[top, :] -= recon
        proxy = float(np.sqrt(np.sum(weights * np.sum(resid * resid, axis=1))))
        curve.append((m, proxy))
    return curve
