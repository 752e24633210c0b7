"""Single-layer quantization pipeline: calibrate, flatten, compensate.

Composes the flattening, saliency, and compensator stages for one linear
layer Y = X @ W. With flattening on, the inverse channel scales are applied
to the activations explicitly here; in a multi-layer graph they would be
merged into the producing layer instead (see toymodel).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError, as_matrix
from .compensate import (
    Compensator,
    OpProbe,
    build_serq_gptq_swapped,
    build_serq_rtn,
    build_serq_rtn_mx,
    build_svd_baseline,
    default_r_config,
    forward_reconstructed,
)
from .flatten import FlatteningPlan, apply_inverse_to_activation, compute_smoothing_scales
from .gptq import GptqConfig, HessianState, accumulate_hessian
from .mxfmt import MxBlockTensor
from .quantcore import IntQuantConfig, QuantizedTensor, per_token_config
from .saliency import SaliencyPlan, build_plan, score_rows_from
from .tensorio import CalibStats, collect_calib_stats


@dataclass
class LayerArtifacts:
    main: QuantizedTensor | MxBlockTensor
    comp: Compensator | None
    act_cfg: IntQuantConfig | None
    plan: SaliencyPlan
    smoothing: FlatteningPlan | None
    fmt: str
    in_dim: int
    out_dim: int


def quantize_layer(
    w,
    calib_x,
    *,
    rank: int = 0,
    weight_bits: int = 4,
    act_bits: int = 8,
    weight_group: int | str = "per-row",
    alpha: float = 0.5,
    saf: bool = True,
    method: str = "rtn",  # rtn | gptq | svd
    fmt: str = "int",  # int | mxfp4
    block_size: int = 32,
    r_bits: int = 4,
    score_source: str | None = None,
    damping_fraction: float = 0.01,
) -> LayerArtifacts:
    """Build the quantized main path and compensator for one weight matrix.

    ``score_source`` defaults to the folded weight when flattening is on and
    to raw activation scales when it is off.
    """
    w = as_matrix(w, "w")
    calib_x = as_matrix(calib_x, "calib_x")
    if calib_x.shape[1] != w.shape[0]:
        raise ValidationError("calibration width must match weight rows")
    stats = collect_calib_stats(calib_x)

    smoothing = None
    w_folded = w
    x_folded = calib_x
    if saf:
        smoothing = compute_smoothing_scales(stats, w, alpha)
        w_folded = smoothing.s[:, None] * w
        x_folded = apply_inverse_to_activation(calib_x, smoothing)

    if score_source is None:
        score_source = "folded_weight" if saf else "activation"
    scores = score_rows_from(w_folded, stats.max_abs, score_source)
    r = min(rank, min(w.shape))
    if fmt == "mxfp4":
        r = (r // block_size) * block_size
    plan = build_plan(scores, r)

    if fmt == "mxfp4":
        main, comp = build_serq_rtn_mx(w_folded, plan, block_size)
        act_cfg = None
    else:
        act_cfg = per_token_config(act_bits)
        if method == "rtn":
            wcfg = _weight_config(weight_bits, weight_group, w.shape[0])
            rcfg = default_r_config(w.shape[1], r_bits, weight_group)
            main, comp = build_serq_rtn(w_folded, plan, wcfg, rcfg)
        elif method == "gptq":
            gcfg = GptqConfig(
                bits=weight_bits,
                group_size=_gptq_group(weight_group, w.shape[0]),
                damping_fraction=damping_fraction,
            )
            rcfg = default_r_config(w.shape[1], r_bits, weight_group)
            hess = accumulate_hessian(HessianState.zeros(w.shape[0]), x_folded)
            main, comp = build_serq_gptq_swapped(w_folded, plan, gcfg, rcfg, hess)
        elif method == "svd":
            wcfg = _weight_config(weight_bits, weight_group, w.shape[0])
            main, comp = build_svd_baseline(w_folded, wcfg, r)
        else:
            raise ValidationError(f"unknown method {method!r}")

    return LayerArtifacts(
        main=main,
        comp=comp,
        act_cfg=act_cfg,
        plan=plan,
        smoothing=smoothing,
        fmt=fmt,
        in_dim=w.shape[0],
        out_dim=w.shape[1],
    )


def layer_forward(art: LayerArtifacts, x, probe: OpProbe | None = None) -> np.ndarray:
    """Quantized layer evaluation, applying inverse smoothing scales first."""
    x = as_matrix(x, "x")
    if art.smoothing is not None:
        x = apply_inverse_to_activation(x, art.smoothing)
    return forward_reconstructed(x, art.main, art.comp, art.act_cfg, probe)


def _weight_config(bits: int, group: int | str, rows: int) -> IntQuantConfig:
    if group == "per-row" or (isinstance(group, int) and rows % group != 0):
        return IntQuantConfig(bits=bits, symmetric=True, group_size="per-row")
    return IntQuantConfig(bits=bits, symmetric=True, group_size=group, axis="row")


def _gptq_group(group: int | str, rows: int) -> int | str:
    if group == "per-row" or (isinstance(group, int) and rows % group != 0):
        return "per-row"
    return group
