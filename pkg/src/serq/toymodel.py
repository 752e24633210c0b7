"""Minimal decoder block: the end-to-end substrate for equivalence tests.

One pre-norm transformer block without masking or positional embeddings:

    x -> RMSNorm -> q/k/v -> per-head attention -> o_proj -> (+x)
      -> RMSNorm -> SiLU(gate) * up -> down_proj -> (+)

Weights use the (in_dim, out_dim) orientation so Y = X @ W throughout. The
quantized forward replaces every linear with the decomposed reconstructed
path while the nonlinear ops stay in full precision; smoothing scales and
their inverses are folded into adjacent producers (norm gains, v_proj and
up_proj columns) offline, so the quantized block consumes raw activations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import ValidationError, as_matrix
from .compensate import (
    Compensator,
    build_serq_gptq_swapped,
    build_serq_rtn,
    build_serq_rtn_mx,
    build_svd_baseline,
    default_r_config,
    forward_reconstructed,
    truncate_compensator,
)
from .flatten import FlatteningPlan, compute_smoothing_scales
from .gptq import GptqConfig, HessianState, accumulate_hessian
from .mxfmt import MxBlockTensor
from .quantcore import IntQuantConfig, QuantizedTensor, per_token_config
from .saliency import (
    ATTENTION_MIX,
    BINARY,
    INPUT,
    LINEAR,
    OUTPUT,
    RESIDUAL_ADD,
    RMSNORM,
    UNARY,
    LayerGraph,
    SaliencyPlan,
    build_plan,
    graph_forward,
    graph_hash,
    score_rows_from,
)
from .tensorio import CalibStats

LINEAR_NAMES = ("q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "gate_proj", "down_proj")
GAIN_NAMES = ("ln1", "ln2")


@dataclass
class ToyBlock:
    hidden_dim: int
    ffn_dim: int
    head_dim: int
    n_heads: int
    weights: dict[str, np.ndarray]  # linears plus rmsnorm gains

    def __post_init__(self):
        if self.hidden_dim != self.head_dim * self.n_heads:
            raise ValidationError("hidden_dim must equal head_dim * n_heads")
        shapes = {
            "q_proj": (self.hidden_dim, self.hidden_dim),
            "k_proj": (self.hidden_dim, self.hidden_dim),
            "v_proj": (self.hidden_dim, self.hidden_dim),
            "o_proj": (self.hidden_dim, self.hidden_dim),
            "up_proj": (self.hidden_dim, self.ffn_dim),
            "gate_proj": (self.hidden_dim, self.ffn_dim),
            "down_proj": (self.ffn_dim, self.hidden_dim),
            "ln1": (self.hidden_dim,),
            "ln2": (self.hidden_dim,),
        }
        for name, shape in shapes.items():
            if name not in self.weights or self.weights[name].shape != shape:
                raise ValidationError(f"weight {name} missing or misshaped")

    def graph(self) -> LayerGraph:
        return toy_block_graph(self.head_dim)


def toy_block_graph(head_dim: int) -> LayerGraph:
    g = LayerGraph()
    g.add("x", INPUT)
    g.add("ln1", RMSNORM)
    g.add("q_proj", LINEAR)
    g.add("k_proj", LINEAR)
    g.add("v_proj", LINEAR)
    g.add("attn", ATTENTION_MIX, (head_dim,))
    g.add("o_proj", LINEAR)
    g.add("res1", RESIDUAL_ADD)
    g.add("ln2", RMSNORM)
    g.add("up_proj", LINEAR)
    g.add("gate_proj", LINEAR)
    g.add("silu", UNARY, ("silu",))
    g.add("mul", BINARY, ("mul",))
    g.add("down_proj", LINEAR)
    g.add("res2", RESIDUAL_ADD)
    g.add("out", OUTPUT)
    g.connect("x", "ln1")
    for p in ("q_proj", "k_proj", "v_proj"):
        g.connect("ln1", p)
    g.connect("q_proj", "attn", "q")
    g.connect("k_proj", "attn", "k")
    g.connect("v_proj", "attn", "v")
    g.connect("attn", "o_proj")
    g.connect("x", "res1")
    g.connect("o_proj", "res1")
    g.connect("res1", "ln2")
    g.connect("res1", "res2")
    g.connect("ln2", "up_proj")
    g.connect("ln2", "gate_proj")
    g.connect("gate_proj", "silu")
    g.connect("silu", "mul", "lhs")
    g.connect("up_proj", "mul", "rhs")
    g.connect("mul", "down_proj")
    g.connect("down_proj", "res2")
    g.connect("res2", "out")
    return g


def random_block(
    hidden_dim: int,
    ffn_dim: int | None = None,
    head_dim: int = 16,
    seed: int = 0,
    weight_scale: float | None = None,
    weight_df: float | None = None,
) -> ToyBlock:
    """Seeded random block. ``weight_df`` draws Student-t entries (heavy
    tails); otherwise entries are Gaussian. Scale defaults to 1/sqrt(in)."""
    if ffn_dim is None:
        ffn_dim = 2 * hidden_dim
    if hidden_dim % head_dim != 0:
        raise ValidationError("hidden_dim must be divisible by head_dim")
    rng = np.random.default_rng(seed)

    def draw(shape):
        if weight_df is not None:
            w = rng.standard_t(weight_df, size=shape)
        else:
            w = rng.standard_normal(shape)
        s = weight_scale if weight_scale is not None else 1.0 / np.sqrt(shape[0])
        return w * s

    weights = {
        "q_proj": draw((hidden_dim, hidden_dim)),
        "k_proj": draw((hidden_dim, hidden_dim)),
        "v_proj": draw((hidden_dim, hidden_dim)),
        "o_proj": draw((hidden_dim, hidden_dim)),
        "up_proj": draw((hidden_dim, ffn_dim)),
        "gate_proj": draw((hidden_dim, ffn_dim)),
        "down_proj": draw((ffn_dim, hidden_dim)),
        "ln1": np.abs(rng.standard_normal(hidden_dim)) + 0.5,
        "ln2": np.abs(rng.standard_normal(hidden_dim)) + 0.5,
    }
    return ToyBlock(hidden_dim, ffn_dim, head_dim, hidden_dim // head_dim, weights)


def forward_fp(block: ToyBlock, x) -> np.ndarray:
    """Full-precision forward over a token batch."""
    return graph_forward(block.graph(), block.weights, x)


# ---------------------------------------------------------------------------
# Block quantization pipeline
# ---------------------------------------------------------------------------

# Which producer absorbs each linear's inverse smoothing scales. Linears
# sharing a producer must share scales.
_FOLD_GROUPS = {
    ("q_proj", "k_proj", "v_proj"): ("gain", "ln1"),
    ("o_proj",): ("cols", "v_proj"),
    ("up_proj", "gate_proj"): ("gain", "ln2"),
    ("down_proj",): ("cols", "up_proj"),
}


@dataclass
class LinearBundle:
    main: QuantizedTensor | MxBlockTensor
    comp: Compensator | None
    act_cfg: IntQuantConfig | None


@dataclass
class QuantizedBlockBundle:
    linears: dict[str, LinearBundle]
    nl_weights: dict[str, np.ndarray]  # folded gains
    plans: dict[str, SaliencyPlan]
    smoothing: dict[str, FlatteningPlan] = field(default_factory=dict)
    source_hash: int = 0
    rank: int = 0
    fmt: str = "int"


def _fold_block(block: ToyBlock, stats: dict[str, CalibStats], alpha: float):
    """Fold shared smoothing scales into weights and producers; exact."""
    w = {k: v.copy() for k, v in block.weights.items()}
    smoothing: dict[str, FlatteningPlan] = {}
    for group, (kind, target) in _FOLD_GROUPS.items():
        stacked = np.hstack([w[name] for name in group])
        plan = compute_smoothing_scales(stats[group[0]], stacked, alpha)
        for name in group:
            w[name] = plan.s[:, None] * w[name]
            smoothing[name] = plan
        if kind == "gain":
            w[target] = w[target] / plan.s
        else:
            w[target] = w[target] / plan.s[None, :]
    return w, smoothing


def block_calibration(block: ToyBlock, calib_x, alpha: float = 0.5):
    """Per-linear input stats and the shared flattening plans for a block."""
    calib_x = as_matrix(calib_x, "calib_x")
    _, captured = graph_forward(
        block.graph(), block.weights, calib_x, collect_linear_inputs=True
    )
    stats = {name: _stats_of(captured[name]) for name in LINEAR_NAMES}
    _, smoothing = _fold_block(block, stats, alpha)
    return stats, smoothing


def quantize_block(
    block: ToyBlock,
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
    damping_fraction: float = 0.01,
) -> QuantizedBlockBundle:
    """Calibrate, optionally flatten, and quantize every linear in the block.

    Without flattening, saliency falls back to raw activation-channel scales
    (the folded-weight scale rule needs the fold to carry the signal).
    """
    calib_x = as_matrix(calib_x, "calib_x")
    graph = block.graph()
    _, captured = graph_forward(graph, block.weights, calib_x, collect_linear_inputs=True)
    stats = {name: _stats_of(captured[name]) for name in LINEAR_NAMES}

    if saf:
        folded, smoothing = _fold_block(block, stats, alpha)
        _, captured = graph_forward(graph, folded, calib_x, collect_linear_inputs=True)
    else:
        folded = {k: v.copy() for k, v in block.weights.items()}
        smoothing = {}

    linears: dict[str, LinearBundle] = {}
    plans: dict[str, SaliencyPlan] = {}
    act_cfg = None if fmt == "mxfp4" else per_token_config(act_bits)
    for name in LINEAR_NAMES:
        w = folded[name]
        r = min(rank, w.shape[0])
        if fmt == "mxfp4" and r % block_size != 0:
            r = (r // block_size) * block_size
        if saf:
            scores = score_rows_from(w)
        else:
            scores = score_rows_from(w, stats[name].max_abs, "activation")
        plan = build_plan(scores, r)
        plans[name] = plan
        if fmt == "mxfp4":
            main, comp = build_serq_rtn_mx(w, plan, block_size)
        elif method == "rtn":
            rcfg = default_r_config(w.shape[1], r_bits, weight_group)
            wcfg = _weight_config(weight_bits, weight_group, w.shape[0])
            main, comp = build_serq_rtn(w, plan, wcfg, rcfg)
        elif method == "gptq":
            rcfg = default_r_config(w.shape[1], r_bits, weight_group)
            gcfg = GptqConfig(
                bits=weight_bits,
                group_size=_gptq_group(weight_group, w.shape[0]),
                damping_fraction=damping_fraction,
            )
            hess = accumulate_hessian(HessianState.zeros(w.shape[0]), captured[name])
            main, comp = build_serq_gptq_swapped(w, plan, gcfg, rcfg, hess)
        elif method == "svd":
            wcfg = _weight_config(weight_bits, weight_group, w.shape[0])
            main, comp = build_svd_baseline(w, wcfg, r)
        else:
            raise ValidationError(f"unknown method {method!r}")
        linears[name] = LinearBundle(main, comp, act_cfg)

    return QuantizedBlockBundle(
        linears=linears,
        nl_weights={g: folded[g] for g in GAIN_NAMES},
        plans=plans,
        smoothing=smoothing,
        source_hash=graph_hash(graph, block.weights),
        rank=rank,
        fmt=fmt,
    )


def _stats_of(x: np.ndarray) -> CalibStats:
    return CalibStats(x.shape[1], np.abs(x).max(axis=0), x.shape[0])


def _weight_config(bits: int, group: int | str, rows: int) -> IntQuantConfig:
    if group == "per-row" or (isinstance(group, int) and rows % group != 0):
        return IntQuantConfig(bits=bits, symmetric=True, group_size="per-row")
    return IntQuantConfig(bits=bits, symmetric=True, group_size=group, axis="row")


def _gptq_group(group: int | str, rows: int) -> int | str:
    if group == "per-row" or (isinstance(group, int) and rows % group != 0):
        return "per-row"
    return group


def bundle_with_rank(bundle: QuantizedBlockBundle, r: int) -> QuantizedBlockBundle:
    """Truncate every compensator to its first ``r`` salient rows."""
    linears = {}
    for name, lb in bundle.linears.items():
        comp = lb.comp
        if comp is not None and comp.rank > r:
            comp = truncate_compensator(comp, r)
        linears[name] = LinearBundle(lb.main, comp, lb.act_cfg)
    return QuantizedBlockBundle(
        linears=linears,
        nl_weights=bundle.nl_weights,
        plans=bundle.plans,
        smoothing=bundle.smoothing,
        source_hash=bundle.source_hash,
        rank=r,
        fmt=bundle.fmt,
    )


def passthrough_bundle(block: ToyBlock) -> QuantizedBlockBundle:
    """Bundle with quantization disabled: every linear keeps its exact
    weight, so the quantized forward must match the full-precision one."""
    linears = {
        name: LinearBundle(block.weights[name].copy(), None, None)
        for name in LINEAR_NAMES
    }
    return QuantizedBlockBundle(
        linears=linears,
        nl_weights={g: block.weights[g].copy() for g in GAIN_NAMES},
        plans={},
        source_hash=graph_hash(block.graph(), block.weights),
        rank=0,
        fmt="none",
    )


def forward_quantized(block: ToyBlock, x, bundle: QuantizedBlockBundle) -> np.ndarray:
    """Quantized forward: linears via the reconstructed path, rest exact."""
    if bundle.source_hash and bundle.source_hash != graph_hash(block.graph(), block.weights):
        raise ValidationError("bundle was built for a different block")
    weights = dict(block.weights)
    weights.update(bundle.nl_weights)

    def linear_fn(name, xin):
        lb = bundle.linears[name]
        return forward_reconstructed(xin, lb.main, lb.comp, lb.act_cfg)

    return graph_forward(block.graph(), weights, x, linear_fn=linear_fn)
