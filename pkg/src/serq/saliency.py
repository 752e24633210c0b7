"""Saliency scoring, permutation planning, and offline permutation folding.

After activation scales are folded into a weight, the rows that will
accumulate the largest quantization error are simply the rows with the
largest magnitude, so scoring is a row-wise max-abs. A plan permutes the
top-r salient rows to the front; the matching column permutation is pushed
into the producing layers of the decoder graph so no runtime reordering is
needed. Where that is impossible (residual-stream inputs, conflicting
demands, or permutations crossing attention-head boundaries) the plan falls
back to gathering the salient channels by index at runtime, which yields
bit-identical salient slices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import ValidationError, as_matrix

SCORE_FOLDED_WEIGHT = "folded_weight"
SCORE_ACTIVATION = "activation"
SCORE_AWQ_PRODUCT = "awq_product"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


@dataclass(frozen=True)
class SaliencyPlan:
    scores: np.ndarray  # per-row, nonnegative
    rank: int
    salient_idx: np.ndarray  # length rank, descending score
    permutation: np.ndarray  # salient rows first, remainder ascending
    physical: bool = True

    def __post_init__(self):
        n = self.scores.shape[0]
        if not 0 <= self.rank <= n:
            raise ValidationError("rank out of range")
        if self.salient_idx.shape[0] != self.rank:
            raise ValidationError("salient_idx length must equal rank")
        if np.unique(self.salient_idx).size != self.rank:
            raise ValidationError("salient_idx must be distinct")
        if self.rank and (np.diff(self.scores[self.salient_idx]) > 0).any():
            raise ValidationError("salient_idx must be ordered by descending score")
        if sorted(self.permutation.tolist()) != list(range(n)):
            raise ValidationError("permutation is not a bijection")
        if not np.array_equal(self.permutation[: self.rank], self.salient_idx):
            raise ValidationError("permutation must start with salient_idx")


def score_rows(w_folded) -> np.ndarray:
    """Row-wise max-abs of the folded weight."""
    w = as_matrix(w_folded, "w_folded")
    return np.abs(w).max(axis=1)


def score_rows_from(
    w_folded, act_max_abs=None, source: str = SCORE_FOLDED_WEIGHT
) -> np.ndarray:
    """Saliency scores from the folded weight, raw activation scales, or the
    activation-times-weight product."""
    if source == SCORE_FOLDED_WEIGHT:
        return score_rows(w_folded)
    if act_max_abs is None:
        raise ValidationError(f"score source {source!r} needs activation stats")
    act = np.asarray(act_max_abs, dtype=np.float64)
    if source == SCORE_ACTIVATION:
        return act.copy()
    if source == SCORE_AWQ_PRODUCT:
        return act * score_rows(w_folded)
    raise ValidationError(f"unknown score source {source!r}")


def build_plan(scores, r: int) -> SaliencyPlan:
    """Top-r selection with ties broken toward the lower original index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if not 0 <= r <= n:
        raise ValidationError(f"rank {r} out of range for {n} rows")
    order = np.argsort(-scores, kind="stable")
    salient = order[:r].astype(np.intp)
    rest = np.setdiff1d(np.arange(n, dtype=np.intp), salient, assume_unique=False)
    if r == n:
        perm = order.astype(np.intp)
    else:
        perm = np.concatenate([salient, rest])
    return SaliencyPlan(
        scores=scores.copy(), rank=r, salient_idx=salient, permutation=perm
    )


# ---------------------------------------------------------------------------
# Layer graph
# ---------------------------------------------------------------------------

LINEAR = "linear"
RMSNORM = "rmsnorm"
UNARY = "unary"
BINARY = "binary"
RESIDUAL_ADD = "residual_add"
ATTENTION_MIX = "attention_mix"
EMBED = "embed"
INPUT = "input"
OUTPUT = "output"


@dataclass(frozen=True)
class Node:
    name: str
    kind: str
    params: tuple = ()


@dataclass
class LayerGraph:
    """Directed channel-flow graph over named nodes.

    Edges are (src, dst, port); ports distinguish the q/k/v inputs of an
    attention mix and the lhs/rhs of a binary op.
    """

    nodes: dict[str, Node] = field(default_factory=dict)
    edges: list[tuple[str, str, str]] = field(default_factory=list)

    def add(self, name: str, kind: str, params: tuple = ()) -> None:
        if name in self.nodes:
            raise ValidationError(f"duplicate node {name!r}")
        self.nodes[name] = Node(name, kind, params)

    def connect(self, src: str, dst: str, port: str = "in") -> None:
        if src not in self.nodes or dst not in self.nodes:
            raise ValidationError(f"edge ({src}, {dst}) references unknown node")
        self.edges.append((src, dst, port))

    def inputs_of(self, name: str) -> dict[str, list[str]]:
        by_port: dict[str, list[str]] = {}
        for src, dst, port in self.edges:
            if dst == name:
                by_port.setdefault(port, []).append(src)
        return by_port

    def topo_order(self) -> list[str]:
        indeg = {n: 0 for n in self.nodes}
        for _src, dst, _port in self.edges:
            indeg[dst] += 1
        ready = sorted(n for n, d in indeg.items() if d == 0)
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for src, dst, _port in self.edges:
                if src == n:
                    indeg[dst] -= 1
                    if indeg[dst] == 0:
                        ready.append(dst)
            ready.sort()
        if len(order) != len(self.nodes):
            raise ValidationError("graph has a cycle")
        return order


def _fnv1a(data: bytes, h: int = _FNV_OFFSET) -> int:
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def graph_hash(graph: LayerGraph, weights: dict[str, np.ndarray]) -> int:
    """64-bit FNV-1a over node/edge records and weight content digests."""
    import hashlib

    h = _FNV_OFFSET
    for name in sorted(graph.nodes):
        node = graph.nodes[name]
        h = _fnv1a(f"{node.name}|{node.kind}|{node.params}".encode(), h)
    for edge in graph.edges:
        h = _fnv1a("|".join(edge).encode(), h)
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name])
        digest = hashlib.sha256(arr.tobytes()).digest()
        h = _fnv1a(f"{name}|{arr.shape}".encode() + digest, h)
    return h


# ---------------------------------------------------------------------------
# Graph evaluation (full precision)
# ---------------------------------------------------------------------------


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x, axis=1, keepdims=True) + eps)
    return x / rms * gain[None, :]


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def attention_mix(q, k, v, head_dim: int) -> np.ndarray:
    """Per-head softmax(Q K^T / sqrt(head_dim)) V over a token batch."""
    hidden = q.shape[1]
    if hidden % head_dim != 0:
        raise ValidationError("hidden dim not divisible by head_dim")
    out = np.empty_like(v)
    for h in range(hidden // head_dim):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        logits = q[:, sl] @ k[:, sl].T / np.sqrt(head_dim)
        logits -= logits.max(axis=1, keepdims=True)
        a = np.exp(logits)
        a /= a.sum(axis=1, keepdims=True)
        out[:, sl] = a @ v[:, sl]
    return out


_UNARY_FNS = {"silu": silu, "identity": lambda x: x}


def graph_forward(
    graph: LayerGraph,
    weights: dict[str, np.ndarray],
    x: np.ndarray,
    collect_linear_inputs: bool = False,
    linear_fn=None,
):
    """Evaluate the graph on a token batch.

    ``linear_fn(name, x_in)`` overrides linear evaluation (used by the
    quantized path); by default linears multiply by their weight matrix.
    Returns the output node's value, optionally with a dict of each linear's
    input matrix.
    """
    x = as_matrix(x, "x")
    values: dict[str, np.ndarray] = {}
    captured: dict[str, np.ndarray] = {}
    output_name = None
    for name in graph.topo_order():
        node = graph.nodes[name]
        ins = graph.inputs_of(name)

        def one(port="in"):
            srcs = ins.get(port, [])
            if len(srcs) != 1:
                raise ValidationError(f"node {name} expects one {port!r} input")
            return values[srcs[0]]

        if node.kind in (INPUT, EMBED):
            values[name] = x
        elif node.kind == LINEAR:
            xin = one()
            if collect_linear_inputs:
                captured[name] = xin
            if linear_fn is not None:
                values[name] = linear_fn(name, xin)
            else:
                w = weights[name]
                if xin.shape[1] != w.shape[0]:
                    raise ValidationError(
                        f"{name}: input width {xin.shape[1]} != weight rows {w.shape[0]}"
                    )
                values[name] = xin @ w
        elif node.kind == RMSNORM:
            values[name] = rmsnorm(one(), weights[name])
        elif node.kind == UNARY:
            values[name] = _UNARY_FNS[node.params[0]](one())
        elif node.kind == BINARY:
            op = node.params[0]
            lhs, rhs = one("lhs"), one("rhs")
            values[name] = lhs * rhs if op == "mul" else lhs + rhs
        elif node.kind == RESIDUAL_ADD:
            srcs = ins.get("in", [])
            if len(srcs) < 2:
                raise ValidationError(f"residual add {name} needs >= 2 inputs")
            values[name] = sum(values[s] for s in srcs)
        elif node.kind == ATTENTION_MIX:
            head_dim = node.params[0]
            values[name] = attention_mix(one("q"), one("k"), one("v"), head_dim)
        elif node.kind == OUTPUT:
            values[name] = one()
            output_name = name
        else:
            raise ValidationError(f"unknown node kind {node.kind!r}")
    if output_name is None:
        raise ValidationError("graph has no output node")
    if collect_linear_inputs:
        return values[output_name], captured
    return values[output_name]


# ---------------------------------------------------------------------------
# Permutation propagation
# ---------------------------------------------------------------------------


@dataclass
class PermutationAssignment:
    input_perm: dict[str, np.ndarray] = field(default_factory=dict)
    output_col_perm: dict[str, np.ndarray] = field(default_factory=dict)
    gain_perm: dict[str, np.ndarray] = field(default_factory=dict)
    gather: dict[str, np.ndarray] = field(default_factory=dict)
    physical: dict[str, bool] = field(default_factory=dict)
    graph_hash: int = 0


def _is_within_head(perm: np.ndarray, head_dim: int) -> bool:
    idx = np.arange(perm.shape[0])
    return bool(np.all(perm // head_dim == idx // head_dim))


def _trace_producers(graph, node_name: str, perm: np.ndarray, claimed: set):
    """Walk upstream to the linear producers, or None if no fold exists."""
    node = graph.nodes[node_name]
    if node.kind == LINEAR:
        return None if node_name in claimed else [node_name]
    if node.kind in (RMSNORM, UNARY):
        ins = graph.inputs_of(node_name).get("in", [])
        return _trace_producers(graph, ins[0], perm, claimed) if len(ins) == 1 else None
    if node.kind == BINARY:
        ins = graph.inputs_of(node_name)
        producers = []
        for port in ("lhs", "rhs"):
            srcs = ins.get(port, [])
            if len(srcs) != 1:
                return None
            sub = _trace_producers(graph, srcs[0], perm, claimed)
            if sub is None:
                return None
            producers.extend(sub)
        return producers
    if node.kind == ATTENTION_MIX:
        head_dim = node.params[0]
        if not _is_within_head(perm, head_dim):
            return None
        vs = graph.inputs_of(node_name).get("v", [])
        return _trace_producers(graph, vs[0], perm, claimed) if len(vs) == 1 else None
    # residual stream, inputs, embeddings: no physical fold available
    return None


def _downstream_closure(graph, producers: list[str], perm: np.ndarray):
    """Nodes whose outputs carry the permutation, plus required fixes.

    Starting from the claimed producers, the permuted channel order flows
    through channel-preserving nodes. Every linear fed by a carried node
    needs a compensating input-row permutation, every norm a gain
    permutation. Returns None when the flow escapes (residual stream, graph
    output, a half-carried elementwise op, or q/k of an attention mix).
    """
    carried = set(producers)
    fixes_rows: list[str] = []
    fixes_gains: list[str] = []
    frontier = list(producers)
    while frontier:
        src = frontier.pop(0)
        for s, dst, port in graph.edges:
            if s != src:
                continue
            node = graph.nodes[dst]
            if node.kind == LINEAR:
                if dst not in fixes_rows:
                    fixes_rows.append(dst)
            elif node.kind == UNARY:
                if dst not in carried:
                    carried.add(dst)
                    frontier.append(dst)
            elif node.kind == RMSNORM:
                if dst not in carried:
                    fixes_gains.append(dst)
                    carried.add(dst)
                    frontier.append(dst)
            elif node.kind == BINARY:
                if dst not in carried:
                    carried.add(dst)
                    frontier.append(dst)
            elif node.kind == ATTENTION_MIX:
                if port != "v":
                    return None
                if not _is_within_head(perm, node.params[0]):
                    return None
                if dst not in carried:
                    carried.add(dst)
                    frontier.append(dst)
            else:
                # residual adds, outputs, embeds: the order escapes the fold
                return None
    # every elementwise pair must be carried on both sides
    for name in list(carried):
        if graph.nodes[name].kind == BINARY:
            for port in ("lhs", "rhs"):
                srcs = graph.inputs_of(name).get(port, [])
                if len(srcs) != 1 or srcs[0] not in carried:
                    return None
    return fixes_rows, fixes_gains


def propagate_permutations(
    graph: LayerGraph,
    plans: dict[str, SaliencyPlan],
    weights: dict[str, np.ndarray] | None = None,
) -> PermutationAssignment:
    """Assign physical row/column permutations, or gather fallbacks.

    Plans are processed in insertion order; the first consumer to claim a
    producer wins. Later conflicting demands, residual-stream inputs, and
    cross-head requests fall back to gathering salient channels by index.
    Other linears fed by a claimed producer receive compensating row
    permutations so the rewritten graph stays equivalent end to end.
    """
    assignment = PermutationAssignment()
    if weights is not None:
        assignment.graph_hash = graph_hash(graph, weights)
    claimed: set[str] = set()
    layout: dict[str, np.ndarray] = {}  # linear -> perm already on its input
    for name, plan in plans.items():
        if name not in graph.nodes or graph.nodes[name].kind != LINEAR:
            raise ValidationError(f"{name!r} is not a linear node")
        perm = plan.permutation
        if np.array_equal(perm, np.arange(perm.shape[0])):
            assignment.physical[name] = True
            assignment.input_perm[name] = perm.copy()
            continue
        srcs = graph.inputs_of(name).get("in", [])
        producers = (
            _trace_producers(graph, srcs[0], perm, claimed) if len(srcs) == 1 else None
        )
        closure = None
        if producers is not None:
            closure = _downstream_closure(graph, producers, perm)
        if closure is None:
            assignment.physical[name] = False
            idx = plan.salient_idx
            if name in layout:
                # input already arrives permuted by an earlier claim
                idx = np.argsort(layout[name])[idx]
            assignment.gather[name] = np.asarray(idx, dtype=np.intp)
            continue
        fixes_rows, fixes_gains = closure
        assignment.physical[name] = True
        for p in producers:
            assignment.output_col_perm[p] = perm.copy()
            claimed.add(p)
        for linear in fixes_rows:
            assignment.input_perm[linear] = perm.copy()
            layout[linear] = perm
        for norm in fixes_gains:
            assignment.gain_perm[norm] = perm.copy()
    return assignment


def apply_assignment(
    graph: LayerGraph,
    weights: dict[str, np.ndarray],
    assignment: PermutationAssignment,
) -> dict[str, np.ndarray]:
    """Rewrite the weight set with all physical permutations applied.

    Assignments are single-use against a graph snapshot: the stored hash
    covers weight contents, so applying twice raises.
    """
    if assignment.graph_hash and graph_hash(graph, weights) != assignment.graph_hash:
        raise ValidationError("stale assignment: graph or weights changed")
    out = {k: v.copy() for k, v in weights.items()}
    for name, perm in assignment.input_perm.items():
        out[name] = out[name][perm, :]
    for name, perm in assignment.output_col_perm.items():
        out[name] = out[name][:, perm]
    for name, perm in assignment.gain_perm.items():
        out[name] = out[name][perm]
    return out


def verify_equivalence(
    graph: LayerGraph,
    weights_a: dict[str, np.ndarray],
    weights_b: dict[str, np.ndarray],
    x: np.ndarray,
) -> float:
    """Max relative Frobenius deviation between the two forward passes."""
    ya = graph_forward(graph, weights_a, x)
    yb = graph_forward(graph, weights_b, x)
    denom = max(float(np.linalg.norm(ya)), 1e-300)
    return float(np.linalg.norm(ya - yb)) / denom
