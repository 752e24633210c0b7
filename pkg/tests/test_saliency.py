import numpy as np
import pytest

from serq._validation import ValidationError
from serq.saliency import (
    LayerGraph,
    apply_assignment,
    attention_mix,
    build_plan,
    graph_forward,
    graph_hash,
    propagate_permutations,
    rmsnorm,
    score_rows,
    score_rows_from,
    verify_equivalence,
)
from serq.toymodel import random_block, toy_block_graph


def plan_from_permutation(perm, r=None):
    """Plan whose permutation equals ``perm`` (scores decrease along it)."""
    perm = np.asarray(perm, dtype=np.intp)
    n = perm.size
    scores = np.zeros(n)
    scores[perm] = np.arange(n, 0, -1)
    return build_plan(scores, n if r is None else r)


def test_score_rows_definition():
    w = np.array([[10.0, -2.0], [0.1, 0.05], [0.2, -0.1]])
    assert np.array_equal(score_rows(w), [10.0, 0.1, 0.2])


def test_score_rows_column_permutation_invariant():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((8, 6))
    perm = rng.permutation(6)
    assert np.array_equal(score_rows(w), score_rows(w[:, perm]))


def test_scores_find_planted_scales():
    # top-r scored rows of diag(s) @ W coincide with the top-r entries of s
    hits = 0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((64, 64))
        s = np.ones(64)
        idx = rng.permutation(64)[:8]
        s[idx] = 50.0
        top = np.argsort(-score_rows(s[:, None] * w), kind="stable")[:8]
        hits += set(top.tolist()) == set(idx.tolist())
    assert hits >= 38  # >= 95% of seeded trials


def test_score_sources():
    w = np.array([[1.0, 2.0], [3.0, 1.0]])
    act = np.array([5.0, 0.5])
    assert np.array_equal(score_rows_from(w, act, "activation"), act)
    assert np.array_equal(score_rows_from(w, act, "awq_product"), act * [2.0, 3.0])
    with pytest.raises(ValidationError):
        score_rows_from(w, None, "activation")


def test_build_plan_full_rank_sorts():
    plan = build_plan(np.array([1.0, 3.0, 2.0]), 3)
    assert np.array_equal(plan.permutation, [1, 2, 0])


def test_build_plan_rank_zero():
    plan = build_plan(np.array([5.0, 1.0]), 0)
    assert plan.salient_idx.size == 0
    assert np.array_equal(plan.permutation, [0, 1])


def test_build_plan_tie_to_lower_index():
    plan = build_plan(np.array([1.0, 3.0, 3.0, 2.0]), 2)
    assert np.array_equal(plan.salient_idx, [1, 2])


def test_build_plan_rank_out_of_range():
    with pytest.raises(ValidationError):
        build_plan(np.ones(4), 5)


def test_rmsnorm_gain_permutation_equivariant():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 8))
    g = rng.standard_normal(8) + 2.0
    perm = rng.permutation(8)
    a = rmsnorm(x, g)[:, perm]
    b = rmsnorm(x[:, perm], g[perm])
    assert np.abs(a - b).max() < 1e-14


def test_attention_within_head_permutation_equivariance():
    rng = np.random.default_rng(2)
    q = rng.standard_normal((6, 8))
    k = rng.standard_normal((6, 8))
    v = rng.standard_normal((6, 8))
    # permute v channels within each head of width 4
    perm = np.array([2, 0, 3, 1, 5, 7, 4, 6])
    out = attention_mix(q, k, v, 4)
    out_p = attention_mix(q, k, v[:, perm], 4)
    assert np.abs(out[:, perm] - out_p).max() < 1e-14
    # a cross-head permutation changes the result
    cross = np.arange(8)
    cross[[0, 5]] = [5, 0]
    out_c = attention_mix(q, k, v[:, cross], 4)
    assert np.abs(out[:, cross] - out_c).max() > 1e-3


def test_two_linear_chain_physical():
    g = LayerGraph()
    g.add("x", "input")
    g.add("a", "linear")
    g.add("b", "linear")
    g.add("out", "output")
    g.connect("x", "a")
    g.connect("a", "b")
    g.connect("b", "out")
    rng = np.random.default_rng(3)
    weights = {"a": rng.standard_normal((6, 8)), "b": rng.standard_normal((8, 4))}
    plan = plan_from_permutation(rng.permutation(8))
    asn = propagate_permutations(g, {"b": plan}, weights)
    assert asn.physical["b"] is True
    assert np.array_equal(asn.output_col_perm["a"], plan.permutation)
    rewritten = apply_assignment(g, weights, asn)
    x = rng.standard_normal((5, 6))
    assert verify_equivalence(g, weights, rewritten, x) <= 1e-12


def test_identity_permutation_is_physical():
    block = random_block(32, head_dim=8, seed=4)
    g = block.graph()
    plan = plan_from_permutation(np.arange(32))
    asn = propagate_permutations(g, {"q_proj": plan}, block.weights)
    assert asn.physical["q_proj"] is True
    rewritten = apply_assignment(g, block.weights, asn)
    for k in block.weights:
        assert np.array_equal(rewritten[k], block.weights[k])


def test_cross_head_permutation_falls_back():
    block = random_block(32, head_dim=4, seed=5)
    g = block.graph()
    perm = np.arange(32)
    perm[[0, 5]] = [5, 0]  # crosses the head boundary
    plan = plan_from_permutation(perm, r=2)
    asn = propagate_permutations(g, {"o_proj": plan}, block.weights)
    assert asn.physical["o_proj"] is False
    assert np.array_equal(asn.gather["o_proj"], plan.salient_idx)
    # counterexample forward: applying it anyway breaks equivalence
    bad = {k: v.copy() for k, v in block.weights.items()}
    bad["o_proj"] = bad["o_proj"][perm, :]
    bad["v_proj"] = bad["v_proj"][:, perm]
    x = np.random.default_rng(6).standard_normal((8, 32))
    assert verify_equivalence(g, block.weights, bad, x) > 1e-3


def test_within_head_o_proj_is_physical():
    block = random_block(32, head_dim=8, seed=7)
    g = block.graph()
    rng = np.random.default_rng(8)
    perm = np.concatenate([rng.permutation(8) + 8 * h for h in range(4)])
    plan = plan_from_permutation(perm)
    asn = propagate_permutations(g, {"o_proj": plan}, block.weights)
    assert asn.physical["o_proj"] is True
    assert np.array_equal(asn.output_col_perm["v_proj"], perm)
    rewritten = apply_assignment(g, block.weights, asn)
    x = rng.standard_normal((6, 32))
    assert verify_equivalence(g, block.weights, rewritten, x) <= 1e-10


def test_residual_fed_linears_fall_back():
    block = random_block(32, head_dim=8, seed=9)
    g = block.graph()
    rng = np.random.default_rng(10)
    plans = {name: plan_from_permutation(rng.permutation(32), r=4)
             for name in ("q_proj", "k_proj", "v_proj", "up_proj", "gate_proj")}
    asn = propagate_permutations(g, plans, block.weights)
    for name in plans:
        assert asn.physical[name] is False
        assert name in asn.gather


def test_down_proj_propagates_to_up_and_gate():
    block = random_block(32, head_dim=8, seed=11)
    g = block.graph()
    rng = np.random.default_rng(12)
    perm = rng.permutation(block.ffn_dim)
    plan = plan_from_permutation(perm)
    asn = propagate_permutations(g, {"down_proj": plan}, block.weights)
    assert asn.physical["down_proj"] is True
    assert np.array_equal(asn.output_col_perm["up_proj"], perm)
    assert np.array_equal(asn.output_col_perm["gate_proj"], perm)
    rewritten = apply_assignment(g, block.weights, asn)
    x = rng.standard_normal((6, 32))
    assert verify_equivalence(g, block.weights, rewritten, x) <= 1e-10


def test_producer_conflict_first_consumer_wins():
    g = LayerGraph()
    g.add("x", "input")
    g.add("a", "linear")
    g.add("b", "linear")
    g.add("c", "linear")
    g.add("add", "residual_add")
    g.add("out", "output")
    g.connect("x", "a")
    g.connect("a", "b")
    g.connect("a", "c")
    g.connect("b", "add")
    g.connect("c", "add")
    g.connect("add", "out")
    rng = np.random.default_rng(13)
    weights = {
        "a": rng.standard_normal((4, 6)),
        "b": rng.standard_normal((6, 4)),
        "c": rng.standard_normal((6, 4)),
    }
    pb = plan_from_permutation(rng.permutation(6))
    pc = plan_from_permutation(rng.permutation(6))
    asn = propagate_permutations(g, {"b": pb, "c": pc}, weights)
    assert asn.physical["b"] is True
    assert asn.physical["c"] is False
    rewritten = apply_assignment(g, weights, asn)
    x = rng.standard_normal((5, 4))
    assert verify_equivalence(g, weights, rewritten, x) <= 1e-12


def test_double_apply_rejected():
    block = random_block(32, head_dim=8, seed=14)
    g = block.graph()
    perm = np.random.default_rng(15).permutation(block.ffn_dim)
    asn = propagate_permutations(g, {"down_proj": plan_from_permutation(perm)}, block.weights)
    rewritten = apply_assignment(g, block.weights, asn)
    with pytest.raises(ValidationError, match="stale"):
        apply_assignment(g, rewritten, asn)


def test_gather_equals_physical_salient_slice():
    # the gathered salient channels equal the first-r channels after the fold
    rng = np.random.default_rng(16)
    x = rng.standard_normal((10, 12))
    w_prod = rng.standard_normal((6, 12))  # producer feeding the consumer
    plan = plan_from_permutation(rng.permutation(12), r=5)
    y = x @ w_prod.T if False else x  # keep simple: treat x as producer output
    gathered = y[:, plan.salient_idx]
    physical = y[:, plan.permutation][:, :5]
    assert np.array_equal(gathered, physical)


def test_graph_hash_sensitive_to_weights():
    block = random_block(32, head_dim=8, seed=17)
    g = block.graph()
    h1 = graph_hash(g, block.weights)
    weights2 = {k: v.copy() for k, v in block.weights.items()}
    weights2["q_proj"][0, 0] += 1e-9
    assert graph_hash(g, weights2) != h1
    assert graph_hash(g, block.weights) == h1


def test_plan_invariants_checked():
    with pytest.raises(ValidationError):
        from serq.saliency import SaliencyPlan

        SaliencyPlan(
            scores=np.ones(4), rank=2,
            salient_idx=np.array([0, 1]),
            permutation=np.array([1, 0, 2, 3]),  # does not start with salient
        )


def test_graph_cycle_detected():
    g = LayerGraph()
    g.add("a", "linear")
    g.add("b", "linear")
    g.connect("a", "b")
    g.connect("b", "a")
    with pytest.raises(ValidationError, match="cycle"):
        g.topo_order()
