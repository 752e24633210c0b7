"""Metrics and desk-scale experiments on synthetic matrices.

Perplexity is out of reach without a full model, so experiments score layer
outputs directly: QSNR in dB (10*log10 of signal power over error power,
capped at 300 for exact matches) and output MSE. Every record carries the
seed that reproduces it, and reports serialize deterministically.
"""

from __future__ import annotations

import json
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace as dc_replace

import numpy as np

from ._validation import ValidationError, as_matrix
from .compensate import build_serq_rtn, build_svd_baseline, default_r_config, scatter_compensator
from .pipeline import layer_forward, quantize_layer
from .quantcore import IntQuantConfig, dequantize, effective_bits, quantize
from .saliency import build_plan
from .tensorio import SyntheticSpec, collect_calib_stats, gen_synthetic_activations
from .toymodel import bundle_with_rank, forward_fp, forward_quantized, quantize_block, random_block

QSNR_CAP_DB = 300.0


@dataclass
class MetricsRecord:
    experiment: str
    method: str
    bits: str
    rank: int
    group: str
    seed: int
    qsnr_db: float
    output_mse: float
    eff_bits: float


@dataclass
class MetricsReport:
    experiment: str
    records: list[MetricsRecord] = field(default_factory=list)
    environment: dict = field(default_factory=dict)


CSV_HEADER = "experiment,method,bits,rank,group,seed,qsnr_db,output_mse,eff_bits"


def _environment_stamp() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
    }


def qsnr(y_ref, y_hat) -> float:
    """10*log10(||y_ref||^2 / ||y_ref - y_hat||^2), capped at 300 dB."""
    y_ref = as_matrix(y_ref, "y_ref")
    y_hat = as_matrix(y_hat, "y_hat")
    if y_ref.shape != y_hat.shape:
        raise ValidationError("shapes disagree")
    sig = float(np.sum(y_ref * y_ref))
    if sig == 0.0:
        raise ValidationError("reference output is all zero")
    err = float(np.sum((y_ref - y_hat) ** 2))
    if err == 0.0:
        return QSNR_CAP_DB
    return min(QSNR_CAP_DB, 10.0 * np.log10(sig / err))


def output_mse(y_ref, y_hat) -> float:
    return float(np.mean((np.asarray(y_ref) - np.asarray(y_hat)) ** 2))


def _n_workers() -> int:
    try:
        return max(1, int(os.environ.get("SERQ_THREADS", "1")))
    except ValueError:
        return 1


def _map_seeds(fn, seeds):
    """Run one work item per seed; parallelism never changes the order."""
    seeds = list(seeds)
    workers = _n_workers()
    if workers == 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, seeds))


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _bits_label(weight_bits: int, act_bits: int | None, fmt: str) -> str:
    if fmt == "mxfp4":
        return "mxfp4"
    return f"w{weight_bits}a{act_bits}"


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def run_serq_vs_svd(
    spec: SyntheticSpec,
    ranks,
    wcfg: IntQuantConfig,
    seeds,
    negative_control: bool = False,
    quantize_r: bool = True,
) -> MetricsReport:
    """Weight-only comparison of the salient-row compensator against the
    truncated-SVD baseline, both over the same main quantization.

    Activations stay full precision; saliency comes from activation-channel
    scales (flattening off). The negative control replaces the salient set
    with a random index set of the same size. ``quantize_r=False`` keeps the
    residual matrix unquantized, so at full rank both methods recover the
    error exactly.
    """
    report = MetricsReport("serq_vs_svd", environment=_environment_stamp())

    def one(seed):
        from .compensate import jacobi_svd

        recs = []
        x = gen_synthetic_activations(dc_replace(spec, seed=seed))
        d = spec.cols
        w = _rng(seed, 1).standard_normal((d, d))
        stats = collect_calib_stats(x)
        y_ref = x @ w
        main = quantize(w, wcfg)
        w_hat = dequantize(main)
        y_main = x @ w_hat
        # one error decomposition per seed; ranks share its leading triplets
        u, s, vt = jacobi_svd(w - w_hat)
        rcfg = default_r_config(d, wcfg.bits, wcfg.group_size) if quantize_r else None
        for r in ranks:
            eff = effective_bits([w.shape], wcfg, rank=r)
            plan = build_plan(stats.max_abs, r)
            _, comp = build_serq_rtn(w, plan, wcfg, rcfg)
            y_serq = y_main + x @ scatter_compensator(comp, d, d)
            recs.append(
                MetricsRecord(
                    "serq_vs_svd", "serq_wo_saf", f"w{wcfg.bits}a16", r, str(wcfg.group_size),
                    seed, qsnr(y_ref, y_serq), output_mse(y_ref, y_serq), eff,
                )
            )
            y_svd = y_main + (x @ (u[:, :r] * s[:r][None, :])) @ vt[:r, :]
            recs.append(
                MetricsRecord(
                    "serq_vs_svd", "svd", f"w{wcfg.bits}a16", r, str(wcfg.group_size),
                    seed, qsnr(y_ref, y_svd), output_mse(y_ref, y_svd), eff,
                )
            )
            if negative_control:
                idx = _rng(seed, 2).permutation(d)[:r]
                fake_scores = np.zeros(d)
                fake_scores[idx] = np.arange(r, 0, -1)
                plan_neg = build_plan(fake_scores, r)
                _, comp_n = build_serq_rtn(w, plan_neg, wcfg, rcfg)
                y_neg = y_main + x @ scatter_compensator(comp_n, d, d)
                recs.append(
                    MetricsRecord(
                        "serq_vs_svd", "serq_random_idx", f"w{wcfg.bits}a16", r,
                        str(wcfg.group_size), seed,
                        qsnr(y_ref, y_neg), output_mse(y_ref, y_neg), eff,
                    )
                )
        return recs

    for recs in _map_seeds(one, seeds):
        report.records.extend(recs)
    return report


def run_rank_sweep(
    spec: SyntheticSpec,
    ranks,
    seeds,
    *,
    weight_bits: int = 4,
    act_bits: int = 8,
    head_dim: int = 16,
    eval_rows: int = 512,
    method: str = "rtn",
) -> MetricsReport:
    """End-to-end toy-block output MSE across compensator ranks.

    One bundle is built at the largest rank per seed; smaller ranks truncate
    it along the saliency order, so the sweep is nested by construction.
    """
    ranks = sorted(set(int(r) for r in ranks))
    report = MetricsReport("rank_sweep", environment=_environment_stamp())
    hidden = spec.cols

    def one(seed):
        block = random_block(hidden, head_dim=head_dim, seed=_seed_int(seed, 3))
        pool = gen_synthetic_activations(
            dc_replace(spec, rows=spec.rows + eval_rows, seed=seed)
        )
        calib, x_eval = pool[: spec.rows], pool[spec.rows :]
        y_ref = forward_fp(block, x_eval)
        bundle = quantize_block(
            block, calib, rank=max(ranks), weight_bits=weight_bits,
            act_bits=act_bits, method=method,
        )
        recs = []
        for r in ranks:
            y = forward_quantized(block, x_eval, bundle_with_rank(bundle, r))
            recs.append(
                MetricsRecord(
                    "rank_sweep", f"serq_{method}", f"w{weight_bits}a{act_bits}", r,
                    "per-row", seed, qsnr(y_ref, y), output_mse(y_ref, y),
                    effective_bits(
                        [block.weights[n].shape for n in
                         ("q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "gate_proj", "down_proj")],
                        IntQuantConfig(bits=weight_bits, symmetric=True, group_size="per-row"),
                        rank=r, include_smoothing=True,
                    ),
                )
            )
        return recs

    for recs in _map_seeds(one, seeds):
        report.records.extend(recs)
    return report


_ABLATION_METHODS = ("rtn", "only_saf", "serq_wo_saf", "serq")


def run_saf_ablation(
    spec: SyntheticSpec,
    rank: int,
    seeds,
    configs=("w4a8", "w4a4", "mxfp4"),
    weight_profile: str = "heavy",
    out_dim: int | None = None,
    eval_rows: int = 256,
) -> MetricsReport:
    """Single-layer ablation: flattening only, reconstruction only, both.

    ``weight_profile="heavy"`` draws Student-t(4) weights; within-row dynamic
    range then drives a realistic weight quantization error. ``gaussian``
    keeps weights benign for the no-outlier agreement checks.
    """
    report = MetricsReport("saf_ablation", environment=_environment_stamp())
    d = spec.cols
    out = out_dim or d

    def one(seed):
        pool = gen_synthetic_activations(
            dc_replace(spec, rows=spec.rows + eval_rows, seed=seed)
        )
        calib, x_eval = pool[: spec.rows], pool[spec.rows :]
        rng = _rng(seed, 4)
        if weight_profile == "heavy":
            w = rng.standard_t(4, size=(d, out))
        else:
            w = rng.standard_normal((d, out))
        y_ref = x_eval @ w
        recs = []
        for cfg_name in configs:
            weight_bits, act_bits, fmt = _parse_config(cfg_name)
            for mname in _ABLATION_METHODS:
                saf = mname in ("only_saf", "serq")
                r = rank if mname in ("serq", "serq_wo_saf") else 0
                art = quantize_layer(
                    w, calib, rank=r, weight_bits=weight_bits, act_bits=act_bits,
                    saf=saf, method="rtn", fmt=fmt,
                )
                y = layer_forward(art, x_eval)
                recs.append(
                    MetricsRecord(
                        "saf_ablation", mname, _bits_label(weight_bits, act_bits, fmt),
                        r, "per-row", seed, qsnr(y_ref, y), output_mse(y_ref, y),
                        effective_bits(
                            [w.shape],
                            IntQuantConfig(bits=weight_bits, symmetric=True, group_size="per-row"),
                            rank=r, include_smoothing=saf,
                        ),
                    )
                )
        return recs

    for recs in _map_seeds(one, seeds):
        report.records.extend(recs)
    return report


def run_calibration_sensitivity(
    spec: SyntheticSpec,
    sample_counts,
    seeds,
    *,
    rank: int = 16,
    weight_bits: int = 4,
    act_bits: int = 4,
    eval_rows: int = 256,
) -> MetricsReport:
    """Full pipeline quality as a function of calibration row count.

    All counts draw from one pool per seed, so planted channels match, and
    evaluation uses held-out rows from the same distribution.
    """
    counts = sorted(set(int(c) for c in sample_counts))
    report = MetricsReport("calibration_sensitivity", environment=_environment_stamp())
    d = spec.cols

    def one(seed):
        pool = gen_synthetic_activations(
            dc_replace(spec, rows=max(counts) + eval_rows, seed=seed)
        )
        x_eval = pool[max(counts) :]
        w = _rng(seed, 5).standard_normal((d, d))
        y_ref = x_eval @ w
        recs = []
        for n in counts:
            art = quantize_layer(
                w, pool[:n], rank=rank, weight_bits=weight_bits, act_bits=act_bits,
                saf=True, method="rtn",
            )
            y = layer_forward(art, x_eval)
            recs.append(
                MetricsRecord(
                    "calibration_sensitivity", f"serq_calib{n}",
                    f"w{weight_bits}a{act_bits}", rank, "per-row", seed,
                    qsnr(y_ref, y), output_mse(y_ref, y), 0.0,
                )
            )
        return recs

    for recs in _map_seeds(one, seeds):
        report.records.extend(recs)
    return report


def _parse_config(name: str) -> tuple[int, int | None, str]:
    if name == "mxfp4":
        return 4, None, "mxfp4"
    if name.startswith("w") and "a" in name:
        wpart, apart = name[1:].split("a")
        return int(wpart), int(apart), "int"
    raise ValidationError(f"unknown quantization config {name!r}")


def _seed_int(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def _fmt_num(v: float) -> str:
    return repr(float(v))


def emit_report(report: MetricsReport, fmt: str, path) -> None:
    """Write a report as CSV or JSON; rows keep insertion order and floats
    round-trip exactly, so identical runs emit identical bytes."""
    if fmt == "csv":
        lines = [CSV_HEADER]
        for r in report.records:
            lines.append(
                ",".join(
                    [
                        r.experiment, r.method, r.bits, str(r.rank), r.group,
                        str(r.seed), _fmt_num(r.qsnr_db), _fmt_num(r.output_mse),
                        _fmt_num(r.eff_bits),
                    ]
                )
            )
        body = "\n".join(lines) + "\n"
    elif fmt == "json":
        body = json.dumps(
            {
                "experiment": report.experiment,
                "environment": report.environment,
                "records": [asdict(r) for r in report.records],
            },
            indent=2,
            sort_keys=True,
        ) + "\n"
    else:
        raise ValidationError(f"unknown report format {fmt!r}")
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(body)
    os.replace(tmp, path)


def load_report(path) -> MetricsReport:
    with open(path) as f:
        d = json.load(f)
    return MetricsReport(
        experiment=d["experiment"],
        records=[MetricsRecord(**r) for r in d["records"]],
        environment=d.get("environment", {}),
    )
