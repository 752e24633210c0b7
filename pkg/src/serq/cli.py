"""Pipeline driver: calibrate / quantize / eval / sweep / report.

All subcommands are driven by a JSON config file; ``--seed`` and ``--out``
override the corresponding config keys. Outputs are written atomically and
byte-identical across reruns. Exit codes: 0 success, 1 usage error,
2 missing input, 3 inconsistent artifacts. ``SERQ_THREADS`` controls
experiment parallelism (results are independent of it).

Config schema (keys with defaults may be omitted)::

    {
      "out_dir": "runs/demo",
      "seed": 0,
      "mode": "rtn",                  # rtn | gptq | svd-baseline | mxfp4
      "rank": 128, "weight_bits": 4, "act_bits": 8,
      "weight_group": "per-row", "alpha": 0.5, "saf": true,
      "block_size": 32, "r_bits": 4,
      "model": {"synthetic_block": {"hidden_dim": 64, "head_dim": 16, "seed": 1}}
               # or {"manifest": "model/manifest.json"}
      "calibration": {"synthetic": {"rows": 128, "cols": 64, ...}}
                     # or {"tensor": "acts.bin"}
      "eval": {...same shape as calibration...},
      "report_format": "csv",          # csv | json
      "experiment": {"kind": "rank_sweep", "ranks": [0, 16, 32], "seeds": 8, ...}
    }
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import ValidationError
from .bundleio import load_bundle, save_bundle
from .harness import (
    MetricsRecord,
    MetricsReport,
    _environment_stamp,
    emit_report,
    load_report,
    output_mse,
    qsnr,
    run_calibration_sensitivity,
    run_rank_sweep,
    run_saf_ablation,
    run_serq_vs_svd,
)
from .quantcore import IntQuantConfig
from .saliency import graph_hash
from .tensorio import (
    LayerRecord,
    ModelManifest,
    SyntheticSpec,
    gen_synthetic_activations,
    load_manifest,
    load_tensor,
    save_manifest,
    save_tensor,
)
from .toymodel import GAIN_NAMES, LINEAR_NAMES, ToyBlock, forward_fp, forward_quantized, quantize_block, random_block

EXIT_USAGE = 1
EXIT_MISSING_INPUT = 2
EXIT_INCONSISTENT = 3


class ArtifactError(RuntimeError):
    """Artifacts on disk disagree with the config or each other."""


@dataclass
class PipelineConfig:
    out_dir: str = "serq_out"
    seed: int = 0
    mode: str = "rtn"
    rank: int = 128
    weight_bits: int = 4
    act_bits: int = 8
    weight_group: int | str = "per-row"
    alpha: float = 0.5
    saf: bool = True
    block_size: int = 32
    r_bits: int = 4
    report_format: str = "csv"
    model: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)

    _MODES = ("rtn", "gptq", "svd-baseline", "mxfp4")

    def validate(self) -> None:
        if self.mode not in self._MODES:
            raise ValidationError(f"mode must be one of {self._MODES}")
        if self.rank < 0:
            raise ValidationError("rank must be >= 0")

    @classmethod
    def load(cls, path: str, overrides: dict) -> "PipelineConfig":
        with open(path) as f:
            raw = json.load(f)
        known = {k: v for k, v in raw.items() if k in cls.__dataclass_fields__}
        unknown = set(raw) - set(known)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**known)
        for k, v in overrides.items():
            if v is not None:
                cfg = replace(cfg, **{k: v})
        cfg.validate()
        return cfg


def _spec_from(d: dict) -> SyntheticSpec:
    return SyntheticSpec(
        rows=int(d["rows"]),
        cols=int(d["cols"]),
        n_outlier_channels=int(d.get("n_outlier_channels", 0)),
        outlier_magnitude=float(d.get("outlier_magnitude", 1.0)),
        seed=int(d.get("seed", 0)),
    )


def _load_activations(section: dict, what: str) -> np.ndarray:
    if "tensor" in section:
        return load_tensor(section["tensor"])
    if "synthetic" in section:
        return gen_synthetic_activations(_spec_from(section["synthetic"]))
    raise ValidationError(f"config section {what!r} needs 'tensor' or 'synthetic'")


def _load_block(cfg: PipelineConfig) -> ToyBlock:
    model = cfg.model
    if "synthetic_block" in model:
        sb = model["synthetic_block"]
        return random_block(
            int(sb["hidden_dim"]),
            ffn_dim=int(sb["ffn_dim"]) if "ffn_dim" in sb else None,
            head_dim=int(sb.get("head_dim", 16)),
            seed=int(sb.get("seed", cfg.seed)),
        )
    if "manifest" in model:
        return load_block_manifest(model["manifest"])
    raise ValidationError("config 'model' needs 'synthetic_block' or 'manifest'")


def save_block_manifest(dirpath: str, block: ToyBlock) -> str:
    """Write a toy block as a manifest plus one tensor file per weight."""
    os.makedirs(dirpath, exist_ok=True)
    layers = []
    for name in LINEAR_NAMES:
        w = block.weights[name]
        fname = f"{name}.tensor"
        save_tensor(os.path.join(dirpath, fname), w)
        layers.append(LayerRecord(name, w.shape[0], w.shape[1], fname, role=name))
    for name in GAIN_NAMES:
        g = block.weights[name]
        fname = f"{name}.tensor"
        save_tensor(os.path.join(dirpath, fname), g[None, :])
        layers.append(LayerRecord(name, 1, g.shape[0], fname, role=name))
    graph = block.graph()
    nodes = {n.name: n.kind for n in graph.nodes.values() if n.kind != "linear"}
    manifest = ModelManifest(
        layers=layers,
        nodes=nodes,
        graph_edges=list(graph.edges),
        hidden_dim=block.hidden_dim,
        head_dim=block.head_dim,
        n_heads=block.n_heads,
    )
    path = os.path.join(dirpath, "manifest.json")
    save_manifest(path, manifest)
    return path


def load_block_manifest(path: str) -> ToyBlock:
    manifest = load_manifest(path)
    base = os.path.dirname(path)
    weights = {}
    for rec in manifest.layers:
        arr = load_tensor(os.path.join(base, rec.path))
        weights[rec.name] = arr[0] if rec.name in GAIN_NAMES else arr
    ffn = weights["down_proj"].shape[0]
    return ToyBlock(manifest.hidden_dim, ffn, manifest.head_dim, manifest.n_heads, weights)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _calibration_path(cfg: PipelineConfig) -> str:
    return os.path.join(cfg.out_dir, "calibration.json")


def cmd_calibrate(cfg: PipelineConfig) -> int:
    from .toymodel import block_calibration

    block = _load_block(cfg)
    x = _load_activations(cfg.calibration, "calibration")
    os.makedirs(cfg.out_dir, exist_ok=True)
    stats, smoothing = block_calibration(block, x, cfg.alpha)
    doc = {
        "source_hash": graph_hash(block.graph(), block.weights),
        "sample_count": x.shape[0],
        "alpha": cfg.alpha,
        "stats": {
            name: {"max_abs": s.max_abs.tolist()} for name, s in sorted(stats.items())
        },
        "flattening": {
            name: {"s": plan.s.tolist(), "alpha": plan.alpha}
            for name, plan in sorted(smoothing.items())
        },
    }
    path = _calibration_path(cfg)
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
    print(f"calibration written to {path}")
    return 0


def cmd_quantize(cfg: PipelineConfig) -> int:
    block = _load_block(cfg)
    calib_path = _calibration_path(cfg)
    if not os.path.exists(calib_path):
        raise FileNotFoundError(f"{calib_path}: run calibrate first")
    with open(calib_path) as f:
        calib_doc = json.load(f)
    if int(calib_doc["source_hash"]) != graph_hash(block.graph(), block.weights):
        raise ArtifactError("calibration was produced for a different model")
    x = _load_activations(cfg.calibration, "calibration")
    method = {"rtn": "rtn", "gptq": "gptq", "svd-baseline": "svd", "mxfp4": "rtn"}[cfg.mode]
    bundle = quantize_block(
        block,
        x,
        rank=cfg.rank,
        weight_bits=cfg.weight_bits,
        act_bits=cfg.act_bits,
        weight_group=cfg.weight_group,
        alpha=cfg.alpha,
        saf=cfg.saf,
        method=method,
        fmt="mxfp4" if cfg.mode == "mxfp4" else "int",
        block_size=cfg.block_size,
        r_bits=cfg.r_bits,
    )
    bundle_dir = os.path.join(cfg.out_dir, "bundle")
    save_bundle(bundle_dir, bundle)
    print(f"bundle written to {bundle_dir}")
    return 0


def cmd_eval(cfg: PipelineConfig) -> int:
    block = _load_block(cfg)
    bundle_dir = os.path.join(cfg.out_dir, "bundle")
    if not os.path.isdir(bundle_dir):
        raise FileNotFoundError(f"{bundle_dir}: run quantize first")
    bundle = load_bundle(bundle_dir)
    if bundle.source_hash != graph_hash(block.graph(), block.weights):
        raise ArtifactError("bundle was produced for a different model")
    x = _load_activations(cfg.eval or cfg.calibration, "eval")
    y_ref = forward_fp(block, x)
    y = forward_quantized(block, x, bundle)
    bits = "mxfp4" if bundle.fmt == "mxfp4" else f"w{cfg.weight_bits}a{cfg.act_bits}"
    report = MetricsReport("eval", environment=_environment_stamp())
    report.records.append(
        MetricsRecord(
            "eval", cfg.mode, bits, bundle.rank, str(cfg.weight_group), cfg.seed,
            qsnr(y_ref, y), output_mse(y_ref, y), 0.0,
        )
    )
    out = os.path.join(cfg.out_dir, f"eval_report.{cfg.report_format}")
    emit_report(report, cfg.report_format, out)
    print(f"report written to {out}")
    return 0


def cmd_sweep(cfg: PipelineConfig) -> int:
    exp = dict(cfg.experiment)
    if not exp:
        raise ValidationError("config 'experiment' section is required for sweep")
    kind = exp.pop("kind", None)
    seeds = exp.pop("seeds", 8)
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    spec = _spec_from(exp.pop("spec"))
    if kind == "rank_sweep":
        report = run_rank_sweep(
            spec, exp.pop("ranks"), seeds,
            weight_bits=cfg.weight_bits, act_bits=cfg.act_bits, **exp,
        )
    elif kind == "saf_ablation":
        report = run_saf_ablation(spec, exp.pop("rank", cfg.rank), seeds, **exp)
    elif kind == "serq_vs_svd":
        wcfg = IntQuantConfig(
            bits=cfg.weight_bits, symmetric=True, group_size=cfg.weight_group
        )
        report = run_serq_vs_svd(spec, exp.pop("ranks"), wcfg, seeds, **exp)
    elif kind == "calibration_sensitivity":
        report = run_calibration_sensitivity(
            spec, exp.pop("sample_counts"), seeds, **exp
        )
    else:
        raise ValidationError(f"unknown experiment kind {kind!r}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    out = os.path.join(cfg.out_dir, f"{report.experiment}.{cfg.report_format}")
    emit_report(report, cfg.report_format, out)
    print(f"report written to {out}")
    return 0


def cmd_report(in_path: str, out_path: str) -> int:
    if not os.path.exists(in_path):
        raise FileNotFoundError(in_path)
    report = load_report(in_path)
    fmt = "csv" if out_path.endswith(".csv") else "json"
    emit_report(report, fmt, out_path)
    print(f"report written to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    p = _Parser(prog="serq", description="Saliency-aware quantization pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("calibrate", "quantize", "eval", "sweep"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--out", default=None, help="override config out_dir")
    rp = sub.add_parser("report")
    rp.add_argument("--in", dest="in_path", required=True, help="JSON report")
    rp.add_argument("--out", dest="out_path", required=True, help="output path")
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.command == "report":
            return cmd_report(args.in_path, args.out_path)
        cfg = PipelineConfig.load(
            args.config, {"seed": args.seed, "out_dir": args.out}
        )
        return {
            "calibrate": cmd_calibrate,
            "quantize": cmd_quantize,
            "eval": cmd_eval,
            "sweep": cmd_sweep,
        }[args.command](cfg)
    except FileNotFoundError as e:
        print(f"error: missing input: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except ArtifactError as e:
        print(f"error: inconsistent artifacts: {e}", file=sys.stderr)
        return EXIT_INCONSISTENT
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
