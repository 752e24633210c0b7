"""On-disk layout for quantized model bundles.

A bundle is a directory holding ``bundle.json`` plus one array file per
tensor section: ``.npy`` for integer codes and float scales (little-endian
dtypes), and the packed MX container for MXFP4 payloads. Writing the same
bundle twice produces identical bytes.
"""

from __future__ import annotations

import json
import os

import numpy as np

from ._validation import ValidationError
from .compensate import Compensator
from .mxfmt import MxBlockTensor, load_mx, save_mx
from .quantcore import IntQuantConfig, QuantizedTensor
from .toymodel import LinearBundle, QuantizedBlockBundle


def _save_npy(dirpath: str, name: str, arr: np.ndarray) -> str:
    fname = f"{name}.npy"
    path = os.path.join(dirpath, fname)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        np.save(f, arr)
    os.replace(tmp, path)
    return fname


def _cfg_dict(cfg: IntQuantConfig) -> dict:
    return {
        "bits": cfg.bits,
        "symmetric": cfg.symmetric,
        "group_size": cfg.group_size,
        "axis": cfg.axis,
    }


def _save_qt(dirpath: str, name: str, qt: QuantizedTensor) -> dict:
    rec = {
        "kind": "int",
        "codes": _save_npy(dirpath, f"{name}.codes", qt.codes.astype("<i4")),
        "scales": _save_npy(dirpath, f"{name}.scales", qt.scales.astype("<f8")),
        "config": _cfg_dict(qt.config),
        "shape": list(qt.shape),
    }
    if qt.zero_points is not None:
        rec["zero_points"] = _save_npy(
            dirpath, f"{name}.zps", qt.zero_points.astype("<i4")
        )
    return rec


def _load_qt(dirpath: str, rec: dict) -> QuantizedTensor:
    codes = np.load(os.path.join(dirpath, rec["codes"])).astype(np.int32)
    scales = np.load(os.path.join(dirpath, rec["scales"])).astype(np.float64)
    zps = None
    if "zero_points" in rec:
        zps = np.load(os.path.join(dirpath, rec["zero_points"])).astype(np.int32)
    cfg = IntQuantConfig(**rec["config"])
    return QuantizedTensor(codes, scales, zps, cfg, tuple(rec["shape"]))


def _save_mx_tensor(dirpath: str, name: str, t: MxBlockTensor) -> dict:
    fname = f"{name}.mx"
    save_mx(os.path.join(dirpath, fname), t)
    return {"kind": "mx", "file": fname}


def save_bundle(dirpath: str, bundle: QuantizedBlockBundle) -> None:
    os.makedirs(dirpath, exist_ok=True)
    doc = {
        "fmt": bundle.fmt,
        "rank": bundle.rank,
        "source_hash": bundle.source_hash,
        "gains": {},
        "linears": {},
        # the quantized pipeline gathers salient channels by index; the
        # permutation assignment therefore records a gather fallback per layer
        "assignment": {
            name: {
                "physical": False,
                "gather": plan.salient_idx.tolist(),
            }
            for name, plan in sorted(bundle.plans.items())
        },
    }
    for name, gain in sorted(bundle.nl_weights.items()):
        doc["gains"][name] = _save_npy(dirpath, f"gain.{name}", gain.astype("<f8"))
    for name, lb in sorted(bundle.linears.items()):
        if isinstance(lb.main, MxBlockTensor):
            main_rec = _save_mx_tensor(dirpath, f"{name}.main", lb.main)
        else:
            main_rec = _save_qt(dirpath, f"{name}.main", lb.main)
        rec = {"main": main_rec, "comp": None, "act_cfg": None}
        if lb.act_cfg is not None:
            rec["act_cfg"] = _cfg_dict(lb.act_cfg)
        comp = lb.comp
        if comp is not None and comp.rank > 0:
            crec = {"mode": comp.mode, "rank": comp.rank}
            if comp.salient_idx is not None:
                crec["salient_idx"] = _save_npy(
                    dirpath, f"{name}.salient", comp.salient_idx.astype("<i8")
                )
            if comp.l1 is not None:
                crec["l1"] = _save_npy(dirpath, f"{name}.l1", comp.l1.astype("<f8"))
                crec["l2"] = _save_npy(dirpath, f"{name}.l2", comp.l2.astype("<f8"))
            elif isinstance(comp.r_q, MxBlockTensor):
                crec["r_mx"] = _save_mx_tensor(dirpath, f"{name}.r", comp.r_q)
            elif comp.r_q is not None:
                crec["r_q"] = _save_qt(dirpath, f"{name}.r", comp.r_q)
            else:
                crec["r_dense"] = _save_npy(
                    dirpath, f"{name}.rdense", comp.r_dense.astype("<f8")
                )
            rec["comp"] = crec
        doc["linears"][name] = rec
    path = os.path.join(dirpath, "bundle.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def load_bundle(dirpath: str) -> QuantizedBlockBundle:
    with open(os.path.join(dirpath, "bundle.json")) as f:
        doc = json.load(f)
    gains = {
        name: np.load(os.path.join(dirpath, fname)).astype(np.float64)
        for name, fname in doc["gains"].items()
    }
    linears: dict[str, LinearBundle] = {}
    for name, rec in doc["linears"].items():
        mrec = rec["main"]
        if mrec["kind"] == "mx":
            main = load_mx(os.path.join(dirpath, mrec["file"]))
        else:
            main = _load_qt(dirpath, mrec)
        act_cfg = IntQuantConfig(**rec["act_cfg"]) if rec["act_cfg"] else None
        comp = None
        crec = rec.get("comp")
        if crec:
            kwargs = {}
            if "salient_idx" in crec:
                kwargs["salient_idx"] = np.load(
                    os.path.join(dirpath, crec["salient_idx"])
                ).astype(np.intp)
            if "l1" in crec:
                kwargs["l1"] = np.load(os.path.join(dirpath, crec["l1"]))
                kwargs["l2"] = np.load(os.path.join(dirpath, crec["l2"]))
            elif "r_mx" in crec:
                kwargs["r_q"] = load_mx(os.path.join(dirpath, crec["r_mx"]["file"]))
            elif "r_q" in crec:
                kwargs["r_q"] = _load_qt(dirpath, crec["r_q"])
            elif "r_dense" in crec:
                kwargs["r_dense"] = np.load(os.path.join(dirpath, crec["r_dense"]))
            comp = Compensator(mode=crec["mode"], rank=crec["rank"], **kwargs)
        linears[name] = LinearBundle(main, comp, act_cfg)
    if not linears:
        raise ValidationError(f"{dirpath}: bundle has no linear sections")
    return QuantizedBlockBundle(
        linears=linears,
        nl_weights=gains,
        plans={},
        source_hash=int(doc["source_hash"]),
        rank=int(doc["rank"]),
        fmt=doc["fmt"],
    )
