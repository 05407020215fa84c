"""Model files, training-history logs and experiment result tables.

Model files are JSON documents tagged with a format name and version.  Floats
are written with ``repr`` precision so a save/load round trip is exact.
"""
import csv
import json
from dataclasses import asdict

import numpy as np

from . import gp_core
from .dgp import DgpLayer, DgpModel
from .kernel import KernelParams
from .point_process import PppPosterior

FORMAT = "ppgp-model"
VERSION = 1
HISTORY_FIELDS = ("epoch", "phase", "elbo", "ppp_kl", "expected_M", "wall_ms")
RESULT_METRICS = ("expected_M", "selected_M", "elbo", "posterior_gap", "wall_s")


class ModelFileError(ValueError):
    pass


def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def _kernel_dict(k):
    return {"log_lengthscales": _arr(k.log_lengthscales), "log_variance": float(k.log_variance)}


def _kernel_from(d):
    return KernelParams(np.asarray(d["log_lengthscales"], dtype=float), float(d["log_variance"]))


def model_to_dict(model):
    if isinstance(model, gp_core.SvgpModel):
        return {"kind": "svgp", "mode": model.mode, "Z": _arr(model.Z),
                "kernel": _kernel_dict(model.kernel), "log_noise": float(model.log_noise),
                "q_mu": _arr(model.q_mu), "q_sqrt_raw": _arr(model.q_sqrt_raw)}
    if isinstance(model, DgpModel):
        return {"kind": "dgp", "concat_input": bool(model.concat_input),
                "log_noise": float(model.log_noise),
                "layers": [{"Z": _arr(l.Z), "kernel": _kernel_dict(l.kernel), "q_mu": _arr(l.q_mu),
                            "q_sqrt_raw": _arr(l.q_sqrt_raw)} for l in model.layers]}
    raise TypeError(f"cannot serialise {type(model).__name__}")


def model_from_dict(d):
    kind = d.get("kind")
    if kind == "svgp":
        Z = np.asarray(d["Z"], dtype=float).reshape(len(d["Z"]), -1)
        return gp_core.SvgpModel(Z, _kernel_from(d["kernel"]), float(d["log_noise"]),
                                 np.asarray(d["q_mu"], dtype=float),
                                 np.asarray(d["q_sqrt_raw"], dtype=float).reshape(len(Z), len(Z)),
                                 mode=d["mode"])
    if kind == "dgp":
        layers = []
        for l in d["layers"]:
            Z = np.asarray(l["Z"], dtype=float).reshape(len(l["Z"]), -1)
            layers.append(DgpLayer(Z, _kernel_from(l["kernel"]),
                                   np.asarray(l["q_mu"], dtype=float).reshape(len(Z), -1),
                                   np.asarray(l["q_sqrt_raw"], dtype=float)))
        return DgpModel(layers, float(d["log_noise"]), bool(d["concat_input"]))
    raise ModelFileError(f"unknown model kind {kind!r}")


def save_model(path, model, posterior=None, stats=None, selected=None, extra=None):
    """Write a self-describing model file.

    ``posterior`` is a :class:`PppPosterior` or a list of them (one per DGP
    layer), ``stats`` the standardisation statistics of the training data and
    ``selected`` the candidate indices kept after the point-process phase.
    """
    posts = posterior if isinstance(posterior, (list, tuple)) else (
        None if posterior is None else [posterior])
    doc = {"format": FORMAT, "version": VERSION, "model": model_to_dict(model),
           "point_process": None if posts is None else [_arr(p.logits) for p in posts],
           "standardization": stats,
           "selected": None if selected is None else _selected_list(selected),
           "extra": extra or {}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def _selected_list(selected):
    if isinstance(selected, (list, tuple)) and selected and np.ndim(selected[0]) == 1:
        return [[int(i) for i in s] for s in selected]
    return [int(i) for i in selected]


def load_model(path):
    """Read a model file.  Returns a dict with ``model``, ``posterior``, ``stats``, ``selected``, ``extra``."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFileError(f"{path}: not a model file ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ModelFileError(f"{path}: not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise ModelFileError(f"{path}: file version {doc.get('version')} but this library reads "
                             f"version {VERSION}")
    posts = doc.get("point_process")
    if posts is not None:
        posts = [PppPosterior(np.asarray(p, dtype=float)) for p in posts]
        if doc["model"]["kind"] == "svgp":
            posts = posts[0]
    selected = doc.get("selected")
    if selected is not None:
        selected = ([np.asarray(s, dtype=int) for s in selected]
                    if selected and isinstance(selected[0], list) else np.asarray(selected, dtype=int))
    return {"model": model_from_dict(doc["model"]), "posterior": posts,
            "stats": doc.get("standardization"), "selected": selected, "extra": doc.get("extra", {})}


def write_history(path, history, timing=True):
    """One JSON object per epoch."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history.to_records(timing=timing):
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_results(jsonl_path, csv_path, records):
    """Per-run records as JSON lines plus a long table ``condition,intensity,seed,kind,metric,value``."""
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    if csv_path is None:
        return
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "intensity", "seed", "kind", "metric", "value"])
        for r in records:
            for metric in RESULT_METRICS:
                value = r.get(metric)
                if value is not None:
                    w.writerow([r["condition"], repr(r["intensity"]), r["seed"], r["kind"], metric,
                                repr(value)])
