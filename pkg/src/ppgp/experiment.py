"""Config-driven sweeps: adaptive runs, fixed-size baselines and result tables.

A config is a YAML mapping; every section and field is optional::

    seed: 0                       # base seed; run r uses seed + r
    output: results               # directory for results.jsonl / results.csv
    data:
      synth: {condition: noise, N: 300}      # or  csv: path/to/file.csv
      target: y                              # csv only
      corruption: 0.0                        # csv only, output corruption level
    sweep: {intensities: [0.05, 0.2], seeds: 3}
    model: {num_candidates: 60, mode: collapsed, lengthscale: 1.0, variance: 1.0, noise: 1.0}
    prior: {alpha: 0.05}
    train: {n_pre: 200, n_ppp: 600, ...}     # any TrainConfig field
    baselines: {M: [2, 4, 8], matched: true, epochs: null}
    adaptive: true
    save_histories: false
"""
import copy
import logging
import os
import time
from dataclasses import dataclass, fields

import numpy as np
import yaml

from . import data as data_mod
from . import gp_core
from .io import write_history, write_results
from .point_process import PriorSpec, cardinality_stats, sample
from .trainer import TrainConfig, TrainHistory, fit_svgp, run_training

log = logging.getLogger(__name__)

N_SIZE_SAMPLES = 20
MODEL_KEYS = ("num_candidates", "mode", "lengthscale", "variance", "noise")
SECTIONS = {
    "seed": None, "output": None, "adaptive": None, "save_histories": None,
    "data": ("synth", "csv", "target", "corruption"),
    "sweep": ("intensities", "seeds"),
    "model": MODEL_KEYS,
    "prior": ("alpha",),
    "train": tuple(f.name for f in fields(TrainConfig)),
    "baselines": ("M", "matched", "epochs"),
}
SYNTH_KEYS = ("condition", "N", "noise", "lengthscale", "intensity")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    output: str = None
    synth: dict = None
    csv: str = None
    target: str = None
    corruption: float = 0.0
    intensities: list = None
    seeds: int = 1
    model: dict = None
    alpha: float = None
    train: dict = None
    baseline_M: list = None
    matched: bool = False
    baseline_epochs: int = None
    adaptive: bool = True
    save_histories: bool = False

    @property
    def train_config(self):
        d = dict(self.train or {})
        if self.alpha is not None:
            d["alpha"] = self.alpha
        return TrainConfig.from_dict(d)


def _check_keys(mapping, allowed, where):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def parse_config(raw):
    """Validate a config mapping (as loaded from YAML) into an :class:`ExperimentConfig`."""
    raw = {} if raw is None else raw
    _check_keys(raw, SECTIONS, "config")
    for name, allowed in SECTIONS.items():
        if allowed is not None and name in raw:
            _check_keys(raw[name], allowed, name)
    d = raw.get("data", {})
    if "synth" in d and "csv" in d:
        raise ConfigError("data: give either synth or csv, not both")
    synth = d.get("synth")
    if synth is None and "csv" not in d:
        synth = {}
    if synth is not None:
        _check_keys(synth, SYNTH_KEYS, "data.synth")
    sweep = raw.get("sweep", {})
    if "intensities" in sweep and synth is None:
        raise ConfigError("sweep.intensities applies to synthetic data only")
    base = raw.get("baselines", {})
    cfg = ExperimentConfig(
        seed=int(raw.get("seed", 0)), output=raw.get("output"), synth=synth, csv=d.get("csv"),
        target=d.get("target"), corruption=float(d.get("corruption", 0.0)),
        intensities=list(sweep.get("intensities", [None])), seeds=int(sweep.get("seeds", 1)),
        model=dict(raw.get("model", {})), alpha=raw.get("prior", {}).get("alpha"),
        train=dict(raw.get("train", {})), baseline_M=list(base.get("M", [])),
        matched=bool(base.get("matched", False)), baseline_epochs=base.get("epochs"),
        adaptive=bool(raw.get("adaptive", True)), save_histories=bool(raw.get("save_histories", False)))
    if cfg.seeds < 1:
        raise ConfigError("sweep.seeds must be at least 1")
    try:
        cfg.train_config
        if cfg.alpha is not None:
            PriorSpec(cfg.alpha, 1)
        if synth is not None:
            data_mod.SynthSpec(**{**synth, "intensity": cfg.intensities[0]})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw)


# ---------------------------------------------------------------- runs

def make_dataset(cfg, intensity, seed):
    if cfg.csv is not None:
        ds = data_mod.load_csv(cfg.csv, cfg.target)
        if cfg.corruption:
            ds = data_mod.Dataset(ds.X, data_mod.corrupt_outputs(ds.y, cfg.corruption, seed),
                                  provenance=ds.provenance + f":corrupt={cfg.corruption:g}",
                                  columns=ds.columns)
        return ds
    spec = {**cfg.synth, "seed": seed}
    if intensity is not None:
        spec["intensity"] = intensity
    return data_mod.synth_generate(data_mod.SynthSpec(**spec))


def init_model(X, size, rng, model_cfg):
    """Model whose candidates are a uniform random subset of the training inputs."""
    opts = {k: model_cfg[k] for k in ("mode", "lengthscale", "variance", "noise") if k in model_cfg}
    rows = np.sort(rng.choice(len(X), size=min(size, len(X)), replace=False))
    return gp_core.SvgpModel.init(X[rows], **opts)


def final_bound(model, X, y):
    return float(gp_core.collapsed_elbo(model, gp_core.full_subset(model), X, y).value)


def _record(cfg, ds, intensity, seed, kind, **values):
    return {"condition": _condition(cfg), "intensity": intensity, "seed": seed, "kind": kind,
            "provenance": ds.provenance if ds is not None else None, **values}


def _condition(cfg):
    return cfg.synth.get("condition", "noise") if cfg.synth is not None else "csv"


def adaptive_run(ds, cfg, seed):
    """Three-phase fit on one dataset; returns ``(record_values, model, history)``."""
    tc = cfg.train_config
    tc.seed = seed
    X, y = ds.Xs, ds.ys
    K = cfg.model.get("num_candidates", 60)
    model = init_model(X, K, np.random.default_rng(seed), cfg.model)
    t0 = time.perf_counter()
    model, post, hist = run_training(model, (X, y), PriorSpec(tc.alpha, model.num_candidates), tc)
    wall = round(time.perf_counter() - t0, 3) if tc.record_time else 0.0
    E, _ = cardinality_stats(post)
    srng = np.random.default_rng(seed)
    sizes = [int(len(sample(post, srng))) for _ in range(N_SIZE_SAMPLES)]
    values = {"M": int(model.num_candidates), "expected_M": float(E),
              "selected_M": int(len(hist.selected)), "sampled_sizes": sizes,
              "elbo": final_bound(model, X, y),
              "posterior_gap": data_mod.posterior_gap(model, gp_core.full_subset(model), ds),
              "wall_s": wall}
    return values, model, hist


def baseline_run(ds, cfg, seed, M, epochs=None):
    """Fixed-size model trained on the collapsed bound without a point process."""
    tc = cfg.train_config
    tc.seed = seed
    X, y = ds.Xs, ds.ys
    epochs = tc.n_pre + tc.n_ppp + tc.n_post if epochs is None else epochs
    model = init_model(X, M, np.random.default_rng([seed, M]), {**cfg.model, "mode": "collapsed"})
    hist = TrainHistory()
    t0 = time.perf_counter()
    model = fit_svgp(model, X, y, epochs, tc, np.random.default_rng(seed), hist, "pre")
    wall = round(time.perf_counter() - t0, 3) if tc.record_time else 0.0
    values = {"M": int(M), "expected_M": float(M), "selected_M": int(M), "sampled_sizes": None,
              "elbo": final_bound(model, X, y),
              "posterior_gap": data_mod.posterior_gap(model, gp_core.full_subset(model), ds),
              "wall_s": wall}
    return values, model, hist


def _error_values(exc):
    return {"status": "error", "error": f"{type(exc).__name__}: {exc}"}


def run_experiment(config, output=None):
    """Run every configured (intensity, seed) cell; returns the list of records.

    ``config`` is a path, a raw mapping or an :class:`ExperimentConfig`.
    Failures are recorded per run and the sweep continues.  Results are
    written to ``output`` (or ``config.output``) when given.
    """
    if isinstance(config, (str, os.PathLike)):
        cfg = load_config(config)
    elif isinstance(config, dict):
        cfg = parse_config(copy.deepcopy(config))
    else:
        cfg = config
    out_dir = output or cfg.output
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    records = []
    run = 0
    for intensity in cfg.intensities:
        for _ in range(cfg.seeds):
            seed = cfg.seed + run
            run += 1
            records.extend(_run_cell(cfg, intensity, seed, out_dir))
    if out_dir:
        write_results(os.path.join(out_dir, "results.jsonl"), os.path.join(out_dir, "results.csv"),
                      records)
    return records


def _run_cell(cfg, intensity, seed, out_dir):
    recs = []
    try:
        ds = make_dataset(cfg, intensity, seed)
    except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
        log.error("run seed=%d: data generation failed: %s", seed, exc)
        return [_record(cfg, None, intensity, seed, "data", **_error_values(exc))]

    def attempt(kind, fn, *args):
        try:
            values, _, hist = fn(ds, cfg, seed, *args)
            values["status"] = "ok"
            if out_dir and cfg.save_histories:
                tag = f"{kind}_i{intensity}_s{seed}" + (f"_M{args[0]}" if args else "")
                write_history(os.path.join(out_dir, f"history_{tag}.jsonl"), hist,
                              timing=cfg.train_config.record_time)
        except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
            log.error("run %s seed=%d failed: %s", kind, seed, exc)
            values = _error_values(exc)
        recs.append(_record(cfg, ds, intensity, seed, kind, **values))
        return values

    if cfg.adaptive:
        values = attempt("adaptive", adaptive_run)
        if cfg.matched and values.get("status") == "ok":
            attempt("matched", baseline_run, max(1, int(round(values["expected_M"]))),
                    cfg.baseline_epochs)
    for M in cfg.baseline_M:
        attempt("baseline", baseline_run, int(M), cfg.baseline_epochs)
    return recs
