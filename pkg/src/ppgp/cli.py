"""Command-line interface: ``ppgp synth | fit | select | predict | experiment``."""
import argparse
import logging
import sys

import numpy as np
import yaml

from . import data as data_mod
from . import dgp as dgp_mod
from . import gp_core
from .experiment import MODEL_KEYS, ConfigError, init_model, run_experiment
from .io import load_model, save_model, write_history
from .point_process import PriorSpec, cardinality_stats
from .trainer import TrainConfig, run_training

log = logging.getLogger("ppgp")

FIT_SECTIONS = ("seed", "model", "prior", "train", "dgp")


def load_fit_config(path):
    """Config for ``fit``/``select``: sections ``model``, ``prior``, ``train`` and optional ``dgp``."""
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    unknown = set(raw) - set(FIT_SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    bad = set(raw.get("model", {})) - set(MODEL_KEYS)
    if bad:
        raise ConfigError(f"{path}: unknown key(s) in model: {sorted(bad)}")
    bad = set(raw.get("prior", {})) - {"alpha"}
    if bad:
        raise ConfigError(f"{path}: unknown key(s) in prior: {sorted(bad)}")
    return raw


def _train_config(raw, alpha=None, **overrides):
    d = dict(raw.get("train", {}))
    if "seed" in raw:
        d.setdefault("seed", raw["seed"])
    if "alpha" in raw.get("prior", {}):
        d["alpha"] = raw["prior"]["alpha"]
    if alpha is not None:
        d["alpha"] = alpha
    d.update(overrides)
    return TrainConfig.from_dict(d)


def cmd_synth(args):
    spec = data_mod.SynthSpec(args.condition, args.intensity, args.N, args.seed, args.noise,
                              args.lengthscale)
    ds = data_mod.synth_generate(spec)
    data_mod.dataset_to_csv(args.output, ds)
    print(f"wrote {ds.N} rows to {args.output} ({ds.provenance})")


def cmd_fit(args):
    raw = load_fit_config(args.config)
    ds = data_mod.load_csv(args.data, args.target)
    X, y = ds.Xs, ds.ys
    seed = raw.get("seed", raw.get("train", {}).get("seed", 0))
    if "dgp" in raw:
        cfg = dgp_mod.DgpConfig.from_dict({**raw["dgp"], **({"seed": seed})})
        model = dgp_mod.init_dgp(X, cfg.depth, cfg.width, cfg.num_candidates, cfg.concat_input,
                                 np.random.default_rng(seed))
        model, posts, selected, hist = dgp_mod.dgp_train(model, None, (X, y), config=cfg)
        save_model(args.output, model, posts, ds.stats(), selected)
        summary = "retained per layer: " + ", ".join(str(len(s)) for s in selected)
    else:
        tc = _train_config(raw)
        model = init_model(X, raw.get("model", {}).get("num_candidates", 60),
                           np.random.default_rng(tc.seed), raw.get("model", {}))
        model, post, hist = run_training(model, (X, y), config=tc)
        save_model(args.output, model, post if tc.n_ppp > 0 else None, ds.stats(), hist.selected)
        summary = f"retained {len(hist.selected)} inducing points"
    if args.history:
        write_history(args.history, hist)
    print(f"final elbo {hist.records[-1].elbo:.6g}; {summary}; model written to {args.output}")


def cmd_select(args):
    raw = load_fit_config(args.config)
    doc = load_model(args.model)
    model = doc["model"]
    if not isinstance(model, gp_core.SvgpModel):
        raise ConfigError("select works on single-layer models; use fit with a dgp section for deep models")
    ds = data_mod.load_csv(args.data, args.target)
    if doc["stats"] is not None:
        ds = _restandardize(ds, doc["stats"])
    tc = _train_config(raw, alpha=args.alpha, n_pre=0)
    if tc.n_ppp == 0:
        raise ConfigError("select needs n_ppp > 0")
    model, post, hist = run_training(model, (ds.Xs, ds.ys), PriorSpec(tc.alpha, model.num_candidates), tc)
    save_model(args.output, model, post, doc["stats"], hist.selected)
    if args.history:
        write_history(args.history, hist)
    E, V = cardinality_stats(post)
    if args.report:
        keep = np.zeros(post.K, dtype=int)
        keep[hist.selected] = 1
        data_mod.write_csv(args.report, ["candidate", "inclusion_prob", "selected"],
                           np.column_stack([np.arange(post.K), post.probs, keep]))
    print(f"E|Z| = {E:.4g}, Var|Z| = {V:.4g}; kept {len(hist.selected)} of {post.K}; "
          f"model written to {args.output}")


def _restandardize(ds, stats):
    return data_mod.Dataset(ds.X, ds.y, ds.provenance, ds.columns,
                            x_mean=np.asarray(stats["x_mean"]), x_std=np.asarray(stats["x_std"]),
                            y_mean=stats["y_mean"], y_std=stats["y_std"],
                            constant_columns=list(stats.get("constant_columns", [])))


def _read_inputs(path, d, target):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if len(header) == d:
        ds_cols = header
        values = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return values, ds_cols
    ds = data_mod.load_csv(path, target)
    if ds.X.shape[1] != d:
        raise data_mod.DataError(f"{path}: model expects {d} input columns, file has {ds.X.shape[1]}")
    return ds.X, ds.columns[:-1]


def cmd_predict(args):
    doc = load_model(args.model)
    model, stats = doc["model"], doc["stats"]
    if isinstance(model, gp_core.SvgpModel):
        d = model.Z.shape[1]
    else:
        d = model.layers[0].Z.shape[1]
    X, cols = _read_inputs(args.data, d, args.target)
    if stats is not None:
        Xs = (X - np.asarray(stats["x_mean"])) / np.asarray(stats["x_std"])
    else:
        Xs = X
    if isinstance(model, gp_core.SvgpModel):
        mean, var = gp_core.predict(model, gp_core.full_subset(model), None, Xs)
    else:
        mean, var = dgp_mod.dgp_predict(model, dgp_mod.full_subsets(model), Xs, args.samples,
                                        np.random.default_rng(args.seed))
    if args.noise:
        var = var + model.noise
    if stats is not None:
        mean = mean * stats["y_std"] + stats["y_mean"]
        var = var * stats["y_std"] ** 2
    data_mod.write_csv(args.output, list(cols) + ["mean", "variance"], np.column_stack([X, mean, var]))
    print(f"wrote {len(mean)} predictions to {args.output}")


def cmd_experiment(args):
    records = run_experiment(args.config, args.output)
    failed = [r for r in records if r.get("status") != "ok"]
    print(f"{len(records)} records, {len(failed)} failed")
    for r in records:
        if r.get("status") == "ok":
            print(f"{r['kind']:>9} intensity={r['intensity']} seed={r['seed']} "
                  f"M={r['M']} E={r['expected_M']:.3f} elbo={r['elbo']:.4f} gap={r['posterior_gap']:.4f}")
        else:
            print(f"{r['kind']:>9} intensity={r['intensity']} seed={r['seed']} ERROR {r['error']}")
    return 1 if failed and len(failed) == len(records) else 0


def build_parser():
    p = argparse.ArgumentParser(prog="ppgp", description="Sparse GPs with point-process inducing-point selection")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic 1-D regression dataset")
    s.add_argument("--condition", choices=data_mod.CONDITIONS, default="noise")
    s.add_argument("--intensity", type=float, default=None)
    s.add_argument("--N", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--lengthscale", type=float, default=1.0)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="fit a model to a CSV file")
    f.add_argument("data")
    f.add_argument("--target", default=None)
    f.add_argument("--config", default=None)
    f.add_argument("-o", "--output", required=True)
    f.add_argument("--history", default=None)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("select", help="prune a fitted model with the point process")
    c.add_argument("model")
    c.add_argument("data")
    c.add_argument("--target", default=None)
    c.add_argument("--alpha", type=float, default=None)
    c.add_argument("--config", default=None)
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--report", default=None, help="CSV of per-candidate inclusion probabilities")
    c.add_argument("--history", default=None)
    c.set_defaults(func=cmd_select)

    r = sub.add_parser("predict", help="predictive mean and variance in original units")
    r.add_argument("model")
    r.add_argument("data")
    r.add_argument("--target", default=None)
    r.add_argument("--noise", action="store_true", help="add the likelihood variance")
    r.add_argument("--samples", type=int, default=512, help="Monte-Carlo samples for deep models")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("-o", "--output", required=True)
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("experiment", help="run a configured sweep")
    e.add_argument("config")
    e.add_argument("-o", "--output", default=None)
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (ConfigError, data_mod.DataError, ValueError, OSError) as exc:
        print(f"ppgp {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
