"""Command-line interface: ``dgp-aep <command> [options]``.

Every command only marshals arguments and files; the numerical work lives
in the library modules.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from . import benchmark, dataio
from .gauss import NotPositiveDefiniteError
from .kernel import ContractError
from .layer import NumericalDegeneracyError
from .model import ModelConfig
from .prediction import evaluate, predict, sample_forward
from .training import (TrainingDiverged, default_toy_problem,
                       initialize_model, model_gradcheck, to_internal, train)

log = logging.getLogger("dgp_aep")

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Flat run configuration; JSON files use exactly these keys."""

    data: str = None
    target: str = None
    header: bool = True
    out: str = "."
    seed: int = 0
    threads: int = 1
    deterministic: bool = False
    layers: list = None
    inducing: list = field(default_factory=lambda: [50])
    epochs: int = 4000
    batch_size: int = 50
    learning_rate: float = 1e-3
    likelihood: str = "gaussian"
    test_fraction: float = 0.1
    split_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    checkpoint: str = None
    dataset_name: str = None

    def model_config(self, n_features):
        layers = self.layers or [n_features, 2, 1]
        if layers[0] != n_features:
            raise ConfigError(f"layers start with {layers[0]} but the data "
                              f"has {n_features} features")
        try:
            return ModelConfig(layers, self.inducing, self.likelihood,
                               self.epochs, self.batch_size,
                               self.learning_rate, self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _int_list(text):
    if isinstance(text, list):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got "
                          f"{text!r}") from None


# flag name -> RunConfig key
FLAG_KEYS = {"data": "data", "target": "target", "out": "out",
             "seed": "seed", "threads": "threads",
             "deterministic": "deterministic", "layers": "layers",
             "inducing": "inducing", "epochs": "epochs", "batch": "batch_size",
             "lr": "learning_rate", "likelihood": "likelihood",
             "checkpoint": "checkpoint", "test_fraction": "test_fraction",
             "splits": "split_seeds", "no_header": "header",
             "dataset_name": "dataset_name"}


def load_run_config(args):
    """Merge a JSON config file with command-line flags (flags win)."""
    known = {f.name for f in fields(RunConfig)}
    values = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: "
                              f"{exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is None or v is False:
            continue
        if flag == "no_header":
            v = False
        values[key] = v
    for key in ("layers", "inducing", "split_seeds"):
        if values.get(key) is not None:
            values[key] = _int_list(values[key])
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _require_file(path, what):
    if not path:
        raise ConfigError(f"{what} path is required")
    if not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _load_data(cfg):
    return dataio.load_csv(_require_file(cfg.data, "dataset"), cfg.target,
                           cfg.header)


def _load_model(cfg):
    return dataio.load_checkpoint(_require_file(cfg.checkpoint, "checkpoint"))


def _out_path(cfg, name):
    os.makedirs(cfg.out, exist_ok=True)
    return os.path.join(cfg.out, name)


def _check_dims(model, ds):
    want = model.layers[0].input_dim
    if ds.X.shape[1] != want:
        raise ConfigError(f"model expects {want} features, data has "
                          f"{ds.X.shape[1]}")


def cmd_train(cfg):
    ds = _load_data(cfg)
    mc = cfg.model_config(ds.X.shape[1])
    model = initialize_model(mc, ds.X, ds.y)
    hist_path = _out_path(cfg, "history.jsonl")
    with open(hist_path, "w", encoding="utf-8") as fh:
        def record(epoch, rec, _model):
            fh.write(json.dumps(rec) + "\n")
        model, _ = train(model, ds.X, ds.y, callbacks=[record],
                         threads=cfg.threads, deterministic=cfg.deterministic)
    ckpt = _out_path(cfg, "checkpoint.json")
    dataio.save_checkpoint(model, ckpt)
    print(f"checkpoint={ckpt} history={hist_path}")
    return 0


def cmd_evaluate(cfg):
    model = _load_model(cfg)
    ds = _load_data(cfg)
    _check_dims(model, ds)
    ev = evaluate(model, ds.X, ds.y)
    dataio.write_records(ev.records, _out_path(cfg, "predictions.csv"))
    print(ev.summary())
    return 0


def cmd_predict(cfg):
    model = _load_model(cfg)
    ds = _load_data(cfg)
    _check_dims(model, ds)
    pred = predict(model, ds.X)
    records = {f"x{d}": ds.X[:, d] for d in range(ds.X.shape[1])}
    records.update(pred_mean=pred.mean, pred_var=pred.variance)
    if pred.p_positive is not None:
        records["p_positive"] = pred.p_positive
    path = _out_path(cfg, "predict.csv")
    dataio.write_records(records, path)
    print(f"predictions={path}")
    return 0


def cmd_gradcheck(cfg, tolerance=1e-4):
    model, X, y = default_toy_problem(cfg.seed)
    Xs, ys = to_internal(model, X, y)
    report = model_gradcheck(model, Xs, ys, tolerance)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def cmd_sample(cfg, x, n):
    model = _load_model(cfg)
    try:
        point = np.array([float(v) for v in x.split(",")])
    except ValueError:
        raise ConfigError(f"--x must be comma-separated numbers: {x!r}") \
            from None
    if point.size != model.layers[0].input_dim:
        raise ConfigError(f"--x has {point.size} values, model expects "
                          f"{model.layers[0].input_dim}")
    s = sample_forward(model, point, n, np.random.default_rng(cfg.seed))
    path = _out_path(cfg, "samples.csv")
    dataio.write_records({"sample": s}, path)
    print(f"samples={path} mean={s.mean():.10g} var={s.var():.10g}")
    return 0


def cmd_benchmark(cfg):
    ds = _load_data(cfg)
    if len(cfg.split_seeds) < 2:
        raise ConfigError("benchmark needs at least 2 split seeds")
    mc = cfg.model_config(ds.X.shape[1])
    results = benchmark.run_benchmark(ds, mc, cfg.split_seeds,
                                      cfg.test_fraction, cfg.threads,
                                      cfg.deterministic)
    with open(_out_path(cfg, "splits.tsv"), "w", encoding="utf-8") as fh:
        fh.write("seed\tmll\trmse\terror\n")
        for r in results:
            fh.write(f"{r.seed}\t{r.mll!r}\t{r.rmse!r}\t{r.error or ''}\n")
    n_ok = sum(r.ok for r in results)
    if n_ok < 2:
        print(f"{n_ok} of {len(results)} splits succeeded; a standard error "
              "needs at least 2 (see splits.tsv)", file=sys.stderr)
        return 1
    name = cfg.dataset_name or os.path.splitext(os.path.basename(cfg.data))[0]
    row = benchmark.summarize(results, name, benchmark.method_tag(mc))
    table = "\t".join(benchmark.TABLE_HEADER) + "\n" + \
        benchmark.format_row(row) + "\n"
    with open(_out_path(cfg, "benchmark.tsv"), "w", encoding="utf-8") as fh:
        fh.write(table)
    sys.stdout.write(table)
    return 0


def cmd_plot(cfg, history):
    """Write prediction-vs-truth and training-history tables for plotting."""
    model = _load_model(cfg)
    ds = _load_data(cfg)
    _check_dims(model, ds)
    ev = evaluate(model, ds.X, ds.y)
    dataio.write_records(ev.records, _out_path(cfg, "plot_predictions.csv"))
    history = history or os.path.join(os.path.dirname(cfg.checkpoint),
                                      "history.jsonl")
    if os.path.isfile(history):
        with open(history, encoding="utf-8") as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        cols = {k: [r[k] for r in recs]
                for k in ("epoch", "objective", "wall_ms")}
        dataio.write_records(cols, _out_path(cfg, "plot_history.csv"))
    print(f"plot tables written to {cfg.out}")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run configuration")
    g.add_argument("--config", metavar="PATH",
                   help="flat JSON run config; flags override its values")
    g.add_argument("--data", metavar="PATH", help="CSV dataset")
    g.add_argument("--target", metavar="NAME",
                   help="target column name or index (default: last)")
    g.add_argument("--no-header", dest="no_header", action="store_true",
                   help="CSV has no header row")
    g.add_argument("--out", metavar="DIR", help="output directory")
    g.add_argument("--seed", type=int, help="random seed")
    g.add_argument("--threads", type=int,
                   help="threads for minibatch log Z evaluation")
    g.add_argument("--deterministic", action="store_true",
                   help="fixed-order reduction for bitwise reproducibility")
    g.add_argument("--layers", metavar="D,h1,...,1",
                   help="layer widths including input and output")
    g.add_argument("--inducing", metavar="M1,M2,...",
                   help="inducing points per layer (one value = all layers)")
    g.add_argument("--epochs", type=int, help="training epochs")
    g.add_argument("--batch", type=int, help="minibatch size")
    g.add_argument("--lr", type=float, help="Adam learning rate")
    g.add_argument("--likelihood", choices=("gaussian", "probit"))
    g.add_argument("--checkpoint", metavar="PATH", help="model checkpoint")

    p = argparse.ArgumentParser(
        prog="dgp-aep",
        description="Deep Gaussian process regression trained by "
                    "approximate expectation propagation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common],
                   help="train a model; writes checkpoint.json and "
                        "history.jsonl")
    sub.add_parser("evaluate", parents=[common],
                   help="print rmse/mll on --data and write predictions.csv")
    sub.add_parser("predict", parents=[common],
                   help="write predictive moments for --data")
    sub.add_parser("gradcheck", parents=[common],
                   help="finite-difference check on a small built-in model")
    s = sub.add_parser("sample", parents=[common],
                       help="forward-sample outputs at one input")
    s.add_argument("--x", required=True, metavar="V1,V2,...",
                   help="input point in original units")
    s.add_argument("--n", type=int, default=10000, help="number of samples")
    b = sub.add_parser("benchmark", parents=[common],
                       help="train/evaluate over seeded splits and "
                            "aggregate mean and standard error")
    b.add_argument("--splits", metavar="S1,S2,...", help="split seeds")
    b.add_argument("--test-fraction", dest="test_fraction", type=float)
    b.add_argument("--dataset-name", dest="dataset_name")
    pl = sub.add_parser("plot", parents=[common],
                        help="write prediction and history tables as CSV")
    pl.add_argument("--history", metavar="PATH",
                    help="history.jsonl (default: next to the checkpoint)")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else
                        logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_run_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "predict":
            return cmd_predict(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "sample":
            return cmd_sample(cfg, args.x, args.n)
        if args.command == "benchmark":
            return cmd_benchmark(cfg)
        return cmd_plot(cfg, args.history)
    except (ConfigError, dataio.DataError, dataio.CheckpointError,
            ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NumericalDegeneracyError,
            NotPositiveDefiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
