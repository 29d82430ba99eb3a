"""Repeated-split benchmarking and mean / standard-error aggregation."""

import logging
from dataclasses import dataclass

import numpy as np

from .dataio import split
from .prediction import evaluate
from .training import initialize_model, train

log = logging.getLogger(__name__)


def mean_stderr(values):
    """Mean and standard error ``std(ddof=1) / sqrt(n)`` of a sequence."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("standard errors need at least two values")
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


@dataclass
class SplitResult:
    seed: int
    rmse: float = float("nan")
    mll: float = float("nan")
    error: str = None

    @property
    def ok(self):
        return self.error is None


def run_split(dataset, config, split_seed, test_fraction=0.1, threads=1,
              deterministic=True):
    """Train on one seeded split and return the test metrics."""
    tr, te = split(dataset, test_fraction, split_seed)
    model = initialize_model(config, tr.X, tr.y)
    model, _ = train(model, tr.X, tr.y, threads=threads,
                     deterministic=deterministic)
    ev = evaluate(model, te.X, te.y)
    return SplitResult(split_seed, ev.rmse, ev.mll)


def run_benchmark(dataset, config, split_seeds, test_fraction=0.1,
                  threads=1, deterministic=True, runner=run_split):
    """Run every split; failures are recorded and the rest proceed."""
    results = []
    for s in split_seeds:
        try:
            results.append(runner(dataset, config, s, test_fraction, threads,
                                  deterministic))
        except (ArithmeticError, ValueError, np.linalg.LinAlgError,
                RuntimeError) as exc:
            log.warning("split %s failed: %s", s, exc)
            results.append(SplitResult(s, error=str(exc)))
    return results


@dataclass
class TableRow:
    dataset: str
    method: str
    n_splits: int
    mll_mean: float
    mll_stderr: float
    rmse_mean: float
    rmse_stderr: float


TABLE_HEADER = ("dataset", "method", "n_splits", "mll_mean", "mll_stderr",
                "rmse_mean", "rmse_stderr")


def summarize(results, dataset_name, method):
    ok = [r for r in results if r.ok]
    if len(ok) < 2:
        raise ValueError(f"{len(ok)} successful splits; at least 2 are "
                         f"needed for a standard error")
    mll = mean_stderr([r.mll for r in ok])
    rmse = mean_stderr([r.rmse for r in ok])
    return TableRow(dataset_name, method, len(ok), *mll, *rmse)


def method_tag(config):
    """``DGP-<hidden dims>-<M>`` or ``GP-<M>`` for a single layer."""
    hidden = config.layer_dims[1:-1]
    M = config.inducing_counts[0]
    if not hidden:
        return f"GP-{M}"
    return "DGP-" + "x".join(str(h) for h in hidden) + f"-{M}"


def format_row(row):
    """One tab-separated table line, columns as in ``TABLE_HEADER``."""
    return (f"{row.dataset}\t{row.method}\t{row.n_splits}\t"
            f"{row.mll_mean:.4f}\t{row.mll_stderr:.4f}\t"
            f"{row.rmse_mean:.4f}\t{row.rmse_stderr:.4f}")
