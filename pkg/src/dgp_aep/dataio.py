"""CSV datasets, train/test splitting and JSON checkpoints."""

import csv
import hashlib
import json
import os
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from .gauss import TiedFactor
from .model import DgpModel, LayerParams, ModelConfig, Standardization

FORMAT_VERSION = 1
CONSTANT_STD = 1e-8


class DataError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, targets and the standardisation fitted on training rows."""

    X: np.ndarray
    y: np.ndarray
    feature_names: tuple
    target_name: str = "y"
    stats: Standardization = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != y.size:
            raise DataError("X must be (N, D) with one target per row")
        if X.shape[0] < 2:
            raise DataError("a dataset needs at least 2 rows")
        bad = ~(np.all(np.isfinite(X), axis=1) & np.isfinite(y))
        if np.any(bad):
            raise DataError(f"non-finite values in rows "
                            f"{np.flatnonzero(bad).tolist()}")
        if len(self.feature_names) != X.shape[1]:
            raise DataError("one feature name per column is required")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if self.stats is None:
            object.__setattr__(self, "stats", Standardization.fit(X, y))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def constant_columns(self):
        """Indices of columns whose std was floored during standardisation."""
        return np.flatnonzero(self.X.std(axis=0) < CONSTANT_STD).tolist()

    def subset(self, idx, stats=None):
        return replace(self, X=self.X[idx], y=self.y[idx], stats=stats)

    def standardized(self):
        return self.stats.transform_x(self.X), self.stats.transform_y(self.y)


def load_csv(path, target=None, header=True):
    """Read a comma-separated numeric table.

    ``target`` is a column name (with a header) or an integer index; by
    default the last column. Errors name the offending line (1-based, as
    in the file) or data row (0-based).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh))
                if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: file is empty")
    if header:
        _, names = rows[0]
        names = [n.strip() for n in names]
        rows = rows[1:]
    else:
        names = [f"x{j}" for j in range(len(rows[0][1]))]
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(names)
    values = np.empty((len(rows), width))
    for r, (line, cells) in enumerate(rows):
        if len(cells) != width:
            raise DataError(f"{path}: line {line} has {len(cells)} fields, "
                            f"expected {width}")
        for j, cell in enumerate(cells):
            try:
                values[r, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: line {line}, column {j + 1}: "
                                f"cannot parse {cell!r}") from None
    bad = np.flatnonzero(~np.all(np.isfinite(values), axis=1))
    if bad.size:
        raise DataError(f"{path}: non-finite values in rows {bad.tolist()} "
                        f"(lines {[rows[b][0] for b in bad]})")
    t = _target_index(target, names, path)
    keep = [j for j in range(width) if j != t]
    return Dataset(values[:, keep], values[:, t],
                   tuple(names[j] for j in keep), names[t])


def _target_index(target, names, path):
    if target is None:
        return len(names) - 1
    if isinstance(target, (int, np.integer)):
        if not -len(names) <= target < len(names):
            raise DataError(f"{path}: target index {target} out of range")
        return int(target) % len(names)
    if str(target).lstrip("-").isdigit() and target not in names:
        return _target_index(int(target), names, path)
    if target not in names:
        raise DataError(f"{path}: target column {target!r} not found; "
                        f"columns are {names}")
    return names.index(target)


def write_csv(dataset, path, header=True):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(list(dataset.feature_names) + [dataset.target_name])
        for x, y in zip(dataset.X, dataset.y):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y))])


def write_records(records, path):
    """Write a dict of equal-length columns as CSV."""
    names = list(records)
    cols = [np.asarray(records[n]).ravel() for n in names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])


def split_indices(n, test_fraction=0.1, seed=0):
    """Sorted (train, test) row indices of a seeded random partition."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must lie in (0, 1)")
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n - n_test < 2:
        raise DataError(f"cannot split {n} rows with fraction "
                        f"{test_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def split(dataset, test_fraction=0.1, seed=0):
    """Seeded random train/test partition.

    Standardisation statistics are refitted on the training rows and
    attached to both halves.
    """
    train_idx, test_idx = split_indices(dataset.n, test_fraction, seed)
    stats = Standardization.fit(dataset.X[train_idx], dataset.y[train_idx])
    return dataset.subset(train_idx, stats), dataset.subset(test_idx, stats)


def bundled_path(name):
    """Path of a CSV shipped with the package (``toy.csv``, ``boston.csv``)."""
    return str(resources.files("dgp_aep") / "data" / name)


# -- checkpoints -------------------------------------------------------------

def _enc(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape),
            "data": [format(float(v), ".17g") for v in a.ravel()]}


def _dec(obj):
    try:
        data = np.array([float(s) for s in obj["data"]], dtype=float)
        return data.reshape(obj["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed array entry: {exc}") from exc


def history_digest(history):
    objs = [format(float(r["objective"]), ".17g") for r in history]
    return {"epochs": len(objs),
            "final_objective": objs[-1] if objs else None,
            "sha256": hashlib.sha256(",".join(objs).encode()).hexdigest()}


def checkpoint_dict(model):
    norm = model.normalization
    digest = (history_digest(model.history) if model.history
              else model.history_digest or history_digest([]))
    return {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "n_data": int(model.n_data),
        "normalization": {"x_mean": _enc(norm.x_mean),
                          "x_std": _enc(norm.x_std),
                          "y_mean": format(float(norm.y_mean), ".17g"),
                          "y_std": format(float(norm.y_std), ".17g")},
        "layers": [{"Z": _enc(l.Z),
                    "log_lengthscales": _enc(l.log_lengthscales),
                    "log_signal_variance": _enc(l.log_signal_variance),
                    "log_noise_variance": _enc(l.log_noise_variance)}
                   for l in model.layers],
        "factors": [{"eta1": _enc(f.eta1),
                     "lambda1_root": _enc(f.lambda1_root)}
                    for f in model.factors],
        "history_digest": digest,
    }


def dumps_checkpoint(model):
    return json.dumps(checkpoint_dict(model), indent=1, sort_keys=True) + "\n"


def save_checkpoint(model, path):
    """Write atomically: a failed write never leaves a partial file behind."""
    text = dumps_checkpoint(model)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def model_from_dict(doc):
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointError("not a checkpoint document")
    if doc["format_version"] != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported checkpoint version {doc['format_version']!r}; "
            f"this build reads version {FORMAT_VERSION}")
    try:
        config = ModelConfig(**doc["config"])
        nd = doc["normalization"]
        norm = Standardization(_dec(nd["x_mean"]), _dec(nd["x_std"]),
                               float(nd["y_mean"]), float(nd["y_std"]))
        layers = [LayerParams(_dec(l["Z"]), _dec(l["log_lengthscales"]),
                              _dec(l["log_signal_variance"]),
                              _dec(l["log_noise_variance"]))
                  for l in doc["layers"]]
        factors = [TiedFactor(_dec(f["eta1"]), _dec(f["lambda1_root"]))
                   for f in doc["factors"]]
        return DgpModel(layers, factors, config, norm, int(doc["n_data"]),
                        history_digest=doc["history_digest"])
    except CheckpointError:
        raise
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"inconsistent checkpoint: {exc}") from exc


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint "
                              f"({exc})") from exc
    return model_from_dict(doc)
