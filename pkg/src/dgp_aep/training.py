"""Model initialisation, Adam optimisation and gradient checking."""

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.spatial.distance import pdist

from . import kernel
from .energy import aep_objective
from .gauss import TiedFactor, symmetrize
from .model import (PARAM_GROUPS, DgpModel, LayerParams, ModelConfig,
                    Standardization, param_group)

log = logging.getLogger(__name__)

HIDDEN_NOISE_INIT = 1e-4
UPPER_LENGTHSCALE = 2.0
MEDIAN_SUBSAMPLE = 1000
KMEANS_ITERS = 20


class TrainingDiverged(RuntimeError):
    """Training hit repeated non-finite objectives.

    ``model`` holds the last parameters that gave a finite objective.
    """

    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history or []


class NonFiniteGradient(FloatingPointError):
    pass


def median_lengthscales(X, rng, max_points=MEDIAN_SUBSAMPLE, floor=1e-3):
    """Median Euclidean distance between datapoints, one copy per dimension.

    Per-dimension medians collapse to zero on mostly-constant discrete
    columns, so the joint distance is used for every ARD lengthscale.
    """
    X = np.asarray(X, dtype=float)
    if X.shape[0] > max_points:
        X = X[rng.choice(X.shape[0], max_points, replace=False)]
    if X.shape[0] < 2:
        return np.ones(X.shape[1])
    med = np.median(pdist(X))
    return np.full(X.shape[1], max(med, floor))


def kmeans_centers(X, M, rng):
    """k-means centres with one re-seed on empty clusters, then de-duplication."""
    X = np.asarray(X, dtype=float)
    # degenerate data makes kmeans2 warn; the outcome is logged below instead
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(2):
            seed = int(rng.integers(2 ** 31))
            try:
                C, _ = kmeans2(X, M, iter=KMEANS_ITERS, minit="++",
                               missing="raise", seed=seed)
                break
            except Exception:  # scipy raises ClusterError on empty clusters
                continue
        else:
            C, _ = kmeans2(X, M, iter=KMEANS_ITERS, minit="++",
                           missing="warn", seed=seed)
            log.warning("k-means left empty clusters for M=%d; jittering "
                        "duplicate centres", M)
    # perturb exact duplicates so Kuu stays well conditioned
    _, first = np.unique(C, axis=0, return_index=True)
    dup = np.setdiff1d(np.arange(M), first)
    if dup.size:
        C[dup] += 1e-3 * rng.standard_normal(C[dup].shape)
    return C


def init_factor(K, M, rng, eta_var=1e-2, root_var=None):
    """Small random site: eta1 ~ N(0, eta_var), root ~ N(0, 1e-4 / sqrt(M))."""
    if root_var is None:
        root_var = 1e-4 / np.sqrt(M)
    eta_std, root_std = np.sqrt(eta_var), np.sqrt(root_var)
    return TiedFactor(eta_std * rng.standard_normal((K, M)),
                      np.tril(root_std * rng.standard_normal((K, M, M))))


def conjugate_factor(model, X, y):
    """Tied factor that makes a single-layer Gaussian model's posterior exact.

    Each datapoint contributes the FITC likelihood site
    ``N(y_n; c_n^T u, s_n)`` with ``c_n = Kuu^-1 k_n``; the tied factor is
    their average in natural parameters, so ``g(u)^N`` equals the product.
    ``X``/``y`` are in internal units.
    """
    if model.n_layers != 1 or model.likelihood != "gaussian":
        raise ValueError("the conjugate factor needs L = 1 and a Gaussian "
                         "likelihood")
    layer = model.layers[0]
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    N = X.shape[0]
    eta, roots = [], []
    for k in range(layer.n_out):
        Kuu = kernel.kuu(layer.Z[k], layer.log_lengthscales[k],
                         layer.log_signal_variance[k])
        Kx = kernel.rbf(X, layer.Z[k], layer.log_lengthscales[k],
                        layer.log_signal_variance[k])
        C = np.linalg.solve(Kuu, Kx.T).T
        s = (layer.noise_variance + np.exp(layer.log_signal_variance[k])
             - np.sum(C * Kx, axis=1))
        eta.append(C.T @ (y / s) / N)
        lam = symmetrize(C.T @ (C / s[:, None]) / N)
        roots.append(np.linalg.cholesky(lam))
    return TiedFactor(np.stack(eta), np.stack(roots))


def initialize_model(config, X, y, rng=None, standardize=True):
    """Build a model from raw training data.

    Inputs (and, for Gaussian likelihoods, outputs) are standardised with
    statistics of ``X``/``y``; the statistics are stored on the model.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    N, D = X.shape
    if D != config.layer_dims[0]:
        raise ValueError(f"data has {D} features, config expects "
                         f"{config.layer_dims[0]}")
    if N < config.inducing_counts[0]:
        raise ValueError(f"N = {N} is smaller than M = "
                         f"{config.inducing_counts[0]}")
    gaussian = config.likelihood == "gaussian"
    if standardize:
        norm = Standardization.fit(X, y, scale_y=gaussian)
    else:
        norm = Standardization.identity(D)
    Xs = norm.transform_x(X)
    ys = norm.transform_y(y)

    layers, factors = [], []
    for l in range(config.n_layers):
        Din, K = config.layer_dims[l], config.layer_dims[l + 1]
        M = config.inducing_counts[l]
        if l == 0:
            ls = np.log(median_lengthscales(Xs, rng))
            log_ls = np.tile(ls, (K, 1))
            Z = np.stack([kmeans_centers(Xs, M, rng) for _ in range(K)])
        else:
            log_ls = np.full((K, Din), np.log(UPPER_LENGTHSCALE))
            Z = rng.uniform(-1.0, 1.0, size=(K, M, Din))
        if l == config.n_layers - 1:
            noise = 0.1 * float(np.var(ys)) if gaussian else 0.1
        else:
            noise = HIDDEN_NOISE_INIT
        layers.append(LayerParams(Z, log_ls, np.zeros(K), np.log(noise)))
        factors.append(init_factor(K, M, rng))
    return DgpModel(layers, factors, config, norm, n_data=N)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999,
              eps=1e-8, ascent=True):
    """One in-place Adam update of a dict of arrays.

    With ``ascent`` the step increases the objective whose gradient is
    ``grads``.
    """
    state.t += 1
    t = state.t
    sign = 1.0 if ascent else -1.0
    for name, g in grads.items():
        g = np.asarray(g, dtype=float)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        params[name] += sign * lr * mhat / (np.sqrt(vhat) + eps)
    return params, state


def batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def to_internal(model, X, y):
    norm = model.normalization
    return norm.transform_x(X), norm.transform_y(y)


def train(model, X, y, config=None, callbacks=(), threads=1,
          deterministic=True, rng=None, max_strikes=3):
    """Maximise the minibatch energy with Adam.

    ``X``/``y`` are in original units. Returns ``(model, history)`` where
    history holds one record per epoch: ``epoch``, ``objective`` (mean
    minibatch estimate of F) and ``wall_ms`` (elapsed since the start).
    Callbacks are called as ``cb(epoch, record, model)``.
    """
    config = model.config if config is None else config
    rng = np.random.default_rng(config.seed + 1) if rng is None else rng
    Xs, ys = to_internal(model, X, y)
    N = Xs.shape[0]
    model.n_data = N
    bs = min(config.batch_size, N)
    state = AdamState()
    history = []
    last_good = model.copy()
    strikes = 0
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for idx in batches(N, bs, rng):
            try:
                energy, grads = aep_objective(model, Xs[idx], ys[idx], N,
                                              threads, deterministic)
                if not np.isfinite(energy.total):
                    raise FloatingPointError("non-finite objective")
                params = model.params()
                adam_step(params, grads, state, config.learning_rate)
                model.project()
            except (FloatingPointError, np.linalg.LinAlgError) as exc:
                strikes += 1
                log.warning("epoch %d: %s (strike %d)", epoch, exc, strikes)
                model = last_good.copy()
                if strikes >= max_strikes:
                    raise TrainingDiverged(
                        f"{max_strikes} consecutive numerical failures: "
                        f"{exc}", last_good, history) from exc
                continue
            strikes = 0
            last_good = model.copy()
            total += energy.total
            count += 1
        rec = {"epoch": epoch,
               "objective": total / count if count else float("nan"),
               "wall_ms": 1000.0 * (time.perf_counter() - t0)}
        history.append(rec)
        for cb in callbacks:
            cb(epoch, rec, model)
    model.history = list(model.history) + history
    return model, history


@dataclass
class GradcheckReport:
    tolerance: float
    errors: dict
    passed: bool

    def lines(self):
        for group, err in sorted(self.errors.items()):
            status = "PASS" if err <= self.tolerance else "FAIL"
            yield f"{status} {group:<22s} max_rel_err={err:.3e}"


def relative_error(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradcheck(objective, params, tolerance=1e-4, step=1e-5, group_of=None,
              grad_hook=None, floor=1e-6):
    """Compare analytic gradients with central finite differences.

    ``objective(params) -> (value, grads)`` with dicts of arrays; ``params``
    is mutated during the check and restored afterwards. Errors are
    ``|a - n| / max(|a|, |n|, floor)`` maximised within each group.
    ``grad_hook`` may alter the analytic gradients (used to plant faults).
    """
    group_of = group_of or (lambda name: name)
    _, grads = objective(params)
    if grad_hook is not None:
        grads = grad_hook(grads)
    errors = {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        worst = 0.0
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            fp = objective(params)[0]
            p[idx] = old - step
            fm = objective(params)[0]
            p[idx] = old
            fd = (fp - fm) / (2.0 * step)
            worst = max(worst, float(relative_error(g[idx], fd, floor)))
        grp = group_of(name)
        errors[grp] = max(errors.get(grp, 0.0), worst)
    return GradcheckReport(tolerance, errors,
                           all(e <= tolerance for e in errors.values()))


def model_gradcheck(model, X, y, tolerance=1e-4, step=1e-5, grad_hook=None):
    """Finite-difference check of the full objective, grouped by parameter kind.

    ``X``/``y`` are in internal units; the strictly-upper entries of the
    factor roots are not parameters and are skipped.
    """
    N = X.shape[0]
    work = model.copy()
    live = work.params()
    flat = {}
    for name, arr in live.items():
        if name.endswith("lambda1_root"):
            il = np.tril_indices(arr.shape[-1])
            flat[name] = arr[(Ellipsis,) + il].copy()
        else:
            flat[name] = arr.copy()

    def unpack(values):
        out = {}
        for name, val in values.items():
            if name.endswith("lambda1_root"):
                full = np.zeros_like(live[name])
                il = np.tril_indices(full.shape[-1])
                full[(Ellipsis,) + il] = val
                out[name] = full
            else:
                out[name] = val
        return out

    def objective(values):
        work.set_params(unpack(values))
        energy, grads = aep_objective(work, X, y, N)
        packed = {}
        for name, g in grads.items():
            if name.endswith("lambda1_root"):
                il = np.tril_indices(g.shape[-1])
                packed[name] = g[(Ellipsis,) + il]
            else:
                packed[name] = g
        return energy.total, packed

    assert set(param_group(n) for n in flat) <= set(PARAM_GROUPS)
    return gradcheck(objective, flat, tolerance, step, param_group, grad_hook)


def default_toy_problem(seed=0, N=20, D=2, hidden=2, M=5):
    """Small 2-layer problem used by the gradient-check command and tests."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, size=(N, D))
    y = np.sin(X.sum(axis=1)) + 0.1 * rng.standard_normal(N)
    config = ModelConfig([D, hidden, 1], [M, M], seed=seed)
    model = initialize_model(config, X, y, rng)
    # move away from the near-zero factor init so every group gets signal
    for fac in model.factors:
        fac.eta1[...] = 0.3 * rng.standard_normal(fac.eta1.shape)
        fac.lambda1_root[...] = np.tril(
            0.3 * rng.standard_normal(fac.lambda1_root.shape))
    for layer in model.layers:
        layer.log_noise_variance[...] = np.log(0.05)
    return model, X, y
