"""Predictive distributions, forward sampling and evaluation metrics."""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import kernel
from .energy import LOG_2PI, forward, logz_gaussian, logz_probit, prepare


@dataclass
class PredictiveGaussian:
    """Per-point predictive moments.

    For Gaussian likelihoods ``mean``/``variance`` are in original output
    units and include the output noise. For probit models they describe
    the latent function (plus last-layer noise) and ``p_positive`` holds
    ``P(y = +1)``.
    """

    mean: np.ndarray
    variance: np.ndarray
    p_positive: np.ndarray = None


def _as_matrix(model, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :] if X.size == model.layers[0].input_dim else X[:, None]
    if X.shape[1] != model.layers[0].input_dim:
        raise kernel.ContractError(
            f"model expects {model.layers[0].input_dim} features, got "
            f"{X.shape[1]}")
    return X


def latent_moments(model, X, chunk=2000):
    """Moment-matched output of the last layer in internal units."""
    X = _as_matrix(model, X)
    states = prepare(model, source="posterior")
    Xs = model.normalization.transform_x(X)
    means, variances = [], []
    for start in range(0, Xs.shape[0], chunk):
        out = forward(model, states, Xs[start:start + chunk])[-1]
        means.append(out.mean[:, 0])
        variances.append(out.variance[:, 0])
    return np.concatenate(means), np.concatenate(variances)


def predict(model, X):
    """Gaussian predictive distribution at each row of ``X`` (original units).

    The inducing outputs follow the approximate posterior built from all
    ``N`` tied factors.
    """
    m, v = latent_moments(model, X)
    if model.likelihood == "probit":
        return PredictiveGaussian(m, v, ndtr(m / np.sqrt(v + 1.0)))
    mean, var = model.normalization.inverse_y(m, v)
    return PredictiveGaussian(mean, var)


def sample_forward(model, x, n_samples, rng, chunk=100_000):
    """Draw outputs at a single input by ancestral sampling.

    Per sample every GP draws its inducing outputs from the posterior, then
    each layer's output is sampled from the FITC conditional given the
    sampled input. Samples are returned in original units (latent units for
    probit models).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = _as_matrix(model, x)
    if x.shape[0] != 1:
        raise kernel.ContractError("sample_forward takes a single input")
    xs = model.normalization.transform_x(x)
    states = prepare(model, source="posterior")
    chols = [np.linalg.cholesky(st.posterior.cov) for st in states]
    out = np.empty(n_samples)
    for start in range(0, n_samples, chunk):
        n = min(chunk, n_samples - start)
        h = np.repeat(xs, n, axis=0)
        for layer, st, L in zip(model.layers, states, chols):
            nxt = np.empty((n, layer.n_out))
            for k in range(layer.n_out):
                eps = rng.standard_normal((n, layer.n_inducing))
                u = st.posterior.mean[k] + eps @ L[k].T
                Kx = kernel.rbf(h, layer.Z[k], layer.log_lengthscales[k],
                                layer.log_signal_variance[k])
                C = Kx @ st.Kuu_inv[k]
                mean = np.sum(C * u, axis=1)
                var = (np.exp(layer.log_signal_variance[k])
                       - np.sum(C * Kx, axis=1) + layer.noise_variance)
                nxt[:, k] = mean + np.sqrt(np.maximum(var, 0.0)) * \
                    rng.standard_normal(n)
            h = nxt
        out[start:start + n] = h[:, 0]
    if model.likelihood == "probit":
        return out
    return model.normalization.inverse_y(out, 0.0)[0]


@dataclass
class Evaluation:
    rmse: float
    mll: float
    records: dict
    accuracy: float = None

    def summary(self):
        line = f"rmse={self.rmse:.10g} mll={self.mll:.10g}"
        if self.accuracy is not None:
            line += f" accuracy={self.accuracy:.10g}"
        return line


def evaluate(model, X, y):
    """Test metrics in original units.

    Regression: RMSE of the predictive mean and mean log density of
    ``y`` under the predictive Gaussian. Probit: RMSE of ``P(y=+1)``
    against 0/1 targets, mean log predictive probability and accuracy at
    threshold 0.5.
    """
    X = _as_matrix(model, X)
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0 or X.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty test set")
    if X.shape[0] != y.size:
        raise ValueError("X and y have different lengths")
    pred = predict(model, X)
    if model.likelihood == "probit":
        log_lik = logz_probit(pred.mean, pred.variance, y)
        p = pred.p_positive
        err = p - (y > 0)
        acc = float(np.mean((p > 0.5) == (y > 0)))
        records = {"y": y, "pred_mean": p, "pred_var": p * (1.0 - p),
                   "log_lik": log_lik}
        return Evaluation(float(np.sqrt(np.mean(err ** 2))),
                          float(np.mean(log_lik)), _with_x(X, records), acc)
    log_lik = logz_gaussian(pred.mean, pred.variance, y)
    err = pred.mean - y
    records = {"y": y, "pred_mean": pred.mean, "pred_var": pred.variance,
               "log_lik": log_lik}
    return Evaluation(float(np.sqrt(np.mean(err ** 2))),
                      float(np.mean(log_lik)), _with_x(X, records))


def _with_x(X, records):
    out = {f"x{d}": X[:, d] for d in range(X.shape[1])}
    out.update(records)
    return out

