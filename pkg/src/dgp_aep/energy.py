"""Tied-factor EP energy, per-datapoint log Z and their gradients.

The approximate log marginal likelihood maximised during training is::

    F = -(N - 1) phi(post) + N phi(cavity) - phi(prior) + sum_n log Z_n

summed over every GP in the network, where ``phi`` is the Gaussian
log-normaliser (without the 2*pi constant) and ``log Z_n`` is obtained by
propagating moments from the inputs to the likelihood. A minibatch of
size ``|B|`` replaces the sum by ``N / |B|`` times the batch sum.
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from . import kernel
from .gauss import (NaturalGaussian, MomentGaussian, TiedFactor,
                    log_normalizer_natural_grads, moment_to_natural,
                    moment_to_natural_vjp, root_vjp, spd_inverse, symmetrize,
                    tilted_natural)
from .layer import (LayerState, PropagatedMoments, backward_layer, compute_ab,
                    compute_ab_vjp, propagate_layer)

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class EnergyBreakdown:
    phi_post: float
    phi_cav: float
    phi_prior: float
    logz_sum: float
    total: float


def logz_gaussian(m, v, y):
    """``log N(y; m, v)``."""
    m, v, y = np.asarray(m, float), np.asarray(v, float), np.asarray(y, float)
    if np.any(v <= 0):
        raise kernel.ContractError("predictive variance must be positive")
    return -0.5 * (LOG_2PI + np.log(v)) - 0.5 * (y - m) ** 2 / v


def logz_gaussian_grads(m, v, y):
    r = y - m
    return r / v, -0.5 / v + 0.5 * r ** 2 / v ** 2


def _check_labels(y):
    y = np.asarray(y, float)
    if not np.all((y == 1.0) | (y == -1.0)):
        raise kernel.ContractError("probit labels must be -1 or +1")
    return y


def logz_probit(m, v, y):
    """``log Phi(y m / sqrt(v + 1))``."""
    y = _check_labels(y)
    v = np.asarray(v, float)
    if np.any(v < 0):
        raise kernel.ContractError("latent variance must be non-negative")
    return log_ndtr(y * np.asarray(m, float) / np.sqrt(v + 1.0))


def logz_probit_grads(m, v, y):
    s = np.sqrt(v + 1.0)
    z = y * m / s
    # inverse Mills ratio phi(z) / Phi(z), stable in both tails
    r = np.exp(-0.5 * z ** 2 - 0.5 * LOG_2PI - log_ndtr(z))
    return r * y / s, -0.5 * r * z / (v + 1.0)


LOGZ = {
    "gaussian": (logz_gaussian, logz_gaussian_grads),
    "probit": (logz_probit, logz_probit_grads),
}


def monte_carlo_logz(m, v, y, likelihood, n_samples, rng):
    """Monte Carlo estimate of ``E_{N(f; m, v)}[p(y | f)]``.

    ``likelihood(f, y)`` returns densities. Returns ``(estimate, stderr)``
    of Z itself (not its log), useful as an oracle for closed forms.
    """
    f = m + np.sqrt(v) * rng.standard_normal(n_samples)
    p = likelihood(f, y)
    return float(p.mean()), float(p.std(ddof=1) / np.sqrt(n_samples))


def _phi_natural(lam, eta, label):
    """Log-normaliser from natural parameters, plus the moment form."""
    V, logdet_lam = spd_inverse(lam, label)
    V = symmetrize(V)
    mean = np.einsum("...ij,...j->...i", V, eta)
    phi = -0.5 * logdet_lam + 0.5 * np.einsum("...i,...i->...", eta, mean)
    return phi, MomentGaussian(mean, V)


def layer_state(layer, factor, N, source="cavity", label="layer"):
    """Data-independent quantities of one layer for a given dataset size.

    ``source`` selects which Gaussian over the inducing outputs builds A/B:
    the cavity (training, log Z) or the posterior (prediction).
    """
    K = layer.n_out
    Kuu = np.stack([kernel.kuu(layer.Z[k], layer.log_lengthscales[k],
                               layer.log_signal_variance[k])
                    for k in range(K)])
    Kinv, logdet = spd_inverse(Kuu, f"{label} Kuu")
    Kinv = symmetrize(Kinv)
    post_nat = tilted_natural(Kinv, factor, N)
    cav_nat = tilted_natural(Kinv, factor, N - 1)
    phi_post, post = _phi_natural(post_nat.lam, post_nat.eta,
                                  f"{label} posterior precision")
    phi_cav, cav = _phi_natural(cav_nat.lam, cav_nat.eta,
                                f"{label} cavity precision")
    g = cav if source == "cavity" else post
    ab = compute_ab(Kuu, g, Kinv)
    return LayerState(Kuu, Kinv, logdet, post, cav, post_nat.eta,
                      cav_nat.eta, ab, phi_post, phi_cav)


def prepare(model, N=None, source="cavity"):
    N = model.n_data if N is None else N
    return [layer_state(layer, fac, N, source, f"layer {l}")
            for l, (layer, fac) in enumerate(zip(model.layers, model.factors))]


def forward(model, states, X):
    """Propagate deterministic inputs through every layer; returns all outputs."""
    outs = []
    cur = PropagatedMoments.deterministic(X)
    for layer, st in zip(model.layers, states):
        cur = propagate_layer(cur, layer, st.ab)
        outs.append(cur)
    return outs


@dataclass
class _DataGrads:
    logz_sum: float
    layer_grads: list


def _data_pass(model, states, X, y, scale):
    """Forward + backward over a chunk of datapoints, A/B kept as leaves."""
    outs = forward(model, states, X)
    logz_fn, grad_fn = LOGZ[model.likelihood]
    mL, vL = outs[-1].mean[:, 0], outs[-1].variance[:, 0]
    logz = logz_fn(mL, vL, y)
    gm, gv = grad_fn(mL, vL, y)
    gm = (scale * gm)[:, None]
    gv = (scale * gv)[:, None]
    grads = [None] * model.n_layers
    for l in range(model.n_layers - 1, -1, -1):
        lg = backward_layer(outs[l], model.layers[l], gm, gv,
                            need_input=l > 0)
        grads[l] = lg
        gm, gv = lg.m_in, lg.v_in
    return _DataGrads(float(np.sum(logz)), grads)


def _reduce(parts):
    total = parts[0]
    for p in parts[1:]:
        total.logz_sum += p.logz_sum
        for a, b in zip(total.layer_grads, p.layer_grads):
            a.Z = a.Z + b.Z
            a.log_lengthscales = a.log_lengthscales + b.log_lengthscales
            a.log_signal_variance = a.log_signal_variance + b.log_signal_variance
            a.log_noise_variance = a.log_noise_variance + b.log_noise_variance
            a.A = a.A + b.A
            a.B = a.B + b.B
    return total


def _run_data(model, states, X, y, scale, threads=1, deterministic=True):
    n = X.shape[0]
    if threads <= 1 or n < 2 * threads:
        return _data_pass(model, states, X, y, scale)
    bounds = np.linspace(0, n, threads + 1).astype(int)
    chunks = [(bounds[i], bounds[i + 1]) for i in range(threads)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_data_pass, model, states, X[a:b], y[a:b],
                               scale) for a, b in chunks]
        if deterministic:
            parts = [f.result() for f in futures]
        else:
            parts = [f.result() for f in as_completed(futures)]
    return _reduce(parts)


def _fold(model, states, data, N, include_phi):
    """Combine per-batch A/B gradients with the log-normaliser terms."""
    grads = {}
    phi_post = phi_cav = phi_prior = 0.0
    for l, (layer, fac, st, lg) in enumerate(zip(
            model.layers, model.factors, states, data.layer_grads)):
        g_mc, g_Vc, g_Kinv = compute_ab_vjp(lg.A, lg.B, st.Kuu_inv, st.cavity)
        g_eta_c, g_lam_c = moment_to_natural_vjp(g_mc, g_Vc, st.cavity,
                                                 st.cav_eta)
        g_eta_p = np.zeros_like(g_eta_c)
        g_lam_p = np.zeros_like(g_lam_c)
        g_Kuu = np.zeros_like(st.Kuu)
        if include_phi:
            pe, pl = log_normalizer_natural_grads(st.posterior)
            ce, cl = log_normalizer_natural_grads(st.cavity)
            g_eta_p = g_eta_p - (N - 1) * pe
            g_lam_p = g_lam_p - (N - 1) * pl
            g_eta_c = g_eta_c + N * ce
            g_lam_c = g_lam_c + N * cl
            g_Kuu = g_Kuu - 0.5 * st.Kuu_inv
            phi_post += float(np.sum(st.phi_post))
            phi_cav += float(np.sum(st.phi_cav))
            phi_prior += float(0.5 * np.sum(st.logdet_Kuu))
        g_Kinv = g_Kinv + g_lam_p + g_lam_c
        g_lambda1 = N * g_lam_p + (N - 1) * g_lam_c
        g_eta1 = N * g_eta_p + (N - 1) * g_eta_c
        g_Kuu = symmetrize(g_Kuu - st.Kuu_inv @ g_Kinv @ st.Kuu_inv)
        g_Z = lg.Z.copy()
        g_ls = lg.log_lengthscales.copy()
        g_sf2 = lg.log_signal_variance.copy()
        for k in range(layer.n_out):
            gz, gl, gs = kernel.kuu_vjp(g_Kuu[k], st.Kuu[k], layer.Z[k],
                                        layer.log_lengthscales[k])
            g_Z[k] += gz
            g_ls[k] += gl
            g_sf2[k] += gs
        grads[f"layer{l}.eta1"] = g_eta1
        grads[f"layer{l}.lambda1_root"] = root_vjp(g_lambda1, fac.lambda1_root)
        grads[f"layer{l}.log_lengthscales"] = g_ls
        grads[f"layer{l}.log_signal_variance"] = g_sf2
        grads[f"layer{l}.log_noise_variance"] = np.asarray(
            lg.log_noise_variance)
        grads[f"layer{l}.Z"] = g_Z
    return grads, (phi_post, phi_cav, phi_prior)


def datapoint_logz(model, x, y, N=None):
    """log Z of one datapoint under the cavity, with gradients of all trainables."""
    N = model.n_data if N is None else N
    X = np.atleast_2d(np.asarray(x, float))
    y = np.atleast_1d(np.asarray(y, float))
    states = prepare(model, N, "cavity")
    data = _data_pass(model, states, X, y, 1.0)
    grads, _ = _fold(model, states, data, N, include_phi=False)
    return data.logz_sum, grads


def aep_objective(model, X, y, N, threads=1, deterministic=True):
    """Minibatch estimate of F and its gradient for the batch ``(X, y)``.

    ``X`` and ``y`` are in the model's internal (standardised) units and
    ``N`` is the full training-set size. With ``len(X) == N`` this is the
    full objective.
    """
    X = np.atleast_2d(np.asarray(X, float))
    y = np.atleast_1d(np.asarray(y, float))
    nb = X.shape[0]
    if not 1 <= nb <= N:
        raise kernel.ContractError(f"batch size {nb} not in [1, {N}]")
    states = prepare(model, N, "cavity")
    scale = N / nb
    data = _run_data(model, states, X, y, scale, threads, deterministic)
    grads, (pp, pc, pr) = _fold(model, states, data, N, include_phi=True)
    logz = scale * data.logz_sum
    total = -(N - 1) * pp + N * pc - pr + logz
    return EnergyBreakdown(pp, pc, pr, logz, total), grads


def minibatch_objective(model, X, y, batch_size, rng, N=None, **kw):
    """Draw a batch without replacement and evaluate :func:`aep_objective`."""
    N = X.shape[0] if N is None else N
    idx = rng.choice(X.shape[0], size=batch_size, replace=False)
    return aep_objective(model, X[idx], y[idx], N, **kw)


@dataclass
class SepResult:
    model: object
    accepted: bool
    damping: float
    message: str = ""


def _psd_root(lam, tol=1e-10):
    """Lower-triangular ``R`` with ``R R^T = lam`` for PSD ``lam``, else None."""
    lam = symmetrize(lam)
    w, Q = np.linalg.eigh(lam)
    scale = max(1.0, float(np.max(np.abs(w))))
    if w.min() < -tol * scale:
        return None
    S = Q * np.sqrt(np.clip(w, 0.0, None))
    # S S^T = lam; QR of S^T gives S^T = Q' R' hence lam = R'^T R'
    _, Rr = np.linalg.qr(S.T)
    return Rr.T


def sep_update(model, x, y, N=None, damping=0.1, max_halvings=5):
    """One damped stochastic-EP update of every tied factor from one datapoint.

    The moment-matched posterior is obtained from the cavity and the
    gradients of log Z w.r.t. the cavity moments; the implied new site is
    blended into the tied factor, ``theta1 <- (1 - b) theta1 + b theta_new``.
    Returns a :class:`SepResult`; the input model is not modified.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must be in (0, 1]")
    N = model.n_data if N is None else N
    X = np.atleast_2d(np.asarray(x, float))
    y = np.atleast_1d(np.asarray(y, float))
    states = prepare(model, N, "cavity")
    data = _data_pass(model, states, X, y, 1.0)

    sites = []
    for l, (st, lg) in enumerate(zip(states, data.layer_grads)):
        g_m, g_V, _ = compute_ab_vjp(lg.A, lg.B, st.Kuu_inv, st.cavity)
        Vc, mc = st.cavity.cov, st.cavity.mean
        mean = mc + np.einsum("kij,kj->ki", Vc, g_m)
        outer = g_m[:, :, None] * g_m[:, None, :]
        cov = symmetrize(Vc - Vc @ (outer - 2.0 * g_V) @ Vc)
        try:
            new = moment_to_natural(MomentGaussian(mean, cov))
        except np.linalg.LinAlgError:
            return SepResult(model, False, damping,
                             f"moment-matched covariance of layer {l} is "
                             "not positive definite; update skipped")
        cav_lam = st.Kuu_inv + (N - 1) * model.factors[l].lambda1
        sites.append(NaturalGaussian(new.eta - st.cav_eta, new.lam - cav_lam))

    beta = damping
    for _ in range(max_halvings + 1):
        new_factors = []
        for l, (fac, site) in enumerate(zip(model.factors, sites)):
            eta1 = (1 - beta) * fac.eta1 + beta * site.eta
            lam1 = (1 - beta) * fac.lambda1 + beta * site.lam
            roots = [_psd_root(lam1[k]) for k in range(lam1.shape[0])]
            if any(r is None for r in roots):
                break
            new_factors.append(TiedFactor(eta1, np.stack(roots)))
        if len(new_factors) == len(sites):
            out = model.copy()
            out.factors = new_factors
            try:
                prepare(out, N, "cavity")
            except np.linalg.LinAlgError:
                pass
            else:
                return SepResult(out, True, beta)
        beta *= 0.5
    log.warning("SEP update rejected after %d halvings", max_halvings)
    return SepResult(model, False, beta * 2.0,
                     "damped site leaves an invalid factor or cavity")
