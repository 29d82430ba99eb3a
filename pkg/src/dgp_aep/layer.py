"""One FITC GP layer: A/B matrices, moment propagation and its reverse pass.

For an input ``h ~ N(m, diag(v))`` and a Gaussian ``N(mu, V)`` over the
inducing outputs of GP ``k`` the propagated moments are::

    mean_k = psi1_k @ A_k
    var_k  = noise + psi0_k + tr(B_k psi2_k) - mean_k**2

with ``A = Kuu^-1 mu`` and ``B = Kuu^-1 (V + mu mu^T) Kuu^-1 - Kuu^-1``.
"""

from dataclasses import dataclass

import numpy as np

from . import kernel
from .gauss import MomentGaussian, spd_inverse, symmetrize


class NumericalDegeneracyError(FloatingPointError):
    """Propagated variance came out non-positive."""


@dataclass
class ABMatrices:
    A: np.ndarray
    B: np.ndarray


@dataclass
class LayerCache:
    m_in: np.ndarray
    v_in: np.ndarray
    psi1: list
    psi2: list
    ab: ABMatrices


@dataclass
class PropagatedMoments:
    """Diagonal Gaussians for a batch of points, (batch, dim) each."""

    mean: np.ndarray
    variance: np.ndarray
    cache: LayerCache = None

    @classmethod
    def deterministic(cls, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return cls(X, np.zeros_like(X))


@dataclass
class LayerGrads:
    m_in: np.ndarray
    v_in: np.ndarray
    Z: np.ndarray
    log_lengthscales: np.ndarray
    log_signal_variance: np.ndarray
    log_noise_variance: float
    A: np.ndarray
    B: np.ndarray


def compute_ab(Kuu, g, Kuu_inv=None):
    """A/B matrices of one GP (or a stack of GPs)."""
    if Kuu_inv is None:
        Kuu_inv, _ = spd_inverse(Kuu, "Kuu")
        Kuu_inv = symmetrize(Kuu_inv)
    A = np.einsum("...ij,...j->...i", Kuu_inv, g.mean)
    S = g.cov + g.mean[..., :, None] * g.mean[..., None, :]
    B = symmetrize(Kuu_inv @ S @ Kuu_inv - Kuu_inv)
    return ABMatrices(A, B)


def compute_ab_vjp(g_A, g_B, Kuu_inv, g):
    """Pull gradients w.r.t. (A, B) back to (mean, cov, Kuu^-1).

    Returns ``(g_mean, g_cov, g_Kuu_inv)``; matrix gradients are symmetric.
    """
    g_B = symmetrize(g_B)
    mu = g.mean
    S = g.cov + mu[..., :, None] * mu[..., None, :]
    Gs = Kuu_inv @ g_B @ Kuu_inv
    g_mean = (np.einsum("...ij,...i->...j", Kuu_inv, g_A)
              + 2.0 * np.einsum("...ij,...j->...i", Gs, mu))
    g_Kinv = (g_A[..., :, None] * mu[..., None, :]
              + g_B @ Kuu_inv @ S + S @ Kuu_inv @ g_B - g_B)
    return g_mean, Gs, symmetrize(g_Kinv)


def propagate_layer(inp, layer, ab):
    """Push a batch of diagonal Gaussians through one layer.

    Inputs with exactly zero variance everywhere (the data layer) use the
    outer-product form ``psi2 = psi1 psi1^T``, which is the v = 0 limit of
    the general expression.
    """
    m, v = inp.mean, inp.variance
    if m.shape[1] != layer.input_dim:
        raise kernel.ContractError(
            f"layer expects {layer.input_dim}-dim inputs, got {m.shape[1]}")
    deterministic = not np.any(v)
    K = layer.n_out
    noise = layer.noise_variance
    mean = np.empty((m.shape[0], K))
    var = np.empty((m.shape[0], K))
    psi1s, psi2s = [], []
    for k in range(K):
        psi1, psi2 = kernel.psi_stats_batch(
            m, v, layer.Z[k], layer.log_lengthscales[k],
            layer.log_signal_variance[k], need_psi2=not deterministic)
        A, B = ab.A[k], ab.B[k]
        mk = psi1 @ A
        if deterministic:
            quad = np.einsum("bi,ij,bj->b", psi1, B, psi1)
        else:
            quad = psi2.reshape(psi2.shape[0], -1) @ B.ravel()
        mean[:, k] = mk
        var[:, k] = (noise + np.exp(layer.log_signal_variance[k]) + quad
                     - mk ** 2)
        psi1s.append(psi1)
        psi2s.append(psi2)
    if np.any(var <= 0) or not np.all(np.isfinite(var)):
        raise NumericalDegeneracyError(
            f"propagated variance fell to {np.nanmin(var):.3g}")
    return PropagatedMoments(mean, var, LayerCache(m, v, psi1s, psi2s, ab))


def backward_layer(out, layer, g_mean, g_var, need_input=True):
    """Reverse pass through :func:`propagate_layer`.

    ``g_mean`` and ``g_var`` are (batch, K) gradients of a scalar w.r.t. the
    layer outputs. A and B are treated as leaves; their gradients are
    summed over the batch and returned for the caller to fold into the
    inducing-output Gaussians once per minibatch.
    """
    cache = out.cache
    if cache is None:
        raise kernel.ContractError("backward_layer needs a forward cache")
    m, v, ab = cache.m_in, cache.v_in, cache.ab
    K, M, D = layer.Z.shape
    g_m_in = np.zeros_like(m) if need_input else None
    g_v_in = np.zeros_like(v) if need_input else None
    g_Z = np.zeros_like(layer.Z)
    g_ls = np.zeros_like(layer.log_lengthscales)
    g_sf2 = np.zeros_like(layer.log_signal_variance)
    g_A = np.zeros((K, M))
    g_B = np.zeros((K, M, M))
    g_noise = layer.noise_variance * np.sum(g_var)
    for k in range(K):
        a, b = g_mean[:, k], g_var[:, k]
        psi1, psi2 = cache.psi1[k], cache.psi2[k]
        A, B = ab.A[k], ab.B[k]
        a_eff = a - 2.0 * b * out.mean[:, k]
        g_A[k] = a_eff @ psi1
        G1 = a_eff[:, None] * A[None, :]
        if psi2 is None:
            g_B[k] = psi1.T @ (b[:, None] * psi1)
            G1 = G1 + 2.0 * b[:, None] * (psi1 @ B)
            G2 = None
        else:
            g_B[k] = (b @ psi2.reshape(psi2.shape[0], -1)).reshape(M, M)
            G2 = (b, B)
        gm, gv, gz, gl, gs = kernel.psi_vjp(
            G1, G2, m, v, layer.Z[k], layer.log_lengthscales[k],
            layer.log_signal_variance[k], psi1, psi2,
            need_input=need_input and psi2 is not None)
        g_Z[k] = gz
        g_ls[k] = gl
        g_sf2[k] = gs + np.exp(layer.log_signal_variance[k]) * np.sum(b)
        if need_input:
            if gm is None:
                raise kernel.ContractError(
                    "input gradients are unavailable for deterministic "
                    "inputs; pass need_input=False")
            g_m_in += gm
            g_v_in += gv
    return LayerGrads(g_m_in, g_v_in, g_Z, g_ls, g_sf2, g_noise, g_A,
                      symmetrize(g_B))


@dataclass
class LayerState:
    """Per-minibatch quantities of one layer that do not depend on the data."""

    Kuu: np.ndarray
    Kuu_inv: np.ndarray
    logdet_Kuu: np.ndarray
    posterior: MomentGaussian
    cavity: MomentGaussian
    post_eta: np.ndarray
    cav_eta: np.ndarray
    ab: ABMatrices
    phi_post: np.ndarray
    phi_cav: np.ndarray
