"""RBF-ARD kernel and its expectations under diagonal-Gaussian inputs.

The expectations are the usual psi statistics::

    psi0 = E[k(h, h)]
    psi1[j] = E[k(h, z_j)]
    psi2[j, j'] = E[k(h, z_j) k(h, z_j')]

for ``h ~ N(m, diag(v))``. Batched helpers (``psi_stats_batch`` and
``psi_vjp``) take a leading batch axis over input points and are what the
layer code uses; ``psi_statistics`` / ``psi_gradients`` are the
single-point public surface.
"""

from dataclasses import dataclass

import numpy as np

JITTER = 1e-6


class ContractError(ValueError):
    """Raised when an argument violates a documented precondition."""


@dataclass
class KernelHyper:
    """Log-parameterised hyperparameters of one RBF-ARD kernel."""

    log_lengthscales: np.ndarray
    log_signal_variance: float

    def __post_init__(self):
        self.log_lengthscales = np.atleast_1d(
            np.asarray(self.log_lengthscales, dtype=float))
        self.log_signal_variance = float(self.log_signal_variance)
        if not (np.all(np.isfinite(np.exp(self.log_lengthscales)))
                and np.isfinite(np.exp(self.log_signal_variance))):
            raise ContractError("kernel hyperparameters must be finite")

    @property
    def lengthscales(self):
        return np.exp(self.log_lengthscales)

    @property
    def signal_variance(self):
        return float(np.exp(self.log_signal_variance))

    @property
    def input_dim(self):
        return self.log_lengthscales.shape[0]


@dataclass
class PsiStats:
    psi0: float
    psi1: np.ndarray
    psi2: np.ndarray


def _check_dims(X, hyper):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != hyper.input_dim:
        raise ContractError(
            f"input has {X.shape[1]} columns but kernel expects "
            f"{hyper.input_dim}")
    return X


def kernel_matrix(X, X2, hyper):
    """Evaluate ``k(X_i, X2_j) = sf2 exp(-0.5 sum_d (x_d - x'_d)^2 / l_d^2)``."""
    X = _check_dims(X, hyper)
    X2 = _check_dims(X2, hyper)
    return rbf(X, X2, hyper.log_lengthscales, hyper.log_signal_variance)


def rbf(X, X2, log_ls, log_sf2):
    ls = np.exp(log_ls)
    diff = (X[:, None, :] - X2[None, :, :]) / ls
    return np.exp(log_sf2 - 0.5 * np.sum(diff ** 2, axis=-1))


def kuu(Z, log_ls, log_sf2):
    """Inducing covariance with the relative jitter added to its diagonal."""
    K = rbf(Z, Z, log_ls, log_sf2)
    K[np.diag_indices_from(K)] += JITTER * np.exp(log_sf2)
    return K


def kuu_vjp(G, K, Z, log_ls):
    """Pull a gradient w.r.t. ``kuu(Z, ...)`` back to ``(Z, log_ls, log_sf2)``.

    ``G`` must be symmetric. ``K`` is the jittered matrix returned by ``kuu``.
    """
    lam = np.exp(2.0 * log_ls)
    g_log_sf2 = np.sum(G * K)
    W = G * K
    # jitter sits only on the diagonal where all distances vanish, so it
    # contributes nothing to the Z and lengthscale gradients
    diff = Z[:, None, :] - Z[None, :, :]
    g_Z = -2.0 * np.einsum("ij,ijd->id", W, diff) / lam
    g_log_ls = np.einsum("ij,ijd->d", W, diff ** 2) / lam
    return g_Z, g_log_ls, g_log_sf2


def _sqdist_weighted(m, Z, w):
    """sum_d w_bd (m_bd - z_jd)^2 for all (b, j), by expansion."""
    out = (np.sum(w * m * m, axis=1)[:, None] - 2.0 * (w * m) @ Z.T
           + w @ (Z * Z).T)
    return np.maximum(out, 0.0)


def psi_stats_batch(m, v, Z, log_ls, log_sf2, need_psi2=True):
    """Psi statistics for a batch of input distributions.

    Parameters
    ----------
    m, v : (B, D) arrays
        Input means and variances.
    Z : (M, D) array
    log_ls : (D,) array
    log_sf2 : float

    Returns
    -------
    psi1 : (B, M) array
    psi2 : (B, M, M) array or None
    """
    lam = np.exp(2.0 * log_ls)
    a1 = 1.0 / (lam + v)
    log_psi1 = (log_sf2 - 0.5 * np.sum(np.log1p(v / lam), axis=-1)[:, None]
                - 0.5 * _sqdist_weighted(m, Z, a1))
    psi1 = np.exp(log_psi1)
    if not need_psi2:
        return psi1, None
    a2 = 1.0 / (lam + 2.0 * v)
    zs = Z / np.sqrt(lam)
    zz = np.sum(zs * zs, axis=1)
    dzterm = np.maximum(0.25 * (zz[:, None] + zz[None, :]) - 0.5 * zs @ zs.T, 0.0)
    # sum_d a (m - (z_j + z_k)/2)^2 via
    # (m - zbar)^2 = 0.5 (m-z_j)^2 + 0.5 (m-z_k)^2 - 0.25 (z_j - z_k)^2
    u = 0.5 * _sqdist_weighted(m, Z, a2) - 0.25 * (a2 @ (Z * Z).T)
    log_psi2 = np.matmul(a2[:, None, :] * Z[None], Z.T)
    log_psi2 *= 0.5
    log_psi2 += u[:, :, None]
    log_psi2 += u[:, None, :]
    np.maximum(log_psi2, 0.0, out=log_psi2)
    log_psi2 += dzterm[None]
    np.negative(log_psi2, out=log_psi2)
    log_psi2 += (2.0 * log_sf2 - 0.5 * np.sum(np.log1p(2.0 * v / lam),
                                               axis=-1))[:, None, None]
    np.exp(log_psi2, out=log_psi2)
    return psi1, log_psi2


def psi_vjp(G1, G2, m, v, Z, log_ls, log_sf2, psi1, psi2, need_input=True):
    """Vector-Jacobian product of the batched psi statistics.

    ``G1`` (B, M) and ``G2`` (B, M, M) are cotangents for ``psi1`` and
    ``psi2``; ``G2`` may be None, or a pair ``(b, S)`` standing for the
    rank-structured cotangent ``b[:, None, None] * S`` with ``S`` symmetric.
    ``psi0 = sf2`` is handled by the caller.

    Returns ``(g_m, g_v, g_Z, g_log_ls, g_log_sf2)``; the input gradients
    are None when ``need_input`` is false.
    """
    lam = np.exp(2.0 * log_ls)
    a1 = 1.0 / (lam + v)
    W1 = G1 * psi1
    r = W1.sum(axis=1)                       # (B,)
    WZ = W1 @ Z                              # (B, D)
    g_Z = W1.T @ (m * a1) - Z * (W1.T @ a1)
    # sum_j W1 (m - z_j)^2 per (b, d)
    sqsum = m * m * r[:, None] - 2.0 * m * WZ + W1 @ (Z * Z)
    g_lam = np.sum(-0.5 * r[:, None] * (a1 - 1.0 / lam)
                   + 0.5 * sqsum * a1 * a1, axis=0)
    g_log_sf2 = np.sum(W1)
    g_m = g_v = None
    if need_input:
        g_m = -(m * r[:, None] - WZ) * a1
        g_v = -0.5 * r[:, None] * a1 + 0.5 * sqsum * a1 * a1
    if G2 is not None:
        if isinstance(G2, tuple):
            b, S2 = G2
            W2 = psi2 * S2[None]
            W2 *= b[:, None, None]
        else:
            W2 = 0.5 * (G2 + np.swapaxes(G2, 1, 2)) * psi2
        a2 = 1.0 / (lam + 2.0 * v)
        S = W2.sum(axis=(1, 2))              # (B,)
        R = W2.sum(axis=2)                   # (B, M)
        Ws = W2.sum(axis=0)                  # (M, M)
        W2Z = np.matmul(W2, Z)               # (B, M, D)
        RZ = R @ Z                           # (B, D)
        g_log_sf2 += 2.0 * S.sum()
        ws_row = Ws.sum(axis=1)
        # d/dz_j of -(z_j - z_k)^2/(4 lam) summed with symmetric weights (x2)
        g_Z += 2.0 * (-(ws_row[:, None] * Z - Ws @ Z) / (2.0 * lam)
                      + R.T @ (m * a2) - 0.5 * Z * (R.T @ a2)
                      - 0.5 * np.einsum("bjd,bd->jd", W2Z, a2))
        # sum_jk W2 (m - zbar)^2 per (b, d)
        zbar1 = RZ
        zbar2 = 0.5 * R @ (Z * Z) + 0.5 * np.einsum("bjd,jd->bd", W2Z, Z)
        mzsum = m * m * S[:, None] - 2.0 * m * zbar1 + zbar2
        dzsum = 2.0 * (ws_row @ (Z * Z)) - 2.0 * np.sum(Z * (Ws @ Z), axis=0)
        g_lam += (np.sum(-0.5 * S[:, None] * (a2 - 1.0 / lam)
                         + mzsum * a2 * a2, axis=0)
                  + dzsum / (4.0 * lam * lam))
        if need_input:
            g_m += -2.0 * (m * S[:, None] - RZ) * a2
            g_v += -S[:, None] * a2 + 2.0 * mzsum * a2 * a2
    g_log_ls = 2.0 * lam * g_lam
    return g_m, g_v, g_Z, g_log_ls, g_log_sf2


def _validate_input(m, v, Z, hyper):
    m = np.atleast_1d(np.asarray(m, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    Z = _check_dims(Z, hyper)
    if m.shape != (hyper.input_dim,) or v.shape != m.shape:
        raise ContractError("input mean/variance must have one entry per "
                            "input dimension")
    if np.any(v < 0):
        raise ContractError("input variance must be non-negative")
    return m, v, Z


def psi_statistics(m, v, Z, hyper):
    """Closed-form psi statistics of one input distribution ``N(m, diag(v))``."""
    m, v, Z = _validate_input(m, v, Z, hyper)
    psi1, psi2 = psi_stats_batch(m[None], v[None], Z, hyper.log_lengthscales,
                                 hyper.log_signal_variance)
    return PsiStats(hyper.signal_variance, psi1[0], psi2[0])


def psi_gradients(m, v, Z, hyper):
    """Full Jacobians of psi0, psi1 and psi2.

    Returns a nested dict ``grads[out][arg]`` with ``out`` in
    ``("psi0", "psi1", "psi2")`` and ``arg`` in ``("m", "v", "Z",
    "log_lengthscales", "log_signal_variance")``. Each array has shape
    ``out.shape + arg.shape``.
    """
    m, v, Z = _validate_input(m, v, Z, hyper)
    M, D = Z.shape
    log_ls, log_sf2 = hyper.log_lengthscales, hyper.log_signal_variance
    psi1, psi2 = psi_stats_batch(m[None], v[None], Z, log_ls, log_sf2)

    shapes = {"m": (D,), "v": (D,), "Z": (M, D), "log_lengthscales": (D,),
              "log_signal_variance": ()}
    out = {
        "psi0": {a: np.zeros(s) for a, s in shapes.items()},
        "psi1": {a: np.zeros((M,) + s) for a, s in shapes.items()},
        "psi2": {a: np.zeros((M, M) + s) for a, s in shapes.items()},
    }
    out["psi0"]["log_signal_variance"] = np.array(np.exp(log_sf2))

    def store(name, idx, res):
        for a, g in zip(("m", "v", "Z", "log_lengthscales",
                         "log_signal_variance"), res):
            g = np.asarray(g)
            if a in ("m", "v"):
                g = g[0]
            out[name][a][idx] = g

    for j in range(M):
        G1 = np.zeros((1, M))
        G1[0, j] = 1.0
        store("psi1", j, psi_vjp(G1, None, m[None], v[None], Z, log_ls,
                                 log_sf2, psi1, psi2))
    zero1 = np.zeros((1, M))
    for j in range(M):
        for k in range(M):
            G2 = np.zeros((1, M, M))
            G2[0, j, k] = 1.0
            store("psi2", (j, k), psi_vjp(zero1, G2, m[None], v[None], Z,
                                          log_ls, log_sf2, psi1, psi2))
    return out
