"""Gaussian algebra over inducing outputs.

All functions accept stacked arrays: a leading axis (or several) indexes
independent Gaussians, e.g. the GPs of one layer.
"""

from dataclasses import dataclass

import numpy as np


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """A matrix that must be positive definite failed Cholesky."""


@dataclass
class NaturalGaussian:
    eta: np.ndarray
    lam: np.ndarray


@dataclass
class MomentGaussian:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class TiedFactor:
    """Natural parameters of the shared data factor g(u).

    The precision contribution is stored through a lower-triangular root so
    that ``lambda1 = root @ root.T`` is positive semidefinite for any value
    of the unconstrained entries.
    """

    eta1: np.ndarray
    lambda1_root: np.ndarray

    @property
    def lambda1(self):
        R = np.tril(self.lambda1_root)
        return R @ np.swapaxes(R, -1, -2)

    @classmethod
    def zeros(cls, M, batch=()):
        return cls(np.zeros(batch + (M,)), np.zeros(batch + (M, M)))


def cholesky(A, label="matrix"):
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"{label} is not positive definite") from exc


def spd_inverse(A, label="matrix"):
    """Inverse and log-determinant of a (stack of) SPD matrices."""
    L = cholesky(A, label)
    eye = np.broadcast_to(np.eye(A.shape[-1]), A.shape)
    Linv = np.linalg.solve(L, eye)
    inv = np.swapaxes(Linv, -1, -2) @ Linv
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return inv, logdet


def symmetrize(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def log_normalizer(g, label="gaussian"):
    """``0.5 log|V| + 0.5 m^T V^{-1} m`` (no 2*pi constant)."""
    Vinv, logdet = spd_inverse(g.cov, label)
    quad = np.einsum("...i,...ij,...j->...", g.mean, Vinv, g.mean)
    return 0.5 * logdet + 0.5 * quad


def natural_to_moment(n, label="precision"):
    V, _ = spd_inverse(n.lam, label)
    V = symmetrize(V)
    return MomentGaussian(np.einsum("...ij,...j->...i", V, n.eta), V)


def moment_to_natural(g, label="covariance"):
    P, _ = spd_inverse(g.cov, label)
    P = symmetrize(P)
    return NaturalGaussian(np.einsum("...ij,...j->...i", P, g.mean), P)


def tilted_natural(Kuu_inv, factor, count):
    """Natural parameters of ``p(u) g(u)^count`` for a zero-mean prior."""
    return NaturalGaussian(count * factor.eta1,
                           Kuu_inv + count * factor.lambda1)


def build_posterior_and_cavity(Kuu, factor, N, label="gp"):
    """Posterior ``p(u) g(u)^N`` and cavity ``p(u) g(u)^(N-1)`` in moment form."""
    if N < 1:
        raise ValueError("N must be at least 1")
    Kinv, _ = spd_inverse(Kuu, f"{label} Kuu")
    Kinv = symmetrize(Kinv)
    post = natural_to_moment(tilted_natural(Kinv, factor, N),
                             f"{label} posterior precision")
    cav = natural_to_moment(tilted_natural(Kinv, factor, N - 1),
                            f"{label} cavity precision")
    return post, cav


def log_normalizer_natural_grads(g):
    """Gradients of the log-normaliser w.r.t. (eta, lambda), given moments.

    ``d phi / d eta = m`` and ``d phi / d lambda = -0.5 (V + m m^T)``.
    """
    mm = g.mean[..., :, None] * g.mean[..., None, :]
    return g.mean, -0.5 * (g.cov + mm)


def moment_to_natural_vjp(g_mean, g_cov, moments, eta):
    """Pull gradients w.r.t. (mean, cov) back to natural parameters.

    ``moments`` is the Gaussian obtained from natural parameters whose
    precision-times-mean vector is ``eta``.
    """
    V = moments.cov
    g_eta = np.einsum("...ij,...j->...i", V, g_mean)
    GV = g_cov + g_mean[..., :, None] * eta[..., None, :]
    g_lam = -V @ GV @ V
    return g_eta, symmetrize(g_lam)


def root_vjp(g_lambda1, root):
    """Gradient w.r.t. the lower-triangular root given one w.r.t. ``R R^T``."""
    G = g_lambda1 + np.swapaxes(g_lambda1, -1, -2)
    return np.tril(G @ np.tril(root))
