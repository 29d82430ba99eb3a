import numpy as np
import pytest

from dgp_aep import kernel
from dgp_aep.gauss import MomentGaussian
from dgp_aep.layer import (ABMatrices, PropagatedMoments, backward_layer,
                           compute_ab, propagate_layer)
from dgp_aep.model import LayerParams
from oracles import central_difference, naive_ab, rel_err


def random_layer(rng, K=2, M=4, D=2, noise=0.05):
    return LayerParams(rng.normal(size=(K, M, D)), rng.normal(0, 0.3, (K, D)),
                       rng.normal(0, 0.3, K), np.log(noise))


def random_ab(rng, layer, scale=0.3):
    K, M = layer.n_out, layer.n_inducing
    A = rng.normal(0, scale, (K, M))
    B = rng.normal(0, scale, (K, M, M))
    return ABMatrices(A, 0.5 * (B + np.swapaxes(B, 1, 2)))


def kuu_stack(layer):
    return np.stack([kernel.kuu(layer.Z[k], layer.log_lengthscales[k],
                                layer.log_signal_variance[k])
                     for k in range(layer.n_out)])


def random_input(rng, B=5, D=2):
    return PropagatedMoments(rng.normal(size=(B, D)),
                             rng.uniform(0.05, 0.8, (B, D)))


def test_ab_prior_cavity_vanishes():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(4, 2))
    K = kernel.kuu(Z, np.zeros(2), 0.0)
    ab = compute_ab(K, MomentGaussian(np.zeros(4), K))
    np.testing.assert_allclose(ab.A, 0.0, atol=1e-12)
    np.testing.assert_allclose(ab.B, 0.0, atol=1e-7)


def test_ab_scalar_case():
    ab = compute_ab(np.array([[2.0]]), MomentGaussian(np.ones(1),
                                                      np.ones((1, 1))))
    assert ab.A[0] == pytest.approx(0.5, rel=1e-15)
    assert ab.B[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_ab_matches_naive_formula():
    rng = np.random.default_rng(1)
    Q = rng.normal(size=(4, 4))
    Kuu, V = Q @ Q.T + np.eye(4), np.cov(rng.normal(size=(4, 20)))
    m = rng.normal(size=4)
    ab = compute_ab(Kuu, MomentGaussian(m, V))
    A, B = naive_ab(Kuu, m, V)
    np.testing.assert_allclose(ab.A, A, rtol=1e-10)
    np.testing.assert_allclose(ab.B, B, rtol=1e-9, atol=1e-12)
    np.testing.assert_array_equal(ab.B, ab.B.T)


def test_prior_cavity_gives_prior_predictive():
    rng = np.random.default_rng(2)
    layer = random_layer(rng)
    ab = ABMatrices(np.zeros((2, 4)), np.zeros((2, 4, 4)))
    out = propagate_layer(random_input(rng), layer, ab)
    np.testing.assert_array_equal(out.mean, 0.0)
    expected = layer.noise_variance + np.exp(layer.log_signal_variance)
    np.testing.assert_allclose(out.variance, np.broadcast_to(expected, (5, 2)),
                               rtol=1e-15)


def test_deterministic_input_matches_fitc_formulas():
    rng = np.random.default_rng(3)
    layer = random_layer(rng)
    Kuu = kuu_stack(layer)
    mean = rng.normal(size=(2, 4))
    cov = np.stack([np.cov(rng.normal(size=(4, 10))) + 0.1 * np.eye(4)
                    for _ in range(2)])
    ab = compute_ab(Kuu, MomentGaussian(mean, cov))
    X = rng.normal(size=(6, 2))
    out = propagate_layer(PropagatedMoments.deterministic(X), layer, ab)
    for k in range(2):
        Kx = kernel.rbf(X, layer.Z[k], layer.log_lengthscales[k],
                        layer.log_signal_variance[k])
        C = np.linalg.solve(Kuu[k], Kx.T).T
        m1 = C @ mean[k]
        v1 = (layer.noise_variance + np.exp(layer.log_signal_variance[k])
              - np.sum(C * Kx, 1) + np.einsum("bi,ij,bj->b", C, cov[k], C))
        np.testing.assert_allclose(out.mean[:, k], m1, rtol=1e-9)
        np.testing.assert_allclose(out.variance[:, k], v1, rtol=1e-9)


def test_outer_product_path_equals_general_formula():
    rng = np.random.default_rng(4)
    layer = random_layer(rng)
    ab = random_ab(rng, layer)
    X = rng.normal(size=(5, 2))
    fast = propagate_layer(PropagatedMoments.deterministic(X), layer, ab)
    for k in range(2):
        psi1, psi2 = kernel.psi_stats_batch(
            X, np.zeros_like(X), layer.Z[k], layer.log_lengthscales[k],
            layer.log_signal_variance[k], need_psi2=True)
        m = psi1 @ ab.A[k]
        v = (layer.noise_variance + np.exp(layer.log_signal_variance[k])
             + np.einsum("bij,ij->b", psi2, ab.B[k]) - m ** 2)
        np.testing.assert_allclose(fast.mean[:, k], m, rtol=1e-13)
        np.testing.assert_allclose(fast.variance[:, k], v, rtol=1e-12)


def test_mixed_zero_variance_uses_general_path():
    rng = np.random.default_rng(5)
    layer = random_layer(rng)
    ab = random_ab(rng, layer, 0.1)
    inp = random_input(rng)
    inp.variance[0] = 0.0
    out = propagate_layer(inp, layer, ab)
    assert out.cache.psi2[0] is not None


def test_matches_monte_carlo():
    rng = np.random.default_rng(6)
    layer = random_layer(rng, K=1, M=3, D=2)
    Kuu = kuu_stack(layer)
    mean = rng.normal(0, 0.5, (1, 3))
    cov = 0.2 * Kuu
    ab = compute_ab(Kuu, MomentGaussian(mean, cov))
    inp = PropagatedMoments(np.array([[0.3, -0.4]]), np.array([[0.3, 0.6]]))
    out = propagate_layer(inp, layer, ab)
    n = 400_000
    h = inp.mean + np.sqrt(inp.variance) * rng.standard_normal((n, 2))
    u = mean[0] + rng.standard_normal((n, 3)) @ np.linalg.cholesky(cov[0]).T
    Kx = kernel.rbf(h, layer.Z[0], layer.log_lengthscales[0],
                    layer.log_signal_variance[0])
    C = np.linalg.solve(Kuu[0], Kx.T).T
    cm = np.sum(C * u, 1)
    cv = (np.exp(layer.log_signal_variance[0]) - np.sum(C * Kx, 1)
          + layer.noise_variance)
    f = cm + np.sqrt(cv) * rng.standard_normal(n)
    se_m = f.std() / np.sqrt(n)
    c = f - f.mean()
    se_v = np.sqrt((np.mean(c ** 4) - np.mean(c ** 2) ** 2) / n)
    assert abs(out.mean[0, 0] - f.mean()) < 5 * se_m
    assert abs(out.variance[0, 0] - f.var()) < 5 * se_v


def test_variance_bounded_below_by_noise():
    rng = np.random.default_rng(7)
    for _ in range(20):
        layer = random_layer(rng)
        Kuu = kuu_stack(layer)
        cov = np.stack([0.5 * Kuu[k] for k in range(2)])
        ab = compute_ab(Kuu, MomentGaussian(rng.normal(size=(2, 4)), cov))
        out = propagate_layer(random_input(rng, B=10), layer, ab)
        assert np.all(out.variance >= layer.noise_variance - 1e-12)


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(8)
    layer, inp = random_layer(rng), random_input(rng)
    ab = random_ab(rng, layer, 0.1)
    a = propagate_layer(inp, layer, ab)
    b = propagate_layer(inp, layer, ab)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.variance, b.variance)


def test_wrong_input_dimension():
    rng = np.random.default_rng(9)
    layer = random_layer(rng)
    with pytest.raises(kernel.ContractError):
        propagate_layer(random_input(rng, D=3), layer, random_ab(rng, layer))


def test_backward_requires_cache():
    rng = np.random.default_rng(10)
    layer = random_layer(rng)
    with pytest.raises(kernel.ContractError):
        backward_layer(PropagatedMoments(np.zeros((1, 2)), np.ones((1, 2))),
                       layer, np.zeros((1, 2)), np.zeros((1, 2)))


def test_backward_zero_cotangent():
    rng = np.random.default_rng(11)
    layer, inp = random_layer(rng), random_input(rng)
    out = propagate_layer(inp, layer, random_ab(rng, layer, 0.1))
    g = backward_layer(out, layer, np.zeros((5, 2)), np.zeros((5, 2)))
    for arr in (g.m_in, g.v_in, g.Z, g.log_lengthscales,
                g.log_signal_variance, g.A, g.B):
        assert np.all(arr == 0)
    assert g.log_noise_variance == 0


def test_backward_ab_partials_one_by_one():
    rng = np.random.default_rng(12)
    layer = random_layer(rng, K=1, M=1, D=1)
    ab = ABMatrices(np.array([[0.7]]), np.array([[[0.2]]]))
    inp = PropagatedMoments(np.array([[0.1]]), np.array([[0.4]]))
    out = propagate_layer(inp, layer, ab)
    psi1, psi2 = out.cache.psi1[0], out.cache.psi2[0]
    gm = backward_layer(out, layer, np.ones((1, 1)), np.zeros((1, 1)))
    assert gm.A[0, 0] == pytest.approx(psi1[0, 0], rel=1e-14)
    # d v / d B = psi2 when the mean cotangent is zero and m^2 is held apart:
    # v = ... + B psi2 - (psi1 A)^2, so dv/dA = -2 m psi1
    gv = backward_layer(out, layer, np.zeros((1, 1)), np.ones((1, 1)))
    assert gv.B[0, 0, 0] == pytest.approx(psi2[0, 0, 0], rel=1e-14)
    assert gv.A[0, 0] == pytest.approx(-2 * out.mean[0, 0] * psi1[0, 0],
                                       rel=1e-14)


@pytest.mark.parametrize("deterministic", [False, True])
def test_backward_matches_finite_differences(deterministic):
    rng = np.random.default_rng(13)
    layer = random_layer(rng)
    ab = random_ab(rng, layer, 0.2)
    inp = random_input(rng)
    if deterministic:
        inp = PropagatedMoments.deterministic(inp.mean)
    a, b = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))

    def scalar(Z=layer.Z, ls=layer.log_lengthscales,
               sf=layer.log_signal_variance, nz=layer.log_noise_variance,
               A=ab.A, B=ab.B, m=inp.mean, v=inp.variance):
        lay = LayerParams(Z, ls, sf, nz)
        o = propagate_layer(PropagatedMoments(m, v), lay, ABMatrices(A, B))
        return np.sum(a * o.mean + b * o.variance)

    out = propagate_layer(inp, layer, ab)
    g = backward_layer(out, layer, a, b, need_input=not deterministic)
    checks = {"Z": g.Z, "ls": g.log_lengthscales, "sf": g.log_signal_variance,
              "nz": np.array(g.log_noise_variance), "A": g.A}
    if not deterministic:
        checks.update(m=g.m_in, v=g.v_in)
    base = {"Z": layer.Z, "ls": layer.log_lengthscales,
            "sf": layer.log_signal_variance,
            "nz": np.array(layer.log_noise_variance), "A": ab.A,
            "m": inp.mean, "v": inp.variance}
    for name, ana in checks.items():
        num = central_difference(lambda x: scalar(**{name: x}), base[name])
        assert rel_err(ana, num) <= 1e-6, name
    # the output is linear and symmetric in B, so a large step is exact
    num_B = central_difference(
        lambda x: scalar(B=0.5 * (x + np.swapaxes(x, 1, 2))), ab.B, h=1e-2)
    assert rel_err(g.B, num_B) <= 1e-6
