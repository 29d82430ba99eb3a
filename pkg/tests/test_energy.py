import numpy as np
import pytest
from scipy.special import ndtr

from dgp_aep import energy, kernel
from dgp_aep.energy import (aep_objective, datapoint_logz, logz_gaussian,
                            logz_gaussian_grads, logz_probit,
                            logz_probit_grads, monte_carlo_logz, sep_update)
from dgp_aep.layer import PropagatedMoments, propagate_layer
from dgp_aep.model import zero_factors
from oracles import (central_difference, mc_final_layer, moment_stats,
                     random_model, rel_err)


def toy_data(rng, N=20, D=2):
    X = rng.normal(size=(N, D))
    return X, np.sin(X.sum(1)) + 0.1 * rng.normal(size=N)


def test_logz_gaussian_examples():
    assert logz_gaussian(0.3, 1 / (2 * np.pi), 0.3) == pytest.approx(0.0, abs=1e-15)
    assert logz_gaussian(1.0, 1.0, 1.0) == pytest.approx(-0.9189385332046727,
                                                         rel=1e-15)


def test_logz_gaussian_rejects_nonpositive_variance():
    with pytest.raises(kernel.ContractError):
        logz_gaussian(0.0, 0.0, 1.0)


def test_logz_gaussian_grads():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m, v, y = rng.normal(), rng.uniform(0.1, 3.0), rng.normal()
        gm, gv = logz_gaussian_grads(m, v, y)
        nm = central_difference(lambda a: logz_gaussian(a[0], v, y), [m], 1e-6)
        nv = central_difference(lambda a: logz_gaussian(m, a[0], y), [v], 1e-6)
        assert rel_err(gm, nm) <= 1e-8 and rel_err(gv, nv) <= 1e-8


def test_logz_probit_examples():
    assert logz_probit(0.0, 0.7, 1.0) == pytest.approx(np.log(0.5), rel=1e-15)
    assert logz_probit(0.0, 0.7, -1.0) == pytest.approx(np.log(0.5), rel=1e-15)
    assert abs(logz_probit(10.0, 0.0, 1.0)) <= 1e-8
    # the stable log-CDF stays finite deep in the tail
    assert np.isfinite(logz_probit(-40.0, 0.0, 1.0))


def test_logz_probit_rejects_bad_labels():
    with pytest.raises(kernel.ContractError):
        logz_probit(0.0, 1.0, 0.0)


def test_logz_probit_grads():
    rng = np.random.default_rng(1)
    for m in (-30.0, -2.0, 0.4, 5.0):
        v, y = rng.uniform(0.0, 2.0), rng.choice([-1.0, 1.0])
        gm, gv = logz_probit_grads(m, v, y)
        nm = central_difference(lambda a: logz_probit(a[0], v, y), [m], 1e-6)
        nv = central_difference(lambda a: logz_probit(m, a[0], y), [v], 1e-6)
        assert rel_err(gm, nm) <= 1e-6 and rel_err(gv, nv) <= 1e-6


def test_logz_probit_matches_monte_carlo():
    rng = np.random.default_rng(2)
    for _ in range(5):
        m, v, y = rng.normal(0, 1.5), rng.uniform(0.05, 3.0), rng.choice([-1., 1.])
        est, se = monte_carlo_logz(m, v, y, lambda f, y: ndtr(y * f),
                                   10 ** 6, rng)
        assert abs(np.exp(logz_probit(m, v, y)) - est) < 5 * se


def test_single_layer_collapses_to_fitc_moments():
    rng = np.random.default_rng(3)
    model = random_model(rng, dims=(2, 1), M=4)
    x, y = rng.normal(size=2), 0.4
    logz, _ = datapoint_logz(model, x, y)
    st = energy.prepare(model)[0]
    out = propagate_layer(PropagatedMoments.deterministic(x), model.layers[0],
                          st.ab)
    expected = logz_gaussian(out.mean[0, 0], out.variance[0, 0], y)
    assert logz == pytest.approx(float(expected), rel=1e-12, abs=1e-12)


def test_two_layer_logz_matches_monte_carlo_moments():
    # Layerwise moment matching makes exp(log Z) equal the Gaussian density
    # at the propagated moments; those moments are checked against sampling.
    rng = np.random.default_rng(4)
    model = random_model(rng, dims=(1, 1, 1), M=3)
    x, y = np.array([0.3]), 0.2
    logz, _ = datapoint_logz(model, x, y)
    states = energy.prepare(model)
    outs = energy.forward(model, states, x[None])
    mL, vL = outs[-1].mean[0, 0], outs[-1].variance[0, 0]
    cm, cv = mc_final_layer(model, states, x, 10 ** 6, rng)
    f = cm + np.sqrt(cv) * rng.standard_normal(cm.size)
    mu, var, cov = moment_stats(f)
    assert abs(mL - mu) < 5 * np.sqrt(cov[0, 0])
    assert abs(vL - var) < 5 * np.sqrt(cov[1, 1])
    dens = np.exp(logz)
    d_mu = dens * (y - mu) / var
    d_var = dens * (-0.5 / var + 0.5 * (y - mu) ** 2 / var ** 2)
    se = np.sqrt(np.array([d_mu, d_var]) @ cov @ np.array([d_mu, d_var]))
    mc_dens = np.exp(float(logz_gaussian(mu, var, y)))
    assert abs(dens - mc_dens) < 5 * se


@pytest.mark.parametrize("likelihood,y", [("gaussian", 0.7), ("probit", -1.0)])
def test_datapoint_logz_gradients(likelihood, y):
    rng = np.random.default_rng(5)
    model = random_model(rng, likelihood=likelihood)
    x = rng.normal(size=2)
    _, grads = datapoint_logz(model, x, y)
    params = model.params()
    assert set(grads) == set(params)
    for name, p in params.items():
        def f(val, p=p):
            old = p.copy()
            p[...] = val
            try:
                return datapoint_logz(model, x, y)[0]
            finally:
                p[...] = old
        num = central_difference(f, p.copy())
        assert rel_err(grads[name], num) <= 1e-4, name


def test_total_identity():
    rng = np.random.default_rng(6)
    model = random_model(rng)
    X, y = toy_data(rng)
    for nb in (1, 7, 20):
        br, _ = aep_objective(model, X[:nb], y[:nb], 20)
        expected = (-(20 - 1) * br.phi_post + 20 * br.phi_cav - br.phi_prior
                    + br.logz_sum)
        assert br.total == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_full_batch_is_sum_of_datapoints():
    rng = np.random.default_rng(7)
    model = random_model(rng)
    X, y = toy_data(rng)
    br, _ = aep_objective(model, X, y, 20)
    pointwise = sum(datapoint_logz(model, X[i], y[i], N=20)[0]
                    for i in range(20))
    assert br.logz_sum == pytest.approx(pointwise, rel=1e-12)


def test_partition_average_equals_full_objective():
    rng = np.random.default_rng(8)
    model = random_model(rng)
    X, y = toy_data(rng)
    full, gfull = aep_objective(model, X, y, 20)
    parts = np.array_split(rng.permutation(20), 4)
    est = [aep_objective(model, X[p], y[p], 20) for p in parts]
    assert np.mean([b.total for b, _ in est]) == pytest.approx(
        full.total, rel=1e-10)
    for name in gfull:
        avg = np.mean([g[name] for _, g in est], axis=0)
        np.testing.assert_allclose(avg, gfull[name], rtol=1e-8, atol=1e-10)


def test_minibatch_mean_is_within_three_standard_errors():
    rng = np.random.default_rng(9)
    model = random_model(rng)
    X, y = toy_data(rng)
    full, _ = aep_objective(model, X, y, 20)
    vals = np.array([energy.minibatch_objective(model, X, y, 5, rng)[0].total
                     for _ in range(1000)])
    se = vals.std(ddof=1) / np.sqrt(vals.size)
    assert abs(vals.mean() - full.total) < 3 * se


def test_batch_size_bounds():
    rng = np.random.default_rng(10)
    model = random_model(rng)
    X, y = toy_data(rng)
    with pytest.raises(kernel.ContractError):
        aep_objective(model, X, y, 10)


def test_objective_gradients():
    rng = np.random.default_rng(11)
    model = random_model(rng)
    X, y = toy_data(rng)
    _, grads = aep_objective(model, X, y, 20)
    for name, p in model.params().items():
        def f(val, p=p):
            old = p.copy()
            p[...] = val
            try:
                return aep_objective(model, X, y, 20)[0].total
            finally:
                p[...] = old
        num = central_difference(f, p.copy())
        assert rel_err(grads[name], num) <= 1e-4, name


def test_threaded_objective_matches_serial():
    rng = np.random.default_rng(12)
    model = random_model(rng)
    X, y = toy_data(rng)
    a, ga = aep_objective(model, X, y, 20)
    b, gb = aep_objective(model, X, y, 20, threads=3, deterministic=True)
    c, _ = aep_objective(model, X, y, 20, threads=3, deterministic=True)
    assert b.total == c.total
    assert b.total == pytest.approx(a.total, rel=1e-12)
    for name in ga:
        np.testing.assert_allclose(gb[name], ga[name], rtol=1e-9, atol=1e-9)


def test_single_layer_predictive_density_integrates_to_one():
    rng = np.random.default_rng(13)
    model = random_model(rng, dims=(2, 1), M=4)
    x = rng.normal(size=2)
    st = energy.prepare(model)[0]
    out = propagate_layer(PropagatedMoments.deterministic(x), model.layers[0],
                          st.ab)
    m, s = out.mean[0, 0], np.sqrt(out.variance[0, 0])
    grid = np.linspace(m - 8 * s, m + 8 * s, 401)
    dens = np.array([np.exp(datapoint_logz(model, x, g)[0]) for g in grid])
    assert abs(dens.sum() * (grid[1] - grid[0]) - 1.0) < 1e-3


def _zero_grad_likelihood(monkeypatch, gv=0.0):
    fn, _ = energy.LOGZ["gaussian"]
    monkeypatch.setitem(energy.LOGZ, "gaussian",
                        (fn, lambda m, v, y: (0.0 * m, 0.0 * v + gv)))


def test_sep_stationary_site_leaves_cavity(monkeypatch):
    rng = np.random.default_rng(14)
    model = random_model(rng, dims=(2, 1), M=4)
    _zero_grad_likelihood(monkeypatch)
    res = sep_update(model, rng.normal(size=2), 0.1, damping=1.0)
    assert res.accepted
    # the matched posterior equals the cavity, so the implied site is null
    np.testing.assert_allclose(res.model.factors[0].eta1, 0.0, atol=1e-9)
    np.testing.assert_allclose(res.model.factors[0].lambda1, 0.0, atol=1e-9)


def test_sep_conjugate_update():
    rng = np.random.default_rng(15)
    model = random_model(rng, dims=(2, 1), M=4, N=5)
    x, y = rng.normal(size=2), 0.3
    layer, old = model.layers[0], model.factors[0]
    st = energy.prepare(model)[0]
    res = sep_update(model, x, y, damping=1.0)
    assert res.accepted and res.damping == 1.0
    # closed-form product of the cavity and the FITC likelihood of (x, y)
    kx = kernel.rbf(x[None], layer.Z[0], layer.log_lengthscales[0],
                    layer.log_signal_variance[0])[0]
    Kuu = st.Kuu[0]
    c = np.linalg.solve(Kuu, kx)
    s = (layer.noise_variance + np.exp(layer.log_signal_variance[0]) - c @ kx)
    Vc, mc = st.cavity.cov[0], st.cavity.mean[0]
    P = np.linalg.inv(Vc) + np.outer(c, c) / s
    eta = np.linalg.solve(Vc, mc) + c * y / s
    new = res.model.factors[0]
    cav_lam = np.linalg.inv(Kuu) + 4 * old.lambda1[0]
    cav_eta = 4 * old.eta1[0]
    np.testing.assert_allclose(cav_lam + new.lambda1[0], P, rtol=1e-7, atol=1e-8)
    np.testing.assert_allclose(cav_eta + new.eta1[0], eta, rtol=1e-7, atol=1e-8)


def test_sep_damping_is_linear_in_natural_parameters():
    rng = np.random.default_rng(16)
    model = random_model(rng, dims=(2, 1), M=4, N=5)
    x, y = rng.normal(size=2), 0.3
    full = sep_update(model, x, y, damping=1.0).model.factors[0]
    part = sep_update(model, x, y, damping=0.1).model.factors[0]
    old = model.factors[0]
    np.testing.assert_allclose(part.eta1 - old.eta1,
                               0.1 * (full.eta1 - old.eta1), rtol=1e-9,
                               atol=1e-12)
    np.testing.assert_allclose(part.lambda1 - old.lambda1,
                               0.1 * (full.lambda1 - old.lambda1), rtol=1e-8,
                               atol=1e-12)


def test_sep_rejects_invalid_site(monkeypatch):
    rng = np.random.default_rng(17)
    model = random_model(rng, dims=(2, 1), M=3, N=5)
    model.factors = zero_factors(model.layers)
    _zero_grad_likelihood(monkeypatch, gv=50.0)
    res = sep_update(model, rng.normal(size=2), 0.0, damping=0.5)
    assert not res.accepted and res.message
    assert res.model is model
    np.testing.assert_array_equal(model.factors[0].eta1, 0.0)


def test_sep_validates_damping():
    rng = np.random.default_rng(18)
    model = random_model(rng, dims=(2, 1))
    with pytest.raises(ValueError):
        sep_update(model, np.zeros(2), 0.0, damping=0.0)
