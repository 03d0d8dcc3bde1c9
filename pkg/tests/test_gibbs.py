import numpy as np
import pytest

from mfvar.analysis import DgpSpec, simulate_dgp, simulate_var
from mfvar.constraints import LEVEL_AVERAGE, LOG_DIFF_TRIANGLE
from mfvar.errors import EmptyStore, SingularDesign, SingularW
from mfvar.gibbs import (DrawStore, GibbsConfig, NIWPrior, default_presample, draw_var_params,
                         initial_fill, lag_design, posterior_summary, run_gibbs)
from mfvar.model import MixedPanel, VarParams
from mfvar.constraints import build_Ma

from oracles import condition_on, conditional_moments, moments_ok

AR = VarParams(np.array([0.1, 0.0]), np.array([[[0.6, 0.1], [0.0, 0.3]]]),
               np.array([[1.0, 0.2], [0.2, 0.5]]))


def test_config_defaults_and_checks():
    cfg = GibbsConfig(n_draws=20)
    assert cfg.n_burn == 10 and cfg.thin == 1 and cfg.n_kept == 10
    assert GibbsConfig(n_draws=100, n_burn=10, thin=3).n_kept == 30
    for bad in (dict(n_draws=0), dict(n_draws=5, thin=0), dict(n_draws=5, n_burn=5),
                dict(n_draws=5, method="x"), dict(n_draws=5, constraint_mode="x"),
                dict(n_draws=5, o_diag=0.0)):
        with pytest.raises(ValueError):
            GibbsConfig(**bad)


def test_noninformative_prior():
    prior = NIWPrior.noninformative(3, 2)
    assert prior.mean.shape == (7, 3)
    np.testing.assert_array_equal(prior.precision_scale, 1e-6 * np.eye(7))
    assert prior.iw_dof == 5
    with pytest.raises(ValueError):
        NIWPrior(prior.mean, prior.precision_scale, np.eye(3), 1.5)


def test_dogmatic_prior_collapses_to_prior_mean():
    Y = simulate_var(AR, 300, np.random.default_rng(0))
    M0 = np.arange(6.0).reshape(3, 2) / 10
    prior = NIWPrior(M0, 1e12 * np.eye(3), np.eye(2), 4.0)
    params = draw_var_params(Y, prior, 1, np.random.default_rng(1))
    np.testing.assert_allclose(params.coef_matrix(), M0, atol=1e-4)


def test_recovers_ar_coefficients():
    Y = simulate_var(AR, 2000, np.random.default_rng(2))
    prior = NIWPrior.noninformative(2, 1)
    rng = np.random.default_rng(3)
    B = np.mean([draw_var_params(Y, prior, 1, rng).B[0] for _ in range(300)], axis=0)
    assert np.abs(B - AR.B[0]).max() < 0.05


def ridge_oracle(Y, p, M0, V0inv):
    T = Y.shape[0]
    X = np.column_stack([np.ones(T - p)] + [Y[p - j:T - j] for j in range(1, p + 1)])
    return np.linalg.solve(X.T @ X + V0inv, X.T @ Y[p:] + V0inv @ M0)


def test_posterior_moments_match_analytic():
    rng = np.random.default_rng(4)
    Y = simulate_var(AR, 150, rng)
    M0 = 0.1 * np.ones((3, 2))
    V0inv = np.diag([2.0, 5.0, 1.0])
    S0 = 0.5 * np.eye(2)
    prior = NIWPrior(M0, V0inv, S0, 6.0)
    Mn = ridge_oracle(Y, 1, M0, V0inv)
    X, Yt = lag_design(Y, 1)
    E = Yt - X @ Mn
    Sn = S0 + E.T @ E + (Mn - M0).T @ V0inv @ (Mn - M0)
    nu = 6.0 + Yt.shape[0]
    draws = [draw_var_params(Y, prior, 1, rng) for _ in range(6000)]
    A = np.stack([d.coef_matrix() for d in draws])
    S = np.stack([d.sigma for d in draws])
    Kn_inv = np.linalg.inv(X.T @ X + V0inv)
    ES = Sn / (nu - 3)
    # Var(A_ij) = E[Sigma_jj] (Kn^-1)_ii
    se_A = np.sqrt(np.outer(np.diag(Kn_inv), np.diag(ES)) / len(draws))
    assert np.abs((A.mean(axis=0) - Mn) / se_A).max() < 4.5
    np.testing.assert_allclose(S.mean(axis=0), ES, rtol=0.03, atol=0.003)
    np.testing.assert_allclose(A.var(axis=0), np.outer(np.diag(Kn_inv), np.diag(ES)), rtol=0.1)


def test_singular_design():
    Y = np.ones((50, 2))
    prior = NIWPrior(np.zeros((3, 2)), np.zeros((3, 3)), np.eye(2), 4.0)
    with pytest.raises(SingularDesign):
        draw_var_params(Y, prior, 1, np.random.default_rng(0))
    with pytest.raises(SingularDesign):
        draw_var_params(np.ones((3, 2)), NIWPrior.noninformative(2, 1), 1, np.random.default_rng(0))


def small_sim(T=60, n_u=1, seed=0):
    return simulate_dgp(DgpSpec(n_o=2, n_u=n_u, T=T, p=1, scheme=LEVEL_AVERAGE, seed=seed))


def test_bookkeeping():
    sim = small_sim()
    store = run_gibbs(sim.panel, LEVEL_AVERAGE, None, GibbsConfig(n_draws=10, n_burn=0, lags=1))
    assert len(store) == 10
    assert store.b_draws.shape == (10, 4, 3) and store.sigma_draws.shape == (10, 3, 3)
    assert store.yu_draws.shape == (10, sim.panel.n_missing)
    assert store.yu_seconds.shape == (10,) and store.meta["kept"] == 10
    thin = run_gibbs(sim.panel, LEVEL_AVERAGE, None, GibbsConfig(n_draws=21, n_burn=5, thin=4, lags=1))
    assert len(thin) == 4


def test_seed_determinism_and_chains():
    sim = small_sim()
    cfg = GibbsConfig(n_draws=8, n_burn=0, lags=1, seed=5)
    a = run_gibbs(sim.panel, LEVEL_AVERAGE, None, cfg)
    b = run_gibbs(sim.panel, LEVEL_AVERAGE, None, cfg)
    c = run_gibbs(sim.panel, LEVEL_AVERAGE, None, GibbsConfig(n_draws=8, n_burn=0, lags=1, seed=5,
                                                               chain_id=1))
    np.testing.assert_array_equal(a.yu_draws, b.yu_draws)
    assert not np.array_equal(a.yu_draws, c.yu_draws)


@pytest.mark.parametrize("mode", ["hard", "soft"])
def test_fixed_parameter_mode_matches_oracle(mode):
    sim = small_sim(T=18)
    cfg = GibbsConfig(n_draws=20_000, n_burn=0, lags=1, constraint_mode=mode, o_diag=0.05,
                      fixed_params=sim.params)
    store = run_gibbs(sim.panel, LEVEL_AVERAGE, None, cfg)
    pre = default_presample(sim.panel, LEVEL_AVERAGE)
    mean, cov = conditional_moments(sim.params.b0, sim.params.B, sim.params.sigma,
                                    sim.panel.values, pre.mean, pre.var)
    cs = build_Ma(sim.panel, LEVEL_AVERAGE)
    m, C = condition_on(mean, cov, cs.M_a.todense(), cs.y_tilde,
                        noise=None if mode == "hard" else 0.05)
    ok, z = moments_ok(store.yu_draws, m, C)
    assert ok, z.max()


def test_kf_method_runs_and_agrees_in_fixed_mode():
    sim = small_sim(T=30)
    out = {}
    for method in ("precision", "kf"):
        cfg = GibbsConfig(n_draws=6000, n_burn=0, lags=1, constraint_mode="hard", method=method,
                          fixed_params=sim.params)
        out[method] = run_gibbs(sim.panel, LEVEL_AVERAGE, None, cfg).yu_draws
    diff = out["precision"].mean(axis=0) - out["kf"].mean(axis=0)
    se = np.sqrt((out["precision"].var(axis=0) + out["kf"].var(axis=0)) / 6000)
    assert np.abs(diff / se).max() < 5


def test_errors_carry_draw_index():
    sim = small_sim()
    p = sim.panel
    dup = MixedPanel(p.values, p.n_o, np.r_[p.agg_time, p.agg_time[:1]],
                     np.r_[p.agg_var, p.agg_var[:1]], np.r_[p.agg_value, p.agg_value[:1]])
    with pytest.raises(SingularW, match="draw 0") as info:
        run_gibbs(dup, LEVEL_AVERAGE, None, GibbsConfig(n_draws=3, lags=1, constraint_mode="hard"))
    assert info.value.draw_index == 0


def test_initial_fill_carries_aggregates():
    vals = np.zeros((7, 2))
    vals[:, 1] = np.nan
    panel = MixedPanel(vals, 1, [2, 5], [1, 1], [3.0, 6.0])
    np.testing.assert_allclose(initial_fill(panel, LEVEL_AVERAGE), [3, 3, 3, 6, 6, 6, 6])
    pre = default_presample(panel, LEVEL_AVERAGE)
    assert pre.mean[1] == pytest.approx(4.5)
    assert pre.var[1] == pytest.approx(3 * 4.5)


def test_summary_examples():
    const = DrawStore(np.full((5, 3), 2.5), np.zeros((5, 3, 2)), np.ones((5, 2, 2)))
    s = posterior_summary(const)
    np.testing.assert_array_equal(s.yu_median, 2.5)
    for lo, hi in s.yu_bands.values():
        np.testing.assert_array_equal(hi - lo, 0.0)
    three = DrawStore(np.array([[1.0], [2.0], [3.0]]), np.zeros((3, 3, 2)), np.ones((3, 2, 2)))
    assert posterior_summary(three).yu_median[0] == 2.0
    with pytest.raises(EmptyStore):
        posterior_summary(DrawStore(np.zeros((0, 3)), np.zeros((0, 3, 2)), np.zeros((0, 2, 2))))


def test_band_coverage_at_true_parameters():
    """Exact conditional draws: 90% bands hold the truth about 90% of the time."""
    hits, total = 0, 0
    for seed in range(6):
        sim = small_sim(T=60, seed=seed)
        cfg = GibbsConfig(n_draws=800, n_burn=0, lags=1, fixed_params=sim.params, seed=seed,
                          presample="none")
        s = posterior_summary(run_gibbs(sim.panel, LEVEL_AVERAGE, None, cfg))
        lo, hi = s.yu_bands[0.90]
        hits += np.sum((sim.truth_yu >= lo) & (sim.truth_yu <= hi))
        total += lo.size
    rate = hits / total
    assert abs(rate - 0.90) < 0.05


def test_start_point_does_not_matter():
    sim = simulate_dgp(DgpSpec(n_o=3, n_u=1, T=150, p=2, scheme=LOG_DIFF_TRIANGLE, seed=7))
    meds, sds = [], []
    for init in (sim.truth_yu, np.zeros(sim.panel.n_missing)):
        cfg = GibbsConfig(n_draws=1200, n_burn=400, lags=2, init_yu=init, seed=1)
        st = run_gibbs(sim.panel, LOG_DIFF_TRIANGLE, None, cfg)
        meds.append(np.median(st.yu_draws, axis=0))
        sds.append(st.yu_draws.std(axis=0))
    gap = np.abs(meds[0] - meds[1]) / np.maximum(sds[0], sds[1])
    assert np.all(gap < 3)


def test_store_roundtrip(tmp_path):
    sim = small_sim()
    store = run_gibbs(sim.panel, LEVEL_AVERAGE, None, GibbsConfig(n_draws=6, n_burn=2, lags=1))
    store.save(tmp_path)
    for f in ("yu_draws.csv", "b_draws.csv", "sigma_draws.csv", "meta.txt"):
        assert (tmp_path / f).exists()
    back = DrawStore.load(tmp_path)
    np.testing.assert_array_equal(back.yu_draws, store.yu_draws)
    np.testing.assert_array_equal(back.b_draws, store.b_draws)
    np.testing.assert_array_equal(back.sigma_draws, store.sigma_draws)
    assert back.meta["n_draws"] == "6" and back.meta["yu_cells"][0] == store.meta["yu_cells"][0]
