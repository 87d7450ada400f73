import numpy as np
import pytest

from helpers import gaussian_clustered, make_dataset
from mlcopula.gibbs import (
    ChainConfig,
    ChainError,
    GibbsSampler,
    Priors,
    init_state,
    run_chain,
    run_chains,
)
from mlcopula.linalg import make_rng
from mlcopula.probit import decode_categories
from mlcopula.simulation import SimConfig, anova_icc, generate_complete, impose_mar


@pytest.fixture(scope="module")
def sim_small():
    ds, _ = generate_complete(SimConfig(m=10, n_i=30, rho=1.0, seed=4))
    obs, _ = impose_mar(ds, 0.3, seed=5)
    return obs


# -- configuration and schedule ---------------------------------------------


def test_schedule_arithmetic():
    cfg = ChainConfig(burn_in=10, thin=5, n_keep=3)
    assert cfg.total_iterations == 25
    assert cfg.retained_iterations() == [15, 20, 25]
    ds = make_dataset(make_rng(0).standard_normal((20, 2)))
    res = run_chain(ds, config=cfg)
    assert [s.iteration for s in res.snapshots] == [15, 20, 25]
    assert res.trace.values.shape[0] == 25


@pytest.mark.parametrize("field", ["burn_in", "n_keep", "thin", "max_retries"])
def test_config_rejects_zero_counts(field):
    with pytest.raises(ValueError):
        ChainConfig(**{field: 0})


def test_default_priors():
    p = Priors.default(4)
    assert p.nu_psi == p.nu_gamma == 6
    np.testing.assert_array_equal(p.lambda_psi, np.eye(4))
    with pytest.raises(ValueError):
        Priors(2.0, np.eye(4), 6.0, np.eye(4)).validate(4)


# -- initialisation ----------------------------------------------------------


def test_init_state(sim_small):
    state, params = init_state(sim_small)
    s = GibbsSampler(sim_small)
    np.testing.assert_array_equal(np.diag(params.Gamma), 1.0)
    np.testing.assert_array_equal(params.Psi, np.eye(s.d))
    assert not state.W.any() and not state.B.any() and not state.beta.any()
    assert state.W.shape == (sim_small.n_rows, 3)
    # X5 drives the deletions and is never deleted, so its ranks are already consistent
    k = list(sim_small.ordered_idx).index(sim_small.column("X5"))
    assert s.orders[k].is_consistent(state.Z[:, k])
    # all-zero utilities decode to the tie-broken first category
    assert np.all(decode_categories(state.W) == 1)


# -- single updates ----------------------------------------------------------


def _sampler_with(ds, **cfg):
    s = GibbsSampler(ds, config=ChainConfig(**cfg))
    state, params = s.init_state()
    s._last_exhausted = 0
    return s, state, params


def test_update_z_independent_case():
    # one observed cell pins nothing for the other rows: missing z ~ N(b, 1)
    n = 20_000
    vals = np.full((n, 1), np.nan)
    vals[0, 0] = 1.0
    mask = np.zeros((n, 1), dtype=bool)
    mask[0, 0] = True
    s, state, params = _sampler_with(make_dataset(np.nan_to_num(vals), mask))
    state.B[:] = 0.7
    z = s.update_z(state, params, make_rng(1))[1:, 0]
    assert abs(z.mean() - 0.7) < 4 / np.sqrt(n)
    assert abs(z.var() - 1.0) < 0.05


def test_update_z_schur_example():
    n = 20_000
    rng = make_rng(2)
    vals = np.column_stack([np.zeros(n), rng.standard_normal(n)])
    mask = np.column_stack([np.r_[True, np.zeros(n - 1, bool)], np.ones(n, bool)])
    s, state, params = _sampler_with(make_dataset(vals, mask))
    params.Gamma = np.array([[1.0, 0.5], [0.5, 1.0]])
    state.B[:] = [0.3, -0.2]
    Z = s.update_z(state, params, rng)
    z1, z2 = Z[1:, 0], Z[1:, 1]
    resid = z1 - (0.3 + 0.5 * (z2 + 0.2))
    assert abs(resid.mean()) < 4 * np.sqrt(0.75 / n)
    assert abs(resid.var() - 0.75) < 0.04


@pytest.mark.parametrize("sweep", ["blocked", "sequential"])
def test_update_z_stays_inside_bounds(sweep, sim_small):
    s, state, params = _sampler_with(sim_small, sweep=sweep)
    rng = make_rng(3)
    for _ in range(5):
        params.Gamma = np.eye(s.d) * 0.5 + 0.5
        s.update_z(state, params, rng)
        assert s.order_violations(state) == 0


def test_update_w_independent_case():
    n = 20_000
    vals = np.ones((n, 1))
    mask = np.zeros((n, 1), dtype=bool)
    mask[0] = True
    s, state, params = _sampler_with(make_dataset(vals, mask, kinds=["nominal"], levels={0: 3}))
    state.beta = np.array([0.4, -0.6])
    state.B[:] = [0.1, 0.2]
    W = s.update_w(state, params, make_rng(4))
    np.testing.assert_allclose(W[1:].mean(axis=0), [0.5, -0.4], atol=4 / np.sqrt(n))
    np.testing.assert_allclose(np.cov(W[1:].T), np.eye(2), atol=0.05)
    assert decode_categories(W[:1])[0] == 1


def test_update_w_accepts_observed_category(sim_small):
    s, state, params = _sampler_with(sim_small)
    s.update_w(state, params, make_rng(5))
    assert s.category_violations(state) == 0


def test_update_b_large_cluster():
    n = 10_000
    rng = make_rng(6)
    vals = rng.normal(0.8, 1.0, (n, 1))
    s, state, params = _sampler_with(make_dataset(vals))
    state.Z = vals.copy()
    draws = np.array([s.update_b(state, params, rng)[0, 0] for _ in range(400)])
    target = vals.mean() * n / (n + 1)
    assert abs(draws.mean() - target) < 4 * np.sqrt(1 / (n + 1) / 400)


def test_update_b_zero_residual_and_shrinkage():
    vals = np.zeros((50, 2))
    s, state, params = _sampler_with(make_dataset(vals, cluster=np.repeat([0, 1], 25)))
    state.Z = np.zeros((50, 2))
    rng = make_rng(7)
    draws = np.array([s.update_b(state, params, rng) for _ in range(2000)])
    assert np.all(np.abs(draws.mean(axis=0)) < 4 * np.sqrt(1 / 26 / 2000))
    state.Z = np.ones((50, 2)) * 3.0
    params.Psi = 1e-8 * np.eye(2)
    assert np.all(np.abs(s.update_b(state, params, rng)) < 1e-3)


def test_update_beta_means_and_scaling():
    n = 400
    vals = np.column_stack([make_rng(8).standard_normal(n), np.ones(n)])
    kinds = ["continuous", "nominal"]
    ds = make_dataset(vals, kinds=kinds, levels={1: 3})
    s, state, params = _sampler_with(ds)
    rng = make_rng(9)
    state.W = rng.normal([1.0, -2.0], 1.0, (n, 2))
    state.B[:] = [0.0, 0.5, 0.25]
    draws = np.array([s.update_beta(state, params, rng).copy() for _ in range(4000)])
    expected = (state.W - [0.5, 0.25]).mean(axis=0)
    np.testing.assert_allclose(draws.mean(axis=0), expected, atol=4 * np.sqrt(1 / n / 4000))
    np.testing.assert_allclose(draws.var(axis=0), [1 / n, 1 / n], rtol=0.1)

    # doubling N with identical rows halves the posterior variance
    ds2 = make_dataset(np.vstack([vals, vals]), kinds=kinds, levels={1: 3})
    s2, state2, params2 = _sampler_with(ds2)
    state2.W = np.vstack([state.W, state.W])
    state2.B[:] = [0.0, 0.5, 0.25]
    draws2 = np.array([s2.update_beta(state2, params2, rng).copy() for _ in range(4000)])
    np.testing.assert_allclose(draws2.var(axis=0) / draws.var(axis=0), 0.5, rtol=0.1)


def test_update_beta_noop_without_nominal():
    s, state, params = _sampler_with(make_dataset(np.eye(3)))
    assert s.update_beta(state, params, make_rng(0)).size == 0


def test_update_gamma_unit_diagonal_and_df(sim_small):
    s, state, params = _sampler_with(sim_small)
    g = s.update_gamma(state, params, make_rng(10))
    np.testing.assert_array_equal(np.diag(g), 1.0)
    assert np.all(np.linalg.eigvalsh(g) > 0)
    assert s.gamma_df() == s.priors.nu_gamma + s.N
    s_paper = GibbsSampler(sim_small, config=ChainConfig(paper_df=True))
    assert s_paper.gamma_df() == s.priors.nu_gamma - 1 + s.N


def test_update_psi_prior_mean():
    m = 5
    ds = make_dataset(np.arange(10.0).reshape(5, 2), cluster=np.arange(m))
    s, state, params = _sampler_with(ds)
    rng = make_rng(11)
    draws = np.array([s.update_psi(state, params, rng) for _ in range(10_000)])
    nu = s.priors.nu_psi
    np.testing.assert_allclose(np.diag(draws.mean(axis=0)), 1 / (nu + m - 2 - 1), rtol=0.05)
    assert all(np.all(np.linalg.eigvalsh(d) > 0) for d in draws[:100])


def test_update_psi_single_cluster_df():
    ds = make_dataset(np.arange(6.0).reshape(3, 2))
    s, state, params = _sampler_with(ds)
    rng = make_rng(12)
    draws = np.array([s.update_psi(state, params, rng) for _ in range(10_000)])
    # df = nu + 1 = 5, mean = I / (5 - 2 - 1)
    np.testing.assert_allclose(np.diag(draws.mean(axis=0)), 0.5, rtol=0.08)


# -- full chain --------------------------------------------------------------


def test_chain_invariants_every_iteration(sim_small):
    seen = []

    def check(it, state, params):
        assert np.all(np.diag(params.Gamma) == 1.0)
        assert np.all(np.linalg.eigvalsh(params.Psi) > 0)
        assert sampler.order_violations(state) == 0
        assert sampler.category_violations(state) == 0
        seen.append(it)

    sampler = GibbsSampler(sim_small, config=ChainConfig(burn_in=30, n_keep=3, thin=5, seed=3))
    res = sampler.run(callback=check)
    assert seen == list(range(1, 46))
    assert res.stats.constrained_draws > 0


def test_chain_deterministic(sim_small):
    cfg = ChainConfig(burn_in=20, n_keep=2, thin=5, seed=8)
    a, b = run_chain(sim_small, config=cfg), run_chain(sim_small, config=cfg)
    np.testing.assert_array_equal(a.trace.values, b.trace.values)
    for sa, sb in zip(a.snapshots, b.snapshots):
        np.testing.assert_array_equal(sa.state.Z, sb.state.Z)
        np.testing.assert_array_equal(sa.state.W, sb.state.W)
    c = run_chain(sim_small, config=ChainConfig(burn_in=20, n_keep=2, thin=5, seed=9))
    assert not np.array_equal(a.trace.values, c.trace.values)


def test_trace_names(sim_small):
    s = GibbsSampler(sim_small)
    names = s.trace_names()
    d = s.d
    assert len(names) == d * (d - 1) // 2 + d + s.q + 1
    assert names[-1] == "probit_exhausted"
    assert "Psi[X5]" in names and "beta[X3:1]" in names and "Gamma[X1,X2]" in names


def test_chain_error_carries_iteration(monkeypatch):
    ds = make_dataset(make_rng(0).standard_normal((30, 2)))
    s = GibbsSampler(ds, config=ChainConfig(burn_in=5, n_keep=1, thin=1))
    calls = {"n": 0}
    original = s.update_psi

    def flaky(state, params, rng):
        calls["n"] += 1
        if calls["n"] == 3:
            raise np.linalg.LinAlgError("boom")
        return original(state, params, rng)

    monkeypatch.setattr(s, "update_psi", flaky)
    with pytest.raises(ChainError) as info:
        s.run()
    assert info.value.iteration == 3


def test_run_chains_split_and_order():
    ds = make_dataset(make_rng(1).standard_normal((40, 2)), cluster=np.repeat([0, 1], 20))
    cfg = ChainConfig(burn_in=5, n_keep=5, thin=2, seed=4)
    res = run_chains(ds, config=cfg, n_chains=2)
    assert [r.chain for r in res] == [0, 1]
    assert [len(r.snapshots) for r in res] == [3, 2]
    again = run_chains(ds, config=cfg, n_chains=2, jobs=2)
    for a, b in zip(res, again):
        np.testing.assert_array_equal(a.trace.values, b.trace.values)
    with pytest.raises(ValueError):
        run_chains(ds, config=ChainConfig(n_keep=1), n_chains=2)


def test_stationarity_smoke():
    gamma = np.array([[1.0, 0.5, -0.3], [0.5, 1.0, 0.2], [-0.3, 0.2, 1.0]])
    psi = 0.5 * np.eye(3)
    x, cluster = gaussian_clustered(gamma, psi, m=20, n_i=50, seed=21)
    ds = make_dataset(x, cluster=cluster)
    res = run_chain(ds, config=ChainConfig(burn_in=300, n_keep=1, thin=700, seed=1))
    post = res.trace.values[300:]
    for (a, b) in [(0, 1), (0, 2), (1, 2)]:
        est = post[:, res.trace.names.index(f"Gamma[y{a + 1},y{b + 1}]")].mean()
        assert abs(est - gamma[a, b]) < 0.1


def test_no_random_effects_matches_cluster_model_at_zero_icc():
    gamma = np.array([[1.0, 0.6], [0.6, 1.0]])
    x, cluster = gaussian_clustered(gamma, None, m=10, n_i=40, seed=22)
    ds = make_dataset(x, cluster=cluster)
    ests = []
    for re in (True, False):
        res = run_chain(ds, config=ChainConfig(burn_in=200, n_keep=1, thin=1000, seed=2, random_effects=re))
        ests.append(res.trace.series("Gamma[y1,y2]")[200:].mean())
        if not re:
            assert not np.any(res.snapshots[-1].state.B)
            assert not np.any(res.snapshots[-1].params.Psi)
    assert abs(ests[0] - ests[1]) < 0.05


def test_sequential_and_blocked_sweeps_agree():
    gamma = np.array([[1.0, 0.6], [0.6, 1.0]])
    x, cluster = gaussian_clustered(gamma, None, m=1, n_i=200, seed=23)
    x[:, 1] = np.round(x[:, 1])  # ties in the second column
    ds = make_dataset(x)
    ests = []
    for sweep in ("blocked", "sequential"):
        res = run_chain(ds, config=ChainConfig(burn_in=200, n_keep=1, thin=500, seed=3, sweep=sweep,
                                               random_effects=False))
        ests.append(res.trace.series("Gamma[y1,y2]")[200:].mean())
    assert abs(ests[0] - ests[1]) < 0.05


def test_random_intercept_share_on_latent_scale():
    # Gamma is rescaled but Z is not, so the residual latent scale drifts slowly
    # away from 1.  Measured against that scale, Psi tracks the sample ICC.
    rng = np.random.default_rng(1)
    cluster = np.repeat(np.arange(40), 25)
    y = rng.normal(0, 1, 40)[cluster] + rng.normal(0, 1, 1000)
    ds = make_dataset(y[:, None], cluster=cluster)
    sampler = GibbsSampler(ds, config=ChainConfig(burn_in=500, n_keep=1, thin=2000, seed=2))
    shares = []

    def record(it, state, params):
        resid = state.Z[:, 0] - state.B[sampler.cluster, 0]
        shares.append(params.Psi[0, 0] / (params.Psi[0, 0] + resid.var()))

    sampler.run(callback=record)
    assert abs(np.mean(shares[500:]) - anova_icc(y, cluster)) < 0.06
