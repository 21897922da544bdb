import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epoxy_uq import constitutive as cm
from epoxy_uq import forward_uq as fu
from epoxy_uq.models import default_steps, synthetic_datasets
from epoxy_uq.pipeline import run_pipeline
from epoxy_uq.simulate import ScenarioConfig, SimulationError, SolverOptions, run_default_scenario
from epoxy_uq.stats import mvn_sample, rng_stream

P = cm.reference_params()


def linear(a, b=0.0):
    a = np.atleast_2d(a)
    return lambda x: {"p": {"theta": a @ x + b, "c": np.sin(a @ x)}}


def mvn_sampler(mean, cov):
    return lambda rng: mvn_sample(mean, cov, rng)


# ---------------------------------------------------------------- FOSM / MC engines


def test_zero_covariance_gives_zero_spread():
    model = linear([[2.0, -1.0]])
    mean = np.array([1.0, 3.0])
    res = fu.fosm(model, mean, np.zeros((2, 2)))
    assert np.all(res.std["p"]["theta"] == 0) and res.n_eval == 1
    mc = fu.monte_carlo(model, mvn_sampler(mean, np.zeros((2, 2))), 10, seed=0)
    assert np.all(mc.std["p"]["theta"] == 0)
    assert np.array_equal(mc.mean["p"]["theta"], model(mean)["p"]["theta"])


def test_fosm_exact_on_linear_map():
    res = fu.fosm(linear([[-3.5]]), [2.0], [[0.04]])
    assert res.std["p"]["theta"][0] == pytest.approx(3.5 * 0.2, rel=1e-12)
    assert res.n_eval == 3


def test_fosm_mean_is_baseline_bitwise():
    model = lambda x: {"p": {"theta": np.exp(x), "c": x**3}}
    x0 = np.array([0.3, -1.2])
    res = fu.fosm(model, x0, np.diag([0.1, 0.2]))
    assert np.array_equal(res.mean["p"]["theta"], np.exp(x0))


@given(st.integers(0, 10_000))
@settings(max_examples=10)
def test_fosm_and_mc_agree_for_linear_models(seed):
    rng = rng_stream(seed)
    a = rng.normal(size=(4, 3))
    l = rng.normal(size=(3, 3))
    cov = l @ l.T
    mean = rng.normal(size=3)
    f = fu.fosm(linear(a), mean, cov).std["p"]["theta"]
    n = 2000
    m = fu.monte_carlo(linear(a), mvn_sampler(mean, cov), n, seed=seed).std["p"]["theta"]
    se = f / np.sqrt(2 * (n - 1))
    assert np.all(np.abs(m - f) <= 3 * se + 1e-12)


@given(st.permutations([0, 1, 2, 3]))
def test_fosm_invariant_under_input_reordering(perm):
    perm = np.array(perm)
    a = np.array([[1.0, -2.0, 0.5, 3.0]])
    cov = np.diag([0.1, 0.2, 0.3, 0.4]) + 0.05
    mean = np.array([0.1, 0.2, 0.3, 0.4])

    def model(x):
        return {"p": {"theta": np.atleast_1d(a @ x + 0.1 * x[0] * x[3]), "c": np.atleast_1d(np.tanh(x).sum())}}

    def permuted(y):
        x = np.empty(4)
        x[perm] = y
        return model(x)

    r1 = fu.fosm(model, mean, cov)
    r2 = fu.fosm(permuted, mean[perm], cov[np.ix_(perm, perm)])
    for o in ("theta", "c"):
        assert np.allclose(r1.std["p"][o], r2.std["p"][o], rtol=1e-12)


def test_fosm_with_new_covariance_rescales():
    res = fu.fosm(linear([[1.0, 2.0]]), [0.0, 0.0], np.diag([1.0, 1.0]))
    scaled = fu.fosm_with_cov(res, 9.0 * res.input_cov)
    assert np.allclose(scaled.std["p"]["theta"], 3.0 * res.std["p"]["theta"], rtol=1e-14)


def test_failed_perturbation_names_parameter():
    def model(x):
        if x[1] > 1.0:
            raise SimulationError("boom")
        return {"p": {"theta": x, "c": x}}

    with pytest.raises(fu.ForwardUQError, match="'b'"):
        fu.fosm(model, [0.0, 1.0], np.eye(2), names=("a", "b"))


def test_mc_reproducible_and_failure_budget():
    model = linear([[1.0]])
    sampler = mvn_sampler(np.zeros(1), np.eye(1))
    a = fu.monte_carlo(model, sampler, 20, seed=3)
    b = fu.monte_carlo(model, sampler, 20, seed=3)
    assert np.array_equal(a.std["p"]["theta"], b.std["p"]["theta"])

    def flaky(x):
        if x[0] > 1.0:
            raise ValueError("outside")
        return model(x)

    with pytest.raises(fu.ForwardUQError):
        fu.monte_carlo(flaky, sampler, 40, seed=0)
    with pytest.raises(ValueError):
        fu.monte_carlo(model, sampler, 1, seed=0)


def test_std_of_std_shrinks_like_inverse_root_n():
    d = 50
    model = lambda x: {"p": {"theta": x, "c": x}}
    sampler = mvn_sampler(np.zeros(d), np.eye(d))

    def spread(n):
        stds = np.array([fu.monte_carlo(model, sampler, n, seed=s).std["p"]["theta"] for s in range(10)])
        return stds.std(axis=0, ddof=1).mean()

    ratio = spread(100) / spread(400)
    assert ratio == pytest.approx(2.0, rel=0.3)


# ---------------------------------------------------------------- variance inflation


@given(st.floats(0.1, 50.0), st.integers(0, 1000))
def test_inflation_keeps_mean_and_scales_variance(k, seed):
    x = rng_stream(seed).normal(3.0, 0.5, size=(200, 3))
    covs = np.tile(np.eye(3), (200, 1, 1))
    y, c = fu.inflate_samples(x, covs, k)
    assert np.allclose(y.mean(axis=0), x.mean(axis=0), rtol=1e-12)
    assert np.allclose(y.var(axis=0, ddof=1), k * x.var(axis=0, ddof=1), rtol=1e-10)
    assert np.allclose(c, k * covs, rtol=1e-15)


def test_inflation_identity_and_argument_check():
    x = rng_stream(0).normal(size=(30, 2))
    y, c = fu.inflate_samples(x, None, 1.0)
    assert np.allclose(y, x, rtol=1e-15) and c is None
    with pytest.raises(ValueError):
        fu.inflate_samples(x, None, 0.0)


# ---------------------------------------------------------------- boundary inputs


def test_nominal_path_without_spread():
    spec = fu.BoundaryInput(rel_sigma=0.0, h_std=0.0, eps_std=0.0)
    for temps, h, eps in fu.sample_boundary_inputs(spec, 5, seed=1):
        assert temps == fu.PATH_TEMPS and h == pytest.approx(40.0) and eps == 0.8


def test_boundary_sample_support_and_moments():
    spec = fu.BoundaryInput()
    x = np.array([spec.sample(rng_stream(2, i)) for i in range(10_000)])
    h, eps = x[:, -2], x[:, -1]
    assert np.all(h > 0) and np.all((eps >= 0) & (eps <= 1))
    assert h.mean() == pytest.approx(40.0, rel=0.01)
    assert eps.std(ddof=1) == pytest.approx(0.08, rel=0.03)
    temps = x[:, :7]
    assert np.allclose(temps.std(axis=0, ddof=1), 0.1 * np.array(fu.PATH_TEMPS), rtol=0.05)


def test_boundary_names_and_modes():
    assert fu.study_inputs("case_iii_full").names[-2:] == ("h", "eps")
    assert len(fu.study_inputs("case_iii_full").names) == 9
    assert fu.study_inputs("case_iii_mixed").names == ("h", "eps")
    with pytest.raises(ValueError):
        fu.study_inputs("case_iv")
    with pytest.raises(ValueError):
        fu.study_inputs("case_i")


# ---------------------------------------------------------------- material inputs


@pytest.fixture(scope="module")
def pipeline_mc():
    data = synthetic_datasets(rng=rng_stream(4))
    return run_pipeline(default_steps(), data, method="mc", n_mc=30, seed=1)


def test_material_input_excludes_shrinkage(pipeline_mc):
    inp = fu.material_input_from_pipeline(pipeline_mc)
    assert not set(inp.names) & set(cm.BLOCK_PARAMS["shrinkage"])
    assert len(inp.names) == 17
    # the conductivity step was calibrated with sampled upstream values
    kappa = next(g for g in inp.groups if "b1" in g.names)
    assert kappa.empirical is not None and kappa.empirical.shape == (30, 4)


def test_material_inflation(pipeline_mc):
    inp = fu.study_inputs("case_i", pipeline_mc)
    big = fu.study_inputs("case_ii", pipeline_mc, k=10.0)
    assert np.allclose(big.cov, 10.0 * inp.cov, rtol=1e-14)
    assert np.array_equal(big.mean, inp.mean)
    x = big.sample(rng_stream(0))
    big.params(x)  # admissible


# ---------------------------------------------------------------- simulator-backed


SHORT = ScenarioConfig(
    h_c=1e5,
    epoxy_cells=6,
    aluminum_cells=2,
    path_nodes=((0.0, 20.0), (600.0, 120.0), (4200.0, 120.0)),
)
COARSE = SolverOptions(rel_tol=1e-3, abs_tol_theta=0.1, abs_tol_c=1e-3)


def test_simulator_fosm_mean_equals_baseline():
    scen = fu.ForwardScenario(SHORT, COARSE, n_grid=50)
    inp = fu.BoundaryInput(temps=(20.0, 120.0, 120.0), vary_temps=False)
    res = fu.fosm_forward(scen, inp)
    base = scen.run(P, None, 40.0, 0.8)
    assert np.array_equal(res.mean["top"]["theta"], base["top"]["theta"])
    assert np.array_equal(res.mean["top"]["c"], base["top"]["c"])
    assert res.n_eval == 5
    assert np.all(res.std["top"]["theta"] >= 0)


def test_grid_interpolation_matches_solver_nodes():
    scen = fu.ForwardScenario(SHORT, COARSE, n_grid=400)
    out = scen.run(P)
    raw = run_default_scenario(SHORT, P, COARSE)
    t, theta, _ = raw.probe_series("top")
    assert np.interp(2000.0, t, theta) == pytest.approx(np.interp(2000.0, scen.grid(), out["top"]["theta"]), abs=0.05)


def test_csv_writer(tmp_path):
    res = fu.fosm(lambda x: {"top": {"theta": x * np.ones(3), "c": x * np.zeros(3)}}, [1.0], [[1.0]], grid=[0, 1, 2])
    fu.write_uq_csv({"fosm": res}, tmp_path / "u.csv")
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "t,fosm_top_theta_mean,fosm_top_theta_std,fosm_top_c_mean,fosm_top_c_std"
    assert len(lines) == 4
