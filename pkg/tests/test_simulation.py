import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate, stats

from surrogate_dr.errors import InvalidDesign
from surrogate_dr.simulation import (
    SimulationSpec,
    convergence_experiment,
    example_gamma,
    gen_model16,
    gen_nonnormal,
    gen_replication_aux,
    gen_split_halves,
    gen_validation_aux,
    invariance_check,
    model16_response,
    projection_normality_diag,
    radial_uniform_variance,
    rng_for,
    run_table1,
    table1_replicate,
)
from surrogate_dr.spectral import subspace_distance
from surrogate_dr.estimators import SdrConfig, cr
from surrogate_dr.surrogate import estimate_from_split_halves


def radial_projection_ks(p: int) -> float:
    """Population KS distance between a standardized projection of ``3 Z Phi(|Z|)/|Z|`` and N(0, 1).

    The projection is ``3 Phi(R) V`` with ``R ~ chi_p`` and ``(V + 1) / 2 ~ Beta((p-1)/2, (p-1)/2)``.
    """
    a = (p - 1) / 2
    scale = math.sqrt(9 * integrate.quad(lambda r: stats.norm.cdf(r) ** 2 * stats.chi.pdf(r, p), 0, np.inf)[0] / p)

    def cdf(t):
        f = lambda r: stats.chi.pdf(r, p) * stats.beta.cdf((np.clip(t * scale / (3 * stats.norm.cdf(r)), -1, 1) + 1) / 2, a, a)
        return integrate.quad(f, 0, np.inf, limit=200)[0]

    grid = np.linspace(0.01, 3.5, 120)
    return max(abs(cdf(t) - stats.norm.cdf(t)) for t in grid)


# ---------------------------------------------------------------- generators


def test_noise_free_response_formula():
    spec = SimulationSpec(sigma_eps=0.0)
    x = np.array([[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]])
    expected = 0.4 * (1.0 - 2.0 + 0.5) ** 2 + 3 * math.sin((1.0 + 0.0 + 3.0) / 4)
    assert model16_response(x, spec)[0] == pytest.approx(expected, abs=1e-15)
    x, y, _ = gen_model16(spec, 0)
    np.testing.assert_array_equal(y, model16_response(x, spec))


def test_error_free_surrogate_is_predictor():
    x, _, w = gen_model16(SimulationSpec(sigma_delta=0.0), 4)
    np.testing.assert_array_equal(w, x)


def test_generators_are_seed_deterministic():
    spec = SimulationSpec()
    for a, b in zip(gen_model16(spec, 7), gen_model16(spec, 7)):
        np.testing.assert_array_equal(a, b)
    assert not np.array_equal(gen_model16(spec, 7)[0], gen_model16(spec, 8)[0])
    assert not np.array_equal(gen_model16(spec, 7)[0], gen_model16(replace(spec, master_seed=1), 7)[0])
    r1, r2 = gen_replication_aux(spec, 3), gen_replication_aux(spec, 3)
    np.testing.assert_array_equal(r1.w1, r2.w1)
    np.testing.assert_array_equal(r1.w2, r2.w2)
    v1, v2 = gen_validation_aux(spec, 3), gen_validation_aux(spec, 3)
    np.testing.assert_array_equal(v1.w, v2.w)


def test_streams_are_independent_of_other_parameters():
    # the predictor stream does not move when the noise scales change
    a = gen_model16(SimulationSpec(sigma_eps=0.2, sigma_delta=0.2), 5)[0]
    b = gen_model16(SimulationSpec(sigma_eps=0.6, sigma_delta=0.0), 5)[0]
    np.testing.assert_array_equal(a, b)
    assert rng_for(1, 2, "x").standard_normal() != rng_for(1, 2, "eps").standard_normal()


def test_surrogate_covariance_at_large_n():
    spec = SimulationSpec(n=100_000, sigma_delta=0.4)
    _, _, w = gen_model16(spec, 0)
    target = (1 + 0.4**2) * np.eye(6)
    err = np.linalg.norm(np.cov(w.T) - target) / np.linalg.norm(target)
    assert err < 0.03


def test_surrogate_covariance_general_gamma():
    g = example_gamma(6)
    spec = SimulationSpec(n=100_000, gamma_matrix=g, intercept=tuple(range(6)))
    _, _, w = gen_model16(spec, 0)
    target = g.T @ g + 0.04 * np.eye(6)
    assert np.linalg.norm(np.cov(w.T) - target) / np.linalg.norm(target) < 0.03
    np.testing.assert_allclose(w.mean(axis=0), np.arange(6), atol=0.05)


def test_validation_aux_conditional_mean():
    g = example_gamma(3)
    spec = SimulationSpec(p=3, m=50_000, beta1=(1, 0, 0), beta2=(0, 1, 0), gamma_matrix=g)
    v = gen_validation_aux(spec, 0)
    assert v.x.shape == (50_000, 3) and v.w.shape == (50_000, 3)
    coef, *_ = np.linalg.lstsq(v.x, v.w, rcond=None)
    np.testing.assert_allclose(coef, g, atol=0.01)


def test_nonnormal_predictor_bounds_and_symmetry():
    x = gen_nonnormal(SimulationSpec(n=100_000), 0)
    assert np.linalg.norm(x, axis=1).max() <= 3.0
    assert np.abs(x.mean(axis=0)).max() < 0.03


def test_radial_variance_against_monte_carlo():
    x = gen_nonnormal(SimulationSpec(n=100_000), 1)
    np.testing.assert_allclose(x.var(axis=0), radial_uniform_variance(6), rtol=0.02)


def test_radial_projection_ks_matches_population_value():
    # The exact population distance at p = 6 is about 0.025, so the sample
    # statistic can only fluctuate around it, never reliably drop below 0.02.
    oracle = radial_projection_ks(6)
    assert 0.024 < oracle < 0.026
    spec = SimulationSpec(n=100_000)
    x = gen_nonnormal(spec, 2)
    b1 = np.asarray(spec.beta1) / np.linalg.norm(spec.beta1)
    proj = x @ b1
    ks = stats.kstest(proj / proj.std(), "norm").statistic
    assert abs(ks - oracle) < 1.63 / math.sqrt(100_000)


def test_replication_aux_error_variance():
    spec = SimulationSpec(m=50_000, sigma_delta=0.3)
    r = gen_replication_aux(spec, 0)
    np.testing.assert_allclose(np.var(r.w1 - r.w2, axis=0) / 2, 0.09, rtol=0.05)
    assert np.abs((r.w1 - r.w2).mean(axis=0)).max() < 0.01


def test_replication_aux_without_error_duplicates_rows():
    r = gen_replication_aux(SimulationSpec(sigma_delta=0.0), 0)
    np.testing.assert_array_equal(r.w1, r.w2)


def test_replication_aux_requires_identity_gamma():
    with pytest.raises(InvalidDesign):
        gen_replication_aux(SimulationSpec(gamma_matrix=example_gamma(6)), 0)


@pytest.mark.parametrize(
    "kwargs",
    [dict(p=0), dict(n=1), dict(sigma_eps=-0.1), dict(beta1=(1, 0)), dict(beta2=(2, 2, 2, 0, 0, 0)), dict(predictor_law="cauchy")],
)
def test_spec_validation(kwargs):
    with pytest.raises(InvalidDesign):
        SimulationSpec(**kwargs)


def test_spec_dict_round_trip():
    spec = SimulationSpec(gamma_matrix=example_gamma(6), intercept=(1, 2, 3, 4, 5, 6), sigma_eps=0.4)
    assert SimulationSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(InvalidDesign):
        SimulationSpec.from_dict({"bogus": 1})


def test_split_halves_generator_error_variances():
    s = gen_split_halves(20_000, 0)
    est = estimate_from_split_halves(s)
    np.testing.assert_allclose(np.diag(est.sigma_delta), [0.0203, 0.0438, 0.0180, 0.0], atol=0.002)
    assert np.all(np.diag(est.sigma_delta)[3:] == 0)


# ---------------------------------------------------------------- noise-grid harness


def test_table1_small_run_shape_and_ordering():
    rep = run_table1(SimulationSpec(), reps=10, sigma_eps_grid=(0.2,), sigma_delta_grid=(0.2, 0.6))
    assert [(r.sigma_delta, r.method) for r in rep.records] == [
        (0.2, "sir"), (0.2, "phd"), (0.2, "cr"), (0.6, "sir"), (0.6, "phd"), (0.6, "cr"),
    ]
    for r in rep.records:
        assert r.reps + r.failures == 10
        assert 0 <= r.mean_rho <= 4
        assert r.se_rho == pytest.approx(r.sd_rho / math.sqrt(r.reps))
    cr_small = rep.cell(0.2, 0.2, "cr").mean_rho
    assert cr_small < rep.cell(0.2, 0.2, "sir").mean_rho
    assert cr_small < rep.cell(0.2, 0.6, "cr").mean_rho
    assert rep.provenance["seed"] == SimulationSpec().master_seed
    with pytest.raises(KeyError):
        rep.cell(0.4, 0.4, "cr")


def test_table1_is_reproducible_and_schedule_independent():
    spec = SimulationSpec()
    a = run_table1(spec, methods=("cr",), reps=4, sigma_eps_grid=(0.4,), sigma_delta_grid=(0.4,), workers=1)
    b = run_table1(spec, methods=("cr",), reps=4, sigma_eps_grid=(0.4,), sigma_delta_grid=(0.4,), workers=2)
    assert a.records == b.records
    singles = [table1_replicate(replace(spec, sigma_eps=0.4, sigma_delta=0.4), ("cr",), i)["cr"] for i in (3, 1, 0, 2)]
    assert np.mean(singles) == pytest.approx(a.records[0].mean_rho, abs=1e-15)


def test_table1_counts_failures():
    # two slices of 2 observations cannot be formed from n = 3
    spec = SimulationSpec(n=3, m=10, n_slices=2)
    rep = run_table1(spec, methods=("sir",), reps=3, sigma_eps_grid=(0.2,), sigma_delta_grid=(0.2,))
    assert rep.records[0].failures == 3 and rep.records[0].reps == 0
    assert math.isnan(rep.records[0].mean_rho)


def test_table1_rejects_unknown_method():
    with pytest.raises(InvalidDesign):
        run_table1(SimulationSpec(), methods=("ols",), reps=1)


def test_no_error_oracle_run():
    spec = SimulationSpec(n=2000, sigma_eps=0.0, sigma_delta=0.0)
    rhos = []
    for rep in range(5):
        x, y, _ = gen_model16(spec, rep)
        rhos.append(subspace_distance(cr(x, y, SdrConfig("cr", 2, cut=0.5)).basis, spec.true_basis()))
    assert np.mean(rhos) < 0.05


# ---------------------------------------------------------------- other experiments


def test_invariance_is_exact_without_measurement_error():
    rows = invariance_check(SimulationSpec(sigma_delta=0.0), "cr", n_grid=(300,), reps=3)
    assert rows[0]["mean_rho_xu"] < 1e-20
    assert rows[0]["mean_rho_x_truth"] == pytest.approx(rows[0]["mean_rho_u_truth"])


def test_convergence_requires_three_points():
    with pytest.raises(InvalidDesign):
        convergence_experiment(SimulationSpec(), n_grid=(100, 200), m_grid=None, reps=1)


def test_convergence_exact_parameters_small():
    out = convergence_experiment(
        SimulationSpec(sigma_delta=0.5), n_grid=(400, 1600, 6400), m_grid=None, reps=6, m_hold=None
    )
    assert out["n_errors"][0] > out["n_errors"][-1]
    assert -0.8 < out["slope_n"] < -0.2
    assert "slope_m" not in out


def test_projection_diagnostic():
    rows = projection_normality_diag(p_grid=(5, 20, 80, 320), n=20_000, draws=100)
    inner = [r["inner_max"] for r in rows]
    assert all(a > b for a, b in zip(inner, inner[1:]))
    gauss = projection_normality_diag(p_grid=(5, 40), n=20_000, law="gaussian", draws=20)
    assert all(r["ks"] < 1.63 / math.sqrt(20_000) for r in gauss)
    with pytest.raises(InvalidDesign):
        projection_normality_diag(p_grid=(1,), n=100, draws=2)
