import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surrogate_dr.errors import InsufficientData, InvalidEstimates, InvalidInput, SingularMatrix
from surrogate_dr.simulation import SimulationSpec, example_gamma, gen_model16, gen_model16_delta, rng_for
from surrogate_dr.surrogate import (
    Adjustment,
    CovEstimates,
    PrimarySample,
    ReplicationSample,
    SplitHalvesSample,
    ValidationSample,
    adjust,
    estimate_from_replication,
    estimate_from_split_halves,
    estimate_from_validation,
    make_adjustment,
    moment_cov,
    population_estimates,
    surrogate_sigma_u,
)


def _rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# ---------------------------------------------------------------- validation


def test_validation_perfect_surrogate():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 3))
    est = estimate_from_validation(ValidationSample(x=x, w=x))
    np.testing.assert_allclose(est.sigma_xw, est.sigma_w_aux, atol=1e-15)
    assert est.scheme == "validation"


def test_validation_hand_moments():
    est = estimate_from_validation(ValidationSample(x=[1.0, 2.0, 3.0], w=[2.0, 4.0, 6.0]))
    assert est.sigma_xw[0, 0] == pytest.approx(4 / 3, abs=1e-15)
    assert est.sigma_w_aux[0, 0] == pytest.approx(8 / 3, abs=1e-15)


def test_validation_large_sample_recovers_sigma_x_gamma():
    spec = SimulationSpec(m=200_000, sigma_delta=0.3, gamma_matrix=example_gamma())
    rng = rng_for(1, 0, "test")
    x = rng.standard_normal((spec.m, 6))
    w = x @ spec.gamma + spec.sigma_delta * rng.standard_normal((spec.m, 6))
    est = estimate_from_validation(ValidationSample(x=x, w=w))
    assert _rel_fro(est.sigma_xw, spec.gamma) < 0.02


def test_validation_too_small():
    with pytest.raises(InsufficientData):
        estimate_from_validation(ValidationSample(x=np.zeros((2, 2)), w=np.zeros((2, 2))))


# ---------------------------------------------------------------- replication


def test_replication_no_error():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(30, 3))
    est = estimate_from_replication(ReplicationSample(w1=w, w2=w))
    np.testing.assert_array_equal(est.sigma_delta, np.zeros((3, 3)))
    np.testing.assert_allclose(est.sigma_w_aux, moment_cov(w), atol=1e-15)


def test_replication_hand_moments():
    est = estimate_from_replication(ReplicationSample(w1=[0.0, 2.0], w2=[0.0, 0.0]))
    assert est.sigma_delta[0, 0] == 0.5
    assert est.sigma_w_aux[0, 0] == 0.5


def test_replication_large_sample_sigma_delta():
    rng = rng_for(2, 0, "test")
    m, s = 50_000, 1 / 6
    x = rng.standard_normal((m, 6))
    est = estimate_from_replication(
        ReplicationSample(w1=x + s * rng.standard_normal((m, 6)), w2=x + s * rng.standard_normal((m, 6)))
    )
    assert _rel_fro(est.sigma_delta, s**2 * np.eye(6)) < 0.05


def test_replication_internal_consistency():
    rng = np.random.default_rng(3)
    w1, w2 = rng.normal(size=(40, 4)), rng.normal(size=(40, 4))
    est = estimate_from_replication(ReplicationSample(w1=w1, w2=w2))
    diff = est.sigma_w_aux - est.sigma_delta
    np.testing.assert_allclose(diff, diff.T, atol=1e-12)
    np.testing.assert_allclose(diff, moment_cov(w1 + w2) / 4 - moment_cov(w1 - w2) / 4, atol=1e-12)
    np.testing.assert_allclose(est.sigma_xw, diff, atol=1e-12)


# ---------------------------------------------------------------- split halves


def test_split_halves_equal_halves():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(10, 2))
    s = SplitHalvesSample(error_prone=[(0, a[:, 0], a[:, 0]), (1, a[:, 1], a[:, 1])], error_free=np.zeros((10, 0)))
    np.testing.assert_array_equal(estimate_from_split_halves(s).sigma_delta, np.zeros((2, 2)))


def test_split_halves_hand_moments():
    s = SplitHalvesSample(error_prone=[(0, [1.0, 3.0], [1.0, 1.0])], error_free=np.zeros((2, 0)))
    est = estimate_from_split_halves(s)
    assert est.sigma_delta[0, 0] == 0.25


def test_split_halves_reference_fixture():
    # Two-row halves engineered so var(a - b) / 4 hits the reference diagonal.
    target = [0.0203, 0.0438, 0.0180]
    prone = []
    for j, t in enumerate(target):
        d = 2 * np.sqrt(t)
        prone.append((j, np.array([d, -d]), np.zeros(2)))
    s = SplitHalvesSample(error_prone=prone, error_free=np.array([[1.0], [2.0]]))
    est = estimate_from_split_halves(s)
    np.testing.assert_allclose(np.diag(est.sigma_delta), target + [0.0], atol=1e-15)
    assert est.sigma_w_primary is None
    np.testing.assert_allclose(s.surrogate()[:, 3], [1.0, 2.0])


def test_split_halves_coordinate_coverage():
    with pytest.raises(InvalidInput):
        SplitHalvesSample(error_prone=[(0, [1.0, 2.0], [1.0, 2.0]), (0, [1.0, 2.0], [1.0, 2.0])], error_free=np.zeros((2, 0)))


def test_split_halves_needs_primary_sigma_w():
    s = SplitHalvesSample(error_prone=[(0, [1.0, 3.0, 2.0], [1.0, 1.0, 2.5])], error_free=np.array([[0.0], [1.0], [3.0]]))
    est = estimate_from_split_halves(s)
    with pytest.raises(InvalidEstimates):
        make_adjustment(est, np.zeros(2))
    adj = make_adjustment(est.with_primary(s.surrogate()), np.zeros(2))
    assert adj.matrix_a[1, 1] == 1.0


# ---------------------------------------------------------------- adjustment


def test_adjustment_identity_when_error_free():
    est = CovEstimates(scheme="replication", sigma_xw=np.eye(2), sigma_w_aux=np.eye(2) * 3, sigma_delta=np.zeros((2, 2)))
    np.testing.assert_array_equal(make_adjustment(est, np.zeros(2)).matrix_a, np.eye(2))


def test_adjustment_scalar_validation():
    est = CovEstimates(scheme="validation", sigma_xw=np.array([[1.0]]), sigma_w_aux=np.array([[2.0]]))
    assert make_adjustment(est, [0.0]).matrix_a[0, 0] == 0.5


def test_adjustment_two_by_two_replication():
    est = CovEstimates(
        scheme="replication", sigma_xw=np.diag([1.0, 2.0]), sigma_w_aux=np.diag([2.0, 2.0]), sigma_delta=np.diag([1.0, 0.0])
    )
    np.testing.assert_allclose(make_adjustment(est, np.zeros(2)).matrix_a, np.diag([0.5, 1.0]))


def test_adjustment_missing_field():
    est = CovEstimates(scheme="replication", sigma_xw=np.eye(2), sigma_w_aux=np.eye(2))
    with pytest.raises(InvalidEstimates):
        make_adjustment(est, np.zeros(2))
    with pytest.raises(InvalidEstimates):
        make_adjustment(est, np.zeros(2), use_primary_sigma_w=True)


def test_replication_primary_flag_uses_primary_sigma_w():
    est = CovEstimates(
        scheme="replication",
        sigma_xw=np.eye(1),
        sigma_w_aux=np.array([[2.0]]),
        sigma_w_primary=np.array([[4.0]]),
        sigma_delta=np.array([[1.0]]),
    )
    assert make_adjustment(est, [0.0]).matrix_a[0, 0] == 0.5
    assert make_adjustment(est, [0.0], use_primary_sigma_w=True).matrix_a[0, 0] == 0.75


def test_adjust_examples():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(15, 3))
    sample = PrimarySample(y=np.arange(15.0), w=w)
    out = adjust(sample, Adjustment(np.eye(3), w.mean(axis=0)))
    np.testing.assert_allclose(out.u, w - w.mean(axis=0))
    np.testing.assert_array_equal(out.y, sample.y)
    scalar = adjust(PrimarySample(y=[0.0, 1.0], w=[4.0, 4.0]), Adjustment([[0.5]], [0.0]))
    np.testing.assert_array_equal(scalar.u.ravel(), [2.0, 2.0])


def test_adjust_dimension_mismatch():
    with pytest.raises(InvalidInput):
        adjust(PrimarySample(y=[0.0, 1.0], w=np.zeros((2, 3))), Adjustment(np.eye(2), np.zeros(2)))


def test_adjust_decomposition_identity():
    spec = SimulationSpec(sigma_delta=0.3, gamma_matrix=example_gamma(), n=500)
    x, y, w = gen_model16(spec, 7)
    delta = gen_model16_delta(spec, 7)
    pop = spec.population()
    adj = make_adjustment(pop, np.zeros(6))
    u = adjust(PrimarySample(y=y, w=w), adj).u
    sigma_u = adj.matrix_a @ pop.sigma_w_aux @ adj.matrix_a.T
    lhs = u - x @ (sigma_u @ np.linalg.inv(spec.sigma_x())).T
    rhs = delta @ adj.matrix_a.T
    assert np.max(np.abs(lhs - rhs)) < 1e-10


@pytest.mark.parametrize("c", [np.array([0.25, -1.5]), np.array([8.0, 0.125])])
def test_adjust_translation_is_exact_on_dyadic_data(c):
    rng = np.random.default_rng(6)
    w = rng.integers(-64, 64, size=(12, 2)) / 8.0
    A = np.array([[0.5, 0.25], [-0.125, 1.0]])
    center = np.array([0.375, -0.5])
    base = adjust(PrimarySample(y=np.zeros(12), w=w), Adjustment(A, center)).u
    moved = adjust(PrimarySample(y=np.zeros(12), w=w + c), Adjustment(A, center + c)).u
    np.testing.assert_array_equal(base, moved)


def test_scheme_equivalence_on_degenerate_data():
    rng = np.random.default_rng(8)
    w = rng.normal(size=(25, 3))
    rep = make_adjustment(estimate_from_replication(ReplicationSample(w1=w, w2=w)), w.mean(axis=0))
    val = make_adjustment(estimate_from_validation(ValidationSample(x=w, w=w)), w.mean(axis=0))
    np.testing.assert_allclose(rep.matrix_a, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(val.matrix_a, np.eye(3), atol=1e-12)


# ---------------------------------------------------------------- factorized variance


def test_surrogate_sigma_u_examples():
    est = CovEstimates(scheme="validation", sigma_xw=np.eye(2), sigma_w_aux=np.eye(2))
    np.testing.assert_allclose(surrogate_sigma_u(est, np.eye(2)), np.eye(2))
    est = CovEstimates(scheme="validation", sigma_xw=np.array([[1.0]]), sigma_w_aux=np.array([[2.0]]))
    assert surrogate_sigma_u(est, np.array([[4.0]]))[0, 0] == 1.0


def test_surrogate_sigma_u_singular():
    est = CovEstimates(scheme="validation", sigma_xw=np.eye(2), sigma_w_aux=np.diag([1.0, 0.0]))
    with pytest.raises(SingularMatrix):
        surrogate_sigma_u(est, np.eye(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["validation", "replication"]))
def test_surrogate_sigma_u_matches_direct_covariance(seed, scheme):
    rng = np.random.default_rng(seed)
    p, n = 4, 60
    w = rng.normal(size=(n, p)) @ rng.normal(size=(p, p)) + rng.normal(size=p)
    if scheme == "validation":
        x = rng.normal(size=(30, p))
        est = estimate_from_validation(ValidationSample(x=x, w=x @ rng.normal(size=(p, p)) + rng.normal(size=(30, p))))
    else:
        base = rng.normal(size=(30, p))
        est = estimate_from_replication(
            ReplicationSample(w1=base + 0.3 * rng.normal(size=(30, p)), w2=base + 0.3 * rng.normal(size=(30, p)))
        )
    u = adjust(PrimarySample(y=np.zeros(n), w=w), make_adjustment(est, w.mean(axis=0))).u
    assert np.max(np.abs(surrogate_sigma_u(est, moment_cov(w)) - moment_cov(u))) < 1e-10


def test_population_estimates_shapes():
    pop = population_estimates(np.eye(3), np.eye(3), 0.04 * np.eye(3))
    np.testing.assert_allclose(pop.sigma_w_aux, 1.04 * np.eye(3))
    np.testing.assert_allclose(pop.sigma_xw, np.eye(3))
