import numpy as np
import pytest
import scipy.linalg as sla
from scipy.special import expit

from gazelab.design import build_frame
from gazelab.errors import (ConvergenceError, DegreesOfFreedomError, DomainError,
                            SingularityError)
from gazelab.gee import (ClusterBlock, WorkingCorrelation, _sandwich, ar1_inverse_apply,
                         build_correlation, estimate_phi_ar1, estimate_scale, gee_fit,
                         regularized_correlation, sandwich_covariance)
from gazelab.glm import fit_irls
from gazelab.sim import SimConfig, simulate


def block(r, key=("s", "i")):
    r = np.asarray(r, float)
    return ClusterBlock(key, slice(0, len(r)), np.full(len(r), 0.25), r)


# --- working correlation -------------------------------------------------

def test_ar1_small():
    R = build_correlation(WorkingCorrelation("ar1", 0.5), 3)
    np.testing.assert_array_equal(R, [[1, .5, .25], [.5, 1, .5], [.25, .5, 1]])


def test_independence_identity():
    np.testing.assert_array_equal(build_correlation(WorkingCorrelation("ind"), 4), np.eye(4))


def test_toeplitz_band_structure():
    R = build_correlation(WorkingCorrelation("ma", 0.3, bandwidth=2), 5)
    assert R[0, 0] == 1 and R[0, 1] == R[0, 2] == 0.3 and R[0, 3] == 0 and R[1, 4] == 0
    np.testing.assert_array_equal(R, R.T)


def test_ridge_added():
    R = build_correlation(WorkingCorrelation("ar1", 0.5, ridge=0.1), 3)
    assert R[0, 0] == pytest.approx(1.1) and R[0, 1] == 0.5


def test_ar1_ridge_eigenvalue_bound():
    R = build_correlation(WorkingCorrelation("ar1", 0.95, ridge=1e-5), 112)
    base = build_correlation(WorkingCorrelation("ar1", 0.95), 112)
    lam = np.linalg.eigvalsh(R)[0]
    assert lam >= 1e-5
    assert lam == pytest.approx(1e-5 + np.linalg.eigvalsh(base)[0], rel=1e-8)


def test_toeplitz_floor_reported():
    spec = WorkingCorrelation("ma", 0.95, bandwidth=25, ridge=1e-2)
    with pytest.warns(UserWarning, match="floored"):
        R = build_correlation(spec, 112)
    assert np.linalg.eigvalsh(R)[0] >= 1e-2 * (1 - 1e-9)
    _, dev = regularized_correlation(spec, 112)
    assert dev > 0


def test_floor_without_ridge_uses_1e8():
    R, dev = regularized_correlation(WorkingCorrelation("ma", 0.9, bandwidth=10), 60)
    assert dev > 0 and np.linalg.eigvalsh(R)[0] >= 1e-8 * (1 - 1e-6)


@pytest.mark.parametrize("phi", [-0.999, -0.5, 0.0, 0.5, 0.95, 0.999])
def test_ar1_positive_definite(phi):
    for T in (1, 2, 17, 112):
        sla.cholesky(build_correlation(WorkingCorrelation("ar1", phi), T))


@pytest.mark.parametrize("phi", [1.0, -1.0, 1.5])
def test_phi_domain(phi):
    with pytest.raises(DomainError):
        WorkingCorrelation("ar1", phi)


def test_bad_spec():
    with pytest.raises(DomainError):
        WorkingCorrelation("exchangeable")
    with pytest.raises(DomainError):
        WorkingCorrelation("ma", 0.5, estimate_phi=True)
    with pytest.raises(DomainError):
        WorkingCorrelation("ar1", 0.5, ridge=-1)
    with pytest.raises(DomainError):
        WorkingCorrelation("ma", 0.5, bandwidth=0)


@pytest.mark.parametrize("phi", [-0.8, 0.3, 0.95, 0.999])
def test_ar1_inverse_matches_dense(phi):
    rng = np.random.default_rng(1)
    for T in (1, 2, 5, 112):
        z = rng.normal(size=(3, T))
        dense = np.linalg.solve(build_correlation(WorkingCorrelation("ar1", phi), T), z.T).T
        np.testing.assert_allclose(ar1_inverse_apply(phi, z), dense, rtol=0,
                                   atol=1e-10 * max(1, np.abs(dense).max()))


# --- moment estimators ---------------------------------------------------

def test_phi_constant_residuals_clamped():
    est = estimate_phi_ar1([block(np.ones(7))])
    assert est.raw == 1.0 and est.value == 0.999 and est.clamped


def test_phi_alternating_clamped():
    est = estimate_phi_ar1([block([1, -1, 1, -1, 1])])
    assert est.raw == -1.0 and est.value == -0.999 and est.clamped


def test_phi_hand_case():
    # (0.5*0.2 + 0.2*(-0.1) + 1*(-1)) / (2 + 1)
    est = estimate_phi_ar1([block([0.5, 0.2, -0.1]), block([1.0, -1.0])])
    assert est.raw == pytest.approx((0.1 - 0.02 - 1.0) / 3, abs=1e-15)
    assert not est.clamped


def test_phi_white_noise():
    rng = np.random.default_rng(7)
    est = estimate_phi_ar1([block(rng.normal(size=112)) for _ in range(100)])
    assert abs(est.value) < 0.05


def test_phi_order_invariant():
    rng = np.random.default_rng(8)
    blocks = [block(rng.normal(size=rng.integers(1, 30))) for _ in range(20)]
    a = estimate_phi_ar1(blocks).raw
    b = estimate_phi_ar1(blocks[::-1]).raw
    assert a == pytest.approx(b, rel=1e-14)


def test_phi_undefined_for_length_one():
    with pytest.raises(DegreesOfFreedomError):
        estimate_phi_ar1([block([0.3]), block([1.0])])


def test_scale():
    assert estimate_scale([block([1, -1, 1]), block([-1, 1])], q=0) == 1.0
    assert estimate_scale([block([1, -1, 1]), block([-1, 1, 1])], q=1) == pytest.approx(6 / 5)
    assert estimate_scale([block(np.zeros(4))], q=1) == 0.0
    with pytest.raises(DegreesOfFreedomError):
        estimate_scale([block([1, 1])], q=2)


# --- sandwich ------------------------------------------------------------

def test_sandwich_identity_meat_equals_bread():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4))
    B = A @ A.T + 4 * np.eye(4)
    scores = sla.cholesky(B, lower=False)  # rows s_k with sum s_k s_k' = B
    np.testing.assert_allclose(_sandwich(B, scores), np.linalg.inv(B), rtol=1e-10)


def test_sandwich_symmetric_psd():
    rng = np.random.default_rng(2)
    D = [rng.normal(size=(6, 3)) for _ in range(15)]
    V = [build_correlation(WorkingCorrelation("ar1", 0.6), 6) for _ in range(15)]
    e = [rng.normal(size=6) for _ in range(15)]
    cov = sandwich_covariance(e, D, V)
    assert np.array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov)[0] >= -1e-10


def test_sandwich_single_cluster_warns():
    rng = np.random.default_rng(3)
    with pytest.warns(UserWarning, match="rank"):
        sandwich_covariance([rng.normal(size=5)], [rng.normal(size=(5, 3))], [np.eye(5)])


def test_sandwich_singular_bread():
    with pytest.raises(SingularityError):
        sandwich_covariance([np.ones(3)] * 4, [np.zeros((3, 2))] * 4, [np.eye(3)] * 4)


# --- fitting -------------------------------------------------------------

@pytest.fixture(scope="module")
def ar1_data():
    cfg = SimConfig(n_subjects=8, n_items=10, T=30, mechanism="latent_ar1", latent_phi=0.7,
                    true_beta={"Intercept": -0.3, "Contrast": 0.4, "Time": 0.8}, seed=4)
    return build_frame(simulate(cfg).series)


def test_independence_reduces_to_irls(small_markov, ar1_data):
    for frame in (build_frame(small_markov), ar1_data, build_frame(small_markov, lag=True)):
        fit = gee_fit(frame, WorkingCorrelation("ind"))
        np.testing.assert_allclose(fit.params, fit_irls(frame).params, atol=1e-6, rtol=0)
        assert fit.correlation is None


def test_independence_model_cov_scaled_inverse_information(ar1_data):
    fit = gee_fit(ar1_data, WorkingCorrelation("ind"))
    glm = fit_irls(ar1_data)
    np.testing.assert_allclose(fit.covariance_model, glm.covariance_model * fit.dispersion,
                               rtol=1e-5)


def _quasi_score(frame, beta, R_of_T, alpha):
    p = expit(frame.design @ beta)
    a = p * (1 - p)
    U = np.zeros(len(beta))
    b = frame.cluster_bounds()
    for c in range(frame.n_clusters):
        s = slice(b[c], b[c + 1])
        T = b[c + 1] - b[c]
        sq = np.sqrt(a[s])
        V = alpha * sq[:, None] * R_of_T(T) * sq[None, :]
        D = frame.design[s] * a[s][:, None]
        U += D.T @ np.linalg.solve(V, frame.response[s] - p[s])
    return U


@pytest.mark.parametrize("spec", [WorkingCorrelation("ar1", 0.6),
                                  WorkingCorrelation("ar1", 0.95, ridge=1e-5),
                                  WorkingCorrelation("ma", 0.4, bandwidth=3, ridge=1e-2)])
def test_fixed_phi_solves_quasi_score(ar1_data, spec):
    fit = gee_fit(ar1_data, spec)
    U = _quasi_score(ar1_data, fit.params, lambda T: regularized_correlation(spec, T)[0],
                     fit.dispersion)
    assert np.max(np.abs(U)) < 1e-7
    assert fit.correlation == spec.phi
    assert fit.diagnostics["phi_mode"] == "fixed"


def test_estimated_phi_is_fixed_point(ar1_data):
    fit = gee_fit(ar1_data, WorkingCorrelation("ar1", estimate_phi=True))
    assert fit.diagnostics["phi_mode"] == "estimated"
    assert 0.3 < fit.correlation < 0.95
    # refitting at the estimated phi returns the same coefficients
    refit = gee_fit(ar1_data, WorkingCorrelation("ar1", fit.correlation))
    np.testing.assert_allclose(refit.params, fit.params, atol=1e-6)
    assert fit.diagnostics["phi_moment"] == pytest.approx(fit.correlation, abs=1e-6)


def test_dense_and_tridiagonal_paths_agree(ar1_data):
    a = gee_fit(ar1_data, WorkingCorrelation("ar1", 0.6))
    b = gee_fit(ar1_data, WorkingCorrelation("ar1", 0.6, ridge=1e-13))
    np.testing.assert_allclose(a.params, b.params, atol=1e-8)
    np.testing.assert_allclose(a.covariance_robust, b.covariance_robust, rtol=1e-6)


def test_robust_covariance_psd(ar1_data):
    fit = gee_fit(ar1_data, WorkingCorrelation("ar1", 0.6))
    cov = fit.covariance_robust
    assert np.array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov)[0] >= -1e-10


def test_unequal_cluster_lengths(small_markov):
    trimmed = [s for s in small_markov]
    for k, s in enumerate(trimmed[:10]):
        s = type(s)(s.subject_id, s.item_id, s.samples[: 5 + k], s.bin_seconds, s.contrast,
                    s.privileged)
        trimmed[k] = s
    trimmed = [s for s in trimmed if np.ptp(s.samples) > 0]
    frame = build_frame(trimmed)
    fit = gee_fit(frame, WorkingCorrelation("ar1", 0.5))
    U = _quasi_score(frame, fit.params,
                     lambda T: build_correlation(WorkingCorrelation("ar1", 0.5), T),
                     fit.dispersion)
    assert np.max(np.abs(U)) < 1e-7


def test_nonconvergence_trace(ar1_data):
    with pytest.raises(ConvergenceError) as exc:
        gee_fit(ar1_data, WorkingCorrelation("ar1", 0.9), max_iter=1,
                beta0=np.zeros(ar1_data.design.shape[1]))
    assert "beta" in exc.value.trace and "score_norm" in exc.value.trace


@pytest.mark.slow
def test_sandwich_matches_cluster_bootstrap():
    cfg = SimConfig(n_subjects=20, n_items=10, T=20, mechanism="latent_ar1", latent_phi=0.6,
                    true_beta={"Intercept": -0.2, "Contrast": 0.3, "Time": 0.5}, seed=21)
    frame = build_frame(simulate(cfg).series)
    spec = WorkingCorrelation("ar1", 0.6)
    fit = gee_fit(frame, spec)
    rng = np.random.default_rng(99)
    b = frame.cluster_bounds()
    rows = [np.arange(b[c], b[c + 1]) for c in range(frame.n_clusters)]
    draws = []
    for _ in range(500):
        pick = rng.integers(frame.n_clusters, size=frame.n_clusters)
        idx = np.concatenate([rows[c] for c in pick])
        boot = type(frame)(frame.response[idx], frame.design[idx], frame.column_names,
                           np.repeat(np.arange(len(pick)), [len(rows[c]) for c in pick]),
                           [(str(k), "") for k in range(len(pick))], frame.subject[idx],
                           frame.subject_labels, frame.item[idx], frame.item_labels,
                           frame.time[idx])
        draws.append(gee_fit(boot, spec, beta0=fit.params).params)
    boot_se = np.std(draws, axis=0, ddof=1)
    ratio = fit.std_errors(robust=True).to_numpy() / boot_se
    assert np.all(np.abs(ratio - 1) < 0.15), ratio
