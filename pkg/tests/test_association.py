import numpy as np
import pytest
from scipy.integrate import dblquad

from tdoaflow.association import (
    DaConfig,
    FlowSettings,
    PotentialSource,
    SensorScan,
    association_marginals,
    birth_flow,
    clutter_intensity,
    curvature_variance,
    da_fixed_point,
    flow_embedded_beta,
    gate_kernels,
    measurement_update_gamma,
    new_ps_belief,
    new_ps_existence,
    new_ps_xi,
    normalizers,
    prune,
)
from tdoaflow.errors import InvalidParam
from tdoaflow.flow import FlowKind, lambda_schedule
from tdoaflow.geometry import Box, Medium, SensorPair, range_difference
from tdoaflow.gmm import GmmBelief

from oracles import bp_new_marginals, enumerate_marginals

MED = Medium(1500.0, 0.001 / 1500.0)
ROI = Box.cube(1000)
X_PAIR = SensorPair(0, (1000, 0, 0), (-1000, 0, 0))
OBL = SensorPair(1, (1000, 0, 0), (0, 0, 1000))


def settings(kind="GROMOV", K=20, Nl=200, Nn=30, **kw):
    return FlowSettings(FlowKind.parse(kind), lambda_schedule(30), K, Nl, Nn, **kw)


def one_kernel_ps(mean, cov, r=1.0, ps_id=0):
    return PotentialSource(ps_id, GmmBelief(np.asarray(mean, float)[None], np.asarray(cov, float)[None], np.ones(1)), r)


# --- configuration ---------------------------------------------------------


def test_da_config_validation():
    with pytest.raises(InvalidParam):
        DaConfig(p_d=1.5)
    with pytest.raises(InvalidParam):
        DaConfig(mu_c=-1)
    assert DaConfig().r_var == pytest.approx(1e-6)


def test_clutter_intensity_and_normalizer():
    cfg = DaConfig()
    scan = SensorScan(X_PAIR, [0.0, 2.0])
    np.testing.assert_allclose(clutter_intensity(scan, cfg), [1 / 4000, 0.0])
    np.testing.assert_allclose(normalizers(scan, cfg), [1 / 4000, 1.0])
    np.testing.assert_allclose(normalizers(scan, DaConfig(mu_c=0.0)), [1.0, 1.0])


# --- legacy beta messages ---------------------------------------------------


def test_beta_without_measurements():
    cfg = DaConfig()
    ps = one_kernel_ps([0, 0, 0], np.eye(3), r=0.8)
    br = flow_embedded_beta(ps, SensorScan(X_PAIR, []), cfg, settings(), np.random.default_rng(0))
    np.testing.assert_allclose(br.beta, [0.05 * 0.8 + 0.2])


def test_beta_point_mass():
    """A near-point kernel with the likelihood ratio arranged to equal 1.9."""
    cfg = DaConfig(mu_c=0.0)  # normalizer c_m = 1
    x = np.array([100.0, 50.0, 20.0])
    c_m = 1.0
    f = 1.9 * c_m / cfg.p_d
    R = cfg.r_var
    offset = np.sqrt(-2 * R * np.log(f * np.sqrt(2 * np.pi * R)))
    z_r = range_difference(x, X_PAIR) + offset
    ps = one_kernel_ps(x, 1e-14 * np.eye(3))
    br = flow_embedded_beta(ps, SensorScan(X_PAIR, [z_r / MED.c]), cfg, settings("EDH", Nl=1),
                            np.random.default_rng(0))
    assert br.beta[0] == pytest.approx(0.05)
    assert br.beta[1] == pytest.approx(1.9, rel=1e-3)


@pytest.mark.parametrize("kind", ["EDH", "LEDH", "GROMOV"])
def test_beta_against_monte_carlo_oracle(kind):
    """Broad noise so a brute-force prior-sampling oracle is accurate."""
    med = Medium(1500.0, 5.0 / 1500.0)
    cfg = DaConfig(medium=med)
    mu, cov = np.array([200.0, 300.0, -100.0]), np.diag([400.0, 100.0, 225.0])
    z_r = range_difference(mu, OBL) + 8.0
    rng = np.random.default_rng(5)
    xs = rng.multivariate_normal(mu, cov, 2_000_000)
    f = np.exp(-0.5 * (z_r - range_difference(xs, OBL)) ** 2 / cfg.r_var) / np.sqrt(2 * np.pi * cfg.r_var)
    c_m = 1 / (2 * OBL.baseline)
    oracle = cfg.p_d * f.mean() / c_m
    ps = one_kernel_ps(mu, cov)
    br = flow_embedded_beta(ps, SensorScan(OBL, [z_r / med.c]), cfg, settings(kind, Nl=10_000),
                            np.random.default_rng(1))
    assert br.beta[1] == pytest.approx(oracle, rel=0.02)


def test_gate_excludes_far_kernel():
    means = np.array([[0.0, 0, 0], [600.0, 0, 0]])
    covs = np.stack([np.eye(3), np.eye(3)])
    gate = gate_kernels(means, covs, X_PAIR, 0.0, 1e-6)
    np.testing.assert_array_equal(gate, [True, False])


# --- curvature variance ----------------------------------------------------


def test_curvature_variance_zero_at_pair_midpoint():
    assert curvature_variance(np.zeros((1, 3)), np.diag([50.0, 400.0, 400.0])[None], X_PAIR)[0] == pytest.approx(0, abs=1e-18)


def test_curvature_variance_matches_sampling():
    mu = np.array([300.0, 250.0, -200.0])
    P = np.array([[400.0, 50, 0], [50, 300, 20], [0, 20, 100]])
    rng = np.random.default_rng(0)
    y = rng.multivariate_normal(np.zeros(3), P, 400_000)
    h0 = range_difference(mu, OBL)
    eps = 1e-3
    # numerical Hessian of h at mu
    Hs = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            ei, ej = np.eye(3)[i] * eps, np.eye(3)[j] * eps
            Hs[i, j] = (range_difference(mu + ei + ej, OBL) - range_difference(mu + ei - ej, OBL)
                        - range_difference(mu - ei + ej, OBL) + range_difference(mu - ei - ej, OBL)) / (4 * eps * eps)
    quad_term = 0.5 * np.einsum("ni,ij,nj->n", y, Hs, y)
    assert h0 == h0
    assert curvature_variance(mu[None], P[None], OBL)[0] == pytest.approx(quad_term.var(), rel=0.02)


# --- new PS messages ---------------------------------------------------------


def test_xi_without_births_is_one():
    cfg = DaConfig(mu_b=0.0)
    xi = new_ps_xi(SensorScan(X_PAIR, [0.1, -0.3]), cfg, ROI, evidence=[1e-3, 2e-3])
    np.testing.assert_allclose(xi, 1.0)
    xi = new_ps_xi(SensorScan(X_PAIR, [0.1]), DaConfig(), ROI, evidence=[0.0])
    np.testing.assert_allclose(xi, 1.0)


def test_birth_evidence_plane_case():
    """z = 0 on the x-pair: E = (1/V) ∫_{plane ∩ ROI} dA / |∇h|."""
    cfg = DaConfig()
    grad = lambda y, z: 2000.0 / np.sqrt(1e6 + y * y + z * z)  # noqa: E731
    area, _ = dblquad(lambda z, y: 1.0 / grad(y, z), -1000, 1000, -1000, 1000)
    oracle = area / ROI.volume
    vals = [birth_flow(0.0, SensorScan(X_PAIR, [0.0]), cfg, ROI, settings(K=50, Nn=200),
                       np.random.default_rng(s)).evidence for s in range(3)]
    assert np.mean(vals) == pytest.approx(oracle, rel=0.05)


def test_birth_outside_roi_gives_zero_evidence():
    cfg = DaConfig()
    tiny = Box((-10, -10, -10), (10, 10, 10))
    b = birth_flow(1.3, SensorScan(X_PAIR, [1.3]), cfg, tiny, settings(), np.random.default_rng(0))
    assert b.evidence == 0.0 and b.belief is None


def _weighted_quantile(v, w, q):
    o = np.argsort(v)
    return v[o][np.searchsorted(np.cumsum(w[o]) / w.sum(), q)]


def test_birth_belief_exact_noise_is_on_shell():
    cfg = DaConfig()
    z = 0.2
    b = birth_flow(z, SensorScan(OBL, [z]), cfg, ROI, settings(K=30, Nn=50, curvature_inflation=False),
                   np.random.default_rng(3))
    resid = np.abs(range_difference(b.belief.points, OBL) - z * MED.c)
    assert _weighted_quantile(resid, b.belief.point_weights, 0.9) < 0.05


def test_birth_belief_inflated_noise_is_well_spread():
    cfg = DaConfig()
    z = 0.2
    b = birth_flow(z, SensorScan(OBL, [z]), cfg, ROI, settings(K=30, Nn=50), np.random.default_rng(3))
    w = b.belief.point_weights
    resid = np.abs(range_difference(b.belief.points, OBL) - z * MED.c)
    assert 1 / np.sum(w ** 2) > 100
    assert _weighted_quantile(resid, w, 0.9) < 30.0


def test_new_ps_existence():
    assert new_ps_existence([1.0, 0.0], 1.0, 1.0) == 0.0  # no birth mass
    assert new_ps_existence([1.0, 0.0], 3.0, 1.0) == pytest.approx(2 / 3)
    assert new_ps_existence([1.0, 2.0], 3.0, 1.0) == pytest.approx(2 / 5)


def test_new_ps_belief_zero_birth_rate():
    cfg = DaConfig(mu_b=0.0)
    scan = SensorScan(X_PAIR, [0.1])
    out = new_ps_belief(scan, np.array([[1.0]]), cfg, ROI, settings(K=10), np.random.default_rng(0))
    assert len(out) == 1 and out[0].existence == 0.0


# --- data association ------------------------------------------------------------


def test_da_tree_example():
    beta = np.array([[0.05, 1.9]])
    res = da_fixed_point(beta, np.array([1.0]))
    p = association_marginals(beta, res.kappa)
    assert p[0, 1] == pytest.approx(1.9 / 1.95, abs=1e-9)
    assert p[0, 1] == pytest.approx(0.97436, abs=1e-5)


def test_da_no_measurements():
    res = da_fixed_point(np.array([[0.4]]), np.zeros(0))
    np.testing.assert_array_equal(res.kappa, [[1.0]])
    assert res.converged


@pytest.mark.parametrize("seed", range(10))
def test_da_tree_cases_exact(seed):
    rng = np.random.default_rng(seed)
    for J, M in [(1, int(rng.integers(1, 4))), (int(rng.integers(1, 4)), 1)]:
        beta = rng.uniform(0.01, 2.0, (J, M + 1))
        xi0 = rng.uniform(0.1, 2.0, M)
        res = da_fixed_point(beta, xi0, tol=1e-12, max_iters=1000)
        pa, pb = enumerate_marginals(beta, xi0)
        np.testing.assert_allclose(association_marginals(beta, res.kappa), pa, atol=1e-6)
        np.testing.assert_allclose(bp_new_marginals(xi0, res.iota), pb, atol=1e-6)


def generic_loopy_bp(beta, xi0, iters=3000):
    """Plain sum-product on the (a_j, b_m) pairwise graph, damped, for cross-checking."""
    J, M = beta.shape[0], beta.shape[1] - 1
    psi = np.ones((J, M, M + 1, J + 1))
    for j in range(J):
        for m in range(M):
            for a in range(M + 1):
                for b in range(J + 1):
                    if (a == m + 1) != (b == j + 1):
                        psi[j, m, a, b] = 0.0
    ub = np.ones((M, J + 1))
    ub[:, 0] = xi0
    a2b = np.ones((J, M, J + 1))
    b2a = np.ones((J, M, M + 1))
    for _ in range(iters):
        new_b2a = np.empty_like(b2a)
        new_a2b = np.empty_like(a2b)
        for j in range(J):
            for m in range(M):
                inc = ub[m] * np.prod([a2b[k, m] for k in range(J) if k != j], axis=0)
                v = psi[j, m] @ inc
                new_b2a[j, m] = v / v.sum()
                inc = beta[j] * np.prod([b2a[j, n] for n in range(M) if n != m], axis=0)
                v = psi[j, m].T @ inc
                new_a2b[j, m] = v / v.sum()
        delta = max(np.abs(new_b2a - b2a).max(), np.abs(new_a2b - a2b).max())
        a2b, b2a = 0.5 * (a2b + new_a2b), 0.5 * (b2a + new_b2a)
        if delta < 1e-13:
            break
    p = beta * np.prod(b2a, axis=1)
    return p / p.sum(axis=1, keepdims=True)


def test_da_matches_generic_sum_product_on_loops():
    rng = np.random.default_rng(11)
    for _ in range(15):
        J, M = rng.integers(2, 4, 2)
        beta = rng.uniform(0.01, 1.0, (J, M + 1))
        xi0 = rng.uniform(0.1, 1.5, M)
        res = da_fixed_point(beta, xi0, tol=1e-12, max_iters=5000)
        np.testing.assert_allclose(association_marginals(beta, res.kappa), generic_loopy_bp(beta, xi0), atol=1e-8)


def test_da_two_by_two_close_to_enumeration_on_average():
    rng = np.random.default_rng(11)
    tv = []
    for _ in range(50):
        beta = rng.uniform(0.01, 1.0, (2, 3))
        xi0 = rng.uniform(0.1, 1.5, 2)
        res = da_fixed_point(beta, xi0)
        pa, _ = enumerate_marginals(beta, xi0)
        tv.append(0.5 * np.abs(association_marginals(beta, res.kappa) - pa).sum(axis=1).max())
    assert np.mean(tv) < 0.05


# --- belief update -------------------------------------------------------------


def _beta_for(ps, scan, cfg, kind="GROMOV", N=4000, seed=0):
    return flow_embedded_beta(ps, scan, cfg, settings(kind, Nl=N), np.random.default_rng(seed))


def test_missed_detection_only_update():
    cfg = DaConfig()
    mu, cov = np.array([10.0, 20.0, 30.0]), np.diag([4.0, 9.0, 1.0])
    ps = one_kernel_ps(mu, cov, r=0.6)
    scan = SensorScan(X_PAIR, [range_difference(mu, X_PAIR) / MED.c])
    br = _beta_for(ps, scan, cfg)
    out = measurement_update_gamma(ps, np.array([1.0, 0.0]), br, scan, cfg)
    r = 0.6
    assert out.existence == pytest.approx(0.05 * r / (0.05 * r + 1 - r))
    np.testing.assert_allclose(out.belief.means[0], mu, atol=0.2)
    np.testing.assert_allclose(np.diag(out.belief.covs[0]), np.diag(cov), rtol=0.1)


def test_update_posterior_against_importance_oracle():
    """Broad noise: compare against likelihood-weighted prior samples along the gradient."""
    med = Medium(1500.0, 3.0 / 1500.0)
    cfg = DaConfig(medium=med, mu_c=1.0)
    mu, cov = np.array([200.0, 300.0, -100.0]), np.diag([400.0, 100.0, 225.0])
    z_r = range_difference(mu, OBL) + 10.0
    scan = SensorScan(OBL, [z_r / med.c])
    ps = one_kernel_ps(mu, cov, r=1.0)
    br = _beta_for(ps, scan, cfg, N=20_000, seed=2)
    res = da_fixed_point(br.beta[None], new_ps_xi(scan, cfg, ROI, evidence=[0.0]))
    out = measurement_update_gamma(ps, res.kappa[0], br, scan, cfg)
    rng = np.random.default_rng(3)
    xs = rng.multivariate_normal(mu, cov, 1_000_000)
    lr = cfg.p_d * np.exp(-0.5 * (z_r - range_difference(xs, OBL)) ** 2 / cfg.r_var) / np.sqrt(2 * np.pi * cfg.r_var)
    lr /= clutter_intensity(scan, cfg)[0]
    k = res.kappa[0]
    w = k[0] * (1 - cfg.p_d) + k[1] * lr
    g = (mu - OBL.rx_a) / np.linalg.norm(mu - OBL.rx_a) - (mu - OBL.rx_b) / np.linalg.norm(mu - OBL.rx_b)
    g /= np.linalg.norm(g)
    bins = np.linspace(-60, 60, 41)
    ref, _ = np.histogram((xs - mu) @ g, bins, weights=w)
    est, _ = np.histogram((out.belief.points - mu) @ g, bins, weights=out.belief.point_weights)
    tv = 0.5 * np.abs(ref / ref.sum() - est / est.sum()).sum()
    assert tv <= 0.05


def test_prune():
    ps = [one_kernel_ps([0, 0, 0], np.eye(3), r) for r in (0.9, 1e-4)]
    assert [p.existence for p in prune(ps, 1e-3)] == [0.9]
    assert len(prune(ps, 0.0)) == 2
    assert prune(ps, 0.95) == []
