import numpy as np
import pytest

from tdoaflow.errors import FlowStiffness, InvalidFlowKind, InvalidParam
from tdoaflow.flow import (
    FlowKind,
    FlowParams,
    LinearizedModel,
    ParticleSet,
    edh_params,
    flow_tdoa_batch,
    gromov_params,
    lambda_schedule,
    mapping_factor,
    migrate,
)
from tdoaflow.geometry import SensorPair

SCALAR = LinearizedModel(H=1.0, R=1.0, z=1.0, mu0=0.0, P=1.0)


def const(model):
    return lambda x: model


def test_uniform_schedule():
    np.testing.assert_allclose(lambda_schedule(4), [0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(lambda_schedule(1), [1.0])


def test_geometric_schedule():
    np.testing.assert_allclose(lambda_schedule(3, "geometric", 2.0), [1 / 7, 3 / 7, 1.0])


@pytest.mark.parametrize("n", [0, -1, 2.5])
def test_schedule_rejects_bad_length(n):
    with pytest.raises(InvalidParam):
        lambda_schedule(n)


def test_flow_kind_parse():
    assert FlowKind.parse("gromov") is FlowKind.GROMOV
    with pytest.raises(InvalidFlowKind):
        FlowKind.parse("RK4")


def test_edh_params_scalar():
    fp = edh_params(SCALAR, 0.0)
    assert fp.A.item() == pytest.approx(-0.5) and fp.b.item() == pytest.approx(1.0)
    fp = edh_params(SCALAR, 1.0)
    assert fp.A.item() == pytest.approx(-0.25) and fp.b.item() == pytest.approx(0.375)


def test_gromov_params_scalar():
    fp = gromov_params(SCALAR, 0.0)
    assert (fp.A.item(), fp.b.item(), fp.Q.item()) == pytest.approx((-1.0, 1.0, 1.0))
    fp = gromov_params(SCALAR, 1.0)
    assert (fp.A.item(), fp.b.item(), fp.Q.item()) == pytest.approx((-0.5, 0.5, 0.25))


def test_uninformative_measurement():
    m = LinearizedModel(H=0.0, R=1.0, z=1.0, mu0=0.0, P=1.0)
    for fn in (edh_params, gromov_params):
        fp = fn(m, 0.5)
        assert np.all(fp.A == 0) and np.all(fp.b == 0) and np.all(fp.Q == 0)
    x = np.random.default_rng(0).standard_normal((50, 1))
    out = migrate(ParticleSet(x, np.full(50, 0.02)), const(m), lambda_schedule(10), "EDH")
    np.testing.assert_array_equal(out.particles.points, x)


def test_mapping_factor_examples():
    assert mapping_factor([FlowParams(np.array([[-0.5]]), np.zeros(1), np.zeros((1, 1)))], [1.0]) == 0.5
    zero = FlowParams(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 2)))
    assert mapping_factor([zero] * 4, lambda_schedule(4)) == 1.0


def test_mapping_factor_errors():
    noisy = FlowParams(np.zeros((1, 1)), np.zeros(1), np.ones((1, 1)))
    with pytest.raises(InvalidFlowKind):
        mapping_factor([noisy], [1.0])
    stiff = FlowParams(np.array([[-2.0]]), np.zeros(1), np.zeros((1, 1)))
    with pytest.raises(FlowStiffness):
        mapping_factor([stiff], [1.0])


def test_gromov_needs_rng():
    with pytest.raises(InvalidParam):
        migrate(ParticleSet(np.zeros((3, 1)), np.ones(3)), const(SCALAR), [1.0], "GROMOV")


@pytest.mark.parametrize("kind", ["EDH", "GROMOV"])
def test_scalar_kalman_oracle(kind):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5000, 1))
    out = migrate(ParticleSet(x, np.full(5000, 1 / 5000)), const(SCALAR), lambda_schedule(30), kind,
                  rng=rng, mean0=np.zeros(1))
    y = out.particles.points[:, 0]
    assert y.mean() == pytest.approx(0.5, abs=0.03)
    assert y.var() == pytest.approx(0.5, abs=0.05)


def test_gromov_reproducible():
    x = np.random.default_rng(2).standard_normal((100, 1))
    ps = ParticleSet(x, np.full(100, 0.01))
    a = migrate(ps, const(SCALAR), lambda_schedule(5), "GROMOV", rng=np.random.default_rng(9))
    b = migrate(ps, const(SCALAR), lambda_schedule(5), "GROMOV", rng=np.random.default_rng(9))
    np.testing.assert_array_equal(a.particles.points, b.particles.points)


# --- batched TDOA path against the generic implementation -----------------

PAIR = SensorPair(0, (1000, 0, 0), (0, 1000, 0))


def tdoa_provider(z_r, R, mu0, P):
    qa, qb = PAIR.rx_a, PAIR.rx_b

    def provider(x):
        ra, rb = np.linalg.norm(x - qa), np.linalg.norm(x - qb)
        H = (x - qa) / ra - (x - qb) / rb
        return LinearizedModel(H=H, R=R, z=z_r - (ra - rb) + H @ x, mu0=mu0, P=P)

    return provider


def _problem(seed=0, N=40):
    rng = np.random.default_rng(seed)
    mu = np.array([[100.0, -50.0, 20.0], [-300.0, 200.0, 10.0]])
    cov = np.stack([np.diag([400.0, 100.0, 50.0]), np.diag([30.0, 30.0, 30.0])])
    x0 = mu[:, None, :] + np.einsum("kij,knj->kni", np.linalg.cholesky(cov), rng.standard_normal((2, N, 3)))
    return mu, cov, x0


@pytest.mark.parametrize("backend", ["numpy", "numba"])
@pytest.mark.parametrize("kind", ["EDH", "LEDH"])
def test_batch_matches_generic_deterministic(kind, backend):
    mu, cov, x0 = _problem()
    z_r, R, lam = 35.0, 4.0, lambda_schedule(15)
    out = flow_tdoa_batch(mu, cov, x0, PAIR, z_r, R, lam, kind, backend=backend)
    assert np.all(out.ok)
    for k in range(2):
        prov = tdoa_provider(z_r, R, mu[k], cov[k])
        ref = migrate(ParticleSet(x0[k], np.ones(x0.shape[1])), prov, lam, kind, mean0=mu[k])
        np.testing.assert_allclose(out.points[k], ref.particles.points, rtol=1e-9, atol=1e-8)
        np.testing.assert_allclose(out.mean[k], ref.mean_track[-1], rtol=1e-9, atol=1e-8)


@pytest.mark.parametrize("backend", ["numpy", "numba"])
def test_batch_gromov_moments_match_generic(backend):
    from tdoaflow.gmm import GaussianKernel, propagate_moments

    mu, cov, x0 = _problem()
    z_r, R, lam = 35.0, 4.0, lambda_schedule(15)
    out = flow_tdoa_batch(mu, cov, x0, PAIR, z_r, R, lam, "GROMOV",
                          rng=np.random.default_rng(0), backend=backend)
    for k in range(2):
        ref = propagate_moments(GaussianKernel(mu[k], cov[k], 1.0),
                                tdoa_provider(z_r, R, mu[k], cov[k]), lam, "GROMOV")
        np.testing.assert_allclose(out.mean[k], ref.mean, rtol=1e-9, atol=1e-8)
        np.testing.assert_allclose(out.cov[k], ref.cov, rtol=1e-8, atol=1e-8)


def test_batch_flags_receiver_collision():
    mu = np.array([[1000.0, 0.0, 0.0]])
    cov = np.eye(3)[None]
    x0 = mu[:, None, :] + np.zeros((1, 5, 3))
    out = flow_tdoa_batch(mu, cov, x0, PAIR, 0.0, 1.0, lambda_schedule(3), "EDH", backend="numpy")
    assert not out.ok[0]
