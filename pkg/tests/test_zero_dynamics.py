import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neural_gaits import dynamics as dyn
from neural_gaits import policy as pol
from neural_gaits import zero_dynamics as zd


def z_batch(rng, n=32):
    return np.column_stack([rng.uniform(-0.25, 0.25, n), rng.uniform(22.0, 38.0, n)])


def test_phi_round_trip_on_manifold(net_policy, model, rng):
    z = z_batch(rng)
    q, dq = zd.phi_inverse_zero(z, net_policy, model)
    eta, z_back = zd.phi(q, dq, net_policy, model)
    assert np.max(np.abs(z_back - z)) < 1e-10
    assert np.max(np.abs(eta)) < 1e-10


def test_phi_round_trip_off_manifold(net_policy, model, rng):
    z = z_batch(rng)
    eta = 0.1 * rng.normal(size=(len(z), 4))
    q, dq = zd.phi_inverse(eta, z, net_policy, model)
    eta_back, z_back = zd.phi(q, dq, net_policy, model)
    assert np.max(np.abs(z_back - z)) < 1e-10
    assert np.max(np.abs(eta_back - eta)) < 1e-10


def test_momentum_rate_is_gravity_torque(net_policy, model, rng):
    # z2 = M[0] dq has no input dependence, so its rate is -dV/dq_u for any u
    z = z_batch(rng, 4)
    q, dq = zd.phi_inverse(0.05 * rng.normal(size=(4, 4)), z, net_policy, model)
    assert np.allclose(zd.gradient_z2_along_inputs(q[0], dq[0], model), 0.0, atol=1e-12)
    for i in range(4):
        u = rng.normal(size=2) * 20
        x = np.concatenate([q[i], dq[i]])
        h = 1e-6
        xp = x + h * dyn.state_derivative(x, u, model)
        xm = x - h * dyn.state_derivative(x, u, model)
        z2p = zd.zero_state(xp[:3], xp[3:], model)[1]
        z2m = zd.zero_state(xm[:3], xm[3:], model)[1]
        assert np.isclose((z2p - z2m) / (2 * h), -dyn.dV_dqu(q[i], model), rtol=1e-6, atol=1e-6)


def test_lift_velocity_is_consistent(net_policy, model, rng):
    z = z_batch(rng, 8)
    lf = zd.lift(z, net_policy, model)
    h = 1e-6
    qp = zd.lift(z + h * lf.zdot, net_policy, model).q
    qm = zd.lift(z - h * lf.zdot, net_policy, model).q
    assert np.allclose(lf.dq, (qp - qm) / (2 * h), rtol=1e-6, atol=1e-6)


def test_omega_eta_reduces_to_omega(net_policy, model, rng):
    z = z_batch(rng)
    w = zd.omega(z, net_policy, model)
    assert np.allclose(zd.omega_eta(np.zeros((len(z), 4)), z, net_policy, model), w, atol=1e-12)


def test_residual_is_additive(net_policy, model, rng):
    z = z_batch(rng)
    eps = pol.init_policy(7, kind="residual", input_center=(0.0, 30.0), input_scale=(0.25, 10.0),
                          output_scale=(0.3, 2.0))
    diff = zd.omega(z, net_policy, model, eps) - zd.omega(z, net_policy, model)
    assert np.allclose(diff, pol.forward(z, eps), atol=1e-12)


def test_upright_pose_has_no_gravity_torque(model):
    # every link vertical: zero torque about the pivot
    q = np.array([0.0, 0.0, 0.0])
    assert abs(dyn.dV_dqu(q, model)) < 1e-12


@settings(max_examples=10, deadline=None)
@given(st.floats(0.12, 0.25), st.floats(-0.1, 0.1), st.floats(0.0, 6.0), st.floats(22.0, 38.0))
def test_impact_matched_prior_is_invariant_at_the_guard(a, lean, bulge, z2):
    model = dyn.ModelParams()
    net = pol.MLPParams(sizes=(2, 2, 2), prior_poly=zd.impact_matched_prior(model, a, lean, bulge))
    z = np.array([[a, z2]])
    zp, eta = zd.zero_impact(z, net, model)
    assert np.max(np.abs(eta)) < 1e-9
    assert np.isclose(zp[0, 0], -a, atol=1e-12)


def test_impact_matched_prior_keeps_foot_on_guard(model):
    a = 0.2
    net = pol.MLPParams(sizes=(2, 2, 2), prior_poly=zd.impact_matched_prior(model, a, 0.0, 5.0))
    for z1 in (-a, a):
        q = zd.phi_inverse_zero(np.array([[z1, 30.0]]), net, model)[0][0]
        assert abs(dyn.guard_value(q, model)) < 1e-12


def test_stride_map_returns_to_guard(prior_policy, model):
    z = np.array([[0.2, 30.0], [0.19, 26.0]])
    z_next, ok = zd.stride_map(z, prior_policy, model, 0.2, n_steps=16)
    assert ok.all()
    assert np.allclose(z_next[:, 0], 0.2)
    assert np.all(z_next[:, 1] > 0)


def test_singular_reconstruction_raises(model):
    with pytest.raises(ValueError):
        zd.impact_matched_prior(model, 0.0)
