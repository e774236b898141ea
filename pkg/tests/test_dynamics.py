import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neural_gaits import dynamics as dyn
from neural_gaits import simulator as sim

angles = st.floats(-0.6, 0.6)
rates = st.floats(-3.0, 3.0)


def fd(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    out = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(out, axis=-1)


@settings(max_examples=40, deadline=None)
@given(angles, angles, angles)
def test_mass_matrix_symmetric_positive(a, b, c):
    M = dyn.mass_matrix(np.array([a, b, c]), dyn.ModelParams())
    assert np.allclose(M, M.T, atol=1e-14)
    assert np.linalg.eigvalsh(M)[0] > 0


def test_gravity_matches_potential_gradient(model, rng):
    for _ in range(5):
        q = rng.uniform(-0.5, 0.5, 3)
        G = dyn.gravity_vector(q, model)
        g_fd = fd(lambda x: dyn.potential_energy(x, model), q)
        assert np.allclose(G, g_fd, rtol=1e-8, atol=1e-7)


def test_coriolis_skew_property(model, rng):
    q = rng.uniform(-0.5, 0.5, 3)
    dq = rng.uniform(-2, 2, 3)
    Mdot = fd(lambda x: dyn.mass_matrix(x, model), q) @ dq
    N = Mdot - 2 * dyn.coriolis_matrix(q, dq, model)
    assert np.allclose(N, -N.T, atol=1e-7)


def test_passive_energy_drift(model):
    # undamped, unactuated: energy is conserved up to the integrator error
    x = np.array([0.1, -0.05, -0.2, -0.4, 0.3, 0.6])
    e0 = dyn.total_energy(x[:3], x[3:], model)
    h = 1e-4
    for _ in range(10_000):
        x = sim.rk4_step(x, np.zeros(2), h, model)
    e1 = dyn.total_energy(x[:3], x[3:], model)
    assert abs(e1 - e0) / abs(e0) < 1e-6


def test_damping_dissipates(model):
    p = dyn.surrogate_params(model)
    x = np.array([0.1, -0.05, -0.2, -0.4, 0.3, 0.6])
    e0 = dyn.total_energy(x[:3], x[3:], p)
    for _ in range(2000):
        x = sim.rk4_step(x, np.zeros(2), 1e-4, p)
    assert dyn.total_energy(x[:3], x[3:], p) < e0


def _on_guard(model, z1=0.2, torso=0.1):
    # symmetric stance: swing absolute angle mirrors the stance angle
    return np.array([z1, torso - z1, -2 * z1])


def test_swing_foot_on_guard_for_symmetric_pose(model):
    q = _on_guard(model)
    assert abs(dyn.guard_value(q, model)) < 1e-12


def test_impact_conserves_momentum_about_new_contact(model):
    q = _on_guard(model)
    dq = np.array([0.8, -0.5, -1.0])
    res = dyn.impact_map(q, dq, model)
    foot = dyn.swing_foot(q, model)
    before = dyn.angular_momentum(q, dq, model, about=foot)
    # after the impact the new stance foot is the origin of the relabelled model
    after = dyn.angular_momentum(res.q, res.dq, model)
    assert abs(after - before) / abs(before) < 1e-8


def test_impact_lifts_old_stance_and_loses_energy(model):
    q = _on_guard(model)
    dq = np.array([0.8, -0.5, -1.0])
    res = dyn.impact_map(q, dq, model)
    assert dyn.swing_foot_velocity(res.q, res.dq, model)[1] > 0
    assert res.energy_loss > 0
    assert res.impulse[1] > 0


def test_impact_rejects_off_guard(model):
    q = _on_guard(model) + np.array([0.0, 0.0, 0.1])
    with pytest.raises(dyn.GuardError):
        dyn.impact_map(q, np.array([0.8, -0.5, -1.0]), model)


@given(angles, angles, angles)
def test_relabel_is_involution(a, b, c):
    q = np.array([a, b, c])
    assert np.array_equal(dyn.RELABEL @ dyn.RELABEL, np.eye(3))
    # the map itself is exact; floating point sums round at the ulp level
    assert np.allclose(dyn.relabel(dyn.relabel(q)), q, rtol=0, atol=4e-16)


def test_relabel_keeps_configuration(model):
    q = _on_guard(model, torso=0.13)
    qp = dyn.relabel(q)
    # the torso keeps its absolute angle; the legs swap
    assert np.isclose(dyn.torso_angle(q), dyn.torso_angle(qp))
    t, tp = dyn.link_angles(q), dyn.link_angles(qp)
    assert np.allclose([t[0], t[2]], [tp[2], tp[0]])


def test_params_validation():
    with pytest.raises(ValueError):
        dyn.ModelParams(leg_mass=0.0)
    with pytest.raises(ValueError):
        dyn.ModelParams(joint_damping=-1.0)
    p = dyn.surrogate_params()
    assert dyn.ModelParams.from_dict(p.to_dict()) == p


def test_forward_dynamics_rejects_nonfinite(model):
    with pytest.raises(dyn.DomainError):
        dyn.forward_dynamics(np.array([np.nan, 0, 0]), np.zeros(3), np.zeros(2), model)
