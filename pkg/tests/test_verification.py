import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neural_gaits import barriers as bar
from neural_gaits import training as tr
from neural_gaits import verification as ver

BOX = (np.array([-1.0, -2.0]), np.array([1.0, 2.0]))


def test_lipschitz_of_linear_map_is_spectral_norm():
    W = np.array([[2.0, -1.0], [0.5, 3.0]])
    est = ver.lipschitz_estimate(lambda x: x @ W.T, BOX, n_pairs=100_000, seed=0, safety=1.0)
    true = np.linalg.norm(W, 2)
    assert est <= true * (1 + 1e-12)
    assert est >= 0.95 * true


def test_lipschitz_of_constant_is_zero():
    assert ver.lipschitz_estimate(lambda x: np.ones((len(x), 3)), BOX, 1000, 0) == 0.0


@settings(max_examples=10, deadline=None)
@given(st.integers(10, 400), st.integers(0, 2**16))
def test_lipschitz_monotone_in_pairs(n, seed):
    f = lambda x: np.sin(3 * x[:, :1]) * x[:, 1:]  # noqa: E731
    small = ver.lipschitz_estimate(f, BOX, n, seed)
    large = ver.lipschitz_estimate(f, BOX, 2 * n, seed)
    assert large >= small


def test_lipschitz_safety_factor():
    f = lambda x: np.tanh(x)  # noqa: E731
    raw = ver.lipschitz_estimate(f, BOX, 500, 1, safety=1.0)
    assert np.isclose(ver.lipschitz_estimate(f, BOX, 500, 1), ver.LIPSCHITZ_SAFETY * raw)


def test_lipschitz_masked_coordinates():
    f = lambda x: 10 * x[:, :1] + x[:, 1:]  # noqa: E731
    est = ver.lipschitz_estimate(f, BOX, 5000, 0, safety=1.0, vary=[False, True])
    assert np.isclose(est, 1.0)


def test_scalar_lyapunov_closed_form():
    a = 3.0
    ly = ver.lyapunov_from_matrix(np.array([[-a]]))
    assert np.isclose(ly.P[0, 0], 1 / (2 * a))
    assert np.isclose(ly.gamma, 2 * a)


@pytest.mark.parametrize("gains", [(1.0, 1.4), (400.0, 40.0), (25.0, 10.0)])
def test_output_lyapunov(gains, rng):
    ly = ver.output_lyapunov(*gains)
    A, P = ly.A, ly.P
    assert np.allclose(P, P.T)
    assert np.linalg.eigvalsh(P)[0] > 0
    assert np.linalg.norm(A.T @ P + P @ A + np.eye(4)) < 1e-10
    eta = rng.normal(size=(1000, 4))
    assert np.all(ly.rate(eta) <= -ly.gamma * ly.value(eta) + 1e-12)


def test_unstable_output_matrix_rejected():
    with pytest.raises(ValueError, match="Hurwitz"):
        ver.lyapunov_from_matrix(np.array([[0.0, 1.0], [1.0, -1.0]]))


def test_strengthening_constant():
    c1 = ver.strengthening_constant(2.0, 0.5, 1.0)
    assert np.isclose(c1, 2.0)
    assert ver.strengthening_constant(2.0, 0.5, 2.0) == c1 / 2
    assert ver.strengthening_constant(0.0, 0.5, 1.0) == 0.0
    with pytest.raises(ValueError):
        ver.strengthening_constant(1.0, 1.0, 0.0)


def _setup(beta1_zero, residual, gamma=2.0):
    lyap = ver.lyapunov_from_matrix(-gamma / 2 * np.eye(4))
    spec = bar.default_specs()[0]
    return ver.CombinedSetup(spec=spec, alpha=0.5, lyap=lyap, L_hZ=0.0 if beta1_zero else 0.1,
                             L_omega_eta=3.0, z=np.zeros((len(residual), 2)), residual=np.asarray(residual))


def test_zero_beta1_reduces_to_plain_condition():
    s = _setup(True, [0.0, 0.2])
    chk = ver.combined_barrier_check(s, 1.0)
    assert chk.c == 0.0 and chk.passed and chk.margin == 0.0


def test_sigma_sweep_finds_smallest_passing_power():
    s = _setup(False, [0.01, 0.5])
    first, checks = ver.sigma_sweep(s)
    assert first is not None
    assert all(c.c > 0.01 for c in checks if c.sigma < first.sigma)
    for a, b in zip(checks, checks[1:]):
        assert np.isclose(b.c, a.c / 2)
    # passing at c implies passing for any smaller c
    assert all(c.passed for c in checks if c.sigma >= first.sigma)


def test_alpha_precondition(prior_policy, model, regions):
    lyap = ver.output_lyapunov(1.0, 1.4)
    with pytest.raises(ValueError, match="alpha"):
        ver.combined_setup(bar.default_specs()[0], prior_policy, lyap, regions["Z_O"], model,
                           n_samples=1000, alpha=1.0, n_pairs=100)
    with pytest.raises(ValueError):
        ver.combined_setup(bar.default_specs()[0], prior_policy, lyap, (np.ones(2), np.zeros(2)), model)


def test_combined_setup_and_literal_check(prior_policy, model, regions):
    lyap = ver.output_lyapunov(1.0, 1.4)
    s = ver.combined_setup(bar.default_specs()[0], prior_policy, lyap, regions["Z_O"], model,
                           n_samples=1000, alpha=0.25, n_pairs=2000)
    assert np.isfinite(s.beta1) and s.beta2 > 0 and s.L_omega_eta > 0
    r, h = ver.combined_condition_samples(s, 1.0, prior_policy, model, n_eta=4, n_z=64)
    assert r.shape == h.shape == (256,)
    # at eta = 0 the combined condition is the plain one
    s0 = ver.CombinedSetup(s.spec, s.alpha, s.lyap, s.L_hZ, s.L_omega_eta, s.z[:64], s.residual[:64])
    grad = ver.barrier_gradient(s.spec, s0.z, prior_policy, model)
    w = np.asarray(ver.zd.omega(s0.z, prior_policy, model))
    hz = ver.barrier_value(s.spec, s0.z, prior_policy, model)
    assert np.allclose(np.sum(grad * w, -1) + s.alpha * hz, s0.residual, atol=1e-8)


def test_certify_requires_samples(prior_policy, model, regions, specs):
    with pytest.raises(ValueError):
        ver.certify(prior_policy, specs, regions, model, n_samples=10)


def test_certify_untrained_fails_and_is_deterministic(model, regions, specs, tmp_path):
    p = tr.default_policy(regions, seed=2)
    a = ver.certify(p, specs, regions, model, n_samples=1000, seed=4)
    b = ver.certify(p, specs, regions, model, n_samples=1000, seed=4)
    assert not a.passed
    assert a.min_continuous < -0.1
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
    a.save(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert all(x["n_samples"] == 1000 for x in d["barriers"])
    assert "certified" in a.summary()


def test_certification_samples_inside_region(regions):
    z = ver.certification_samples(regions["S_eps"], 1000, 0)
    assert len(z) == 1000 and regions["S_eps"].contains(z).all()
