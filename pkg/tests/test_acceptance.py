"""End-to-end acceptance criteria.

Each test records one ``[PASS]``/``[FAIL]`` line that is printed in the
terminal summary. The default pipeline is trained once per session.
"""
import json
import math
import time

import numpy as np
import pytest

from neural_gaits import autodiff as ad
from neural_gaits import barriers as bar
from neural_gaits import cli
from neural_gaits import dynamics as dyn
from neural_gaits import policy as pol
from neural_gaits import residual as rs
from neural_gaits import simulator as sim
from neural_gaits import training as tr
from neural_gaits import verification as ver
from neural_gaits import zero_dynamics as zd
from neural_gaits.config import VerifyConfig

RESULTS = []

pytestmark = pytest.mark.acceptance


def record(n, name, ok, detail):
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] {n} {name}: {detail}")
    return ok


@pytest.fixture(scope="module")
def trained(model, regions, specs):
    t0 = time.perf_counter()
    res = tr.train_policy(tr.TrainConfig(), specs, regions, model)
    return res, time.perf_counter() - t0


def test_1_training_converges(trained):
    res, seconds = trained
    ok = res.best_loss <= 1e-2 and seconds <= 1800
    assert record("1", "training convergence", ok,
                  f"phase prior {res.prior_loss:.3e}, best loss {res.best_loss:.3e} at epoch {res.best_epoch}, "
                  f"{seconds:.0f} s (need <= 1e-2, <= 1800 s)")


def test_2_sampled_certificate(trained, model, regions, specs):
    rep = ver.certify(trained[0].policy, specs, regions, model, n_samples=10_000, tol=1e-3, seed=0)
    ok = rep.min_continuous >= -1e-3 and rep.min_discrete >= -1e-3
    assert record("2", "sampled certificate", ok,
                  f"min continuous {rep.min_continuous:.3e}, min discrete {rep.min_discrete:.3e} "
                  f"on 1e4 samples per region (need >= -1e-3)")


def test_3_emergent_walking(trained):
    cfg = sim.SimConfig()
    r = sim.rollout(trained[0].policy, cfg)
    torso = dyn.torso_angle(r.log.q)
    lo, hi = cfg.torso_bounds
    in_band = bool(np.all(torso >= lo - 0.01) and np.all(torso <= hi + 0.01))
    ok = r.outcome == sim.COMPLETED and r.steps >= 20 and in_band
    assert record("3", "emergent walking", ok,
                  f"{r.outcome}, {r.steps} steps in {r.time:.2f} s, torso in [{torso.min():.4f}, {torso.max():.4f}] "
                  f"(band [{lo:.4f}, {hi:.4f}] +- 0.01)")


def test_4_episodic_improvement(trained, tmp_path):
    cfg = rs.RefineConfig(initial_policy=trained[0].policy, out_dir=str(tmp_path))
    recs = rs.episodic_refine(3, cfg)
    v = [r.violation for r in recs]
    ok = v[2] < v[0]
    assert record("4", "episodic improvement", ok,
                  "violation " + " -> ".join(f"{x:.4g}" for x in v)
                  + " (" + ", ".join(r.outcome for r in recs) + ")")


def _planted(z):
    return np.stack([0.2 * np.sin(4 * z[:, 0]) * z[:, 1] / 30,
                     2.0 * np.cos(3 * z[:, 0]) + 0.05 * z[:, 1]], -1)


def test_5_planted_residual(model, regions):
    gait = pol.ReferenceGait(0.15, 0.2, 5.0)
    z = bar.sample_region(regions["Z_O"], 0, 2000)
    w = rs.nominal_field(z, gait, model)
    fit = rs.fit_residual((z, w + _planted(z)), gait, model, omega_values=w)
    zt = bar.sample_region(regions["Z_O"], 1, 4000)
    err = pol.forward(zt, fit.residual) - _planted(zt)
    rmse = np.sqrt(np.mean(np.sum(err ** 2, -1)))
    rms = np.sqrt(np.mean(np.sum(_planted(zt) ** 2, -1)))
    ok = rmse < 0.1 * rms
    assert record("5", "planted residual", ok, f"RMSE / RMS = {rmse / rms:.4f} on Z_O (need < 0.1)")


def _oracles(model, regions, specs):
    out = {}
    x = np.array([0.1, -0.05, -0.2, -0.4, 0.3, 0.6])
    e0 = dyn.total_energy(x[:3], x[3:], model)
    for _ in range(10_000):
        x = sim.rk4_step(x, np.zeros(2), 1e-4, model)
    out["energy drift"] = (abs(dyn.total_energy(x[:3], x[3:], model) - e0) / abs(e0), 1e-6)

    q, dq = np.array([0.2, -0.1, -0.4]), np.array([0.8, -0.5, -1.0])
    res = dyn.impact_map(q, dq, model)
    before = dyn.angular_momentum(q, dq, model, about=dyn.swing_foot(q, model))
    out["impact momentum"] = (abs(dyn.angular_momentum(res.q, res.dq, model) - before) / abs(before), 1e-8)

    policy = tr.default_policy(regions, seed=3, model=model, output_scale=0.05)
    rng = np.random.default_rng(7)
    z = np.column_stack([rng.uniform(-0.25, 0.25, 64), rng.uniform(22.0, 38.0, 64)])
    eta = 0.1 * rng.normal(size=(64, 4))
    qq, dqq = zd.phi_inverse(eta, z, policy, model)
    eta_b, z_b = zd.phi(qq, dqq, policy, model)
    out["phi round trip"] = (max(np.abs(z_b - z).max(), np.abs(eta_b - eta).max()), 1e-10)

    grid = float(bar.grid_barrier_loss(policy, specs, regions, model).total)
    mc = float(bar.barrier_loss(policy, specs, regions, model, [0, 9], 16384).total)
    out["MC vs grid"] = (abs(mc - grid) / grid, 0.05)

    theta = np.array(policy.params)

    def f(t):
        return bar.barrier_loss(policy.with_params(t), specs, regions, model, [0, 5], 64).total

    _, g = ad.grad(f, theta)
    worst = 0.0
    for _ in range(4):
        d = rng.normal(size=theta.size)
        d /= np.linalg.norm(d)
        h = 1e-6
        fd = (float(ad.value(f(theta + h * d))) - float(ad.value(f(theta - h * d)))) / (2 * h)
        worst = max(worst, abs(g @ d - fd) / max(abs(fd), 1e-3))
    out["gradient vs FD"] = (worst, 1e-4)
    return out


def test_6_numerical_oracles(model, regions, specs):
    out = _oracles(model, regions, specs)
    ok = all(v < tol for v, tol in out.values())
    assert record("6", "numerical oracles", ok, ", ".join(f"{k} {v:.2e} (< {t:g})" for k, (v, t) in out.items()))


def test_7_combined_barrier_sweep(trained, model, regions, specs):
    vc = VerifyConfig()
    spec = next(s for s in specs if s.name == vc.combined_spec)
    setup = ver.combined_setup(spec, trained[0].policy, ver.output_lyapunov(vc.kp, vc.kd),
                               regions[spec.region], model, vc.n_samples, 0, vc.alpha, vc.eta_radius, vc.n_pairs)
    first, checks = ver.sigma_sweep(setup)
    last = checks[-1]
    halves = all(math.isclose(b.c, a.c / 2, rel_tol=1e-12) for a, b in zip(checks, checks[1:]))
    ok = first is not None and halves
    detail = (f"sigma {first.sigma:g}, c {first.c:.3e}" if first else
              f"no sigma in 2^-6..2^6 passes: at sigma 64 c = {last.c:.3g} vs min residual "
              f"{last.margin + last.c:.3g} (L_hZ {setup.L_hZ:.3g}, L_omega_eta {setup.L_omega_eta:.3g}, "
              f"beta2 {setup.beta2:.3g})")
    assert record("7", "combined barrier", ok, detail + f"; doubling sigma halves c: {halves}")


def test_8_train_is_byte_deterministic(tmp_path):
    cfg = {"seed": 0, "train": {"epochs": 20, "n_per_region": 128, "n_eval": 256, "prior_steps": 10}}
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    files = ("policy.json", "history.csv", "prior_history.csv", "summary.json")
    blobs = []
    for run in ("a", "b"):
        cli.main(["train", "--config", str(p), "--out", str(tmp_path / run), "--quiet"])
        blobs.append([(tmp_path / run / f).read_bytes() for f in files])
    ok = blobs[0] == blobs[1]
    assert record("8", "determinism", ok, f"{', '.join(files)} byte-identical across two runs: {ok}")
