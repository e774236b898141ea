"""Residual zero-dynamics term learned from rollouts, and the episodic loop.

The augmented model is ``zdot = omega(0, z; theta) + eps(z)``.  ``eps`` is fit
by derivative matching: finite-difference ``zdot`` estimates from logged
rollouts on the surrogate plant are regressed onto ``omega + eps``.
"""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import barriers as bar
from . import dynamics as dyn
from . import policy as pol
from . import simulator as sim
from . import training as tr
from . import zero_dynamics as zd
from .trajectory import TrajectoryLog, load_log, save_log  # noqa: F401  (re-exported)


class ResidualDivergence(RuntimeError):
    pass


def estimate_zdot(log: TrajectoryLog, skip=2):
    """(z, zdot) pairs by central differences inside each continuous segment.

    ``skip`` samples at both ends of every segment are dropped, so nothing
    within two samples of an impact is used.  Segments too short to keep a
    single interior sample are skipped with a warning.
    """
    zs, zds = [], []
    for a, b in log.segments():
        if b - a < 3 or b - a <= 2 * skip:
            warnings.warn(f"segment [{a}, {b}) too short for differencing; skipped")
            continue
        t = log.t[a:b]
        z = log.z[a:b]
        zdot = np.gradient(z, t, axis=0, edge_order=2)
        zs.append(z[skip:len(t) - skip])
        zds.append(zdot[skip:len(t) - skip])
    if not zs:
        return np.zeros((0, 2)), np.zeros((0, 2))
    return np.concatenate(zs), np.concatenate(zds)


# ----------------------------------------------------------------------------
# fitting


@dataclass
class ResidualConfig:
    sizes: tuple = (2, 16, 16, 2)
    epochs: int = 1500
    lr: float = 2e-2
    decay_epochs: tuple = (600, 1100)
    decay_factor: float = 0.1
    weight_decay: float = 0.0
    holdout: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError("holdout fraction must lie in [0, 1)")
        if self.epochs < 1 or not self.lr > 0:
            raise ValueError("need a positive epoch count and step size")

    def step_size(self, epoch):
        return self.lr * self.decay_factor ** sum(1 for e in self.decay_epochs if epoch >= e)

    def to_dict(self):
        d = asdict(self)
        d["sizes"] = list(self.sizes)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


@dataclass
class ResidualFit:
    residual: pol.MLPParams
    train_mse: float
    holdout_mse: float
    history: list = field(default_factory=list)


def nominal_field(z, policy, model):
    return np.asarray(zd.omega(np.asarray(z, dtype=float), policy, model), dtype=float)


def fit_residual(pairs, policy, model: dyn.ModelParams, config: ResidualConfig = None,
                 omega_values=None) -> ResidualFit:
    """Least-squares fit of eps to ``zdot_measured - omega``.

    Normalised per-neuron steps, full batch.  The residual net's input and
    output scales are set from the data so that one step size serves any
    magnitude of mismatch.
    """
    config = config or ResidualConfig()
    z, zdot = (np.asarray(a, dtype=float) for a in pairs)
    if len(z) < 100:
        raise ValueError("need at least 100 (z, zdot) pairs")
    w = nominal_field(z, policy, model) if omega_values is None else np.asarray(omega_values)
    target = zdot - w
    rng = np.random.default_rng([config.seed, 3])
    perm = rng.permutation(len(z))
    n_hold = int(round(config.holdout * len(z)))
    hold, train = perm[:n_hold], perm[n_hold:]

    lo, hi = z[train].min(axis=0), z[train].max(axis=0)
    center = 0.5 * (lo + hi)
    half = np.maximum(0.5 * (hi - lo), 1e-6)
    w_rms = np.sqrt(np.mean(w[train] ** 2, axis=0))
    out = np.maximum(target[train].std(axis=0) + np.abs(target[train].mean(axis=0)), 1e-3 * w_rms)
    out = np.where(out > 0, out, 1.0)
    net = pol.init_policy([config.seed, 4], config.sizes, input_center=tuple(center),
                          input_scale=tuple(half), kind="residual", output_scale=tuple(out))

    zt, tt = z[train], target[train]

    def loss(theta):
        e = pol.forward(zt, net.with_params(theta)) - tt
        return ad.mean(ad.sum(e * e, axis=-1))

    state = tr.init_opt_state(tr.NORMALIZED, net.params.size, net.sizes)
    theta = net.params.copy()
    best = (np.inf, theta.copy())
    history = []
    for epoch in range(config.epochs):
        val, g = ad.grad(loss, theta)
        if not np.isfinite(val) or not np.all(np.isfinite(g)):
            raise ResidualDivergence(f"non-finite residual loss at epoch {epoch}")
        history.append(val)
        if val < best[0]:
            best = (val, theta.copy())
        state, theta = tr.optimizer_step(state, theta, g, config.step_size(epoch), config.weight_decay)
    fitted = net.with_params(best[1])
    hold_mse = float("nan")
    if n_hold:
        e = pol.forward(z[hold], fitted) - target[hold]
        hold_mse = float(np.mean(np.sum(e * e, axis=-1)))
    return ResidualFit(residual=fitted, train_mse=float(best[0]), holdout_mse=hold_mse, history=history)


# ----------------------------------------------------------------------------
# episodic refinement


@dataclass
class EpisodeRecord:
    index: int
    policy_checkpoint: str
    residual_checkpoint: str
    violation: float
    fell: bool
    steps: int
    outcome: str
    train_loss: float
    residual_train_mse: float = float("nan")
    residual_holdout_mse: float = float("nan")

    def to_dict(self):
        return asdict(self)


@dataclass
class RefineConfig:
    nominal: dyn.ModelParams = field(default_factory=dyn.ModelParams)
    surrogate: dyn.ModelParams = field(default_factory=dyn.surrogate_params)
    train: tr.TrainConfig = field(default_factory=lambda: tr.TrainConfig(epochs=300))
    sim: sim.SimConfig = None
    residual: ResidualConfig = field(default_factory=ResidualConfig)
    specs: list = None
    regions: dict = None
    initial_policy: object = None  # MLPParams; trained from scratch when absent
    out_dir: str = None

    def __post_init__(self):
        if self.sim is None:
            self.sim = sim.SimConfig(plant=self.surrogate)
        if self.specs is None:
            self.specs = bar.default_specs()
        if self.regions is None:
            self.regions = bar.default_regions(self.nominal)


def violation_metric(result: sim.RolloutResult, cfg: sim.SimConfig, alpha=1.0):
    """Mean hinge of the continuous torso condition along a rollout.

    Per logged sample ``max(0, -(dh/dt + alpha h))`` with h the two-sided
    torso margin, averaged; a rollout that stops early adds the fraction of
    the step budget it did not complete (a fall is the worst violation).
    """
    log = result.log
    hinge = []
    for a, b in log.segments():
        if b - a < 3:
            continue
        h = sim.torso_margin(log.q[a:b], cfg)
        dh = np.gradient(h, log.t[a:b])
        hinge.append(np.maximum(0.0, -(dh + alpha * h)))
    mean = float(np.mean(np.concatenate(hinge))) if hinge else 0.0
    missing = 1.0 - min(result.steps, cfg.max_steps) / cfg.max_steps
    return mean + missing


def _save_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def episodic_refine(n_episodes, config: RefineConfig, log=None):
    """Alternate training on omega + eps, deployment on the surrogate, and
    refitting eps from all data gathered so far.  Returns EpisodeRecords."""
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    out = config.out_dir
    if out:
        os.makedirs(out, exist_ok=True)
    say = log or (lambda *_: None)
    residual = None
    policy = config.initial_policy
    data_z, data_zd = [], []
    records = []
    for k in range(n_episodes):
        train_loss = float("nan")
        if policy is None or k > 0:
            res = tr.train_policy(config.train, config.specs, config.regions, config.nominal,
                                  policy0=policy, residual=residual)
            policy, train_loss = res.policy, res.best_loss
        result = sim.rollout(policy, config.sim, model=config.nominal)
        viol = violation_metric(result, config.sim)
        say(f"episode {k}: {result.outcome} after {result.steps} steps, violation {viol:.4g}")
        z, zdot = estimate_zdot(result.log)
        data_z.append(z)
        data_zd.append(zdot)
        fit = None
        zz, zzd = np.concatenate(data_z), np.concatenate(data_zd)
        if len(zz) >= 100:
            fit = fit_residual((zz, zzd), policy, config.nominal, config.residual)
            residual = fit.residual
        p_path = r_path = ""
        if out:
            p_path = os.path.join(out, f"episode_{k:02d}_policy.json")
            pol.save(policy, p_path)
            if residual is not None:
                r_path = os.path.join(out, f"episode_{k:02d}_residual.json")
                pol.save(residual, r_path)
            save_log(result.log, os.path.join(out, f"episode_{k:02d}_log.csv"))
        rec = EpisodeRecord(index=k, policy_checkpoint=p_path, residual_checkpoint=r_path,
                            violation=viol, fell=result.outcome != sim.COMPLETED, steps=result.steps,
                            outcome=result.outcome, train_loss=train_loss,
                            residual_train_mse=fit.train_mse if fit else float("nan"),
                            residual_holdout_mse=fit.holdout_mse if fit else float("nan"))
        if out:
            _save_json(rec.to_dict(), os.path.join(out, f"episode_{k:02d}.json"))
        records.append(rec)
    return records
