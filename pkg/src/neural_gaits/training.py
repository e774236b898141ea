"""Gradient-based minimisation of the Barrier Loss over the policy parameters."""
from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import barriers as bar
from . import dynamics as dyn
from . import policy as pol
from . import zero_dynamics as zd

ADAMW = "adaptive_moment_decoupled_decay"
NORMALIZED = "normalized_per_neuron"


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1000
    n_per_region: int = 1024
    lr: float = 1e-2
    weight_decay: float = 1e-4
    decay_epochs: tuple = (100, 400, 800)
    decay_factor: float = 0.1
    seed: int = 0
    optimizer: str = ADAMW
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    margin: float = 0.0  # hinge margin used in the training objective only
    n_eval: int = 4096
    checkpoint_every: int = 0
    warm_start: str = None
    sizes: tuple = (2, 16, 16, 2)
    # phase prior under the net: see default_policy and fit_phase_prior
    z1_impact: float = 0.2
    prior_lean: float = 0.075
    prior_bulge: float = 5.0
    prior_degree: int = 7
    prior_steps: int = 800
    prior_lr: float = 1e-2
    output_scale: float = 0.1
    anchored: bool = True

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.betas = tuple(float(b) for b in self.betas)
        self.sizes = tuple(int(s) for s in self.sizes)
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if not self.lr > 0:
            raise ValueError("step size must be positive")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay factor must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.optimizer not in (ADAMW, NORMALIZED):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.n_per_region < 1:
            raise ValueError("need at least one sample per region")
        if self.prior_degree < 3 or self.prior_steps < 0:
            raise ValueError("the phase prior needs degree >= 3 and a non-negative step count")

    def step_size(self, epoch):
        k = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.lr * self.decay_factor ** k

    def to_dict(self):
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        d["betas"] = list(self.betas)
        d["sizes"] = list(self.sizes)
        return d


# ----------------------------------------------------------------------------
# optimisers


@dataclass
class OptState:
    kind: str
    t: int = 0
    m: np.ndarray = None
    v: np.ndarray = None
    groups: list = field(default_factory=list)


def neuron_groups(sizes):
    """Flat index arrays, one per neuron (its incoming weights and bias)."""
    groups, k = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        w0 = k
        b0 = k + a * b
        for j in range(b):
            groups.append(np.concatenate([np.arange(w0 + j * a, w0 + (j + 1) * a), [b0 + j]]))
        k = b0 + b
    return groups


def init_opt_state(kind, n, sizes=None):
    st = OptState(kind=kind, m=np.zeros(n), v=np.zeros(n))
    if kind == NORMALIZED:
        if sizes is None:
            raise ValueError("the normalized optimiser needs the layer sizes")
        st.groups = neuron_groups(sizes)
    return st


def normalize_per_neuron(g, groups, eps=1e-12):
    out = np.zeros_like(g)
    for idx in groups:
        n = np.linalg.norm(g[idx])
        out[idx] = g[idx] / (n + eps) if n > 0 else 0.0
    return out


def optimizer_step(state: OptState, theta, g, step_size, weight_decay, betas=(0.9, 0.999), eps=1e-8):
    """One update; returns (state, theta').  Decay is decoupled from the gradient."""
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(g, dtype=float)
    state.t += 1
    if state.kind == ADAMW:
        b1, b2 = betas
        state.m = b1 * state.m + (1.0 - b1) * g
        state.v = b2 * state.v + (1.0 - b2) * g * g
        mhat = state.m / (1.0 - b1 ** state.t)
        vhat = state.v / (1.0 - b2 ** state.t)
        direction = mhat / (np.sqrt(vhat) + eps)
    else:
        direction = normalize_per_neuron(g, state.groups)
    return state, theta - step_size * (direction + weight_decay * theta)


# ----------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    policy: pol.MLPParams
    history: list
    best_epoch: int
    best_loss: float
    initial_eval: dict
    final_eval: dict
    seconds: float
    prior_history: list = field(default_factory=list)
    prior_loss: float = math.nan


def epoch_seed(seed, epoch):
    return [int(seed), 1, int(epoch)]


def eval_seed(seed):
    return [int(seed), 2]


def loss_and_grad(policy, specs, regions, model, seed, n, residual=None, margin=0.0):
    """(breakdown, gradient) of the Monte-Carlo loss at the policy parameters."""
    theta = ad.Var(np.array(ad.value(policy.params), dtype=float))
    br = bar.barrier_loss(policy.with_params(theta), specs, regions, model, seed, n, residual, margin)
    if isinstance(br.total, ad.Var):
        ad.backward(br.total)
    g = theta.grad if theta.grad is not None else np.zeros_like(theta.value)
    return br, g


def evaluate(policy, specs, regions, model, seed, n, residual=None):
    br = bar.barrier_loss(policy, specs, regions, model, seed, n, residual)
    return {"loss": float(ad.value(br.total)), "terms": br.values(), "min_residual": br.min_residual}


# ----------------------------------------------------------------------------
# gait design stage


PHASE_SCALE = 0.25  # z1 is scaled to about [-1, 1] for the coefficient fit


class PhaseGait:
    """Outputs that are polynomials in the phase z1 alone.

    ``coef`` has shape (2, degree + 1): Legendre coefficients in
    ``x = z1 / scale``.  The orthogonal basis keeps the per-coordinate
    optimiser well conditioned.  ``coef`` may be a tape variable, which is
    how the design stage fits it.
    """

    def __init__(self, coef, scale=PHASE_SCALE):
        self.coef = coef
        self.scale = scale

    def evaluate(self, z):
        x = z[..., 0] * (1.0 / self.scale)
        n = np.shape(ad.value(self.coef))[-1]
        P, dP = [1.0 + 0.0 * x, x], [0.0 * x, 1.0 + 0.0 * x]
        for k in range(1, n - 1):
            P.append(((2 * k + 1) * x * P[k] - k * P[k - 1]) * (1.0 / (k + 1)))
            dP.append(((2 * k + 1) * (P[k] + x * dP[k]) - k * dP[k - 1]) * (1.0 / (k + 1)))
        ys, ds = [], []
        for i in range(2):
            ys.append(sum(self.coef[i, k] * P[k] for k in range(n)))
            ds.append(sum(self.coef[i, k] * dP[k] for k in range(n)) * (1.0 / self.scale))
        d1 = ad.stack(ds, axis=-1)
        return ad.stack(ys, axis=-1), ad.stack([d1, 0.0 * d1], axis=-1)

    @classmethod
    def from_poly(cls, poly, degree, scale=PHASE_SCALE):
        """From ascending monomial coefficients in z1."""
        L = np.polynomial.legendre
        coef = np.zeros((2, degree + 1))
        for i, c in enumerate(poly):
            c = np.asarray(c, dtype=float) * scale ** np.arange(len(c))
            leg = L.poly2leg(c)
            coef[i, :len(leg)] = leg
        return cls(coef, scale)

    def to_poly(self):
        """Ascending monomial coefficients in z1, as MLPParams.prior_poly wants."""
        L = np.polynomial.legendre
        c = np.asarray(ad.value(self.coef), dtype=float)
        out = []
        for row in c:
            m = L.leg2poly(row)
            m = np.pad(m, (0, c.shape[1] - len(m)))
            out.append(tuple(float(v) for v in m / self.scale ** np.arange(len(m))))
        return tuple(out)


def prior_seed(seed, step):
    return [int(seed), 5, int(step)]


def fit_phase_prior(config: TrainConfig, specs, regions, model, residual=None, log=None):
    """Gait design: minimise the Barrier Loss over a phase-only polynomial.

    Starts from the impact-matched cubic and runs ``prior_steps`` Adam steps
    at the constant rate ``prior_lr``.  Returns (prior_poly, history, best
    loss); deterministic in the config.
    """
    start = zd.impact_matched_prior(model, config.z1_impact, config.prior_lean, config.prior_bulge)
    gait = PhaseGait.from_poly(start, config.prior_degree)
    theta = gait.coef.ravel().copy()
    shape = gait.coef.shape
    state = init_opt_state(ADAMW, theta.size)
    best = (math.inf, theta.copy())
    history = []
    for step in range(config.prior_steps):
        def loss(t):
            return bar.barrier_loss(PhaseGait(ad.reshape(t, shape)), specs, regions, model,
                                    prior_seed(config.seed, step), config.n_per_region, residual).total

        val, g = ad.grad(loss, theta)
        if not np.isfinite(val) or not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite loss in the gait design stage at step {step}")
        history.append({"step": step, "loss": val})
        if val < best[0]:
            best = (val, theta.copy())
        if log is not None:
            log(history[-1])
        state, theta = optimizer_step(state, theta, g, config.prior_lr, 0.0, config.betas, config.eps)
    if config.prior_steps == 0:
        return start, history, math.nan
    return PhaseGait(best[1].reshape(shape)).to_poly(), history, best[0]


def default_policy(regions, sizes=(2, 16, 16, 2), seed=0, model=None, z1_impact=0.2, lean=0.0,
                   bulge=5.0, output_scale=0.1, anchored=False, prior_poly=None):
    """Randomly initialised MLP, input normalisation fixed by the orbital box.

    With a model, the net sits on top of a phase prior (``prior_poly``, or
    the impact-matched cubic); without one it is the bare MLP.  ``anchored`` subtracts the net's initial
    output so training starts exactly from the prior.
    """
    zo = regions["Z_O"]
    center = tuple(float(c) for c in zo.center)
    scale = (0.5 * (zo.z1[1] - zo.z1[0]), 0.5 * (zo.z2[1] - zo.z2[0]))
    if model is None:
        return pol.init_policy(seed, sizes, input_center=center, input_scale=scale)
    prior = prior_poly or zd.impact_matched_prior(model, z1_impact, lean, bulge)
    net = pol.init_policy(seed, sizes, input_center=center, input_scale=scale,
                          output_scale=(output_scale,) * sizes[-1], prior_poly=prior)
    if anchored:
        net.anchor = net.params.copy()
    return net


def train_policy(config: TrainConfig, specs, regions, model: dyn.ModelParams, policy0=None,
                 residual=None, log=None, checkpoint_dir=None) -> TrainResult:
    """Minimise the Barrier Loss; returns the best-epoch parameters.

    Without an initial policy the phase prior is designed first
    (``fit_phase_prior``), then the net on top of it is trained with the
    configured schedule.  Each epoch draws fresh samples from an
    epoch-indexed seed, so the whole run is a deterministic function of the
    config.
    """
    t0 = time.perf_counter()
    prior_history, prior_loss = [], math.nan
    if policy0 is None:
        if config.warm_start:
            policy0 = pol.load(config.warm_start, expect_sizes=config.sizes)
        else:
            poly, prior_history, prior_loss = fit_phase_prior(config, specs, regions, model, residual)
            policy0 = default_policy(regions, config.sizes, config.seed, model, config.z1_impact,
                                     config.prior_lean, config.prior_bulge, config.output_scale,
                                     config.anchored, prior_poly=poly)
    theta = np.array(ad.value(policy0.params), dtype=float)
    state = init_opt_state(config.optimizer, theta.size, policy0.sizes)
    initial_eval = evaluate(policy0, specs, regions, model, eval_seed(config.seed), config.n_eval, residual)
    history = []
    best = (math.inf, -1, theta.copy())
    for epoch in range(config.epochs):
        lr = config.step_size(epoch)
        br, g = loss_and_grad(policy0.with_params(theta), specs, regions, model,
                              epoch_seed(config.seed, epoch), config.n_per_region, residual, config.margin)
        terms = br.values()
        total = float(ad.value(br.total))
        if not np.isfinite(total) or not np.all(np.isfinite(g)):
            bad = [k for k, v in terms.items() if not np.isfinite(v)] or ["gradient"]
            raise TrainingDivergence(f"non-finite loss at epoch {epoch}: {', '.join(bad)}")
        # the reported loss is the margin-free one
        if config.margin > 0:
            report = bar.barrier_loss(policy0.with_params(theta), specs, regions, model,
                                      epoch_seed(config.seed, epoch), config.n_per_region, residual)
            total, terms = float(ad.value(report.total)), report.values()
        row = {"epoch": epoch, "loss": total, "step_size": lr}
        row.update({f"loss_{k}": v for k, v in terms.items()})
        history.append(row)
        if total < best[0]:
            best = (total, epoch, theta.copy())
        if log is not None:
            log(row)
        if checkpoint_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            pol.save(policy0.with_params(theta.copy()), os.path.join(checkpoint_dir, f"epoch_{epoch:05d}.json"))
        state, theta = optimizer_step(state, theta, g, lr, config.weight_decay, config.betas, config.eps)
    best_policy = policy0.with_params(best[2])
    final_eval = evaluate(best_policy, specs, regions, model, eval_seed(config.seed), config.n_eval, residual)
    return TrainResult(policy=best_policy, history=history, best_epoch=best[1], best_loss=best[0],
                       initial_eval=initial_eval, final_eval=final_eval,
                       seconds=time.perf_counter() - t0, prior_history=prior_history,
                       prior_loss=prior_loss)


def write_history(history, path):
    """Loss history CSV: epoch, loss, per-barrier losses, step size."""
    if not history:
        raise ValueError("empty history")
    keys = ["epoch", "loss"] + sorted(k for k in history[0] if k.startswith("loss_")) + ["step_size"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(keys)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in keys[1:]])


def read_history(path):
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in r]
