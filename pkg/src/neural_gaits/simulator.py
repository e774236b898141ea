"""Full-order closed-loop hybrid simulation of the biped.

Fixed-step RK4 on the plant, zero-order-hold torques at the control rate, the
policy output held between policy ticks, and swing-foot touchdown located by
bisection before the impact map is applied.  The controller only knows the
nominal model: z is estimated with the nominal inertia, exactly as it would be
on hardware.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dynamics as dyn
from . import zero_dynamics as zd
from .policy import eval_policy, jacobian_rate
from .trajectory import TrajectoryLog

COMPLETED, FELL, DIVERGED = "completed", "fell", "diverged"


class DecouplingError(RuntimeError):
    """The feedback-linearisation decoupling matrix is singular."""


@dataclass
class SimConfig:
    plant: dyn.ModelParams = field(default_factory=dyn.ModelParams)
    controller: str = "pd"  # pd | feedback_linearizing
    kp: float = 400.0
    kd: float = 40.0
    control_rate: float = 1000.0
    policy_rate: float = 500.0
    dt: float = 2e-4
    max_steps: int = 20
    max_time: float = 30.0
    z1_impact: float = 0.2
    z2_nominal: float = 30.0
    z0: tuple = None  # post-impact zero state; default is the image of (z1_impact, z2_nominal)
    eta0: tuple = None  # optional initial output error (y1, y2, dy1, dy2)
    min_step: float = 0.1  # swing foot must be this far ahead to count as touchdown
    fall_torso: float = math.pi / 3
    fall_hip: float = 0.5  # fraction of the leg length
    torso_bounds: tuple = (-math.pi / 10, 0.05)
    clearance_center: tuple = (0.0, -0.2)
    clearance_radius: float = 0.07
    clearance_upper: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.controller not in ("pd", "feedback_linearizing"):
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.control_rate < self.policy_rate:
            raise ValueError("control rate must be at least the policy rate")
        if self.dt > 1.0 / (5.0 * self.control_rate) + 1e-15:
            raise ValueError("integrator step must be at most 1/(5 control rate)")
        n = self.substeps
        if abs(n * self.dt * self.control_rate - 1.0) > 1e-9:
            raise ValueError("control period must be a whole number of integrator steps")
        k = self.control_rate / self.policy_rate
        if abs(k - round(k)) > 1e-9:
            raise ValueError("control rate must be a multiple of the policy rate")

    @property
    def substeps(self):
        return int(round(1.0 / (self.control_rate * self.dt)))

    @property
    def policy_every(self):
        return int(round(self.control_rate / self.policy_rate))

    def to_dict(self):
        d = asdict(self)
        d["plant"] = self.plant.to_dict()
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "plant" in d:
            d["plant"] = dyn.ModelParams.from_dict(d["plant"])
        for k in ("z0", "eta0", "torso_bounds", "clearance_center"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return SimConfig(**d)


@dataclass
class StepStats:
    duration: list = field(default_factory=list)
    length: list = field(default_factory=list)
    hip_speed: list = field(default_factory=list)
    torso_margin: list = field(default_factory=list)
    clearance_margin: list = field(default_factory=list)

    @property
    def n_steps(self):
        return len(self.duration)

    def to_dict(self):
        return {k: [float(v) for v in getattr(self, k)] for k in
                ("duration", "length", "hip_speed", "torso_margin", "clearance_margin")} | {
            "n_steps": self.n_steps}


@dataclass
class RolloutResult:
    log: TrajectoryLog
    stats: StepStats
    outcome: str
    steps: int
    time: float
    max_torso_excursion: float
    reason: str = ""


# ----------------------------------------------------------------------------
# controllers


def pd_controller(y, dy, kp, kd):
    return -kp * np.asarray(y) - kd * np.asarray(dy)


def output_error(q, dq, policy, model):
    """(y, dy, z) with y = y_a - y_d(z) computed with the controller's model."""
    eta, z = zd.phi(q, dq, policy, model)
    return eta[:2], eta[2:], z


def fl_controller(q, dq, policy, model, kp, kd, cond_max=1e10):
    """Torques that render ddy = -kp y - kd dy exactly on ``model``."""
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    z = zd.zero_state(q, dq, model)
    zdot = np.array([dq[0], -dyn.dV_dqu(q, model)])
    yd, J, dJ = jacobian_rate(z, zdot, policy)
    y = q[1:] - yd
    dy = dq[1:] - J @ zdot
    M = dyn.mass_matrix(q, model)
    C = dyn.coriolis_matrix(q, dq, model)
    bias = -C @ dq - dyn.gravity_vector(q, model) - dyn.B_MATRIX @ (model.joint_damping * dq[1:])
    a0 = np.linalg.solve(M, bias)
    A = np.linalg.solve(M, dyn.B_MATRIX)
    # ddy = S ddq - dJ zdot - J[:, 1] d/dt(dV/dq_u)
    S = np.column_stack([-J[:, 0], np.eye(2)])
    dVu_rate = dyn.dV_dqu_gradient(q, model) @ dq
    drift = S @ a0 - dJ @ zdot + J[:, 1] * dVu_rate
    D = S @ A
    if np.linalg.cond(D) > cond_max:
        raise DecouplingError("decoupling matrix is singular")
    v = -kp * y - kd * dy
    return np.linalg.solve(D, v - drift)


# ----------------------------------------------------------------------------
# integration


def _rhs(x, u, p):
    return dyn.state_derivative(x, u, p)


def rk4_step(x, u, h, p):
    k1 = _rhs(x, u, p)
    k2 = _rhs(x + 0.5 * h * k1, u, p)
    k3 = _rhs(x + 0.5 * h * k2, u, p)
    k4 = _rhs(x + h * k3, u, p)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _work_rate(x, u, p):
    """Power delivered by torques minus hip-joint damping."""
    da = x[4:6]
    return float(np.dot(u - p.joint_damping * da, da))


def rk4_step_work(x, u, h, p):
    """RK4 on the state augmented with the work integral."""
    def f(xx):
        return np.concatenate([_rhs(xx[:6], u, p), [_work_rate(xx[:6], u, p)]])
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def locate_touchdown(x0, u, h, p, tol=1e-8, max_iter=80):
    """Bisection on the sub-step fraction for the swing-foot zero crossing.

    Returns (tau, x at tau, work increment)."""
    lo, hi = 0.0, h
    xa = np.append(x0[:6], 0.0)
    xm = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        xm = rk4_step_work(xa, u, mid, p)
        pz = dyn.guard_value(xm[:3], p)
        if abs(pz) < tol:
            break
        if pz > 0:
            lo = mid
        else:
            hi = mid
    return mid, xm[:6], xm[6]


def initial_state(policy, cfg: SimConfig, model):
    if cfg.z0 is not None:
        z0 = np.asarray(cfg.z0, dtype=float)
    else:
        z0 = np.asarray(zd.zero_impact(np.array([cfg.z1_impact, cfg.z2_nominal]), policy, model)[0])
    q, dq = zd.phi_inverse_zero(z0, policy, model)
    q = np.array(q, dtype=float)
    dq = np.array(dq, dtype=float)
    if cfg.eta0 is not None:
        eta = np.asarray(cfg.eta0, dtype=float)
        q[1:] += eta[:2]
        dq[1:] += eta[2:]
    return np.concatenate([q, dq])


def clearance_margin(q, p, cfg: SimConfig):
    px, pz = dyn.swing_foot(q, p)
    cx, cz = cfg.clearance_center
    phi = (px - cx) ** 2 + (pz - cz) ** 2 - cfg.clearance_radius ** 2
    return np.minimum(phi, cfg.clearance_upper - phi)


def torso_margin(q, cfg: SimConfig):
    th = dyn.torso_angle(q)
    lo, hi = cfg.torso_bounds
    return np.minimum(th - lo, hi - th)


def rollout(policy, cfg: SimConfig, model: dyn.ModelParams = None, x0=None) -> RolloutResult:
    """Closed-loop rollout of ``policy`` on ``cfg.plant``.

    ``model`` is the controller's model (nominal by default).
    """
    model = model or dyn.ModelParams()
    plant = cfg.plant
    x = np.array(x0 if x0 is not None else initial_state(policy, cfg, model), dtype=float)
    t = 0.0
    work = 0.0
    rows = {"t": [], "q": [], "dq": [], "z": [], "u": [], "pz": [], "ev": [], "work": []}
    stats = StepStats()
    step_t0, step_hip0 = 0.0, float(dyn.hip_position(x[:3], plant)[0])
    step_min_torso, step_min_clear = np.inf, np.inf
    outcome, reason = COMPLETED, ""
    steps = 0
    tick = 0
    held_yd = held_dyd = None
    u = np.zeros(2)
    max_exc = 0.0
    h = cfg.dt
    just_impacted = False

    def record(xx, uu, ev):
        z = zd.zero_state(xx[:3], xx[3:], model)
        rows["t"].append(t)
        rows["q"].append(xx[:3].copy())
        rows["dq"].append(xx[3:].copy())
        rows["z"].append(np.asarray(z, dtype=float))
        rows["u"].append(np.asarray(uu, dtype=float).copy())
        rows["pz"].append(float(dyn.guard_value(xx[:3], plant)))
        rows["ev"].append(ev)
        rows["work"].append(work)

    try:
        while steps < cfg.max_steps and t < cfg.max_time - 1e-12:
            q, dq = x[:3], x[3:]
            policy_tick = tick % cfg.policy_every == 0
            if cfg.controller == "pd":
                if policy_tick:
                    z = zd.zero_state(q, dq, model)
                    yd, J = eval_policy(z, policy)
                    zdot = np.array([dq[0], -dyn.dV_dqu(q, model)])
                    held_yd, held_dyd = np.asarray(yd), J @ zdot
                u = pd_controller(q[1:] - held_yd, dq[1:] - held_dyd, cfg.kp, cfg.kd)
            else:
                u = fl_controller(q, dq, policy, model, cfg.kp, cfg.kd)
            if policy_tick and not just_impacted:
                record(x, u, 0)
            just_impacted = False
            tick += 1
            impact = False
            for _ in range(cfg.substeps):
                xa = rk4_step_work(np.append(x, work), u, h, plant)
                x_new, w_new = xa[:6], xa[6]
                if not np.all(np.isfinite(x_new)):
                    raise FloatingPointError("non-finite state")
                pz_old = dyn.guard_value(x[:3], plant)
                pz_new = dyn.guard_value(x_new[:3], plant)
                px_new = dyn.swing_foot(x_new[:3], plant)[0]
                if pz_old > 0 and pz_new <= 0 and px_new > cfg.min_step:
                    tau, x_hit, dw = locate_touchdown(x, u, h, plant)
                    vz = dyn.swing_foot_velocity(x_hit[:3], x_hit[3:], plant)[1]
                    if vz < 0:
                        t += tau
                        work += dw
                        x = x_hit
                        record(x, u, 1)
                        res = dyn.impact_map(x[:3], x[3:], plant)
                        x = np.concatenate([res.q, res.dq])
                        steps += 1
                        hip = float(dyn.hip_position(x_hit[:3], plant)[0])
                        px = float(dyn.swing_foot(x_hit[:3], plant)[0])
                        dur = t - step_t0
                        stats.duration.append(dur)
                        stats.length.append(px)
                        stats.hip_speed.append((hip - step_hip0) / dur)
                        stats.torso_margin.append(step_min_torso)
                        stats.clearance_margin.append(step_min_clear)
                        step_t0 = t
                        step_hip0 = float(dyn.hip_position(x[:3], plant)[0])
                        step_min_torso, step_min_clear = np.inf, np.inf
                        impact = True
                        break
                x, work = x_new, w_new
                t += h
                th_m = float(torso_margin(x[:3], cfg))
                step_min_torso = min(step_min_torso, th_m)
                step_min_clear = min(step_min_clear, float(clearance_margin(x[:3], plant, cfg)))
                lo, hi = cfg.torso_bounds
                th = float(dyn.torso_angle(x[:3]))
                max_exc = max(max_exc, th - hi, lo - th)
                if abs(th) > cfg.fall_torso:
                    outcome, reason = FELL, "torso angle left the admissible band"
                    break
                if dyn.hip_position(x[:3], plant)[1] < cfg.fall_hip * plant.leg_length:
                    outcome, reason = FELL, "hip dropped below the fall height"
                    break
            if outcome != COMPLETED:
                break
            if impact:
                # the controller re-reads the sensors as soon as contact switches
                tick = 0
                just_impacted = True
    except (FloatingPointError, dyn.SingularityError, np.linalg.LinAlgError) as e:
        outcome, reason = DIVERGED, str(e)
    except dyn.GuardError as e:
        outcome, reason = DIVERGED, f"impact precondition: {e}"

    if outcome == COMPLETED and steps < cfg.max_steps and t < cfg.max_time - 1e-12:
        outcome = FELL
    log = TrajectoryLog(t=np.array(rows["t"]), q=np.array(rows["q"]).reshape(-1, 3),
                        dq=np.array(rows["dq"]).reshape(-1, 3), z=np.array(rows["z"]).reshape(-1, 2),
                        u=np.array(rows["u"]).reshape(-1, 2), p_z=np.array(rows["pz"]),
                        event=np.array(rows["ev"], dtype=int),
                        meta={"outcome": outcome, "steps": steps, "seed": cfg.seed, "reason": reason})
    log.barriers = {"torso": torso_margin(log.q, cfg) if len(log) else np.zeros(0),
                    "clearance": clearance_margin(log.q, plant, cfg) if len(log) else np.zeros(0),
                    "work": np.array(rows["work"])}
    return RolloutResult(log=log, stats=stats, outcome=outcome, steps=steps, time=t,
                         max_torso_excursion=max_exc, reason=reason)
