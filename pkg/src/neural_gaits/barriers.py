"""Barrier candidates on the zero dynamics, regions at risk and the Barrier Loss.

A barrier is a scalar ``phi(z)`` with bounds ``lo <= phi <= hi`` encoded as
``h = min(phi - lo, hi - phi)``.  Continuous barriers are checked through
``dh/dt + alpha(h) >= 0`` along the zero-dynamics flow; discrete barriers are
checked across the projected impact; equality terms enter the loss as squared
errors.

All evaluations are batched and built from tape ops, so the loss is
differentiable in the policy parameters.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn
from . import zero_dynamics as zd

CONTINUOUS = "continuous_ineq"
DISCRETE = "discrete_ineq"
EQUALITY = "equality"
KINDS = (CONTINUOUS, DISCRETE, EQUALITY)


@dataclass(frozen=True)
class ClassK:
    """Linear extended class-K function alpha(s) = slope * s."""
    slope: float = 1.0

    def __post_init__(self):
        if not self.slope > 0:
            raise ValueError("class-K slope must be positive")

    def __call__(self, s):
        return self.slope * s


@dataclass(frozen=True)
class Region:
    name: str
    z1: tuple
    z2: tuple

    def __post_init__(self):
        object.__setattr__(self, "z1", tuple(float(v) for v in self.z1))
        object.__setattr__(self, "z2", tuple(float(v) for v in self.z2))
        if not (self.z1[1] > self.z1[0] and self.z2[1] > self.z2[0]):
            raise ValueError(f"region {self.name!r} is empty")
        if not np.all(np.isfinite(self.z1 + self.z2)):
            raise ValueError(f"region {self.name!r} has non-finite bounds")

    @property
    def volume(self):
        return (self.z1[1] - self.z1[0]) * (self.z2[1] - self.z2[0])

    @property
    def center(self):
        return np.array([0.5 * (self.z1[0] + self.z1[1]), 0.5 * (self.z2[0] + self.z2[1])])

    def contains(self, z, tol=0.0):
        z = np.asarray(z)
        return ((z[..., 0] >= self.z1[0] - tol) & (z[..., 0] <= self.z1[1] + tol)
                & (z[..., 1] >= self.z2[0] - tol) & (z[..., 1] <= self.z2[1] + tol))

    def subset_of(self, other: "Region"):
        return (self.z1[0] >= other.z1[0] and self.z1[1] <= other.z1[1]
                and self.z2[0] >= other.z2[0] and self.z2[1] <= other.z2[1])


def momentum_at_speed(model: dyn.ModelParams, v):
    """z2 of the upright configuration rotating rigidly with hip speed v."""
    q0 = np.zeros(3)
    return float(dyn.mass_matrix(q0, model)[0, 0] * v / model.leg_length)


def orbital_box(model: dyn.ModelParams, z1_half=0.25, v_min=0.2, v_max=1.2) -> Region:
    return Region("Z_O", (-z1_half, z1_half),
                  (momentum_at_speed(model, v_min), momentum_at_speed(model, v_max)))


def guard_buffer(z1_impact=0.2, eps1=0.03, z2=(22.0, 34.0)) -> Region:
    return Region("S_eps", (z1_impact - eps1, z1_impact + eps1), z2)


def sample_region(region: Region, seed, n):
    """n i.i.d. uniform samples over the box, deterministic in seed."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    u = rng.random((int(n), 2))
    lo = np.array([region.z1[0], region.z2[0]])
    hi = np.array([region.z1[1], region.z2[1]])
    return lo + u * (hi - lo)


def grid_region(region: Region, n1=200, n2=200):
    """Cell-midpoint tensor grid; returns (points, cell_area)."""
    a = region.z1[0] + (np.arange(n1) + 0.5) * (region.z1[1] - region.z1[0]) / n1
    b = region.z2[0] + (np.arange(n2) + 0.5) * (region.z2[1] - region.z2[0]) / n2
    A, Bm = np.meshgrid(a, b, indexing="ij")
    return np.stack([A.ravel(), Bm.ravel()], axis=-1), region.volume / (n1 * n2)


@dataclass(frozen=True)
class BarrierSpec:
    """One barrier term.

    quantity: torso | clearance | impact_mapping | orbital_return | symmetry |
    foot_on_guard.  ``alpha`` is the class-K slope (continuous), ``gamma``
    the discrete decay (0 < gamma <= 1).  ``params`` holds quantity-specific
    constants (circle centre, band limits, ...).
    """
    name: str
    kind: str
    quantity: str
    region: str
    lower: float = None
    upper: float = None
    alpha: float = 1.0
    gamma: float = 0.5
    weight: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown barrier kind {self.kind!r}")
        if self.quantity not in QUANTITIES:
            raise ValueError(f"unknown barrier quantity {self.quantity!r}")
        for b in (self.lower, self.upper):
            if b is not None and not np.isfinite(b):
                raise ValueError("barrier bounds must be finite")
        if self.kind != EQUALITY and self.lower is None and self.upper is None:
            raise ValueError("inequality barrier needs at least one bound")
        if self.lower is not None and self.upper is not None and self.lower > self.upper:
            raise ValueError("lower bound exceeds upper bound")
        if self.kind == DISCRETE and not 0.0 < self.gamma <= 1.0:
            raise ValueError("discrete gamma must lie in (0, 1]")
        if self.kind == CONTINUOUS:
            ClassK(self.alpha)
        if self.weight < 0:
            raise ValueError("weight must be non-negative")

    @property
    def class_k(self):
        return ClassK(self.alpha)

    def to_dict(self):
        d = asdict(self)
        d["params"] = {k: (list(v) if isinstance(v, (tuple, list)) else v) for k, v in self.params.items()}
        return d

    @staticmethod
    def from_dict(d):
        return BarrierSpec(**d)


QUANTITIES = ("torso", "clearance", "impact_mapping", "orbital_return", "symmetry", "foot_on_guard")


def two_sided(phi, lo, hi):
    """h = min(phi - lo, hi - phi) (one-sided when a bound is None) and the
    sign with which dphi/dt enters dh/dt."""
    if lo is None:
        return hi - phi, -1.0
    if hi is None:
        return phi - lo, 1.0
    a = phi - lo
    b = hi - phi
    pick = ad.value(a) <= ad.value(b)
    return ad.where(pick, a, b), np.where(pick, 1.0, -1.0)


# ----------------------------------------------------------------------------
# quantities


@dataclass
class FlowContext:
    """Manifold lift of a batch from a continuous region."""
    z: object
    lift: zd.Lift


@dataclass
class ImpactContext:
    z: object
    imp: zd.ImpactLift


def flow_context(z, policy, model, residual=None) -> FlowContext:
    return FlowContext(z=z, lift=zd.lift(z, policy, model, residual))


def impact_context(z, policy, model, residual=None) -> ImpactContext:
    return ImpactContext(z=z, imp=zd.zero_impact_full(z, policy, model, residual))


def phi_and_rate(spec: BarrierSpec, ctx: FlowContext, model):
    """phi(z) and d phi / dt along omega for a continuous quantity."""
    q, dq = ctx.lift.q, ctx.lift.dq
    if spec.quantity == "torso":
        return dyn.torso_angle(q), -(dq[..., 0] + dq[..., 1])
    if spec.quantity == "clearance":
        cx, cz = spec.params.get("center", (0.0, -0.15))
        r = spec.params.get("radius", 0.07)
        px, pz = dyn.swing_foot(q, model)
        vx, vz = dyn.swing_foot_velocity(q, dq, model)
        dx = px - cx
        dz = pz - cz
        return dx * dx + dz * dz - r * r, 2.0 * (dx * vx + dz * vz)
    raise ValueError(f"{spec.quantity!r} is not a continuous quantity")


def eval_barrier(spec: BarrierSpec, z, policy, model, residual=None):
    """h(z) for a continuous barrier (or the post-impact h for a discrete one)."""
    if spec.kind == CONTINUOUS:
        phi, _ = phi_and_rate(spec, flow_context(z, policy, model, residual), model)
        return two_sided(phi, spec.lower, spec.upper)[0]
    if spec.kind == DISCRETE:
        post, _ = discrete_terms(spec, impact_context(z, policy, model, residual), policy, model, residual)
        return post
    raise ValueError("equality terms have no barrier value")


def continuous_residual_ctx(spec: BarrierSpec, ctx: FlowContext, model):
    phi, rate = phi_and_rate(spec, ctx, model)
    h, sgn = two_sided(phi, spec.lower, spec.upper)
    return sgn * rate + spec.class_k(h)


def continuous_residual(spec: BarrierSpec, z, policy, model, residual=None):
    """r = dh/dt + alpha(h); r >= 0 is the CBF condition at z."""
    if spec.kind != CONTINUOUS:
        raise ValueError("not a continuous barrier")
    return continuous_residual_ctx(spec, flow_context(z, policy, model, residual), model)


def _band(z2, lo, hi):
    return ad.minimum(z2 - lo, hi - z2) * (1.0 / (hi - lo))


def discrete_terms(spec: BarrierSpec, ctx: ImpactContext, policy, model, residual=None):
    """(h after the update, h before the update) for a discrete barrier."""
    z = ctx.z
    zp = ctx.imp.z_plus
    if spec.quantity == "impact_mapping":
        if spec.params.get("form", "sum") == "sum":
            d = zp[..., 0] + z[..., 0]
        else:
            d = (zp[..., 1] - z[..., 1]) / z[..., 1]
        h_post = two_sided(d, spec.lower, spec.upper)[0]
        # no jump at all: the measure is zero
        h_pre = two_sided(0.0 * d, spec.lower, spec.upper)[0]
        return h_post, h_pre
    if spec.quantity == "orbital_return":
        lo, hi = spec.lower, spec.upper
        z_next, ok = zd.stride_map(z, policy, model, spec.params["z1_guard"],
                                   n_steps=int(spec.params.get("n_steps", 12)), residual=residual)
        h_post = _band(z_next[..., 1], lo, hi)
        # a stance phase that stalls is a hard violation
        h_post = ad.where(ok, h_post, h_post - 1.0)
        return h_post, _band(z[..., 1], lo, hi)
    raise ValueError(f"{spec.quantity!r} is not a discrete quantity")


def discrete_residual_ctx(spec, ctx, policy, model, residual=None):
    h_post, h_pre = discrete_terms(spec, ctx, policy, model, residual)
    return h_post - h_pre + spec.gamma * h_pre


def discrete_residual(spec: BarrierSpec, z, policy, model, residual=None):
    """r = h(z+) - h(z) + gamma h(z); r >= 0 is the discrete CBF condition."""
    if spec.kind != DISCRETE:
        raise ValueError("not a discrete barrier")
    return discrete_residual_ctx(spec, impact_context(z, policy, model, residual), policy, model, residual)


def equality_error(spec: BarrierSpec, z, policy, model, residual=None, ctx=None):
    """Per-sample squared error of an equality term."""
    if spec.quantity == "symmetry":
        ctx = ctx or impact_context(z, policy, model, residual)
        e = ctx.imp.eta_plus
        return ad.sum(e * e, axis=-1)
    if spec.quantity == "foot_on_guard":
        z_slice = ad.stack([0.0 * z[..., 0] + spec.params["z1_guard"], z[..., 1]], axis=-1)
        yd, _ = _policy_eval(z_slice, policy)
        q = ad.stack([z_slice[..., 0], yd[..., 0], yd[..., 1]], axis=-1)
        pz = dyn.swing_foot(q, model)[1]
        return pz * pz
    raise ValueError(f"{spec.quantity!r} is not an equality quantity")


def _policy_eval(z, policy):
    from .policy import eval_policy
    return eval_policy(z, policy)


def term_volume(spec: BarrierSpec, region: Region):
    # the foot-on-guard term lives on the slice z1 = z1_guard
    if spec.quantity == "foot_on_guard":
        return region.z2[1] - region.z2[0]
    return region.volume


# ----------------------------------------------------------------------------
# the loss


@dataclass
class LossBreakdown:
    total: object
    terms: dict
    min_residual: dict

    def values(self):
        return {k: float(ad.value(v)) for k, v in self.terms.items()}


def residuals_on(specs, regions: dict, z_by_region: dict, policy, model, residual=None):
    """Per-spec residual (inequalities) or squared error (equalities) arrays."""
    out = {}
    for rname, z in z_by_region.items():
        group = [s for s in specs if s.region == rname]
        if not group:
            continue
        fctx = None
        ictx = None
        for s in group:
            if s.kind == CONTINUOUS:
                fctx = fctx or flow_context(z, policy, model, residual)
                out[s.name] = continuous_residual_ctx(s, fctx, model)
            elif s.kind == DISCRETE:
                ictx = ictx or impact_context(z, policy, model, residual)
                out[s.name] = discrete_residual_ctx(s, ictx, policy, model, residual)
            else:
                if s.quantity == "symmetry":
                    ictx = ictx or impact_context(z, policy, model, residual)
                out[s.name] = equality_error(s, z, policy, model, residual, ctx=ictx)
    return out


def barrier_loss_on(specs, regions: dict, z_by_region: dict, policy, model, residual=None,
                    margin=0.0, cell_weight=None) -> LossBreakdown:
    """Loss on given sample sets.  ``cell_weight`` (per region) overrides the
    Monte-Carlo weight volume/n, e.g. for grid quadrature."""
    res = residuals_on(specs, regions, z_by_region, policy, model, residual)
    terms = {}
    mins = {}
    total = 0.0
    for s in specs:
        if s.name not in res:
            continue
        r = res[s.name]
        n = np.shape(ad.value(r))[0]
        vol = term_volume(s, regions[s.region])
        w = (cell_weight[s.region] if cell_weight is not None else vol / n)
        if s.quantity == "foot_on_guard" and cell_weight is not None:
            w = vol / n
        if s.kind == EQUALITY:
            t = s.weight * w * ad.sum(r)
        else:
            t = s.weight * w * ad.sum(ad.relu(margin - r))
            mins[s.name] = float(np.min(ad.value(r)))
        terms[s.name] = t
        total = total + t
    return LossBreakdown(total=total, terms=terms, min_residual=mins)


def region_seed(seed, region_index):
    base = [int(s) for s in np.atleast_1d(seed)]
    return base + [int(region_index)]


def barrier_loss(policy, specs, regions: dict, model, seed, n_per_region, residual=None,
                 margin=0.0) -> LossBreakdown:
    """Monte-Carlo Barrier Loss with uniform samples drawn per region."""
    names = sorted({s.region for s in specs})
    z_by_region = {r: sample_region(regions[r], region_seed(seed, i), n_per_region)
                   for i, r in enumerate(names)}
    return barrier_loss_on(specs, regions, z_by_region, policy, model, residual, margin)


def grid_barrier_loss(policy, specs, regions: dict, model, n1=200, n2=200, residual=None):
    """Midpoint-rule quadrature of the loss on dense tensor grids."""
    names = sorted({s.region for s in specs})
    z_by_region, cw = {}, {}
    for r in names:
        pts, area = grid_region(regions[r], n1, n2)
        z_by_region[r] = pts
        cw[r] = area
    return barrier_loss_on(specs, regions, z_by_region, policy, model, residual, cell_weight=cw)


# ----------------------------------------------------------------------------
# defaults


def default_regions(model: dyn.ModelParams, z1_half=0.25, v_min=0.2, v_max=1.2, z1_impact=0.2,
                    eps1=0.03, guard_z2=(25.0, 35.0)):
    zo = orbital_box(model, z1_half, v_min, v_max)
    se = guard_buffer(z1_impact, eps1, guard_z2)
    if not se.subset_of(zo):
        raise ValueError("the guard buffer must lie inside the orbital box")
    return {zo.name: zo, se.name: se}


def default_specs(z1_impact=0.2):
    return [
        BarrierSpec("torso", CONTINUOUS, "torso", "Z_O", lower=-np.pi / 10, upper=0.05, alpha=1.0),
        BarrierSpec("clearance", CONTINUOUS, "clearance", "Z_O", lower=0.0, upper=0.3, alpha=30.0,
                    params={"center": (0.0, -0.2), "radius": 0.07}),
        BarrierSpec("impact_mapping", DISCRETE, "impact_mapping", "S_eps", lower=-0.15, upper=0.15,
                    gamma=1.0, params={"form": "sum"}),
        BarrierSpec("orbital_return", DISCRETE, "orbital_return", "S_eps", lower=20.0, upper=40.0,
                    gamma=0.5, params={"z1_guard": z1_impact, "n_steps": 8}),
        BarrierSpec("symmetry", EQUALITY, "symmetry", "S_eps", weight=10.0),
        BarrierSpec("foot_on_guard", EQUALITY, "foot_on_guard", "S_eps", weight=10.0,
                    params={"z1_guard": z1_impact}),
    ]
