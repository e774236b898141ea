"""Output / zero-dynamics coordinates of the biped.

Outputs are the relative joint angles ``y_a = (a1, a2)``; the zero coordinates
are ``z1 = q_u`` and ``z2 = M[0] @ dq``, the angular momentum about the stance
pivot.  Because the first row of B is zero and M does not depend on ``q_u``,
``dz2/dt = -dV/dq_u`` exactly, whatever the inputs.  On the zero-dynamics
manifold that makes the velocity reconstruction a scalar linear solve in
``dq_u``.

All functions accept batched zero states of shape (..., 2).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn
from .policy import eval_policy, forward


class ReconstructionError(RuntimeError):
    """The scalar coefficient of dq_u vanished."""


RECON_TOL = 1e-10


@dataclass
class Lift:
    """Full state on the manifold at z, with the zero-dynamics vector field."""
    q: object  # (..., 3)
    dq: object  # (..., 3), equals d(q)/dz @ zdot
    zdot: object  # (..., 2)
    yd: object
    J: object


def lift(z, policy, model: dyn.ModelParams, residual=None, check=True) -> Lift:
    """x = Phi^-1(0, z) together with omega(0, z) (+ eps(z) when given)."""
    z1 = z[..., 0]
    z2 = z[..., 1]
    yd, J = eval_policy(z, policy)
    q = ad.stack([z1, yd[..., 0], yd[..., 1]], axis=-1)
    z2dot = -dyn.dV_dqu(q, model)
    m11, m12, m13 = dyn.mass_matrix_row(q, model)
    coef = m11 + m12 * J[..., 0, 0] + m13 * J[..., 1, 0]
    if check and np.any(np.abs(ad.value(coef)) < RECON_TOL):
        raise ReconstructionError("velocity reconstruction is singular")
    dqu = (z2 - (m12 * J[..., 0, 1] + m13 * J[..., 1, 1]) * z2dot) / coef
    zdot = ad.stack([dqu, z2dot], axis=-1)
    if residual is not None:
        # the residual is only ever added on top of the nominal field
        zdot = zdot + forward(z, residual)
    da = ad.matmul(J, zdot[..., None])[..., 0]
    dq = ad.stack([zdot[..., 0], da[..., 0], da[..., 1]], axis=-1)
    return Lift(q=q, dq=dq, zdot=zdot, yd=yd, J=J)


def phi_inverse_zero(z, policy, model: dyn.ModelParams):
    """Full state (q, dq) on the zero-dynamics manifold."""
    lf = lift(np.asarray(z, dtype=float), policy, model)
    return lf.q, lf.dq


def omega(z, policy, model: dyn.ModelParams, residual=None):
    """Zero-dynamics vector field omega(0, z; theta) (+ eps(z))."""
    return lift(z, policy, model, residual).zdot


def phi_inverse(eta, z, policy, model: dyn.ModelParams, check=True):
    """Full state (q, dq) with output coordinates eta = (y, dy) at z.

    Inverse of ``phi`` (nominal field): q_a = y_d + y, dq_a = J zdot + dy,
    and dq_u solves the momentum constraint ``z2 = M[0] dq``.
    """
    z1, z2 = z[..., 0], z[..., 1]
    yd, J = eval_policy(z, policy)
    q = ad.stack([z1, yd[..., 0] + eta[..., 0], yd[..., 1] + eta[..., 1]], axis=-1)
    z2dot = -dyn.dV_dqu(q, model)
    m11, m12, m13 = dyn.mass_matrix_row(q, model)
    coef = m11 + m12 * J[..., 0, 0] + m13 * J[..., 1, 0]
    if check and np.any(np.abs(ad.value(coef)) < RECON_TOL):
        raise ReconstructionError("velocity reconstruction is singular")
    rest = m12 * (J[..., 0, 1] * z2dot + eta[..., 2]) + m13 * (J[..., 1, 1] * z2dot + eta[..., 3])
    dqu = (z2 - rest) / coef
    da1 = J[..., 0, 0] * dqu + J[..., 0, 1] * z2dot + eta[..., 2]
    da2 = J[..., 1, 0] * dqu + J[..., 1, 1] * z2dot + eta[..., 3]
    return q, ad.stack([dqu, da1, da2], axis=-1)


def omega_eta(eta, z, policy, model: dyn.ModelParams):
    """Zero-coordinate rates off the manifold, omega(eta, z)."""
    q, dq = phi_inverse(eta, z, policy, model)
    return ad.stack([dq[..., 0], -dyn.dV_dqu(q, model)], axis=-1)


def zero_state(q, dq, model: dyn.ModelParams):
    m = dyn.mass_matrix_row(q, model)
    z2 = m[0] * dq[..., 0] + m[1] * dq[..., 1] + m[2] * dq[..., 2]
    return ad.stack([q[..., 0], z2], axis=-1)


def phi(q, dq, policy, model: dyn.ModelParams, residual=None):
    """(eta, z) for full states.  eta = (y1, y2, dy1, dy2)."""
    z = zero_state(q, dq, model)
    yd, J = eval_policy(z, policy)
    z2dot = -dyn.dV_dqu(q, model)
    if residual is not None:
        z2dot = z2dot + forward(z, residual)[..., 1]
    zdot = ad.stack([dq[..., 0], z2dot], axis=-1)
    y = q[..., 1:] - yd
    dy = dq[..., 1:] - ad.matmul(J, zdot[..., None])[..., 0]
    return ad.concatenate([y, dy], axis=-1), z


def gradient_z2_along_inputs(q, dq, model: dyn.ModelParams):
    """d z2 / d dq projected on each input column of g(x); zero by structure."""
    M = dyn.mass_matrix(q, model)
    # z2 = M[0] dq; g(x) maps u into ddq = M^-1 B u
    return M[0] @ np.linalg.solve(M, dyn.B_MATRIX)


@dataclass
class ImpactLift:
    z_minus: object
    q_minus: object
    dq_minus: object
    q_plus: object
    dq_plus: object
    z_plus: object
    eta_plus: object


def zero_impact_full(z, policy, model: dyn.ModelParams, residual=None) -> ImpactLift:
    """Lift z to the manifold, apply the impact map, project back."""
    lf = lift(z, policy, model, residual)
    dq_post, _ = dyn.impact_velocity(lf.q, lf.dq, model)
    q_plus = ad.matmul(lf.q, dyn.RELABEL.T)
    dq_plus = ad.matmul(dq_post, dyn.RELABEL.T)
    eta_plus, z_plus = phi(q_plus, dq_plus, policy, model, residual)
    return ImpactLift(z_minus=z, q_minus=lf.q, dq_minus=lf.dq, q_plus=q_plus, dq_plus=dq_plus,
                      z_plus=z_plus, eta_plus=eta_plus)


def zero_impact(z, policy, model: dyn.ModelParams, residual=None):
    """(z_plus, eta_plus) after an impact from the manifold state at z."""
    r = zero_impact_full(z, policy, model, residual)
    return r.z_plus, r.eta_plus


def stride_map(z, policy, model: dyn.ModelParams, z1_guard, n_steps=12, residual=None,
               min_z2=1e-3):
    """Impact at z, then follow the zero dynamics until z1 reaches ``z1_guard``.

    The stance phase is integrated with z1 as the independent variable (RK4,
    fixed step count), which is valid while dz1/dt > 0.  Returns
    (z_next, ok) where ok flags samples whose integration stayed forward.
    """
    zp = zero_impact(z, policy, model, residual)[0]
    s0 = zp[..., 0]
    h = (z1_guard - s0) * (1.0 / n_steps)
    p = zp[..., 1]
    ok = np.ones(np.shape(ad.value(p)), dtype=bool)

    def slope(s, p_):
        zz = ad.stack([s, p_], axis=-1)
        zd = lift(zz, policy, model, residual, check=False).zdot
        rate = ad.value(zd[..., 0])
        good = rate > min_z2
        safe = ad.where(good, zd[..., 0], min_z2 + 0.0 * zd[..., 0])
        return zd[..., 1] / safe, good

    s = s0
    for _ in range(n_steps):
        k1, g1 = slope(s, p)
        k2, g2 = slope(s + 0.5 * h, p + 0.5 * h * k1)
        k3, g3 = slope(s + 0.5 * h, p + 0.5 * h * k2)
        k4, g4 = slope(s + h, p + h * k3)
        ok &= g1 & g2 & g3 & g4
        p = p + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (1.0 / 6.0)
        s = s + h
    return ad.stack([s, p], axis=-1), ok


def impact_matched_prior(model: dyn.ModelParams, z1_impact, lean=0.0, bulge=0.0):
    """Cubic phase prior (per output, ascending coefficients in z1).

    Start from a posture with the torso at a fixed absolute angle ``lean``
    and the swing leg mirroring the stance leg with a bulge ``bulge`` (the
    ``ReferenceGait`` shape).  A Hermite term ``c (z1 - a)^2 (z1 + a)`` then
    bends the outputs near ``z1 = -a`` so their slopes there equal the
    post-impact velocity ratios of an impact at ``z1 = a``.  Position and
    velocity then match across the impact for any speed, as long as the
    outputs do not depend on z2.
    """
    a, k = float(z1_impact), float(bulge)
    if a <= 0:
        raise ValueError("impact angle must be positive")
    P = np.polynomial.polynomial
    base = [np.array([lean, -1.0, 0.0, 0.0]), np.array([0.0, -(2.0 + k * a * a), 0.0, k])]
    q = np.array([[a, P.polyval(a, base[0]), P.polyval(a, base[1])]])
    dq = np.array([[1.0, P.polyval(a, P.polyder(base[0])), P.polyval(a, P.polyder(base[1]))]])
    dq_post, _ = dyn.impact_velocity(q, dq, model)
    dq_plus = (dq_post @ dyn.RELABEL.T)[0]
    if abs(dq_plus[0]) < 1e-9:
        raise ReconstructionError("impact leaves no stance velocity")
    ratio = dq_plus[1:] / dq_plus[0]
    hermite = P.polymul(P.polymul([-a, 1.0], [-a, 1.0]), [a, 1.0])
    out = []
    for c, r in zip(base, ratio):
        gap = r - P.polyval(-a, P.polyder(c))
        out.append(tuple(float(v) for v in P.polyadd(c, hermite * gap / (4.0 * a * a))))
    return tuple(out)
