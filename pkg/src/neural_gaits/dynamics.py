"""Three-link planar biped: two rigid legs, a torso, point feet, pinned stance.

Coordinates ``q = (q_u, a1, a2)``: ``q_u`` is the absolute stance-leg angle,
``a1`` the torso angle relative to the stance leg and ``a2`` the swing-leg
angle relative to the stance leg.  Absolute link angles are measured from the
upward vertical, positive clockwise, so a link at angle ``t`` points along
``(sin t, cos t)``.  Walking progresses toward +x and ``q_u`` grows during a
step.  Positions are in the stance-foot frame.

Every mass is a point mass, so each body position is ``sum_l c_l e(t_l)`` over
the links on its path from the stance foot.  The mass matrix, its coordinate
derivatives and the potential all follow from that representation.

Functions taking ``q``/``dq`` accept arrays with arbitrary leading batch axes
(trailing axis of size 3).  The configuration-level helpers (``link_angles``,
``mass_matrix_row``, ``dV_dqu``, ``positions``) are written against
:mod:`neural_gaits.autodiff` so they also run on tape variables.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad


class DomainError(ValueError):
    """Non-finite or out-of-range input."""


class SingularityError(RuntimeError):
    """A linear system that must be solved is numerically singular."""


class GuardError(ValueError):
    """Impact requested away from the guard."""


@dataclass(frozen=True)
class ModelParams:
    leg_mass: float = 5.0
    hip_mass: float = 15.0
    torso_mass: float = 10.0
    leg_length: float = 1.0
    torso_length: float = 0.5
    leg_com_ratio: float = 0.5  # distance hip -> leg COM, as a fraction of leg_length
    torso_com_ratio: float = 0.5  # distance hip -> torso COM, fraction of torso_length
    gravity: float = 9.81
    joint_damping: float = 0.0

    def __post_init__(self):
        for name in ("leg_mass", "hip_mass", "torso_mass", "leg_length", "torso_length", "gravity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("leg_com_ratio", "torso_com_ratio"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.joint_damping < 0:
            raise ValueError("joint_damping must be non-negative")

    @property
    def total_mass(self):
        return 2 * self.leg_mass + self.hip_mass + self.torso_mass

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def surrogate_params(nominal: ModelParams | None = None, torso_scale=1.2, leg_scale=1.1, damping=0.5):
    """Perturbed plant standing in for hardware."""
    nominal = nominal or ModelParams()
    return replace(nominal, torso_mass=nominal.torso_mass * torso_scale,
                   leg_mass=nominal.leg_mass * leg_scale, joint_damping=damping)


# link index: 0 stance leg, 1 torso, 2 swing leg.  Row l gives d(t_l)/dq.
LINK_MAP = np.array([[1.0, 0.0, 0.0],
                     [1.0, 1.0, 0.0],
                     [1.0, 0.0, 1.0]])

# relabel matrix: swaps the legs' roles; an involution
RELABEL = np.array([[1.0, 0.0, 1.0],
                    [0.0, 1.0, -1.0],
                    [0.0, 0.0, -1.0]])

B_MATRIX = np.array([[0.0, 0.0],
                     [1.0, 0.0],
                     [0.0, 1.0]])


def bodies(p: ModelParams):
    """(mass, [(coefficient, link), ...]) for every point mass."""
    L, rl = p.leg_length, p.leg_com_ratio
    lt = p.torso_length * p.torso_com_ratio
    return [
        (p.leg_mass, [((1.0 - rl) * L, 0)]),
        (p.hip_mass, [(L, 0)]),
        (p.torso_mass, [(L, 0), (lt, 1)]),
        (p.leg_mass, [(L, 0), (-rl * L, 2)]),
    ]


def _pair_weights(p: ModelParams):
    """W[l, l'] = sum_i m_i c_il c_il' so that M = A^T (W * cos(t_l - t_l')) A."""
    W = np.zeros((3, 3))
    for m, path in bodies(p):
        for c1, l1 in path:
            for c2, l2 in path:
                W[l1, l2] += m * c1 * c2
    return W


def _first_moments(p: ModelParams):
    """S[l] = sum_i m_i c_il; the mass-weighted COM is sum_l S_l e(t_l)."""
    S = np.zeros(3)
    for m, path in bodies(p):
        for c, l in path:
            S[l] += m * c
    return S


def link_angles(q):
    """Absolute angles (stance, torso, swing) as a list of three arrays."""
    qu, a1, a2 = q[..., 0], q[..., 1], q[..., 2]
    return [qu, qu + a1, qu + a2]


def check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(ad.value(a))):
            raise DomainError("non-finite input")


# ----------------------------------------------------------------------------
# dynamics terms


def mass_matrix(q, p: ModelParams):
    q = np.asarray(q, dtype=float)
    W = _pair_weights(p)
    t = np.stack(link_angles(q), axis=-1)
    Cd = np.cos(t[..., :, None] - t[..., None, :])
    return np.einsum("li,...lk,kj->...ij", LINK_MAP, W * Cd, LINK_MAP)


def mass_matrix_derivative(q, p: ModelParams):
    """dM[..., i, j, k] = dM_ij / dq_k."""
    q = np.asarray(q, dtype=float)
    W = _pair_weights(p)
    t = np.stack(link_angles(q), axis=-1)
    Sd = np.sin(t[..., :, None] - t[..., None, :])
    diffA = LINK_MAP[:, None, :] - LINK_MAP[None, :, :]  # d(t_l - t_l')/dq_k
    dCd = -(W * Sd)[..., None] * diffA  # (..., l, l', k)
    return np.einsum("li,...lmk,mj->...ijk", LINK_MAP, dCd, LINK_MAP)


def coriolis_matrix(q, dq, p: ModelParams):
    """Christoffel construction, so that dM/dt - 2C is skew-symmetric."""
    dM = mass_matrix_derivative(q, p)
    dq = np.asarray(dq, dtype=float)
    gamma = 0.5 * (dM + np.swapaxes(dM, -1, -2) - np.swapaxes(dM, -3, -1))
    # gamma[i, j, k] = 1/2 (dM_ij/dq_k + dM_ik/dq_j - dM_jk/dq_i); C_ij = sum_k gamma_ijk dq_k
    return np.einsum("...ijk,...k->...ij", gamma, dq)


def potential_energy(q, p: ModelParams):
    S = _first_moments(p)
    t = link_angles(q)
    return p.gravity * (S[0] * ad.cos(t[0]) + S[1] * ad.cos(t[1]) + S[2] * ad.cos(t[2]))


def gravity_vector(q, p: ModelParams):
    q = np.asarray(q, dtype=float)
    S = _first_moments(p)
    t = np.stack(link_angles(q), axis=-1)
    dV_dt = -p.gravity * S * np.sin(t)
    return dV_dt @ LINK_MAP


def dV_dqu(q, p: ModelParams):
    """dV/dq_u = -g * (total mass) * x_com; tape-compatible."""
    S = _first_moments(p)
    t = link_angles(q)
    return -p.gravity * (S[0] * ad.sin(t[0]) + S[1] * ad.sin(t[1]) + S[2] * ad.sin(t[2]))


def dV_dqu_gradient(q, p: ModelParams):
    """Gradient of dV/dq_u with respect to q, shape (..., 3)."""
    q = np.asarray(q, dtype=float)
    S = _first_moments(p)
    t = np.stack(link_angles(q), axis=-1)
    return (-p.gravity * S * np.cos(t)) @ LINK_MAP


def mass_matrix_row(q, p: ModelParams):
    """First row of M as a list (M11, M12, M13); tape-compatible.

    M11 * dq_u + M12 * da1 + M13 * da2 is the angular momentum about the stance
    pivot (clockwise positive).
    """
    W = _pair_weights(p)
    t = link_angles(q)
    c01 = ad.cos(t[0] - t[1])
    c02 = ad.cos(t[0] - t[2])
    c12 = ad.cos(t[1] - t[2])
    # column sums with A = LINK_MAP: d t_l/dq_u = 1 for all links
    m_l1 = W[1, 0] * c01 + W[1, 1] + W[1, 2] * c12  # sum_l' W[1,l'] cos(t1 - t_l')
    m_l2 = W[2, 0] * c02 + W[2, 1] * c12 + W[2, 2]
    m_l0 = W[0, 0] + W[0, 1] * c01 + W[0, 2] * c02
    M11 = m_l0 + m_l1 + m_l2
    return [M11, m_l1, m_l2]


@dataclass
class DynamicsTerms:
    M: np.ndarray
    C: np.ndarray
    G: np.ndarray
    B: np.ndarray


def dynamics_terms(q, dq, p: ModelParams) -> DynamicsTerms:
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    check_finite(q, dq)
    return DynamicsTerms(M=mass_matrix(q, p), C=coriolis_matrix(q, dq, p),
                         G=gravity_vector(q, p), B=B_MATRIX.copy())


def forward_dynamics(q, dq, u, p: ModelParams):
    """Accelerations ``ddq = M^-1 (B (u - d da) - C dq - G)`` for one state.

    Damping acts on the two actuated hip joints only; the stance contact is a
    pinned point foot.
    """
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    u = np.asarray(u, dtype=float)
    check_finite(q, dq, u)
    M = mass_matrix(q, p)
    # M is symmetric positive definite; a tiny det relative to its diagonal
    # is a cheap stand-in for a condition-number check
    if np.linalg.det(M) <= 1e-12 * np.prod(np.diag(M)):
        raise SingularityError("mass matrix is numerically singular")
    C = coriolis_matrix(q, dq, p)
    rhs = B_MATRIX @ (u - p.joint_damping * dq[1:]) - C @ dq - gravity_vector(q, p)
    return np.linalg.solve(M, rhs)


def state_derivative(x, u, p: ModelParams):
    x = np.asarray(x, dtype=float)
    return np.concatenate([x[3:], forward_dynamics(x[:3], x[3:], u, p)])


def total_energy(q, dq, p: ModelParams):
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    M = mass_matrix(q, p)
    return 0.5 * np.einsum("...i,...ij,...j->...", dq, M, dq) + potential_energy(q, p)


# ----------------------------------------------------------------------------
# kinematics


def hip_position(q, p: ModelParams):
    t = link_angles(q)
    L = p.leg_length
    return [L * ad.sin(t[0]), L * ad.cos(t[0])]


def swing_foot(q, p: ModelParams):
    t = link_angles(q)
    L = p.leg_length
    return [L * (ad.sin(t[0]) - ad.sin(t[2])), L * (ad.cos(t[0]) - ad.cos(t[2]))]


def swing_foot_velocity(q, dq, p: ModelParams):
    t = link_angles(q)
    dt = link_angles(dq)
    L = p.leg_length
    return [L * (ad.cos(t[0]) * dt[0] - ad.cos(t[2]) * dt[2]),
            L * (-ad.sin(t[0]) * dt[0] + ad.sin(t[2]) * dt[2])]


def torso_angle(q):
    """Absolute torso angle from vertical; forward lean is negative."""
    return -(q[..., 0] + q[..., 1])


def center_of_mass(q, p: ModelParams):
    S = _first_moments(p)
    t = link_angles(q)
    m = p.total_mass
    return [(S[0] * ad.sin(t[0]) + S[1] * ad.sin(t[1]) + S[2] * ad.sin(t[2])) / m,
            (S[0] * ad.cos(t[0]) + S[1] * ad.cos(t[1]) + S[2] * ad.cos(t[2])) / m]


def kinematics(q, p: ModelParams):
    q = np.asarray(q, dtype=float)
    check_finite(q)
    px, pz = swing_foot(q, p)
    cx, cz = center_of_mass(q, p)
    return {"swing_foot": np.stack([px, pz], axis=-1),
            "torso_angle": torso_angle(q),
            "com": np.stack([cx, cz], axis=-1)}


def guard_value(q, p: ModelParams):
    """Swing-foot height; the guard is its downward zero crossing with p_x > 0."""
    return swing_foot(np.asarray(q, dtype=float), p)[1]


def point_positions(q, p: ModelParams):
    """(n_bodies, 2) positions of every point mass for one configuration."""
    t = np.array(link_angles(np.asarray(q, dtype=float)))
    out = []
    for _, path in bodies(p):
        x = sum(c * np.sin(t[l]) for c, l in path)
        z = sum(c * np.cos(t[l]) for c, l in path)
        out.append((x, z))
    return np.array(out, dtype=float)


def point_jacobians(q, p: ModelParams):
    """(n_bodies, 2, 3) Jacobians of the point-mass positions."""
    t = np.array(link_angles(np.asarray(q, dtype=float)))
    out = []
    for _, path in bodies(p):
        J = np.zeros((2, 3))
        for c, l in path:
            J[0] += c * np.cos(t[l]) * LINK_MAP[l]
            J[1] += -c * np.sin(t[l]) * LINK_MAP[l]
        out.append(J)
    return np.array(out)


def angular_momentum(q, dq, p: ModelParams, about=(0.0, 0.0)):
    """Clockwise angular momentum about a point, by direct summation."""
    r = point_positions(q, p) - np.asarray(about, dtype=float)
    v = point_jacobians(q, p) @ np.asarray(dq, dtype=float)
    m = np.array([b[0] for b in bodies(p)])
    # clockwise = -(x v_z - z v_x)
    return float(np.sum(m * (r[:, 1] * v[:, 0] - r[:, 0] * v[:, 1])))


# ----------------------------------------------------------------------------
# impact


def relabel(q):
    return np.asarray(q, dtype=float) @ RELABEL.T


@dataclass
class ImpactResult:
    q: np.ndarray
    dq: np.ndarray
    energy_loss: float
    impulse: np.ndarray


def impact_system(q, p: ModelParams):
    """Extended (floating stance foot) inertia matrix and swing-foot Jacobian.

    Returns (Me, E) with Me of shape (..., 5, 5) and E of shape (..., 2, 5);
    tape-compatible in q.
    """
    W = _pair_weights(p)
    S = _first_moments(p)
    t = link_angles(q)
    m = p.total_mass
    L = p.leg_length
    cos_d = [[ad.cos(t[i] - t[j]) for j in range(3)] for i in range(3)]
    # d(sum_i m_i r_i)/dq: sum_l S_l e'(t_l) A_l
    ex = [S[l] * ad.cos(t[l]) for l in range(3)]
    ez = [-S[l] * ad.sin(t[l]) for l in range(3)]
    row_x = [ex[0] + ex[1] + ex[2], ex[1], ex[2]]
    row_z = [ez[0] + ez[1] + ez[2], ez[1], ez[2]]
    inner = [[sum(W[l, k] * cos_d[l][k] * LINK_MAP[l, i] * LINK_MAP[k, j]
                  for l in range(3) for k in range(3)) for j in range(3)] for i in range(3)]
    zero = 0.0 * t[0]
    Me = [[inner[0][0], inner[0][1], inner[0][2], row_x[0], row_z[0]],
          [inner[1][0], inner[1][1], inner[1][2], row_x[1], row_z[1]],
          [inner[2][0], inner[2][1], inner[2][2], row_x[2], row_z[2]],
          [row_x[0], row_x[1], row_x[2], m + zero, zero],
          [row_z[0], row_z[1], row_z[2], zero, m + zero]]
    Me = ad.stack([ad.stack(r, axis=-1) for r in Me], axis=-2)
    # swing foot = hip - L e(t2) in the floating frame
    jx = [L * ad.cos(t[0]) - L * ad.cos(t[2]), zero, -L * ad.cos(t[2]), 1.0 + zero, zero]
    jz = [-L * ad.sin(t[0]) + L * ad.sin(t[2]), zero, L * ad.sin(t[2]), zero, 1.0 + zero]
    E = ad.stack([ad.stack(jx, axis=-1), ad.stack(jz, axis=-1)], axis=-2)
    return Me, E


def impact_velocity(q, dq, p: ModelParams):
    """Post-impact velocity in the pre-impact labels (tape-compatible).

    Solves ``[[Me, -E^T], [E, 0]] [dqe+; F] = [Me dqe-; 0]``.  Returns
    (dq_plus, impulse) with dq_plus of shape (..., 3) and impulse (..., 2).
    """
    Me, E = impact_system(q, p)
    Et = ad.swapaxes(E, -1, -2)
    zeros22 = np.zeros(np.shape(ad.value(E))[:-2] + (2, 2))
    top = ad.concatenate([Me, -Et], axis=-1)
    bot = ad.concatenate([E, zeros22], axis=-1)
    K = ad.concatenate([top, bot], axis=-2)
    dqe = ad.concatenate([dq, np.zeros(np.shape(ad.value(dq))[:-1] + (2,))], axis=-1)
    rhs_top = ad.matmul(Me, dqe[..., None])[..., 0]
    rhs = ad.concatenate([rhs_top, np.zeros(np.shape(ad.value(rhs_top))[:-1] + (2,))], axis=-1)
    sol = ad.solve(K, rhs)
    return sol[..., :3], sol[..., 5:]


def impact_map(q, dq, p: ModelParams, guard_tol=1e-6, check_guard=True) -> ImpactResult:
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    check_finite(q, dq)
    if check_guard:
        pz = guard_value(q, p)
        vz = swing_foot_velocity(q, dq, p)[1]
        if abs(pz) > guard_tol:
            raise GuardError(f"swing foot height {pz:.3e} is not on the guard")
        if vz > 0:
            raise GuardError("swing foot is moving upward")
    Me, E = impact_system(q, p)
    K = np.block([[Me, -E.T], [E, np.zeros((2, 2))]])
    if np.linalg.cond(K) > 1e12:
        raise SingularityError("impact matrix is numerically singular")
    dq_plus, impulse = impact_velocity(q, dq, p)
    e_minus = total_energy(q, dq, p)
    e_plus = total_energy(q, dq_plus, p)
    return ImpactResult(q=relabel(q), dq=relabel(dq_plus),
                        energy_loss=float(e_minus - e_plus), impulse=np.asarray(impulse))
