"""Sampled certification of a trained policy.

Everything here is sampled evidence, not proof: minimum CBF residuals over
fresh samples, difference-quotient Lipschitz estimates, and the combined
barrier ``h(eta, z) = h_Z(z) - sigma V_eta(eta)`` for the continuous dynamics
under an exactly feedback-linearised output.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.linalg import solve_continuous_lyapunov
from scipy.stats import qmc

from . import autodiff as ad
from . import barriers as bar
from . import dynamics as dyn
from . import zero_dynamics as zd

SIGMA_SWEEP = tuple(2.0 ** k for k in range(-6, 7))
LIPSCHITZ_SAFETY = 1.5


# ----------------------------------------------------------------------------
# sampled CBF check


@dataclass
class BarrierCheck:
    name: str
    kind: str
    region: str
    n_samples: int
    min_residual: float
    worst_z: list
    passed: bool


@dataclass
class CombinedCheck:
    spec: str
    sigma: float
    c: float
    gamma: float
    alpha: float
    lambda_min_P: float
    L_hZ: float
    L_omega_eta: float
    beta1: float
    beta2: float
    margin: float  # min over samples of dh/dt + alpha h - c
    margin_lower: float  # same with -c, the bound the derivation produces
    worst_z: list
    n_samples: int
    passed: bool


@dataclass
class CertificationReport:
    tol: float
    seed: int
    barriers: list = field(default_factory=list)
    equalities: dict = field(default_factory=dict)
    combined: CombinedCheck = None

    @property
    def passed(self):
        ok = all(b.passed for b in self.barriers)
        return ok and (self.combined is None or self.combined.passed)

    @property
    def min_continuous(self):
        vals = [b.min_residual for b in self.barriers if b.kind == bar.CONTINUOUS]
        return min(vals) if vals else math.inf

    @property
    def min_discrete(self):
        vals = [b.min_residual for b in self.barriers if b.kind == bar.DISCRETE]
        return min(vals) if vals else math.inf

    def to_dict(self):
        return {"tol": self.tol, "seed": self.seed, "passed": self.passed,
                "min_continuous_residual": self.min_continuous,
                "min_discrete_residual": self.min_discrete,
                "barriers": [asdict(b) for b in self.barriers],
                "equalities": dict(self.equalities),
                "combined": asdict(self.combined) if self.combined else None}

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")

    def summary(self):
        lines = [f"{'barrier':<16}{'region':<8}{'min residual':>14}  status"]
        for b in self.barriers:
            lines.append(f"{b.name:<16}{b.region:<8}{b.min_residual:>14.4e}  {'pass' if b.passed else 'FAIL'}")
        for k, v in self.equalities.items():
            lines.append(f"{k:<16}{'':<8}{v:>14.4e}  (rms equality error)")
        if self.combined:
            c = self.combined
            lines.append(f"combined {c.spec}: sigma={c.sigma:g} c={c.c:.3e} margin={c.margin:.3e} "
                         f"{'pass' if c.passed else 'FAIL'}")
        lines.append("certified" if self.passed else "not certified")
        return "\n".join(lines)


def certification_samples(region: bar.Region, n, seed):
    """Scrambled Sobol points (the largest power of two up to n/2), the rest
    uniform, all inside the box."""
    n_qmc = 1 << int(math.log2(n // 2)) if n >= 2 else 0
    lo = np.array([region.z1[0], region.z2[0]])
    hi = np.array([region.z1[1], region.z2[1]])
    parts = []
    if n_qmc:
        sob = qmc.Sobol(d=2, scramble=True, seed=np.random.default_rng([*np.atleast_1d(seed), 7]))
        parts.append(lo + (hi - lo) * sob.random_base2(int(math.log2(n_qmc))))
    parts.append(bar.sample_region(region, [*np.atleast_1d(seed), 8], n - n_qmc))
    return np.concatenate(parts)


def certify(policy, specs, regions, model, n_samples=10_000, tol=1e-3, seed=0, residual=None,
            chunk=2048) -> CertificationReport:
    """Minimum CBF residual per barrier over fresh samples of its region."""
    if n_samples < 1000:
        raise ValueError("certification needs at least 10^3 samples")
    report = CertificationReport(tol=tol, seed=int(seed))
    for i, (rname, region) in enumerate(sorted(regions.items())):
        group = [s for s in specs if s.region == rname]
        if not group:
            continue
        z = certification_samples(region, n_samples, [int(seed), i])
        pieces = {s.name: [] for s in group}
        for a in range(0, len(z), chunk):
            res = bar.residuals_on(group, regions, {rname: z[a:a + chunk]}, policy, model, residual)
            for k, v in res.items():
                pieces[k].append(np.asarray(ad.value(v), dtype=float))
        for s in group:
            r = np.concatenate(pieces[s.name])
            if s.kind == bar.EQUALITY:
                report.equalities[s.name] = float(np.sqrt(np.mean(r)))
                continue
            k = int(np.argmin(r))
            report.barriers.append(BarrierCheck(
                name=s.name, kind=s.kind, region=rname, n_samples=len(r), min_residual=float(r[k]),
                worst_z=[float(v) for v in z[k]], passed=bool(r[k] >= -tol)))
    return report


# ----------------------------------------------------------------------------
# Lipschitz constants


def _box(region):
    if isinstance(region, bar.Region):
        return np.array([region.z1[0], region.z2[0]]), np.array([region.z1[1], region.z2[1]])
    lo, hi = (np.asarray(v, dtype=float) for v in region)
    if np.any(hi < lo):
        raise ValueError("empty region")
    return lo, hi


def lipschitz_estimate(fn, region, n_pairs=10_000, seed=0, safety=LIPSCHITZ_SAFETY, vary=None,
                       local=0.01, chunk=4096):
    """``safety`` times the largest sampled difference quotient of ``fn``.

    Half the pairs are independent points of the box, half are local pairs
    (offset ``local`` of the box width) that probe the derivative.  ``vary``
    masks which coordinates differ within a pair.  The pair stream is
    prefix-stable: the first n pairs do not depend on ``n_pairs``.
    """
    lo, hi = _box(region)
    d = lo.size
    mask = np.ones(d, dtype=bool) if vary is None else np.asarray(vary, dtype=bool)
    rng = np.random.default_rng(seed)
    u = rng.random((n_pairs, 3 * d + 1))
    width = hi - lo
    a = lo + width * u[:, :d]
    far = lo + width * u[:, d:2 * d]
    near = np.clip(a + local * width * (2.0 * u[:, 2 * d:3 * d] - 1.0), lo, hi)
    b = np.where((u[:, -1] < 0.5)[:, None], near, far)
    b = np.where(mask, b, a)
    best = 0.0
    for s in range(0, n_pairs, chunk):
        aa, bb = a[s:s + chunk], b[s:s + chunk]
        dist = np.linalg.norm(aa - bb, axis=-1)
        keep = dist > 1e-12
        if not np.any(keep):
            continue
        fa = np.asarray(fn(aa[keep]), dtype=float).reshape(keep.sum(), -1)
        fb = np.asarray(fn(bb[keep]), dtype=float).reshape(keep.sum(), -1)
        q = np.linalg.norm(fa - fb, axis=-1) / dist[keep]
        best = max(best, float(q.max()))
    return safety * best


# ----------------------------------------------------------------------------
# output Lyapunov function


@dataclass
class OutputLyapunov:
    P: np.ndarray
    gamma: float
    A: np.ndarray
    Q: np.ndarray

    @property
    def lambda_min(self):
        return float(np.linalg.eigvalsh(self.P)[0])

    def value(self, eta):
        eta = np.asarray(eta, dtype=float)
        return np.einsum("...i,ij,...j->...", eta, self.P, eta)

    def rate(self, eta):
        """dV/dt along eta' = A eta."""
        eta = np.asarray(eta, dtype=float)
        M = self.A.T @ self.P + self.P @ self.A
        return np.einsum("...i,ij,...j->...", eta, M, eta)


def output_matrix(kp, kd, n_outputs=2):
    """Closed-loop matrix of eta = (y, dy) under ydd = -kp y - kd dy."""
    I = np.eye(n_outputs)
    Z = np.zeros((n_outputs, n_outputs))
    return np.block([[Z, I], [-kp * I, -kd * I]])


def lyapunov_from_matrix(A, Q=None) -> OutputLyapunov:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.eye(A.shape[0]) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
    if np.max(np.linalg.eigvals(A).real) >= 0:
        raise ValueError("closed-loop output matrix is not Hurwitz")
    P = solve_continuous_lyapunov(A.T, -Q)
    P = 0.5 * (P + P.T)
    gamma = float(np.linalg.eigvalsh(Q)[0] / np.linalg.eigvalsh(P)[-1])
    return OutputLyapunov(P=P, gamma=gamma, A=A, Q=Q)


def output_lyapunov(kp, kd, n_outputs=2) -> OutputLyapunov:
    return lyapunov_from_matrix(output_matrix(kp, kd, n_outputs))


# ----------------------------------------------------------------------------
# combined barrier


@dataclass
class CombinedSetup:
    """Sigma-independent pieces of the combined-barrier check."""
    spec: bar.BarrierSpec
    alpha: float
    lyap: OutputLyapunov
    L_hZ: float
    L_omega_eta: float
    z: np.ndarray
    residual: np.ndarray  # dh_Z/dt + alpha h_Z at each sample

    @property
    def beta1(self):
        return self.L_hZ * self.L_omega_eta

    @property
    def beta2(self):
        return 0.5 * self.lyap.gamma * self.lyap.lambda_min


def barrier_value(spec, z, policy, model):
    return np.asarray(ad.value(bar.eval_barrier(spec, np.asarray(z, dtype=float), policy, model)))


def barrier_gradient(spec, z, policy, model):
    """Per-sample gradient of h_Z with respect to z."""
    zv = ad.Var(np.array(z, dtype=float))
    ad.backward(ad.sum(bar.eval_barrier(spec, zv, policy, model)))
    return zv.grad


def combined_setup(spec, policy, lyap: OutputLyapunov, region, model, n_samples=10_000, seed=0,
                   alpha=None, eta_radius=0.2, n_pairs=20_000) -> CombinedSetup:
    if spec.kind != bar.CONTINUOUS:
        raise ValueError("the combined barrier is built from a continuous barrier")
    alpha = spec.alpha if alpha is None else float(alpha)
    if alpha > 0.5 * lyap.gamma + 1e-12:
        raise ValueError(f"alpha = {alpha:g} exceeds gamma_V / 2 = {0.5 * lyap.gamma:g}")
    lo, hi = _box(region)
    L_h = lipschitz_estimate(lambda zz: barrier_value(spec, zz, policy, model), region, n_pairs,
                             [int(seed), 11])
    k = lyap.P.shape[0]
    box_lo = np.concatenate([-eta_radius * np.ones(k), lo])
    box_hi = np.concatenate([eta_radius * np.ones(k), hi])

    def w(x):
        return np.asarray(zd.omega_eta(x[:, :k], x[:, k:], policy, model), dtype=float)

    L_w = lipschitz_estimate(w, (box_lo, box_hi), n_pairs, [int(seed), 12],
                             vary=np.r_[np.ones(k, bool), np.zeros(2, bool)])
    z = certification_samples(region if isinstance(region, bar.Region) else
                              bar.Region("box", (lo[0], hi[0]), (lo[1], hi[1])), n_samples, [int(seed), 13])
    probe = replace(spec, alpha=alpha)
    r = np.asarray(ad.value(bar.continuous_residual(probe, z, policy, model)), dtype=float)
    return CombinedSetup(spec=spec, alpha=alpha, lyap=lyap, L_hZ=L_h, L_omega_eta=L_w, z=z, residual=r)


def strengthening_constant(beta1, beta2, sigma):
    if not sigma > 0:
        raise ValueError("sigma must be positive; c is undefined at sigma = 0")
    return beta1 * beta1 / (4.0 * sigma * beta2)


def combined_barrier_check(setup: CombinedSetup, sigma, tol=0.0) -> CombinedCheck:
    """Sampled check of dh_Z/dt >= -alpha h_Z + c with c = beta1^2 / (4 sigma beta2)."""
    c = strengthening_constant(setup.beta1, setup.beta2, sigma)
    k = int(np.argmin(setup.residual))
    m = float(setup.residual[k])
    return CombinedCheck(spec=setup.spec.name, sigma=float(sigma), c=float(c), gamma=setup.lyap.gamma,
                         alpha=setup.alpha, lambda_min_P=setup.lyap.lambda_min, L_hZ=setup.L_hZ,
                         L_omega_eta=setup.L_omega_eta, beta1=setup.beta1, beta2=setup.beta2,
                         margin=m - c, margin_lower=m + c, worst_z=[float(v) for v in setup.z[k]],
                         n_samples=int(setup.residual.size), passed=bool(m - c >= -tol))


def sigma_sweep(setup: CombinedSetup, sigmas=SIGMA_SWEEP, tol=0.0):
    """(first passing check or None, all checks) over increasing sigma."""
    checks = [combined_barrier_check(setup, s, tol) for s in sorted(sigmas)]
    first = next((c for c in checks if c.passed), None)
    return first, checks


def combined_condition_samples(setup: CombinedSetup, sigma, policy, model, n_eta=8, n_z=256,
                               eta_radius=0.2, seed=0):
    """dh/dt + alpha h for h(eta, z) = h_Z(z) - sigma V(eta) on a product of
    eta samples (norm <= eta_radius) and z samples, along the exact flow
    (omega(eta, z), A eta)."""
    rng = np.random.default_rng([int(seed), 14])
    k = setup.lyap.P.shape[0]
    eta = rng.normal(size=(n_eta, k))
    eta *= (eta_radius * rng.random((n_eta, 1)) ** (1.0 / k)) / np.linalg.norm(eta, axis=-1, keepdims=True)
    z = setup.z[:n_z]
    E = np.repeat(eta, len(z), axis=0)
    Z = np.tile(z, (n_eta, 1))
    hz = barrier_value(setup.spec, Z, policy, model)
    grad = barrier_gradient(setup.spec, Z, policy, model)
    w = np.asarray(zd.omega_eta(E, Z, policy, model), dtype=float)
    hdot = np.sum(grad * w, axis=-1) - sigma * setup.lyap.rate(E)
    h = hz - sigma * setup.lyap.value(E)
    return hdot + setup.alpha * h, h
