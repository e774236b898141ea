"""Gait policy ``y_d(z; theta)`` and residual net ``eps(z)``.

Both are tanh MLPs with a fixed affine input normalisation.  The forward pass
also returns the exact input Jacobian, built from tape ops so that parameter
gradients flow through it.

A network may carry a fixed (untrained) polynomial prior in the phase
variable z1 and an output scale::

    y(z) = prior(z1) + output_scale * mlp(z)

With the defaults (no prior, unit scale) it is the plain MLP.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = 1


@dataclass
class MLPParams:
    sizes: tuple = (2, 16, 16, 2)
    params: np.ndarray = None  # flat vector, or an ad.Var while training
    input_center: tuple = (0.0, 0.0)
    input_scale: tuple = (1.0, 1.0)
    activation: str = "tanh"
    kind: str = "policy"
    output_scale: tuple = None
    prior_poly: tuple = None  # per output, ascending coefficients in z1
    anchor: np.ndarray = None  # frozen parameters whose output is subtracted

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        n_in, n_out = self.sizes[0], self.sizes[-1]
        self.input_center = tuple(float(v) for v in self.input_center)
        self.input_scale = tuple(float(v) for v in self.input_scale)
        self.output_scale = tuple(float(v) for v in (self.output_scale or (1.0,) * n_out))
        poly = self.prior_poly if self.prior_poly is not None else [[0.0]] * n_out
        self.prior_poly = tuple(tuple(float(v) for v in row) for row in poly)
        if len(self.output_scale) != n_out or len(self.prior_poly) != n_out \
                or len(self.input_scale) != n_in or len(self.input_center) != n_in:
            raise ValueError("normalisation shapes do not match the architecture")
        if any(len(row) == 0 for row in self.prior_poly):
            raise ValueError("empty prior polynomial")
        if self.activation != "tanh":
            raise ValueError("only the tanh activation is supported")
        if self.anchor is not None:
            self.anchor = np.asarray(self.anchor, dtype=float)
            if self.anchor.shape != (n_params(self.sizes),):
                raise ValueError("anchor size does not match the architecture")
        if self.params is None:
            self.params = np.zeros(n_params(self.sizes))
        elif not isinstance(self.params, ad.Var):
            self.params = np.asarray(self.params, dtype=float)
        if ad.value(self.params).shape != (n_params(self.sizes),):
            raise ValueError("parameter count does not match the architecture")

    def with_params(self, params):
        return replace(self, params=params)

    def copy(self):
        return replace(self, params=np.array(ad.value(self.params), dtype=float))


PolicyParams = MLPParams


def ResidualParams(**kw):
    kw.setdefault("kind", "residual")
    return MLPParams(**kw)


def n_params(sizes):
    return int(sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])))


def unpack(params, sizes):
    """List of (W, b) with W of shape (out, in); works on arrays or Vars."""
    layers, k = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        W = ad.reshape(params[k:k + a * b], (b, a))
        k += a * b
        layers.append((W, params[k:k + b]))
        k += b
    return layers


def init_policy(seed, sizes=(2, 16, 16, 2), input_center=(0.0, 0.0), input_scale=(1.0, 1.0),
                kind="policy", output_scale=None, prior_poly=None):
    """Fan-in scaled normal init (std 1/sqrt(fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        chunks.append(rng.normal(0.0, 1.0 / np.sqrt(a), size=a * b))
        chunks.append(np.zeros(b))
    return MLPParams(sizes=tuple(sizes), params=np.concatenate(chunks),
                     input_center=tuple(input_center), input_scale=tuple(input_scale), kind=kind,
                     output_scale=output_scale, prior_poly=prior_poly)


def _horner(c, x):
    out = 0.0 * x + c[-1]
    for ck in c[-2::-1]:
        out = out * x + ck
    return out


def _poly_derivs(c):
    c = np.asarray(c, dtype=float)
    d1 = c[1:] * np.arange(1, len(c)) if len(c) > 1 else np.zeros(1)
    d2 = d1[1:] * np.arange(1, len(d1)) if len(d1) > 1 else np.zeros(1)
    return d1, d2


def prior_terms(z, net):
    """(p, dp/dz1, d2p/dz1^2) of the prior, each stacked over outputs.

    The value and first derivative stay on the tape (z may depend on the
    parameters); the second derivative is plain numpy.
    """
    z1 = z[..., 0]
    p, d1, d2 = [], [], []
    for c in net.prior_poly:
        c1, c2 = _poly_derivs(c)
        p.append(_horner(c, z1))
        d1.append(_horner(c1, z1))
        d2.append(_horner(c2, ad.value(z1)))
    return ad.stack(p, axis=-1), ad.stack(d1, axis=-1), np.stack(d2, -1)


def _prior_jac(d1, n_in):
    """Embed the z1-derivative (..., n_out) as a Jacobian (..., n_out, n_in)."""
    zero = 0.0 * d1
    return ad.stack([d1] + [zero] * (n_in - 1), axis=-1)


def _normalise(z, net):
    return (z - np.asarray(net.input_center)) / np.asarray(net.input_scale)


def _tape_pass(z, net, params, with_jac=True):
    """(mlp(z), d mlp/dz) on the tape for the given flat parameters."""
    h = _normalise(z, net)
    layers = unpack(params, net.sizes)
    # running Jacobian of the current layer w.r.t. the raw input
    jac = np.broadcast_to(np.diag(1.0 / np.asarray(net.input_scale)),
                          ad.value(h).shape[:-1] + (net.sizes[0], net.sizes[0])) if with_jac else None
    for i, (W, b) in enumerate(layers):
        h = ad.matmul(h, ad.swapaxes(W, 0, 1)) + b
        if with_jac:
            jac = ad.matmul(W, jac)
        if i < len(layers) - 1:
            h = ad.tanh(h)
            if with_jac:
                jac = (1.0 - h * h)[..., :, None] * jac
    return h, jac


def forward(z, net: MLPParams):
    """Network output for z of shape (..., n_in)."""
    h = _tape_pass(z, net, net.params, with_jac=False)[0]
    if net.anchor is not None:
        h = h - _tape_pass(z, net, net.anchor, with_jac=False)[0]
    return h * np.asarray(net.output_scale) + prior_terms(z, net)[0]


def eval_policy(z, net: MLPParams):
    """(y_d, J) with J[..., i, j] = d y_d_i / d z_j."""
    if hasattr(net, "evaluate"):
        return net.evaluate(z)
    h, jac = _tape_pass(z, net, net.params)
    if net.anchor is not None:
        h0, j0 = _tape_pass(z, net, net.anchor)
        h, jac = h - h0, jac - j0
    p, d1, _ = prior_terms(z, net)
    osc = np.asarray(net.output_scale)
    return h * osc + p, osc[:, None] * jac + _prior_jac(d1, net.sizes[0])


def jacobian_rate(z, v, net: MLPParams):
    """(y_d, J, dJ) with dJ = sum_j dJ/dz_j v_j, the rate of J along v.

    Plain numpy forward-mode pass; used by the feedback-linearising controller.
    """
    if hasattr(net, "jacobian_rate"):
        return net.jacobian_rate(z, v)
    h, J, dJ = _numpy_pass(z, net, ad.value(net.params), v)
    if net.anchor is not None:
        h0, J0, dJ0 = _numpy_pass(z, net, net.anchor, v)
        h, J, dJ = h - h0, J - J0, dJ - dJ0
    osc = np.asarray(net.output_scale)
    p, d1, d2 = prior_terms(z, net)
    n_in = net.sizes[0]
    return (h * osc + p, osc[:, None] * J + _prior_jac(d1, n_in),
            osc[:, None] * dJ + _prior_jac(d2 * np.asarray(v)[..., 0:1], n_in))


def _numpy_pass(z, net, params, v=None):
    """Plain numpy (mlp(z), d mlp/dz, rate of the Jacobian along v)."""
    z = np.asarray(ad.value(z), dtype=float)
    scale = np.asarray(net.input_scale, dtype=float)
    h = _normalise(z, net)
    hd = (np.asarray(v, dtype=float) if v is not None else np.zeros_like(z)) / scale
    J = np.broadcast_to(np.diag(1.0 / scale), h.shape[:-1] + (net.sizes[0], net.sizes[0]))
    dJ = np.zeros_like(J)
    layers = unpack(np.asarray(params, dtype=float), net.sizes)
    for i, (W, b) in enumerate(layers):
        h = h @ W.T + b
        hd = hd @ W.T
        J = W @ J
        dJ = W @ dJ
        if i < len(layers) - 1:
            h = np.tanh(h)
            s = 1.0 - h * h
            hd = s * hd
            ds = -2.0 * h * hd
            dJ = ds[..., :, None] * J + s[..., :, None] * dJ
            J = s[..., :, None] * J
    return h, J, dJ


@dataclass(frozen=True)
class ReferenceGait:
    """Hand-designed phase-based gait used as a design and test oracle.

    The torso is held at a fixed absolute lean (clockwise positive internally)
    and the swing leg mirrors the stance leg with a cubic bulge that keeps the
    foot at or above the ground: ``t2 = -z1 (1 + k (a^2 - z1^2))``.
    """
    lean: float = 0.15
    half_angle: float = 0.2
    bulge: float = 2.0

    def evaluate(self, z):
        z1 = z[..., 0]
        a, k = self.half_angle, self.bulge
        t2 = -z1 * (1.0 + k * (a * a - z1 * z1))
        dt2 = -(1.0 + k * a * a) + 3.0 * k * z1 * z1
        y = ad.stack([self.lean - z1, t2 - z1], axis=-1)
        zero = 0.0 * ad.value(z1)
        J = np.stack([np.stack([zero - 1.0, zero], -1),
                      np.stack([ad.value(dt2) - 1.0, zero], -1)], -2)
        return y, J

    def jacobian_rate(self, z, v):
        z = np.asarray(z, dtype=float)
        y, J = self.evaluate(z)
        d2 = 6.0 * self.bulge * z[..., 0] * np.asarray(v)[..., 0]
        dJ = np.zeros_like(J)
        dJ[..., 1, 0] = d2
        return y, J, dJ


# ----------------------------------------------------------------------------
# checkpoints


def to_dict(net: MLPParams):
    return {
        "format": "neural-gaits-mlp",
        "version": CHECKPOINT_VERSION,
        "kind": net.kind,
        "sizes": list(net.sizes),
        "activation": net.activation,
        "input_center": [float(c) for c in net.input_center],
        "input_scale": [float(s) for s in net.input_scale],
        "output_scale": [float(s) for s in net.output_scale],
        "prior_poly": [[float(v) for v in row] for row in net.prior_poly],
        "anchor": None if net.anchor is None else [float(v) for v in net.anchor],
        # repr of a float64 round-trips exactly through json
        "params": [float(v) for v in ad.value(net.params)],
    }


def from_dict(d, expect_sizes=None):
    if d.get("format") != "neural-gaits-mlp":
        raise ValueError("not an MLP checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    if expect_sizes is not None and tuple(d["sizes"]) != tuple(expect_sizes):
        raise ValueError(f"architecture mismatch: {d['sizes']} vs {list(expect_sizes)}")
    return MLPParams(sizes=tuple(d["sizes"]), params=np.array(d["params"], dtype=float),
                     input_center=tuple(d["input_center"]), input_scale=tuple(d["input_scale"]),
                     activation=d["activation"], kind=d.get("kind", "policy"),
                     output_scale=d.get("output_scale"), prior_poly=d.get("prior_poly"),
                     anchor=d.get("anchor"))


def save(net: MLPParams, path):
    with open(path, "w") as f:
        json.dump(to_dict(net), f, indent=1)
        f.write("\n")


def load(path, expect_sizes=None):
    with open(path) as f:
        return from_dict(json.load(f), expect_sizes)
