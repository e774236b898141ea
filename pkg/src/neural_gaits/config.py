"""Run configuration: one JSON document drives the whole pipeline."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import jsonschema

from . import barriers as bar
from . import dynamics as dyn
from . import residual as rs
from . import simulator as sim
from . import training as tr

OUTPUT_ENV = "NEURAL_GAITS_OUTPUT_DIR"

_num = {"type": "number"}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_model = {"type": "object", "properties": {k: _num for k in dyn.ModelParams().to_dict()},
          "additionalProperties": False}

SCHEMA = {
    "type": "object",
    "required": ["seed"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "nominal": _model,
        "surrogate": _model,
        "regions": {"type": "object", "additionalProperties": {
            "type": "object", "required": ["z1", "z2"], "additionalProperties": False,
            "properties": {"z1": _pair, "z2": _pair}}},
        "specs": {"type": "array", "items": {
            "type": "object", "required": ["name", "kind", "quantity", "region"],
            "properties": {"name": {"type": "string"}, "kind": {"enum": list(bar.KINDS)},
                           "quantity": {"enum": list(bar.QUANTITIES)}, "region": {"type": "string"},
                           "lower": {"type": ["number", "null"]}, "upper": {"type": ["number", "null"]},
                           "alpha": _num, "gamma": _num, "weight": _num, "params": {"type": "object"}},
            "additionalProperties": False}},
        "train": {"type": "object"},
        "sim": {"type": "object"},
        "residual": {"type": "object"},
        "verify": {"type": "object"},
        "loss_threshold": {"type": "number", "exclusiveMinimum": 0},
        "refine_train_epochs": {"type": "integer", "minimum": 1},
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class VerifyConfig:
    n_samples: int = 10_000
    tol: float = 1e-3
    kp: float = 1.0  # output gains of the exact-linearisation model for the combined barrier
    kd: float = 1.4
    alpha: float = 0.25
    eta_radius: float = 0.2
    n_pairs: int = 20_000
    combined_spec: str = "torso"

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class RunConfig:
    seed: int
    nominal: dyn.ModelParams = field(default_factory=dyn.ModelParams)
    surrogate: dyn.ModelParams = field(default_factory=dyn.surrogate_params)
    regions: dict = None
    specs: list = None
    train: tr.TrainConfig = None
    sim: sim.SimConfig = None
    residual: rs.ResidualConfig = None
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    output_dir: str = "runs"
    loss_threshold: float = 1e-2
    refine_train_epochs: int = 300

    def __post_init__(self):
        if self.regions is None:
            self.regions = bar.default_regions(self.nominal)
        if self.specs is None:
            self.specs = bar.default_specs()
        if self.train is None:
            self.train = tr.TrainConfig(seed=self.seed)
        if self.sim is None:
            self.sim = sim.SimConfig(plant=self.nominal, seed=self.seed)
        if self.residual is None:
            self.residual = rs.ResidualConfig(seed=self.seed)
        missing = {s.region for s in self.specs} - set(self.regions)
        if missing:
            raise ConfigError(f"specs reference unknown regions: {sorted(missing)}")

    def resolved_output_dir(self):
        return os.environ.get(OUTPUT_ENV) or self.output_dir

    def refine_config(self, initial_policy=None, out_dir=None):
        t = replace(self.train, epochs=self.refine_train_epochs)
        return rs.RefineConfig(nominal=self.nominal, surrogate=self.surrogate, train=t,
                               sim=sim.SimConfig.from_dict({**self.sim.to_dict(),
                                                            "plant": self.surrogate.to_dict()}),
                               residual=self.residual, specs=self.specs, regions=self.regions,
                               initial_policy=initial_policy, out_dir=out_dir)

    def to_dict(self):
        return {"seed": self.seed, "output_dir": self.output_dir,
                "nominal": self.nominal.to_dict(), "surrogate": self.surrogate.to_dict(),
                "regions": {k: {"z1": list(r.z1), "z2": list(r.z2)} for k, r in sorted(self.regions.items())},
                "specs": [s.to_dict() for s in self.specs], "train": self.train.to_dict(),
                "sim": self.sim.to_dict(), "residual": self.residual.to_dict(),
                "verify": self.verify.to_dict(), "loss_threshold": self.loss_threshold,
                "refine_train_epochs": self.refine_train_epochs}

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.dumps())


def _spec(d):
    d = dict(d)
    params = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.pop("params", {}).items()}
    return bar.BarrierSpec(params=params, **d)


def from_dict(d) -> RunConfig:
    try:
        jsonschema.validate(d, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {e.message}") from None
    try:
        nominal = dyn.ModelParams.from_dict(d["nominal"]) if "nominal" in d else dyn.ModelParams()
        kw = {"seed": d["seed"], "nominal": nominal,
              "surrogate": (dyn.ModelParams.from_dict(d["surrogate"]) if "surrogate" in d
                            else dyn.surrogate_params(nominal))}
        if "regions" in d:
            kw["regions"] = {k: bar.Region(k, v["z1"], v["z2"]) for k, v in d["regions"].items()}
        if "specs" in d:
            kw["specs"] = [_spec(s) for s in d["specs"]]
        if "train" in d:
            kw["train"] = tr.TrainConfig(**{"seed": d["seed"], **d["train"]})
        if "sim" in d:
            kw["sim"] = sim.SimConfig.from_dict({"plant": nominal.to_dict(), "seed": d["seed"], **d["sim"]})
        if "residual" in d:
            kw["residual"] = rs.ResidualConfig(**{"seed": d["seed"], **d["residual"]})
        if "verify" in d:
            kw["verify"] = VerifyConfig(**d["verify"])
        for k in ("output_dir", "loss_threshold", "refine_train_epochs"):
            if k in d:
                kw[k] = d[k]
        return RunConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def loads(text) -> RunConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"not valid JSON: {e}") from None
    return from_dict(d)


def load(path) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        return loads(f.read())


def default_config(seed=0) -> RunConfig:
    return RunConfig(seed=seed)
