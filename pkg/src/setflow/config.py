"""Run configuration: one TOML file with a section per pipeline stage.

Loading fills every missing key with its default; the resolved config
written next to each command's outputs therefore lists every value used.
Decode scales that depend on the data are recorded as ``"auto"``.
"""

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import toml

from .errors import ConfigError, ParseError
from .flow_core import Architecture, NoiseMeasureSpec, TrainConfig
from .point_process import (
    HAWKES,
    IntensitySpec,
    Region,
    default_hawkes_spec,
    default_poisson_region,
    default_poisson_spec,
)

SCHEMA_VERSION = 1
AUTO = "auto"


def _defaults() -> dict:
    poisson = default_poisson_spec()
    hawkes = default_hawkes_spec()
    reg = default_poisson_region()
    return {
        "version": SCHEMA_VERSION,
        "seed": 0,
        "out": "run",
        "process": {
            "variant": "poisson",
            "count": 500,
            "mu": poisson.mu,
            "weights": list(poisson.weights),
            "centers": [list(c) for c in poisson.centers],
            "region_lower": list(reg.lower),
            "region_upper": list(reg.upper),
            "hawkes_mu": hawkes.mu,
            "hawkes_alpha": hawkes.alpha,
            "hawkes_beta": hawkes.beta,
            "horizon": 100.0,
        },
        "representation": {"epsilon": 0.35, "grid_shape": [64, 64], "min_sigma": AUTO},
        "noise": asdict(NoiseMeasureSpec(length_scale=0.5, amplitude=0.1)),
        "model": {"hidden": [64, 64], "n_freq": 4, "value_scale": 0.2},
        "train": {k: v for k, v in asdict(TrainConfig()).items()},
        "sample": {"n": 200, "ode_steps": 100},
        "decode": {"m": 2048, "s_lgvin": 300, "s_grad": 1000, "alpha": AUTO, "beta": AUTO,
                   "merge_radius": AUTO, "min_group": AUTO, "record_every": 0},
        "metrics": {"bandwidth_epsilon": AUTO, "n_perm": 500},
    }


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be a section")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    data: dict = field(default_factory=_defaults)

    @classmethod
    def load(cls, path=None, **overrides) -> "RunConfig":
        raw = {}
        if path is not None:
            try:
                raw = toml.load(str(path))
            except toml.TomlDecodeError as exc:
                raise ParseError(f"{path}: {exc}") from None
        for k, v in overrides.items():
            if v is None:
                continue
            if isinstance(v, dict) and isinstance(raw.get(k), dict):
                raw[k] = {**raw[k], **v}
            else:
                raw[k] = v
        if raw.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"config schema version {raw['version']} is not supported")
        cfg = cls(_merge(_defaults(), raw))
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.data[key]

    def validate(self) -> None:
        self.region()
        self.process_spec()
        self.train_config()
        self.noise()
        self.architecture()
        if not float(self["representation"]["epsilon"]) > 0:
            raise ConfigError("representation.epsilon must be positive")

    @property
    def seed(self) -> int:
        return int(self["seed"])

    def process_spec(self) -> IntensitySpec:
        p = self["process"]
        if p["variant"] == "poisson":
            return IntensitySpec.poisson(p["mu"], p["weights"], p["centers"])
        if p["variant"] in ("hawkes", HAWKES):
            return IntensitySpec.hawkes(p["hawkes_mu"], p["hawkes_alpha"], p["hawkes_beta"])
        raise ConfigError(f"unknown process variant {p['variant']!r}")

    def region(self) -> Region:
        p = self["process"]
        if p["variant"] in ("hawkes", HAWKES):
            return Region((0.0,), (float(p["horizon"]),))
        return Region(tuple(p["region_lower"]), tuple(p["region_upper"]))

    def grid_shape(self) -> tuple:
        shape = tuple(int(n) for n in self["representation"]["grid_shape"])
        if len(shape) != self.region().dim:
            # a 1-D process keeps only the first entry of the grid shape
            shape = shape[: self.region().dim]
        return shape

    def min_sigma(self):
        v = self["representation"]["min_sigma"]
        return None if v == AUTO else float(v)

    def noise(self) -> NoiseMeasureSpec:
        return NoiseMeasureSpec(**self["noise"])

    def architecture(self) -> Architecture:
        m = self["model"]
        return Architecture(self.grid_shape(), tuple(m["hidden"]), int(m["n_freq"]),
                            float(m["value_scale"]))

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self["train"].items() if k in names})

    def decode_overrides(self) -> dict:
        d = self["decode"]
        return {k: v for k, v in d.items() if k != "record_every" and v != AUTO}

    def bandwidth_epsilon(self) -> float:
        v = self["metrics"]["bandwidth_epsilon"]
        return float(self["representation"]["epsilon"] if v == AUTO else v)

    def dumps(self) -> str:
        return toml.dumps(self.data)

    def write(self, directory, name: str = "config.resolved.toml") -> Path:
        path = Path(directory) / name
        path.write_text(self.dumps(), encoding="utf-8")
        return path
