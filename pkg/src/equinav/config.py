"""Run configuration: INI file with fixed sections and keys.

Precedence, lowest to highest: built-in defaults, the ``--config`` file, command
line flags. ``EQUINAV_OUT`` replaces the built-in default output root only.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

DEFAULT_OUT = "equinav-runs"


def _floats(s):
    return tuple(float(x) for x in str(s).split(",") if x.strip())


def _ints(s):
    return tuple(int(x) for x in str(s).split(",") if x.strip())


def _strs(s):
    return tuple(x.strip() for x in str(s).split(",") if x.strip())


def _bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass
class RunSection:
    platform: str = "ground-sim"   # ground-sim or flying
    seed: int = 0
    out: str = ""                  # empty: $EQUINAV_OUT or ./equinav-runs


@dataclass
class WorldSection:
    repr_world_seed: int = 2       # world the encoder and maps are trained on
    test_world_seed: int = 2       # world policies are trained and evaluated on
    map_world_seed: int = 1        # separate world for map-transfer runs
    size: int = 12                 # track waypoints (ground) or gates (flying)
    curvature_scale: float = 0.3


@dataclass
class DataSection:
    episodes: int = 20             # representation dataset episodes
    episode_steps: int = 100
    lateral_jitter: float = 0.8    # start perturbation std (m), representation data only
    heading_jitter: float = 0.1    # rad
    policy_episodes: int = 10      # clean expert demonstrations per seed
    policy_steps: int = 100


@dataclass
class ReprSection:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-4
    w_rc: float = 1.0
    w_eq: float = 10.0
    w_eq_rc: float = 1.0
    dropout: float = 0.5
    val_fraction: float = 0.1
    patience: int = 5


@dataclass
class PolicySection:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-4
    strategy: str = "equivariant"
    sigma: float = 0.1


@dataclass
class DaggerSection:
    iterations: int = 3
    episodes: int = 3
    max_time: float = 40.0
    takeover_s: float = 6.0
    takeover: bool = True
    relabel: bool = True
    retrain_epochs: int = 30
    yaw_noise: float = 0.02
    z_noise: float = 0.0


@dataclass
class MatrixSection:
    seeds: tuple = (0, 1, 2, 3, 4)
    strategies: tuple = ("center", "allcams", "equivariant")
    sigmas: tuple = (0.01, 0.05, 0.1, 0.2, 0.3)


_PARSERS = {int: int, float: float, str: str, bool: _bool}
_TUPLES = {"seeds": _ints, "strategies": _strs, "sigmas": _floats}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    world: WorldSection = field(default_factory=WorldSection)
    data: DataSection = field(default_factory=DataSection)
    repr: ReprSection = field(default_factory=ReprSection)
    policy: PolicySection = field(default_factory=PolicySection)
    dagger: DaggerSection = field(default_factory=DaggerSection)
    matrix: MatrixSection = field(default_factory=MatrixSection)

    def set(self, section, key, value):
        sec = getattr(self, section, None)
        if sec is None or section not in {f.name for f in fields(self)}:
            raise KeyError(f"unknown config section [{section}]")
        types = {f.name: f.type for f in fields(sec)}
        if key not in types:
            raise KeyError(f"unknown config key {key!r} in [{section}]")
        if key in _TUPLES:
            value = _TUPLES[key](value) if isinstance(value, str) else tuple(value)
        else:
            default = getattr(type(sec)(), key)
            value = _PARSERS[type(default)](value)
        setattr(sec, key, value)
        self.validate()

    def validate(self):
        if self.run.platform not in ("ground-sim", "flying"):
            raise ValueError(f"platform must be ground-sim or flying, not {self.run.platform!r}")
        if self.dagger.iterations < 0:
            raise ValueError("dagger iterations must be >= 0")

    @classmethod
    def from_ini(cls, text):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_string(text)
        cfg = cls()
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_ini(f.read())

    def to_dict(self):
        return asdict(self)

    def to_ini(self):
        lines = []
        for sec, vals in self.to_dict().items():
            lines.append(f"[{sec}]")
            for k, v in vals.items():
                if isinstance(v, (tuple, list)):
                    v = ",".join(str(x) for x in v)
                elif isinstance(v, bool):
                    v = str(v).lower()
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)

    def hash(self):
        d = self.to_dict()
        d["run"] = {k: v for k, v in d["run"].items() if k != "out"}  # output location is not content
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()

    def out_root(self):
        return self.run.out or os.environ.get("EQUINAV_OUT") or DEFAULT_OUT
