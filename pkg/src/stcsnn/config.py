"""JSON run configuration with strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .network import NetworkConfig, parse_arch
from .neuron import NeuronParams


@dataclass
class DatasetConfig:
    kind: str = "synthetic"            # nmnist | csv | synthetic
    path: str | None = None            # root holding Train/<label>/ and Test/<label>/
    width: int = 34
    height: int = 34
    limit_train: int | None = None
    limit_test: int | None = None
    crop: list | None = None           # [height, width] centre crop, or null
    duration: int = 10000              # synthetic only: recording length in us
    rate: float = 1e-4                 # synthetic only: events per us per active pixel
    data_seed: int = 1                 # synthetic only


@dataclass
class ModelConfig:
    arch: str = "128SC3-128C3-AP2-256C3-AP2-512C3-AP4-DP-512FC-10Voting"
    T: int = 2
    N_r: int = 8
    binary_mode: bool = False
    use_synaptic_block: bool = True
    use_learnable_wm: bool = True
    desired_count: int = 1


@dataclass
class OptimConfig:
    lr: float = 2e-4
    batch: int = 64
    epochs: int = 50
    seed: int = 0


@dataclass
class HyperConfig:
    V_th: float = 10.0
    S_max: int = 15
    alpha_H: float = 1.0
    alpha_W: float = 20.0
    dropout_rate: float = 0.5


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    hyper: HyperConfig = field(default_factory=HyperConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run configuration must be a JSON object")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown configuration section(s): {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            kwargs[f.name] = _section(f.default_factory, data.get(f.name, {}), f.name)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_json(fh.read())
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror or exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @property
    def neuron(self) -> NeuronParams:
        h = self.hyper
        return NeuronParams(v_th=h.V_th, s_max=h.S_max, alpha_h=h.alpha_H, alpha_w=h.alpha_W)

    def network_config(self) -> NetworkConfig:
        m = self.model
        return parse_arch(m.arch, m.T, use_synaptic_block=m.use_synaptic_block,
                          use_learnable_wm=m.use_learnable_wm, dropout_rate=self.hyper.dropout_rate,
                          neuron=self.neuron)

    @property
    def input_shape(self) -> tuple:
        d = self.dataset
        h, w = (d.crop if d.crop else (d.height, d.width))
        return (2, int(h), int(w))

    def validate(self) -> None:
        d, m, o, h = self.dataset, self.model, self.optim, self.hyper
        if d.kind not in ("nmnist", "csv", "synthetic"):
            raise ConfigError(f"dataset.kind must be nmnist, csv or synthetic, got {d.kind!r}")
        if d.kind != "synthetic" and not d.path:
            raise ConfigError(f"dataset.path is required for kind {d.kind!r}")
        if d.width < 1 or d.height < 1:
            raise ConfigError("dataset width and height must be positive")
        if d.crop is not None and (len(d.crop) != 2 or not 0 < d.crop[0] <= d.height or not 0 < d.crop[1] <= d.width):
            raise ConfigError(f"dataset.crop must be [h, w] within the sensor, got {d.crop}")
        for name in ("limit_train", "limit_test"):
            v = getattr(d, name)
            if v is not None and v < 0:
                raise ConfigError(f"dataset.{name} must be >= 0")
        if d.kind == "synthetic" and (d.duration <= 0 or d.rate <= 0):
            raise ConfigError("synthetic duration and rate must be positive")
        if m.T < 1 or m.N_r < 1:
            raise ConfigError("model.T and model.N_r must be >= 1")
        if o.lr <= 0 or o.batch < 1 or o.epochs < 0:
            raise ConfigError("optim.lr > 0, optim.batch >= 1 and optim.epochs >= 0 are required")
        if not 1 <= m.desired_count <= h.S_max:
            raise ConfigError(f"model.desired_count must lie in [1, {h.S_max}]")
        self.network_config()   # raises on a bad architecture or neuron setting


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {sorted(unknown)}")
    defaults = cls()
    for key, value in data.items():
        _check_type(f"{name}.{key}", value, getattr(defaults, key), key in _OPTIONAL)
    return cls(**data)


_OPTIONAL = {"path", "limit_train", "limit_test", "crop"}
_EXPECTED = {"path": str, "limit_train": int, "limit_test": int, "crop": list}


def _check_type(key, value, default, optional):
    if value is None and optional:
        return
    field_name = key.split(".")[-1]
    want = _EXPECTED.get(field_name, type(default))
    if want is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif want is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, want)
    if not ok:
        raise ConfigError(f"{key} must be of type {want.__name__}, got {value!r}")
