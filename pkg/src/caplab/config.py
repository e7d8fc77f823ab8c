"""Run configuration: INI-style sections of ``key = value`` lines.

Sections: ``[run]`` (seed), ``[data]`` (toy spec or dataset path), ``[model]``,
``[target]``, ``[train]`` and optionally ``[sweep]``.  Floats are written with
``repr`` so a saved config reloads to identical values.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from caplab.errors import ConfigurationError
from caplab.model import ModelConfig
from caplab.objective import CapacityTarget, TrainConfig
from caplab.toydata import ToySpec, generate_dataset, load, split

CONFIG_NAME = "config.ini"


@dataclass
class DataConfig:
    path: str = ""
    channels: int = 8
    num_text_classes: int = 10
    num_speakers: int = 4
    base_lengths: list = None
    data_seed: int = 0
    noise_std: float = 0.05
    num_utterances: int = 1200
    train_fraction: float = 5 / 6

    def toy_spec(self):
        return ToySpec(self.channels, self.num_text_classes, self.num_speakers,
                       self.base_lengths, self.data_seed, self.noise_std)

    def load(self):
        """Return ``(spec, train, held_out)``."""
        if self.path:
            try:
                spec, data = load(self.path)
            except OSError as exc:
                raise ConfigurationError(f"cannot read dataset {self.path}: {exc}") from exc
        else:
            spec = self.toy_spec()
            data = generate_dataset(spec, self.num_utterances)
        train, held = split(data, self.train_fraction)
        return spec, train, held


@dataclass
class SweepConfig:
    capacity: list = field(default_factory=list)
    capacity_pairs: list = field(default_factory=list)  # [(C_H, C_L), ...]
    latent_dim: list = field(default_factory=list)
    fixed_beta: list = field(default_factory=list)
    transfer: bool = False
    transfer_samples: int = 5

    @property
    def empty(self):
        return not (self.capacity or self.capacity_pairs or self.latent_dim or self.fixed_beta)


@dataclass
class RunConfig:
    seed: int
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    target: CapacityTarget = field(default_factory=lambda: CapacityTarget.flat(2.0))
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def resolved(self, spec: ToySpec):
        """Copy whose model dimensions match ``spec``."""
        m = self.model
        model = ModelConfig(**{**_asdict(m), "channels": spec.channels,
                               "num_text_classes": spec.num_text_classes,
                               "num_speakers": spec.num_speakers})
        return RunConfig(self.seed, self.data, model, self.target, self.train, self.sweep)

    def to_text(self):
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"seed": str(self.seed)}
        cp["data"] = {k: _fmt(v) for k, v in _asdict(self.data).items()}
        cp["model"] = {k: _fmt(v) for k, v in _asdict(self.model).items()}
        if self.target.hierarchical:
            cp["target"] = {"capacity_high": _fmt(self.target.capacity_high),
                            "capacity_low": _fmt(self.target.capacity_low)}
        else:
            cp["target"] = {"capacity": _fmt(self.target.capacity)}
        cp["train"] = {k: _fmt(v) for k, v in _asdict(self.train).items()}
        if not self.sweep.empty:
            s = self.sweep
            cp["sweep"] = {
                "capacity": _fmt(s.capacity),
                "capacity_pairs": ",".join(f"{h!r}:{lo!r}" for h, lo in s.capacity_pairs),
                "latent_dim": _fmt(s.latent_dim),
                "fixed_beta": _fmt(s.fixed_beta),
                "transfer": _fmt(s.transfer),
                "transfer_samples": _fmt(s.transfer_samples),
            }
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in cp[name].items())
            lines.append("")
        return "\n".join(lines)

    def save(self, directory):
        path = Path(directory) / CONFIG_NAME
        path.write_text(self.to_text())
        return path


def _asdict(obj):
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse_bool(key, value):
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")


def _parse_list(key, value, kind):
    value = value.strip()
    if not value:
        return []
    try:
        return [kind(x) for x in value.split(",")]
    except ValueError as exc:
        raise ConfigurationError(f"{key}: {exc}") from exc


def _fill(cls, section, name, base=None):
    """Build ``cls`` from a config section, coercing each value to the field's default type."""
    base = base if base is not None else cls()
    kwargs = _asdict(base)
    known = {f.name for f in fields(cls)}
    for key, value in section.items():
        if key not in known:
            raise ConfigurationError(f"unknown key {key!r} in [{name}]")
        default = kwargs[key]
        full = f"[{name}] {key}"
        try:
            if key == "base_lengths":
                kwargs[key] = _parse_list(full, value, int) or None
            elif key == "fixed_beta":
                kwargs[key] = float(value) if value.strip() else None
            elif isinstance(default, bool):
                kwargs[key] = _parse_bool(full, value)
            elif isinstance(default, int):
                kwargs[key] = int(value)
            elif isinstance(default, float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value.strip()
        except ValueError as exc:
            raise ConfigurationError(f"{full}: {exc}") from exc
    return cls(**kwargs)


def parse_config(text, seed_override=None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    allowed = {"run", "data", "model", "target", "train", "sweep"}
    unknown = set(cp.sections()) - allowed
    if unknown:
        raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
    seed = seed_override
    if seed is None:
        if not cp.has_option("run", "seed"):
            raise ConfigurationError("a seed is required: set [run] seed or pass --seed")
        try:
            seed = int(cp["run"]["seed"])
        except ValueError as exc:
            raise ConfigurationError(f"[run] seed: {exc}") from exc
    extra = set(cp["run"]) - {"seed"} if cp.has_section("run") else set()
    if extra:
        raise ConfigurationError(f"unknown keys {sorted(extra)} in [run]")
    data = _fill(DataConfig, cp["data"] if cp.has_section("data") else {}, "data")
    model = _fill(ModelConfig, cp["model"] if cp.has_section("model") else {}, "model")
    train = _fill(TrainConfig, cp["train"] if cp.has_section("train") else {}, "train")
    t = cp["target"] if cp.has_section("target") else {}
    unknown_t = set(t) - {"capacity", "capacity_high", "capacity_low"}
    if unknown_t:
        raise ConfigurationError(f"unknown keys {sorted(unknown_t)} in [target]")
    try:
        if "capacity_high" in t or "capacity_low" in t:
            target = CapacityTarget(capacity=float(t["capacity"]) if "capacity" in t else None,
                                    capacity_high=float(t.get("capacity_high", "nan")),
                                    capacity_low=float(t.get("capacity_low", "nan")))
        elif model.hierarchical:
            target = CapacityTarget.hier(1.0, 1.0)
        else:
            target = CapacityTarget.flat(float(t.get("capacity", "2.0")))
    except ValueError as exc:
        raise ConfigurationError(f"[target]: {exc}") from exc
    sweep = SweepConfig()
    if cp.has_section("sweep"):
        s = cp["sweep"]
        unknown_s = set(s) - {f.name for f in fields(SweepConfig)}
        if unknown_s:
            raise ConfigurationError(f"unknown keys {sorted(unknown_s)} in [sweep]")
        try:
            pairs = []
            for item in _parse_list("[sweep] capacity_pairs", s.get("capacity_pairs", ""), str):
                h, sep, lo = item.partition(":")
                if not sep:
                    raise ConfigurationError(f"[sweep] capacity_pairs: {item!r} is not C_H:C_L")
                pairs.append((float(h), float(lo)))
            sweep = SweepConfig(
                capacity=_parse_list("[sweep] capacity", s.get("capacity", ""), float),
                capacity_pairs=pairs,
                latent_dim=_parse_list("[sweep] latent_dim", s.get("latent_dim", ""), int),
                fixed_beta=_parse_list("[sweep] fixed_beta", s.get("fixed_beta", ""), float),
                transfer=_parse_bool("[sweep] transfer", s.get("transfer", "false")),
                transfer_samples=int(s.get("transfer_samples", "5")),
            )
        except ValueError as exc:
            raise ConfigurationError(f"[sweep]: {exc}") from exc
    return RunConfig(seed, data, model, target, train, sweep)


def load_config(path, seed_override=None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, seed_override)
