"""Experiment configuration: TOML sections, presets, overrides and validation.

A config file has optional top-level keys ``seed``, ``out`` and ``preset``
plus the sections ``[task]``, ``[net]``, ``[train]``, ``[probe]`` and
``[efficiency]``. Every field of the underlying dataclasses is addressable
as ``section.field``. Unset fields take the AL feed-forward LIF defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib as tomli
except ImportError:  # Python < 3.11
    import tomli

from .efficiency import EnergyConstants, EnergyQuery, ROWS
from .neurons import NetworkSpec
from .stp import ProbeConfig
from .tasks import AlSpec
from .training import TrainPlan

AL_CHANNELS = 4
AL_CLASSES = 2

PRESETS = {
    "paper": {},
    "desk": {"task": {"n_train": 10_000, "n_test": 1_000}, "train": {"epochs": 30}},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeSection:
    direction: str = "higher"
    similar: float = 1.0
    degraded: float = 2.0
    workers: int = 1




@dataclass(frozen=True)
class EfficiencySection:
    row: str = "FFSNN-LIF"
    m: float | None = None
    n: float | None = None
    k: float | None = None
    h: float | None = None
    T: float | None = None
    Fr_in: float | None = None
    Fr_out: float | None = None
    Fr_conv2: float | None = None
    Fr_q: float | None = None
    Fr_k: float | None = None
    Fr_v: float | None = None
    Fr_attn: float | None = None
    Fr_fc1: float | None = None
    Fr_fc2: float | None = None
    Fr_y: float | None = None
    Fr_w: float | None = None
    e_ac: float = EnergyConstants.e_ac
    e_mac: float = EnergyConstants.e_mac
    acs: float | None = None  # measured counts bypass the closed form
    macs: float | None = None
    lengths: tuple[int, ...] = (200, 400, 800)
    bench_batch: int = 64
    warmup: int = 5
    repeats: int = 20
    epoch_samples: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(int(v) for v in self.lengths))
        if self.row not in ROWS:
            raise ValueError(f"row must be one of {sorted(ROWS)}, got {self.row!r}")
        if (self.acs is None) != (self.macs is None):
            raise ValueError("acs and macs must be given together")
        if not self.lengths or min(self.lengths) < 1:
            raise ValueError("lengths must be a non-empty list of positive integers")
        if self.repeats < 1 or self.warmup < 0 or self.bench_batch < 1:
            raise ValueError("repeats and bench_batch must be >= 1, warmup >= 0")
        EnergyConstants(self.e_ac, self.e_mac)

    def query(self) -> EnergyQuery:
        d = {f.name: getattr(self, f.name) for f in fields(EnergyQuery) if f.name != "constants"}
        return EnergyQuery(**d, constants=EnergyConstants(self.e_ac, self.e_mac))


SECTIONS = {"task": AlSpec, "net": NetworkSpec, "train": TrainPlan, "probe": ProbeSection,
            "efficiency": EfficiencySection}
TOP_LEVEL = ("seed", "out", "preset")


@dataclass(frozen=True)
class ExperimentConfig:
    task: AlSpec = field(default_factory=AlSpec)
    net: NetworkSpec = field(default_factory=NetworkSpec)
    train: TrainPlan = field(default_factory=TrainPlan)
    probe: ProbeSection = field(default_factory=ProbeSection)
    efficiency: EfficiencySection = field(default_factory=EfficiencySection)
    seed: int = 0
    out: str | None = None
    preset: str = "paper"

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(self.net, self.train, **asdict(self.probe))

    def to_dict(self) -> dict:
        d = {name: _plain(asdict(getattr(self, name))) for name in SECTIONS}
        d.update(seed=self.seed, out=self.out, preset=self.preset)
        return d

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of every setting except the output path."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# -- coercion -----------------------------------------------------------------------------


def _kind(cls, name: str) -> str:
    if cls is NetworkSpec and name == "neuron":
        return "str_or_strs"
    ann = str({f.name: f.type for f in fields(cls)}[name])
    if "tuple[int" in ann:
        return "ints"
    if "tuple[float" in ann:
        return "floats"
    if ann.startswith("float | None"):
        return "optfloat"
    if ann.startswith("str | None"):
        return "optstr"
    return {"int": "int", "float": "float", "bool": "bool", "str": "str"}[ann]


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _coerce(path: str, kind: str, v):
    bad = ConfigError(f"{path}: expected {kind}, got {type(v).__name__} {v!r}")
    if kind == "int":
        if isinstance(v, bool) or not isinstance(v, int):
            raise bad
        return v
    if kind in ("float", "optfloat"):
        if v is None and kind == "optfloat":
            return None
        if not _is_num(v):
            raise bad
        return float(v)
    if kind == "bool":
        if not isinstance(v, bool):
            raise bad
        return v
    if kind in ("str", "optstr"):
        if not isinstance(v, str):
            raise bad
        return v
    if kind in ("ints", "floats"):
        if not isinstance(v, (list, tuple)):
            raise bad
        elem = "int" if kind == "ints" else "float"
        return tuple(_coerce(f"{path}[{i}]", elem, x) for i, x in enumerate(v))
    if kind == "str_or_strs":
        if isinstance(v, str):
            return v
        if isinstance(v, (list, tuple)) and all(isinstance(x, str) for x in v):
            return tuple(v)
        raise bad
    raise AssertionError(kind)


# -- loading --------------------------------------------------------------------------------


def _merge(base: dict, upd: dict, prefix: str = "") -> dict:
    out = dict(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{prefix}{k}.")
        else:
            out[k] = v
    return out


def parse_override(item: str) -> dict:
    """``a.b=value`` -> ``{'a': {'b': value}}``; the value is read as TOML,
    falling back to a bare string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = (s.strip() for s in item.split("=", 1))
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    parts = key.split(".")
    d: dict = {parts[-1]: value}
    for p in reversed(parts[:-1]):
        d = {p: d}
    return d


def read_config_file(path) -> dict:
    """Raw nested dict from a TOML file, or from a run manifest (JSON with a
    ``config`` entry) so that any run can be replayed from its manifest."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return doc.get("config", doc)
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _build_section(name: str, raw: dict, seed: int):
    cls = SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a table, got {type(raw).__name__}")
    names = {f.name for f in fields(cls)}
    kwargs = {}
    if "seed" in names:
        kwargs["seed"] = seed
    for key, v in raw.items():
        if key not in names:
            raise ConfigError(f"{name}.{key}: unknown key")
        kwargs[key] = _coerce(f"{name}.{key}", _kind(cls, key), v)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        msg = str(exc)
        head = msg.split(" ", 1)[0].rstrip(":,")
        if head in names:
            raise ConfigError(f"{name}.{msg}") from exc
        raise ConfigError(f"{name}: {msg}") from exc


def build_config(raw: dict) -> ExperimentConfig:
    """Validate a raw nested dict into an :class:`ExperimentConfig`."""
    for key in raw:
        if key not in SECTIONS and key not in TOP_LEVEL:
            raise ConfigError(f"{key}: unknown key")
    preset = raw.get("preset", "paper")
    if preset not in PRESETS:
        raise ConfigError(f"preset: must be one of {sorted(PRESETS)}, got {preset!r}")
    raw = _merge(PRESETS[preset], raw)
    seed = _coerce("seed", "int", raw.get("seed", 0))
    out = raw.get("out")
    if out is not None:
        out = _coerce("out", "str", out)
    sections = {name: _build_section(name, raw.get(name, {}), seed) for name in SECTIONS}
    cfg = ExperimentConfig(**sections, seed=seed, out=out, preset=preset)
    _cross_checks(cfg)
    return cfg


def _cross_checks(cfg: ExperimentConfig):
    if cfg.net.input_size != AL_CHANNELS:
        raise ConfigError(f"net.input_size must be {AL_CHANNELS} for AL one-hot actions, "
                          f"got {cfg.net.input_size}")
    if cfg.net.n_classes != AL_CLASSES:
        raise ConfigError(f"net.n_classes must be {AL_CLASSES} for AL, got {cfg.net.n_classes}")
    if "spsn" in cfg.net.neuron_kinds and cfg.net.kernel_size > cfg.task.length:
        raise ConfigError(f"net.kernel_size {cfg.net.kernel_size} exceeds task.length "
                          f"{cfg.task.length}")
    try:
        cfg.probe_config()
    except ValueError as exc:
        raise ConfigError(f"probe: {exc}") from exc


def parse_config(path=None, overrides=(), **top) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides, then
    non-None keyword arguments for top-level keys (``seed``, ``out``,
    ``preset``)."""
    raw: dict = {}
    if path is not None:
        raw = read_config_file(path)
    for item in overrides:
        raw = _merge(raw, parse_override(item) if isinstance(item, str) else item)
    for k, v in top.items():
        if v is not None:
            if k not in TOP_LEVEL:
                raise ConfigError(f"{k}: unknown key")
            raw[k] = v
    return build_config(raw)
