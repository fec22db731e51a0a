"""Experiment configuration: strict TOML, defaults, validation, and a stable hash.

Every section maps onto a dataclass below; a key that is not a field is an
error naming the dotted key. Defaults are the full-scale settings; the desk
preset (``configs/desk.toml``) overrides the ones that make a CPU run
practical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..attacks import METHODS, Variant
from ..data import IdxSource, SyntheticSpec
from ..nn.units import UnitSpec, validate_units
from .presets import PRESETS


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    preset: str = "desk6"
    n_server: int = 2
    # split used to pre-train the fine-tuning victim; None trains one victim per N
    pretrain_n: int | None = None


@dataclass
class DataSection:
    source: str = "synthetic"  # synthetic | idx
    train_count: int = 10_000
    val_count: int = 2_000
    n_classes: int = 10
    size: int = 16
    channels: int = 1
    family: int = 0
    blobs: int = 3
    jitter: float = 1.5
    noise: float = 0.12
    distractors: int = 1
    train_images: str = ""
    train_labels: str = ""
    val_images: str = ""
    val_labels: str = ""


@dataclass
class TrainSection:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    milestones: list[int] | None = None  # None: 30/60/80% of epochs
    factor: float = 0.2
    clients: int = 10
    classes_per_client: int | None = None
    augment: bool = True
    schedule_seed: int = 0
    transport: str = "inprocess"
    probes: int = 64


@dataclass
class AttackSection:
    methods: list[str] = field(default_factory=lambda: ["train"])
    mode: str = "fine-tune"  # fine-tune | from-scratch
    budget: int = 10_000
    query_batch: int = 128
    launch_epoch: int | None = None  # None: 80% of training
    late_k: int | None = None
    data_fraction: float = 0.1
    stratified: bool = False  # per-class balanced attacker sample instead of uniform
    aux_family: int | None = None  # GM auxiliary data from another task family; None uses attacker data
    variant: str = "same"
    server_frozen: bool = True
    server_lr: float = 0.0
    craft_steps: int = 20
    craft_lr: float = 0.1
    gan_lr: float = 1e-4
    gan_latent: int = 64
    gan_diversity: float = 50.0
    gan_samples: int = 5_000
    gm_epochs: int = 30
    gm_lr: float = 1e-3
    soft_alpha: float = 0.9
    soft_weight: float = 1.0


@dataclass
class SurrogateSection:
    epochs: int = 200
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 128
    milestones: list[int] | None = None
    factor: float = 0.2
    augment: bool = True  # applies to hard-label training on real data only


@dataclass
class DefenseSection:
    l1_lambda: float = 0.0


@dataclass
class EvalSection:
    mi: bool = False
    adv: bool = False
    fgsm_eps: float = 0.1
    pgd_eps: float = 0.002
    pgd_iters: int = 50
    pgd_step: float | None = None
    adv_samples: int = 1_000
    mi_epochs: int = 50
    mi_lr: float = 1e-3
    mi_probes: int = 500


@dataclass
class SweepSection:
    n_values: list[int] = field(default_factory=list)  # empty: [model.n_server]
    seeds: list[int] = field(default_factory=list)  # empty: [seed]


@dataclass
class OutputSection:
    query_log: bool = True
    record_wallclock: bool = False
    checkpoints: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "results"
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    surrogate: SurrogateSection = field(default_factory=SurrogateSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)

    # derived -------------------------------------------------------------

    def units(self) -> list[UnitSpec]:
        return PRESETS[self.model.preset](self.data.channels, self.data.size, self.data.n_classes)

    def input_shape(self) -> tuple[int, int, int]:
        return (self.data.channels, self.data.size, self.data.size)

    def n_values(self) -> list[int]:
        return list(self.sweep.n_values) or [self.model.n_server]

    def seeds(self) -> list[int]:
        return list(self.sweep.seeds) or [self.seed]

    def launch_epoch(self) -> int:
        return self.attack.launch_epoch if self.attack.launch_epoch is not None else int(0.8 * self.train.epochs)

    def synthetic(self, seed: int) -> SyntheticSpec:
        d = self.data
        return SyntheticSpec(d.n_classes, d.train_count + d.val_count, d.size, d.channels, seed, d.family,
                             d.blobs, d.jitter, d.noise, d.distractors)

    def idx_sources(self) -> tuple[IdxSource, IdxSource]:
        d = self.data
        return IdxSource(d.train_images, d.train_labels, d.n_classes), IdxSource(d.val_images, d.val_labels, d.n_classes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of every setting that can change results (the output location excluded)."""
        body = self.to_dict()
        body.pop("out")
        body["output"] = {"query_log": self.output.query_log}
        blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **changes: Any) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


_SECTION_TYPES = {
    "model": ModelSection, "data": DataSection, "train": TrainSection, "attack": AttackSection,
    "surrogate": SurrogateSection, "defense": DefenseSection, "eval": EvalSection, "sweep": SweepSection,
    "output": OutputSection,
}


def _coerce(section: str, name: str, value: Any, default: Any) -> Any:
    key = f"{section}.{name}" if section else name
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list) or default is None:
        return value  # checked in validate()
    raise ConfigError(f"{key}: unsupported value {value!r}")


def from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key in ("seed", "out"):
            cfg = dataclasses.replace(cfg, **{key: _coerce("", key, value, getattr(cfg, key))})
            continue
        if key not in _SECTION_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"{key!r} must be a section")
        section_cls = _SECTION_TYPES[key]
        section = section_cls()
        names = {f.name for f in dataclasses.fields(section_cls)}
        updates = {}
        for name, v in value.items():
            if name not in names:
                raise ConfigError(f"unknown key '{key}.{name}'")
            updates[name] = _coerce(key, name, v, getattr(section, name))
        cfg = dataclasses.replace(cfg, **{key: dataclasses.replace(section, **updates)})
    validate(cfg)
    return cfg


def _int_list(key: str, value: Any, allow_none: bool = False) -> None:
    if value is None and allow_none:
        return
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{key}: expected a list of integers")


def validate(cfg: ExperimentConfig) -> None:
    if cfg.seed < 0:
        raise ConfigError("seed: must be non-negative")
    if cfg.model.preset not in PRESETS:
        raise ConfigError(f"model.preset: unknown preset {cfg.model.preset!r} (have {sorted(PRESETS)})")
    units = cfg.units()
    try:
        validate_units(units, cfg.input_shape())
    except ValueError as err:
        raise ConfigError(f"model.preset: {err}") from err
    _int_list("sweep.n_values", cfg.sweep.n_values)
    _int_list("sweep.seeds", cfg.sweep.seeds)
    _int_list("train.milestones", cfg.train.milestones, allow_none=True)
    _int_list("surrogate.milestones", cfg.surrogate.milestones, allow_none=True)
    for key in ("model.pretrain_n", "train.classes_per_client", "attack.launch_epoch", "attack.late_k", "attack.aux_family"):
        section, name = key.split(".")
        v = getattr(getattr(cfg, section), name)
        if v is not None and (isinstance(v, bool) or not isinstance(v, int)):
            raise ConfigError(f"{key}: expected an integer")
    if cfg.eval.pgd_step is not None and (isinstance(cfg.eval.pgd_step, bool) or not isinstance(cfg.eval.pgd_step, (int, float))):
        raise ConfigError("eval.pgd_step: expected a number")
    L = len(units)
    for n in cfg.n_values() + ([cfg.model.pretrain_n] if cfg.model.pretrain_n is not None else []):
        if not 1 <= n <= L - 1:
            raise ConfigError(f"model.n_server: {n} outside [1, {L - 1}] for a {L}-unit model")
    if cfg.data.source not in ("synthetic", "idx"):
        raise ConfigError("data.source: must be 'synthetic' or 'idx'")
    if cfg.data.train_count < 1 or cfg.data.val_count < 1:
        raise ConfigError("data.train_count/val_count: must be positive")
    t = cfg.train
    if t.epochs < 1 or t.batch_size < 1 or t.clients < 1 or t.lr <= 0:
        raise ConfigError("train: epochs, batch_size, clients and lr must be positive")
    if t.transport not in ("inprocess", "socket"):
        raise ConfigError("train.transport: must be 'inprocess' or 'socket'")
    a = cfg.attack
    bad = [m for m in a.methods if m not in METHODS]
    if bad or not a.methods:
        raise ConfigError(f"attack.methods: unknown {bad} (choose from {list(METHODS)})")
    if a.mode not in ("fine-tune", "from-scratch"):
        raise ConfigError("attack.mode: must be 'fine-tune' or 'from-scratch'")
    if a.budget < 0:
        raise ConfigError("attack.budget: must be >= 0")
    if a.query_batch < 1:
        raise ConfigError("attack.query_batch: must be positive")
    if not 0 < a.data_fraction <= 1:
        raise ConfigError("attack.data_fraction: must lie in (0, 1]")
    if not 0.5 < a.soft_alpha <= 1:
        raise ConfigError("attack.soft_alpha: must lie in (0.5, 1]")
    if a.launch_epoch is not None and not 0 <= a.launch_epoch < t.epochs:
        raise ConfigError("attack.launch_epoch: must lie inside training")
    try:
        Variant(a.variant)
    except ValueError as err:
        raise ConfigError(f"attack.variant: unknown {a.variant!r}") from err
    if cfg.defense.l1_lambda < 0:
        raise ConfigError("defense.l1_lambda: must be >= 0")
    e = cfg.eval
    if e.fgsm_eps < 0 or e.pgd_eps < 0 or e.pgd_iters < 0:
        raise ConfigError("eval: eps and iterations must be >= 0")


def loads(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"config is not valid TOML: {err}") from err
    return from_dict(raw)


def load(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"))
