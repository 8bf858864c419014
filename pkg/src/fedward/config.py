"""Experiment configuration: JSON schema, validation, and hashing.

Every field has a default; `fedward run` consumes a JSON file shaped like
`ExperimentConfig.to_dict()`. The FEDWARD_SEED environment variable, when
set, overrides the config seed at load time.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigurationError


def _take(obj: dict, cls, path: str):
    """Build a section dataclass from a dict, rejecting unknown keys."""
    if obj is None:
        return cls()
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        return cls(**obj)
    except TypeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


@dataclass
class DatasetSection:
    name: str = "shapes"
    n_train: int = 4000
    n_test: int = 1000
    image_size: int = 16
    alpha: float = 0.9

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigurationError("dataset sizes must be positive")
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be > 0")


@dataclass
class LocalSection:
    learning_rate: float = 0.03
    epochs: int = 2
    batch_size: int = 32
    momentum: float = 0.9


@dataclass
class FLSection:
    n_clients: int = 30
    clients_per_round: int = 10
    total_rounds: int = 60
    attack_start: int = 0
    attack_duration: int = 0
    volume_denominator: str = "kept"
    local: LocalSection = field(default_factory=LocalSection)

    def __post_init__(self):
        if isinstance(self.local, dict):
            self.local = _take(self.local, LocalSection, "fl.local")
        if self.clients_per_round > self.n_clients:
            raise ConfigurationError("clients_per_round exceeds n_clients")
        if self.clients_per_round < 1 or self.total_rounds < 1:
            raise ConfigurationError("clients_per_round and total_rounds must be >= 1")
        if self.attack_duration:
            end = self.attack_start + self.attack_duration
            if self.attack_start < 0 or end > self.total_rounds:
                raise ConfigurationError("attack window outside [0, total_rounds)")
        if self.volume_denominator not in ("kept", "sampled"):
            raise ConfigurationError("volume_denominator must be 'kept' or 'sampled'")


@dataclass
class TriggerSection:
    kind: str = "pixel"
    target_label: int = 0
    row: int = 1
    col: int = 1
    height: int = 3
    width: int = 3
    value: float = 1.0
    kappa: float = 0.2
    cells: int = 4
    warp_cells: int = 4
    warp_strength: float = 0.5
    pattern_seed: int = 0
    semantic_ids: list = field(default_factory=list)


@dataclass
class AttackSection:
    n_attackers: int = 1
    strategy: str = "vanilla"
    coordination: str = "single"
    target_label: int = 0
    poison_fraction: float = 0.25
    pgd_epsilon: float = 5.0
    neurotoxin_topk: float = 0.95
    guess_period: int = 1
    stealthy: bool = False
    trigger: TriggerSection = field(default_factory=TriggerSection)

    def __post_init__(self):
        if isinstance(self.trigger, dict):
            self.trigger = _take(self.trigger, TriggerSection, "attack.trigger")


@dataclass
class WatermarkSection:
    source: str = "digits"
    size: int = 300
    base_map: str = "diagonal"
    base_map_shift: int = 0
    target_label: int = 8
    trigger_fraction: float = 0.2
    reg_lambda: float = 0.3
    threshold: float = 0.05
    inject_lr: float = 0.001
    inject_iters: int = 5
    inject_batch: int = 64
    bn_switch: bool = True
    replace_planting: bool = False
    trigger: TriggerSection = field(
        default_factory=lambda: TriggerSection(kind="wanet", target_label=8)
    )

    def __post_init__(self):
        if isinstance(self.trigger, dict):
            self.trigger = _take(self.trigger, TriggerSection, "defense.watermark.trigger")


@dataclass
class DefenseSection:
    name: str = "none"
    watermark: WatermarkSection = field(default_factory=WatermarkSection)
    indicator_threshold: float = 0.95
    multikrum_f: int = 1
    multikrum_m: int = 7
    rflbat_keep_quantile: float = 0.8
    flame_gamma: float = 0.001
    foolsgold_kappa: float = 1.0

    _KNOWN = ("none", "coward", "indicator", "multikrum", "foolsgold", "rflbat", "deepsight", "flame")

    def __post_init__(self):
        if isinstance(self.watermark, dict):
            self.watermark = _take(self.watermark, WatermarkSection, "defense.watermark")
        if self.name not in self._KNOWN:
            raise ConfigurationError(f"unknown defense {self.name!r}; known: {self._KNOWN}")


@dataclass
class EvalSection:
    cadence: int = 5
    asr_probe: int = 256
    record_local_asr: bool = True
    record_head_weights: bool = False

    def __post_init__(self):
        if self.cadence < 1:
            raise ConfigurationError("cadence must be >= 1")


@dataclass
class OutputSection:
    results_path: str | None = None
    summary_path: str | None = None


@dataclass
class CollisionSection:
    """Centralized two-backdoor interaction experiment."""

    pretrain_epochs: int = 4
    inject_epochs: int = 3
    inject_lr: float = 0.01
    poison_fraction: float = 0.25
    first_trigger: TriggerSection = field(
        default_factory=lambda: TriggerSection(kind="wanet", target_label=1)
    )
    second_trigger: TriggerSection = field(
        default_factory=lambda: TriggerSection(kind="pixel", target_label=0)
    )
    checkpoints: int = 6
    bn_switch: bool = True

    def __post_init__(self):
        if isinstance(self.first_trigger, dict):
            self.first_trigger = _take(self.first_trigger, TriggerSection, "collision.first_trigger")
        if isinstance(self.second_trigger, dict):
            self.second_trigger = _take(self.second_trigger, TriggerSection, "collision.second_trigger")


@dataclass
class ExperimentConfig:
    kind: str = "fl"
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    fl: FLSection = field(default_factory=FLSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    evaluation: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)
    collision: CollisionSection = field(default_factory=CollisionSection)

    def __post_init__(self):
        for name, cls in (
            ("dataset", DatasetSection),
            ("fl", FLSection),
            ("attack", AttackSection),
            ("defense", DefenseSection),
            ("evaluation", EvalSection),
            ("output", OutputSection),
            ("collision", CollisionSection),
        ):
            value = getattr(self, name)
            if isinstance(value, dict) or value is None:
                setattr(self, name, _take(value, cls, name))
        if self.kind not in ("fl", "collision"):
            raise ConfigurationError(f"kind must be 'fl' or 'collision', got {self.kind!r}")

    # -- (de)serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        return _take(dict(obj), cls, "config")

    @property
    def attack_active(self) -> bool:
        return self.attack.n_attackers > 0 and self.fl.attack_duration > 0

    def attack_window(self) -> tuple[int, int]:
        return self.fl.attack_start, self.fl.attack_start + self.fl.attack_duration


def config_hash(cfg: ExperimentConfig | dict) -> str:
    obj = cfg.to_dict() if isinstance(cfg, ExperimentConfig) else cfg
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
    cfg = ExperimentConfig.from_dict(obj)
    env_seed = os.environ.get("FEDWARD_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigurationError(f"FEDWARD_SEED must be an integer: {env_seed!r}") from exc
    return cfg
