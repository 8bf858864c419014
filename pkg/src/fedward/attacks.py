"""Malicious-client training strategies and multi-attacker coordination."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import LabeledImageSet
from .errors import ConfigurationError
from .models import Classifier, ModelState, TrainConfig, sgd_train
from .seeding import rng_for
from .triggers import TriggerSpec, apply_trigger, decompose_dba, poison_batch

STRATEGIES = ("vanilla", "pgd", "neurotoxin", "adaptive_guess")
COORDINATIONS = ("single", "uniform", "dba", "nba")


@dataclass
class AttackSpec:
    strategy: str = "vanilla"
    trigger: TriggerSpec = field(default_factory=lambda: TriggerSpec(kind="pixel"))
    target_label: int = 0
    poison_fraction: float = 0.25
    pgd_epsilon: float = 5.0
    neurotoxin_topk: float = 0.95
    guess_period: int = 1
    coordination: str = "single"
    stealthy: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown attack strategy {self.strategy!r}")
        if self.coordination not in COORDINATIONS:
            raise ConfigurationError(f"unknown coordination {self.coordination!r}")
        if not (0.0 <= self.poison_fraction <= 1.0):
            raise ConfigurationError("poison_fraction must be in [0, 1]")
        if self.strategy == "pgd" and self.pgd_epsilon <= 0:
            raise ConfigurationError("pgd_epsilon must be > 0")
        if self.strategy == "neurotoxin" and not (0.0 < self.neurotoxin_topk < 1.0):
            raise ConfigurationError("neurotoxin_topk must be in (0, 1)")
        if self.strategy == "adaptive_guess" and self.guess_period < 1:
            raise ConfigurationError("guess_period must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["trigger"] = self.trigger.to_dict()
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "AttackSpec":
        obj = dict(obj)
        obj["trigger"] = TriggerSpec.from_dict(obj["trigger"])
        return cls(**obj)


@dataclass
class AdaptiveContext:
    """Round context for the periodic guessing attack: the attacker's own
    pre-triggered OOD pool and the current guessed watermark target."""

    ood_images: np.ndarray
    guess_label: int


def pgd_project(delta_vec: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto the l2 ball of radius epsilon."""
    norm = float(np.linalg.norm(delta_vec))
    if norm <= epsilon or norm == 0.0:
        return delta_vec.copy()
    return delta_vec * (epsilon / norm)


def neurotoxin_mask(benign_grad: np.ndarray, topk: float) -> np.ndarray:
    """Boolean mask over the floor(topk*d) coordinates with smallest benign magnitude."""
    d = benign_grad.size
    k = min(int(math.floor(topk * d)), d - 1)
    order = np.argsort(np.abs(benign_grad), kind="stable")
    mask = np.zeros(d, dtype=bool)
    mask[order[:k]] = True
    return mask


def adaptive_guess_label(round_index: int, period: int, n_classes: int, excluded: int, seed: int, attacker_id: int = 0) -> int:
    """Guessed watermark target, redrawn every `period` rounds, never `excluded`."""
    if period < 1:
        raise ConfigurationError("period must be >= 1")
    phase = round_index // period
    rng = rng_for(seed, "guess", attacker_id, phase)
    choices = [c for c in range(n_classes) if c != excluded]
    return int(choices[rng.integers(0, len(choices))])


def _poison_hook(spec: AttackSpec, seed: int):
    trig, target, frac = spec.trigger, spec.target_label, spec.poison_fraction

    def hook(x: np.ndarray, y: np.ndarray, epoch: int, b: int):
        n = len(y)
        k = int(math.ceil(frac * n))
        if k <= 0:
            return x, y
        rng = rng_for(seed, "poison", epoch, b)
        pick = rng.permutation(n)[:k]
        x = x.copy()
        y = y.copy()
        x[pick] = apply_trigger(x[pick], trig)
        y[pick] = target
        return x, y

    return hook


def _pseudo_watermark_loss(adaptive: AdaptiveContext, batch_size: int, seed: int):
    pool = torch.as_tensor(adaptive.ood_images, dtype=torch.float32)
    target = adaptive.guess_label

    def extra(module, epoch: int, b: int):
        rng = rng_for(seed, "pseudo", epoch, b)
        pick = rng.integers(0, len(pool), size=min(batch_size, len(pool)))
        x = pool[np.asarray(pick)]
        y = torch.full((len(pick),), target, dtype=torch.long)
        return torch.nn.functional.cross_entropy(module(x), y)

    return extra


def benign_reference_direction(
    model: Classifier, data: LabeledImageSet, cfg: TrainConfig, seed: int
) -> np.ndarray:
    """One clean epoch from the broadcast state; its parameter displacement
    stands in for the benign gradient direction."""
    probe = model.clone()
    start = probe.get_params().astype(np.float64)
    clean_cfg = TrainConfig(
        learning_rate=cfg.learning_rate, epochs=1, batch_size=cfg.batch_size, momentum=cfg.momentum
    )
    sgd_train(probe, data, clean_cfg, seed)
    return probe.get_params().astype(np.float64) - start


def malicious_train(
    model: Classifier,
    local_data: LabeledImageSet,
    spec: AttackSpec,
    cfg: TrainConfig,
    seed: int,
    round_index: int | None = None,
    adaptive: AdaptiveContext | None = None,
) -> ModelState:
    """Poisoned local training plus the strategy's delta post-processing.

    The returned state keeps the client's post-training BatchNorm stats; only
    the trainable-parameter delta is reshaped by PGD or Neurotoxin.
    """
    eff_cfg = cfg
    if spec.stealthy:
        eff_cfg = dataclasses.replace(cfg, learning_rate=cfg.learning_rate / 2.0)

    start = model.get_params().astype(np.float64)

    benign_dir = None
    if spec.strategy == "neurotoxin":
        benign_dir = benign_reference_direction(model, local_data, eff_cfg, seed)

    data = local_data
    batch_transform = None
    if spec.trigger.kind == "semantic":
        data = poison_batch(local_data, spec.trigger, spec.target_label, spec.poison_fraction, seed)
    else:
        batch_transform = _poison_hook(spec, seed)

    extra = None
    if spec.strategy == "adaptive_guess":
        if adaptive is None:
            raise ConfigurationError("adaptive_guess needs an AdaptiveContext")
        extra = _pseudo_watermark_loss(adaptive, eff_cfg.batch_size, seed)

    state = sgd_train(
        model, data, eff_cfg, seed,
        batch_transform=batch_transform, extra_loss=extra, round_index=round_index,
    )

    d = state.params.astype(np.float64) - start
    if spec.strategy == "pgd":
        d = pgd_project(d, spec.pgd_epsilon)
    elif spec.strategy == "neurotoxin":
        d = d * neurotoxin_mask(benign_dir, spec.neurotoxin_topk)
    else:
        return state

    new_params = (start + d).astype(state.params.dtype)
    model.set_params(new_params)
    return ModelState(params=new_params, bn_stats=state.bn_stats)


def build_coordination(spec: AttackSpec, n_attackers: int, n_classes: int = 10) -> list[AttackSpec]:
    """Per-attacker specs for uniform, DBA, and NBA collusion styles."""
    if n_attackers < 1:
        raise ConfigurationError("n_attackers must be >= 1")
    if spec.coordination in ("single", "uniform"):
        return [dataclasses.replace(spec) for _ in range(n_attackers)]
    if spec.coordination == "dba":
        parts = decompose_dba(spec.trigger, n_attackers)
        return [dataclasses.replace(spec, trigger=part) for part in parts.local_parts]
    # nba: independent attackers with pairwise-different targets
    if n_attackers >= n_classes:
        raise ConfigurationError(
            f"NBA needs pairwise-distinct targets: {n_attackers} attackers, {n_classes} classes"
        )
    specs = []
    for i in range(n_attackers):
        trig = dataclasses.replace(
            spec.trigger, pattern_seed=spec.trigger.pattern_seed + i
        )
        specs.append(
            dataclasses.replace(
                spec,
                trigger=trig,
                target_label=(spec.target_label + i) % n_classes,
            )
        )
    return specs
