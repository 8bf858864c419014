"""Centralized two-backdoor interaction experiment.

Trains a task model, plants a first backdoor, then either plants a second
backdoor with a different target or fine-tunes on clean data with the same
budget, tracking the first backdoor's attack success along the way. Each
entity keeps its own BatchNorm statistics snapshot when bn_switch is on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import metrics
from .config import ExperimentConfig, config_hash
from .data import LabeledImageSet, load_task_dataset
from .models import Classifier, TrainConfig, build_model, sgd_train
from .records import RecordWriter
from .seeding import derive_seed, rng_for
from .triggers import TriggerSpec, apply_trigger


@dataclass
class CollisionResult:
    header: dict
    points: list[dict]          # {"arm", "step", "asr_first", "ba"}
    asr_after_first: float
    asr_after_second: float     # second-backdoor arm
    asr_after_clean: float      # clean fine-tune arm


def _poisoned_set(data: LabeledImageSet, trigger: TriggerSpec, fraction: float, seed: int) -> LabeledImageSet:
    out = data.copy()
    n = len(out)
    k = max(int(round(fraction * n)), 1)
    pick = rng_for(seed, "collision-poison", n).permutation(n)[:k]
    out.images[pick] = apply_trigger(out.images[pick], trigger)
    out.labels[pick] = trigger.target_label
    return out


def run_collision(cfg: ExperimentConfig) -> CollisionResult:
    """Fig-style collision run driven by cfg.collision; returns per-checkpoint
    ASR of the first backdoor under both continuation arms."""
    torch.set_num_threads(1)
    col = cfg.collision
    train, test = load_task_dataset(
        cfg.dataset.name,
        cfg.dataset.n_train,
        cfg.dataset.n_test,
        seed=derive_seed(cfg.seed, "data"),
        image_size=cfg.dataset.image_size,
    )
    from .flcore import trigger_from_section

    trig_a = trigger_from_section(col.first_trigger)
    trig_b = trigger_from_section(col.second_trigger)

    model = build_model(
        "small_convnet", train.image_shape, train.n_classes, seed=derive_seed(cfg.seed, "model")
    )
    task_cfg = TrainConfig(
        learning_rate=cfg.fl.local.learning_rate,
        epochs=col.pretrain_epochs,
        batch_size=cfg.fl.local.batch_size,
        momentum=cfg.fl.local.momentum,
    )
    sgd_train(model, train, task_cfg, derive_seed(cfg.seed, "pretrain"))

    inject_cfg = TrainConfig(
        learning_rate=col.inject_lr,
        epochs=1,
        batch_size=cfg.fl.local.batch_size,
        momentum=cfg.fl.local.momentum,
    )

    # first backdoor: poisoned fine-tuning, keep its own BN snapshot
    poisoned_a = _poisoned_set(train, trig_a, col.poison_fraction, derive_seed(cfg.seed, "pa"))
    for e in range(col.inject_epochs):
        sgd_train(model, poisoned_a, inject_cfg, derive_seed(cfg.seed, "inject-a", e))
    bn_a = model.export_bn()
    base_state = model.get_state()

    def asr_first(m: Classifier) -> float:
        probe = m.clone()
        if col.bn_switch:
            probe.import_bn(bn_a)
        return metrics.compute_asr(probe, test, trig_a, trig_a.target_label)

    asr0 = asr_first(model)

    points: list[dict] = []
    arm_final: dict[str, float] = {}
    for arm in ("backdoor", "clean"):
        model.set_state(base_state)
        if arm == "backdoor":
            arm_data = _poisoned_set(train, trig_b, col.poison_fraction, derive_seed(cfg.seed, "pb"))
        else:
            arm_data = train
        points.append({"arm": arm, "step": 0, "asr_first": round(asr0, 6),
                       "ba": round(metrics.compute_ba(model, test), 6)})
        for step in range(1, col.checkpoints + 1):
            sgd_train(model, arm_data, inject_cfg, derive_seed(cfg.seed, "arm", arm, step))
            points.append(
                {
                    "arm": arm,
                    "step": step,
                    "asr_first": round(asr_first(model), 6),
                    "ba": round(metrics.compute_ba(model, test), 6),
                }
            )
        arm_final[arm] = points[-1]["asr_first"]

    header = {"type": "header", "config_hash": config_hash(cfg), "config": cfg.to_dict()}
    writer = RecordWriter(cfg.output.results_path)
    writer.write(header)
    for p in points:
        writer.write({"type": "collision", **p})
    summary = {
        "type": "summary",
        "asr_after_first": round(asr0, 6),
        "asr_after_second": arm_final["backdoor"],
        "asr_after_clean": arm_final["clean"],
        "config_hash": header["config_hash"],
    }
    writer.write(summary)
    writer.close()

    return CollisionResult(
        header=header,
        points=points,
        asr_after_first=asr0,
        asr_after_second=arm_final["backdoor"],
        asr_after_clean=arm_final["clean"],
    )
