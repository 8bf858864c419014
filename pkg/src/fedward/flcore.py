"""Global-round orchestration: client sampling, broadcast, local training,
defense hook, and volume-weighted aggregation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from . import metrics
from .attacks import (
    AdaptiveContext,
    AttackSpec,
    adaptive_guess_label,
    build_coordination,
    malicious_train,
)
from .config import ExperimentConfig, FLSection, TriggerSection, config_hash
from .data import (
    build_planting_set,
    dirichlet_partition,
    load_ood_source,
    load_task_dataset,
    make_noise_set,
)
from .defenses import (
    DefenseVerdict,
    IndicatorSpec,
    WatermarkSpec,
    build_watermark_material,
    coward_detect,
    coward_inject,
    deepsight_lite,
    flame,
    foolsgold,
    indicator_assign_labels,
    indicator_inject,
    indicator_inspect,
    multikrum,
    rflbat,
    watermark_accuracy,
)
from .errors import ConfigurationError, InputError, TrainingDivergenceError
from .models import BnLayerStats, Classifier, ModelState, TrainConfig, build_model, delta, sgd_train
from .records import ClientRecord, RecordWriter, RoundRecord
from .seeding import derive_seed, rng_for
from .triggers import TriggerSpec, apply_trigger


def trigger_from_section(sec: TriggerSection) -> TriggerSpec:
    return TriggerSpec(
        kind=sec.kind,
        target_label=sec.target_label,
        row=sec.row,
        col=sec.col,
        height=sec.height,
        width=sec.width,
        value=sec.value,
        kappa=sec.kappa,
        cells=sec.cells,
        warp_cells=sec.warp_cells,
        warp_strength=sec.warp_strength,
        pattern_seed=sec.pattern_seed,
        semantic_ids=tuple(sec.semantic_ids),
    )


def sample_clients(round_index: int, cfg: FLSection, seed: int) -> list[int]:
    """Uniform sample without replacement, deterministic under (seed, round)."""
    rng = rng_for(seed, "sample", round_index)
    ids = rng.choice(cfg.n_clients, size=cfg.clients_per_round, replace=False)
    return sorted(int(i) for i in ids)


def aggregate(
    global_state: ModelState,
    deltas: list[tuple[int, np.ndarray, float]],
    kept: set[int],
    denominator: str = "kept",
) -> ModelState:
    """Volume-weighted delta sum over the kept clients on top of the global
    params; BatchNorm stats are carried from the global state unchanged."""
    ids = {cid for cid, _, _ in deltas}
    if not kept <= ids:
        raise InputError(f"kept ids {sorted(kept - ids)} have no deltas")
    for cid, _, vol in deltas:
        if vol < 0:
            raise InputError(f"negative data volume for client {cid}")
    if not kept:
        return ModelState(params=global_state.params.copy(), bn_stats=global_state.bn_stats)

    if denominator == "kept":
        total = sum(vol for cid, _, vol in deltas if cid in kept)
    elif denominator == "sampled":
        total = sum(vol for _, _, vol in deltas)
    else:
        raise ConfigurationError(f"unknown denominator mode {denominator!r}")
    if total <= 0:
        raise InputError("kept clients have zero total volume")

    new_params = global_state.params.astype(np.float64).copy()
    weight_sum = 0.0
    for cid, vec, vol in deltas:
        if cid not in kept:
            continue
        w = vol / total
        weight_sum += w
        new_params += w * np.asarray(vec, dtype=np.float64)
    if denominator == "kept":
        assert abs(weight_sum - 1.0) < 1e-9, f"kept weights sum to {weight_sum}"
    return ModelState(
        params=new_params.astype(global_state.params.dtype),
        bn_stats=global_state.bn_stats,
    )


def average_bn_stats(
    entries: list[tuple[float, tuple[BnLayerStats, ...]]]
) -> tuple[BnLayerStats, ...]:
    """Volume-weighted mean of clients' running means/vars, layer by layer."""
    total = sum(vol for vol, _ in entries)
    layers = len(entries[0][1])
    out = []
    for i in range(layers):
        mean = sum((vol / total) * st[i].mean.astype(np.float64) for vol, st in entries)
        var = sum((vol / total) * st[i].var.astype(np.float64) for vol, st in entries)
        count = max(st[i].count for _, st in entries)
        ref = entries[0][1][i]
        out.append(
            BnLayerStats(
                mean=mean.astype(ref.mean.dtype), var=var.astype(ref.var.dtype), count=count
            )
        )
    return tuple(out)


# ---------------------------------------------------------------------------
# defense drivers: adapt the pure detection ops to the round loop


class DefenseDriver:
    name = "none"
    proactive = False

    def prepare(self, model: Classifier, round_index: int) -> dict:
        """Server-side step before broadcast; proactive defenses inject here."""
        return {}

    def evaluate(
        self,
        ctx: dict,
        round_index: int,
        sampled: list[int],
        deltas: dict[int, np.ndarray],
        volumes: dict[int, float],
        client_states: dict[int, ModelState],
        scratch: Classifier,
    ) -> tuple[DefenseVerdict, dict[int, np.ndarray] | None, dict[int, dict]]:
        """Returns (verdict, optional replacement deltas, per-client extras)."""
        kept = {k: True for k in sampled}
        return DefenseVerdict(kept=kept, score={k: 0.0 for k in sampled}), None, {}


class CowardDriver(DefenseDriver):
    proactive = True

    def __init__(self, spec: WatermarkSpec, material, seed: int):
        self.name = "coward"
        self.spec = spec
        self.material = material
        self.seed = seed

    def prepare(self, model: Classifier, round_index: int) -> dict:
        res = coward_inject(
            model, self.spec, self.material,
            seed=derive_seed(self.seed, "inject", round_index), round_index=round_index,
        )
        return {"injection": res}

    def evaluate(self, ctx, round_index, sampled, deltas, volumes, client_states, scratch):
        res = ctx["injection"]
        accuracies: dict[int, float] = {}
        extras: dict[int, dict] = {}
        n_classes = scratch.n_classes
        for k in sampled:
            scratch.set_state(client_states[k])
            if self.spec.bn_switch:
                scratch.import_bn(res.watermark_bn)
            preds = scratch.predict(self.material.wm_images)
            accuracies[k] = float(np.mean(preds == self.material.wm_label))
            raw_preds = scratch.predict(self.material.raw_images)
            dist = np.bincount(raw_preds, minlength=n_classes) / max(len(raw_preds), 1)
            extras[k] = {"wm_acc": accuracies[k], "ood_pred_dist": [float(x) for x in dist]}
        verdict = coward_detect(accuracies, self.spec.threshold)
        return verdict, None, extras


class IndicatorDriver(DefenseDriver):
    proactive = True

    def __init__(self, spec: IndicatorSpec, seed: int):
        self.name = "indicator"
        self.spec = spec
        self.seed = seed

    def prepare(self, model: Classifier, round_index: int) -> dict:
        labels = indicator_assign_labels(
            len(self.spec.planting.samples),
            model.n_classes,
            rng_for(self.seed, "indicator-labels", round_index),
        )
        res = indicator_inject(
            model, self.spec, labels,
            seed=derive_seed(self.seed, "inject", round_index), round_index=round_index,
        )
        return {"injection": res, "labels": labels}

    def evaluate(self, ctx, round_index, sampled, deltas, volumes, client_states, scratch):
        res, labels = ctx["injection"], ctx["labels"]
        kept: dict[int, bool] = {}
        score: dict[int, float] = {}
        extras: dict[int, dict] = {}
        suspected: dict[int, int] = {}
        for k in sampled:
            scratch.set_state(client_states[k])
            keep, top_acc, top_class, dist = indicator_inspect(
                scratch,
                self.spec.planting.samples.images,
                labels,
                res.watermark_bn if self.spec.bn_switch else None,
                self.spec.threshold,
                scratch.n_classes,
            )
            kept[k] = keep
            score[k] = top_acc
            suspected[k] = top_class
            extras[k] = {"wm_acc": top_acc, "ood_pred_dist": [float(x) for x in dist]}
        verdict = DefenseVerdict(
            kept=kept, score=score, threshold=self.spec.threshold,
            extra={"suspected_targets": suspected},
        )
        return verdict, None, extras


class MultiKrumDriver(DefenseDriver):
    def __init__(self, f: int, m: int):
        self.name = "multikrum"
        self.f = f
        self.m = m

    def evaluate(self, ctx, round_index, sampled, deltas, volumes, client_states, scratch):
        return multikrum(deltas, self.f, self.m), None, {}


class FoolsGoldDriver(DefenseDriver):
    """Accumulates per-client update histories; weights scale the kept deltas."""

    def __init__(self, kappa: float = 1.0):
        self.name = "foolsgold"
        self.kappa = kappa
        self.histories: dict[int, np.ndarray] = {}

    def evaluate(self, ctx, round_index, sampled, deltas, volumes, client_states, scratch):
        for k in sampled:
            if k in self.histories:
                self.histories[k] = self.histories[k] + deltas[k]
            else:
                self.histories[k] = deltas[k].copy()
        weights = foolsgold({k: self.histories[k] for k in sampled}, kappa=self.kappa)
        kept = {k: weights[k] > 0.5 for k in sampled}
        scaled = {k: deltas[k] * weights[k] for k in sampled if kept[k]}
        verdict = DefenseVerdict(kept=kept, score=weights, threshold=0.5)
        return verdict, scaled, {}


class RflbatDriver(DefenseDriver):
    def __init__(self, keep_quantile: float = 0.8):
        self.name = "rflbat"
        self.keep_quantile = keep_quantile

    def evaluate(self, ctx, round_index, sampled, deltas, volumes, client_states, scratch):
        return rflbat(deltas, keep_quantile=self.keep_quantile), None, {}


class DeepSightDriver(DefenseDriver):
    def __init__(self, probe: np.ndarray):
        self.name = "deepsight"
        self.probe = probe

    def evaluate(self, ctx, round_index, sampled, deltas, volumes, client_states, scratch):
        views = {k: _StateView(scratch, client_states[k]) for k in sampled}
        verdict = deepsight_lite(deltas, views, self.probe, head_bias_slice=scratch.head_bias_slice)
        return verdict, None, {}


class FlameDriver(DefenseDriver):
    def __init__(self, gamma: float, seed: int):
        self.name = "flame"
        self.gamma = gamma
        self.seed = seed

    def evaluate(self, ctx, round_index, sampled, deltas, volumes, client_states, scratch):
        verdict, processed = flame(
            deltas, gamma=self.gamma, seed=derive_seed(self.seed, "flame", round_index)
        )
        return verdict, processed, {}


class _StateView:
    """Forward-only view of one client state through a shared scratch model."""

    def __init__(self, scratch: Classifier, state: ModelState):
        self.scratch = scratch
        self.state = state

    def forward(self, images: np.ndarray) -> np.ndarray:
        self.scratch.set_state(self.state)
        return self.scratch.forward(images)


def build_defense(cfg: ExperimentConfig, input_shape, n_classes: int) -> DefenseDriver:
    d = cfg.defense
    if d.name == "none":
        return DefenseDriver()
    if d.name in ("coward", "indicator"):
        planting = _build_planting(cfg, input_shape, n_classes)
        if d.name == "coward":
            wm = d.watermark
            spec = WatermarkSpec(
                planting=planting,
                base_map_kind=wm.base_map,
                base_map_shift=wm.base_map_shift,
                target_label=wm.target_label,
                trigger=trigger_from_section(wm.trigger),
                trigger_fraction=wm.trigger_fraction,
                reg_lambda=wm.reg_lambda,
                threshold=wm.threshold,
                inject_lr=wm.inject_lr,
                inject_iters=wm.inject_iters,
                inject_batch=wm.inject_batch,
                bn_switch=wm.bn_switch,
                replace_planting=wm.replace_planting,
            )
            material = build_watermark_material(spec, n_classes, derive_seed(cfg.seed, "wm-material"))
            return CowardDriver(spec, material, cfg.seed)
        spec = IndicatorSpec(
            planting=planting,
            threshold=d.indicator_threshold,
            inject_lr=d.watermark.inject_lr,
            inject_iters=d.watermark.inject_iters,
            inject_batch=d.watermark.inject_batch,
            reg_lambda=d.watermark.reg_lambda,
            bn_switch=d.watermark.bn_switch,
        )
        return IndicatorDriver(spec, cfg.seed)
    if d.name == "multikrum":
        return MultiKrumDriver(d.multikrum_f, d.multikrum_m)
    if d.name == "foolsgold":
        return FoolsGoldDriver(kappa=d.foolsgold_kappa)
    if d.name == "rflbat":
        return RflbatDriver(keep_quantile=d.rflbat_keep_quantile)
    if d.name == "deepsight":
        rng = rng_for(cfg.seed, "deepsight-probe")
        probe = rng.uniform(0, 1, size=(64, *input_shape)).astype(np.float32)
        return DeepSightDriver(probe)
    if d.name == "flame":
        return FlameDriver(d.flame_gamma, cfg.seed)
    raise ConfigurationError(f"unknown defense {d.name!r}")


def _build_planting(cfg: ExperimentConfig, input_shape, n_classes: int):
    wm = cfg.defense.watermark
    seed = derive_seed(cfg.seed, "planting")
    if wm.source == "noise":
        return make_noise_set(wm.size, input_shape, n_classes, seed)
    source = load_ood_source(wm.source, n_classes, seed)
    return build_planting_set(source, wm.size, input_shape, seed, source_name=wm.source)


# ---------------------------------------------------------------------------
# experiment loop


@dataclass
class ExperimentResult:
    header: dict
    records: list[RoundRecord]
    summary: dict
    final_state: ModelState


def _attacker_specs(cfg: ExperimentConfig, n_classes: int) -> list[AttackSpec]:
    a = cfg.attack
    base = AttackSpec(
        strategy=a.strategy,
        trigger=trigger_from_section(a.trigger),
        target_label=a.target_label,
        poison_fraction=a.poison_fraction,
        pgd_epsilon=a.pgd_epsilon,
        neurotoxin_topk=a.neurotoxin_topk,
        guess_period=a.guess_period,
        coordination=a.coordination,
        stealthy=a.stealthy,
    )
    return build_coordination(base, a.n_attackers, n_classes)


def _attacker_ood_pool(cfg: ExperimentConfig, input_shape, n_classes: int, attacker_id: int):
    """The adaptive attacker's private planting pool, pre-triggered with its
    own pseudo-watermark trigger (same kind as the server's, different seed)."""
    wm = cfg.defense.watermark
    seed = derive_seed(cfg.seed, "attacker-ood", attacker_id)
    size = min(wm.size, 200)
    if wm.source == "noise":
        pool = make_noise_set(size, input_shape, n_classes, seed)
    else:
        source = load_ood_source(wm.source, n_classes, seed)
        pool = build_planting_set(source, size, input_shape, seed, source_name=wm.source)
    trig = trigger_from_section(wm.trigger)
    trig = dataclasses.replace(
        trig, pattern_seed=derive_seed(cfg.seed, "attacker-trigger", attacker_id)
    )
    return apply_trigger(pool.samples.images, trig)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Execute the configured FL run and return its provenance records.

    Streams one JSON line per round to `output.results_path` when set; the
    stream begins with a header carrying the config and its hash.
    """
    if cfg.kind != "fl":
        raise ConfigurationError(f"run_experiment needs kind='fl', got {cfg.kind!r}")
    torch.set_num_threads(1)

    train, test = load_task_dataset(
        cfg.dataset.name,
        cfg.dataset.n_train,
        cfg.dataset.n_test,
        seed=derive_seed(cfg.seed, "data"),
        image_size=cfg.dataset.image_size,
    )
    n_classes = train.n_classes
    partition = dirichlet_partition(
        train, cfg.fl.n_clients, cfg.dataset.alpha, seed=derive_seed(cfg.seed, "partition")
    )
    client_sets = [train.subset(ix) for ix in partition.client_indices]
    volumes = {k: float(len(ix)) for k, ix in enumerate(partition.client_indices)}

    model = build_model(
        "small_convnet", train.image_shape, n_classes, seed=derive_seed(cfg.seed, "model")
    )
    worker = model.clone()
    scratch = model.clone()

    defense = build_defense(cfg, train.image_shape, n_classes)

    attack_on = cfg.attack_active
    specs: list[AttackSpec] = []
    adaptive_pools: dict[int, np.ndarray] = {}
    if attack_on:
        specs = _attacker_specs(cfg, n_classes)
        if cfg.attack.strategy == "adaptive_guess":
            if cfg.defense.name != "coward":
                raise ConfigurationError("adaptive_guess targets the coward defense")
            for k in range(cfg.attack.n_attackers):
                adaptive_pools[k] = _attacker_ood_pool(cfg, train.image_shape, n_classes, k)
    eval_trigger = trigger_from_section(cfg.attack.trigger)

    asr_probe_ix = rng_for(cfg.seed, "asr-probe").choice(
        len(test), size=min(cfg.evaluation.asr_probe, len(test)), replace=False
    )
    asr_probe = test.subset(np.sort(asr_probe_ix))

    window = cfg.attack_window()
    local_cfg = TrainConfig(
        learning_rate=cfg.fl.local.learning_rate,
        epochs=cfg.fl.local.epochs,
        batch_size=cfg.fl.local.batch_size,
        momentum=cfg.fl.local.momentum,
    )

    header = {"type": "header", "config_hash": config_hash(cfg), "config": cfg.to_dict()}
    writer = RecordWriter(cfg.output.results_path)
    writer.write(header)

    records: list[RoundRecord] = []
    try:
        for t in range(cfg.fl.total_rounds):
            in_window = attack_on and window[0] <= t < window[1]
            ctx = defense.prepare(model, t)
            broadcast = model.get_state()
            sampled = sample_clients(t, cfg.fl, cfg.seed)

            deltas: dict[int, np.ndarray] = {}
            client_states: dict[int, ModelState] = {}
            local_asr: dict[int, float] = {}
            delta_norm: dict[int, float] = {}
            for k in sampled:
                worker.set_state(broadcast)
                seed_k = derive_seed(cfg.seed, "client", t, k)
                is_attacker = k < cfg.attack.n_attackers if attack_on else False
                try:
                    if is_attacker and in_window:
                        spec_k = specs[k]
                        adaptive = None
                        if spec_k.strategy == "adaptive_guess":
                            guess = adaptive_guess_label(
                                t, spec_k.guess_period, n_classes, spec_k.target_label,
                                derive_seed(cfg.seed, "guess"), attacker_id=k,
                            )
                            adaptive = AdaptiveContext(
                                ood_images=adaptive_pools[k], guess_label=guess
                            )
                        state_k = malicious_train(
                            worker, client_sets[k], spec_k, local_cfg, seed_k,
                            round_index=t, adaptive=adaptive,
                        )
                        if cfg.evaluation.record_local_asr:
                            local_asr[k] = metrics.compute_asr(
                                worker, asr_probe, specs[k].trigger, specs[k].target_label
                            )
                    else:
                        state_k = sgd_train(
                            worker, client_sets[k], local_cfg, seed_k, round_index=t
                        )
                except TrainingDivergenceError as exc:
                    exc.round_index = t
                    raise
                client_states[k] = state_k
                deltas[k] = delta(state_k, broadcast)
                delta_norm[k] = round(float(np.linalg.norm(deltas[k])), 6)

            verdict, delta_override, extras = defense.evaluate(
                ctx, t, sampled, deltas, volumes, client_states, scratch
            )
            effective = delta_override if delta_override is not None else deltas
            kept_ids = {k for k in sampled if verdict.kept.get(k, False) and k in effective}
            delta_list = [(k, effective[k], volumes[k]) for k in sampled if k in effective]
            new_state = aggregate(
                broadcast, delta_list, kept_ids, denominator=cfg.fl.volume_denominator
            )
            if kept_ids:
                avg_bn = average_bn_stats(
                    [(volumes[k], client_states[k].bn_stats) for k in sorted(kept_ids)]
                )
                new_state = ModelState(params=new_state.params, bn_stats=avg_bn)
            model.set_state(new_state)

            ba = asr = None
            if (t + 1) % cfg.evaluation.cadence == 0 or t == cfg.fl.total_rounds - 1:
                ba = metrics.compute_ba(model, test)
                asr = metrics.compute_asr(model, test, eval_trigger, cfg.attack.target_label)

            inject_acc = ctx["injection"].self_accuracy if "injection" in ctx else None
            clients = []
            for k in sampled:
                ex = extras.get(k, {})
                clients.append(
                    ClientRecord(
                        client_id=k,
                        malicious=bool(attack_on and k < cfg.attack.n_attackers),
                        volume=int(volumes[k]),
                        delta_norm=delta_norm[k],
                        kept=bool(verdict.kept.get(k, False)),
                        score=_round_opt(verdict.score.get(k)),
                        wm_acc=_round_opt(ex.get("wm_acc")),
                        ood_pred_dist=ex.get("ood_pred_dist"),
                        local_asr=_round_opt(local_asr.get(k)),
                    )
                )
            head_weights = None
            if cfg.evaluation.record_head_weights:
                sl = model.head_slice
                head_weights = {
                    "global": [float(x) for x in model.get_params()[sl]],
                    "clients": {
                        str(k): [float(x) for x in client_states[k].params[sl]] for k in sampled
                    },
                }
            rec = RoundRecord(
                round_index=t,
                sampled=sampled,
                clients=clients,
                threshold=verdict.threshold,
                inject_self_acc=_round_opt(inject_acc),
                ba=_round_opt(ba),
                asr=_round_opt(asr),
                head_weights=head_weights,
            )
            records.append(rec)
            writer.write(rec.to_dict())

        summary = metrics.summarize_records(
            records, window if attack_on else None, n_classes
        )
        summary["config_hash"] = header["config_hash"]
        writer.write(summary)
    finally:
        writer.close()

    return ExperimentResult(
        header=header, records=records, summary=summary, final_state=model.get_state()
    )


def _round_opt(x, digits: int = 6):
    return None if x is None else round(float(x), digits)
