"""Server-side defenses: collision-watermark detection, the retention-based
indicator baseline, and five passive update-space detectors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from .data import LabeledImageSet, PlantingSet
from .errors import ConfigurationError, InputError
from .models import BnLayerStats, Classifier, ModelState, TrainConfig, sgd_train
from .seeding import rng_for
from .triggers import TriggerSpec, apply_trigger


@dataclass
class DefenseVerdict:
    """Per-client keep/exclude decisions with the method's native score."""

    kept: dict[int, bool]
    score: dict[int, float]
    threshold: float | None = None
    extra: dict = field(default_factory=dict)

    def kept_ids(self) -> list[int]:
        return sorted(k for k, v in self.kept.items() if v)


def base_mapping(kind: str, n_classes: int, shift: int | None = None) -> np.ndarray:
    """Fixed label bijection for planting: identity, or a cyclic shift."""
    if n_classes < 2:
        raise ConfigurationError("need at least 2 classes")
    if kind == "diagonal":
        return np.arange(n_classes)
    if kind.startswith("shift"):
        if shift is None:
            try:
                shift = int(kind.split("_", 1)[1])
            except (IndexError, ValueError):
                raise ConfigurationError(f"bad mapping kind {kind!r}")
        return (np.arange(n_classes) + shift) % n_classes
    raise ConfigurationError(f"unknown mapping kind {kind!r}")


@dataclass
class WatermarkSpec:
    """Collision-watermark configuration: planting data, base mapping, triggered
    target mapping, injection strength, and the detection threshold."""

    planting: PlantingSet
    base_map_kind: str = "diagonal"
    base_map_shift: int = 0
    target_label: int = 8
    trigger: TriggerSpec = field(default_factory=lambda: TriggerSpec(kind="wanet"))
    trigger_fraction: float = 0.2
    reg_lambda: float = 0.3
    threshold: float = 0.05
    inject_lr: float = 0.001
    inject_iters: int = 5
    inject_batch: int = 64
    inject_momentum: float = 0.9
    bn_switch: bool = True
    replace_planting: bool = False

    def __post_init__(self):
        if not (0.0 < self.trigger_fraction <= 1.0):
            raise ConfigurationError("trigger_fraction must be in (0, 1]")
        if self.reg_lambda < 0:
            raise ConfigurationError("reg_lambda must be >= 0")
        if not (0.0 <= self.threshold < 1.0):
            raise ConfigurationError("threshold must be in [0, 1)")
        if self.inject_iters < 1 or self.inject_lr < 0:
            raise ConfigurationError("bad injection settings")

    def mapping(self, n_classes: int) -> np.ndarray:
        kind = self.base_map_kind
        if kind == "shift":
            return base_mapping("shift", n_classes, shift=self.base_map_shift)
        return base_mapping(kind, n_classes)


@dataclass
class IndicatorSpec:
    """Retention-based baseline: random-label planting, per-class inspection."""

    planting: PlantingSet
    threshold: float = 0.95
    inject_lr: float = 0.001
    inject_iters: int = 5
    inject_batch: int = 64
    inject_momentum: float = 0.9
    reg_lambda: float = 0.3
    bn_switch: bool = True

    def __post_init__(self):
        if not (0.0 < self.threshold < 1.0):
            raise ConfigurationError("threshold must be in (0, 1)")


@dataclass
class WatermarkMaterial:
    """Frozen per-experiment planting tensors: the base-mapped set, the
    triggered watermark subset, and the raw images used for bias probes."""

    raw_images: np.ndarray
    base_images: np.ndarray
    base_labels: np.ndarray
    wm_images: np.ndarray
    wm_label: int


def build_watermark_material(spec: WatermarkSpec, n_classes: int, seed: int) -> WatermarkMaterial:
    samples = spec.planting.samples
    pi1 = spec.mapping(n_classes)
    raw = samples.images
    base_labels = pi1[samples.labels % n_classes]

    n_wm = int(math.ceil(spec.trigger_fraction * len(samples)))
    rng = rng_for(seed, "wm-subset", len(samples))
    pick = np.sort(rng.choice(len(samples), size=n_wm, replace=False))
    wm_images = apply_trigger(raw[pick], spec.trigger)

    base_images = raw
    if spec.replace_planting:
        keep = np.setdiff1d(np.arange(len(samples)), pick)
        base_images = raw[keep]
        base_labels = base_labels[keep]

    return WatermarkMaterial(
        raw_images=raw,
        base_images=base_images,
        base_labels=base_labels,
        wm_images=wm_images,
        wm_label=spec.target_label,
    )


@dataclass
class InjectionResult:
    broadcast: ModelState
    watermark_bn: tuple[BnLayerStats, ...]
    task_bn: tuple[BnLayerStats, ...]
    self_accuracy: float


def _anchored_objective(module, reg_lambda: float):
    """Cross entropy plus lambda * l2 distance to the pre-injection weights."""
    if reg_lambda == 0.0:
        return None
    anchor = torch.cat([p.detach().flatten().clone() for p in module.parameters()])

    def extra(mod, epoch, b):
        w = torch.cat([p.flatten() for p in mod.parameters()])
        return reg_lambda * torch.norm(w - anchor, p=2)

    return extra


def injection_loss_terms(
    model: Classifier, material: WatermarkMaterial, reg_lambda: float, anchor: np.ndarray
) -> tuple[float, float, float]:
    """(base CE, watermark CE, regularizer) evaluated at the current weights."""
    l_base = model.loss(material.base_images, material.base_labels)
    wm_labels = np.full(len(material.wm_images), material.wm_label, dtype=np.int64)
    l_wm = model.loss(material.wm_images, wm_labels)
    w = model.get_params().astype(np.float64)
    reg = reg_lambda * float(np.linalg.norm(w - anchor.astype(np.float64)))
    return l_base, l_wm, reg


def coward_inject(
    model: Classifier, spec: WatermarkSpec, material: WatermarkMaterial, seed: int,
    round_index: int | None = None,
) -> InjectionResult:
    """Plant the base mapping and the triggered target mapping into the global
    model; switch task BatchNorm stats back into the broadcast state while
    keeping the watermark stats for inspection."""
    task_bn = model.export_bn()

    images = np.concatenate([material.base_images, material.wm_images])
    labels = np.concatenate(
        [material.base_labels, np.full(len(material.wm_images), material.wm_label, dtype=np.int64)]
    )
    train_set = LabeledImageSet(images, labels, model.n_classes)
    cfg = TrainConfig(
        learning_rate=spec.inject_lr,
        epochs=spec.inject_iters,
        batch_size=spec.inject_batch,
        momentum=spec.inject_momentum,
    )
    extra = _anchored_objective(model.module, spec.reg_lambda)
    sgd_train(model, train_set, cfg, seed, extra_loss=extra, round_index=round_index)

    watermark_bn = model.export_bn()
    preds = model.predict(material.wm_images)
    self_acc = float(np.mean(preds == material.wm_label)) if len(preds) else 0.0

    if spec.bn_switch:
        model.import_bn(task_bn)
    broadcast = model.get_state()
    return InjectionResult(
        broadcast=broadcast, watermark_bn=watermark_bn, task_bn=task_bn, self_accuracy=self_acc
    )


def watermark_accuracy(
    client_model: Classifier,
    material: WatermarkMaterial,
    watermark_bn: tuple[BnLayerStats, ...] | None,
) -> float:
    """Fraction of triggered planting samples the client model still maps to
    the watermark target, inspected under the injection-epoch BN stats."""
    probe = client_model.clone()
    if watermark_bn is not None:
        probe.import_bn(watermark_bn)
    preds = probe.predict(material.wm_images)
    return float(np.mean(preds == material.wm_label))


def coward_detect(accuracies: dict[int, float], beta: float) -> DefenseVerdict:
    """Keep exactly the clients whose watermark accuracy strictly exceeds beta."""
    kept = {k: (acc > beta) for k, acc in accuracies.items()}
    return DefenseVerdict(kept=kept, score=dict(accuracies), threshold=beta)


# ---------------------------------------------------------------------------
# indicator baseline


def indicator_assign_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Random planting labels with equal per-class share, reshuffled per call."""
    reps = int(math.ceil(n / n_classes))
    labels = np.tile(np.arange(n_classes), reps)[:n]
    rng.shuffle(labels)
    return labels


def indicator_inject(
    model: Classifier, spec: IndicatorSpec, planted_labels: np.ndarray, seed: int,
    round_index: int | None = None,
) -> InjectionResult:
    task_bn = model.export_bn()
    train_set = LabeledImageSet(spec.planting.samples.images, planted_labels, model.n_classes)
    cfg = TrainConfig(
        learning_rate=spec.inject_lr,
        epochs=spec.inject_iters,
        batch_size=spec.inject_batch,
        momentum=spec.inject_momentum,
    )
    extra = _anchored_objective(model.module, spec.reg_lambda)
    sgd_train(model, train_set, cfg, seed, extra_loss=extra, round_index=round_index)

    watermark_bn = model.export_bn()
    preds = model.predict(spec.planting.samples.images)
    self_acc = float(np.mean(preds == planted_labels))
    if spec.bn_switch:
        model.import_bn(task_bn)
    return InjectionResult(
        broadcast=model.get_state(), watermark_bn=watermark_bn, task_bn=task_bn, self_accuracy=self_acc
    )


def indicator_inspect(
    client_model: Classifier,
    images: np.ndarray,
    planted_labels: np.ndarray,
    watermark_bn: tuple[BnLayerStats, ...] | None,
    threshold: float,
    n_classes: int,
) -> tuple[bool, float, int, np.ndarray]:
    """(kept, max class accuracy, suspected class, prediction distribution).

    A client is flagged malicious when any planted class's inspection accuracy
    exceeds the threshold; the offending class is the suspected attack target.
    """
    probe = client_model.clone()
    if watermark_bn is not None:
        probe.import_bn(watermark_bn)
    preds = probe.predict(images)
    dist = np.bincount(preds, minlength=n_classes).astype(np.float64) / max(len(preds), 1)

    class_acc = np.zeros(n_classes)
    for c in range(n_classes):
        member = planted_labels == c
        if member.any():
            class_acc[c] = float(np.mean(preds[member] == c))
    top = int(np.argmax(class_acc))
    flagged = bool(class_acc[top] > threshold)
    return (not flagged), float(class_acc[top]), top, dist


# ---------------------------------------------------------------------------
# passive detectors


def _as_matrix(deltas: dict[int, np.ndarray]) -> tuple[list[int], np.ndarray]:
    ids = sorted(deltas)
    return ids, np.stack([np.asarray(deltas[k], dtype=np.float64) for k in ids])


def multikrum(deltas: dict[int, np.ndarray], f: int, m: int) -> DefenseVerdict:
    """Keep the m updates with the smallest sum of squared distances to their
    n - f - 2 nearest neighbors."""
    ids, mat = _as_matrix(deltas)
    n = len(ids)
    n_neighbors = n - f - 2
    if n_neighbors < 1:
        raise ConfigurationError(f"multikrum needs n >= f + 3, got n={n}, f={f}")
    if not (1 <= m <= n):
        raise ConfigurationError(f"select count m={m} out of range for n={n}")

    sq = np.sum((mat[:, None, :] - mat[None, :, :]) ** 2, axis=2)
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(sq[i], i)
        others.sort()
        scores[i] = float(np.sum(others[:n_neighbors]))
    order = np.lexsort((ids, scores))  # ties broken by client id
    selected = set(order[:m])
    kept = {ids[i]: (i in selected) for i in range(n)}
    score = {ids[i]: float(scores[i]) for i in range(n)}
    return DefenseVerdict(kept=kept, score=score, threshold=None)


def foolsgold(histories: dict[int, np.ndarray], kappa: float = 1.0) -> dict[int, float]:
    """Per-client weights in [0,1], shrinking with the maximum pairwise cosine
    similarity of accumulated updates (pardoning rescale + logit squash)."""
    ids, mat = _as_matrix(histories)
    n = len(ids)
    norms = np.linalg.norm(mat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = mat / safe[:, None]
    cs = unit @ unit.T - np.eye(n)
    maxcs = np.max(cs, axis=1) if n > 1 else np.zeros(n)

    for i in range(n):
        for j in range(n):
            if i != j and maxcs[i] < maxcs[j] and maxcs[j] > 0:
                cs[i, j] = cs[i, j] * maxcs[i] / maxcs[j]
    wv = 1.0 - np.max(cs, axis=1) if n > 1 else np.ones(n)
    wv = np.clip(wv, 0.0, 1.0)
    top = np.max(wv)
    if top > 0:
        wv = wv / top
    wv[wv == 1.0] = 0.99
    active = wv != 0
    with np.errstate(divide="ignore", over="ignore"):
        wv[active] = kappa * (np.log(wv[active] / (1.0 - wv[active])) + 0.5)
    wv[np.isinf(wv) | (wv > 1.0)] = 1.0
    wv[wv < 0.0] = 0.0
    wv[norms == 0] = 1.0  # empty history is neutral
    return {ids[i]: float(wv[i]) for i in range(n)}


def rflbat(deltas: dict[int, np.ndarray], keep_quantile: float = 0.8) -> DefenseVerdict:
    """Project onto the top-2 principal components and drop the clients whose
    summed in-plane distance to the others lands above the quantile cut."""
    ids, mat = _as_matrix(deltas)
    n = len(ids)
    if n < 3:
        raise ConfigurationError("rflbat needs at least 3 clients")
    centered = mat - mat.mean(axis=0, keepdims=True)
    if np.allclose(centered, 0.0):
        return DefenseVerdict(
            kept={k: True for k in ids}, score={k: 0.0 for k in ids}, threshold=None
        )
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T
    dists = np.sqrt(np.sum((proj[:, None, :] - proj[None, :, :]) ** 2, axis=2))
    dsum = dists.sum(axis=1)
    cut = float(np.quantile(dsum, keep_quantile))
    kept = {ids[i]: bool(dsum[i] <= cut) for i in range(n)}
    score = {ids[i]: float(dsum[i]) for i in range(n)}
    return DefenseVerdict(kept=kept, score=score, threshold=cut)


def _two_means(features: np.ndarray, iters: int = 50) -> np.ndarray:
    """Deterministic 2-means: farthest pair init, Lloyd iterations."""
    d2 = np.sum((features[:, None, :] - features[None, :, :]) ** 2, axis=2)
    i, j = np.unravel_index(int(np.argmax(d2)), d2.shape)
    centers = features[[i, j]].copy()
    labels = None
    for _ in range(iters):
        dist = np.sum((features[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(2):
            if np.any(labels == c):
                centers[c] = features[labels == c].mean(axis=0)
    return labels


def deepsight_lite(
    deltas: dict[int, np.ndarray],
    client_models: dict[int, "Classifier"],
    probe: np.ndarray,
    head_bias_slice: slice | None = None,
) -> DefenseVerdict:
    """Cluster clients on (normalized head-bias delta, mean probe prediction);
    exclude the minority cluster only when its update norms sit far from the
    majority's (beyond twice the median absolute deviation)."""
    if len(probe) == 0:
        raise InputError("probe batch is empty")
    ids, mat = _as_matrix(deltas)
    feats = []
    for i, k in enumerate(ids):
        model = client_models[k]
        if head_bias_slice is None:
            sl = getattr(model, "head_bias_slice", None)
            if sl is None:
                raise ConfigurationError("no head-bias slice available")
        else:
            sl = head_bias_slice
        bias = mat[i][sl]
        bias = bias / (np.linalg.norm(bias) + 1e-12)
        logits = model.forward(probe)
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        feats.append(np.concatenate([bias, probs.mean(axis=0)]))
    feats = np.stack(feats)

    labels = _two_means(feats)
    sizes = np.bincount(labels, minlength=2)
    if sizes.min() == 0:
        kept = {k: True for k in ids}
        return DefenseVerdict(kept=kept, score={k: 0.0 for k in ids}, threshold=None)
    minority = int(np.argmin(sizes))
    if sizes[0] == sizes[1]:
        norms_by = [np.mean([np.linalg.norm(mat[i]) for i in range(len(ids)) if labels[i] == c]) for c in range(2)]
        minority = int(np.argmax(norms_by))

    norms = np.linalg.norm(mat, axis=1)
    med = np.median(norms)
    mad = np.median(np.abs(norms - med))
    mean_min = norms[labels == minority].mean()
    mean_maj = norms[labels != minority].mean()
    drop_minority = abs(mean_min - mean_maj) > 2.0 * mad

    kept = {}
    for i, k in enumerate(ids):
        kept[k] = not (drop_minority and labels[i] == minority)
    score = {ids[i]: float(labels[i]) for i in range(len(ids))}
    return DefenseVerdict(kept=kept, score=score, threshold=None, extra={"mad": float(mad)})


def flame(
    deltas: dict[int, np.ndarray], gamma: float = 0.001, seed: int = 0
) -> tuple[DefenseVerdict, dict[int, np.ndarray]]:
    """Cosine-distance agglomerative clustering cut at the median merge height;
    keep the largest cluster, clip kept deltas to the median l2 norm, then add
    isotropic Gaussian noise sigma = gamma * median norm."""
    ids, mat = _as_matrix(deltas)
    n = len(ids)
    if n < 3:
        raise ConfigurationError("flame needs at least 3 clients")

    norms = np.linalg.norm(mat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = mat / safe[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    dist = 1.0 - sim
    np.fill_diagonal(dist, 0.0)
    condensed = squareform(dist, checks=False)
    if np.allclose(condensed, 0.0):
        labels = np.ones(n, dtype=int)
    else:
        z = linkage(condensed, method="average")
        cut = float(np.median(z[:, 2]))
        labels = fcluster(z, t=cut, criterion="distance")

    counts = np.bincount(labels)
    best = int(np.argmax(counts))
    kept = {ids[i]: bool(labels[i] == best) for i in range(n)}

    median_norm = float(np.median(norms))
    rng = rng_for(seed, "flame-noise")
    processed: dict[int, np.ndarray] = {}
    for i, k in enumerate(ids):
        if not kept[k]:
            continue
        vec = mat[i]
        if norms[i] > median_norm and norms[i] > 0:
            vec = vec * (median_norm / norms[i])
        if gamma > 0:
            vec = vec + rng.normal(0.0, gamma * median_norm, size=vec.shape)
        processed[k] = vec
    score = {ids[i]: float(labels[i]) for i in range(n)}
    return DefenseVerdict(kept=kept, score=score, threshold=None), processed
