"""Trigger synthesis and application for attackers and the server watermark.

Canonical pattern geometries (the literature only shows these as figures):
  pixel       solid value patch at (row, col) of size (height, width)
  noise_patch patch filled with a fixed seeded noise texture
  square      one-pixel-wide outline of the patch box
  triangle    filled lower-left half of the patch box
  diagonal    main-diagonal band of the full image, half-width `width`
  blend       convex blend with a seeded full-image noise pattern, ratio kappa
  mosaic      low-ratio blend with a coarse checkerboard
  wanet       smooth seeded warp field resampled bilinearly
  semantic    identity on pixels; trigger is membership in an index set
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledImageSet
from .errors import ParameterError, UnsupportedTriggerError
from .seeding import rng_for

TRIGGER_KINDS = (
    "pixel",
    "blend",
    "diagonal",
    "square",
    "triangle",
    "noise_patch",
    "mosaic",
    "wanet",
    "semantic",
)

PATCH_KINDS = ("pixel", "noise_patch", "square", "triangle", "diagonal")


@dataclass
class TriggerSpec:
    kind: str
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
    semantic_ids: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ParameterError(f"unknown trigger kind {self.kind!r}")
        if not (0.0 < self.kappa <= 1.0):
            raise ParameterError("kappa must be in (0, 1]")
        if not math.isfinite(self.warp_strength):
            raise ParameterError("warp strength must be finite")
        self.semantic_ids = tuple(int(i) for i in self.semantic_ids)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target_label": self.target_label,
            "row": self.row,
            "col": self.col,
            "height": self.height,
            "width": self.width,
            "value": self.value,
            "kappa": self.kappa,
            "cells": self.cells,
            "warp_cells": self.warp_cells,
            "warp_strength": self.warp_strength,
            "pattern_seed": self.pattern_seed,
            "semantic_ids": list(self.semantic_ids),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TriggerSpec":
        obj = dict(obj)
        obj["semantic_ids"] = tuple(obj.get("semantic_ids", ()))
        return cls(**obj)


@dataclass
class DbaDecomposition:
    global_trigger: TriggerSpec
    local_parts: list[TriggerSpec]


def _check_patch_bounds(spec: TriggerSpec, h: int, w: int):
    if spec.row < 0 or spec.col < 0 or spec.height < 1 or spec.width < 1:
        raise ParameterError("patch geometry must be positive and inside the image")
    if spec.row + spec.height > h or spec.col + spec.width > w:
        raise ParameterError(
            f"patch {spec.height}x{spec.width} at ({spec.row},{spec.col}) "
            f"exceeds image {h}x{w}"
        )


_warp_cache: dict[tuple, torch.Tensor] = {}


def _warp_grid(seed: int, cells: int, strength: float, h: int, w: int) -> torch.Tensor:
    key = (seed, cells, strength, h, w)
    grid = _warp_cache.get(key)
    if grid is None:
        rng = rng_for(seed, "wanet", cells, h, w)
        ctrl = rng.uniform(-1, 1, size=(1, 2, cells, cells)).astype(np.float32)
        ctrl = ctrl / np.mean(np.abs(ctrl))
        flow = F.interpolate(
            torch.from_numpy(ctrl), size=(h, w), mode="bicubic", align_corners=True
        ).permute(0, 2, 3, 1)
        ys = torch.linspace(-1, 1, steps=h)
        xs = torch.linspace(-1, 1, steps=w)
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        identity = torch.stack((xx, yy), dim=2)[None]
        grid = torch.clamp(identity + strength * flow / h, -1, 1)
        _warp_cache[key] = grid
    return grid


def _noise_pattern(seed: int, shape: tuple[int, int, int], tag: str) -> np.ndarray:
    rng = rng_for(seed, tag, *shape)
    return rng.uniform(0.0, 1.0, size=shape).astype(np.float32)


def _checkerboard(shape: tuple[int, int, int], cells: int) -> np.ndarray:
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    board = (((yy // max(cells, 1)) + (xx // max(cells, 1))) % 2).astype(np.float32)
    return np.broadcast_to(board, (c, h, w)).copy()


def trigger_pattern(spec: TriggerSpec, image_shape: tuple[int, int, int]) -> np.ndarray:
    """The pattern an additive/blend kind mixes in; used by blend and rendering."""
    if spec.kind == "blend":
        return _noise_pattern(spec.pattern_seed, image_shape, "blend")
    if spec.kind == "mosaic":
        return _checkerboard(image_shape, spec.cells)
    raise UnsupportedTriggerError(f"{spec.kind} has no standalone pattern")


def apply_trigger(image: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Apply a trigger to one image (c,h,w) or a batch (n,c,h,w); input untouched."""
    single = image.ndim == 3
    batch = image[None] if single else image
    batch = np.array(batch, dtype=np.float32, copy=True)
    n, c, h, w = batch.shape

    if spec.kind in ("pixel", "noise_patch", "square", "triangle"):
        _check_patch_bounds(spec, h, w)
        r0, c0, ph, pw = spec.row, spec.col, spec.height, spec.width
        if spec.kind == "pixel":
            batch[:, :, r0 : r0 + ph, c0 : c0 + pw] = spec.value
        elif spec.kind == "noise_patch":
            tex = _noise_pattern(spec.pattern_seed, (c, ph, pw), "noise_patch")
            batch[:, :, r0 : r0 + ph, c0 : c0 + pw] = tex
        elif spec.kind == "square":
            box = batch[:, :, r0 : r0 + ph, c0 : c0 + pw]
            box[:, :, 0, :] = spec.value
            box[:, :, -1, :] = spec.value
            box[:, :, :, 0] = spec.value
            box[:, :, :, -1] = spec.value
        else:  # triangle: lower-left half of the box
            yy, xx = np.mgrid[0:ph, 0:pw]
            mask = xx <= yy
            box = batch[:, :, r0 : r0 + ph, c0 : c0 + pw]
            box[:, :, mask] = spec.value
    elif spec.kind == "diagonal":
        half = max(int(spec.width) // 2, 0)
        yy, xx = np.mgrid[0:h, 0:w]
        mask = np.abs(yy - xx) <= half
        batch[:, :, mask] = spec.value
    elif spec.kind == "blend":
        pattern = trigger_pattern(spec, (c, h, w))
        batch = (1.0 - spec.kappa) * batch + spec.kappa * pattern
    elif spec.kind == "mosaic":
        pattern = trigger_pattern(spec, (c, h, w))
        batch = (1.0 - spec.kappa) * batch + spec.kappa * pattern
    elif spec.kind == "wanet":
        grid = _warp_grid(spec.pattern_seed, spec.warp_cells, spec.warp_strength, h, w)
        t = torch.from_numpy(batch)
        warped = F.grid_sample(
            t, grid.expand(n, -1, -1, -1), mode="bilinear",
            padding_mode="border", align_corners=True,
        )
        batch = warped.numpy()
    elif spec.kind == "semantic":
        pass  # membership trigger: pixels unchanged
    else:  # pragma: no cover
        raise UnsupportedTriggerError(spec.kind)

    batch = np.clip(batch, 0.0, 1.0)
    return batch[0] if single else batch


def poison_batch(
    batch: LabeledImageSet,
    spec: TriggerSpec,
    target: int,
    fraction: float,
    seed: int = 0,
) -> LabeledImageSet:
    """Trigger and relabel ceil(fraction*n) samples; the rest pass through.

    Semantic triggers ignore `fraction` and flip exactly the samples whose
    dataset ids belong to the spec's membership set.
    """
    out = batch.copy()
    n = len(out)
    if n == 0:
        return out
    if spec.kind == "semantic":
        if out.ids is None or not spec.semantic_ids:
            return out
        member = np.isin(out.ids, np.asarray(spec.semantic_ids, dtype=np.int64))
        out.labels[member] = target
        return out

    k = int(math.ceil(fraction * n))
    if k <= 0:
        return out
    rng = rng_for(seed, "poison", n, target)
    pick = rng.permutation(n)[:k]
    out.images[pick] = apply_trigger(out.images[pick], spec)
    out.labels[pick] = target
    return out


def decompose_dba(global_trigger: TriggerSpec, n_attackers: int) -> DbaDecomposition:
    """Split a solid patch trigger into disjoint row strips, one per attacker.

    Applying every strip reproduces the global patch exactly; only the
    uniform-value `pixel` kind can guarantee that.
    """
    if global_trigger.kind != "pixel":
        raise UnsupportedTriggerError(
            f"DBA decomposition is defined for pixel patches, got {global_trigger.kind}"
        )
    if n_attackers < 2:
        raise ParameterError("DBA needs at least 2 attackers")
    if n_attackers > global_trigger.height:
        raise ParameterError(
            f"cannot split a {global_trigger.height}-row patch into {n_attackers} strips"
        )
    base_h = global_trigger.height // n_attackers
    extra = global_trigger.height % n_attackers
    parts = []
    r = global_trigger.row
    for i in range(n_attackers):
        strip_h = base_h + (1 if i < extra else 0)
        part = TriggerSpec(
            kind="pixel",
            target_label=global_trigger.target_label,
            row=r,
            col=global_trigger.col,
            height=strip_h,
            width=global_trigger.width,
            value=global_trigger.value,
            pattern_seed=global_trigger.pattern_seed,
        )
        parts.append(part)
        r += strip_h
    return DbaDecomposition(global_trigger=global_trigger, local_parts=parts)


def render_trigger(spec: TriggerSpec, image_shape: tuple[int, int, int], base: np.ndarray | None = None) -> np.ndarray:
    """Trigger applied to a mid-gray canvas (or given base) for visual audit."""
    if base is None:
        base = np.full(image_shape, 0.5, dtype=np.float32)
    return apply_trigger(base, spec)
