"""Task datasets, Dirichlet client partitions, and out-of-distribution planting sets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .seeding import rng_for


@dataclass
class LabeledImageSet:
    """A batch of images in [0,1] with integer class labels.

    `ids` optionally carries the samples' indices in their source dataset,
    which semantic triggers use for membership tests.
    """

    images: np.ndarray  # (n, c, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64 in [0, n_classes)
    n_classes: int
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigurationError(f"images must be (n,c,h,w), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigurationError("image/label count mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConfigurationError("labels out of range")
        lo, hi = float(self.images.min(initial=0.0)), float(self.images.max(initial=0.0))
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise ConfigurationError(f"pixel values outside [0,1]: [{lo}, {hi}]")
        if self.ids is not None:
            self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "LabeledImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        ids = self.ids[indices] if self.ids is not None else indices.copy()
        return LabeledImageSet(self.images[indices], self.labels[indices], self.n_classes, ids=ids)

    def copy(self) -> "LabeledImageSet":
        ids = None if self.ids is None else self.ids.copy()
        return LabeledImageSet(self.images.copy(), self.labels.copy(), self.n_classes, ids=ids)


@dataclass
class ClientPartition:
    """Disjoint per-client index lists covering a dataset exactly."""

    client_indices: list[np.ndarray]
    alpha: float
    skew: np.ndarray = field(default=None)  # per-client std of class counts

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.client_indices])

    def to_json(self) -> str:
        return json.dumps(
            {
                "alpha": self.alpha,
                "clients": {str(k): [int(i) for i in ix] for k, ix in enumerate(self.client_indices)},
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ClientPartition":
        obj = json.loads(text)
        clients = obj["clients"]
        indices = [np.asarray(clients[str(k)], dtype=np.int64) for k in range(len(clients))]
        return cls(client_indices=indices, alpha=float(obj["alpha"]))


@dataclass
class PlantingSet:
    """Out-of-distribution samples used for server-side watermark planting."""

    samples: LabeledImageSet
    source_name: str
    size: int

    def __post_init__(self):
        if len(self.samples) != self.size:
            raise ConfigurationError(
                f"planting set has {len(self.samples)} samples, configured size {self.size}"
            )


def class_counts(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return np.bincount(labels, minlength=n_classes)


def dirichlet_partition(
    dataset: LabeledImageSet, n_clients: int, alpha: float, seed: int
) -> ClientPartition:
    """Label-skewed partition: each class's samples are split across clients
    with proportions drawn from Dirichlet(alpha).

    Every client ends up with at least one sample; degenerate draws are
    repaired by moving single samples out of the largest client.
    """
    if n_clients < 1:
        raise ConfigurationError("n_clients must be >= 1")
    if alpha <= 0:
        raise ConfigurationError("alpha must be > 0")
    if len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    if n_clients > len(dataset):
        raise ConfigurationError(f"n_clients={n_clients} exceeds dataset size {len(dataset)}")

    rng = rng_for(seed, "dirichlet", n_clients, alpha)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(dataset.n_classes):
        class_ix = np.flatnonzero(dataset.labels == c)
        if len(class_ix) == 0:
            continue
        rng.shuffle(class_ix)
        props = rng.dirichlet(np.full(n_clients, alpha))
        cuts = (np.cumsum(props)[:-1] * len(class_ix)).round().astype(int)
        for k, part in enumerate(np.split(class_ix, cuts)):
            buckets[k].extend(int(i) for i in part)

    # repair empty clients by pulling one sample from the current largest
    sizes = [len(b) for b in buckets]
    for k in range(n_clients):
        while not buckets[k]:
            donor = int(np.argmax(sizes))
            buckets[k].append(buckets[donor].pop())
            sizes[donor] -= 1
            sizes[k] += 1

    indices = [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]
    part = ClientPartition(client_indices=indices, alpha=alpha)
    part.skew = np.array(
        [
            float(np.std(class_counts(dataset.labels[ix], dataset.n_classes)))
            for ix in indices
        ]
    )
    return part


def skew_report(partition: ClientPartition, dataset: LabeledImageSet) -> list[tuple[int, int, float]]:
    """Per-client (client id, size, std of class counts) rows."""
    rows = []
    for k, ix in enumerate(partition.client_indices):
        counts = class_counts(dataset.labels[ix], dataset.n_classes)
        rows.append((k, len(ix), float(np.std(counts))))
    return rows


def _resize_nearest(images: np.ndarray, height: int, width: int) -> np.ndarray:
    n, c, h, w = images.shape
    rows = (np.arange(height) * h / height).astype(int)
    cols = (np.arange(width) * w / width).astype(int)
    return images[:, :, rows][:, :, :, cols]


def build_planting_set(
    source: LabeledImageSet,
    size: int,
    target_shape: tuple[int, int, int],
    seed: int,
    source_name: str = "ood",
) -> PlantingSet:
    """Uniformly subsample `size` images and adapt them to the task input shape.

    Grayscale sources are replicated across channels; spatial mismatch is
    resolved by nearest-neighbor resampling.
    """
    if len(source) == 0:
        raise ConfigurationError("planting source is empty")
    if size > len(source):
        raise ConfigurationError(f"size={size} exceeds source size {len(source)}")
    tc, th, tw = target_shape
    rng = rng_for(seed, "planting", source_name, size)
    pick = rng.choice(len(source), size=size, replace=False)
    pick.sort()
    images = source.images[pick]
    labels = source.labels[pick]

    n, c, h, w = images.shape
    if c != tc:
        if c == 1:
            images = np.repeat(images, tc, axis=1)
        else:
            raise ConfigurationError(f"cannot adapt {c}-channel source to {tc} channels")
    if (h, w) != (th, tw):
        images = _resize_nearest(images, th, tw)

    samples = LabeledImageSet(images, labels, source.n_classes, ids=pick)
    return PlantingSet(samples=samples, source_name=source_name, size=size)


def make_noise_set(
    size: int, target_shape: tuple[int, int, int], n_classes: int, seed: int
) -> PlantingSet:
    """Gaussian-noise planting set: i.i.d. N(0.5, 0.2) pixels clipped to [0,1],
    labels uniform over the task classes."""
    rng = rng_for(seed, "planting", "noise", size)
    c, h, w = target_shape
    images = np.clip(rng.normal(0.5, 0.2, size=(size, c, h, w)), 0.0, 1.0).astype(np.float32)
    labels = rng.integers(0, n_classes, size=size)
    samples = LabeledImageSet(images, labels, n_classes)
    return PlantingSet(samples=samples, source_name="noise", size=size)


# ---------------------------------------------------------------------------
# desk-scale datasets

_SHAPE_KINDS = 10


def _draw_shape(canvas: np.ndarray, kind: int, rng: np.random.Generator):
    """Paint one of ten geometric glyphs with jittered position and color."""
    h, w = canvas.shape[1:]
    color = rng.uniform(0.55, 1.0, size=3).astype(np.float32)
    cy = h // 2 + rng.integers(-2, 3)
    cx = w // 2 + rng.integers(-2, 3)
    r = int(rng.integers(3, 6))
    yy, xx = np.mgrid[0:h, 0:w]

    if kind == 0:  # filled square
        mask = (abs(yy - cy) <= r) & (abs(xx - cx) <= r)
    elif kind == 1:  # hollow square
        d = np.maximum(abs(yy - cy), abs(xx - cx))
        mask = (d <= r) & (d >= r - 1)
    elif kind == 2:  # filled disc
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif kind == 3:  # ring
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = (d2 <= r * r) & (d2 >= (r - 1.5) ** 2)
    elif kind == 4:  # horizontal bar
        mask = (abs(yy - cy) <= 1) & (abs(xx - cx) <= r + 1)
    elif kind == 5:  # vertical bar
        mask = (abs(xx - cx) <= 1) & (abs(yy - cy) <= r + 1)
    elif kind == 6:  # main diagonal stroke
        mask = (abs((yy - cy) - (xx - cx)) <= 1) & (abs(yy - cy) <= r + 1) & (abs(xx - cx) <= r + 1)
    elif kind == 7:  # anti-diagonal stroke
        mask = (abs((yy - cy) + (xx - cx)) <= 1) & (abs(yy - cy) <= r + 1) & (abs(xx - cx) <= r + 1)
    elif kind == 8:  # plus
        mask = ((abs(yy - cy) <= 1) | (abs(xx - cx) <= 1)) & (
            (abs(yy - cy) <= r) & (abs(xx - cx) <= r)
        )
    else:  # cross (x)
        mask = (
            (abs((yy - cy) - (xx - cx)) <= 1) | (abs((yy - cy) + (xx - cx)) <= 1)
        ) & ((abs(yy - cy) <= r) & (abs(xx - cx) <= r))
    canvas[:, mask] = color[:, None]


def make_shapes_dataset(n: int, seed: int, image_size: int = 16, n_classes: int = 10) -> LabeledImageSet:
    """Synthetic 10-class geometric dataset; a small conv net reaches >90%."""
    if n_classes > _SHAPE_KINDS:
        raise ConfigurationError(f"shapes dataset supports at most {_SHAPE_KINDS} classes")
    rng = rng_for(seed, "shapes", n, image_size)
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    labels = rng.integers(0, n_classes, size=n)
    for i in range(n):
        bg = rng.uniform(0.0, 0.25)
        canvas = np.full((3, image_size, image_size), bg, dtype=np.float32)
        _draw_shape(canvas, int(labels[i]), rng)
        canvas += rng.normal(0, 0.04, size=canvas.shape).astype(np.float32)
        images[i] = np.clip(canvas, 0.0, 1.0)
    return LabeledImageSet(images, labels, n_classes)


def load_digits_set(seed: int = 0) -> LabeledImageSet:
    """Handwritten-digit images (8x8 grayscale, 10 classes) from scikit-learn."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = (raw.images[:, None, :, :] / 16.0).astype(np.float32)
    rng = rng_for(seed, "digits")
    order = rng.permutation(len(images))
    return LabeledImageSet(images[order], raw.target[order], 10)


def load_array_dir(path: str) -> LabeledImageSet:
    """Load a dataset from a directory holding images.npy and labels.npy."""
    import os

    images = np.load(os.path.join(path, "images.npy"))
    labels = np.load(os.path.join(path, "labels.npy"))
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.0
    return LabeledImageSet(images, labels, int(labels.max()) + 1)


def load_task_dataset(name: str, n_train: int, n_test: int, seed: int, image_size: int = 16):
    """Return (train, test) task sets for a named source or an array directory."""
    if name == "shapes":
        train = make_shapes_dataset(n_train, seed=derive_tag(seed, "train"), image_size=image_size)
        test = make_shapes_dataset(n_test, seed=derive_tag(seed, "test"), image_size=image_size)
        return train, test
    if name == "digits":
        full = load_digits_set(seed)
        if n_train + n_test > len(full):
            raise ConfigurationError("digits has only 1797 samples")
        return full.subset(range(n_train)), full.subset(range(n_train, n_train + n_test))
    import os

    if os.path.isdir(name):
        full = load_array_dir(name)
        if n_train + n_test > len(full):
            raise ConfigurationError(f"dataset at {name} too small")
        return full.subset(range(n_train)), full.subset(range(n_train, n_train + n_test))
    raise ConfigurationError(f"unknown dataset {name!r}")


def load_ood_source(name: str, task_n_classes: int, seed: int) -> LabeledImageSet | None:
    """OOD sample source for planting sets; returns None for 'noise' (generated directly)."""
    if name == "noise":
        return None
    if name == "digits":
        return load_digits_set(seed)
    import os

    if os.path.isdir(name):
        return load_array_dir(name)
    raise ConfigurationError(f"unknown OOD source {name!r}")


def derive_tag(seed: int, tag: str) -> int:
    from .seeding import derive_seed

    return derive_seed(seed, tag)
