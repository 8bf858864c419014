"""Classifier contract, model states with BatchNorm side-channel, and SGD training."""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
from torch.nn.modules.batchnorm import _BatchNorm
from torch.nn.utils import parameters_to_vector

from .data import LabeledImageSet
from .errors import ArchitectureError, ConfigurationError, TrainingDivergenceError
from .seeding import derive_seed, rng_for


@dataclass(frozen=True)
class BnLayerStats:
    mean: np.ndarray
    var: np.ndarray
    count: int


@dataclass(frozen=True)
class ModelState:
    """Flat trainable parameters plus per-layer BatchNorm running statistics."""

    params: np.ndarray
    bn_stats: tuple[BnLayerStats, ...]

    def __post_init__(self):
        for layer in self.bn_stats:
            if np.any(layer.var < 0):
                raise ArchitectureError("BatchNorm variance must be nonnegative")


@dataclass
class TrainConfig:
    learning_rate: float = 0.03
    epochs: int = 2
    batch_size: int = 32
    momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigurationError("momentum must be in [0, 1)")


def delta(state_a: ModelState, state_b: ModelState) -> np.ndarray:
    """Elementwise a - b over trainable params; BN stats stay out of the delta."""
    if state_a.params.shape != state_b.params.shape:
        raise ArchitectureError(
            f"parameter length mismatch: {state_a.params.shape} vs {state_b.params.shape}"
        )
    return state_a.params.astype(np.float64) - state_b.params.astype(np.float64)


# ---------------------------------------------------------------------------
# architectures


class LinearNet(nn.Module):
    def __init__(self, in_features: int, n_classes: int):
        super().__init__()
        self.head = nn.Linear(in_features, n_classes)

    def forward(self, x):
        return self.head(x.flatten(1))


class RefMLP(nn.Module):
    """Two-layer reference net used for gradient verification."""

    def __init__(self, in_features: int, n_classes: int, hidden: int = 24):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x.flatten(1))))


class SmallConvNet(nn.Module):
    """Two conv+BN+ReLU blocks with pooling, one hidden FC, C-way head."""

    def __init__(self, channels: int, size: int, n_classes: int, width: int = 16, hidden: int = 64):
        super().__init__()
        if size % 4 != 0:
            raise ConfigurationError("small_convnet needs an image size divisible by 4")
        self.conv1 = nn.Conv2d(channels, width, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(2 * width)
        self.pool = nn.MaxPool2d(2)
        self.fc1 = nn.Linear(2 * width * (size // 4) ** 2, hidden)
        self.head = nn.Linear(hidden, n_classes)

    def forward(self, x):
        x = self.pool(torch.relu(self.bn1(self.conv1(x))))
        x = self.pool(torch.relu(self.bn2(self.conv2(x))))
        x = torch.relu(self.fc1(x.flatten(1)))
        return self.head(x)


class Classifier:
    """Deterministic-eval classifier over a torch module.

    Parameters travel as one flat vector; BatchNorm running stats are a
    separately exported/imported side channel.
    """

    def __init__(self, module: nn.Module, arch: str, input_shape, n_classes: int, dtype=torch.float32):
        self.module = module.to(dtype)
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.dtype = dtype
        self.module.eval()

    # -- tensors in/out -----------------------------------------------------

    def _to_tensor(self, images: np.ndarray) -> torch.Tensor:
        t = torch.as_tensor(images, dtype=self.dtype)
        if t.ndim == 3:
            t = t[None]
        return t

    def forward(self, images: np.ndarray, train_mode: bool = False) -> np.ndarray:
        """Logit rows; train_mode runs BatchNorm in training statistics mode."""
        t = self._to_tensor(images)
        self.module.train(train_mode)
        with torch.no_grad():
            out = self.module(t)
        self.module.eval()
        return out.numpy()

    def predict(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        outs = []
        for i in range(0, len(images), batch_size):
            outs.append(np.argmax(self.forward(images[i : i + batch_size]), axis=1))
        return np.concatenate(outs) if outs else np.empty(0, dtype=np.int64)

    # -- objectives and gradients --------------------------------------------

    def loss(self, images: np.ndarray, labels: np.ndarray, objective=None, train_mode: bool = False) -> float:
        obj = objective or cross_entropy
        x = self._to_tensor(images)
        y = torch.as_tensor(labels, dtype=torch.long)
        self.module.train(train_mode)
        with torch.no_grad():
            value = obj(self.module, x, y)
        self.module.eval()
        return float(value)

    def grad(self, images: np.ndarray, labels: np.ndarray, objective=None) -> np.ndarray:
        """Flat eval-mode gradient of the objective over the batch."""
        obj = objective or cross_entropy
        x = self._to_tensor(images)
        y = torch.as_tensor(labels, dtype=torch.long)
        self.module.zero_grad(set_to_none=True)
        value = obj(self.module, x, y)
        value.backward()
        grads = [
            p.grad.detach().flatten() if p.grad is not None else torch.zeros(p.numel(), dtype=self.dtype)
            for p in self.module.parameters()
        ]
        self.module.zero_grad(set_to_none=True)
        return torch.cat(grads).numpy().copy()

    # -- state ----------------------------------------------------------------

    def _bn_modules(self) -> list[_BatchNorm]:
        return [m for m in self.module.modules() if isinstance(m, _BatchNorm)]

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def get_params(self) -> np.ndarray:
        return parameters_to_vector(self.module.parameters()).detach().numpy().copy()

    def set_params(self, flat: np.ndarray):
        if flat.shape != (self.n_params,):
            raise ArchitectureError(f"expected {self.n_params} params, got {flat.shape}")
        # copy into the existing tensors: vector_to_parameters would rebind
        # param.data as views aliasing the caller's buffer
        vec = torch.as_tensor(flat, dtype=self.dtype)
        offset = 0
        with torch.no_grad():
            for p in self.module.parameters():
                n = p.numel()
                p.copy_(vec[offset : offset + n].view_as(p))
                offset += n

    def export_bn(self) -> tuple[BnLayerStats, ...]:
        stats = []
        for m in self._bn_modules():
            stats.append(
                BnLayerStats(
                    mean=m.running_mean.detach().numpy().copy(),
                    var=m.running_var.detach().numpy().copy(),
                    count=int(m.num_batches_tracked),
                )
            )
        return tuple(stats)

    def import_bn(self, bn_stats: tuple[BnLayerStats, ...]):
        mods = self._bn_modules()
        if len(mods) != len(bn_stats):
            raise ArchitectureError(
                f"model has {len(mods)} BatchNorm layers, stats carry {len(bn_stats)}"
            )
        for m, layer in zip(mods, bn_stats):
            if m.running_mean.shape[0] != layer.mean.shape[0]:
                raise ArchitectureError("BatchNorm width mismatch")
            m.running_mean.copy_(torch.as_tensor(layer.mean, dtype=self.dtype))
            m.running_var.copy_(torch.as_tensor(layer.var, dtype=self.dtype))
            m.num_batches_tracked.fill_(layer.count)

    @property
    def head_bias_slice(self) -> slice:
        """Flat-vector slice of the output layer's bias (the last parameter)."""
        sizes = [p.numel() for p in self.module.parameters()]
        return slice(sum(sizes[:-1]), sum(sizes))

    @property
    def head_slice(self) -> slice:
        """Flat-vector slice of the output layer (weight and bias)."""
        sizes = [p.numel() for p in self.module.parameters()]
        return slice(sum(sizes[:-2]), sum(sizes))

    def get_state(self) -> ModelState:
        return ModelState(params=self.get_params(), bn_stats=self.export_bn())

    def set_state(self, state: ModelState):
        self.set_params(np.asarray(state.params, dtype=self.get_params().dtype))
        self.import_bn(state.bn_stats)

    def clone(self) -> "Classifier":
        return copy.deepcopy(self)


def cross_entropy(module: nn.Module, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return nn.functional.cross_entropy(module(x), y)


def build_model(
    arch: str,
    input_shape,
    n_classes: int,
    seed: int,
    dtype: str = "float32",
    width: int = 16,
    hidden: int = 64,
) -> Classifier:
    c, h, w = input_shape
    torch.manual_seed(derive_seed(seed, "init", arch, c, h, w, n_classes))
    if arch == "linear":
        module = LinearNet(c * h * w, n_classes)
    elif arch == "ref_mlp":
        module = RefMLP(c * h * w, n_classes, hidden=hidden)
    elif arch == "small_convnet":
        module = SmallConvNet(c, h, n_classes, width=width, hidden=hidden)
    else:
        raise ConfigurationError(f"unknown architecture {arch!r}")
    torch_dtype = {"float32": torch.float32, "float64": torch.float64}[dtype]
    return Classifier(module, arch, input_shape, n_classes, dtype=torch_dtype)


# ---------------------------------------------------------------------------
# training


def sgd_train(
    model: Classifier,
    data: LabeledImageSet,
    cfg: TrainConfig,
    seed: int,
    objective=None,
    batch_transform=None,
    extra_loss=None,
    round_index=None,
) -> ModelState:
    """SGD with momentum over seeded-shuffled minibatches; returns the final state.

    `batch_transform(x, y, epoch, batch_index)` may rewrite each minibatch
    (poisoning); `extra_loss(module, epoch, batch_index)` adds auxiliary terms.
    BatchNorm layers run in training mode, so running stats update even at
    learning rate zero.
    """
    if len(data) == 0:
        raise ConfigurationError("training data is empty")
    obj = objective or cross_entropy
    opt = torch.optim.SGD(
        model.module.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum
    )
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng_for(seed, "order", epoch).permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            pick = order[start : start + cfg.batch_size]
            x, y = data.images[pick], data.labels[pick]
            if batch_transform is not None:
                x, y = batch_transform(x, y, epoch, b)
            xt = model._to_tensor(x)
            yt = torch.as_tensor(y, dtype=torch.long)
            model.module.train(True)
            opt.zero_grad(set_to_none=True)
            loss = obj(model.module, xt, yt)
            if extra_loss is not None:
                aux = extra_loss(model.module, epoch, b)
                if aux is not None:
                    loss = loss + aux
            if not torch.isfinite(loss):
                model.module.eval()
                raise TrainingDivergenceError(
                    f"non-finite loss {float(loss.detach())}",
                    round_index=round_index, batch_index=b,
                )
            loss.backward()
            opt.step()
    model.module.eval()
    return model.get_state()


def finite_difference_grad(
    model: Classifier,
    images: np.ndarray,
    labels: np.ndarray,
    objective=None,
    coords: np.ndarray | None = None,
    eps: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient over chosen coordinates (all by default).

    Independent of autograd; used as the oracle for gradient verification.
    """
    base = model.get_params().astype(np.float64)
    if coords is None:
        coords = np.arange(base.size)
    vals = np.empty(coords.size, dtype=np.float64)
    work = base.copy()
    for i, c in enumerate(coords):
        step = eps * max(1.0, abs(base[c]))
        work[c] = base[c] + step
        model.set_params(work)
        up = model.loss(images, labels, objective=objective)
        work[c] = base[c] - step
        model.set_params(work)
        down = model.loss(images, labels, objective=objective)
        work[c] = base[c]
        vals[i] = (up - down) / (2 * step)
    model.set_params(base)
    return vals, coords


# ---------------------------------------------------------------------------
# serialization: little-endian, length-prefixed float32 vectors

_MAGIC = b"FWM1"


def state_to_bytes(state: ModelState) -> bytes:
    out = [_MAGIC]
    params = np.asarray(state.params, dtype="<f4")
    out.append(struct.pack("<I", params.size))
    out.append(params.tobytes())
    out.append(struct.pack("<I", len(state.bn_stats)))
    for layer in state.bn_stats:
        mean = np.asarray(layer.mean, dtype="<f4")
        var = np.asarray(layer.var, dtype="<f4")
        out.append(struct.pack("<I", mean.size))
        out.append(mean.tobytes())
        out.append(var.tobytes())
        out.append(struct.pack("<Q", layer.count))
    return b"".join(out)


def state_from_bytes(blob: bytes) -> ModelState:
    if blob[:4] != _MAGIC:
        raise ArchitectureError("not a model-state blob")
    off = 4
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = np.frombuffer(blob, dtype="<f4", count=n, offset=off).copy()
    off += 4 * n
    (layers,) = struct.unpack_from("<I", blob, off)
    off += 4
    bn = []
    for _ in range(layers):
        (m,) = struct.unpack_from("<I", blob, off)
        off += 4
        mean = np.frombuffer(blob, dtype="<f4", count=m, offset=off).copy()
        off += 4 * m
        var = np.frombuffer(blob, dtype="<f4", count=m, offset=off).copy()
        off += 4 * m
        (count,) = struct.unpack_from("<Q", blob, off)
        off += 8
        bn.append(BnLayerStats(mean=mean, var=var, count=count))
    return ModelState(params=params, bn_stats=tuple(bn))
