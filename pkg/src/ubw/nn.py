"""Model zoo, losses and the two optimisers (momentum SGD and projected ascent).

Parameters of a model live in one flat float64 vector ``w``.  During a
forward pass the vector is wrapped in a single :class:`Tensor` leaf and each
layer takes a slice of it, so ``grad(loss, w)`` is already the flat gradient
needed by the gradient-matching objective.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import container
from .data import LabeledDataset, RngStream, horizontal_flip
from .errors import ConfigError, DivergenceError, ShapeError
from .tensor import (
    Tensor,
    clamp,
    conv2d,
    grad,
    log,
    log_softmax,
    matmul,
    maxpool2d,
    no_grad,
    relu,
    softmax,
)

logger = logging.getLogger(__name__)

LOG_GUARD = 1e-12


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor.

    ``kind="mlp"``: flatten, then ``hidden`` ReLU layers, then K logits.
    ``kind="cnn"``: for each entry of ``conv_channels`` a valid 3x3 conv,
    ReLU and 2x2 max pool; flatten; ``hidden`` ReLU fc layers; K logits.
    """

    kind: str
    input_shape: tuple
    num_classes: int
    hidden: tuple = (128,)
    conv_channels: tuple = ()
    kernel: int = 3
    pool: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(s) for s in self.hidden))
        object.__setattr__(self, "conv_channels", tuple(int(s) for s in self.conv_channels))
        if self.kind not in ("mlp", "cnn"):
            raise ConfigError(f"unknown architecture kind {self.kind!r}")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.kind == "cnn" and not self.conv_channels:
            raise ConfigError("cnn needs at least one conv layer")
        if self.kind == "mlp" and self.conv_channels:
            raise ConfigError("mlp takes no conv_channels")
        if self.kind == "cnn":
            self._conv_output_shape()

    @classmethod
    def mlp(cls, input_shape, num_classes, hidden=(256,)):
        return cls("mlp", tuple(input_shape), num_classes, tuple(hidden))

    @classmethod
    def small_cnn(cls, input_shape, num_classes, conv_channels=(16, 32), hidden=(128,)):
        return cls("cnn", tuple(input_shape), num_classes, tuple(hidden), tuple(conv_channels))

    def _conv_output_shape(self):
        c, h, w = self.input_shape
        for f in self.conv_channels:
            h, w = h - self.kernel + 1, w - self.kernel + 1
            if h < self.pool or w < self.pool:
                raise ConfigError(f"input {self.input_shape} too small for {len(self.conv_channels)} conv stages")
            h, w, c = h // self.pool, w // self.pool, f
        return c, h, w

    def layers(self) -> list[tuple[str, tuple]]:
        """``(name, shape)`` of every parameter block, in storage order."""
        out = []
        if self.kind == "cnn":
            c = self.input_shape[0]
            for i, f in enumerate(self.conv_channels):
                out += [(f"conv{i}.w", (f, c, self.kernel, self.kernel)), (f"conv{i}.b", (f,))]
                c = f
            width = int(np.prod(self._conv_output_shape()))
        else:
            width = int(np.prod(self.input_shape))
        for i, h in enumerate(self.hidden):
            out += [(f"fc{i}.w", (width, h)), (f"fc{i}.b", (h,))]
            width = h
        out += [("out.w", (width, self.num_classes)), ("out.b", (self.num_classes,))]
        return out

    def slices(self) -> dict[str, tuple[slice, tuple]]:
        table, start = {}, 0
        for name, shape in self.layers():
            size = int(np.prod(shape))
            table[name] = (slice(start, start + size), shape)
            start += size
        return table

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layers())

    @property
    def last_conv_channels(self) -> int:
        if self.kind != "cnn":
            return 0
        return self.conv_channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Arch":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class ModelState:
    arch: Arch
    w: np.ndarray
    channel_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.shape != (self.arch.num_params,):
            raise ShapeError("ModelState", self.w.shape, (self.arch.num_params,),
                             detail="parameter vector does not match architecture")
        if self.channel_mask is None and self.arch.kind == "cnn":
            self.channel_mask = np.ones(self.arch.last_conv_channels)
        if self.channel_mask is not None:
            self.channel_mask = np.asarray(self.channel_mask, dtype=np.float64)

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def copy(self, **changes) -> "ModelState":
        base = ModelState(
            self.arch,
            self.w.copy(),
            None if self.channel_mask is None else self.channel_mask.copy(),
            dict(self.meta),
        )
        return replace(base, **changes) if changes else base

    def param(self, name: str) -> np.ndarray:
        sl, shape = self.arch.slices()[name]
        return self.w[sl].reshape(shape)

    def digest(self) -> str:
        h = hashlib.sha256(container.canonical_json(self.arch.to_dict()))
        h.update(self.w.tobytes())
        if self.channel_mask is not None:
            h.update(self.channel_mask.tobytes())
        return h.hexdigest()


def init_model(arch: Arch, seed: int) -> ModelState:
    """He-normal weights, zero biases, drawn from the ``init`` substream."""
    rng = RngStream(seed).substream("init")
    w = np.zeros(arch.num_params)
    for name, (sl, shape) in arch.slices().items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            w[sl] = rng.standard_normal(int(np.prod(shape))) * np.sqrt(2.0 / fan_in)
    return ModelState(arch, w, meta={"init_seed": int(seed)})


def _check_batch(model: ModelState, x: Tensor):
    if x.ndim != 4 or tuple(x.shape[1:]) != model.arch.input_shape:
        raise ShapeError("forward", x.shape, ("n",) + model.arch.input_shape)


def features(model: ModelState, x, w: Tensor | None = None, upto_last_conv: bool = False):
    """Run the conv trunk; returns the flattened features (or last conv map)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_batch(model, x)
    if w is None:
        w = Tensor(model.w)
    sl = model.arch.slices()

    def p(name):
        s, shape = sl[name]
        return w[s].reshape(shape)

    h = x
    if model.arch.kind == "cnn":
        for i in range(len(model.arch.conv_channels)):
            h = conv2d(h, p(f"conv{i}.w"), p(f"conv{i}.b"))
            h = relu(h)
            if upto_last_conv and i == len(model.arch.conv_channels) - 1:
                return h
            h = maxpool2d(h, model.arch.pool)
        if model.channel_mask is not None and np.any(model.channel_mask != 1.0):
            h = h * Tensor(model.channel_mask.reshape(1, -1, 1, 1))
    return h.reshape(x.shape[0], -1)


def forward_logits(model: ModelState, x, w: Tensor | None = None) -> Tensor:
    if w is None:
        w = Tensor(model.w)
    sl = model.arch.slices()

    def p(name):
        s, shape = sl[name]
        return w[s].reshape(shape)

    h = features(model, x, w)
    for i in range(len(model.arch.hidden)):
        h = relu(matmul(h, p(f"fc{i}.w")) + p(f"fc{i}.b"))
    return matmul(h, p("out.w")) + p("out.b")


def forward(model: ModelState, batch, w: Tensor | None = None) -> Tensor:
    """Class probabilities, shape ``(n, K)``."""
    return softmax(forward_logits(model, batch, w), axis=1)


def predict_proba(model: ModelState, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            out.append(forward(model, Tensor(images[s : s + batch_size])).data)
    return np.concatenate(out, axis=0)


def predict(model: ModelState, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Hard 1-based labels; ties go to the lowest class index."""
    return np.argmax(predict_proba(model, images, batch_size), axis=1) + 1


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 1 or labels.max() > k):
        raise ConfigError(f"labels must lie in 1..{k}, got range [{labels.min()}, {labels.max()}]")
    oh = np.zeros((labels.size, k))
    oh[np.arange(labels.size), labels - 1] = 1.0
    return oh


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean ``-log p[label]`` with ``p`` floored at 1e-12."""
    oh = _one_hot(labels, probs.shape[1])
    if oh.shape[0] != probs.shape[0]:
        raise ShapeError("cross_entropy", probs.shape, oh.shape)
    picked = (probs * Tensor(oh)).sum(axis=1)
    return -log(clamp(picked, LOG_GUARD, None)).mean()


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Same loss computed from logits through log-softmax (no guard needed)."""
    oh = _one_hot(labels, logits.shape[1])
    if oh.shape[0] != logits.shape[0]:
        raise ShapeError("cross_entropy", logits.shape, oh.shape)
    return -(log_softmax(logits, axis=1) * Tensor(oh)).sum(axis=1).mean()


def entropy_rows(probs: Tensor) -> Tensor:
    """Per-row Shannon entropy in nats, ``0 log 0 = 0`` via the 1e-12 floor."""
    return -(probs * log(clamp(probs, LOG_GUARD, None))).sum(axis=1)


# ---------------------------------------------------------------------------
# SGD with momentum
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.1
    milestones: tuple = ()
    decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    flip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch (step decay at each milestone)."""
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * self.decay**passed

    def digest(self) -> str:
        return container.sha256_hex(container.canonical_json(asdict(self)))


def sgd_step(w, velocity, g, lr, momentum, weight_decay, trainable=None):
    """One momentum step in place: ``v = mu v + g + wd w``; ``w -= lr v``."""
    d = g + weight_decay * w
    if trainable is not None:
        d = np.where(trainable, d, 0.0)
    velocity *= momentum
    velocity += d
    w -= lr * velocity


def batch_loss_and_grad(model: ModelState, images, labels, w=None):
    wt = Tensor(model.w if w is None else w, requires_grad=True)
    loss = cross_entropy_logits(forward_logits(model, Tensor(images), wt), labels)
    (g,) = grad(loss, wt)
    return loss.item(), g.data


def sgd_train(
    model: ModelState,
    data: LabeledDataset,
    cfg: SgdConfig,
    trainable: np.ndarray | None = None,
    on_epoch: Callable[[int, ModelState, dict], None] | None = None,
):
    """Minimise mean cross-entropy with momentum SGD.

    Args:
        trainable: optional boolean mask over ``w``; masked-out entries stay
            bit-identical (used for fine-tuning with frozen layers).
        on_epoch: called after every epoch with ``(epoch, model, record)``.

    Returns:
        ``(trained_model, history)`` where history holds one record per
        epoch with ``epoch``, ``lr``, ``loss`` and ``train_acc``.

    Raises:
        DivergenceError: a batch loss or gradient is not finite.
    """
    if len(data) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if data.image_shape != model.arch.input_shape:
        raise ShapeError("sgd_train", data.image_shape, model.arch.input_shape)
    rngs = RngStream(cfg.seed)
    shuffle = rngs.substream("shuffle")
    augment = rngs.substream("augment")
    out = model.copy()
    w = out.w
    velocity = np.zeros_like(w)
    mask = None if trainable is None else np.asarray(trainable, dtype=bool)
    history = []
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = shuffle.permutation(n)
        total, correct = 0.0, 0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s : s + cfg.batch_size]
            xb = data.images[idx]
            if cfg.flip:
                xb = horizontal_flip(xb, augment)
            yb = data.labels[idx]
            wt = Tensor(w, requires_grad=True)
            logits = forward_logits(out, Tensor(xb), wt)
            loss = cross_entropy_logits(logits, yb)
            (g,) = grad(loss, wt)
            lval = loss.item()
            if not np.isfinite(lval) or not np.all(np.isfinite(g.data)):
                raise DivergenceError("non-finite training loss", epoch=epoch, batch=b)
            sgd_step(w, velocity, g.data, lr, cfg.momentum, cfg.weight_decay, mask)
            total += lval * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) + 1 == yb))
        rec = {"epoch": epoch, "lr": lr, "loss": total / n, "train_acc": correct / n}
        history.append(rec)
        logger.debug("epoch %d lr %.4g loss %.5f acc %.4f", epoch, lr, rec["loss"], rec["train_acc"])
        if on_epoch is not None:
            on_epoch(epoch, out, rec)
    out.meta = dict(out.meta, train_seed=int(cfg.seed), train_config=cfg.digest())
    return out, history


# ---------------------------------------------------------------------------
# projected gradient ascent
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PgaConfig:
    step_size: float = 0.01
    steps: int = 20
    epsilon: float = 16 / 255
    clip: tuple | None = (0.0, 1.0)
    signed: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.step_size < 0:
            raise ConfigError("step_size must be >= 0")


def project(x: np.ndarray, start: np.ndarray, epsilon: float, clip) -> np.ndarray:
    """Project onto the l-inf ball around ``start`` intersected with the pixel box."""
    lo, hi = start - epsilon, start + epsilon
    if clip is not None:
        lo = np.maximum(lo, clip[0])
        hi = np.minimum(hi, clip[1])
    return np.minimum(np.maximum(x, lo), hi)


def pga_ascend(
    objective: Callable[[Tensor], Tensor],
    start: np.ndarray,
    cfg: PgaConfig,
    on_step: Callable[[int, float], None] | None = None,
    anchor: np.ndarray | None = None,
) -> np.ndarray:
    """Maximise ``objective`` over the l-inf ball of radius ``epsilon``.

    Each step is ``x <- P(x + step_size * g)`` (or ``sign(g)`` when
    ``cfg.signed``), where ``P`` is :func:`project` onto the ball around
    ``anchor`` (default: ``start``).  Every iterate is feasible.  ``on_step``
    receives ``(step, objective value)``.
    """
    start = np.asarray(start, dtype=np.float64)
    anchor = start if anchor is None else np.asarray(anchor, dtype=np.float64)
    if anchor.shape != start.shape:
        raise ShapeError("pga_ascend", start.shape, anchor.shape)
    x = project(start.copy(), anchor, cfg.epsilon, cfg.clip)
    for step in range(cfg.steps):
        v = Tensor(x, requires_grad=True)
        obj = objective(v)
        (g,) = grad(obj, v, allow_unused=True)
        gd = g.data
        if not np.all(np.isfinite(gd)):
            raise DivergenceError(f"non-finite gradient in projected ascent step {step}")
        direction = np.sign(gd) if cfg.signed else gd
        x = project(x + cfg.step_size * direction, anchor, cfg.epsilon, cfg.clip)
        if on_step is not None:
            on_step(step, obj.item())
    return x


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: ModelState, path, config_digest: str | None = None) -> str:
    header = {"arch": model.arch.to_dict(), "meta": model.meta, "config_digest": config_digest}
    arrays = {"w": model.w}
    if model.channel_mask is not None:
        arrays["channel_mask"] = model.channel_mask
    return container.write(path, "checkpoint", header, arrays)


def load_checkpoint(path) -> ModelState:
    _, header, arrays = container.read(path, expect_kind="checkpoint")
    return ModelState(
        Arch.from_dict(header["arch"]), arrays["w"], arrays.get("channel_mask"), header.get("meta", {})
    )
