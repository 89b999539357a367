"""Poisoned-image generators and the dataset watermarking methods.

* :func:`poison_ubw_p`     poisoned-label untargeted watermark (labels resampled)
* :func:`poison_targeted`  BadNets / Blended baselines (labels set to ``y_t``)
* :func:`optimize_ubw_c`   clean-label untargeted watermark, bi-level with
  gradient matching between training perturbations and triggered test images
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import container
from .data import LabeledDataset, RngStream, SplitPlan, poison_count, select_subset
from .errors import ConfigError, DegenerateGradientError, DivergenceError, ShapeError
from .nn import (
    ModelState,
    PgaConfig,
    SgdConfig,
    cross_entropy_logits,
    entropy_rows,
    forward_logits,
    init_model,
    pga_ascend,
    sgd_train,
)
from .tensor import Tensor, grad, softmax, sqrt

logger = logging.getLogger(__name__)

KINDS = ("patch", "blended", "additive")


@dataclass
class TriggerSpec:
    """Description of a poisoned-image generator.

    ``patch`` and ``blended`` both compute ``(1 - mask) * x + mask * pattern``;
    a patch mask is binary, a blended mask is fractional.  ``additive``
    computes ``clip(x + theta, 0, 1)`` with one perturbation per poisoned
    sample (``perturbations[k]`` belongs to dataset index ``indices[k]``) or a
    single shared perturbation.
    """

    kind: str
    mask: np.ndarray | None = None
    pattern: np.ndarray | None = None
    perturbations: np.ndarray | None = None
    indices: tuple = ()
    epsilon: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown trigger kind {self.kind!r}")
        if self.kind in ("patch", "blended"):
            if self.mask is None or self.pattern is None:
                raise ConfigError(f"{self.kind} trigger needs mask and pattern")
            self.mask = np.asarray(self.mask, dtype=np.float64)
            self.pattern = np.asarray(self.pattern, dtype=np.float64)
            if self.mask.shape != self.pattern.shape:
                raise ShapeError("trigger", self.mask.shape, self.pattern.shape)
            if self.pattern.min() < 0 or self.pattern.max() > 1:
                raise ConfigError("trigger pattern must lie in [0, 1]")
            if self.kind == "patch" and not np.all((self.mask == 0) | (self.mask == 1)):
                raise ConfigError("patch mask must be {0,1}-valued")
            if self.mask.min() < 0 or self.mask.max() > 1:
                raise ConfigError("blend mask must lie in [0, 1]")
        else:
            if self.perturbations is None:
                raise ConfigError("additive trigger needs perturbations")
            self.perturbations = np.asarray(self.perturbations, dtype=np.float64)
            self.indices = tuple(int(i) for i in self.indices)
            if self.indices and len(self.indices) != len(self.perturbations):
                raise ConfigError("one perturbation per index is required")
            if self.epsilon is not None and np.max(np.abs(self.perturbations), initial=0.0) > self.epsilon + 1e-12:
                raise ConfigError("perturbation exceeds its l-inf budget")

    @property
    def shape(self) -> tuple:
        if self.kind == "additive":
            return tuple(self.perturbations.shape[-3:])
        return tuple(self.mask.shape)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": self.name}
        if self.kind == "additive":
            d.update(
                perturbations_shape=list(self.perturbations.shape),
                perturbations_sha256=container.sha256_hex(self.perturbations.tobytes()),
                indices=list(self.indices),
                epsilon=self.epsilon,
            )
        else:
            d.update(shape=list(self.mask.shape), mask=self.mask.ravel().tolist(),
                     pattern=self.pattern.ravel().tolist())
        return d

    @classmethod
    def from_dict(cls, d: dict, perturbations: np.ndarray | None = None) -> "TriggerSpec":
        if d["kind"] == "additive":
            if perturbations is None:
                raise ConfigError("additive trigger requires its perturbation array")
            return cls("additive", perturbations=perturbations, indices=tuple(d.get("indices", ())),
                       epsilon=d.get("epsilon"), name=d.get("name", ""))
        shape = tuple(d["shape"])
        return cls(d["kind"], np.array(d["mask"]).reshape(shape), np.array(d["pattern"]).reshape(shape),
                   name=d.get("name", ""))

    def digest(self) -> str:
        if self.kind == "additive":
            return container.sha256_hex(b"additive", np.asarray(self.indices, dtype=np.int64).tobytes(),
                                        self.perturbations.tobytes())
        return container.sha256_hex(self.kind.encode(), self.mask.tobytes(), self.pattern.tobytes())


def patch_trigger(image_shape, size: int = 4, corner: str = "bottom-right", pattern: str = "checker") -> TriggerSpec:
    """A ``size x size`` black-and-white square stamped in a corner."""
    c, h, w = image_shape
    if size > min(h, w):
        raise ConfigError(f"patch of size {size} does not fit a {h}x{w} image")
    mask = np.zeros(image_shape)
    pat = np.zeros(image_shape)
    rows = slice(h - size, h) if corner.startswith("bottom") else slice(0, size)
    cols = slice(w - size, w) if corner.endswith("right") else slice(0, size)
    mask[:, rows, cols] = 1.0
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if pattern == "checker":
        square = ((ii + jj) % 2 == 0).astype(float)
    elif pattern == "inverse-checker":
        square = ((ii + jj) % 2 == 1).astype(float)
    elif pattern == "white":
        square = np.ones((size, size))
    elif pattern == "black":
        square = np.zeros((size, size))
    else:
        raise ConfigError(f"unknown patch pattern {pattern!r}")
    pat[:, rows, cols] = square
    return TriggerSpec("patch", mask, pat, name=f"patch{size}-{corner}-{pattern}")


def blended_trigger(image_shape, alpha: float = 0.1, seed: int = 0) -> TriggerSpec:
    """Uniform-noise pattern blended with a constant ratio ``alpha``."""
    if not 0 <= alpha <= 1:
        raise ConfigError(f"blend ratio must lie in [0, 1], got {alpha}")
    pattern = RngStream(seed).substream("triggers/blended").uniform(0, 1, size=image_shape)
    return TriggerSpec("blended", np.full(image_shape, float(alpha)), pattern, name=f"blended{alpha}")


def apply_trigger(x: np.ndarray, spec: TriggerSpec, index: int | None = None) -> np.ndarray:
    """Apply a generator to one image ``(C,H,W)`` or a batch ``(n,C,H,W)``.

    For a per-sample additive trigger pass the dataset ``index`` of the image
    (only valid for a single image).
    """
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape[-3:]) != spec.shape:
        raise ShapeError("apply_trigger", x.shape, spec.shape)
    if spec.kind == "additive":
        theta = spec.perturbations
        if spec.indices:
            if index is None:
                raise ConfigError("per-sample additive trigger needs the sample index")
            try:
                theta = spec.perturbations[spec.indices.index(int(index))]
            except ValueError:
                return x.copy()
        return np.clip(x + theta, 0.0, 1.0)
    return (1.0 - spec.mask) * x + spec.mask * spec.pattern


# ---------------------------------------------------------------------------
# poisoning plans
# ---------------------------------------------------------------------------

ACTIONS = {"ubw-p": "resample", "ubw-c": "keep", "badnets": "target", "blended": "target"}


@dataclass
class PoisonPlan:
    method: str
    indices: tuple
    new_labels: tuple
    gamma: float | None
    trigger_digest: str
    action: str = field(init=False)

    def __post_init__(self):
        if self.method not in ACTIONS:
            raise ConfigError(f"unknown watermark method {self.method!r}")
        self.action = ACTIONS[self.method]
        if len(self.indices) != len(self.new_labels):
            raise ConfigError("one label action per selected index is required")

    def check(self, data: LabeledDataset, target: int | None = None) -> None:
        """Assert the per-index label actions agree with the method."""
        old = data.labels[list(self.indices)] if self.indices else np.array([], dtype=int)
        new = np.asarray(self.new_labels, dtype=np.int64)
        if self.action == "keep" and not np.array_equal(old, new):
            raise ConfigError("clean-label plan modifies labels")
        if self.action == "target" and target is not None and np.any(new != target):
            raise ConfigError("targeted plan has labels other than the target")

    def to_dict(self) -> dict:
        return {"method": self.method, "action": self.action, "indices": list(self.indices),
                "new_labels": list(self.new_labels), "gamma": self.gamma,
                "trigger_digest": self.trigger_digest}

    @classmethod
    def from_dict(cls, d: dict) -> "PoisonPlan":
        return cls(d["method"], tuple(d["indices"]), tuple(d["new_labels"]), d.get("gamma"), d["trigger_digest"])


def _poisoned(data, plan: PoisonPlan, images, labels, trigger: TriggerSpec, seed, extra=None):
    prov = {
        "kind": "poisoned",
        "method": plan.method,
        "gamma": plan.gamma,
        "seed": seed,
        "trigger": trigger.to_dict(),
        "trigger_digest": trigger.digest(),
        "plan": plan.to_dict(),
        "parent_digest": data.digest(),
    }
    if extra:
        prov.update(extra)
    return data.replace(images=images, labels=labels, provenance=prov)


def _as_streams(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(int(rng))


def poison_ubw_p(data: LabeledDataset, gamma, trigger: TriggerSpec, rng, exclude_true_label: bool = False) -> LabeledDataset:
    """Stamp the trigger on ``floor(gamma*n)`` samples and draw their labels uniformly from 1..K.

    The ground-truth label may be drawn again, as in the uniform formula;
    ``exclude_true_label`` draws from the other K-1 classes instead.
    """
    streams = _as_streams(rng)
    plan = select_subset(data, gamma, streams.substream("selection"), seed=streams.seed)
    idx = np.asarray(plan.indices, dtype=np.int64)
    label_rng = streams.substream("labels")
    k = data.num_classes
    if exclude_true_label:
        offs = label_rng.integers(1, k, size=idx.size)
        new = (data.labels[idx] - 1 + offs) % k + 1
    else:
        new = label_rng.integers(1, k + 1, size=idx.size)
    images = data.images.copy()
    labels = data.labels.copy()
    images[idx] = apply_trigger(images[idx], trigger) if idx.size else images[idx]
    labels[idx] = new
    pp = PoisonPlan("ubw-p", tuple(int(i) for i in idx), tuple(int(v) for v in new),
                    plan.fraction, trigger.digest())
    return _poisoned(data, pp, images, labels, trigger, streams.seed, {"exclude_true_label": exclude_true_label})


def poison_targeted(data: LabeledDataset, gamma, trigger: TriggerSpec, target: int, rng,
                    method: str = "badnets") -> LabeledDataset:
    """BadNets (patch) or Blended poisoning: triggered samples relabelled to ``target``."""
    if not 1 <= int(target) <= data.num_classes:
        raise ConfigError(f"target label must lie in 1..{data.num_classes}, got {target}")
    if method not in ("badnets", "blended"):
        raise ConfigError(f"unknown targeted method {method!r}")
    streams = _as_streams(rng)
    plan = select_subset(data, gamma, streams.substream("selection"), seed=streams.seed)
    idx = np.asarray(plan.indices, dtype=np.int64)
    images = data.images.copy()
    labels = data.labels.copy()
    if idx.size:
        images[idx] = apply_trigger(images[idx], trigger)
    labels[idx] = int(target)
    pp = PoisonPlan(method, tuple(int(i) for i in idx), (int(target),) * idx.size, plan.fraction, trigger.digest())
    return _poisoned(data, pp, images, labels, trigger, streams.seed, {"target": int(target)})


# ---------------------------------------------------------------------------
# UBW-C: gradient matching
# ---------------------------------------------------------------------------


def flat_loss_grad(model: ModelState, images, labels, lam: float = 0.0, create_graph: bool = False,
                   w: np.ndarray | None = None) -> Tensor:
    """Flat ``d/dw`` of mean[CE + lam * H] over a batch.

    ``images`` may be a Tensor taking part in a graph; with
    ``create_graph=True`` the returned gradient stays differentiable with
    respect to it.
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    wt = Tensor(model.w if w is None else w, requires_grad=True)
    logits = forward_logits(model, x, wt)
    loss = cross_entropy_logits(logits, labels)
    if lam:
        loss = loss + lam * entropy_rows(softmax(logits, axis=1)).mean()
    (g,) = grad(loss, wt, create_graph=create_graph)
    return g


def cosine(a: Tensor, b: Tensor) -> Tensor:
    na = sqrt((a * a).sum())
    nb = sqrt((b * b).sum())
    if na.item() == 0.0 or nb.item() == 0.0:
        raise DegenerateGradientError("cosine of a zero-norm gradient")
    return (a * b).sum() / (na * nb)


def grad_matching_objective(model: ModelState, poison_images, poison_labels, trigger_images, trigger_labels,
                            lam: float, adversarial: bool = False, target_grad: np.ndarray | None = None) -> Tensor:
    """Cosine between the poison-batch gradient and the triggered-batch gradient.

    ``L_t`` is the mean cross-entropy of the (perturbed) poison batch and
    ``L_i`` the mean of cross-entropy plus ``lam`` times prediction entropy of
    the triggered batch, both evaluated at the current weights.  The result is
    differentiable with respect to ``poison_images`` when it is a Tensor.

    With ``adversarial=True`` the reference direction is ``-grad L_i``: a
    descent step on the poisons then *raises* ``L_i``, which is the direction
    the clean-label optimiser needs.  ``target_grad`` short-circuits the
    reference computation (it is constant with respect to the poisons).
    """
    if len(poison_labels) == 0 or (target_grad is None and len(trigger_labels) == 0):
        raise ConfigError("both batches must be nonempty")
    if target_grad is None:
        target_grad = flat_loss_grad(model, trigger_images, trigger_labels, lam).data
        if adversarial:
            target_grad = -target_grad
    gt = flat_loss_grad(model, poison_images, poison_labels, create_graph=True)
    return cosine(gt, Tensor(target_grad))


def per_sample_grad_norms(model: ModelState, data: LabeledDataset) -> np.ndarray:
    norms = np.empty(len(data))
    for i in range(len(data)):
        g = flat_loss_grad(model, data.images[i : i + 1], data.labels[i : i + 1]).data
        norms[i] = np.sqrt(np.dot(g, g))
    return norms


def select_by_gradient_norm(model: ModelState, data: LabeledDataset, m: int, norms: np.ndarray | None = None) -> list[int]:
    """Indices of the ``m`` samples with the largest per-sample loss-gradient norm.

    Ties keep ascending index order.
    """
    n = len(data)
    if not 0 <= m <= n:
        raise ConfigError(f"cannot select {m} of {n} samples")
    if norms is None:
        norms = per_sample_grad_norms(model, data)
    order = np.argsort(-norms, kind="stable")
    return [int(i) for i in order[:m]]


@dataclass(frozen=True)
class BilevelConfig:
    lam: float = 2.0
    rounds: int = 3
    lower_epochs: int = 10
    pga: PgaConfig = field(default_factory=lambda: PgaConfig(step_size=0.01, steps=20, epsilon=16 / 255, signed=True))
    source_class: int = 1
    gamma: float = 0.1
    selection: str = "gradient-norm"
    lower: SgdConfig = field(default_factory=lambda: SgdConfig(lr=0.05, epochs=10, batch_size=64))
    source_batch: int = 0
    lower_init: str = "warm"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.selection not in ("gradient-norm", "random"):
            raise ConfigError(f"unknown selection rule {self.selection!r}")
        if not 0 < self.gamma < 1:
            raise ConfigError(f"poisoning rate must lie in (0, 1), got {self.gamma}")
        if self.lower_epochs < 0:
            raise ConfigError("lower_epochs must be >= 0")
        if self.lower_init not in ("scratch", "warm"):
            raise ConfigError(f"lower_init must be 'scratch' or 'warm', got {self.lower_init!r}")


@dataclass
class UbwCResult:
    dataset: LabeledDataset
    trigger: TriggerSpec
    model: ModelState
    history: list


def optimize_ubw_c(data: LabeledDataset, cfg: BilevelConfig, trigger_inference: TriggerSpec, rng,
                   model: ModelState) -> UbwCResult:
    """Clean-label untargeted watermark by alternating upper/lower problems.

    Args:
        data: benign training set.
        cfg: bi-level settings (rounds, PGA budget, lambda, source class, ...).
        trigger_inference: visible generator used at verification time.
        rng: seed or :class:`RngStream`.
        model: benign-pretrained starting model.

    Each round (1) computes the reference gradient of the triggered
    source-class loss at the current weights, (2) runs projected ascent on
    the poisoned images to maximise the gradient cosine, and (3) except after
    the final round, trains the model on the current poisoned set, from a
    fresh initialisation (``lower_init="scratch"``) or from the current
    weights (``"warm"``).  Labels are never changed and every perturbation stays inside the l-inf ball.
    """
    streams = _as_streams(rng)
    if not 1 <= cfg.source_class <= data.num_classes:
        raise ConfigError(f"source class must lie in 1..{data.num_classes}")
    m = poison_count(cfg.gamma, len(data))
    if cfg.selection == "gradient-norm":
        idx = np.asarray(sorted(select_by_gradient_norm(model, data, m)), dtype=np.int64)
    else:
        idx = np.asarray(select_subset(data, cfg.gamma, streams.substream("selection")).indices, dtype=np.int64)
    base = data.images[idx]
    labels = data.labels[idx]
    poisoned_x = base.copy()
    source = data.of_class(cfg.source_class)
    source_x = apply_trigger(source.images, trigger_inference)
    source_y = source.labels
    batch_rng = streams.substream("source-batches")
    history = []
    current = model.copy()
    for r in range(cfg.rounds):
        if cfg.source_batch and cfg.source_batch < len(source_y):
            pick = np.sort(batch_rng.choice(len(source_y), cfg.source_batch, replace=False))
            sx, sy = source_x[pick], source_y[pick]
        else:
            sx, sy = source_x, source_y
        target = -flat_loss_grad(current, sx, sy, cfg.lam).data
        values = []

        def objective(v, _model=current, _target=target):
            return grad_matching_objective(_model, v, labels, None, (), cfg.lam, target_grad=_target)

        start_val = objective(Tensor(poisoned_x)).item() if len(idx) else float("nan")
        if len(idx):
            poisoned_x = pga_ascend(objective, poisoned_x, cfg.pga, on_step=lambda s, v: values.append(v),
                                    anchor=base)
        end_val = objective(Tensor(poisoned_x)).item() if len(idx) else float("nan")
        history.append({"round": r, "cosine_start": start_val, "cosine_end": end_val, "trace": values})
        logger.info("ubw-c round %d: cosine %.4f -> %.4f", r, start_val, end_val)
        if r < cfg.rounds - 1 and cfg.lower_epochs > 0:
            images = data.images.copy()
            images[idx] = poisoned_x
            seed_r = int(streams.substream(f"lower/{r}").integers(2**31))
            lower = SgdConfig(**{**cfg.lower.__dict__, "epochs": cfg.lower_epochs, "seed": seed_r})
            start = init_model(model.arch, seed_r) if cfg.lower_init == "scratch" else current
            try:
                current, _ = sgd_train(start, data.replace(images=images), lower)
            except DivergenceError as exc:
                raise DivergenceError("lower-level training diverged", epoch=exc.epoch, batch=exc.batch,
                                      round_index=r) from exc
    theta = poisoned_x - base
    trigger_train = TriggerSpec("additive", perturbations=theta, indices=tuple(int(i) for i in idx),
                                epsilon=cfg.pga.epsilon, name="ubw-c")
    images = data.images.copy()
    images[idx] = poisoned_x
    pp = PoisonPlan("ubw-c", tuple(int(i) for i in idx), tuple(int(v) for v in labels), cfg.gamma,
                    trigger_inference.digest())
    out = _poisoned(
        data, pp, images, data.labels.copy(), trigger_inference, streams.seed,
        {"lambda": cfg.lam, "source_class": cfg.source_class, "epsilon": cfg.pga.epsilon,
         "training_trigger": trigger_train.to_dict(), "training_trigger_digest": trigger_train.digest(),
         "rounds": cfg.rounds},
    )
    return UbwCResult(out, trigger_train, current, history)
