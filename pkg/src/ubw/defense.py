"""Removal attacks against a watermarked model: fine-tuning and channel pruning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, RngStream, select_subset
from .errors import ConfigError, UnsupportedArchError
from .metrics import evaluate_watermark
from .nn import ModelState, SgdConfig, features, sgd_train
from .tensor import no_grad
from .watermark import TriggerSpec

logger = logging.getLogger(__name__)

TRACE_FIELDS = ("defense", "parameter", "ba", "asr_a", "asr_c", "d_p")


def trainable_mask(model: ModelState, frozen_depth: int | None = None) -> np.ndarray:
    """Boolean mask over ``model.w`` marking the parameters fine-tuning may change.

    For a CNN every conv block is frozen and all fully-connected layers train.
    For an MLP the first ``frozen_depth`` hidden layers are frozen (default:
    all hidden layers, so only the output layer trains).
    """
    arch = model.arch
    mask = np.zeros(arch.num_params, dtype=bool)
    if arch.kind == "cnn":
        frozen = {name for name, _ in arch.layers() if name.startswith("conv")}
    else:
        depth = len(arch.hidden) if frozen_depth is None else int(frozen_depth)
        if not 0 <= depth <= len(arch.hidden):
            raise ConfigError(f"frozen_depth must lie in 0..{len(arch.hidden)}, got {depth}")
        frozen = {f"fc{i}.{p}" for i in range(depth) for p in "wb"}
    for name, (sl, _) in arch.slices().items():
        mask[sl] = name not in frozen
    return mask


@dataclass
class DefenseRun:
    """Metrics of one defense, recorded at every grid point (ascending)."""

    kind: str
    params: dict
    before: dict
    points: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = [{"defense": self.kind, "parameter": "baseline", **_metric_cols(self.before)}]
        for value, metrics in self.points:
            out.append({"defense": self.kind, "parameter": value, **_metric_cols(metrics)})
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
            wr.writeheader()
            for row in self.rows():
                wr.writerow({k: "" if v is None else v for k, v in row.items()})

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "before": self.before,
                "points": [{"parameter": v, **m} for v, m in self.points]}


def _metric_cols(m: dict) -> dict:
    return {k: m.get(k) for k in ("ba", "asr_a", "asr_c", "d_p")}


def fine_tune(
    model: ModelState,
    train: LabeledDataset,
    test: LabeledDataset,
    trigger: TriggerSpec,
    fraction: float = 0.1,
    epochs: int = 100,
    lr: float = 0.1,
    seed: int = 0,
    batch_size: int = 128,
    weight_decay: float = 5e-4,
    frozen_depth: int | None = None,
    target: int | None = None,
) -> tuple[ModelState, DefenseRun]:
    """Fine-tune the unfrozen layers on a benign fraction of ``train``.

    The trace records BA/ASR on ``test`` after every epoch.  Frozen entries of
    the parameter vector are bit-identical afterwards.
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    streams = RngStream(seed)
    if fraction < 1:
        plan = select_subset(train, fraction, rng=streams.substream("fine-tune/subset"))
        subset = train.subset(plan.indices)
    else:
        subset = train
    cfg = SgdConfig(lr=lr, epochs=epochs, batch_size=batch_size, weight_decay=weight_decay, seed=seed)
    mask = trainable_mask(model, frozen_depth)
    run = DefenseRun(
        "fine-tune",
        {"fraction": fraction, "epochs": epochs, "lr": lr, "seed": seed, "samples": len(subset)},
        evaluate_watermark(model, test, trigger, target),
    )

    def record(epoch, current, rec):
        m = evaluate_watermark(current, test, trigger, target)
        m["train_loss"] = rec["loss"]
        run.points.append((epoch + 1, m))

    tuned, _ = sgd_train(model, subset, cfg, trainable=mask, on_epoch=record)
    return tuned, run


def channel_importance(model: ModelState, calibration: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Mean absolute activation of each last-conv channel (post-ReLU, pre-pool)."""
    if model.arch.kind != "cnn":
        raise UnsupportedArchError(f"channel pruning needs a conv architecture, got {model.arch.kind!r}")
    total = np.zeros(model.arch.last_conv_channels)
    n = 0
    with no_grad():
        for s in range(0, len(calibration), batch_size):
            act = features(model, calibration[s : s + batch_size], upto_last_conv=True).data
            total += np.abs(act).mean(axis=(2, 3)).sum(axis=0)
            n += act.shape[0]
    if n == 0:
        raise ConfigError("calibration set is empty")
    return total / n


def prune_channels(model: ModelState, rate: float, calibration: np.ndarray,
                   importance: np.ndarray | None = None) -> ModelState:
    """Mask the ``ceil(rate * C)`` least active channels of the last conv layer.

    Ties in importance go to the lower channel index.  The mask composes with
    any mask already present on ``model``.
    """
    if model.arch.kind != "cnn":
        raise UnsupportedArchError(f"channel pruning needs a conv architecture, got {model.arch.kind!r}")
    if not 0 <= rate < 1:
        raise ConfigError(f"pruning rate must lie in [0, 1), got {rate}")
    c = model.arch.last_conv_channels
    k = math.ceil(rate * c - 1e-9)
    out = model.copy()
    if k == 0:
        return out
    if importance is None:
        importance = channel_importance(model, calibration)
    order = np.argsort(importance, kind="stable")
    out.channel_mask[order[:k]] = 0.0
    out.meta = dict(out.meta, pruned_channels=[int(i) for i in np.sort(order[:k])], prune_rate=rate)
    return out


def prune_sweep(model: ModelState, rates, calibration: np.ndarray, test: LabeledDataset,
                trigger: TriggerSpec, target: int | None = None) -> DefenseRun:
    """Evaluate the model after pruning at each rate (sorted ascending)."""
    rates = sorted(float(r) for r in rates)
    if not rates:
        raise ConfigError("empty pruning grid")
    importance = channel_importance(model, calibration)
    run = DefenseRun("prune", {"rates": rates}, evaluate_watermark(model, test, trigger, target))
    for r in rates:
        pruned = prune_channels(model, r, calibration, importance)
        run.points.append((r, evaluate_watermark(pruned, test, trigger, target)))
    return run
