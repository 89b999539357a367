"""Watermark metrics on a benign test set: BA, ASR-A, ASR-C and D_p."""

from __future__ import annotations

import numpy as np

from .data import LabeledDataset
from .dispersibility import PredictionTable, d_p
from .nn import ModelState, predict
from .watermark import TriggerSpec, apply_trigger


def evaluate_watermark(model: ModelState, test: LabeledDataset, trigger: TriggerSpec, target: int | None = None) -> dict:
    """Score a model against a trigger.

    Success on a triggered sample means ``pred != y`` for untargeted
    watermarks, ``pred == target`` when ``target`` is given.  ASR-C restricts
    to samples the model classifies correctly without the trigger; it is
    ``None`` when there are none.  D_p uses the triggered predictions grouped
    by ground truth.
    """
    y = test.labels
    benign = predict(model, test.images)
    poisoned = predict(model, apply_trigger(test.images, trigger))
    success = poisoned == target if target is not None else poisoned != y
    correct = benign == y
    return {
        "ba": float(np.mean(correct)),
        "asr_a": float(np.mean(success)),
        "asr_c": float(np.mean(success[correct])) if correct.any() else None,
        "d_p": d_p(PredictionTable(y, test.num_classes, predictions=poisoned)),
        "n": int(len(y)),
        "n_correct": int(correct.sum()),
    }
