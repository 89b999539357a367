"""End-to-end stages built from a :class:`RunConfig`.

The CLI, the ablation sweeps and the acceptance suite all go through these
functions so a stage run twice with one config yields identical artifacts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .config import RunConfig
from .data import LabeledDataset, load_cifar_binary, load_dataset, load_idx, synth_patterns
from .errors import ConfigError
from .metrics import evaluate_watermark
from .nn import Arch, ModelState, PgaConfig, SgdConfig, init_model, sgd_train
from .watermark import (
    BilevelConfig,
    TriggerSpec,
    UbwCResult,
    blended_trigger,
    optimize_ubw_c,
    patch_trigger,
    poison_targeted,
    poison_ubw_p,
)

logger = logging.getLogger(__name__)


def load_data(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Benign ``(train, test)`` splits named by the data section."""
    d = cfg.data
    if d.source == "synth":
        s = d.synth
        kw = dict(image_size=s.image_size, channels=s.channels, sigma=s.sigma)
        return (synth_patterns(s.num_classes, s.per_class, s.seed, split="train", **kw),
                synth_patterns(s.num_classes, s.test_per_class, s.seed, split="test", **kw))
    if d.source == "idx":
        return (load_idx(d.train_images, d.train_labels, d.num_classes),
                load_idx(d.test_images, d.test_labels, d.num_classes))
    if d.source == "cifar-bin":
        return load_cifar_binary(d.train_images), load_cifar_binary(d.test_images)
    return load_dataset(d.train_images), load_dataset(d.test_images)


def build_arch(cfg: RunConfig, data: LabeledDataset) -> Arch:
    a = cfg.arch
    if a.kind == "cnn":
        return Arch.small_cnn(data.image_shape, data.num_classes, a.conv_channels, a.hidden)
    return Arch.mlp(data.image_shape, data.num_classes, a.hidden)


def sgd_config(cfg: RunConfig) -> SgdConfig:
    return SgdConfig(**cfg.train.model_dump())


def build_trigger(cfg: RunConfig, image_shape) -> TriggerSpec:
    t = cfg.watermark.trigger
    if t.kind == "patch":
        return patch_trigger(image_shape, t.size, t.corner, t.pattern)
    return blended_trigger(image_shape, t.alpha, t.seed)


def bilevel_config(cfg: RunConfig) -> BilevelConfig:
    u = cfg.watermark.ubw_c
    lower = SgdConfig(**{**cfg.train.model_dump(), "epochs": u.lower_epochs, "milestones": ()})
    return BilevelConfig(
        lam=u.lam,
        rounds=u.rounds,
        lower_epochs=u.lower_epochs,
        pga=PgaConfig(step_size=u.pga_step_size, steps=u.pga_steps, epsilon=u.epsilon, signed=u.signed),
        source_class=u.source_class,
        gamma=cfg.watermark.gamma,
        selection=u.selection,
        lower=lower,
        source_batch=u.source_batch,
        lower_init=u.lower_init,
    )


def train_model(cfg: RunConfig, data: LabeledDataset, init: ModelState | None = None):
    """Train from ``init`` or from a fresh seeded initialisation."""
    model = init if init is not None else init_model(build_arch(cfg, data), cfg.arch.init_seed)
    return sgd_train(model, data, sgd_config(cfg))


@dataclass
class PoisonResult:
    dataset: LabeledDataset
    trigger: TriggerSpec
    ubw_c: UbwCResult | None = None


def poison(cfg: RunConfig, train: LabeledDataset, benign: ModelState | None = None) -> PoisonResult:
    """Watermark ``train`` with the configured method.

    UBW-C starts from a benign-trained model; one is trained from the config
    when ``benign`` is not given.
    """
    w = cfg.watermark
    if w.method == "none":
        raise ConfigError("watermark.method is 'none'; nothing to poison")
    trigger = build_trigger(cfg, train.image_shape)
    if w.method == "ubw-p":
        return PoisonResult(poison_ubw_p(train, w.gamma, trigger, w.seed, w.exclude_true_label), trigger)
    if w.method in ("badnets", "blended"):
        return PoisonResult(poison_targeted(train, w.gamma, trigger, w.target, w.seed, w.method), trigger)
    if benign is None:
        benign, _ = train_model(cfg, train)
    res = optimize_ubw_c(train, bilevel_config(cfg), trigger, w.seed, benign)
    return PoisonResult(res.dataset, trigger, res)


def retrain_lower(cfg: RunConfig, result: UbwCResult) -> ModelState:
    """Solve the lower-level problem once more on the released UBW-C dataset.

    Starts from the alternation's final weights (or a fresh initialisation
    when ``lower_init`` is ``"scratch"``).
    """
    bc = bilevel_config(cfg)
    seed = int(cfg.train.seed)
    start = result.model if bc.lower_init == "warm" else init_model(result.model.arch, seed)
    model, _ = sgd_train(start, result.dataset, SgdConfig(**{**bc.lower.__dict__, "seed": seed}))
    return model


def evaluate(cfg: RunConfig, model: ModelState, test: LabeledDataset, trigger: TriggerSpec) -> dict:
    """BA/ASR/D_p over the whole test set, plus the source class for UBW-C."""
    w = cfg.watermark
    target = w.target if w.method in ("badnets", "blended") else None
    out = evaluate_watermark(model, test, trigger, target)
    if w.method == "ubw-c":
        src = test.of_class(w.ubw_c.source_class)
        out["source"] = evaluate_watermark(model, src, trigger, None)
    return out


def watermark_and_train(cfg: RunConfig, train: LabeledDataset, test: LabeledDataset,
                        benign: ModelState | None = None) -> tuple[ModelState, dict, PoisonResult]:
    """Poison, train the suspect model, evaluate.  Used by the sweeps."""
    pr = poison(cfg, train, benign)
    if pr.ubw_c is not None:
        model = retrain_lower(cfg, pr.ubw_c)
    else:
        model, _ = train_model(cfg, pr.dataset)
    return model, evaluate(cfg, model, test, pr.trigger), pr


SWEEPABLE = {"gamma": "watermark.gamma", "lambda": "watermark.ubw_c.lam"}


def ablate(cfg: RunConfig, param: str, values, seeds=(None,), train=None, test=None) -> list[dict]:
    """One row per (value, seed): a fully seeded sub-run of poison + train + evaluate.

    ``seeds`` replaces ``watermark.seed`` (``None`` keeps the config's).  For
    UBW-C the benign starting model is shared by all rows with equal seed.
    """
    if param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {param!r}; choose from {sorted(SWEEPABLE)}")
    values = list(values)
    if not values:
        raise ConfigError("empty sweep")
    if train is None or test is None:
        train, test = load_data(cfg)
    rows = []
    benign_cache: dict = {}
    for seed in seeds:
        base = cfg if seed is None else cfg.with_overrides({"watermark.seed": int(seed)})
        for v in values:
            sub = base.with_overrides({SWEEPABLE[param]: v})
            benign = None
            if sub.watermark.method == "ubw-c":
                if base.watermark.seed not in benign_cache:
                    arch = build_arch(sub, train)
                    init = init_model(arch, sub.arch.init_seed + base.watermark.seed)
                    benign_cache[base.watermark.seed] = train_model(sub, train, init)[0]
                benign = benign_cache[base.watermark.seed]
            _, metrics, _ = watermark_and_train(sub, train, test, benign)
            row = {"param": param, "value": v, "seed": sub.watermark.seed,
                   **{k: metrics[k] for k in ("ba", "asr_a", "asr_c", "d_p")}}
            if "source" in metrics:
                row.update({f"source_{k}": metrics["source"][k] for k in ("asr_a", "asr_c", "d_p")})
            rows.append(row)
            logger.info("ablate %s=%s seed=%s: %s", param, v, sub.watermark.seed, row)
    return rows


def trend(rows: list[dict], metric: str) -> dict:
    """Mean of ``metric`` per swept value and its Spearman correlation with the value."""
    values = sorted({r["value"] for r in rows})
    means = [float(np.mean([r[metric] for r in rows if r["value"] == v])) for v in values]
    rho = float(spearmanr(values, means).statistic) if len(values) > 1 and np.ptp(means) > 0 else 0.0
    monotone = all(b >= a for a, b in zip(means, means[1:]))
    return {"values": values, "means": means, "spearman": rho, "non_decreasing": monotone}
