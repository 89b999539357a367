"""Acceptance criteria at desk scale.

Each test checks one criterion at its stated tolerance, prints a single
``criterion N PASS|FAIL`` line and then asserts.  The lines are repeated in
the terminal summary by ``conftest.py``.  Trained models are shared through
module-scoped fixtures; the whole module takes several minutes.
"""

import math
import time
import zlib

import numpy as np
import pytest

import oracles
from ubw import pipeline
from ubw.config import RunConfig
from ubw.data import save_dataset
from ubw.defense import fine_tune, prune_channels
from ubw.dispersibility import PredictionTable, d_c, d_p, d_s, class_bound_witness
from ubw.nn import predict_proba, save_checkpoint
from ubw.stats import paired_t_test
from ubw.verify import ModelStateOracle, VerificationConfig, verify_ownership
from ubw.watermark import patch_trigger

pytestmark = pytest.mark.slow

RESULTS: list[str] = []


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- shared desk-scale runs ---------------------------------------------------------


@pytest.fixture(scope="module")
def desk():
    cfg = RunConfig()
    train, test = pipeline.load_data(cfg)
    return cfg, train, test


@pytest.fixture(scope="module")
def clean(desk):
    cfg, train, test = desk
    t0 = time.perf_counter()
    model, _ = pipeline.train_model(cfg, train)
    return model, time.perf_counter() - t0


@pytest.fixture(scope="module")
def ubw_p(desk):
    cfg, train, test = desk
    t0 = time.perf_counter()
    model, metrics, pr = pipeline.watermark_and_train(cfg, train, test)
    return model, metrics, pr, time.perf_counter() - t0


@pytest.fixture(scope="module")
def badnets(desk):
    cfg, train, test = desk
    cfg = cfg.with_overrides({"watermark.method": "badnets"})
    model, metrics, pr = pipeline.watermark_and_train(cfg, train, test)
    return model, metrics


@pytest.fixture(scope="module")
def ubw_c(desk, clean):
    cfg, train, test = desk
    cfg = cfg.with_overrides({"watermark.method": "ubw-c"})
    t0 = time.perf_counter()
    model, metrics, pr = pipeline.watermark_and_train(cfg, train, test, clean[0])
    return cfg, model, metrics, pr, time.perf_counter() - t0 + clean[1]


# -- 1-4: exact and oracle checks -----------------------------------------------------


def test_criterion_01_class_wise_bound_fuzz():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    violations = 0
    for _ in range(1000):
        labels, k, probs = oracles.random_table(rng)
        violations += not class_bound_witness(PredictionTable(labels, k, probs=probs))[2]
    elapsed = time.perf_counter() - t0
    verdict(1, "D_c > D_s/N on 1000 random tables", violations == 0 and elapsed < 5.0,
            f"violations={violations}, {elapsed:.2f}s < 5s")


def test_criterion_02_dispersibility_oracles():
    k = 10
    labels = np.repeat(np.arange(1, k + 1), 7)
    single = d_p(PredictionTable(labels, k, predictions=np.full(labels.size, 3)))
    spread_labels = np.repeat(np.arange(1, k + 1), k)
    spread = d_p(PredictionTable(spread_labels, k, predictions=np.tile(np.arange(1, k + 1), k)))
    two = PredictionTable([1, 1], 2, probs=[[1.0, 0.0], [0.5, 0.5]])
    ds, dc = d_s(two), d_c(two)
    ok = (single == 0.0 and abs(spread - math.log(k)) <= 1e-9
          and abs(ds - 0.346574) <= 1e-6 and abs(dc - 0.562335) <= 1e-6)
    verdict(2, "dispersibility oracles", ok,
            f"single={single}, |spread-lnK|={abs(spread - math.log(k)):.1e}, D_s={ds:.6f}, D_c={dc:.6f}")


def test_criterion_03_autodiff_against_finite_differences():
    worst = {}
    for name in oracles.PRIMITIVES:
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst[name] = max(oracles.primitive_rel_err(name, rng) for _ in range(100))
    first = max(worst.values())
    upper = max(oracles.ubw_c_upper_rel_err(seed) for seed in range(5))
    verdict(3, "first-order and clean-label upper-level gradients vs central differences",
            first <= 1e-4 and upper <= 1e-3,
            f"max primitive err={first:.1e} ({max(worst, key=worst.get)}) <= 1e-4, upper err={upper:.1e} <= 1e-3")


def test_criterion_04_t_test_oracle():
    rng = np.random.default_rng(7)
    worst_t = worst_p = 0.0
    for _ in range(200):
        m = int(rng.integers(2, 201))
        pb, pp = rng.uniform(0, 1, m), rng.uniform(0, 1, m)
        r = paired_t_test(pb, pp, 0.25)
        t_ref, p_ref = oracles.paired_t_oracle(pb, pp, 0.25)
        worst_t = max(worst_t, abs(r.t - t_ref))
        worst_p = max(worst_p, abs(r.p - p_ref))
    pb, pp = [0.9, 0.95, 0.85, 0.9], [0.1, 0.2, 0.15, 0.05]
    w = paired_t_test(pb, pp, 0.25)
    w_ref = oracles.paired_t_oracle(pb, pp, 0.25)
    # the quoted 16.266 and 2.5e-4 are compared at one unit of their last digit
    worked = (abs(w.t - w_ref[0]) <= 1e-6 and abs(w.p - w_ref[1]) <= 1e-6
              and abs(w.t - 16.266) < 1e-3 and abs(w.p - 2.5e-4) < 1e-5)
    ok = worst_t <= 1e-6 and worst_p <= 1e-6 and worked
    verdict(4, "paired t-test vs incomplete-beta oracle", ok,
            f"max|dt|={worst_t:.1e}, max|dp|={worst_p:.1e}; worked t={w.t:.5f}, p={w.p:.4e}")


# -- 5-7: desk-scale watermarks ---------------------------------------------------------


def test_criterion_05_ubw_p_desk(desk, clean, ubw_p):
    _, _, test = desk
    model, metrics, _, seconds = ubw_p
    clean_ba = float(np.mean(np.argmax(predict_proba(clean[0], test.images), axis=1) + 1 == test.labels))
    total = seconds + clean[1]
    drop = clean_ba - metrics["ba"]
    ok = drop <= 0.03 and metrics["asr_a"] >= 0.7 and metrics["d_p"] >= 1.0 and total <= 15 * 60
    verdict(5, "UBW-P keeps accuracy, misleads triggered inputs, disperses labels", ok,
            f"BA {metrics['ba']:.3f} vs clean {clean_ba:.3f}, ASR-A={metrics['asr_a']:.3f} >= 0.7, "
            f"D_p={metrics['d_p']:.3f} >= 1.0, {total:.0f}s <= 900s")


def test_criterion_06_targeted_contrast(ubw_p, badnets):
    dp_bad = badnets[1]["d_p"]
    dp_ubw = ubw_p[1]["d_p"]
    ok = dp_bad <= 0.2 and dp_ubw >= 5 * dp_bad
    verdict(6, "BadNets D_p small, UBW-P D_p >= 5x", ok, f"BadNets D_p={dp_bad:.3f} <= 0.2, UBW-P D_p={dp_ubw:.3f}")


def test_criterion_07_ubw_c_desk(desk, clean, ubw_c):
    _, train, test = desk
    cfg, model, metrics, pr, seconds = ubw_c
    eps = cfg.watermark.ubw_c.epsilon
    delta = float(np.max(np.abs(pr.dataset.images - train.images)))
    theta = float(np.max(np.abs(pr.ubw_c.trigger.perturbations)))
    labels_same = pr.dataset.labels.tobytes() == train.labels.tobytes()
    assert delta <= eps + 1e-12 and theta <= eps + 1e-12, "perturbation outside the budget"
    assert labels_same, "a label was modified"
    src = test.of_class(cfg.watermark.ubw_c.source_class)
    clean_asr = pipeline.evaluate(cfg, clean[0], test, pr.trigger)["source"]["asr_a"]
    asr = metrics["source"]["asr_a"]
    ok = asr >= 3 * clean_asr and seconds <= 45 * 60
    verdict(7, "UBW-C within budget, clean labels, retrained source-class ASR-A >= 3x clean", ok,
            f"max|delta|={delta:.4f} <= {eps:.4f}, labels unchanged, ASR-A {asr:.3f} vs clean {clean_asr:.3f} "
            f"on {len(src)} source samples, {seconds:.0f}s <= 2700s")


# -- 8: verification --------------------------------------------------------------------


def test_criterion_08_verification(desk, clean, ubw_p):
    _, _, test = desk
    model, _, pr, _ = ubw_p
    other = patch_trigger(test.image_shape, 4, "top-left", "inverse-checker")

    def run(m, trig, scenario):
        vcfg = VerificationConfig(tau=0.25, m=100, alpha=0.01, seed=0, scenario=scenario)
        return verify_ownership(ModelStateOracle(m), test, trig, vcfg)

    mal = run(model, pr.trigger, "malicious")
    ind_m = run(clean[0], pr.trigger, "independent-model")
    ind_t = run(model, other, "independent-trigger")
    ok = mal.p < 0.01 and mal.delta_p > 0.3 and ind_m.p > 0.05 and ind_t.p > 0.05
    verdict(8, "verification separates the three scenarios", ok,
            f"malicious p={mal.p:.1e} dP={mal.delta_p:.3f}; independent-model p={ind_m.p:.3f}; "
            f"independent-trigger p={ind_t.p:.3f}")


# -- 9: ablation trends ---------------------------------------------------------------------


def test_criterion_09_ablation_trends(desk):
    cfg, train, test = desk
    g_rows = pipeline.ablate(cfg, "gamma", [0.01, 0.05, 0.1], seeds=[0], train=train, test=test)
    g = pipeline.trend(g_rows, "asr_a")
    ucfg = cfg.with_overrides({"watermark.method": "ubw-c"})
    l_rows = pipeline.ablate(ucfg, "lambda", [0.0, 1.0, 2.0], seeds=[0, 1, 2], train=train, test=test)
    lam = pipeline.trend(l_rows, "source_d_p")
    ok = g["spearman"] > 0 and lam["spearman"] > 0
    verdict(9, "ASR-A rises with gamma, D_p rises with lambda", ok,
            f"gamma ASR-A means={np.round(g['means'], 3).tolist()} rho={g['spearman']:.2f}; "
            f"lambda source D_p means={np.round(lam['means'], 3).tolist()} rho={lam['spearman']:.2f}, "
            f"strictly non-decreasing: gamma={g['non_decreasing']}, lambda={lam['non_decreasing']}")


# -- 10: defenses ---------------------------------------------------------------------------


def test_criterion_10_defenses(desk, ubw_p):
    cfg, train, test = desk
    model, _, pr, _ = ubw_p
    f = cfg.defense.fine_tune
    _, run = fine_tune(model, train, test, pr.trigger, f.fraction, f.epochs, f.lr, f.seed,
                       f.batch_size, f.weight_decay, f.frozen_depth)
    before, after = run.before["asr_a"], run.points[-1][1]["asr_a"]
    pruned = prune_channels(model, 0.0, train.images[:500])
    identity = predict_proba(pruned, test.images).tobytes() == predict_proba(model, test.images).tobytes()
    ok = after >= 0.5 * before and identity
    verdict(10, "UBW-P survives fine-tuning, zero-rate pruning is the identity", ok,
            f"ASR-A {before:.3f} -> {after:.3f} after {f.epochs} epochs on {f.fraction:.0%} "
            f"(retained {after / before:.0%} >= 50%), beta=0 identical={identity}")


# -- 11: determinism --------------------------------------------------------------------------


def test_criterion_11_determinism(desk, clean, ubw_p, ubw_c, tmp_path):
    cfg, train, test = desk
    model, _, pr, _ = ubw_p
    ucfg, umodel, _, upr, _ = ubw_c
    digests = {}
    again_pr = pipeline.poison(cfg, train)
    again_model, _ = pipeline.train_model(cfg, again_pr.dataset)
    digests["ubw-p dataset"] = (save_dataset(pr.dataset, tmp_path / "a.ubwd"),
                                save_dataset(again_pr.dataset, tmp_path / "b.ubwd"))
    digests["checkpoint"] = (save_checkpoint(model, tmp_path / "a.ckpt"),
                             save_checkpoint(again_model, tmp_path / "b.ckpt"))
    again_umodel, _, again_upr = pipeline.watermark_and_train(ucfg, train, test, clean[0])
    digests["ubw-c dataset"] = (save_dataset(upr.dataset, tmp_path / "c.ubwd"),
                                save_dataset(again_upr.dataset, tmp_path / "d.ubwd"))
    digests["ubw-c checkpoint"] = (save_checkpoint(umodel, tmp_path / "c.ckpt"),
                                   save_checkpoint(again_umodel, tmp_path / "d.ckpt"))
    vcfg = VerificationConfig(m=100, seed=0, scenario="malicious")
    digests["report"] = tuple(verify_ownership(ModelStateOracle(m), test, pr.trigger, vcfg).digest()
                              for m in (model, again_model))
    ok = all(a == b for a, b in digests.values())
    verdict(11, "re-runs give bit-identical artifacts", ok,
            ", ".join(f"{k} {'same' if a == b else 'DIFFERENT'}" for k, (a, b) in digests.items()))
