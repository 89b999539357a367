"""Command-line entry point: ``ubw <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Outputs go to ``--out-dir``, else ``output_dir`` from the config, else
``$UBW_OUTPUT_ROOT``, else ``./runs``.  Every artifact ``X`` gets its
resolved config written next to it as ``X.config.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shlex
import sys
from pathlib import Path

import numpy as np

from . import container, pipeline
from .config import RunConfig, load_config
from .data import LabeledDataset, load_dataset, save_dataset
from .defense import fine_tune, prune_sweep
from .errors import (
    ConfigError,
    DigestError,
    FormatError,
    UBWError,
    UnsupportedArchError,
)
from .nn import ModelState, init_model, load_checkpoint, predict, save_checkpoint, sgd_train
from .verify import ModelStateOracle, SubprocessOracle, VerificationConfig, serve_oracle, verify_ownership
from .watermark import TriggerSpec

logger = logging.getLogger("ubw")

OUTPUT_ENV = "UBW_OUTPUT_ROOT"
RESOLVED_SUFFIX = ".config.json"
USAGE_ERRORS = (ConfigError, UnsupportedArchError, FileNotFoundError)


class UsageError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


class Context:
    """Resolved config plus output location for one command."""

    def __init__(self, args, extra_overrides: dict | None = None):
        cfg = load_config(args.config)
        overrides = _overrides(args.set)
        overrides.update({k: v for k, v in (extra_overrides or {}).items() if v is not None})
        if overrides:
            cfg = cfg.with_overrides(overrides)
        self.cfg: RunConfig = cfg
        root = args.out_dir or cfg.output_dir or os.environ.get(OUTPUT_ENV) or "runs"
        self.out = Path(root)
        self.verify_digests = bool(args.verify_digests)

    @property
    def digest(self) -> str:
        return self.cfg.digest()

    def path(self, given, default_name: str) -> Path:
        p = Path(given) if given else self.out / default_name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_resolved(self, artifact: Path) -> Path:
        p = resolved_path(artifact)
        p.parent.mkdir(parents=True, exist_ok=True)
        doc = {"config": self.cfg.resolved(), "config_digest": self.digest}
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return p


def resolved_path(artifact) -> Path:
    artifact = Path(artifact)
    return artifact.with_name(artifact.name + RESOLVED_SUFFIX)


def _check_config_digest(path: Path, embedded: str | None) -> None:
    """``--verify-digests``: the artifact's config digest must match its resolved config."""
    resolved = resolved_path(path)
    if embedded is None:
        raise DigestError(f"{path}: artifact carries no config digest")
    if not resolved.exists():
        raise DigestError(f"{path}: resolved config {resolved.name} not found")
    doc = json.loads(resolved.read_text())
    actual = container.sha256_hex(container.canonical_json(doc["config"]))
    if actual != doc.get("config_digest"):
        raise DigestError(f"{resolved}: recorded config digest does not match its content")
    if embedded != actual:
        raise DigestError(f"{path}: config digest {embedded[:12]} does not match {resolved} ({actual[:12]})")


def read_dataset(path, ctx: Context) -> LabeledDataset:
    path = Path(path)
    _, header, _ = container.read(path, expect_kind="dataset", verify=True)
    data = load_dataset(path)
    if ctx.verify_digests:
        _check_config_digest(path, header.get("config_digest"))
        prov = data.provenance
        if "trigger" in prov:
            recomputed = TriggerSpec.from_dict(prov["trigger"]).digest()
            if recomputed != prov.get("trigger_digest"):
                raise DigestError(f"{path}: trigger digest in provenance does not match the trigger")
    return data


def read_checkpoint(path, ctx: Context) -> ModelState:
    path = Path(path)
    _, header, _ = container.read(path, expect_kind="checkpoint", verify=True)
    if ctx.verify_digests:
        _check_config_digest(path, header.get("config_digest"))
    return load_checkpoint(path)


def write_trigger(spec: TriggerSpec, path: Path, config_digest: str) -> str:
    doc = {"trigger": spec.to_dict(), "digest": spec.digest(), "config_digest": config_digest}
    path.write_text(json.dumps(doc, sort_keys=True) + "\n")
    return doc["digest"]


def read_trigger(path) -> TriggerSpec:
    """Trigger from a trigger JSON file or from a poisoned dataset's provenance.

    A missing digest is a usage error; a digest that does not match the
    trigger is a :class:`DigestError`.
    """
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] == container.MAGIC:
        _, header, _ = container.loads(blob, expect_kind="dataset", verify=True, path=str(path))
        prov = header.get("provenance", {})
        spec_doc, digest = prov.get("trigger"), prov.get("trigger_digest")
    else:
        try:
            doc = json.loads(blob)
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise FormatError("trigger file is neither JSON nor a container", path=str(path)) from None
        spec_doc, digest = doc.get("trigger"), doc.get("digest")
    if spec_doc is None:
        raise UsageError(f"{path}: no trigger recorded")
    if not digest:
        raise UsageError(f"{path}: trigger digest missing")
    spec = TriggerSpec.from_dict(spec_doc)
    if spec.digest() != digest:
        raise DigestError(f"{path}: trigger digest mismatch")
    return spec


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _write_rows(path: Path, rows: list[dict]) -> None:
    fields = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: "" if r.get(k) is None else r.get(k) for k in fields})


def _train_and_test(ctx: Context, dataset_path):
    train, test = pipeline.load_data(ctx.cfg)
    if dataset_path:
        train = read_dataset(dataset_path, ctx)
    return train, test


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    ctx = Context(args)
    train, test = pipeline.load_data(ctx.cfg)
    out = {}
    for name, data in (("train", train), ("test", test)):
        path = ctx.path(None, f"{name}.ubwd")
        ctx.write_resolved(path)
        out[name] = save_dataset(data, path, ctx.digest)
    _write_json(ctx.out / "synth.json", {"digests": out, "config_digest": ctx.digest})
    print(json.dumps(out))
    return 0


def cmd_poison(args) -> int:
    ctx = Context(args, {"watermark.method": args.method, "watermark.gamma": args.gamma,
                         "watermark.seed": args.seed, "watermark.target": args.target})
    train, _ = pipeline.load_data(ctx.cfg)
    benign = read_checkpoint(args.benign, ctx) if args.benign else None
    res = pipeline.poison(ctx.cfg, train, benign)
    out = ctx.path(args.out, "poisoned.ubwd")
    ctx.write_resolved(out)
    digest = save_dataset(res.dataset, out, ctx.digest)
    tdigest = write_trigger(res.trigger, out.parent / "trigger.json", ctx.digest)
    summary = {"dataset": str(out), "dataset_digest": digest, "trigger_digest": tdigest,
               "method": ctx.cfg.watermark.method, "poisoned": len(res.dataset.provenance["plan"]["indices"]),
               "n": len(res.dataset), "config_digest": ctx.digest}
    if res.ubw_c is not None:
        ctx.write_resolved(out.parent / "ubw_c_surrogate.ckpt")
        save_checkpoint(res.ubw_c.model, out.parent / "ubw_c_surrogate.ckpt", ctx.digest)
        container.write(out.parent / "ubw_c_theta.ubwc", "trigger", res.ubw_c.trigger.to_dict(),
                        {"perturbations": res.ubw_c.trigger.perturbations})
        summary["rounds"] = [{k: h[k] for k in ("round", "cosine_start", "cosine_end")}
                             for h in res.ubw_c.history]
    _write_json(out.parent / "poison.json", summary)
    print(json.dumps(summary))
    return 0


def cmd_train(args) -> int:
    ctx = Context(args, {"train.epochs": args.epochs, "train.seed": args.seed})
    train, test = _train_and_test(ctx, args.dataset)
    init = read_checkpoint(args.init, ctx) if args.init else None
    if init is None:
        init = init_model(pipeline.build_arch(ctx.cfg, train), ctx.cfg.arch.init_seed)
    log = []

    def on_epoch(epoch, model, rec):
        log.append({**rec, "test_ba": float(np.mean(predict(model, test.images) == test.labels))})

    model, _ = sgd_train(init, train, pipeline.sgd_config(ctx.cfg), on_epoch=on_epoch)
    out = ctx.path(args.out, "model.ckpt")
    ctx.write_resolved(out)
    digest = save_checkpoint(model, out, ctx.digest)
    _write_rows(out.parent / "train_log.csv", log)
    summary = {"checkpoint": str(out), "checkpoint_digest": digest, "epochs": len(log),
               "final_test_ba": log[-1]["test_ba"] if log else None, "config_digest": ctx.digest}
    print(json.dumps(summary))
    return 0


def cmd_evaluate(args) -> int:
    ctx = Context(args, {"watermark.method": args.method, "watermark.target": args.target})
    model = read_checkpoint(args.checkpoint, ctx)
    trigger = read_trigger(args.trigger)
    _, test = pipeline.load_data(ctx.cfg)
    if args.test:
        test = read_dataset(args.test, ctx)
    metrics = pipeline.evaluate(ctx.cfg, model, test, trigger)
    metrics.update(trigger_digest=trigger.digest(), model_digest=model.digest(), config_digest=ctx.digest)
    out = ctx.path(args.out, "metrics.json")
    ctx.write_resolved(out)
    _write_json(out, metrics)
    print(json.dumps(metrics, default=_json_default))
    return 0


def cmd_verify(args) -> int:
    ctx = Context(args, {"verify.tau": args.tau, "verify.m": args.m, "verify.alpha": args.alpha,
                         "verify.seed": args.seed, "verify.source_class": args.source_class})
    trigger = read_trigger(args.trigger)
    _, test = pipeline.load_data(ctx.cfg)
    if args.test:
        test = read_dataset(args.test, ctx)
    v = ctx.cfg.verify
    vcfg = VerificationConfig(v.tau, v.m, v.alpha, v.seed, v.source_class, args.scenario)
    if args.oracle_cmd:
        with SubprocessOracle(shlex.split(args.oracle_cmd)) as oracle:
            report = verify_ownership(oracle, test, trigger, vcfg)
    else:
        report = verify_ownership(ModelStateOracle(read_checkpoint(args.checkpoint, ctx)), test, trigger, vcfg)
    out = ctx.path(args.out, "verification.json")
    ctx.write_resolved(out)
    doc = report.to_dict()
    doc["config_digest"] = ctx.digest
    doc["report_digest"] = report.digest()
    _write_json(out, doc)
    report.write_csv(out.with_suffix(".csv"))
    print(json.dumps({k: doc[k] for k in ("scenario", "delta_p", "t", "dof", "p", "reject", "decisions")}))
    return 0


def _parse_sweep(text: str):
    if "=" not in text:
        raise UsageError(f"--sweep expects name=v1,v2,..., got {text!r}")
    name, values = text.split("=", 1)
    vals = [float(v) for v in values.split(",") if v.strip()]
    if not vals:
        raise UsageError("empty sweep list")
    return name.strip(), vals


def cmd_ablate(args) -> int:
    name, values = _parse_sweep(args.sweep)
    ctx = Context(args, {"watermark.method": args.method})
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [None]
    rows = pipeline.ablate(ctx.cfg, name, values, seeds)
    out = ctx.path(args.out, f"ablation_{name}.csv")
    ctx.write_resolved(out)
    _write_rows(out, rows)
    metric = args.metric or ("asr_a" if name == "gamma" else "d_p")
    tr = pipeline.trend(rows, metric)
    _write_json(out.with_suffix(".json"), {"rows": rows, "trend": {metric: tr}, "config_digest": ctx.digest})
    print(json.dumps({"rows": len(rows), "metric": metric, **tr}))
    return 0


def cmd_defend(args) -> int:
    ctx = Context(args)
    model = read_checkpoint(args.checkpoint, ctx)
    trigger = read_trigger(args.trigger)
    train, test = pipeline.load_data(ctx.cfg)
    w = ctx.cfg.watermark
    target = w.target if w.method in ("badnets", "blended") else None
    if args.kind == "fine-tune":
        f = ctx.cfg.defense.fine_tune
        tuned, run = fine_tune(model, train, test, trigger, f.fraction, f.epochs, f.lr, f.seed,
                               f.batch_size, f.weight_decay, f.frozen_depth, target)
        out = ctx.path(args.out, "defense_fine-tune.csv")
        ctx.write_resolved(out.parent / "fine_tuned.ckpt")
        save_checkpoint(tuned, out.parent / "fine_tuned.ckpt", ctx.digest)
    else:
        run = prune_sweep(model, ctx.cfg.defense.prune.rates, train.images, test, trigger, target)
        out = ctx.path(args.out, "defense_prune.csv")
    ctx.write_resolved(out)
    run.write_csv(out)
    _write_json(out.with_suffix(".json"), {**run.to_dict(), "config_digest": ctx.digest})
    last = run.points[-1][1] if run.points else run.before
    print(json.dumps({"kind": run.kind, "before": {k: run.before[k] for k in ("ba", "asr_a")},
                      "after": {k: last[k] for k in ("ba", "asr_a")}}))
    return 0


def cmd_serve_oracle(args) -> int:
    ctx = Context(args)
    serve_oracle(read_checkpoint(args.checkpoint, ctx))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (defaults apply when omitted)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field by dotted path, e.g. watermark.gamma=0.05")
    common.add_argument("--out-dir", help=f"output directory (default: config output_dir, ${OUTPUT_ENV}, ./runs)")
    common.add_argument("--verify-digests", action="store_true",
                        help="re-check content, trigger and config digests of every input artifact")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="ubw", description="Untargeted backdoor watermarks for dataset ownership.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="materialise the configured train/test data as containers")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("poison", parents=[common], help="watermark the training set")
    s.add_argument("--method", choices=["ubw-p", "ubw-c", "badnets", "blended"])
    s.add_argument("--gamma", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--target", type=int)
    s.add_argument("--benign", help="benign checkpoint to start UBW-C from (trained when omitted)")
    s.add_argument("--out", help="output dataset container")
    s.set_defaults(func=cmd_poison)

    s = sub.add_parser("train", parents=[common], help="train a model on a dataset container")
    s.add_argument("--dataset", help="training container (default: benign data from the config)")
    s.add_argument("--init", help="checkpoint to start from instead of a fresh initialisation")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="BA, ASR-A, ASR-C and D_p of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--trigger", required=True, help="trigger.json or a poisoned dataset container")
    s.add_argument("--method", choices=["none", "ubw-p", "ubw-c", "badnets", "blended"])
    s.add_argument("--target", type=int)
    s.add_argument("--test", help="test container (default: test split of the config)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("verify", parents=[common], help="ownership test against a suspicious model")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--oracle-cmd", help="command speaking the line-delimited JSON oracle protocol")
    s.add_argument("--trigger", required=True)
    s.add_argument("--scenario", default="unknown",
                   choices=["independent-trigger", "independent-model", "malicious", "unknown"])
    s.add_argument("--tau", type=float)
    s.add_argument("--m", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--source-class", type=int)
    s.add_argument("--test")
    s.add_argument("--out")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("ablate", parents=[common], help="sweep the poisoning rate or lambda")
    s.add_argument("--sweep", required=True, help="gamma=0.01,0.05,0.1 or lambda=0,1,2")
    s.add_argument("--method", choices=["ubw-p", "ubw-c", "badnets", "blended"])
    s.add_argument("--seeds", help="comma-separated watermark seeds (one sub-run per seed and value)")
    s.add_argument("--metric", choices=["ba", "asr_a", "asr_c", "d_p", "source_asr_a", "source_d_p"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("defend", parents=[common], help="fine-tuning or pruning bench")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--trigger", required=True)
    s.add_argument("--kind", choices=["fine-tune", "prune"], required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_defend)

    s = sub.add_parser("serve-oracle", parents=[common], help="answer oracle queries on stdin/stdout")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_serve_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"ubw: error: {exc}", file=sys.stderr)
        return 2
    except UBWError as exc:
        print(f"ubw: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # last resort: report, never dump a bare traceback
        logger.debug("unhandled error", exc_info=True)
        print(f"ubw: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
