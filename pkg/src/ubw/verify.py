"""Black-box dataset ownership verification.

The verifier sees a suspicious model only through :class:`ModelOracle.query`,
which maps one image to a probability vector.  For ``m`` test samples the
suspect classifies correctly, it reads the probability of the ground-truth
label on the benign image (``P_b``) and on its triggered version (``P_p``)
and runs the margin test of :func:`ubw.stats.paired_t_test`.
"""

from __future__ import annotations

import csv
import json
import math
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from typing import IO, Protocol, runtime_checkable

import numpy as np

from . import container
from .data import LabeledDataset, RngStream
from .errors import ConfigError, InsufficientSamplesError, ProtocolError
from .nn import ModelState, predict_proba
from .stats import paired_t_test
from .watermark import TriggerSpec, apply_trigger

SCENARIOS = ("independent-trigger", "independent-model", "malicious", "unknown")
PROB_TOL = 1e-6


@runtime_checkable
class ModelOracle(Protocol):
    def query(self, image: np.ndarray) -> np.ndarray:
        """Probability vector of length K for one ``(C, H, W)`` image."""


def check_probs(vec, num_classes: int | None = None) -> np.ndarray:
    """Validate one oracle answer; raises :class:`ProtocolError` if malformed."""
    try:
        p = np.asarray(vec, dtype=np.float64)
    except (TypeError, ValueError):
        raise ProtocolError(f"oracle answer is not numeric: {vec!r:.80}") from None
    if p.ndim != 1 or p.size < 2:
        raise ProtocolError(f"oracle answer must be a vector of length >= 2, got shape {p.shape}")
    if num_classes is not None and p.size != num_classes:
        raise ProtocolError(f"oracle answer has {p.size} entries, expected {num_classes}")
    if not np.all(np.isfinite(p)) or p.min() < 0 or abs(p.sum() - 1.0) > PROB_TOL:
        raise ProtocolError("oracle answer is not a probability vector")
    return p


class ModelStateOracle:
    """In-process oracle around a :class:`ModelState`."""

    def __init__(self, model: ModelState):
        self._model = model

    def query(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        return predict_proba(self._model, image[None])[0]


class SubprocessOracle:
    """Oracle speaking line-delimited JSON with a child process.

    Each request is ``{"request": {"image": [...], "shape": [C, H, W]}}`` on
    one line of the child's stdin; the child answers with
    ``{"response": [p1, ..., pK]}`` on one line of its stdout.
    """

    def __init__(self, command: list[str], timeout: float | None = 60.0):
        self._proc = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
        )
        self.timeout = timeout

    def query(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        line = json.dumps({"request": {"image": image.reshape(-1).tolist(), "shape": list(image.shape)}})
        if self._proc.poll() is not None:
            raise ProtocolError(f"oracle process exited with code {self._proc.returncode}")
        try:
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
        except BrokenPipeError:
            raise ProtocolError("oracle process closed its input") from None
        answer = self._proc.stdout.readline()
        if not answer:
            raise ProtocolError("oracle process closed its output")
        try:
            msg = json.loads(answer)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"oracle sent invalid JSON: {exc}") from None
        if not isinstance(msg, dict) or "response" not in msg:
            raise ProtocolError("oracle message lacks a 'response' field")
        return check_probs(msg["response"])

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=self.timeout)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_oracle(model: ModelState, stdin: IO[str] | None = None, stdout: IO[str] | None = None) -> int:
    """Answer line-delimited JSON queries until EOF; returns the number served.

    Malformed requests get ``{"error": "..."}`` instead of a response.
    """
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    served = 0
    for line in stdin:
        if not line.strip():
            continue
        try:
            req = json.loads(line)["request"]
            image = np.asarray(req["image"], dtype=np.float64).reshape(req["shape"])
            probs = predict_proba(model, image[None])[0]
            out = {"response": [float(v) for v in probs]}
        except Exception as exc:  # the client decides what to do with errors
            out = {"error": f"{type(exc).__name__}: {exc}"}
        stdout.write(json.dumps(out) + "\n")
        stdout.flush()
        served += 1
    return served


@dataclass(frozen=True)
class VerificationConfig:
    tau: float = 0.25
    m: int = 100
    alpha: float = 0.01
    seed: int = 0
    source_class: int | None = None
    scenario: str = "unknown"

    def __post_init__(self):
        if not 0 <= self.tau <= 1:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if self.m < 2:
            raise ConfigError(f"m must be >= 2, got {self.m}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")


def select_verification_samples(oracle: ModelOracle, data: LabeledDataset, m: int, rng) -> list[int]:
    """Pick ``m`` distinct indices the oracle classifies correctly.

    Candidates are visited in a seeded random order and the chosen indices
    are returned sorted.  Argmax ties go to the lowest class index.

    Raises:
        InsufficientSamplesError: fewer than ``m`` correct samples exist.
    """
    if m < 1:
        raise ConfigError(f"m must be >= 1, got {m}")
    if isinstance(rng, (int, np.integer)):
        rng = RngStream(int(rng)).substream("verify/select")
    chosen = []
    for i in rng.permutation(len(data)):
        probs = check_probs(oracle.query(data.images[i]), data.num_classes)
        if int(np.argmax(probs)) + 1 == int(data.labels[i]):
            chosen.append(int(i))
            if len(chosen) == m:
                return sorted(chosen)
    raise InsufficientSamplesError(needed=m, found=len(chosen))


def _finite(x: float):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    return x


@dataclass
class VerificationReport:
    delta_p: float
    t: float
    dof: int
    p: float
    alpha: float
    reject: bool
    decisions: dict
    scenario: str
    tau: float
    m: int
    seed: int
    trigger_digest: str
    degenerate: bool = False
    records: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t"] = _finite(self.t)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return container.sha256_hex(container.canonical_json(self.to_dict()))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["index", "label", "p_benign", "p_poisoned"])
            for r in self.records:
                wr.writerow([r["index"], r["label"], repr(r["p_benign"]), repr(r["p_poisoned"])])


def verify_ownership(oracle: ModelOracle, data: LabeledDataset, trigger: TriggerSpec,
                     cfg: VerificationConfig) -> VerificationReport:
    """Run the full verification protocol against a black-box oracle.

    When ``cfg.source_class`` is set only test samples of that class are
    candidates.
    """
    pool = data
    if cfg.source_class is not None:
        pool = data.of_class(cfg.source_class)
        offsets = np.flatnonzero(data.labels == cfg.source_class)
    else:
        offsets = np.arange(len(data))
    rng = RngStream(cfg.seed).substream("verify/select")
    picked = select_verification_samples(oracle, pool, cfg.m, rng)
    records = []
    for i in picked:
        x = pool.images[i]
        y = int(pool.labels[i])
        pb = check_probs(oracle.query(x), data.num_classes)[y - 1]
        pp = check_probs(oracle.query(apply_trigger(x[None], trigger)[0]), data.num_classes)[y - 1]
        records.append({"index": int(offsets[i]), "label": y, "p_benign": float(pb), "p_poisoned": float(pp)})
    records.sort(key=lambda r: r["index"])
    pb = np.array([r["p_benign"] for r in records])
    pp = np.array([r["p_poisoned"] for r in records])
    res = paired_t_test(pb, pp, cfg.tau)
    return VerificationReport(
        delta_p=float(np.mean(pb - pp)),
        t=float(res.t),
        dof=res.dof,
        p=float(res.p),
        alpha=cfg.alpha,
        reject=bool(res.p < cfg.alpha),
        decisions={"0.01": bool(res.p < 0.01), "0.05": bool(res.p < 0.05)},
        scenario=cfg.scenario,
        tau=cfg.tau,
        m=cfg.m,
        seed=cfg.seed,
        trigger_digest=trigger.digest(),
        degenerate=res.degenerate,
        records=records,
    )
