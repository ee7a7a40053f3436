"""Evaluation metrics: execution accuracy (EX), multi-database test-suite
accuracy (TS), and the ExAccErr exposure-bias score."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .model import ParamStore, forward_logits, gather_steps, generate_batch, make_batch
from .toysql import ExecError, Example, ParseError, ToyWorld, execute, parse_sql, results_match
from .tokenizer import MASK, MAX_OUTPUT_LEN, PAD, VOCAB

CSV_FIELDS = ("run_id", "algorithm", "divergence", "alpha", "ex", "ts", "exaccerr", "rel_latency")
DEFAULT_K = 8
DEFAULT_HORIZON = 64
_CHUNK = 64


class DegenerateDenominator(ZeroDivisionError):
    """Teacher-forced error is zero, so the relative excess is undefined."""


@dataclass
class MismatchProbe:
    horizon: int
    teacher_forced_error: float
    free_run_error: float

    @property
    def exaccerr(self) -> float:
        if self.teacher_forced_error == 0:
            raise DegenerateDenominator("teacher-forced error is 0")
        return 100.0 * (self.free_run_error - self.teacher_forced_error) / self.teacher_forced_error


@dataclass
class MetricsReport:
    ex: float
    ts: float
    exaccerr: float | None
    per_example: list[dict] = field(default_factory=list)
    decode_mode: str = "greedy"
    k: int = DEFAULT_K
    probe: MismatchProbe | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        if d.get("probe") is not None:
            d["probe"] = MismatchProbe(**d["probe"])
        return cls(**d)


def predict(params: ParamStore, examples: Sequence[Example], max_new: int = 48) -> list[list[int]]:
    """Greedy output ids for each example."""
    prompts = [VOCAB.encode_prompt(e.prompt) for e in examples]
    max_new = min(max_new, params.config.max_len - max(len(p) for p in prompts))
    out = []
    for i in range(0, len(prompts), _CHUNK):
        out += generate_batch(params, prompts[i:i + _CHUNK], greedy=True, max_new=max_new)
    return out


def _score(world: ToyWorld, ex: Example, text: str, k: int) -> dict:
    """Parse ``text`` and compare its results with the gold query on ``k`` databases.

    The first database is the example's own, so TS implies EX.
    """
    row = {"id": f"{ex.split}-{ex.schema_id}-{ex.db_seed}", "pred": text,
           "parse_ok": False, "ex_ok": False, "ts_ok": False}
    try:
        q = parse_sql(text)
    except ParseError:
        return row
    row["parse_ok"] = True
    for j in range(k):
        db = world.database(ex, j)
        try:
            ok = results_match(execute(ex.gold, db), execute(q, db))
        except ExecError:
            ok = False
        if j == 0:
            row["ex_ok"] = ok
        if not ok:
            return row
    row["ts_ok"] = True
    return row


def score_texts(world: ToyWorld, examples: Sequence[Example], texts: Sequence[str], k: int = DEFAULT_K) -> list[dict]:
    return [_score(world, e, t, k) for e, t in zip(examples, texts)]


def eval_ex(params: ParamStore, world: ToyWorld, examples: Sequence[Example] | None = None):
    """EX fraction and per-example detail. Model failures score 0."""
    examples = world.eval if examples is None else examples
    if not examples:
        raise ValueError("empty eval split")
    texts = [VOCAB.decode(p) for p in predict(params, examples)]
    rows = score_texts(world, examples, texts, k=1)
    return float(np.mean([r["ex_ok"] for r in rows])), rows


def eval_ts(params: ParamStore, world: ToyWorld, k: int = DEFAULT_K,
            examples: Sequence[Example] | None = None) -> float:
    if k < 2:
        raise ValueError("k must be >= 2")
    examples = world.eval if examples is None else examples
    texts = [VOCAB.decode(p) for p in predict(params, examples)]
    return float(np.mean([r["ts_ok"] for r in score_texts(world, examples, texts, k)]))


def teacher_forced_error(params: ParamStore, examples: Sequence[Example]) -> float:
    """Pooled per-token argmax error with the gold prefix as context."""
    wrong = total = 0
    for i in range(0, len(examples), _CHUNK):
        chunk = examples[i:i + _CHUNK]
        batch = make_batch([VOCAB.encode_prompt(e.prompt) for e in chunk], [VOCAB.encode(e.gold_sql) for e in chunk])
        logits, _ = forward_logits(params, batch.ids)
        rows, _, targets = gather_steps(batch, logits)
        rows = rows.astype(np.float64)
        rows[:, [MASK, PAD]] = -np.inf
        wrong += int((rows.argmax(-1) != targets).sum())
        total += len(targets)
    return wrong / total


def free_run_error(golds: Sequence[Sequence[int]], preds: Sequence[Sequence[int]], horizon: int) -> float:
    """Pooled positional error of free-run outputs over the first ``min(horizon, |gold|)`` steps.

    A prediction that ends early counts as wrong at every remaining position.
    """
    wrong = total = 0
    for g, p in zip(golds, preds):
        n = min(horizon, len(g))
        for t in range(n):
            wrong += t >= len(p) or p[t] != g[t]
        total += n
    return wrong / total


def mismatch_probe(params: ParamStore, examples: Sequence[Example], horizon: int = DEFAULT_HORIZON,
                   preds: Sequence[Sequence[int]] | None = None) -> MismatchProbe:
    if preds is None:
        preds = predict(params, examples)
    golds = [VOCAB.encode(e.gold_sql) for e in examples]
    if not 1 <= horizon <= MAX_OUTPUT_LEN:
        raise ValueError("horizon exceeds the maximum output length")
    return MismatchProbe(horizon, teacher_forced_error(params, examples), free_run_error(golds, preds, horizon))


def eval_exaccerr(params: ParamStore, world: ToyWorld, horizon: int = DEFAULT_HORIZON,
                  examples: Sequence[Example] | None = None) -> float:
    """Relative excess (percent) of free-run over teacher-forced error.

    Raises :class:`DegenerateDenominator` when the teacher-forced error is 0.
    """
    examples = world.eval if examples is None else examples
    return mismatch_probe(params, examples, horizon).exaccerr


def evaluate(params: ParamStore, world: ToyWorld, k: int = DEFAULT_K, horizon: int = DEFAULT_HORIZON,
             examples: Sequence[Example] | None = None) -> MetricsReport:
    """All three metrics from a single greedy decoding pass."""
    examples = world.eval if examples is None else examples
    if not examples:
        raise ValueError("empty eval split")
    preds = predict(params, examples)
    rows = score_texts(world, examples, [VOCAB.decode(p) for p in preds], k)
    probe = mismatch_probe(params, examples, horizon, preds)
    try:
        err = probe.exaccerr
    except DegenerateDenominator:
        err = None
    return MetricsReport(
        ex=float(np.mean([r["ex_ok"] for r in rows])),
        ts=float(np.mean([r["ts_ok"] for r in rows])),
        exaccerr=err, per_example=rows, k=k, probe=probe,
    )


def csv_row(report: MetricsReport, run_id: str, algorithm: str, divergence: str | None,
            alpha: float | None, rel_latency: float | None) -> dict:
    return {
        "run_id": run_id, "algorithm": algorithm, "divergence": divergence or "",
        "alpha": "" if alpha is None else alpha, "ex": report.ex, "ts": report.ts,
        "exaccerr": "" if report.exaccerr is None else report.exaccerr,
        "rel_latency": "" if rel_latency is None else rel_latency,
    }


def write_csv(rows: Sequence[dict], fields: Sequence[str] = CSV_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
