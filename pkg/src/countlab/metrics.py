"""Answer parsing, the four counting metrics and evaluation protocols."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelConfig, OverrideSet, build_sequence, generate_answer, iter_batches
from .vocab import Vocab

PARSE_FAIL = -1


def parse_answer(raw) -> int:
    """Digit strings map to integers; anything else is the -1 penalty value."""
    if raw is None:
        return PARSE_FAIL
    s = str(raw).strip()
    if s.isascii() and s.isdigit():
        return int(s)
    return PARSE_FAIL


@dataclass
class PredictionRecord:
    ground_truth: int
    raw_answer: str
    parsed: int

    @classmethod
    def from_raw(cls, ground_truth: int, raw: str) -> "PredictionRecord":
        return cls(int(ground_truth), raw, parse_answer(raw))


@dataclass
class MetricsReport:
    acc: float
    mae: float
    rmse: float
    obo: float
    n: int
    parse_failure_rate: float
    per_count: dict[int, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_count"] = {str(k): v for k, v in self.per_count.items()}
        return d


def _core(p: np.ndarray, y: np.ndarray) -> dict:
    err = p - y
    return {
        "acc": float(np.mean(p == y)),
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(math.sqrt(np.mean(err.astype(float) ** 2))),
        "obo": float(np.mean(np.abs(err) <= 1)),
        "n": int(len(y)),
    }


def compute_metrics(records) -> MetricsReport:
    """ACC, MAE, RMSE and off-by-one accuracy over prediction records."""
    records = list(records)
    if not records:
        raise ValueError("no prediction records")
    p = np.array([r.parsed for r in records], dtype=np.int64)
    y = np.array([r.ground_truth for r in records], dtype=np.int64)
    core = _core(p, y)
    per = {int(c): _core(p[y == c], y[y == c]) for c in np.unique(y)}
    return MetricsReport(core["acc"], core["mae"], core["rmse"], core["obo"], core["n"],
                         float(np.mean(p == PARSE_FAIL)), per)


def predict(params, cfg: ModelConfig, vocab: Vocab, items, overrides: OverrideSet | None = None,
            batch_size: int = 128) -> list[str]:
    """Greedy answer token for every (scene, record) item, in input order."""
    seqs = [build_sequence(r, s, cfg, vocab) for s, r in items]
    out: list[str] = [""] * len(seqs)
    for idxs, batch in iter_batches(seqs, batch_size):
        pred = generate_answer(params, cfg, batch, overrides)
        for i, tok in zip(idxs, pred):
            out[i] = vocab.tokens[int(tok)]
    return out


def eval_model(params, cfg: ModelConfig, vocab: Vocab, items, overrides: OverrideSet | None = None):
    """Evaluate count questions; returns (MetricsReport, per-scene log)."""
    items = [(s, r) for s, r in items if r.task == "count"]
    if not items:
        raise ValueError("split has no count questions")
    raws = predict(params, cfg, vocab, items, overrides)
    recs = [PredictionRecord.from_raw(s.count, raw) for (s, _), raw in zip(items, raws)]
    logs = [{"scene_id": r.scene_id, "count": s.count, "raw": raw, "parsed": pr.parsed}
            for (s, r), raw, pr in zip(items, raws, recs)]
    return compute_metrics(recs), logs


def task_accuracy(params, cfg: ModelConfig, vocab: Vocab, items, overrides=None) -> float:
    """Exact-match accuracy on any task (answers compared as tokens)."""
    raws = predict(params, cfg, vocab, items, overrides)
    return float(np.mean([raw == r.answer[0] for (_, r), raw in zip(items, raws)]))


def seed_summary(reports: list[MetricsReport]) -> dict:
    """Mean and sample standard deviation of each metric across seeds."""
    out = {"n_seeds": len(reports)}
    for m in ("acc", "mae", "rmse", "obo"):
        vals = np.array([getattr(r, m) for r in reports])
        out[m] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                  "values": vals.tolist()}
    return out


def range_extrapolation(params, cfg: ModelConfig, vocab: Vocab, test_ranges: dict, make_items) -> dict:
    """Evaluate on count intervals, e.g. ``{"6-9": range(6, 10)}``.

    ``make_items(counts)`` builds the evaluation split for a count range.
    """
    out = {}
    for name, counts in test_ranges.items():
        counts = list(counts)
        if max(counts) > vocab.max_count:
            raise ValueError(f"vocabulary has no count token for {max(counts)}; enlarge max_count")
        out[name] = eval_model(params, cfg, vocab, make_items(counts))[0]
    return out


ABLATION_ROWS = (
    ("baseline", False, False, False),
    ("sft", True, False, False),
    ("sft+focus", True, True, False),
    ("sft+focus+temperature", True, True, True),
)


def ablation_grid(models: dict, cfg: ModelConfig, vocab: Vocab, suites: dict) -> list[dict]:
    """Rows in the SFT / focus / temperature layout.

    ``models[row] = (params, overrides | None)`` for each row name in
    :data:`ABLATION_ROWS`; ``suites[name] = items``. Missing rows raise KeyError.
    """
    rows = []
    for name, sft, foc, temp in ABLATION_ROWS:
        if name not in models:
            raise KeyError(f"missing checkpoint for ablation row {name!r}")
        params, ov = models[name]
        row = {"row": name, "sft": sft, "focus": foc, "temperature": temp}
        for suite, items in suites.items():
            row[suite] = eval_model(params, cfg, vocab, items, ov)[0].to_dict()
        rows.append(row)
    return rows
