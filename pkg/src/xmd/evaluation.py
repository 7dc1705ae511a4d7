"""n-way identification of reconstructions and consolidated metric reports."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import jsonschema
import numpy as np

from .embeddings import normalize

REPORT_SCHEMA_VERSION = 1
TIE_CREDIT = 0.5

_NUM = {"type": "number"}
_BLOCK_OR_NULL = {"type": ["object", "null"]}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "retrieval", "classification", "identification", "run", "config_digest"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "retrieval": {
            "type": ["object", "null"],
            "additionalProperties": {
                "type": "object",
                "required": ["recall@1", "recall@5", "recall@10", "mean_recall"],
                "properties": {"recall@1": _NUM, "recall@5": _NUM, "recall@10": _NUM, "mean_recall": _NUM,
                               "per_query_rank": {"type": "array", "items": {"type": "integer"}}},
            },
        },
        "classification": {
            "type": ["object", "null"],
            "required": ["top1"],
            "properties": {"top1": _NUM, "top5": _NUM, "per_item": {"type": "array"}},
        },
        "identification": {
            "type": ["object", "null"],
            "additionalProperties": {
                "type": "object",
                "required": ["percent_correct", "trials", "per_item"],
                "properties": {"percent_correct": _NUM, "trials": {"type": ["integer", "null"]},
                               "per_item": {"type": "array", "items": _NUM}},
            },
        },
        "run": {"type": "object"},
        "config_digest": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
    },
}


class ReportError(ValueError):
    pass


@dataclass
class IdentificationResult:
    percent_correct: float
    trials: int | None
    per_item: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"percent_correct": self.percent_correct, "trials": self.trials, "per_item": list(self.per_item)}


def _outcome(correct: np.ndarray, wrong: np.ndarray) -> np.ndarray:
    return np.where(correct > wrong, 1.0, np.where(correct == wrong, TIE_CREDIT, 0.0))


def two_way_identification(gen_embs, gt_embs, distractor_pool, trials: int | None = 50,
                           rng: np.random.Generator | None = None,
                           exclude: Sequence[int | None] | None = None) -> IdentificationResult:
    """Per item: is cos(gen, gt) larger than cos(gen, distractor)?

    Each of ``trials`` draws picks a distractor uniformly from the pool with
    the item's own entry (``exclude[i]``, a pool row index or ``None``)
    removed.  ``trials=None`` enumerates every allowed distractor instead.
    Ties count ``TIE_CREDIT``.
    """
    gen = normalize(np.atleast_2d(gen_embs))
    gt = normalize(np.atleast_2d(gt_embs))
    pool = normalize(np.atleast_2d(distractor_pool))
    if gen.shape != gt.shape:
        raise ValueError("generated and ground-truth embeddings must pair up")
    if pool.shape[0] == 0:
        raise ValueError("empty distractor pool")
    if trials is not None and trials < 1:
        raise ValueError("trials must be >= 1")
    if exclude is None:
        exclude = [None] * gen.shape[0]
    rng = rng if rng is not None else np.random.default_rng(0)
    correct = np.sum(gen * gt, axis=1)
    wrong_all = gen @ pool.T
    per_item = []
    for i in range(gen.shape[0]):
        allowed = np.arange(pool.shape[0])
        if exclude[i] is not None:
            allowed = allowed[allowed != exclude[i]]
        if allowed.size == 0:
            raise ValueError(f"item {i}: no distractor left after excluding its ground truth")
        picks = allowed if trials is None else allowed[rng.integers(allowed.size, size=trials)]
        per_item.append(float(100.0 * _outcome(correct[i], wrong_all[i, picks]).mean()))
    return IdentificationResult(float(np.mean(per_item)), trials, per_item)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def config_digest(config: Any) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def build_report(retrieval: Mapping | None = None, classification: Mapping | None = None,
                 identification: Mapping | None = None, run: Mapping | None = None,
                 config: Any = None, path: str | Path | None = None) -> dict:
    """Assemble, validate and optionally write a metrics report.

    ``retrieval`` and ``identification`` map a name (e.g. ``"image"``,
    ``"clip"``) to their metric blocks.
    """
    if retrieval is None and classification is None and identification is None:
        raise ReportError("a report needs at least one metric block")

    def plain(block):
        if block is None:
            return None
        if isinstance(block, IdentificationResult):
            return block.to_dict()
        if isinstance(block, Mapping):
            return {k: plain(v) for k, v in block.items()}
        return block

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "retrieval": plain(retrieval),
        "classification": plain(classification),
        "identification": plain(identification),
        "run": dict(run or {}),
        "config_digest": config_digest(config if config is not None else run or {}),
    }
    report = json.loads(json.dumps(report))
    validate_report(report)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


def validate_report(report: Mapping) -> None:
    try:
        jsonschema.validate(report, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ReportError(f"report schema violation: {exc.message}") from exc


def read_report(path) -> dict:
    report = json.loads(Path(path).read_text())
    validate_report(report)
    return report
