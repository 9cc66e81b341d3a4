"""Batch evaluation over a JSONL manifest, with JSONL and aligned-table reports."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ConfigError, EvaluationError
from .clients import EmbeddingScorer, SegmenterClient, load_image
from .segsim import ConceptReferences, count_subjects, segsim_score

log = logging.getLogger(__name__)

# full-scale reference numbers for the method; documentation only, never compared against
REFERENCE_TABLE = {"clip_t": 0.3107, "image_reward": 1.2542, "clip_i": 0.9190, "dino": 0.8569,
                   "frac_under": 0.0075, "frac_over": 0.0350}


@dataclass
class BatchItem:
    image: str
    prompt_id: str = ""
    seed: int | None = None
    prompt: str = ""


def read_batch(path) -> list[BatchItem]:
    items = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                items.append(BatchItem(**raw))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad batch entry: {exc}") from exc
    return items


def write_batch(path, items: Sequence[BatchItem]):
    with open(path, "w") as fh:
        for item in items:
            fh.write(json.dumps(asdict(item), sort_keys=True) + "\n")


@dataclass
class EvalReport:
    rows: list[dict]
    summary: dict
    failures: dict[str, str] = field(default_factory=dict)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "image", **row}, sort_keys=True) for row in self.rows]
        lines.append(json.dumps({"type": "summary", **self.summary, "failures": self.failures}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        cols = [("image", "image"), ("prompt_id", "prompt"), ("seed", "seed"),
                ("text_alignment", "text-align"), ("segsim", "segsim"), ("count", "count")]
        body = [[_fmt(row.get(key)) for key, _ in cols] for row in self.rows]
        s = self.summary
        body.append(["mean", "", "", _fmt(s.get("text_alignment")), _fmt(s.get("segsim")), ""])
        header = [title for _, title in cols]
        widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(cols))]
        line = lambda r: "  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()  # noqa: E731
        out = [line(header), line(["-" * w for w in widths]), *map(line, body), ""]
        et = s.get("expected_total")
        out.append(f"n<{et}: {_fmt(s.get('frac_under'))}   n>{et}: {_fmt(s.get('frac_over'))}   "
                   f"evaluated: {s.get('n_evaluated')}   failed: {len(self.failures)}")
        return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def evaluate_batch(items: Sequence[BatchItem], segmenter: SegmenterClient, scorer: EmbeddingScorer,
                   concepts: Sequence[ConceptReferences] = (), segsim_prompts: Sequence[str] = (),
                   count_prompts: Sequence[str] = (), expected_total: int = 2, text_scorer=None,
                   base_dir=".") -> EvalReport:
    """Score every image; per-image failures are recorded and skipped."""
    base_dir = Path(base_dir)
    loaded, failures, rows = [], {}, []
    for item in items:
        try:
            loaded.append((item, load_image(base_dir / item.image)))
        except EvaluationError as exc:
            failures[item.image] = str(exc)
    counts = count_subjects([(it.image, img) for it, img in loaded], count_prompts, expected_total, segmenter) \
        if count_prompts else None
    if counts is not None:
        failures.update(counts.failures)
    for item, image in loaded:
        if item.image in failures:
            continue
        row = {"image": item.image, "prompt_id": item.prompt_id, "seed": item.seed}
        try:
            if text_scorer is not None and item.prompt:
                row["text_alignment"] = float(text_scorer.score(image, item.prompt))
            if concepts:
                report = segsim_score(image, concepts, segsim_prompts or [c.prompt for c in concepts],
                                      segmenter, scorer, item.image)
                row["segsim"] = report.final
                row["concept_scores"] = report.concept_scores
        except EvaluationError as exc:
            failures[item.image] = str(exc)
            continue
        if counts is not None:
            row["count"] = counts.counts[item.image]
        rows.append(row)

    def mean_of(key):
        vals = [r[key] for r in rows if key in r]
        return float(np.mean(vals)) if vals else None

    summary = {"n_evaluated": len(rows), "text_alignment": mean_of("text_alignment"), "segsim": mean_of("segsim"),
               "expected_total": expected_total}
    if counts is not None:
        ok = [r["count"] for r in rows]
        n = len(ok)
        summary["frac_under"] = sum(c < expected_total for c in ok) / n if n else None
        summary["frac_over"] = sum(c > expected_total for c in ok) / n if n else None
    return EvalReport(rows, summary, failures)
