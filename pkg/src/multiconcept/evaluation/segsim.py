"""Segment-level image alignment and subject counting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ConfigError, EvaluationError
from .clients import EmbeddingScorer, SegmentRecord, SegmenterClient

log = logging.getLogger(__name__)


def extract_segments(image, prompt: str, client: SegmenterClient, image_id: str = "") -> list[SegmentRecord]:
    try:
        return list(client.segment(image, prompt, image_id))
    except EvaluationError:
        raise
    except Exception as exc:  # client bugs or transport errors become evaluation errors
        raise EvaluationError(f"segmenter failed on {image_id or 'image'} with prompt {prompt!r}: {exc}") from exc


def union_segments(groups: Sequence[Sequence[SegmentRecord]]) -> list[SegmentRecord]:
    """Concatenate segment lists, dropping repeats of an identical mask."""
    seen, out = set(), []
    for group in groups:
        for seg in group:
            key = (seg.mask.shape, np.packbits(seg.mask).tobytes())
            if key not in seen:
                seen.add(key)
                out.append(seg)
    return out


@dataclass
class ConceptReferences:
    concept_id: str
    prompt: str  # brief class prompt used to cut the subject out of each reference
    images: Sequence[tuple[str, np.ndarray]]  # (image id, pixels)


@dataclass
class SegSimReport:
    concept_scores: dict[str, float]
    final: float
    reference_scores: dict[str, dict[str, float]] = field(default_factory=dict)
    pairs: dict[str, dict[str, list[list[float]]]] = field(default_factory=dict)  # concept -> ref -> [ref seg][gen seg]

    def to_dict(self) -> dict:
        return {"final": self.final, "concept_scores": self.concept_scores,
                "reference_scores": self.reference_scores, "pairs": self.pairs}


def segsim_score(generated, concepts: Sequence[ConceptReferences], prompts: Sequence[str],
                 segmenter: SegmenterClient, scorer: EmbeddingScorer, image_id: str = "generated") -> SegSimReport:
    """Max segment-pair similarity per reference image, averaged per concept, then across concepts."""
    if not concepts:
        raise ConfigError("segsim needs at least one concept")
    for c in concepts:
        if not c.images:
            raise ConfigError(f"concept {c.concept_id!r} has no reference images")
    gen = union_segments([extract_segments(generated, p, segmenter, image_id) for p in prompts])
    concept_scores, ref_scores, pairs = {}, {}, {}
    for c in concepts:
        ref_scores[c.concept_id], pairs[c.concept_id] = {}, {}
        for ref_id, ref_image in c.images:
            ref_segs = extract_segments(ref_image, c.prompt, segmenter, ref_id)
            sims = [[float(scorer.similarity(r, g)) for g in gen] for r in ref_segs]
            best = 0.0
            for row in sims:
                for s in row:
                    best = max(best, s)
            ref_scores[c.concept_id][ref_id] = best
            pairs[c.concept_id][ref_id] = sims
        concept_scores[c.concept_id] = float(np.mean(list(ref_scores[c.concept_id].values())))
    final = float(np.mean(list(concept_scores.values())))
    return SegSimReport(concept_scores, final, ref_scores, pairs)


@dataclass
class CountReport:
    counts: dict[str, int]
    failures: dict[str, str]
    expected_total: int
    frac_under: float
    frac_over: float

    @property
    def n_evaluated(self) -> int:
        return len(self.counts)

    def to_dict(self) -> dict:
        return {"counts": self.counts, "failures": self.failures, "expected_total": self.expected_total,
                "frac_under": self.frac_under, "frac_over": self.frac_over}


def count_subjects(images: Sequence[tuple[str, np.ndarray]], category_prompts: Sequence[str], expected_total: int,
                   client: SegmenterClient) -> CountReport:
    """Fractions of images with fewer / more target subjects than expected.

    Failed images are recorded and left out of both fractions.
    """
    if expected_total < 1:
        raise ConfigError("expected_total must be >= 1")
    counts, failures = {}, {}
    for image_id, image in images:
        try:
            counts[image_id] = sum(len(extract_segments(image, p, client, image_id)) for p in category_prompts)
        except EvaluationError as exc:
            log.warning("counting failed for %s: %s", image_id, exc)
            failures[image_id] = str(exc)
    n = len(counts)
    under = sum(v < expected_total for v in counts.values())
    over = sum(v > expected_total for v in counts.values())
    return CountReport(counts, failures, expected_total, under / n if n else float("nan"), over / n if n else float("nan"))
