from .clients import (COLORS, ColorSegmenter, ColorTextScorer, EmbeddingScorer, HistogramScorer, HttpEmbeddingScorer,
                      HttpSegmenter, SegmenterClient, SegmentRecord, ServiceConfig, cosine, load_image)
from .report import BatchItem, EvalReport, evaluate_batch, read_batch, write_batch
from .segsim import (ConceptReferences, CountReport, SegSimReport, count_subjects, extract_segments, segsim_score,
                     union_segments)

__all__ = [
    "COLORS", "ColorSegmenter", "ColorTextScorer", "EmbeddingScorer", "HistogramScorer", "HttpEmbeddingScorer",
    "HttpSegmenter", "SegmenterClient", "SegmentRecord", "ServiceConfig", "cosine", "load_image",
    "BatchItem", "EvalReport", "evaluate_batch", "read_batch", "write_batch",
    "ConceptReferences", "CountReport", "SegSimReport", "count_subjects", "extract_segments", "segsim_score",
    "union_segments",
]
