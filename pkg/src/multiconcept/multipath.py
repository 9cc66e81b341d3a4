"""Prompt variants per concept and the base + custom branch loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .backend.adapters import AdapterSet
from .backend.text import join_words, split_words
from .backend.types import AttentionRecord, TextEncoding
from .errors import ConfigError


@dataclass
class ConceptSpec:
    concept_id: str
    concept_tokens: tuple[str, ...]
    class_word: str
    similar_tokens: tuple[str, ...] = ()
    adapter: AdapterSet | None = None
    reference_images: tuple[str, ...] = ()
    variant_prompt: str | None = None  # hand-authored variant, bypasses span replacement

    def __post_init__(self):
        self.concept_tokens = tuple(self.concept_tokens)
        self.similar_tokens = tuple(self.similar_tokens)
        if not self.concept_tokens:
            raise ConfigError(f"concept {self.concept_id!r} has no concept tokens")


def edit_prompt(base_prompt: str, concept: ConceptSpec, tokenizer=None) -> str:
    """Replace every span naming the concept's class or a similar subject by the concept tokens.

    Matching is word-wise and case-insensitive; longer spans win. All other
    words keep their order.
    """
    if tokenizer is not None:
        missing = [tok for tok in concept.concept_tokens if not tokenizer.is_registered(tok)]
        if missing:
            raise ConfigError(f"concept {concept.concept_id!r}: tokens {missing} are not registered")
    if concept.variant_prompt is not None:
        return concept.variant_prompt
    spans = {tuple(w.lower() for w in split_words(s)) for s in (*concept.similar_tokens, concept.class_word) if s}
    spans = sorted((s for s in spans if s), key=len, reverse=True)
    words = split_words(base_prompt)
    out, i = [], 0
    while i < len(words):
        for span in spans:
            if tuple(w.lower() for w in words[i:i + len(span)]) == span:
                out.extend(concept.concept_tokens)
                i += len(span)
                break
        else:
            out.append(words[i])
            i += 1
    return join_words(out)


@dataclass(frozen=True)
class PromptSpec:
    base_prompt: str
    variants: Mapping[str, str]


def build_prompt_spec(base_prompt: str, concepts: Sequence[ConceptSpec], tokenizer=None) -> PromptSpec:
    ids = [c.concept_id for c in concepts]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate concept ids in {ids}")
    return PromptSpec(base_prompt, {c.concept_id: edit_prompt(base_prompt, c, tokenizer) for c in concepts})


@dataclass(frozen=True)
class Branch:
    name: str
    prompt: str
    adapter: AdapterSet | None = None
    concept_id: str | None = None


@dataclass(frozen=True)
class BranchSet:
    """Base branch first, then one custom branch per concept in declaration order."""

    base: Branch
    customs: tuple[Branch, ...] = ()

    def __iter__(self):
        yield self.base
        yield from self.customs

    def __len__(self):
        return 1 + len(self.customs)

    @property
    def n_concepts(self) -> int:
        return len(self.customs)

    @property
    def concept_ids(self) -> list[str]:
        return [b.concept_id for b in self.customs]


def make_branch_set(prompts: PromptSpec, concepts: Sequence[ConceptSpec]) -> BranchSet:
    customs = []
    for c in concepts:
        if c.adapter is None:
            raise ConfigError(f"concept {c.concept_id!r} has no adapter loaded")
        customs.append(Branch(c.concept_id, prompts.variants[c.concept_id], c.adapter, c.concept_id))
    return BranchSet(Branch("base", prompts.base_prompt), tuple(customs))


@dataclass(frozen=True)
class BranchTexts:
    cond: TextEncoding
    uncond: TextEncoding


def encode_branches(backend, branches: BranchSet) -> list[BranchTexts]:
    """Conditional and empty-prompt encodings for every branch, with its adapter applied."""
    out = []
    for branch in branches:
        try:
            out.append(BranchTexts(backend.encode_text(branch.prompt, branch.adapter),
                                   backend.encode_text("", branch.adapter)))
        except ConfigError as exc:
            raise ConfigError(f"branch {branch.name!r}: {exc}") from exc
    return out


@dataclass
class BranchOutput:
    branch: str
    noise: np.ndarray
    record: AttentionRecord = field(default_factory=AttentionRecord)


def run_branches(backend, z_t, t: int, branches: BranchSet, record_spec=None, overrides=None,
                 texts: Sequence[BranchTexts] | None = None, conditional: bool = True) -> list[BranchOutput]:
    """Evaluate every branch on the same latent, one after another.

    Each custom branch runs with its own adapter merged as an overlay on the
    shared base weights, so adapters are swapped in and out per call and never
    coexist. ``overrides`` is a sequence aligned with the branch order (or None).
    """
    if texts is None:
        texts = encode_branches(backend, branches)
    results = []
    for i, branch in enumerate(branches):
        text = texts[i].cond if conditional else texts[i].uncond
        layer_overrides = overrides[i] if overrides is not None else None
        noise, record = backend.predict_noise(z_t, t, text, adapter=branch.adapter,
                                              record_spec=record_spec, overrides=layer_overrides)
        results.append(BranchOutput(branch.name, noise, record))
    return results
