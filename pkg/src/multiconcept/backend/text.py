"""Word-level toy tokenizer with a registry of learned concept tokens."""

from __future__ import annotations

import re
import zlib

from ..errors import ConfigError

_SPLIT = re.compile(r"<[^<>\s]+>|[A-Za-z0-9_'\-]+|[^\sA-Za-z0-9_]")

BOS, EOS, PAD = "<|bos|>", "<|eos|>", "<|pad|>"


def split_words(prompt: str) -> list[str]:
    """Split a prompt into word, concept-token and punctuation pieces."""
    return _SPLIT.findall(prompt)


def join_words(words) -> str:
    out = ""
    for w in words:
        if out and not re.fullmatch(r"[.,!?;:]", w):
            out += " "
        out += w
    return out


def is_concept_token(word: str) -> bool:
    return len(word) > 2 and word.startswith("<") and word.endswith(">")


class Tokenizer:
    """Ordinary words hash into ``hash_buckets`` ids; ``<...>`` tokens must be registered.

    Layout of the id space: 3 specials, then ``concept_slots`` reserved concept
    ids, then the hash buckets.
    """

    def __init__(self, hash_buckets: int = 1024, concept_slots: int = 32, max_length: int = 16):
        self.hash_buckets = hash_buckets
        self.concept_slots = concept_slots
        self.max_length = max_length
        self._concepts: dict[str, tuple[int, str]] = {}

    @property
    def vocab_size(self) -> int:
        return 3 + self.concept_slots + self.hash_buckets

    @property
    def special_ids(self) -> dict[str, int]:
        return {BOS: 0, EOS: 1, PAD: 2}

    def register(self, token: str, concept_id: str) -> int:
        if not is_concept_token(token):
            raise ConfigError(f"concept token {token!r} must look like <name>")
        if token in self._concepts:
            slot, owner = self._concepts[token]
            if owner != concept_id:
                raise ConfigError(f"token {token} already registered for concept {owner!r}")
            return slot
        if len(self._concepts) >= self.concept_slots:
            raise ConfigError("no free concept token slots left")
        slot = 3 + len(self._concepts)
        self._concepts[token] = (slot, concept_id)
        return slot

    def is_registered(self, token: str) -> bool:
        return token in self._concepts

    def token_id(self, word: str) -> int:
        if is_concept_token(word):
            if word not in self._concepts:
                raise ConfigError(f"concept token {word} is not registered with the tokenizer")
            return self._concepts[word][0]
        bucket = zlib.crc32(word.lower().encode("utf-8")) % self.hash_buckets
        return 3 + self.concept_slots + bucket

    def concept_of(self, token: str) -> str | None:
        entry = self._concepts.get(token)
        return entry[1] if entry else None

    def encode(self, prompt: str) -> tuple[list[int], dict[str, tuple[int, ...]]]:
        """Return padded ids and concept id -> positions of its tokens."""
        words = split_words(prompt)
        if len(words) + 2 > self.max_length:
            raise ConfigError(
                f"prompt has {len(words)} tokens; at most {self.max_length - 2} fit the toy context"
            )
        ids = [0] + [self.token_id(w) for w in words] + [1]
        slots: dict[str, list[int]] = {}
        for pos, w in enumerate(words, start=1):
            owner = self.concept_of(w)
            if owner is not None:
                slots.setdefault(owner, []).append(pos)
        ids += [2] * (self.max_length - len(ids))
        return ids, {k: tuple(v) for k, v in slots.items()}
