"""Low-rank concept adapters and their merge into base weights."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..archive import hash_arrays, load_archive, save_archive
from ..errors import ConfigError, ContractError

DEFAULT_MERGE_COEFFICIENT = 0.7
TOKEN_TABLE = "text.token_embedding"


@dataclass
class AdapterSet:
    """Per-layer deltas ``(down [r, d_in], up [d_out, r])`` plus concept token embeddings.

    ``token_embeddings`` values are ``[D]`` (shared by every layer) or
    ``[n_cross_layers, D]`` (one row per cross-attention layer, in backend order).
    """

    concept_id: str
    deltas: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    token_embeddings: dict[str, np.ndarray] = field(default_factory=dict)
    merge_coefficient: float = DEFAULT_MERGE_COEFFICIENT

    def __post_init__(self):
        if not 0.0 <= self.merge_coefficient <= 1.0:
            raise ConfigError(f"merge coefficient must lie in [0, 1], got {self.merge_coefficient}")
        for name, (down, up) in self.deltas.items():
            if down.ndim != 2 or up.ndim != 2 or up.shape[1] != down.shape[0] or down.shape[0] < 1:
                raise ContractError(f"adapter {self.concept_id}: malformed low-rank pair for {name}")

    @property
    def rank(self) -> int:
        return max((down.shape[0] for down, _ in self.deltas.values()), default=0)

    @property
    def tokens(self) -> list[str]:
        return list(self.token_embeddings)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, (down, up) in self.deltas.items():
            out[f"lora/{name}/down"] = down
            out[f"lora/{name}/up"] = up
        for token, emb in self.token_embeddings.items():
            out[f"token/{token}"] = emb
        return out

    def content_hash(self) -> str:
        arrays = self.arrays()
        arrays["coefficient"] = np.array([self.merge_coefficient])
        return hash_arrays(arrays)

    @classmethod
    def seeded(cls, concept_id: str, tokens: Sequence[str], targets: Mapping[str, tuple[int, int]],
               embed_dim: int, seed: int, rank: int = 4, scale: float = 0.5,
               merge_coefficient: float = DEFAULT_MERGE_COEFFICIENT) -> "AdapterSet":
        """Synthetic adapter for the toy backend; nothing here is trained."""
        rng = np.random.default_rng(seed)
        deltas = {}
        for name in sorted(targets):
            d_out, d_in = targets[name]
            down = (rng.standard_normal((rank, d_in)) / np.sqrt(d_in)).astype(np.float32)
            up = (rng.standard_normal((d_out, rank)) * scale / np.sqrt(rank)).astype(np.float32)
            deltas[name] = (down, up)
        embeds = {tok: rng.standard_normal(embed_dim).astype(np.float32) for tok in tokens}
        return cls(concept_id, deltas, embeds, merge_coefficient)


def merge_adapter(base_weights: Mapping[str, np.ndarray], adapter: AdapterSet,
                  coefficient: float | None = None, token_slots: Mapping[str, int] | None = None,
                  cross_layers: Sequence[str] = ()) -> dict[str, np.ndarray]:
    """Return ``W + coefficient * (up @ down)`` for adapted layers; ``base_weights`` is untouched.

    With ``token_slots`` the adapter's token embeddings overwrite their rows of
    the token table. Layer-wise embeddings produce one extra table per
    cross-attention layer, stored as ``text.token_embedding/<layer_id>``.
    """
    c = adapter.merge_coefficient if coefficient is None else float(coefficient)
    if not 0.0 <= c <= 1.0:
        raise ConfigError(f"merge coefficient must lie in [0, 1], got {c}")
    merged = dict(base_weights)
    for name, (down, up) in adapter.deltas.items():
        if name not in base_weights:
            raise ContractError(f"adapter {adapter.concept_id} targets unknown weight {name}")
        w = base_weights[name]
        if w.shape != (up.shape[0], down.shape[1]):
            raise ContractError(
                f"adapter {adapter.concept_id}: delta {up.shape[0]}x{down.shape[1]} does not fit {name} {w.shape}"
            )
        if c != 0.0:
            merged[name] = w + c * (up.astype(w.dtype) @ down.astype(w.dtype))
    if token_slots is not None and adapter.token_embeddings:
        table = np.array(base_weights[TOKEN_TABLE], copy=True)
        layerwise = {}
        for token, emb in adapter.token_embeddings.items():
            if token not in token_slots:
                raise ConfigError(f"adapter {adapter.concept_id}: token {token} has no tokenizer slot")
            emb = np.asarray(emb, dtype=table.dtype)
            if emb.ndim == 1:
                if emb.shape[0] != table.shape[1]:
                    raise ContractError(f"token {token}: embedding width {emb.shape[0]} != {table.shape[1]}")
                table[token_slots[token]] = emb
            else:
                if emb.shape != (len(cross_layers), table.shape[1]):
                    raise ContractError(f"token {token}: layer-wise embedding must be {len(cross_layers)}x{table.shape[1]}")
                layerwise[token] = emb
        merged[TOKEN_TABLE] = table
        for i, layer in enumerate(cross_layers if layerwise else ()):
            per_layer = np.array(table, copy=True)
            for token, emb in layerwise.items():
                per_layer[token_slots[token]] = emb[i]
            merged[f"{TOKEN_TABLE}/{layer}"] = per_layer
    return merged


def save_adapter(path, adapter: AdapterSet) -> Path:
    meta = {
        "concept_id": adapter.concept_id,
        "rank": adapter.rank,
        "merge_coefficient": adapter.merge_coefficient,
        "tokens": adapter.tokens,
    }
    return save_archive(path, adapter.arrays(), meta)


def load_adapter(path, concept_id: str | None = None) -> AdapterSet:
    try:
        arrays, meta = load_archive(path)
    except (OSError, ValueError) as exc:
        who = f" for concept {concept_id!r}" if concept_id else ""
        raise ConfigError(f"cannot load adapter{who} from {path}: {exc}") from exc
    deltas, tokens = {}, {}
    for key, value in arrays.items():
        if key.startswith("lora/") and key.endswith("/down"):
            name = key[len("lora/"):-len("/down")]
            deltas[name] = (value, arrays[f"lora/{name}/up"])
        elif key.startswith("token/"):
            tokens[key[len("token/"):]] = value
    order = meta.get("tokens", sorted(tokens))
    return AdapterSet(
        concept_id=concept_id or meta["concept_id"],
        deltas=deltas,
        token_embeddings={t: tokens[t] for t in order},
        merge_coefficient=float(meta.get("merge_coefficient", DEFAULT_MERGE_COEFFICIENT)),
    )
