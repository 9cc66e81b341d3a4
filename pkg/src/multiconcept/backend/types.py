"""Data carried between the denoiser and the rest of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Protocol, Union

import numpy as np

from ..errors import ContractError

RECORD_FIELDS = frozenset({"keys", "probs", "output"})

# A replacement feature map, or a hook mapping the native output to its replacement.
Override = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]
OverrideMap = Mapping[str, Override]


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


def validate_latent(z, channels: int | None = None) -> np.ndarray:
    z = np.asarray(z)
    if z.ndim != 3:
        raise ContractError(f"latent must be [C, H, W], got shape {z.shape}")
    c, h, w = z.shape
    if channels is not None and c != channels:
        raise ContractError(f"latent has {c} channels, backend expects {channels}")
    for n in (h, w):
        if n < 8 or n & (n - 1):
            raise ContractError(f"latent spatial size must be a power of two >= 8, got {h}x{w}")
    if not np.all(np.isfinite(z)):
        raise ContractError("latent contains non-finite values")
    return z


@dataclass(frozen=True)
class TextEncoding:
    """Token ids plus the context matrix fed to cross-attention.

    ``layer_embeddings`` holds per-layer contexts when an adapter supplies
    layer-wise concept embeddings; layers not listed use ``embeddings``.
    """

    token_ids: tuple[int, ...]
    embeddings: np.ndarray
    concept_token_slots: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    layer_embeddings: Mapping[str, np.ndarray] = field(default_factory=dict)
    prompt: str = ""

    def context_for(self, layer_id: str) -> np.ndarray:
        return self.layer_embeddings.get(layer_id, self.embeddings)


@dataclass(frozen=True)
class LayerRecord:
    layer_id: str
    kind: str  # "self" or "cross"
    keys: np.ndarray | None = None
    probs: np.ndarray | None = None
    output: np.ndarray | None = None

    def __post_init__(self):
        for name in RECORD_FIELDS:
            value = getattr(self, name)
            if value is not None and value.flags.writeable:
                object.__setattr__(self, name, _frozen(value))


class AttentionRecord(Mapping[str, LayerRecord]):
    """Immutable mapping layer id -> :class:`LayerRecord`."""

    def __init__(self, layers: Mapping[str, LayerRecord] | None = None):
        self._layers = MappingProxyType(dict(layers or {}))

    def __getitem__(self, layer_id: str) -> LayerRecord:
        return self._layers[layer_id]

    def __iter__(self):
        return iter(self._layers)

    def __len__(self):
        return len(self._layers)

    def __repr__(self):
        return f"AttentionRecord({list(self._layers)})"


def normalize_record_spec(spec) -> dict[str, frozenset[str]]:
    """Accept an iterable of layer ids (all fields) or a mapping layer id -> fields."""
    if spec is None:
        return {}
    if isinstance(spec, Mapping):
        out = {}
        for layer, fields in spec.items():
            fields = frozenset([fields] if isinstance(fields, str) else fields)
            unknown = fields - RECORD_FIELDS
            if unknown:
                raise ContractError(f"unknown record fields {sorted(unknown)} for {layer}")
            out[layer] = fields
        return out
    if isinstance(spec, str):
        spec = [spec]
    return {layer: RECORD_FIELDS for layer in spec}


class DenoiserBackend(Protocol):
    """What the sampler and pipeline need from a noise-prediction network.

    Backends that cannot differentiate set ``supports_gradients = False`` and
    raise :class:`~multiconcept.errors.CapabilityError` from ``loss_gradient``.
    """

    supports_gradients: bool
    latent_channels: int

    def encode_text(self, prompt: str, adapter=None) -> TextEncoding: ...

    def predict_noise(self, z, t: int, text: TextEncoding, adapter=None, record_spec=None,
                      overrides: OverrideMap | None = None) -> tuple[np.ndarray, AttentionRecord]: ...

    def loss_gradient(self, z, t: int, branch_inputs: Iterable, loss_fn, layer_id: str): ...

    def layer_resolution(self, layer_id: str, latent_hw: tuple[int, int]) -> tuple[int, int]: ...

    def weights_hash(self) -> str: ...
