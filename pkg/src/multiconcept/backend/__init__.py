from .adapters import DEFAULT_MERGE_COEFFICIENT, AdapterSet, load_adapter, merge_adapter, save_adapter
from .attention import AttentionWeights, attention_forward
from .codec import LinearCodec, from_uint8, to_uint8
from .text import Tokenizer
from .toy import DEFAULT_SEED, ToyConfig, ToyUNet
from .types import AttentionRecord, DenoiserBackend, LayerRecord, TextEncoding, validate_latent

__all__ = [
    "AdapterSet", "AttentionRecord", "AttentionWeights", "DEFAULT_MERGE_COEFFICIENT", "DEFAULT_SEED",
    "DenoiserBackend", "LayerRecord", "LinearCodec", "TextEncoding", "Tokenizer", "ToyConfig", "ToyUNet",
    "attention_forward", "from_uint8", "load_adapter", "merge_adapter", "save_adapter", "to_uint8",
    "validate_latent",
]
