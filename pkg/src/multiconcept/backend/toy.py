"""Deterministic toy attention U-Net used as the reference backend.

Layout (latent ``H x W``)::

    conv_in -> enc.res0 (H)  -> avgpool -> enc.res1 + enc.0 (H/2)
            -> mid.res + mid.0 (H/2)
            -> dec.0..dec.2 (H/2) -> upsample + skip -> dec.3..dec.5 (H)
            -> conv_out

Every ``enc.N`` / ``mid.N`` / ``dec.N`` transformer block holds a self-attention
layer ``<block>.self`` and a cross-attention layer ``<block>.cross``. The first
decoder self-attention is therefore ``dec.0.self`` and the sixth ``dec.5.self``.

Weights are drawn once from a fixed seed and stored as float32; all
computation runs in float64. The predicted noise is
``sqrt(1 - alpha_bar_t) * z + out_scale * net(z, t)``; the first term is the
exact noise predictor for standard-normal data, which keeps untrained DDIM
trajectories bounded.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from ..archive import hash_arrays, load_archive, save_archive
from ..errors import CapabilityError, ConfigError, ContractError
from ..scheduler import make_schedule
from .adapters import TOKEN_TABLE, AdapterSet, merge_adapter
from .attention import AttentionWeights, attention_forward
from .text import Tokenizer
from .types import AttentionRecord, LayerRecord, TextEncoding, normalize_record_spec, validate_latent

DEFAULT_SEED = 20240817

ENCODER_BLOCKS = ("enc.0",)
MID_BLOCKS = ("mid.0",)
DECODER_BLOCKS = tuple(f"dec.{i}" for i in range(6))
LOW_RES_BLOCKS = ENCODER_BLOCKS + MID_BLOCKS + DECODER_BLOCKS[:3]


@dataclass(frozen=True)
class ToyConfig:
    latent_channels: int = 4
    width: int = 32
    heads: int = 2
    context_dim: int = 32
    time_dim: int = 32
    groups: int = 8
    ff_mult: int = 2
    key_gain: float = 1.0
    out_scale: float = 0.5
    seed: int = DEFAULT_SEED
    hash_buckets: int = 1024
    concept_slots: int = 32
    max_length: int = 16
    T_train: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012


class _EarlyExit(Exception):
    pass


class ToyUNet:
    supports_gradients = True

    def __init__(self, config: ToyConfig | None = None, weights: Mapping[str, np.ndarray] | None = None):
        self.config = config or ToyConfig()
        cfg = self.config
        self.latent_channels = cfg.latent_channels
        self.tokenizer = Tokenizer(cfg.hash_buckets, cfg.concept_slots, cfg.max_length)
        self.schedule = make_schedule(cfg.T_train, cfg.beta_start, cfg.beta_end)
        self.blocks = ENCODER_BLOCKS + MID_BLOCKS + DECODER_BLOCKS
        self.attention_layers = tuple(f"{b}.{kind}" for b in self.blocks for kind in ("self", "cross"))
        self.cross_layers = tuple(f"{b}.cross" for b in self.blocks)
        self.decoder_attention_layers = tuple(f"{b}.{kind}" for b in DECODER_BLOCKS for kind in ("self", "cross"))
        self.decoder_self_layers = tuple(f"{b}.self" for b in DECODER_BLOCKS)
        self._numpy_weights = dict(weights) if weights is not None else self._init_weights()
        self._check_weights()
        self._weights = {k: torch.from_numpy(np.asarray(v, dtype=np.float64)) for k, v in self._numpy_weights.items()}
        self._hash = None

    # -- weights -----------------------------------------------------------------

    def _shapes(self) -> dict[str, tuple[int, ...]]:
        cfg = self.config
        d, c, dc, inner = cfg.width, cfg.latent_channels, cfg.context_dim, cfg.width
        shapes = {
            "conv_in": (d, c, 3, 3),
            "conv_out": (c, d, 3, 3),
            "time.fc1": (d, cfg.time_dim),
            "time.fc2": (d, d),
            "skip": (d, d),
            TOKEN_TABLE: (self.tokenizer.vocab_size, dc),
            "text.position": (cfg.max_length, dc),
            "text.fc1": (dc, dc),
            "text.fc2": (dc, dc),
        }
        for res in ("enc.res0", "enc.res1", "mid.res") + tuple(f"{b}.res" for b in DECODER_BLOCKS):
            shapes[f"{res}.conv1"] = (d, d, 3, 3)
            shapes[f"{res}.conv2"] = (d, d, 3, 3)
            shapes[f"{res}.temb"] = (d, d)
        for b in self.blocks:
            for kind, ctx in (("self", d), ("cross", dc)):
                shapes[f"{b}.{kind}.q"] = (inner, d)
                shapes[f"{b}.{kind}.k"] = (inner, ctx)
                shapes[f"{b}.{kind}.v"] = (inner, ctx)
                shapes[f"{b}.{kind}.o"] = (d, inner)
            shapes[f"{b}.ff1"] = (cfg.ff_mult * d, d)
            shapes[f"{b}.ff2"] = (d, cfg.ff_mult * d)
        return shapes

    def _init_weights(self) -> dict[str, np.ndarray]:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        head_dim = cfg.width // cfg.heads
        weights = {}
        for name, shape in sorted(self._shapes().items()):
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            w = rng.standard_normal(shape) / math.sqrt(fan_in)
            if name.endswith(".q"):
                w = w / math.sqrt(head_dim)
            elif name.endswith(".k"):
                w = w * cfg.key_gain
            elif name.endswith((".conv2", ".o", ".ff2")):
                w = w * 0.5
            elif name in (TOKEN_TABLE, "text.position"):
                w = rng.standard_normal(shape) if name == TOKEN_TABLE else w * 0.5
            weights[name] = w.astype(np.float32)
        return weights

    def _check_weights(self):
        shapes = self._shapes()
        missing = set(shapes) - set(self._numpy_weights)
        if missing:
            raise ConfigError(f"backend weights missing {sorted(missing)[:5]}")
        for name, shape in shapes.items():
            if tuple(self._numpy_weights[name].shape) != shape:
                raise ConfigError(f"weight {name} has shape {self._numpy_weights[name].shape}, expected {shape}")

    @property
    def weights(self) -> Mapping[str, np.ndarray]:
        return self._numpy_weights

    def weights_hash(self) -> str:
        if self._hash is None:
            self._hash = hash_arrays(self._numpy_weights)
        return self._hash

    def save(self, path) -> Path:
        return save_archive(path, self._numpy_weights, {"config": asdict(self.config)})

    @classmethod
    def load(cls, path) -> "ToyUNet":
        arrays, meta = load_archive(path)
        return cls(ToyConfig(**meta["config"]), arrays)

    def adapter_targets(self) -> dict[str, tuple[int, int]]:
        """Attention projection weights an adapter may carry deltas for."""
        shapes = self._shapes()
        return {f"{layer}.{p}": shapes[f"{layer}.{p}"] for layer in self.attention_layers for p in "qkvo"}

    def register_concept(self, concept_id: str, tokens: Iterable[str]):
        for token in tokens:
            self.tokenizer.register(token, concept_id)

    def token_slots(self) -> dict[str, int]:
        return {tok: slot for tok, (slot, _) in self.tokenizer._concepts.items()}

    # -- geometry ----------------------------------------------------------------

    def layer_resolution(self, layer_id: str, latent_hw: tuple[int, int]) -> tuple[int, int]:
        block = layer_id.rsplit(".", 1)[0]
        if layer_id not in self.attention_layers:
            raise ConfigError(f"unknown attention layer {layer_id!r}")
        h, w = latent_hw
        return (h // 2, w // 2) if block in LOW_RES_BLOCKS else (h, w)

    def _check_layers(self, layer_ids, what: str):
        unknown = [layer for layer in layer_ids if layer not in self.attention_layers]
        if unknown:
            raise ConfigError(f"unknown layer id(s) in {what}: {unknown}")

    # -- text --------------------------------------------------------------------

    def _effective_weights(self, adapter: AdapterSet | None, coefficient: float | None = None):
        if adapter is None:
            return self._weights
        merged = merge_adapter(self._numpy_weights, adapter, coefficient,
                               token_slots=self.token_slots(), cross_layers=self.cross_layers)
        eff = dict(self._weights)
        for name, value in merged.items():
            if value is not self._numpy_weights.get(name):
                eff[name] = torch.from_numpy(np.asarray(value, dtype=np.float64))
        return eff

    def _text_forward(self, ids, table, w):
        emb = table[torch.as_tensor(ids)] + w["text.position"]
        return emb + torch.tanh(emb @ w["text.fc1"].T) @ w["text.fc2"].T

    def encode_text(self, prompt: str, adapter: AdapterSet | None = None) -> TextEncoding:
        ids, slots = self.tokenizer.encode(prompt)
        w = self._effective_weights(adapter)
        with torch.no_grad():
            emb = self._text_forward(ids, w[TOKEN_TABLE], w).numpy()
            per_layer = {
                layer: self._text_forward(ids, w[f"{TOKEN_TABLE}/{layer}"], w).numpy()
                for layer in self.cross_layers if f"{TOKEN_TABLE}/{layer}" in w
            }
        return TextEncoding(tuple(ids), emb, slots, per_layer, prompt)

    # -- network -----------------------------------------------------------------

    def _time_embedding(self, t: int, w) -> torch.Tensor:
        half = self.config.time_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
        args = float(t) * freqs
        emb = torch.cat([torch.sin(args), torch.cos(args)])
        return F.silu(emb @ w["time.fc1"].T) @ w["time.fc2"].T

    def _res(self, x, temb, name, w):
        g = self.config.groups
        h = F.conv2d(F.silu(F.group_norm(x, g)), w[f"{name}.conv1"], padding=1)
        h = h + (temb @ w[f"{name}.temb"].T)[None, :, None, None]
        h = F.conv2d(F.silu(F.group_norm(h, g)), w[f"{name}.conv2"], padding=1)
        return x + h

    def _attention(self, x, ctx, layer, w, state):
        weights = AttentionWeights(w[f"{layer}.q"], w[f"{layer}.k"], w[f"{layer}.v"], w[f"{layer}.o"],
                                   self.config.heads)
        out, keys, probs = attention_forward(x, ctx, weights)
        override = state["overrides"].get(layer)
        if override is not None:
            if callable(override):
                replacement = override(out.detach().numpy())
            else:
                replacement = override
            replacement = torch.as_tensor(np.asarray(replacement, dtype=np.float64))
            if replacement.shape != out.shape:
                raise ContractError(f"override for {layer} has shape {tuple(replacement.shape)}, "
                                    f"layer output is {tuple(out.shape)}")
            out = replacement
        fields = state["spec"].get(layer)
        if fields:
            state["records"][layer] = {"keys": keys, "probs": probs, "output": out, "fields": fields}
            state["pending"].discard(layer)
            if state["early_exit"] and not state["pending"]:
                raise _EarlyExit
        return out

    def _transformer(self, x, block, w, state):
        _, d, h, wd = x.shape
        tokens = x.reshape(d, h * wd).T
        ctx = state["contexts"][block]
        n = F.layer_norm(tokens, (d,))
        tokens = tokens + self._attention(n, n, f"{block}.self", w, state)
        n = F.layer_norm(tokens, (d,))
        tokens = tokens + self._attention(n, ctx, f"{block}.cross", w, state)
        n = F.layer_norm(tokens, (d,))
        tokens = tokens + F.gelu(n @ w[f"{block}.ff1"].T) @ w[f"{block}.ff2"].T
        return tokens.T.reshape(1, d, h, wd)

    def _forward(self, z: torch.Tensor, t: int, text: TextEncoding, w, state):
        temb = self._time_embedding(t, w)
        x = F.conv2d(z[None], w["conv_in"], padding=1)
        skip = self._res(x, temb, "enc.res0", w)
        x = F.avg_pool2d(skip, 2)
        x = self._res(x, temb, "enc.res1", w)
        x = self._transformer(x, "enc.0", w, state)
        x = self._res(x, temb, "mid.res", w)
        x = self._transformer(x, "mid.0", w, state)
        for i, block in enumerate(DECODER_BLOCKS):
            if i == 3:
                up = F.interpolate(x, scale_factor=2, mode="nearest")
                x = up + torch.einsum("oc,bchw->bohw", w["skip"], skip)
            x = self._res(x, temb, f"{block}.res", w)
            x = self._transformer(x, block, w, state)
        g = self.config.groups
        net = F.conv2d(F.silu(F.group_norm(x, g)), w["conv_out"], padding=1)[0]
        a_t = self.schedule.alpha_bar_at(t)
        return math.sqrt(1.0 - a_t) * z + self.config.out_scale * net

    def _run(self, z, t, text, adapter, record_spec, overrides, early_exit=False):
        spec = normalize_record_spec(record_spec)
        self._check_layers(spec, "record_spec")
        overrides = dict(overrides or {})
        self._check_layers(overrides, "overrides")
        if not 0 <= int(t) < self.schedule.T_train:
            raise ContractError(f"timestep {t} outside [0, {self.schedule.T_train})")
        w = self._effective_weights(adapter)
        contexts = {b: torch.from_numpy(np.asarray(text.context_for(f"{b}.cross"), dtype=np.float64))
                    for b in self.blocks}
        state = {"spec": spec, "overrides": overrides, "records": {}, "contexts": contexts,
                 "pending": set(spec), "early_exit": early_exit and bool(spec)}
        eps = None
        try:
            eps = self._forward(z, int(t), text, w, state)
        except _EarlyExit:
            pass
        return eps, state["records"]

    @staticmethod
    def _to_record(raw) -> AttentionRecord:
        layers = {}
        for layer, entry in raw.items():
            kind = layer.rsplit(".", 1)[1]
            values = {name: entry[name].detach().numpy() for name in entry["fields"]}
            layers[layer] = LayerRecord(layer, kind, **values)
        return AttentionRecord(layers)

    def predict_noise(self, z, t: int, text: TextEncoding, adapter: AdapterSet | None = None,
                      record_spec=None, overrides=None):
        """Noise estimate for latent ``z`` at timestep ``t`` plus the requested attention records."""
        z = validate_latent(z, self.latent_channels)
        with torch.no_grad():
            eps, raw = self._run(torch.from_numpy(np.asarray(z, dtype=np.float64)), t, text, adapter,
                                 record_spec, overrides)
        return eps.numpy(), self._to_record(raw)

    def record_keys(self, z, t, text, adapter, layer_id):
        """Keys of one layer only; stops the forward pass once they exist."""
        z = validate_latent(z, self.latent_channels)
        with torch.no_grad():
            _, raw = self._run(torch.from_numpy(np.asarray(z, dtype=np.float64)), t, text, adapter,
                               {layer_id: {"keys"}}, None, early_exit=True)
        return raw[layer_id]["keys"].numpy()

    def loss_gradient(self, z, t: int, branch_inputs, loss_fn, layer_id: str):
        """Exact ``d loss / d z`` by reverse-mode differentiation.

        ``branch_inputs`` is a sequence of ``(text, adapter)``; each branch is run
        on the same ``z`` and its keys at ``layer_id`` are passed, in order, to
        ``loss_fn`` (a function of torch tensors returning a scalar tensor).
        Returns ``(gradient, loss_value)``.
        """
        if not self.supports_gradients:
            raise CapabilityError("backend does not support gradients")
        self._check_layers([layer_id], "loss_spec")
        z = validate_latent(z, self.latent_channels)
        zt = torch.tensor(np.asarray(z, dtype=np.float64), requires_grad=True)
        keys = []
        with torch.enable_grad():
            for text, adapter in branch_inputs:
                _, raw = self._run(zt, t, text, adapter, {layer_id: {"keys"}}, None, early_exit=True)
                keys.append(raw[layer_id]["keys"])
            loss = loss_fn(keys)
            if not isinstance(loss, torch.Tensor) or loss.ndim != 0:
                raise ContractError("loss_fn must return a scalar torch tensor")
            if not loss.requires_grad:
                return np.zeros_like(z, dtype=np.float64), float(loss)
            (grad,) = torch.autograd.grad(loss, zt, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(zt)
        return grad.numpy(), float(loss.detach())
