"""Concept injection: masked fusion of custom-branch attention outputs into the base branch."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .masks import rescale_mask_set
from .multipath import BranchSet, BranchTexts
from .scheduler import NoiseSchedule, cfg_combine, ddim_step

FUSION_MODES = ("features", "noise")


@dataclass(frozen=True)
class FusionPlan:
    """Decoder attention layers whose outputs get fused, in execution order."""

    layers: tuple[str, ...]
    mode: str = "features"

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"fusion mode must be one of {FUSION_MODES}, got {self.mode!r}")

    @classmethod
    def for_backend(cls, backend, self_attention: bool = True, cross_attention: bool = True,
                    mode: str = "features") -> "FusionPlan":
        kinds = {"self"} if self_attention else set()
        if cross_attention:
            kinds.add("cross")
        layers = tuple(layer for layer in backend.decoder_attention_layers if layer.rsplit(".", 1)[1] in kinds)
        return cls(layers, mode)

    def resolutions(self, backend, latent_hw) -> dict[str, tuple[int, int]]:
        return {layer: tuple(backend.layer_resolution(layer, latent_hw)) for layer in self.layers}


def _flat_masks(masks: Sequence, n_positions: int) -> list[np.ndarray]:
    flat = []
    for m in masks:
        m = np.asarray(m).reshape(-1)
        if m.shape[0] != n_positions:
            raise ContractError(f"mask has {m.shape[0]} cells, features have {n_positions} positions")
        flat.append(m.astype(bool))
    return flat


def fuse_features(h_base, h_customs: Sequence, masks: Sequence) -> np.ndarray:
    """``h_base * M_base + sum_i h_i * M_i`` with ``M_base`` the complement of the mask union.

    Features are ``[P, d]``; each mask has ``P`` cells (any shape) and is broadcast over channels.
    """
    h_base = np.asarray(h_base)
    if len(h_customs) != len(masks):
        raise ContractError(f"{len(h_customs)} custom features for {len(masks)} masks")
    flat = _flat_masks(masks, h_base.shape[0])
    if not any(m.any() for m in flat):
        return h_base.copy()
    union = np.logical_or.reduce(flat)
    out = h_base * (~union)[:, None]
    for h, m in zip(h_customs, flat):
        h = np.asarray(h)
        if h.shape != h_base.shape:
            raise ContractError(f"custom feature shape {h.shape} differs from base {h_base.shape}")
        out = out + h * m[:, None]
    return out


def fuse_noise_baseline(noise_base, noise_customs: Sequence, masks: Sequence) -> np.ndarray:
    """Same blend applied once to ``[C, H, W]`` noise predictions with ``[H, W]`` masks."""
    noise_base = np.asarray(noise_base)
    c, h, w = noise_base.shape
    for m in masks:
        if np.asarray(m).shape != (h, w):
            raise ContractError(f"noise mask shape {np.asarray(m).shape} is not the latent grid {(h, w)}")
    flat = fuse_features(noise_base.reshape(c, h * w).T, [n.reshape(c, h * w).T for n in map(np.asarray, noise_customs)],
                         masks)
    return flat.T.reshape(c, h, w)


class MaskPyramid:
    """Concept masks rescaled on demand per resolution, cached for one timestep."""

    def __init__(self, masks: Mapping[str, np.ndarray], concept_ids: Sequence[str]):
        missing = [c for c in concept_ids if c not in masks]
        if missing:
            raise ContractError(f"no mask for concept(s) {missing}")
        self.base = {c: np.asarray(masks[c], dtype=bool) for c in concept_ids}
        self.concept_ids = list(concept_ids)
        self._cache: dict[tuple[int, int], list[np.ndarray]] = {}

    def at(self, resolution) -> list[np.ndarray]:
        resolution = tuple(resolution)
        if resolution not in self._cache:
            scaled = rescale_mask_set(self.base, resolution)
            self._cache[resolution] = [scaled[c] for c in self.concept_ids]
        return self._cache[resolution]

    def all_zero(self) -> bool:
        return not any(m.any() for m in self.base.values())


@dataclass
class InjectResult:
    latent: np.ndarray
    noise: np.ndarray
    records: list = field(default_factory=list)  # conditional-pass AttentionRecord per branch
    fused_layers: list[str] = field(default_factory=list)
    feature_norms: list[tuple[str, float, float]] = field(default_factory=list)  # (layer, base, fused)
    branch_noise: list = field(default_factory=list)  # conditional-pass noise per branch, base after fusion


def _merge_spec(*specs) -> dict[str, set]:
    out: dict[str, set] = {}
    for spec in specs:
        for layer, fields in (spec or {}).items():
            out.setdefault(layer, set()).update(fields)
    return out


def inject_step(backend, z_t, t: int, t_prev: int, branches: BranchSet, texts: Sequence[BranchTexts],
                masks: Mapping[str, np.ndarray] | None, plan: FusionPlan, schedule: NoiseSchedule,
                guidance_scale: float = 7.5, record_spec=None, track_norms: bool = False) -> InjectResult:
    """One denoising step with concept injection, returning ``z_{t_prev}``.

    Custom branches run once on ``z_t`` and record their decoder attention
    outputs; the base branch then runs with overrides that blend each fused
    layer's live output with those recordings. With CFG the same is done for
    the unconditional pass. ``record_spec`` adds recordings to the
    conditional pass of every branch.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    latent_hw = z_t.shape[1:]
    pyramid = MaskPyramid(masks or {}, branches.concept_ids)
    resolutions = plan.resolutions(backend, latent_hw)
    extra = {layer: set(fields) for layer, fields in (record_spec or {}).items()} if isinstance(record_spec, Mapping) \
        else {layer: {"keys", "probs", "output"} for layer in (record_spec or ())}
    conditional_passes = [True] if guidance_scale == 1.0 else [True, False]
    customs = list(branches.customs)
    noise_by_pass, records, norms = {}, [], []
    fuse_layers = plan.layers if plan.mode == "features" and customs else ()

    for cond in conditional_passes:
        pass_extra = extra if cond else {}
        custom_spec = _merge_spec(pass_extra, {layer: {"output"} for layer in fuse_layers})
        custom_out = []
        for i, branch in enumerate(customs, start=1):
            text = texts[i].cond if cond else texts[i].uncond
            custom_out.append(backend.predict_noise(z_t, t, text, adapter=branch.adapter, record_spec=custom_spec))

        overrides = {}
        for layer in fuse_layers:
            layer_masks = pyramid.at(resolutions[layer])
            feats = [rec[layer].output for _, rec in custom_out]

            def hook(h_base, layer=layer, feats=feats, layer_masks=layer_masks, cond=cond):
                fused = fuse_features(h_base, feats, layer_masks)
                if track_norms and cond:
                    norms.append((layer, float(np.linalg.norm(h_base)), float(np.linalg.norm(fused))))
                return fused
            overrides[layer] = hook

        base_text = texts[0].cond if cond else texts[0].uncond
        base_noise, base_rec = backend.predict_noise(z_t, t, base_text, record_spec=pass_extra or None,
                                                     overrides=overrides or None)
        noise_by_pass[cond] = (base_noise, [n for n, _ in custom_out])
        if cond:
            records = [base_rec] + [rec for _, rec in custom_out]

    if len(conditional_passes) == 1:
        base_eps, custom_eps = noise_by_pass[True]
    else:
        (bu, cu), (bc, cc) = noise_by_pass[False], noise_by_pass[True]
        base_eps = cfg_combine(bu, bc, guidance_scale)
        custom_eps = [cfg_combine(u, c, guidance_scale) for u, c in zip(cu, cc)]

    if plan.mode == "noise" and customs:
        eps = fuse_noise_baseline(base_eps, custom_eps, pyramid.at(latent_hw))
        fused = ["noise"]
    else:
        eps = base_eps
        fused = list(fuse_layers)
    base_c, customs_c = noise_by_pass[True]
    return InjectResult(ddim_step(z_t, eps, t, t_prev, schedule), eps, records, fused, norms,
                        [base_c, *customs_c])
