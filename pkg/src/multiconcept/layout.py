"""Layout alignment: reference self-attention keys and the latent correction step."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .archive import load_archive, save_archive
from .errors import CapabilityError, ConfigError, ContractError
from .scheduler import InversionResult, NoiseSchedule, ddim_invert, timestep_grid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayoutConfig:
    alpha: float = 1.0
    lambda_step: float = 10.0
    window: tuple[int, int] = (0, 60)  # inclusive sampler-step indices
    feature_layer: str = "dec.0.self"
    repeats_per_step: int = 1

    def __post_init__(self):
        if self.lambda_step <= 0:
            raise ConfigError("lambda_step must be positive")
        if self.window[0] < 0 or self.window[1] < self.window[0]:
            raise ConfigError(f"bad alignment window {self.window}")
        if self.repeats_per_step < 1:
            raise ConfigError("repeats_per_step must be >= 1")

    def active(self, step: int) -> bool:
        return self.window[0] <= step <= self.window[1]


@dataclass
class ReferenceFeatures:
    """Reference keys of the layout layer, keyed by sampler timestep."""

    features: dict[int, np.ndarray]
    source_id: str = ""
    layer: str = ""

    def __getitem__(self, t: int) -> np.ndarray:
        return self.features[t]

    def __contains__(self, t: int) -> bool:
        return t in self.features

    def __len__(self):
        return len(self.features)

    def save(self, path, meta=None):
        arrays = {f"t/{t}": f for t, f in self.features.items()}
        return save_archive(path, arrays, {"source_id": self.source_id, "layer": self.layer, **(meta or {})})

    @classmethod
    def load(cls, path) -> "ReferenceFeatures":
        arrays, meta = load_archive(path)
        feats = {int(k[2:]): v for k, v in arrays.items() if k.startswith("t/")}
        return cls(dict(sorted(feats.items(), reverse=True)), meta.get("source_id", ""), meta.get("layer", ""))


def window_timesteps(config: LayoutConfig, num_steps: int, T_train: int) -> list[int]:
    grid = timestep_grid(num_steps, T_train)
    lo, hi = config.window
    if hi >= num_steps:
        raise ConfigError(f"alignment window {config.window} exceeds {num_steps} sampler steps")
    return grid[lo:hi + 1]


def features_from_inversion(inversion: InversionResult, config: LayoutConfig, num_steps: int,
                            T_train: int, source_id: str = "") -> ReferenceFeatures:
    feats = {}
    for t in window_timesteps(config, num_steps, T_train):
        if t not in inversion.records or config.feature_layer not in inversion.records[t]:
            raise ContractError(f"inversion did not record {config.feature_layer} at timestep {t}")
        feats[t] = inversion.records[t][config.feature_layer].keys
    return ReferenceFeatures(feats, source_id, config.feature_layer)


def extract_reference_features(backend, reference_latent, text, config: LayoutConfig, num_steps: int,
                               inversion_steps: int, schedule: NoiseSchedule, source_id: str = "",
                               extra_record_spec=None, extra_timesteps=()):
    """Invert the reference latent and keep the layout keys at the sampler's window timesteps.

    Returns ``(ReferenceFeatures, InversionResult)``; the inversion also carries
    anything requested through ``extra_record_spec`` at ``extra_timesteps``.
    """
    wanted = window_timesteps(config, num_steps, schedule.T_train)
    spec = {config.feature_layer: {"keys"}}
    for layer, fields in (extra_record_spec or {}).items():
        spec[layer] = set(spec.get(layer, ())) | set(fields)
    inversion = ddim_invert(backend, reference_latent, text, inversion_steps, schedule,
                            record_spec=spec, record_timesteps=set(wanted) | set(extra_timesteps))
    return features_from_inversion(inversion, config, num_steps, schedule.T_train, source_id), inversion


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.from_numpy(np.array(x, dtype=np.float64))  # copy: records are read-only


def layout_loss(F_base, F_customs: Sequence, F_ref, alpha: float = 1.0):
    """``||F_base - F_ref|| + alpha * mean_i ||F_i - F_ref||`` with Frobenius norms.

    Works on torch tensors (differentiable, returns a tensor) or arrays (returns
    a float). The custom term is 0 when there are no custom branches.
    """
    as_tensor = any(isinstance(f, torch.Tensor) for f in (F_base, F_ref, *F_customs))
    ref = _tensor(F_ref)
    feats = [_tensor(f) for f in (F_base, *F_customs)]
    for f in feats:
        if f.shape != ref.shape:
            raise ContractError(f"feature shape {tuple(f.shape)} does not match reference {tuple(ref.shape)}")
    loss = torch.linalg.norm(feats[0] - ref)
    if len(feats) > 1:
        custom = torch.stack([torch.linalg.norm(f - ref) for f in feats[1:]]).mean()
        loss = loss + alpha * custom
    return loss if as_tensor else float(loss)


@dataclass
class AlignResult:
    latent: np.ndarray
    losses: list[float] = field(default_factory=list)  # loss before each descent step
    grad_norms: list[float] = field(default_factory=list)
    applied: bool = False


def align_latents(backend, z_t, step: int, t: int, branch_inputs, F_ref, config: LayoutConfig) -> AlignResult:
    """One (or ``repeats_per_step``) gradient step(s) ``z <- z - lambda * grad L_layout``.

    ``branch_inputs`` is ``[(text, adapter), ...]`` with the base branch first.
    Identity outside the window or when the backend cannot differentiate.
    """
    if not config.active(step):
        return AlignResult(z_t)
    if not getattr(backend, "supports_gradients", False):
        log.warning("backend has no gradient support; layout alignment disabled")
        return AlignResult(z_t)
    ref = _tensor(F_ref)

    def loss_fn(keys):
        return layout_loss(keys[0], keys[1:], ref, config.alpha)

    result = AlignResult(z_t, applied=True)
    z = z_t
    for _ in range(config.repeats_per_step):
        try:
            grad, loss = backend.loss_gradient(z, t, branch_inputs, loss_fn, config.feature_layer)
        except CapabilityError:
            log.warning("backend refused gradients; layout alignment disabled")
            return AlignResult(z_t)
        result.losses.append(loss)
        result.grad_norms.append(float(np.linalg.norm(grad)))
        if np.any(grad):
            z = z - config.lambda_step * grad
    result.latent = z
    return result
