"""Linear-beta noise schedule, deterministic DDIM updates, CFG and DDIM inversion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .archive import load_archive, save_archive
from .backend.types import AttentionRecord, LayerRecord, TextEncoding
from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

# The clean end of the trajectory is addressed as timestep -1 (alpha_bar = 1).
CLEAN = -1


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T_train(self) -> int:
        return len(self.betas)

    def alpha_bar_at(self, t: int) -> float:
        if t == CLEAN:
            return 1.0
        if not 0 <= t < self.T_train:
            raise ContractError(f"timestep {t} outside [0, {self.T_train})")
        return float(self.alpha_bar[t])


def make_schedule(T_train: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012) -> NoiseSchedule:
    if T_train < 1:
        raise ConfigError("T_train must be positive")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    betas.flags.writeable = False
    alpha_bar.flags.writeable = False
    return NoiseSchedule(betas, alpha_bar)


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 200
    guidance_scale: float = 7.5
    inversion_steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1 or self.inversion_steps < 0:
            raise ConfigError("num_steps must be >= 1 and inversion_steps >= 0")
        if self.guidance_scale < 0:
            raise ConfigError("guidance_scale must be non-negative")


def timestep_grid(num_steps: int, T_train: int = 1000) -> list[int]:
    """Uniform-stride sampler timesteps in denoising order, e.g. 995, 990, ..., 0."""
    if not 1 <= num_steps <= T_train:
        raise ConfigError(f"num_steps must lie in [1, {T_train}], got {num_steps}")
    stride = T_train // num_steps
    return [i * stride for i in range(num_steps - 1, -1, -1)]


def ddim_step(z_t, noise_estimate, t: int, t_prev: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) update from ``t`` to ``t_prev``; ``t_prev = -1`` is the clean end."""
    if not t > t_prev >= CLEAN:
        raise ContractError(f"ddim_step needs t > t_prev, got t={t}, t_prev={t_prev}")
    a_t, a_prev = schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_prev)
    x0 = (z_t - np.sqrt(1.0 - a_t) * noise_estimate) / np.sqrt(a_t)
    return np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * noise_estimate


def ddim_inverse_step(z_prev, noise_estimate, t_prev: int, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Algebraic inverse of :func:`ddim_step` for a fixed noise estimate."""
    if not t > t_prev >= CLEAN:
        raise ContractError(f"inverse step needs t > t_prev, got t={t}, t_prev={t_prev}")
    a_t, a_prev = schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_prev)
    x0 = (z_prev - np.sqrt(1.0 - a_prev) * noise_estimate) / np.sqrt(a_prev)
    return np.sqrt(a_t) * x0 + np.sqrt(1.0 - a_t) * noise_estimate


def cfg_combine(noise_uncond, noise_cond, scale: float):
    if np.shape(noise_uncond) != np.shape(noise_cond):
        raise ContractError("conditional and unconditional noise shapes differ")
    # exact shortcuts so guidance 1 / 0 reproduce single-pass sampling bit for bit
    if scale == 1.0:
        return np.array(noise_cond, copy=True)
    if scale == 0.0:
        return np.array(noise_uncond, copy=True)
    return noise_uncond + scale * (noise_cond - noise_uncond)


@dataclass
class InversionResult:
    """``latents[0]`` is the clean input; ``latents[i + 1]`` sits at ``timesteps[i]``."""

    timesteps: list[int]
    latents: list[np.ndarray]
    records: dict[int, AttentionRecord] = field(default_factory=dict)

    def latent_at(self, t: int) -> np.ndarray:
        if t == CLEAN:
            return self.latents[0]
        return self.latents[1 + self.timesteps.index(t)]

    def save(self, path, meta: Mapping | None = None):
        arrays = {f"latent/{i}": z for i, z in enumerate(self.latents)}
        index = {}
        for t, record in self.records.items():
            index[str(t)] = {}
            for layer_id, rec in record.items():
                fields = []
                for name in ("keys", "probs", "output"):
                    value = getattr(rec, name)
                    if value is not None:
                        arrays[f"record/{t}/{layer_id}/{name}"] = value
                        fields.append(name)
                index[str(t)][layer_id] = {"kind": rec.kind, "fields": fields}
        return save_archive(path, arrays, {"timesteps": self.timesteps, "record_index": index, **(meta or {})})

    @classmethod
    def load(cls, path) -> tuple["InversionResult", dict]:
        arrays, meta = load_archive(path)
        latents = [arrays[f"latent/{i}"] for i in range(len(meta["timesteps"]) + 1)]
        records = {}
        for t, layers in meta["record_index"].items():
            records[int(t)] = AttentionRecord({
                layer_id: LayerRecord(layer_id, entry["kind"],
                                      **{name: arrays[f"record/{t}/{layer_id}/{name}"] for name in entry["fields"]})
                for layer_id, entry in layers.items()
            })
        return cls(list(meta["timesteps"]), latents, records), meta


def ddim_invert(backend, z0, text: TextEncoding, steps: int, schedule: NoiseSchedule,
                record_spec=None, record_timesteps: Iterable[int] | None = None) -> InversionResult:
    """Run the reversed DDIM recurrence from a clean latent towards noise.

    The step into timestep ``t`` uses the conditional noise prediction at
    ``(z_current, t)`` (guidance fixed to 1); its attention is recorded under
    ``t``. ``record_timesteps`` restricts recording to a subset of visited steps.
    """
    if not 0 <= steps <= schedule.T_train:
        raise ConfigError(f"inversion steps must lie in [0, {schedule.T_train}]")
    z = np.asarray(z0, dtype=np.float64)
    result = InversionResult([], [z])
    if steps == 0:
        return result
    wanted = None if record_timesteps is None else set(record_timesteps)
    t_prev = CLEAN
    for t in reversed(timestep_grid(steps, schedule.T_train)):
        spec = record_spec if wanted is None or t in wanted else None
        eps, record = backend.predict_noise(z, t, text, record_spec=spec)
        z = ddim_inverse_step(z, eps, t_prev, t, schedule)
        result.timesteps.append(t)
        result.latents.append(z)
        if spec:
            result.records[t] = record
        t_prev = t
    return result


def ddim_sample(backend, z_T, text: TextEncoding, schedule: NoiseSchedule, num_steps: int,
                guidance_scale: float = 7.5, uncond_text: TextEncoding | None = None,
                start_step: int = 0) -> np.ndarray:
    """Plain classifier-free-guided DDIM sampling; the reference the pipeline degenerates to."""
    grid = timestep_grid(num_steps, schedule.T_train)
    z = np.asarray(z_T, dtype=np.float64)
    if guidance_scale != 1.0 and uncond_text is None:
        uncond_text = backend.encode_text("")
    for i in range(start_step, len(grid)):
        t = grid[i]
        t_prev = grid[i + 1] if i + 1 < len(grid) else CLEAN
        eps_c, _ = backend.predict_noise(z, t, text)
        if guidance_scale == 1.0:
            eps = cfg_combine(eps_c, eps_c, 1.0)
        else:
            eps_u, _ = backend.predict_noise(z, t, uncond_text)
            eps = cfg_combine(eps_u, eps_c, guidance_scale)
        z = ddim_step(z, eps, t, t_prev, schedule)
    return z
