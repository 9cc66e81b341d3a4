"""Linear, bias-free toy latent codec.

Each latent cell expands into an ``f x f`` RGB patch through a fixed
``[3*f*f, C]`` matrix. ``C`` rows of that matrix (the anchors) form the identity,
and encoding reads exactly those anchor pixels, so ``encode(decode(z)) == z``
bit for bit.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, IngestionError


class LinearCodec:
    def __init__(self, channels: int = 4, factor: int = 8, seed: int = 7):
        self.channels = channels
        self.factor = factor
        f = factor
        rng = np.random.default_rng(seed)
        # smooth per-channel patterns so decoded images are not pure noise
        yy, xx = np.meshgrid(np.linspace(-1, 1, f), np.linspace(-1, 1, f), indexing="ij")
        basis = np.zeros((3, f, f, channels))
        for c in range(channels):
            colour = rng.uniform(0.2, 1.0, size=3) * rng.choice([-1, 1], size=3)
            phase = rng.uniform(0, np.pi)
            bump = 0.6 + 0.4 * np.cos(phase + 1.5 * (xx * np.cos(c) + yy * np.sin(c)))
            basis[..., c] = colour[:, None, None] * bump[None] * 0.5
        self.anchors = [(c % 3, (2 * c + 1) % f, (3 * c + 2) % f) for c in range(channels)]
        if len(set(self.anchors)) != channels:
            raise ValueError("anchor pixels collide; use a larger factor")
        for c, (ch, r, q) in enumerate(self.anchors):
            basis[ch, r, q, :] = 0.0
            basis[ch, r, q, c] = 1.0
        self.basis = basis  # [3, f, f, C]

    def decode(self, z) -> np.ndarray:
        """Latent ``[C, h, w]`` -> unclamped pixels ``[3, h*f, w*f]``."""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 3 or z.shape[0] != self.channels:
            raise ContractError(f"latent must be [{self.channels}, h, w], got {z.shape}")
        c, h, w = z.shape
        f = self.factor
        patches = np.einsum("arqc,cij->airjq", self.basis, z)
        return patches.reshape(3, h * f, w * f)

    def encode(self, pixels) -> np.ndarray:
        x = np.asarray(pixels, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != 3:
            raise IngestionError(f"image must be [3, H, W], got {x.shape}")
        _, hp, wp = x.shape
        f = self.factor
        if hp % f or wp % f:
            raise IngestionError(f"image size {hp}x{wp} is not a multiple of the codec factor {f}")
        grid = x.reshape(3, hp // f, f, wp // f, f)
        return np.stack([grid[ch, :, r, :, q] for ch, r, q in self.anchors])


def to_uint8(pixels) -> np.ndarray:
    """Clamp to [0, 1] and convert ``[3, H, W]`` floats to ``[H, W, 3]`` bytes."""
    x = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    return np.round(x.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def from_uint8(image) -> np.ndarray:
    return np.asarray(image, dtype=np.float64).transpose(2, 0, 1) / 255.0
