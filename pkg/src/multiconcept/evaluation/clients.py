"""Segmenter and embedding-scorer seams, deterministic mocks and HTTP service clients."""

from __future__ import annotations

import base64
import io
import logging
import re
import time
from dataclasses import dataclass, field
from typing import Mapping, Protocol, runtime_checkable

import httpx
import numpy as np
from PIL import Image
from scipy import ndimage

from ..errors import ConfigError, EvaluationError

log = logging.getLogger(__name__)

# primary colors the mock segmenter understands, as RGB in [0, 1]
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
}


def as_float_image(image) -> np.ndarray:
    """``[H, W, 3]`` float64 in [0, 1] from uint8 or float input."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise EvaluationError(f"expected an [H, W, 3] image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise EvaluationError(f"cannot read image {path}: {exc}") from exc


@dataclass(frozen=True)
class SegmentRecord:
    mask: np.ndarray  # bool [H, W] over the whole image
    crop: np.ndarray  # pixels inside the mask's bounding box
    image_id: str = ""
    prompt: str = ""

    @classmethod
    def from_mask(cls, image, mask, image_id="", prompt="") -> "SegmentRecord":
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise EvaluationError("segment mask is empty")
        rows, cols = np.nonzero(mask)
        r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
        return cls(mask, np.asarray(image)[r0:r1, c0:c1].copy(), image_id, prompt)

    def crop_mask(self) -> np.ndarray:
        rows, cols = np.nonzero(self.mask)
        return self.mask[rows.min():rows.max() + 1, cols.min():cols.max() + 1]


@runtime_checkable
class SegmenterClient(Protocol):
    capabilities: Mapping

    def segment(self, image, prompt: str, image_id: str = "") -> list[SegmentRecord]: ...


@runtime_checkable
class EmbeddingScorer(Protocol):
    dim: int
    value_range: tuple[float, float]

    def similarity(self, a: SegmentRecord, b: SegmentRecord) -> float: ...


def cosine(u, v) -> float:
    """Cosine similarity with ``x . y / sqrt((x . x)(y . y))`` so that cos(x, x) is exactly 1."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    denom = np.sqrt(np.dot(u, u) * np.dot(v, v))
    if denom == 0:
        return 0.0
    return float(np.clip(np.dot(u, v) / denom, -1.0, 1.0))


@dataclass
class ColorSegmenter:
    """Connected regions of a named color; prompt words pick the color.

    ``aliases`` maps other words (class words like "dog") to color names so
    synthetic scenes can stand in for subjects.
    """

    aliases: Mapping[str, str] = field(default_factory=dict)
    tolerance: float = 0.1
    min_pixels: int = 1
    capabilities: Mapping = field(default_factory=lambda: {"kind": "mock_color", "max_image_size": 4096})

    def __post_init__(self):
        bad = {k: v for k, v in self.aliases.items() if v not in COLORS}
        if bad:
            raise ConfigError(f"aliases point at unknown colors: {bad}")

    def colors_for(self, prompt: str) -> list[str]:
        found = []
        for word in re.findall(r"[a-z]+", prompt.lower()):
            color = word if word in COLORS else self.aliases.get(word)
            if color and color not in found:
                found.append(color)
        return found

    def segment(self, image, prompt: str, image_id: str = "") -> list[SegmentRecord]:
        img = as_float_image(image)
        out = []
        for color in self.colors_for(prompt):
            hit = np.all(np.abs(img - np.asarray(COLORS[color])) <= self.tolerance, axis=2)
            labels, n = ndimage.label(hit)
            for j in range(1, n + 1):
                mask = labels == j
                if np.count_nonzero(mask) >= self.min_pixels:
                    out.append(SegmentRecord.from_mask(img, mask, image_id, prompt))
        return out


@dataclass
class HistogramScorer:
    """Normalized joint color histogram of the segment's pixels, compared by cosine.

    Histograms are non-negative, so similarities fall in [0, 1].
    """

    bins: int = 4
    value_range: tuple[float, float] = (0.0, 1.0)

    @property
    def dim(self) -> int:
        return self.bins ** 3

    def embed(self, seg: SegmentRecord) -> np.ndarray:
        pixels = as_float_image(seg.crop)[seg.crop_mask()]
        idx = np.minimum((pixels * self.bins).astype(np.int64), self.bins - 1)
        flat = (idx[:, 0] * self.bins + idx[:, 1]) * self.bins + idx[:, 2]
        hist = np.bincount(flat, minlength=self.dim).astype(np.float64)
        return hist / hist.sum()

    def similarity(self, a: SegmentRecord, b: SegmentRecord) -> float:
        return cosine(self.embed(a), self.embed(b))


@dataclass
class ColorTextScorer:
    """Mock text-alignment score: share of the prompt's color words found in the image."""

    segmenter: ColorSegmenter

    def score(self, image, prompt: str) -> float:
        colors = self.segmenter.colors_for(prompt)
        if not colors:
            return 0.0
        hits = sum(bool(self.segmenter.segment(image, c)) for c in colors)
        return hits / len(colors)


# -- service clients -------------------------------------------------------------


def png_bytes(image) -> bytes:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _decode_mask(b64: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(b64))) as im:
        return np.asarray(im.convert("L")) > 127


@dataclass
class ServiceConfig:
    url: str
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 0.5


class _ServiceClient:
    def __init__(self, config: ServiceConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self._client = httpx.Client(base_url=config.url, timeout=config.timeout, transport=transport)

    def _post(self, path: str, payload: dict) -> dict:
        last = None
        for attempt in range(self.config.retries + 1):
            try:
                resp = self._client.post(path, json=payload)
                resp.raise_for_status()
                return resp.json()
            except (httpx.HTTPError, ValueError) as exc:
                last = exc
                log.warning("%s%s failed (attempt %d): %s", self.config.url, path, attempt + 1, exc)
                if attempt < self.config.retries and self.config.backoff:
                    time.sleep(self.config.backoff * 2 ** attempt)
        raise EvaluationError(f"service {self.config.url}{path} failed: {last}")

    def close(self):
        self._client.close()


class HttpSegmenter(_ServiceClient):
    """POST /segment {image: base64 PNG, prompt} -> {segments: [{mask: base64 PNG}]}."""

    capabilities = {"kind": "http"}

    def segment(self, image, prompt: str, image_id: str = "") -> list[SegmentRecord]:
        data = self._post("/segment", {"image": base64.b64encode(png_bytes(image)).decode(), "prompt": prompt})
        img = np.asarray(image)
        out = []
        for seg in data.get("segments", []):
            mask = _decode_mask(seg["mask"])
            if mask.shape != img.shape[:2]:
                raise EvaluationError(f"segment mask {mask.shape} does not match image {img.shape[:2]}")
            if mask.any():
                out.append(SegmentRecord.from_mask(img, mask, image_id, prompt))
        return out


class HttpEmbeddingScorer(_ServiceClient):
    """POST /embed {image: base64 PNG of the masked crop} -> {embedding: [...]}; cosine similarity."""

    value_range = (-1.0, 1.0)

    def __init__(self, config: ServiceConfig, dim: int, transport: httpx.BaseTransport | None = None):
        super().__init__(config, transport)
        self.dim = dim

    def embed(self, seg: SegmentRecord) -> np.ndarray:
        crop = as_float_image(seg.crop) * seg.crop_mask()[..., None]
        vec = np.asarray(self._post("/embed", {"image": base64.b64encode(png_bytes(crop)).decode()})["embedding"],
                         dtype=np.float64)
        if vec.shape != (self.dim,):
            raise EvaluationError(f"embedding has shape {vec.shape}, expected ({self.dim},)")
        return vec

    def similarity(self, a: SegmentRecord, b: SegmentRecord) -> float:
        return cosine(self.embed(a), self.embed(b))
