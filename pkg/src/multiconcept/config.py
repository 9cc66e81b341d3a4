"""Run and evaluation configuration: YAML schema, dotted overrides, path resolution."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .backend.adapters import DEFAULT_MERGE_COEFFICIENT
from .backend.toy import DEFAULT_SEED
from .errors import ConfigError
from .injection import FusionPlan
from .layout import LayoutConfig
from .masks import RefineConfig
from .scheduler import SamplerConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BackendSection(_Section):
    kind: Literal["toy"] = "toy"
    weights: Optional[str] = None  # saved toy weights; seeded init when absent
    seed: int = DEFAULT_SEED
    latent_size: int = 16


class ConceptSection(_Section):
    id: str
    tokens: list[str]
    class_word: str
    similar_tokens: list[str] = []
    adapter: Optional[str] = None
    adapter_seed: Optional[int] = None  # synthetic adapter when no file is given
    adapter_rank: int = 4
    adapter_scale: float = 0.5
    merge_coefficient: float = DEFAULT_MERGE_COEFFICIENT
    reference_images: list[str] = []
    variant_prompt: Optional[str] = None
    # grounding for the initial mask: a box in normalized image coords or a pixel-space mask file
    seed_box: Optional[tuple[float, float, float, float]] = None
    mask: Optional[str] = None

    @field_validator("tokens")
    @classmethod
    def _tokens(cls, v):
        if not v:
            raise ValueError("at least one concept token is required")
        return v

    @field_validator("seed_box")
    @classmethod
    def _box(cls, v):
        if v is not None:
            x0, y0, x1, y1 = v
            if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
                raise ValueError(f"seed_box {v} must be (x0, y0, x1, y1) inside [0, 1] with x0 < x1, y0 < y1")
        return v


class SamplerSection(_Section):
    num_steps: int = 200
    guidance_scale: float = 7.5
    inversion_steps: int = 1000


class LayoutSection(_Section):
    enabled: bool = True
    alpha: float = 1.0
    lambda_step: float = 10.0
    window: tuple[int, int] = (0, 60)
    feature_layer: str = "dec.0.self"
    repeats_per_step: int = 1


class RefineSection(_Section):
    enabled: bool = True
    window: tuple[int, int] = (50, 80)
    cadence: int = 5
    cluster_layer: str = "dec.5.self"
    kmeans_seed: int = 0
    max_iter: int = 100
    tol: float = 1e-6


class FusionSection(_Section):
    self_attention: bool = True
    cross_attention: bool = True
    mode: Literal["features", "noise"] = "features"


class OutputSection(_Section):
    dir: str = "runs/default"
    dump_steps: list[int] = []
    save_latent: bool = True


class RunConfig(_Section):
    prompt: str
    reference_image: Optional[str] = None
    concepts: list[ConceptSection] = []
    backend: BackendSection = BackendSection()
    sampler: SamplerSection = SamplerSection()
    layout: LayoutSection = LayoutSection()
    refine: RefineSection = RefineSection()
    fusion: FusionSection = FusionSection()
    output: OutputSection = OutputSection()
    seeds: list[int] = Field(default_factory=lambda: list(range(8)))
    cache_dir: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        ids = [c.id for c in self.concepts]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate concept ids: {ids}")
        return self

    # -- domain views ------------------------------------------------------------

    def sampler_config(self, seed: int = 0) -> SamplerConfig:
        s = self.sampler
        return SamplerConfig(s.num_steps, s.guidance_scale, s.inversion_steps, seed)

    def layout_config(self) -> LayoutConfig:
        s = self.layout
        return LayoutConfig(s.alpha, s.lambda_step, tuple(s.window), s.feature_layer, s.repeats_per_step)

    def refine_config(self) -> RefineConfig:
        s = self.refine
        return RefineConfig(tuple(s.window), s.cadence, s.cluster_layer, s.kmeans_seed, s.max_iter, s.tol)

    def fusion_plan(self, backend) -> FusionPlan:
        f = self.fusion
        return FusionPlan.for_backend(backend, f.self_attention, f.cross_attention, f.mode)

    def needs_inversion(self) -> bool:
        return self.layout.enabled or any(c.seed_box is not None and c.mask is None for c in self.concepts)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


class SegmenterSection(_Section):
    kind: Literal["mock_color", "http"] = "mock_color"
    aliases: dict[str, str] = {}
    tolerance: float = 0.1
    url: Optional[str] = None
    timeout: float = 30.0
    retries: int = 2


class ScorerSection(_Section):
    kind: Literal["histogram", "http"] = "histogram"
    bins: int = 4
    url: Optional[str] = None
    dim: int = 512
    timeout: float = 30.0
    retries: int = 2


class EvalConceptSection(_Section):
    id: str
    prompt: str
    references: list[str]


class CountSection(_Section):
    prompts: list[str]
    expected_total: int = 2


class EvalConfig(_Section):
    batch: str
    concepts: list[EvalConceptSection] = []
    segsim_prompts: list[str] = []
    count: Optional[CountSection] = None
    segmenter: SegmenterSection = SegmenterSection()
    scorer: ScorerSection = ScorerSection()
    text_scorer: Optional[Literal["mock_color"]] = "mock_color"


# -- loading -----------------------------------------------------------------------

_RUN_PATHS = ("reference_image", "backend.weights", "cache_dir", "concepts.*.adapter", "concepts.*.mask",
              "concepts.*.reference_images.*")
_EVAL_PATHS = ("batch", "concepts.*.references.*")


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form dotted.key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: cannot parse value: {exc}") from exc
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override {text!r} has an empty key segment")
    return parts, value


def apply_overrides(data: dict, overrides) -> dict:
    """Set ``a.b.c=value`` entries in a raw config dict; list items are addressed by index."""
    for text in overrides or ():
        parts, value = parse_override(text)
        node = data
        for i, part in enumerate(parts):
            last = i == len(parts) - 1
            if isinstance(node, list):
                try:
                    idx = int(part)
                    node[idx]
                except (ValueError, IndexError):
                    raise ConfigError(f"override {text!r}: bad list index {part!r}") from None
                if last:
                    node[idx] = value
                else:
                    node = node[idx]
            elif isinstance(node, dict):
                if last:
                    node[part] = value
                else:
                    node = node.setdefault(part, {})
            else:
                raise ConfigError(f"override {text!r}: {'.'.join(parts[:i])} is not a section")
    return data


def _resolve(data, pattern: list[str], base: Path):
    if not pattern:
        return
    head, rest = pattern[0], pattern[1:]
    if isinstance(data, dict):
        keys = list(data) if head == "*" else [head]
    elif isinstance(data, list):
        keys = range(len(data)) if head == "*" else []
    else:
        return
    for k in keys:
        if isinstance(data, dict) and k not in data:
            continue
        if not rest:
            v = data[k]
            if isinstance(v, str) and v and not Path(v).is_absolute():
                data[k] = str((base / v).resolve())
        else:
            _resolve(data[k], rest, base)


def _read_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _validate(model, data, source):
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {source}:\n{exc}") from exc


def load_run_config(path=None, overrides=(), data: dict | None = None) -> RunConfig:
    """Parse a run config; relative paths resolve against the config file's directory."""
    base = Path(path).resolve().parent if path is not None else Path.cwd()
    raw = _read_yaml(path) if data is None else copy.deepcopy(data)
    raw = apply_overrides(raw, overrides)
    for pattern in _RUN_PATHS:
        _resolve(raw, pattern.split("."), base)
    return _validate(RunConfig, raw, path or "<dict>")


def load_eval_config(path, overrides=()) -> EvalConfig:
    base = Path(path).resolve().parent
    raw = apply_overrides(_read_yaml(path), overrides)
    for pattern in _EVAL_PATHS:
        _resolve(raw, pattern.split("."), base)
    return _validate(EvalConfig, raw, path)


def dump_run_config(config: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(config.to_yaml())
    return path
