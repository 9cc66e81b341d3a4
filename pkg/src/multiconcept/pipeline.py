"""End-to-end generation: align the latent, refine masks, inject concepts, every sampler step."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .archive import hash_arrays, hash_bytes, save_archive
from .backend import AdapterSet, LinearCodec, ToyConfig, ToyUNet, from_uint8, load_adapter, to_uint8
from .backend.text import split_words
from .config import RunConfig
from .errors import ConfigError, IngestionError, MulticonceptError
from .injection import FusionPlan, inject_step
from .layout import LayoutConfig, ReferenceFeatures, align_latents, features_from_inversion, window_timesteps
from .masks import (RefineConfig, disjoint_seeds, init_masks_from_inversion, pairwise_disjoint, refine_masks,
                    rescale_mask_set)
from .multipath import BranchSet, BranchTexts, ConceptSpec, PromptSpec, build_prompt_spec, encode_branches, \
    make_branch_set
from .scheduler import CLEAN, InversionResult, NoiseSchedule, SamplerConfig, ddim_invert, timestep_grid

log = logging.getLogger(__name__)

CACHE_ENV = "MULTICONCEPT_CACHE_DIR"
CA_VIZ_BLOCK = "dec.4"  # fifth decoder block


@dataclass
class RunManifest:
    config: dict
    seed: int | None = None
    hashes: dict = field(default_factory=dict)
    preparation: dict = field(default_factory=dict)
    events: list[dict] = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    status: str = "pending"
    error: dict | None = None

    def to_dict(self) -> dict:
        return {"config": self.config, "seed": self.seed, "hashes": self.hashes, "preparation": self.preparation,
                "events": self.events, "outputs": self.outputs, "status": self.status, "error": self.error}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))

    def events_of(self, module: str) -> list[dict]:
        return [e for e in self.events if e["module"] == module]


@dataclass
class PreparedRun:
    config: RunConfig
    backend: ToyUNet
    codec: LinearCodec
    schedule: NoiseSchedule
    sampler: SamplerConfig
    layout: LayoutConfig
    refine: RefineConfig
    plan: FusionPlan
    concepts: list[ConceptSpec]
    prompts: PromptSpec
    branches: BranchSet
    texts: list[BranchTexts]
    latent_shape: tuple[int, int, int]
    mask_grid: tuple[int, int]
    reference: ReferenceFeatures | None
    initial_masks: dict[str, np.ndarray]
    hashes: dict
    preparation: dict


@dataclass
class GenerationResult:
    image: np.ndarray  # uint8 [H, W, 3]
    latent: np.ndarray
    manifest: RunManifest
    mask_history: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)  # step -> masks after that event


def image_hash(image: np.ndarray) -> str:
    return hash_bytes(np.ascontiguousarray(image).tobytes() + repr(image.shape).encode())


# -- preparation ---------------------------------------------------------------------


def build_backend(config: RunConfig) -> ToyUNet:
    b = config.backend
    if b.weights:
        if not Path(b.weights).is_file():
            raise ConfigError(f"backend weights not found: {b.weights}")
        return ToyUNet.load(b.weights)
    return ToyUNet(ToyConfig(seed=b.seed))


def _load_concepts(config: RunConfig, backend: ToyUNet) -> list[ConceptSpec]:
    specs = []
    targets = backend.adapter_targets()
    for c in config.concepts:
        backend.register_concept(c.id, c.tokens)
    for c in config.concepts:
        if c.adapter:
            if not Path(c.adapter).is_file():
                raise ConfigError(f"concept {c.id!r}: adapter file not found: {c.adapter}")
            adapter = load_adapter(c.adapter, c.id)
        else:
            seed = c.adapter_seed if c.adapter_seed is not None else int(hashlib.sha256(c.id.encode()).hexdigest()[:8], 16)
            adapter = AdapterSet.seeded(c.id, c.tokens, targets, backend.config.context_dim, seed,
                                        c.adapter_rank, c.adapter_scale, c.merge_coefficient)
        for path in c.reference_images:
            if not Path(path).is_file():
                raise ConfigError(f"concept {c.id!r}: reference image not found: {path}")
        specs.append(ConceptSpec(c.id, tuple(c.tokens), c.class_word, tuple(c.similar_tokens), adapter,
                                 tuple(c.reference_images), c.variant_prompt))
    return specs


def load_reference_image(path, latent_hw, factor: int) -> np.ndarray:
    """``[3, H, W]`` floats in [0, 1]; the size must match the latent grid times the codec factor."""
    if not Path(path).is_file():
        raise ConfigError(f"reference image not found: {path}")
    try:
        with Image.open(path) as im:
            pixels = from_uint8(np.asarray(im.convert("RGB")))
    except OSError as exc:
        raise IngestionError(f"cannot read reference image {path}: {exc}") from exc
    want = (latent_hw[0] * factor, latent_hw[1] * factor)
    if pixels.shape[1:] != want:
        raise IngestionError(f"reference image {path} is {pixels.shape[2]}x{pixels.shape[1]}, "
                             f"expected {want[1]}x{want[0]}")
    return pixels


def box_mask(box, grid) -> np.ndarray:
    """Cells whose centers fall inside a normalized ``(x0, y0, x1, y1)`` box."""
    h, w = grid
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    x0, y0, x1, y1 = box
    return ((ys >= y0) & (ys <= y1))[:, None] & ((xs >= x0) & (xs <= x1))[None, :]


def load_pixel_mask(path, concept_id: str) -> np.ndarray:
    if not Path(path).is_file():
        raise ConfigError(f"concept {concept_id!r}: mask file not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def _cache_dir(config: RunConfig) -> Path | None:
    d = config.cache_dir or os.environ.get(CACHE_ENV)
    return Path(d) if d else None


def _inversion_key(image_digest: str, backend: ToyUNet, config: RunConfig, spec: dict, timesteps) -> str:
    payload = {"image": image_digest, "backend": backend.weights_hash(), "prompt": config.prompt,
               "inversion_steps": config.sampler.inversion_steps, "spec": {k: sorted(v) for k, v in sorted(spec.items())},
               "timesteps": sorted(timesteps)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def prepare_run(config: RunConfig, backend: ToyUNet | None = None) -> PreparedRun:
    """Everything shared by all seeds: branches, reference features and initial masks."""
    backend = backend or build_backend(config)
    codec = LinearCodec(channels=backend.latent_channels)
    schedule = backend.schedule
    sampler = config.sampler_config()
    layout = config.layout_config()
    refine = config.refine_config()
    plan = config.fusion_plan(backend)
    size = config.backend.latent_size
    latent_shape = (backend.latent_channels, size, size)
    mask_grid = tuple(backend.layer_resolution(refine.cluster_layer, (size, size)))
    backend.layer_resolution(layout.feature_layer, (size, size))  # validates the layer id

    concepts = _load_concepts(config, backend)
    prompts = build_prompt_spec(config.prompt, concepts, backend.tokenizer)
    branches = make_branch_set(prompts, concepts)
    texts = encode_branches(backend, branches)
    hashes = {"backend": backend.weights_hash(),
              "adapters": {c.concept_id: c.adapter.content_hash() for c in concepts}}
    preparation = {"inversion": "skipped", "variants": dict(prompts.variants)}

    external = {c.id: c.mask for c in config.concepts if c.mask}
    boxed = {c.id: c.seed_box for c in config.concepts if c.seed_box is not None and not c.mask}
    layout_enabled = config.layout.enabled
    need_inversion = layout_enabled or bool(boxed)
    inversion, reference = None, None

    if need_inversion:
        if not config.reference_image:
            raise ConfigError("a reference image is required for layout alignment or seed-box masks")
        pixels = load_reference_image(config.reference_image, (size, size), codec.factor)
        digest = hash_arrays({"pixels": pixels})
        hashes["reference_image"] = digest
        z_ref = codec.encode(pixels)
        grid = timestep_grid(sampler.num_steps, schedule.T_train)
        spec, timesteps = {}, set()
        if layout_enabled:
            spec[layout.feature_layer] = {"keys"}
            timesteps |= set(window_timesteps(layout, sampler.num_steps, schedule.T_train))
        if boxed:
            spec.setdefault(refine.cluster_layer, set()).add("probs")
            timesteps.add(grid[0])
        inversion, preparation["inversion"] = _invert_cached(backend, z_ref, texts[0].cond, config, schedule, spec,
                                                             timesteps, digest)
        if layout_enabled:
            reference = features_from_inversion(inversion, layout, sampler.num_steps, schedule.T_train,
                                                source_id=digest[:16])
            hashes["reference_features"] = hash_arrays({str(t): f for t, f in reference.features.items()})

    masks = {}
    if external:
        pix = {cid: load_pixel_mask(path, cid) for cid, path in external.items()}
        masks.update(disjoint_seeds(rescale_mask_set(pix, mask_grid)))
    if boxed:
        seeds = {cid: box_mask(box, mask_grid) for cid, box in boxed.items()}
        probs = inversion.records[timestep_grid(sampler.num_steps, schedule.T_train)[0]][refine.cluster_layer].probs
        clustered = init_masks_from_inversion(probs, seeds, refine, mask_grid)
        taken = np.logical_or.reduce(list(masks.values())) if masks else np.zeros(mask_grid, bool)
        masks.update({cid: m & ~taken for cid, m in clustered.items()})
    for c in config.concepts:
        if c.id not in masks:
            log.warning("concept %s has no seed box or mask; its mask starts empty", c.id)
            masks[c.id] = np.zeros(mask_grid, dtype=bool)
    masks = {c.id: masks[c.id] for c in config.concepts}
    preparation["initial_mask_area"] = {cid: int(m.sum()) for cid, m in masks.items()}

    return PreparedRun(config, backend, codec, schedule, sampler, layout, refine, plan, concepts, prompts, branches,
                       texts, latent_shape, mask_grid, reference, masks, hashes, preparation)


def _invert_cached(backend, z_ref, text, config: RunConfig, schedule, spec, timesteps, digest):
    cache = _cache_dir(config)
    path = None
    if cache is not None:
        key = _inversion_key(digest, backend, config, spec, timesteps)
        path = cache / f"inversion_{key[:24]}.npz"
        if path.is_file():
            inversion, _ = InversionResult.load(path)
            return inversion, "cache"
    inversion = ddim_invert(backend, z_ref, text, config.sampler.inversion_steps, schedule,
                            record_spec=spec, record_timesteps=timesteps)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        inversion.save(path, {"reference_image": digest})
    return inversion, "computed"


# -- generation --------------------------------------------------------------------


def _foreground_positions(ctx: PreparedRun) -> list[list[int]]:
    """Token positions of each branch's subject words, for cross-attention heatmaps."""
    words = {w.lower() for c in ctx.concepts for w in (c.class_word, *c.similar_tokens)}
    base = [i + 1 for i, w in enumerate(split_words(ctx.prompts.base_prompt)) if w.lower() in words]
    out = [base]
    for i, c in enumerate(ctx.concepts, start=1):
        out.append(list(ctx.texts[i].cond.concept_token_slots.get(c.concept_id, ())))
    return out


def run_generation(ctx: PreparedRun, seed: int, out_dir=None, on_step: Callable | None = None) -> GenerationResult:
    """Sample one image. Per step: align (in window) -> refine masks (on cadence) -> inject.

    Mask refinement at step ``i`` clusters the self-attention recorded during
    step ``i - 1``'s injection passes, the latest maps available before this
    step's fusion needs its masks.
    """
    cfg = ctx.config
    manifest = RunManifest(cfg.model_dump(mode="json"), seed, dict(ctx.hashes), dict(ctx.preparation))
    out_dir = Path(out_dir) if out_dir is not None else None
    dump_steps = set(cfg.output.dump_steps)
    dump_dir = out_dir / "dumps" / f"seed_{seed}" if out_dir is not None and dump_steps else None
    try:
        result = _loop(ctx, seed, manifest, dump_dir, dump_steps, on_step)
    except Exception as exc:
        manifest.status = "failed"
        category = exc.category if isinstance(exc, MulticonceptError) else "runtime"
        manifest.error = {"category": category, "type": type(exc).__name__, "message": str(exc)}
        if out_dir is not None:
            manifest.save(out_dir / f"seed_{seed}.manifest.json")
        raise
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        image_path = out_dir / f"seed_{seed}.png"
        Image.fromarray(result.image).save(image_path)
        manifest.outputs["image_path"] = image_path.name
        if cfg.output.save_latent:
            save_archive(out_dir / f"seed_{seed}.latent.npz", {"latent": result.latent}, {"seed": seed})
        manifest.save(out_dir / f"seed_{seed}.manifest.json")
    return result


def _loop(ctx: PreparedRun, seed: int, manifest: RunManifest, dump_dir, dump_steps, on_step) -> GenerationResult:
    cfg, backend = ctx.config, ctx.backend
    grid = timestep_grid(ctx.sampler.num_steps, ctx.schedule.T_train)
    z = np.random.default_rng(seed).standard_normal(ctx.latent_shape)
    n = ctx.branches.n_concepts
    masks = {cid: m.copy() for cid, m in ctx.initial_masks.items()}
    history = {-1: masks}
    align_on = cfg.layout.enabled and ctx.reference is not None
    refine_on = cfg.refine.enabled and n > 0
    branch_inputs = [(ctx.texts[i].cond, b.adapter) for i, b in enumerate(ctx.branches)]
    cluster = ctx.refine.cluster_layer
    fg = _foreground_positions(ctx) if dump_dir is not None else None
    ca_layer = f"{CA_VIZ_BLOCK}.cross"
    norms_rows = []
    prev_records = None

    for i, t in enumerate(grid):
        t_prev = grid[i + 1] if i + 1 < len(grid) else CLEAN
        if align_on and ctx.layout.active(i):
            res = align_latents(backend, z, i, t, branch_inputs, ctx.reference[t], ctx.layout)
            if res.applied:
                z = res.latent
                manifest.events.append({"step": i, "t": t, "module": "align", "loss": res.losses[0],
                                        "grad_norm": res.grad_norms[0]})

        if refine_on and ctx.refine.is_refine_step(i) and prev_records is not None:
            probs = [rec[cluster].probs for rec in prev_records]
            out = refine_masks(probs[0], probs[1:], masks, ctx.refine, ctx.mask_grid)
            changed = int(sum(np.count_nonzero(out.masks[c] != masks[c]) for c in masks))
            masks = out.masks
            if not pairwise_disjoint(masks):
                raise MulticonceptError(f"refined masks overlap at step {i}")
            history[i] = masks
            manifest.events.append({"step": i, "t": t, "module": "refine", "changed": changed,
                                    "area": {c: int(m.sum()) for c, m in masks.items()},
                                    "fallback": [c for c, d in out.details.items() if d["fallback"]]})

        want = {}
        if refine_on and ctx.refine.is_refine_step(i + 1):
            want[cluster] = {"probs"}
        dumping = dump_dir is not None and i in dump_steps
        if dumping:
            want.setdefault(cluster, set()).add("probs")
            want[ca_layer] = {"probs"}
        res = inject_step(backend, z, t, t_prev, ctx.branches, ctx.texts, masks, ctx.plan, ctx.schedule,
                          ctx.sampler.guidance_scale, record_spec=want or None, track_norms=dump_dir is not None)
        module = "noise_fusion" if ctx.plan.mode == "noise" and n else "inject"
        manifest.events.append({"step": i, "t": t, "module": module, "layers": res.fused_layers})
        norms_rows.extend((i, t, layer, b, f) for layer, b, f in res.feature_norms)
        if dumping:
            _dump_step(dump_dir, i, t, ctx, res.records, fg, cluster, ca_layer)
        prev_records = res.records if want.get(cluster) else None
        if on_step is not None:
            on_step(i, t, z, res)  # z is the injection input, res.latent its output
        z = res.latent

    pixels = ctx.codec.decode(z)
    image = to_uint8(pixels)
    manifest.outputs.update({"image_sha256": image_hash(image), "latent_sha256": hash_arrays({"z0": z})})
    manifest.status = "ok"
    if dump_dir is not None:
        _dump_masks(dump_dir, history, grid)
        with open(dump_dir / "feature_norms.tsv", "w") as fh:
            fh.write("step\tt\tlayer\tbase_norm\tfused_norm\n")
            for row in norms_rows:
                fh.write("%d\t%d\t%s\t%.9g\t%.9g\n" % row)
    return GenerationResult(image, z, manifest, history)


def _dump_step(dump_dir: Path, step: int, t: int, ctx: PreparedRun, records, fg, cluster, ca_layer):
    arrays = {}
    for (branch, rec, pos) in zip(ctx.branches, records, fg):
        arrays[f"sa/{branch.name}"] = rec[cluster].probs
        ca = rec[ca_layer].probs
        arrays[f"ca/{branch.name}"] = ca[:, pos].mean(axis=1) if pos else np.zeros(ca.shape[0])
    grid = {"sa": list(ctx.backend.layer_resolution(cluster, ctx.latent_shape[1:])),
            "ca": list(ctx.backend.layer_resolution(ca_layer, ctx.latent_shape[1:]))}
    save_archive(dump_dir / f"step_{step:03d}.npz", arrays,
                 {"step": step, "t": t, "branches": [b.name for b in ctx.branches], "grid": grid})


def _dump_masks(dump_dir: Path, history, grid):
    arrays = {f"{step}/{cid}": m for step, masks in history.items() for cid, m in masks.items()}
    steps = sorted(history)
    save_archive(dump_dir / "masks.npz", arrays,
                 {"steps": steps, "concepts": list(history[-1]),
                  "timesteps": {str(s): (grid[s] if s >= 0 else None) for s in steps}})


# -- ablations ---------------------------------------------------------------------

VARIANTS = {
    "LA": ("w/o LA", ["layout.enabled=false"]),
    "SA": ("w/o SA", ["fusion.self_attention=false"]),
    "CA": ("w/o CA", ["fusion.cross_attention=false"]),
    "MR": ("w/o MR", ["refine.enabled=false"]),
    "noise": ("noise fusion", ["fusion.mode=noise"]),
}


def variant_config(config: RunConfig, variant: str | None) -> RunConfig:
    from .config import load_run_config

    if variant is None:
        return config
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from {sorted(VARIANTS)}")
    return load_run_config(data=config.model_dump(mode="json"), overrides=VARIANTS[variant][1])


@dataclass
class AblationSuite:
    runs: dict[str, list[RunManifest]]

    def table(self) -> str:
        header = ["variant", "seed", "image_sha256", "align", "refine", "inject", "noise_fusion", "first_loss",
                  "last_loss"]
        rows = []
        for name, manifests in self.runs.items():
            for m in manifests:
                losses = [e["loss"] for e in m.events_of("align")]
                rows.append([name, str(m.seed), m.outputs.get("image_sha256", "")[:12],
                             *(str(len(m.events_of(k))) for k in ("align", "refine", "inject", "noise_fusion")),
                             f"{losses[0]:.4f}" if losses else "-", f"{losses[-1]:.4f}" if losses else "-"])
        widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
        return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in [header, *rows]) + "\n"


def run_ablation_suite(config: RunConfig, variants: Sequence[str] = (), seeds: Sequence[int] | None = None,
                       out_dir=None, backend: ToyUNet | None = None) -> AblationSuite:
    """The full method plus one run per requested variant, all on the same seeds."""
    seeds = list(seeds if seeds is not None else config.seeds)
    runs = {}
    for variant in [None, *variants]:
        name = "full" if variant is None else VARIANTS.get(variant, (variant,))[0]
        cfg = variant_config(config, variant)
        ctx = prepare_run(cfg, backend)
        sub = Path(out_dir) / (variant or "full") if out_dir is not None else None
        runs[name] = [run_generation(ctx, s, sub).manifest for s in seeds]
    suite = AblationSuite(runs)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation_table.txt").write_text(suite.table())
    return suite


def replay_manifest(path_or_manifest, backend: ToyUNet | None = None) -> GenerationResult:
    """Re-run generation from a manifest's resolved config and seed."""
    from .config import load_run_config

    m = path_or_manifest if isinstance(path_or_manifest, RunManifest) else RunManifest.load(path_or_manifest)
    cfg = load_run_config(data=m.config)
    return run_generation(prepare_run(cfg, backend), m.seed)
