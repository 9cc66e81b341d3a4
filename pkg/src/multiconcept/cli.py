"""Command line: generate, invert, eval, viz, ablate."""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from .config import load_eval_config, load_run_config
from .errors import ConfigError, MulticonceptError

log = logging.getLogger("multiconcept")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _fail(category: str, message: str) -> None:
    click.echo(json.dumps({"error": {"category": category, "message": message}}), err=True)
    raise SystemExit(EXIT_CONFIG if category == "config" else EXIT_RUNTIME)


def guarded(fn):
    """Map package errors to a JSON error line on stderr and a categorized exit code."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MulticonceptError as exc:
            _fail(exc.category, str(exc))
        except (OSError, ValueError) as exc:
            _fail("runtime", f"{type(exc).__name__}: {exc}")

    return wrapper


config_option = click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                             help="YAML config file.")
override_option = click.option("--override", "-o", "overrides", multiple=True, metavar="KEY=VALUE",
                               help="Dotted-key override, e.g. layout.lambda_step=10 (repeatable).")


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for info, -vv for debug logging.")
def cli(verbose):
    """Multi-concept composition with layout alignment and masked attention fusion."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@cli.command()
@config_option
@override_option
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory (default: output.dir).")
@click.option("--seed", "seeds", type=int, multiple=True, help="Seed(s) to run; default: the config's seed list.")
@guarded
def generate(config_path, overrides, out_dir, seeds):
    """Generate one image and manifest per seed."""
    from .pipeline import prepare_run, run_generation

    cfg = load_run_config(config_path, overrides)
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(cfg.to_yaml())
    ctx = prepare_run(cfg)
    for seed in seeds or cfg.seeds:
        result = run_generation(ctx, seed, out)
        click.echo(f"seed {seed}: {out / result.manifest.outputs['image_path']}  "
                   f"sha256={result.manifest.outputs['image_sha256'][:16]}")


@cli.command()
@config_option
@override_option
@click.option("--cache-dir", type=click.Path(file_okay=False), help="Where to store the inversion archive.")
@guarded
def invert(config_path, overrides, cache_dir):
    """Invert the reference image once and cache its recorded attention."""
    from .pipeline import CACHE_ENV, prepare_run

    cfg = load_run_config(config_path, overrides)
    if cache_dir:
        cfg = cfg.model_copy(update={"cache_dir": str(Path(cache_dir).resolve())})
    if not (cfg.cache_dir or _env(CACHE_ENV)):
        raise ConfigError(f"no cache directory: pass --cache-dir, set cache_dir, or export {CACHE_ENV}")
    if not cfg.needs_inversion():
        raise ConfigError("this config needs no inversion (layout alignment off and no seed boxes)")
    ctx = prepare_run(cfg)
    click.echo(f"inversion {ctx.preparation['inversion']}; cache: {cfg.cache_dir or _env(CACHE_ENV)}")


def _env(name):
    import os

    return os.environ.get(name)


@cli.command(name="eval")
@config_option
@override_option
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@guarded
def evaluate(config_path, overrides, out_dir):
    """Score a batch of images: text alignment, SegSim, subject counts."""
    from .evaluation import (ColorSegmenter, ColorTextScorer, ConceptReferences, HistogramScorer,
                             HttpEmbeddingScorer, HttpSegmenter, ServiceConfig, evaluate_batch, load_image,
                             read_batch)

    cfg = load_eval_config(config_path, overrides)
    if not Path(cfg.batch).is_file():
        raise ConfigError(f"batch manifest not found: {cfg.batch}")
    s = cfg.segmenter
    if s.kind == "http":
        if not s.url:
            raise ConfigError("segmenter.url is required for kind=http")
        segmenter = HttpSegmenter(ServiceConfig(s.url, s.timeout, s.retries))
    else:
        segmenter = ColorSegmenter(s.aliases, s.tolerance)
    sc = cfg.scorer
    if sc.kind == "http":
        if not sc.url:
            raise ConfigError("scorer.url is required for kind=http")
        scorer = HttpEmbeddingScorer(ServiceConfig(sc.url, sc.timeout, sc.retries), sc.dim)
    else:
        scorer = HistogramScorer(sc.bins)
    concepts = []
    for c in cfg.concepts:
        missing = [p for p in c.references if not Path(p).is_file()]
        if missing or not c.references:
            raise ConfigError(f"concept {c.id!r}: missing reference images {missing or '(none given)'}")
        concepts.append(ConceptReferences(c.id, c.prompt, [(Path(p).name, load_image(p)) for p in c.references]))
    text_scorer = ColorTextScorer(segmenter) if cfg.text_scorer == "mock_color" and s.kind == "mock_color" else None
    items = read_batch(cfg.batch)
    report = evaluate_batch(items, segmenter, scorer, concepts, cfg.segsim_prompts,
                            cfg.count.prompts if cfg.count else (), cfg.count.expected_total if cfg.count else 2,
                            text_scorer, base_dir=Path(cfg.batch).parent)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.jsonl").write_text(report.to_jsonl())
    (out / "report.txt").write_text(report.table())
    click.echo(report.table(), nl=False)
    if report.summary["n_evaluated"] == 0:
        _fail("evaluation", f"no image could be evaluated ({len(items)} in batch)")


@cli.command()
@click.option("--run", "run_dir", required=True, type=click.Path(file_okay=False), help="A generate output dir.")
@click.option("--seed", type=int, default=None, help="Which seed's dumps (default: all).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Figure directory (default: RUN/figures).")
@click.option("--clusters", type=int, default=4, show_default=True, help="K-Means clusters for attention maps.")
@guarded
def viz(run_dir, seed, out_dir, clusters):
    """Render attention clusters, cross-attention heatmaps and mask strips from run dumps."""
    from .viz import render_run

    root = Path(run_dir) / "dumps"
    dirs = [root / f"seed_{seed}"] if seed is not None else sorted(root.glob("seed_*"))
    dirs = [d for d in dirs if d.is_dir()]
    if not dirs:
        raise ConfigError(f"no dumps under {root}; re-run generate with output.dump_steps (e.g. [0, 60, 199])")
    out = Path(out_dir) if out_dir else Path(run_dir) / "figures"
    for d in dirs:
        files = render_run(d, out / d.name, clusters=clusters)
        click.echo(f"{d.name}: {len(files)} files in {out / d.name}")


@cli.command()
@config_option
@override_option
@click.option("--variant", "variants", multiple=True, type=click.Choice(["LA", "SA", "CA", "MR", "noise"]),
              help="Ablation to run next to the full method (repeatable).")
@click.option("--seed", "seeds", type=int, multiple=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False))
@guarded
def ablate(config_path, overrides, variants, seeds, out_dir):
    """Full method plus ablation variants on shared seeds, with a comparison table."""
    from .pipeline import run_ablation_suite

    cfg = load_run_config(config_path, overrides)
    out = Path(out_dir or cfg.output.dir)
    suite = run_ablation_suite(cfg, variants, list(seeds) or None, out)
    click.echo(suite.table(), nl=False)


def main():
    cli()


if __name__ == "__main__":
    main()
