import json

import numpy as np
import pytest
from PIL import Image

from multiconcept.archive import load_archive
from multiconcept.backend import save_adapter
from multiconcept.errors import ConfigError, IngestionError
from multiconcept.masks import pairwise_disjoint
from multiconcept.pipeline import (CACHE_ENV, RunManifest, box_mask, prepare_run, replay_manifest, run_ablation_suite,
                                   run_generation, variant_config)

SMALL = ["sampler.num_steps=20", "sampler.inversion_steps=20", "layout.window=[0, 5]", "refine.window=[5, 15]"]


@pytest.fixture
def small(make_config, tmp_path):
    def build(extra=(), **updates):
        updates.setdefault("cache_dir", str(tmp_path / "cache"))
        return make_config([*SMALL, *extra], **updates)
    return build


def test_box_mask():
    m = box_mask((0.0, 0.0, 0.5, 0.5), (4, 4))
    assert m.sum() == 4 and m[:2, :2].all()
    assert not box_mask((0.4, 0.4, 0.6, 0.6), (4, 4)).any()  # no cell center inside
    assert box_mask((0.6, 0.6, 0.7, 0.7), (4, 4)).sum() == 1


def test_prepare_is_lazy_without_layout_or_boxes(small, base_config_dict):
    concepts = [{k: v for k, v in c.items() if k != "seed_box"} for c in base_config_dict["concepts"]]
    ctx = prepare_run(small(["layout.enabled=false"], concepts=concepts, reference_image=None))
    assert ctx.preparation["inversion"] == "skipped" and ctx.reference is None
    assert all(not m.any() for m in ctx.initial_masks.values())


def test_seed_boxes_without_layout_still_invert(small):
    ctx = prepare_run(small(["layout.enabled=false"]))
    assert ctx.preparation["inversion"] == "computed" and ctx.reference is None
    assert "reference_features" not in ctx.hashes
    assert all(m.any() for m in ctx.initial_masks.values()) and pairwise_disjoint(ctx.initial_masks)


def test_inversion_cache_is_reused(small):
    first = prepare_run(small())
    second = prepare_run(small())
    assert (first.preparation["inversion"], second.preparation["inversion"]) == ("computed", "cache")
    assert first.hashes == second.hashes
    for c in first.initial_masks:
        assert np.array_equal(first.initial_masks[c], second.initial_masks[c])
    a, b = run_generation(first, 1), run_generation(second, 1)
    assert a.manifest.outputs["image_sha256"] == b.manifest.outputs["image_sha256"]


def test_cache_dir_from_environment(small, tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "envcache"))
    cfg = small(cache_dir=None)
    prepare_run(cfg)
    assert list((tmp_path / "envcache").glob("inversion_*.npz"))
    assert prepare_run(cfg).preparation["inversion"] == "cache"


def test_missing_adapter_names_concept(small, base_config_dict, tmp_path):
    concepts = [dict(c) for c in base_config_dict["concepts"]]
    concepts[1]["adapter"] = str(tmp_path / "nope.npz")
    with pytest.raises(ConfigError, match="cat"):
        prepare_run(small(concepts=concepts))


def test_adapter_file_is_loaded(small, base_config_dict, tmp_path):
    ctx = prepare_run(small())
    path = save_adapter(tmp_path / "dog.npz", ctx.concepts[0].adapter)
    concepts = [dict(c) for c in base_config_dict["concepts"]]
    concepts[0]["adapter"] = str(path)
    ctx2 = prepare_run(small(concepts=concepts))
    assert ctx2.hashes["adapters"] == ctx.hashes["adapters"]


def test_reference_image_errors(small, tmp_path):
    with pytest.raises(ConfigError):
        prepare_run(small(reference_image=str(tmp_path / "missing.png")))
    Image.new("RGB", (100, 100)).save(tmp_path / "odd.png")
    with pytest.raises(IngestionError):
        prepare_run(small(reference_image=str(tmp_path / "odd.png")))


def test_external_pixel_mask_passthrough(small, base_config_dict, tmp_path):
    pix = np.zeros((128, 128), np.uint8)
    pix[:, :64] = 255
    Image.fromarray(pix).save(tmp_path / "dog_mask.png")
    concepts = [dict(c) for c in base_config_dict["concepts"]]
    concepts[0]["mask"] = str(tmp_path / "dog_mask.png")
    ctx = prepare_run(small(concepts=concepts))
    dog = ctx.initial_masks["dog"]
    assert dog.shape == ctx.mask_grid and dog[:, :8].all() and not dog[:, 8:].any()
    assert not (ctx.initial_masks["cat"] & dog).any()


def test_outputs_manifest_and_replay(small, tmp_path):
    ctx = prepare_run(small())
    res = run_generation(ctx, 3, tmp_path / "out")
    out = tmp_path / "out"
    assert (out / "seed_3.png").is_file() and (out / "seed_3.latent.npz").is_file()
    m = RunManifest.load(out / "seed_3.manifest.json")
    assert m.status == "ok" and m.seed == 3 and m.outputs["image_path"] == "seed_3.png"
    assert m.outputs["image_sha256"] == res.manifest.outputs["image_sha256"]
    img = np.asarray(Image.open(out / "seed_3.png"))
    assert img.tobytes() == res.image.tobytes()
    arrays, _ = load_archive(out / "seed_3.latent.npz")
    assert arrays["latent"].tobytes() == res.latent.tobytes()
    again = replay_manifest(out / "seed_3.manifest.json")
    assert again.manifest.outputs == {k: v for k, v in m.outputs.items() if k != "image_path"}
    assert again.manifest.events == m.events


def test_seeds_differ_and_events_follow_schedule(small):
    ctx = prepare_run(small())
    a, b = run_generation(ctx, 0), run_generation(ctx, 1)
    assert a.manifest.outputs["image_sha256"] != b.manifest.outputs["image_sha256"]
    m = a.manifest
    assert [e["step"] for e in m.events_of("align")] == list(range(6))
    assert [e["step"] for e in m.events_of("refine")] == [5, 10, 15]
    assert len(m.events_of("inject")) == 20
    for e in m.events_of("refine"):
        assert set(e) == {"step", "t", "module", "changed", "area", "fallback"}
    assert set(a.mask_history) == {-1, 5, 10, 15}


def test_failure_is_recorded(small, tmp_path):
    ctx = prepare_run(small())

    def explode(i, t, z, res):
        if i == 2:
            raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        run_generation(ctx, 0, tmp_path, on_step=explode)
    m = json.loads((tmp_path / "seed_0.manifest.json").read_text())
    assert m["status"] == "failed" and m["error"]["category"] == "runtime" and "boom" in m["error"]["message"]


def test_dumps(small, tmp_path):
    ctx = prepare_run(small(["output.dump_steps=[0, 10]"]))
    run_generation(ctx, 0, tmp_path)
    d = tmp_path / "dumps" / "seed_0"
    assert sorted(p.name for p in d.iterdir()) == ["feature_norms.tsv", "masks.npz", "step_000.npz", "step_010.npz"]
    arrays, meta = load_archive(d / "step_010.npz")
    assert set(arrays) == {f"{k}/{b}" for k in ("sa", "ca") for b in ("base", "dog", "cat")}
    assert arrays["sa/base"].shape == (256, 256) and arrays["ca/dog"].shape == (256,)
    _, mmeta = load_archive(d / "masks.npz")
    assert mmeta["steps"] == [-1, 5, 10, 15] and mmeta["concepts"] == ["dog", "cat"]
    rows = (d / "feature_norms.tsv").read_text().splitlines()
    assert rows[0].startswith("step\t") and len(rows) == 1 + 20 * len(ctx.plan.layers)


def test_variant_config_and_suite(small, tmp_path):
    cfg = small()
    assert variant_config(cfg, None) is cfg
    assert variant_config(cfg, "SA").fusion.self_attention is False
    with pytest.raises(ConfigError):
        variant_config(cfg, "XX")
    suite = run_ablation_suite(cfg, ["MR"], [0], tmp_path)
    assert list(suite.runs) == ["full", "w/o MR"]
    table = (tmp_path / "ablation_table.txt").read_text()
    assert table.splitlines()[0].split()[:2] == ["variant", "seed"] and len(table.splitlines()) == 3
    assert (tmp_path / "full" / "seed_0.png").is_file() and (tmp_path / "MR" / "seed_0.png").is_file()
