"""Static figures from per-step run dumps: attention clusters, cross-attention heatmaps, mask strips."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .archive import load_archive
from .errors import ConfigError
from .masks import cluster_self_attention

PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180],
    [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128], [170, 110, 40],
], dtype=np.uint8)


def _save(array: np.ndarray, path: Path, scale: int) -> Path:
    img = Image.fromarray(array)
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    # PNG without timestamps or text chunks, so repeated exports are byte-identical
    img.save(path, format="PNG", optimize=False)
    return path


def segmentation_image(labels: np.ndarray) -> np.ndarray:
    return PALETTE[np.asarray(labels) % len(PALETTE)]


def heatmap_image(values: np.ndarray) -> np.ndarray:
    """Min-max normalized map on a black -> red -> yellow ramp."""
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min()
    v = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    rgb = np.stack([np.clip(2 * v, 0, 1), np.clip(2 * v - 1, 0, 1), np.zeros_like(v)], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def export_mask_png(mask: np.ndarray, path) -> Path:
    """8-bit single-channel 0/255 image."""
    return _save(np.asarray(mask, dtype=np.uint8) * 255, Path(path), 1)


def mask_strip(masks: list[np.ndarray], gap: int = 1) -> np.ndarray:
    h = masks[0].shape[0]
    cols = []
    for i, m in enumerate(masks):
        if i:
            cols.append(np.full((h, gap), 128, dtype=np.uint8))
        cols.append(np.asarray(m, dtype=np.uint8) * 255)
    return np.concatenate(cols, axis=1)


def render_run(dump_dir, out_dir, clusters: int = 4, seed: int = 0, scale: int = 8) -> list[Path]:
    """Write every figure for one seed's dump directory; returns the files written."""
    dump_dir, out_dir = Path(dump_dir), Path(out_dir)
    steps = sorted(dump_dir.glob("step_*.npz"))
    if not steps:
        raise ConfigError(f"no per-step dumps in {dump_dir}; re-run generate with output.dump_steps set")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in steps:
        arrays, meta = load_archive(path)
        step = meta["step"]
        sa_grid, ca_grid = tuple(meta["grid"]["sa"]), tuple(meta["grid"]["ca"])
        for branch in meta["branches"]:
            seg = cluster_self_attention(arrays[f"sa/{branch}"], clusters, sa_grid, seed=seed)
            written.append(_save(segmentation_image(seg.labels), out_dir / f"sa_{branch}_step{step:03d}.png", scale))
            heat = arrays[f"ca/{branch}"].reshape(ca_grid)
            written.append(_save(heatmap_image(heat), out_dir / f"ca_{branch}_step{step:03d}.png", scale))

    mask_path = dump_dir / "masks.npz"
    if mask_path.is_file():
        arrays, meta = load_archive(mask_path)
        refine_steps = [s for s in meta["steps"] if s >= 0]
        for cid in meta["concepts"]:
            for s in meta["steps"]:
                t = meta["timesteps"][str(s)]
                name = f"mask_{cid}_{'init' if t is None else t}.png"
                written.append(export_mask_png(arrays[f"{s}/{cid}"], out_dir / name))
            if refine_steps:
                strip = mask_strip([arrays[f"{s}/{cid}"] for s in refine_steps])
                written.append(_save(strip, out_dir / f"mask_strip_{cid}.png", scale))
        (out_dir / "mask_strip_steps.txt").write_text(" ".join(map(str, refine_steps)) + "\n")
        written.append(out_dir / "mask_strip_steps.txt")
    return written
