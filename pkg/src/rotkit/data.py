"""Synthetic rotation-regression benchmark data.

Each category gets its own rigid marker: six colored spheres at fixed
body-frame positions, drawn so the arrangement is chiral and has no
rotational symmetry. A sample is the marker rotated by a ground-truth
rotation and rendered by orthographic projection with painter's-algorithm
depth ordering onto a mid-gray background. Because the marker is
asymmetric and its sphere colors are distinct, the rotation is
identifiable from a single view, which keeps the regression well posed.

A generated dataset directory contains:

* ``images/<id>.png`` — the rendered samples;
* ``manifest.json`` — schema-versioned index: per-sample path, category,
  and, for labeled samples, the rotation as 9 row-major floats;
* ``hidden_truth.json`` — the true rotations of the *unlabeled* samples,
  for evaluation only. Training code has no loader for this file.

Everything is deterministic in the seed: per-sample rotations come from
generators derived via :mod:`rotkit.seeding`, so generation order (or
parallelism) cannot change the output, and regenerating with the same
seed reproduces every byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import seeding, so3

__all__ = [
    "MANIFEST_VERSION",
    "RenderConfig",
    "MarkerGeometry",
    "marker_geometry",
    "render_sample",
    "SampleRecord",
    "DatasetManifest",
    "generate_dataset",
    "load_manifest",
    "load_images",
    "load_hidden_truth",
]

MANIFEST_VERSION = 1

BACKGROUND_GRAY = 128

# Root of the fixed stream that defines marker geometry. Markers are a
# property of the category, not of any dataset seed, so every dataset
# agrees on what category k looks like.
_MARKER_STREAM_ROOT = 310_358_151

_PALETTE = np.array(
    [
        [230, 40, 40],
        [40, 200, 60],
        [60, 90, 235],
        [240, 210, 50],
        [220, 60, 220],
        [50, 210, 220],
    ],
    dtype=np.uint8,
)


@dataclass(frozen=True)
class RenderConfig:
    """Output raster size."""

    width: int = 64
    height: int = 64

    def __post_init__(self) -> None:
        if self.width < 8 or self.height < 8:
            raise ValueError("render size must be at least 8x8")


@dataclass(frozen=True)
class MarkerGeometry:
    """Body-frame marker: sphere centers, radii, and colors."""

    centers: np.ndarray
    radii: np.ndarray
    colors: np.ndarray


@lru_cache(maxsize=64)
def marker_geometry(category: int) -> MarkerGeometry:
    """Deterministic six-sphere marker for a category.

    Centers are drawn in a shell around the unit sphere with a minimum
    pairwise separation (rejection sampling), which makes the cloud
    chiral and rotationally asymmetric with overwhelming margin; the
    identifiability is verified empirically by the renderer tests.
    """
    if category < 0:
        raise ValueError("category must be nonnegative")
    rng = seeding.spawn(_MARKER_STREAM_ROOT, "marker", category)
    while True:
        dirs = rng.normal(size=(6, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        centers = dirs * rng.uniform(0.55, 1.0, size=(6, 1))
        deltas = centers[:, None, :] - centers[None, :, :]
        dists = np.linalg.norm(deltas, axis=2)
        if dists[np.triu_indices(6, k=1)].min() >= 0.75:
            break
    radii = rng.uniform(0.16, 0.30, size=6)
    colors = _PALETTE[rng.permutation(6)]
    return MarkerGeometry(centers=centers, radii=radii, colors=colors)


def render_sample(
    category: int, r: np.ndarray, cfg: RenderConfig = RenderConfig()
) -> np.ndarray:
    """Orthographic render of the category marker under rotation ``r``.

    The camera looks down -z; spheres are drawn far-to-near so nearer
    ones overwrite (painter's algorithm). Pure and deterministic.
    """
    rot = so3.check_rotation(r)
    geom = marker_geometry(category)
    w, h = cfg.width, cfg.height
    img = np.full((h, w, 3), BACKGROUND_GRAY, dtype=np.uint8)

    centers = geom.centers @ rot.T
    order = np.argsort(centers[:, 2], kind="stable")
    # marker extent is |center| + radius <= 1.3; 1.4 leaves a margin
    scale = 0.5 * min(w, h) / 1.4
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    for i in order:
        cx = (w - 1) / 2.0 + centers[i, 0] * scale
        cy = (h - 1) / 2.0 - centers[i, 1] * scale
        rad = geom.radii[i] * scale
        mask = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 <= rad * rad
        img[mask] = geom.colors[i]
    return img


@dataclass(frozen=True)
class SampleRecord:
    """One manifest row; ``label`` is None for unlabeled samples."""

    id: str
    path: str
    category: int
    label: Optional[np.ndarray]


@dataclass
class DatasetManifest:
    """Parsed manifest: schema version, image dims, and the sample list."""

    version: int
    split: str
    width: int
    height: int
    n_categories: int
    records: list[SampleRecord] = field(default_factory=list)

    @property
    def n_labeled(self) -> int:
        return sum(1 for rec in self.records if rec.label is not None)

    @property
    def n_unlabeled(self) -> int:
        return len(self.records) - self.n_labeled

    def labeled(self) -> list[SampleRecord]:
        return [rec for rec in self.records if rec.label is not None]

    def unlabeled(self) -> list[SampleRecord]:
        return [rec for rec in self.records if rec.label is None]


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def generate_dataset(
    n_samples: int,
    k: int,
    ratio_labeled: float,
    seed: int,
    out_dir,
    render_cfg: RenderConfig = RenderConfig(),
    split: str = "train",
) -> DatasetManifest:
    """Render a dataset to ``out_dir`` and return its manifest.

    Rotations are Haar-uniform (one derived generator per sample id, so
    the draw is independent of generation order); categories go
    round-robin; the labeled subset of size ``floor(ratio * n)`` is
    chosen by a seeded shuffle. True rotations of unlabeled samples go
    to ``hidden_truth.json``, not the manifest.
    """
    if not 0.0 < ratio_labeled <= 1.0:
        raise ValueError(f"ratio_labeled must be in (0, 1], got {ratio_labeled}")
    if k < 1 or n_samples < k:
        raise ValueError(f"need n_samples >= k >= 1, got n={n_samples}, k={k}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    n_labeled = int(math.floor(ratio_labeled * n_samples + 1e-9))
    order = seeding.spawn(seed, "split", split).permutation(n_samples)
    labeled_ids = set(int(i) for i in order[:n_labeled])

    records: list[SampleRecord] = []
    hidden: dict[str, list[float]] = {}
    for i in range(n_samples):
        sample_id = f"{split}-{i:06d}"
        category = i % k
        rot = so3.random_rotation(seeding.spawn(seed, "rotation", split, i))
        img = render_sample(category, rot, render_cfg)
        rel_path = f"images/{sample_id}.png"
        Image.fromarray(img, mode="RGB").save(out / rel_path, format="PNG")
        if i in labeled_ids:
            label = rot
        else:
            label = None
            hidden[sample_id] = so3.rotation_to_floats(rot)
        records.append(
            SampleRecord(id=sample_id, path=rel_path, category=category, label=label)
        )

    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        split=split,
        width=render_cfg.width,
        height=render_cfg.height,
        n_categories=k,
        records=records,
    )
    doc = {
        "version": manifest.version,
        "split": split,
        "width": manifest.width,
        "height": manifest.height,
        "n_categories": k,
        "samples": [
            {
                "id": rec.id,
                "path": rec.path,
                "category": rec.category,
                "label": so3.rotation_to_floats(rec.label)
                if rec.label is not None
                else None,
            }
            for rec in records
        ],
    }
    _write_json(out / "manifest.json", doc)
    if hidden:
        _write_json(out / "hidden_truth.json", {"version": 1, "labels": hidden})
    return manifest


def load_manifest(path) -> DatasetManifest:
    """Read and validate a ``manifest.json``."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {doc.get('version')!r}")
    records = []
    for row in doc["samples"]:
        label = None
        if row["label"] is not None:
            label = so3.rotation_from_floats(row["label"])
        category = int(row["category"])
        if not 0 <= category < doc["n_categories"]:
            raise ValueError(f"sample {row['id']}: category {category} out of range")
        records.append(
            SampleRecord(id=row["id"], path=row["path"], category=category, label=label)
        )
    return DatasetManifest(
        version=doc["version"],
        split=doc["split"],
        width=int(doc["width"]),
        height=int(doc["height"]),
        n_categories=int(doc["n_categories"]),
        records=records,
    )


def load_images(manifest: DatasetManifest, base_dir, records=None) -> np.ndarray:
    """Load PNGs for ``records`` (default: all) as one (N, H, W, 3) uint8 array."""
    base = Path(base_dir)
    if records is None:
        records = manifest.records
    out = np.empty((len(records), manifest.height, manifest.width, 3), dtype=np.uint8)
    for j, rec in enumerate(records):
        with Image.open(base / rec.path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if arr.shape != (manifest.height, manifest.width, 3):
            raise ValueError(f"image {rec.path} has shape {arr.shape}")
        out[j] = arr
    return out


def load_hidden_truth(path) -> dict[str, np.ndarray]:
    """Read a hidden-truth sidecar: sample id -> true rotation.

    For evaluation and diagnostics only; training code must not call
    this (the selection tests assert as much).
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != 1:
        raise ValueError(f"unsupported hidden-truth version {doc.get('version')!r}")
    return {k: so3.rotation_from_floats(v) for k, v in doc["labels"].items()}
