"""
Procedural toy images: three shapes in four colours on a flat background.
Each (shape, colour) pair is one condition class with a fixed embedding vector.
"""
import json
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from .constant import COND_TABLE_SEED
from .errors import EmptyDataset, InvalidSpec, UnknownClass
from .logs import error_and_raise, escape, logger
from .models.config_models import ToySpec
from .utils import read_ppm, save_sidecar, write_ppm

SHAPES = ("circle", "square", "triangle")
COLORS: Dict[str, Tuple[float, float, float]] = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
}
COLOR_NAMES = tuple(COLORS)
NUM_CLASSES = len(SHAPES) * len(COLORS)
MANIFEST_NAME = "manifest.json"


class ToyDataset(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    images: np.ndarray  # (N, 3, H, W) in [-1, 1]
    shape_ids: np.ndarray
    color_ids: np.ndarray
    conds: np.ndarray  # (N, cond_dim)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def class_ids(self) -> np.ndarray:
        return class_index(self.shape_ids, self.color_ids)

    def subset(self, idx) -> "ToyDataset":
        return ToyDataset(images=self.images[idx], shape_ids=self.shape_ids[idx],
                          color_ids=self.color_ids[idx], conds=self.conds[idx])


def class_index(shape_id, color_id):
    return np.asarray(shape_id) * len(COLORS) + np.asarray(color_id)


@lru_cache(maxsize=8)
def _cond_table(dim: int) -> np.ndarray:
    if dim < NUM_CLASSES:
        error_and_raise(f"condition dim {dim} cannot hold {NUM_CLASSES} orthonormal class vectors", InvalidSpec)
    rng = np.random.default_rng(COND_TABLE_SEED)
    q, _ = np.linalg.qr(rng.standard_normal((dim, NUM_CLASSES)))
    table = np.ascontiguousarray(q.T)
    table.setflags(write=False)
    return table


def cond_embed(shape_id: int, color_id: int, dim: int = 16) -> np.ndarray:
    """Unit-norm condition vector of one class. Distinct classes are orthogonal."""
    if not (0 <= shape_id < len(SHAPES) and 0 <= color_id < len(COLORS)):
        error_and_raise(f"unknown class (shape={shape_id}, color={color_id})", UnknownClass)
    return _cond_table(dim)[int(class_index(shape_id, color_id))].copy()


def null_condition(dim: int = 16) -> np.ndarray:
    return np.zeros(dim)


def prompt_set(dim: int = 16) -> np.ndarray:
    """Every class embedding, row i for class i. Distillation draws its conditions from here."""
    return _cond_table(dim).copy()


def parse_condition(text: str, dim: int = 16) -> np.ndarray:
    """`shape:color`, e.g. `circle:red`."""
    parts = text.strip().lower().split(":")
    if len(parts) != 2 or parts[0] not in SHAPES or parts[1] not in COLORS:
        error_and_raise(f"unknown condition {text!r}; expected one of {SHAPES} : {COLOR_NAMES}", UnknownClass)
    return cond_embed(SHAPES.index(parts[0]), COLOR_NAMES.index(parts[1]), dim)


def _coverage(spec: ToySpec, shape_id: int, rng: np.random.Generator) -> np.ndarray:
    """Fraction of each pixel covered by the shape, from a regular supersampling grid."""
    size, ss = spec.image_size, spec.supersample
    half = rng.uniform(*spec.size_range) / 2.0
    cx, cy = 0.5 + spec.position_jitter * rng.uniform(-1.0, 1.0, size=2)
    coords = (np.arange(size * ss) + 0.5) / (size * ss)
    x, y = np.meshgrid(coords, coords)
    dx, dy = x - cx, y - cy

    if SHAPES[shape_id] == "circle":
        inside = dx ** 2 + dy ** 2 <= half ** 2
    elif SHAPES[shape_id] == "square":
        inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    else:
        # apex at the top, base along the bottom edge of the bounding box
        inside = (dy <= half) & (np.abs(dx) <= (dy + half) / 2.0)
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def render(spec: ToySpec, shape_id: int, color_id: int, rng: np.random.Generator) -> np.ndarray:
    """One (3, H, W) image in [-1, 1]."""
    cov = _coverage(spec, shape_id, rng)
    color = np.asarray(COLORS[COLOR_NAMES[color_id]])[:, None, None]
    img = spec.background + cov[None] * (color - spec.background)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def generate_dataset(spec: ToySpec | dict, n: int, seed: int, cond_dim: int = 16) -> ToyDataset:
    """
    Deterministic in (spec, n, seed). Labels cycle through every class before being shuffled,
    so each class appears n // 12 or n // 12 + 1 times.
    """
    if isinstance(spec, dict):
        try:
            spec = ToySpec(**spec)
        except ValidationError as e:
            error_and_raise(f"invalid toy spec: {e}", InvalidSpec)
    if n < 1:
        error_and_raise(f"dataset size must be at least 1, got {n}", InvalidSpec)

    labels = np.random.default_rng(seed).permutation(np.arange(n) % NUM_CLASSES)
    shape_ids, color_ids = labels // len(COLORS), labels % len(COLORS)
    images = np.stack([
        render(spec, int(s), int(c), np.random.default_rng([seed, i]))
        for i, (s, c) in enumerate(zip(shape_ids, color_ids))
    ])
    conds = _cond_table(cond_dim)[labels].astype(np.float32)
    logger.debug(f"Generated toy dataset: n={n}, seed={seed}")
    return ToyDataset(images=images, shape_ids=shape_ids, color_ids=color_ids, conds=conds)


def export_dataset(ds: ToyDataset, out_dir: str | Path) -> Path:
    """Write every image as PPM plus a manifest mapping file name to class ids."""
    from .diffusion.sampler import to_pixels

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pixels = to_pixels(ds.images)
    manifest = {}
    for i, img in enumerate(pixels):
        name = f"{i:06d}.ppm"
        write_ppm(out_dir / name, img)
        manifest[name] = {"shape": int(ds.shape_ids[i]), "color": int(ds.color_ids[i])}
    save_sidecar(out_dir / MANIFEST_NAME, manifest)
    logger.info(f"Exported <green>{len(ds)}</green> images to {escape(out_dir)}")
    return out_dir / MANIFEST_NAME


def load_image_dir(path: str | Path) -> Tuple[np.ndarray, List[str]]:
    """All PPM files of a directory, in name order, as (N, H, W, 3) uint8."""
    path = Path(path)
    files = sorted(path.glob("*.ppm"))
    if not files:
        error_and_raise(f"no PPM images found in {path}", EmptyDataset)
    images = [read_ppm(f) for f in files]
    if len({img.shape for img in images}) != 1:
        error_and_raise(f"images in {path} have different sizes", InvalidSpec)
    return np.stack(images), [f.name for f in files]


def load_manifest(path: str | Path) -> Dict[str, Dict[str, int]]:
    with open(Path(path) / MANIFEST_NAME, "r", encoding="utf-8") as f:
        return json.load(f)
