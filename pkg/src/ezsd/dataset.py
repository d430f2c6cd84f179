"""COCO-style annotation ingestion, base/novel splits and a synthetic shape dataset."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml
from PIL import Image

from .geometry import Box

log = logging.getLogger(__name__)

SMALL_AREA = 32 ** 2
MEDIUM_AREA = 96 ** 2


class DatasetError(ValueError):
    pass


def size_bin(area: float) -> str:
    """COCO size bucket: ``S`` below 32², ``M`` below 96², else ``L``."""
    if area < SMALL_AREA:
        return "S"
    if area < MEDIUM_AREA:
        return "M"
    return "L"


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    width: int
    height: int
    path: str | None = None
    pixels: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DatasetError(f"image {self.image_id} has non-positive size")
        if self.path is None and self.pixels is None:
            raise DatasetError(f"image {self.image_id} has no pixel source")

    def load(self) -> np.ndarray:
        """HxWx3 uint8 pixels."""
        if self.pixels is not None:
            return self.pixels
        with Image.open(self.path) as im:
            arr = np.asarray(im.convert("RGB"))
        if arr.shape[:2] != (self.height, self.width):
            raise DatasetError(f"{self.path}: size {arr.shape[1]}x{arr.shape[0]} "
                               f"disagrees with annotation {self.width}x{self.height}")
        return arr


@dataclass(frozen=True)
class Annotation:
    image_id: int
    category_id: int
    category: str
    box: Box
    area: float
    ann_id: int = 0

    @property
    def size_bin(self) -> str:
        return size_bin(self.area)


@dataclass(frozen=True)
class DatasetSplit:
    base_categories: tuple[str, ...]
    novel_categories: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "base_categories", tuple(self.base_categories))
        object.__setattr__(self, "novel_categories", tuple(self.novel_categories))
        overlap = set(self.base_categories) & set(self.novel_categories)
        if overlap:
            raise DatasetError(f"categories on both sides of the split: {sorted(overlap)}")
        if len(set(self.base_categories)) != len(self.base_categories) or \
                len(set(self.novel_categories)) != len(self.novel_categories):
            raise DatasetError("duplicate category names in split")

    @property
    def all_categories(self) -> tuple[str, ...]:
        """Base names first, then novel."""
        return self.base_categories + self.novel_categories

    def role(self, name: str) -> str | None:
        if name in self.base_categories:
            return "base"
        if name in self.novel_categories:
            return "novel"
        return None

    def names(self, side: str) -> tuple[str, ...]:
        if side == "base":
            return self.base_categories
        if side == "novel":
            return self.novel_categories
        if side in ("all", "general"):
            return self.all_categories
        raise ValueError(f"unknown split side {side!r}")

    def to_dict(self) -> dict:
        return {"base": list(self.base_categories), "novel": list(self.novel_categories)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetSplit":
        return cls(tuple(d.get("base", ())), tuple(d.get("novel", ())))


def load_split_config(path_or_dict) -> DatasetSplit:
    if isinstance(path_or_dict, DatasetSplit):
        return path_or_dict
    if isinstance(path_or_dict, Mapping):
        return DatasetSplit.from_dict(path_or_dict)
    with open(path_or_dict) as f:
        return DatasetSplit.from_dict(yaml.safe_load(f) or {})


@dataclass
class Dataset:
    images: list[ImageRecord]
    annotations: list[Annotation]
    split: DatasetSplit
    categories: dict[int, str]

    def annotations_by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {r.image_id: [] for r in self.images}
        for a in self.annotations:
            out.setdefault(a.image_id, []).append(a)
        return out

    def image(self, image_id: int) -> ImageRecord:
        for r in self.images:
            if r.image_id == image_id:
                return r
        raise KeyError(image_id)


def load_coco_json(path, split_config) -> tuple[list[ImageRecord], list[Annotation], DatasetSplit]:
    """Read a detection annotation file and partition its categories.

    Boxes are converted from ``(x, y, w, h)`` to corners. Annotations whose
    category is named on neither side of the split are dropped.
    """
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: malformed JSON ({e})") from e
    for key in ("images", "annotations", "categories"):
        if not isinstance(data.get(key), list):
            raise DatasetError(f"{path}: missing '{key}' array")
    split = load_split_config(split_config)

    categories = {int(c["id"]): str(c["name"]) for c in data["categories"]}
    known = set(categories.values())
    unknown = [n for n in split.all_categories if n not in known]
    if unknown:
        raise DatasetError(f"split names categories absent from {path}: {unknown}")

    root = path.parent
    records = []
    for im in data["images"]:
        fn = im.get("file_name")
        locator = None if fn is None else os.path.normpath(root / fn)
        records.append(ImageRecord(int(im["id"]), int(im["width"]), int(im["height"]), locator))
    sizes = {r.image_id: (r.width, r.height) for r in records}

    anns = []
    dropped = 0
    for a in data["annotations"]:
        cid = int(a["category_id"])
        if cid not in categories:
            raise DatasetError(f"annotation {a.get('id')} uses unknown category id {cid}")
        name = categories[cid]
        if split.role(name) is None:
            dropped += 1
            continue
        iid = int(a["image_id"])
        if iid not in sizes:
            raise DatasetError(f"annotation {a.get('id')} refers to missing image {iid}")
        x, y, w, h = (float(v) for v in a["bbox"])
        box = Box(x, y, x + w, y + h)
        W, H = sizes[iid]
        if box.x1 < 0 or box.y1 < 0 or box.x2 > W + 1e-6 or box.y2 > H + 1e-6:
            raise DatasetError(f"annotation {a.get('id')} box {box.as_tuple()} leaves image {iid}")
        anns.append(Annotation(iid, cid, name, box, float(a.get("area", w * h)), int(a.get("id", 0))))
    if dropped:
        log.info("dropped %d annotations of categories outside the split", dropped)
    return records, anns, split


def load_dataset(path, split_config) -> Dataset:
    records, anns, split = load_coco_json(path, split_config)
    with open(path) as f:
        cats = {int(c["id"]): str(c["name"]) for c in json.load(f)["categories"]}
    return Dataset(records, anns, split, cats)


def coco_dict(records: Sequence[ImageRecord], annotations: Sequence[Annotation],
              categories: Mapping[int, str], root=None) -> dict:
    def rel(p):
        if p is None:
            return None
        return os.path.relpath(p, root) if root is not None else p

    return {
        "images": [{"id": r.image_id, "width": r.width, "height": r.height,
                    "file_name": rel(r.path)} for r in records],
        "annotations": [{"id": a.ann_id, "image_id": a.image_id, "category_id": a.category_id,
                         "bbox": [a.box.x1, a.box.y1, a.box.width, a.box.height],
                         "area": a.area, "iscrowd": 0} for a in annotations],
        "categories": [{"id": cid, "name": name} for cid, name in sorted(categories.items())],
    }


def write_coco_json(path, records, annotations, categories) -> None:
    path = Path(path)
    data = coco_dict(records, annotations, categories, root=path.parent)
    path.write_text(json.dumps(data, sort_keys=True, separators=(",", ":")) + "\n")


def filter_training_images(records: Iterable[ImageRecord], annotations: Iterable[Annotation],
                           split: DatasetSplit, validation: bool = False) -> list[ImageRecord]:
    """Images usable for training (at least one base instance).

    With ``validation=True`` an image is kept if it has a base or a novel instance.
    """
    wanted = set(split.all_categories if validation else split.base_categories)
    keep = {a.image_id for a in annotations if a.category in wanted}
    return [r for r in records if r.image_id in keep]


# ---------------------------------------------------------------- toy shapes

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 225),
    "yellow": (235, 215, 40),
    "magenta": (205, 50, 205),
    "cyan": (40, 205, 215),
    "orange": (240, 140, 30),
    "purple": (120, 50, 190),
}
SHAPES = ("square", "rectangle", "circle", "ellipse", "triangle")


@dataclass(frozen=True)
class ShapeSpec:
    color: tuple[int, int, int]
    kind: str
    aspect: float = 1.0  # height / width

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise ValueError(f"unknown shape kind {self.kind!r}")


def parse_shape_name(name: str) -> ShapeSpec:
    """``"red-square"`` -> ShapeSpec((220, 40, 40), "square")."""
    try:
        color, kind = name.split("-", 1)
        rgb = COLORS[color]
    except (ValueError, KeyError):
        raise ValueError(f"cannot parse toy category name {name!r}; expected <color>-<shape>") from None
    aspect = {"rectangle": 0.6, "ellipse": 0.6}.get(kind, 1.0)
    return ShapeSpec(rgb, kind, aspect)


def shape_catalog(names: Iterable[str]) -> dict[str, ShapeSpec]:
    return {n: parse_shape_name(n) for n in names}


def shape_mask(kind: str, w: int, h: int) -> np.ndarray:
    """Boolean h x w mask of a shape inscribed in its box."""
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w
    v = (yy + 0.5) / h
    if kind in ("square", "rectangle"):
        return np.ones((h, w), dtype=bool)
    if kind in ("circle", "ellipse"):
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if kind == "triangle":
        # apex at top center, base along the bottom edge
        return np.abs(u - 0.5) <= 0.5 * v
    raise ValueError(kind)


def background(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    """Low-saturation gray texture."""
    base = rng.uniform(90, 150)
    gy, gx = np.mgrid[0:h, 0:w] / max(w, h)
    grad = rng.uniform(-25, 25) * gx + rng.uniform(-25, 25) * gy
    noise = rng.normal(0, 10, size=(h, w))
    gray = base + grad + noise
    tint = rng.normal(0, 4, size=3)
    img = gray[..., None] + tint[None, None, :] + rng.normal(0, 3, size=(h, w, 3))
    return np.clip(img, 0, 255)


def paint(img: np.ndarray, spec: ShapeSpec, box: tuple[int, int, int, int],
          rng: np.random.Generator | None = None) -> None:
    x1, y1, x2, y2 = box
    m = shape_mask(spec.kind, x2 - x1, y2 - y1)
    color = np.asarray(spec.color, dtype=np.float64)
    if rng is not None:
        color = color + rng.normal(0, 8, size=3)
    region = img[y1:y2, x1:x2]
    region[m] = np.clip(color, 0, 255)


def _place(rng, canvas, sizes, placed, max_tries=200):
    for _ in range(max_tries):
        side = int(rng.integers(sizes[0], sizes[1] + 1))
        x = int(rng.integers(0, canvas - side + 1))
        y = int(rng.integers(0, canvas - side + 1))
        cand = (x, y, x + side, y + side)
        if all(cand[2] + 2 <= p[0] or p[2] + 2 <= cand[0] or cand[3] + 2 <= p[1] or p[3] + 2 <= cand[1]
               for p in placed):
            return cand
    return None


def make_toy_dataset(out_dir, seed: int, n_images: int, canvas_size: int = 128,
                     catalog: Mapping[str, ShapeSpec] | Sequence[str] = ("red-square", "blue-circle"),
                     split: DatasetSplit | Mapping | None = None,
                     objects_per_image: tuple[int, int] = (1, 3),
                     object_size: tuple[int, int] = (18, 44)) -> Path:
    """Render ``n_images`` shape scenes with exact boxes into ``out_dir``.

    Writes ``annotations.json``, ``split.json`` and ``images/NNNNNN.png``.
    Output is a pure function of the arguments.

    Raises:
        DatasetError: the canvas cannot fit the requested objects.
    """
    if not isinstance(catalog, Mapping):
        catalog = shape_catalog(catalog)
    names = list(catalog)
    if split is None:
        split = DatasetSplit(tuple(names), ())
    split = load_split_config(split)
    for n in split.all_categories:
        if n not in catalog:
            raise DatasetError(f"split category {n!r} not in the shape catalog")
    lo, hi = object_size
    if canvas_size < lo + 2 or objects_per_image[0] < 0 or objects_per_image[1] < objects_per_image[0]:
        raise DatasetError(f"canvas {canvas_size} too small for objects of size {lo}")
    hi = min(hi, canvas_size)

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cat_ids = {n: i + 1 for i, n in enumerate(names)}
    records, anns = [], []
    for k in range(n_images):
        iid = k + 1
        img = background(rng, canvas_size, canvas_size)
        n_obj = int(rng.integers(objects_per_image[0], objects_per_image[1] + 1))
        placed = []
        for _ in range(n_obj):
            box = _place(rng, canvas_size, (lo, hi), placed)
            if box is None:
                if not placed:
                    raise DatasetError(f"canvas {canvas_size} too small to place an object")
                break
            name = names[int(rng.integers(len(names)))]
            spec = catalog[name]
            x1, y1, x2, y2 = box
            if spec.aspect != 1.0:
                # squeeze vertically inside the square slot
                h = max(4, int(round((x2 - x1) * spec.aspect)))
                off = ((y2 - y1) - h) // 2
                y1, y2 = y1 + off, y1 + off + h
            paint(img, spec, (x1, y1, x2, y2), rng)
            placed.append(box)
            anns.append(Annotation(iid, cat_ids[name], name, Box(x1, y1, x2, y2),
                                   float((x2 - x1) * (y2 - y1)), len(anns) + 1))
        path = out / "images" / f"{iid:06d}.png"
        Image.fromarray(img.astype(np.uint8)).save(path, optimize=False)
        records.append(ImageRecord(iid, canvas_size, canvas_size, str(path)))

    write_coco_json(out / "annotations.json", records, anns, {i: n for n, i in cat_ids.items()})
    (out / "split.json").write_text(json.dumps(split.to_dict(), sort_keys=True) + "\n")
    return out
