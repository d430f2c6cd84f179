"""Offline distillation regions scored by the vision-language encoder, and their on-disk store."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import geometry as G
from .dataset import Annotation, Dataset, DatasetSplit, ImageRecord
from .encoder import DEFAULT_PROMPT, DEFAULT_TAU, VisionLanguageEncoder, classify_features

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
GT_SENTINEL = -1
MANIFEST = "manifest.jsonl"
BLOB = "features.bin"


class StoreError(ValueError):
    pass


@dataclass
class ClipProposal:
    box: tuple[float, float, float, float]
    objectness: float
    pred_category: int
    feature: np.ndarray
    source: str = "anchor"

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)
        self.feature = np.asarray(self.feature, dtype=np.float32)

    def same_as(self, other: "ClipProposal") -> bool:
        return (self.box == other.box and self.objectness == other.objectness
                and self.pred_category == other.pred_category and self.source == other.source
                and self.feature.tobytes() == other.feature.tobytes())


@dataclass(frozen=True)
class ProposalGenConfig:
    anchors: G.AnchorConfig = field(default_factory=G.AnchorConfig)
    resize: G.ResizeSpec = field(default_factory=G.ResizeSpec)
    nms_iou: float = 0.5
    top_k: int = 1000
    base_gt_filter_iou: float = 0.7
    train_subset_size: int = 200
    gt_enlarge: float = 1.2
    dictionary_mode: str = "all_categories"
    listed_novel: tuple[str, ...] = ()
    tau: float = DEFAULT_TAU
    prompt: str = DEFAULT_PROMPT
    seed: int = 0

    def __post_init__(self):
        for name in ("nms_iou", "base_gt_filter_iou"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.top_k < 0 or self.train_subset_size < 0:
            raise ValueError("top_k and train_subset_size must be non-negative")
        if self.dictionary_mode not in ("all_categories", "base_plus_listed_novel"):
            raise ValueError(f"unknown dictionary mode {self.dictionary_mode!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProposalGenConfig":
        d = dict(d)
        if "anchors" in d and isinstance(d["anchors"], Mapping):
            d["anchors"] = G.AnchorConfig(**d["anchors"])
        if "resize" in d and isinstance(d["resize"], Mapping):
            d["resize"] = G.ResizeSpec(**d["resize"])
        if "listed_novel" in d:
            d["listed_novel"] = tuple(d["listed_novel"])
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["listed_novel"] = list(self.listed_novel)
        out["anchors"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in out["anchors"].items()}
        return out


def dictionary_names(split: DatasetSplit, cfg: ProposalGenConfig) -> list[str]:
    """Category names scored against each anchor, base first."""
    if cfg.dictionary_mode == "all_categories":
        return list(split.all_categories)
    unknown = [n for n in cfg.listed_novel if n not in split.novel_categories]
    if unknown:
        raise ValueError(f"listed novel names not in split: {unknown}")
    return list(split.base_categories) + list(cfg.listed_novel)


def candidate_anchors(width: int, height: int, cfg: ProposalGenConfig) -> np.ndarray:
    """Anchors laid out on the resized frame, mapped back to original pixels."""
    nw, nh, scale = G.resize_keep_ratio(width, height, cfg.resize)
    anchors = G.generate_anchors(nw, nh, cfg.anchors) / scale
    anchors = G.clip_boxes(anchors, width, height)
    good = (anchors[:, 2] > anchors[:, 0]) & (anchors[:, 3] > anchors[:, 1])
    return anchors[good]


def generate_clip_proposals(image: ImageRecord | np.ndarray, annotations: Sequence[Annotation],
                            enc: VisionLanguageEncoder, dictionary_embeddings: np.ndarray,
                            cfg: ProposalGenConfig = ProposalGenConfig(),
                            base_categories: Iterable[str] | None = None) -> list[ClipProposal]:
    """Score anchors with the encoder and keep the confident, non-redundant ones.

    Anchors overlapping a base GT box by more than ``cfg.base_gt_filter_iou``
    are dropped before scoring; the enlarged base GT boxes themselves are
    appended at the end with objectness 1.0. ``annotations`` are treated as
    base unless ``base_categories`` restricts them.
    """
    pixels = image.load() if isinstance(image, ImageRecord) else np.asarray(image)
    height, width = pixels.shape[:2]
    base_set = None if base_categories is None else set(base_categories)
    base_gt = [a for a in annotations if base_set is None or a.category in base_set]
    gt_boxes = G.as_boxes([a.box for a in base_gt]) if base_gt else np.zeros((0, 4))

    anchors = candidate_anchors(width, height, cfg)
    if len(gt_boxes) and len(anchors):
        overlap = G.pairwise_iou(anchors, gt_boxes).max(axis=1)
        anchors = anchors[~(overlap > cfg.base_gt_filter_iou)]

    out: list[ClipProposal] = []
    if len(anchors):
        feats = enc.encode_regions(pixels, anchors)
        pred, scores = classify_features(feats, dictionary_embeddings, cfg.tau)
        obj = scores[np.arange(len(pred)), pred]
        keep = G.nms(anchors, obj, cfg.nms_iou)[:cfg.top_k]
        for i in keep:
            out.append(ClipProposal(tuple(anchors[i]), float(obj[i]), int(pred[i]), feats[i], "anchor"))

    if len(gt_boxes):
        bounds = (0, 0, width, height)
        enlarged = np.asarray([G.enlarge(b, cfg.gt_enlarge, bounds).as_tuple() for b in gt_boxes])
        feats = enc.encode_regions(pixels, enlarged)
        for b, f in zip(enlarged, feats):
            out.append(ClipProposal(tuple(b), 1.0, GT_SENTINEL, f, "base_gt"))
    return out


def sample_training_subset(proposals: Sequence[ClipProposal], cfg: ProposalGenConfig,
                           image_id: int) -> list[ClipProposal]:
    """Fixed per-image subset of at most ``cfg.train_subset_size`` proposals.

    Base-GT proposals are always kept (they count against the budget); the rest
    is a uniform draw seeded by ``(cfg.seed, image_id)``. Original order is kept.
    """
    budget = cfg.train_subset_size
    if len(proposals) <= budget:
        return list(proposals)
    gt = [i for i, p in enumerate(proposals) if p.source == "base_gt"][:budget]
    rest = [i for i, p in enumerate(proposals) if p.source != "base_gt"]
    rng = np.random.default_rng([int(cfg.seed), int(image_id)])
    take = rng.choice(len(rest), size=budget - len(gt), replace=False)
    chosen = sorted(gt + [rest[i] for i in take])
    return [proposals[i] for i in chosen]


# ------------------------------------------------------------------ store

def write_store(path, per_image: Mapping[int, Sequence[ClipProposal]] | Iterable[tuple[int, Sequence[ClipProposal]]],
                dim: int, meta: Mapping | None = None) -> Path:
    """Write a manifest + feature blob pair into directory ``path``.

    The first manifest line is a header ``{format_version, D, checksum, ...meta}``;
    each following line describes one image. Features are little-endian float32,
    concatenated in record order; ``feature_offset`` is in bytes.
    """
    items = list(per_image.items()) if isinstance(per_image, Mapping) else list(per_image)
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    chunks = []
    offset = 0
    for image_id, props in items:
        recs = []
        for p in props:
            if p.feature.shape != (dim,):
                raise StoreError(f"image {image_id}: feature dimension {p.feature.shape} != {dim}")
            recs.append({"box": list(p.box), "objectness": p.objectness,
                         "pred_category": p.pred_category, "source": p.source})
            chunks.append(np.ascontiguousarray(p.feature, dtype="<f4").tobytes())
        lines.append({"image_id": int(image_id), "D": dim, "count": len(recs),
                      "feature_offset": offset, "records": recs})
        offset += 4 * dim * len(recs)
    blob = b"".join(chunks)
    header = dict(meta or {})
    header.update({"format_version": FORMAT_VERSION, "D": dim,
                   "checksum": "sha256:" + hashlib.sha256(blob).hexdigest()})
    (root / BLOB).write_bytes(blob)
    with open(root / MANIFEST, "w") as f:
        for obj in [header] + lines:
            f.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")
    return root


def read_store(path, expected_dim: int | None = None) -> tuple[dict[int, list[ClipProposal]], dict]:
    """Load a store written by :func:`write_store`; returns ``(per_image, header)``.

    Raises:
        StoreError: version or dimension mismatch, truncated blob, checksum failure.
    """
    root = Path(path)
    try:
        with open(root / MANIFEST) as f:
            lines = [json.loads(l) for l in f if l.strip()]
        blob = (root / BLOB).read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise StoreError(f"{root}: unreadable store ({e})") from e
    if not lines:
        raise StoreError(f"{root}: empty manifest")
    header = lines[0]
    if header.get("format_version") != FORMAT_VERSION:
        raise StoreError(f"{root}: unsupported format version {header.get('format_version')}")
    dim = int(header["D"])
    if expected_dim is not None and dim != expected_dim:
        raise StoreError(f"{root}: store has D={dim}, consumer expects D={expected_dim}")
    expected_size = sum(4 * dim * rec["count"] for rec in lines[1:])
    if len(blob) < expected_size:
        raise StoreError(f"{root}: feature blob truncated ({len(blob)} < {expected_size} bytes)")
    if header.get("checksum") != "sha256:" + hashlib.sha256(blob).hexdigest():
        raise StoreError(f"{root}: feature blob checksum mismatch")
    out: dict[int, list[ClipProposal]] = {}
    for rec in lines[1:]:
        feats = np.frombuffer(blob, dtype="<f4", count=rec["count"] * dim,
                              offset=rec["feature_offset"]).reshape(rec["count"], dim)
        out[int(rec["image_id"])] = [
            ClipProposal(tuple(r["box"]), r["objectness"], r["pred_category"], feats[i].copy(), r["source"])
            for i, r in enumerate(rec["records"])]
    return out, header


def generate_store(path, dataset: Dataset, enc: VisionLanguageEncoder,
                   cfg: ProposalGenConfig = ProposalGenConfig(),
                   images: Sequence[ImageRecord] | None = None, workers: int = 1) -> dict[int, list[ClipProposal]]:
    """Generate proposals for ``images`` (default: all) and seal them into a store."""
    split = dataset.split
    names = dictionary_names(split, cfg)
    text = enc.encode_text(names, cfg.prompt)
    anns = dataset.annotations_by_image()
    images = list(dataset.images if images is None else images)

    def one(rec):
        return rec.image_id, generate_clip_proposals(rec, anns.get(rec.image_id, []), enc, text, cfg,
                                                     split.base_categories)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, images))
    else:
        results = [one(r) for r in images]
    meta = {"dictionary": names, "tau": cfg.tau, "prompt": cfg.prompt, "config": cfg.to_dict(),
            "encoder": getattr(enc, "config", lambda: {})()}
    write_store(path, results, enc.dim, meta)
    return dict(results)
