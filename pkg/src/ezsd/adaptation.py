"""Domain adaptation of the image tower by training only its normalization layers."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import Dataset, DatasetSplit
from .encoder import DEFAULT_PROMPT, DEFAULT_TAU, VisionLanguageEncoder
from .geometry import Box, DegenerateBoxError, enlarge

log = logging.getLogger(__name__)

SETTINGS = ("base", "novel", "general")
BINS = ("L", "M", "S")


@dataclass(frozen=True)
class AdaptConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 12
    grad_norm_clip: float = 0.1
    enlarge_factor: float = 1.2
    weight_decay: float = 0.0
    tau: float = DEFAULT_TAU
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.grad_norm_clip <= 0:
            raise ValueError("learning rate, batch size and clip norm must be positive")
        if self.epochs < 0 or self.enlarge_factor <= 0:
            raise ValueError("epochs must be >= 0 and enlarge_factor > 0")


@dataclass
class CropSet:
    """Instance regions with labels indexing ``names``."""

    names: tuple[str, ...]
    image_ids: list[int] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    bins: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def preprocess(self, enc: VisionLanguageEncoder, dataset: Dataset) -> torch.Tensor:
        """(N, 3, S, S) crops in this set's order."""
        out = torch.zeros((len(self), 3, enc.input_side, enc.input_side))
        by_image: dict[int, list[int]] = {}
        for i, iid in enumerate(self.image_ids):
            by_image.setdefault(iid, []).append(i)
        for iid, idx in by_image.items():
            pixels = dataset.image(iid).load()
            out[idx] = enc.preprocess(pixels, [self.boxes[i].as_tuple() for i in idx])
        return out


def collect_instance_crops(dataset: Dataset, split: DatasetSplit | None = None, side: str = "base",
                           enlarge_factor: float = 1.2) -> CropSet:
    """One enlarged, image-clipped region per annotation on ``side``.

    Raises:
        DegenerateBoxError: an enlarged box has no area inside its image.
    """
    split = split or dataset.split
    names = split.names(side)
    lookup = {n: i for i, n in enumerate(names)}
    sizes = {r.image_id: (r.width, r.height) for r in dataset.images}
    out = CropSet(names)
    for a in dataset.annotations:
        if a.category not in lookup:
            continue
        w, h = sizes[a.image_id]
        try:
            box = enlarge(a.box, enlarge_factor, bounds=(0, 0, w, h))
        except DegenerateBoxError as e:
            raise DegenerateBoxError(f"annotation {a.ann_id} on image {a.image_id}: {e}") from e
        out.image_ids.append(a.image_id)
        out.boxes.append(box)
        out.labels.append(lookup[a.category])
        out.bins.append(a.size_bin)
    return out


def _cosine_logits(feats: torch.Tensor, text: torch.Tensor, tau: float) -> torch.Tensor:
    return F.normalize(feats, dim=1) @ F.normalize(text, dim=1).T / tau


def finetune_layernorm(enc: VisionLanguageEncoder, crops: torch.Tensor, labels,
                       base_text_embeddings, cfg: AdaptConfig = AdaptConfig(),
                       history: list | None = None) -> VisionLanguageEncoder:
    """Return a copy of ``enc`` whose normalization parameters minimize crop cross-entropy.

    AdamW (weight decay ``cfg.weight_decay``) at a constant learning rate, with
    the global gradient norm clipped to ``cfg.grad_norm_clip``. Every other
    parameter is left untouched. If ``history`` is given it receives the mean
    cross-entropy before training and after each epoch.
    """
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if len(labels) == 0 or len(crops) == 0:
        raise ValueError("cannot adapt on an empty crop set")
    if len(crops) != len(labels):
        raise ValueError("crops and labels differ in length")
    out = enc.clone()
    norm, other = out.parameter_partition()
    if not norm:
        raise ValueError("encoder exposes no normalization parameters")
    for p in other.values():
        p.requires_grad_(False)
    for p in norm.values():
        p.requires_grad_(True)
    text = torch.as_tensor(np.asarray(base_text_embeddings), dtype=torch.float32)
    if labels.max() >= len(text) or labels.min() < 0:
        raise ValueError("label outside the base embedding table")

    with torch.no_grad():
        stem = out.stem(crops)

    def mean_loss():
        with torch.no_grad():
            return float(F.cross_entropy(_cosine_logits(out.head(stem), text, cfg.tau), labels))

    if history is not None:
        history.append(mean_loss())
    if cfg.epochs == 0:
        return out

    params = list(norm.values())
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = len(labels)
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(rng.permutation(n))
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = _cosine_logits(out.head(stem[idx]), text, cfg.tau)
            loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_norm_clip)
            opt.step()
        if history is not None:
            history.append(mean_loss())
            log.info("adapt epoch %d: CE %.4f", epoch + 1, history[-1])
    for p in out.parameters():
        p.requires_grad_(False)
    return out


@dataclass
class AccReport:
    """Instance accuracy per (setting, size bin); ``Avg`` pools all bins."""

    counts: dict[tuple[str, str], int] = field(default_factory=dict)
    correct: dict[tuple[str, str], int] = field(default_factory=dict)

    def add(self, setting: str, bin_: str, ok: bool) -> None:
        for key in ((setting, bin_), (setting, "Avg")):
            self.counts[key] = self.counts.get(key, 0) + 1
            self.correct[key] = self.correct.get(key, 0) + int(ok)

    def accuracy(self, setting: str, bin_: str = "Avg") -> float | None:
        n = self.counts.get((setting, bin_), 0)
        return None if n == 0 else self.correct[(setting, bin_)] / n

    def merge(self, other: "AccReport") -> "AccReport":
        out = AccReport(dict(self.counts), dict(self.correct))
        for k, n in other.counts.items():
            out.counts[k] = out.counts.get(k, 0) + n
            out.correct[k] = out.correct.get(k, 0) + other.correct[k]
        return out

    def rows(self) -> list[tuple[str, str, int, float]]:
        rows = []
        for s in SETTINGS:
            for b in BINS + ("Avg",):
                n = self.counts.get((s, b), 0)
                if n:
                    rows.append((s, b, n, self.correct[(s, b)] / n))
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["setting", "bin", "count", "accuracy"])
            for s, b, n, acc in self.rows():
                w.writerow([s, b, n, f"{acc:.6f}"])

    @classmethod
    def from_csv(cls, path) -> "AccReport":
        out = cls()
        with open(path) as f:
            for row in csv.DictReader(f):
                key = (row["setting"], row["bin"])
                n = int(row["count"])
                out.counts[key] = n
                out.correct[key] = int(round(float(row["accuracy"]) * n))
        return out


def evaluate_instance_acc(enc: VisionLanguageEncoder, dataset: Dataset, split: DatasetSplit | None = None,
                          setting: str = "general", enlarge_factor: float = 1.2,
                          template: str = DEFAULT_PROMPT) -> AccReport:
    """Classify GT instances against the side-restricted text dictionary."""
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}")
    split = split or dataset.split
    crops = collect_instance_crops(dataset, split, "all" if setting == "general" else setting,
                                   enlarge_factor)
    report = AccReport()
    if len(crops) == 0:
        return report
    text = enc.encode_text(list(crops.names), template)
    by_image: dict[int, list[int]] = {}
    for i, iid in enumerate(crops.image_ids):
        by_image.setdefault(iid, []).append(i)
    preds = np.zeros(len(crops), dtype=np.int64)
    tn = text / np.linalg.norm(text, axis=1, keepdims=True)
    for iid, idx in by_image.items():
        feats = enc.encode_regions(dataset.image(iid).load(), [crops.boxes[i].as_tuple() for i in idx])
        preds[idx] = np.argmax(feats @ tn.T, axis=1)
    for i, lab in enumerate(crops.labels):
        report.add(setting, crops.bins[i], bool(preds[i] == lab))
    return report


def evaluate_all_settings(enc, dataset, split=None, enlarge_factor: float = 1.2,
                          template: str = DEFAULT_PROMPT) -> AccReport:
    report = AccReport()
    for s in SETTINGS:
        report = report.merge(evaluate_instance_acc(enc, dataset, split, s, enlarge_factor, template))
    return report


def adapt_encoder(enc: VisionLanguageEncoder, dataset: Dataset, cfg: AdaptConfig = AdaptConfig(),
                  template: str = DEFAULT_PROMPT, history: list | None = None) -> VisionLanguageEncoder:
    """Collect base crops from ``dataset`` and run :func:`finetune_layernorm`."""
    crops = collect_instance_crops(dataset, dataset.split, "base", cfg.enlarge_factor)
    tensors = crops.preprocess(enc, dataset)
    text = enc.encode_text(list(crops.names), template)
    return finetune_layernorm(enc, tensors, crops.labels, text, cfg, history)
