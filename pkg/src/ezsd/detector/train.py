"""Detector training: target assignment, the per-iteration loss and the SGD loop."""

from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .. import geometry as G
from ..checkpoint import fingerprint, load_arrays, save_arrays
from ..dataset import Dataset, filter_training_images
from ..proposals import ClipProposal, ProposalGenConfig, sample_training_subset
from .losses import (LossBreakdown, batched_distillation_loss, classification_loss, regression_loss,
                     total_loss)
from .model import Detector, DetectorConfig, batch_images

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("iter", "L_dist", "L_cls", "L_reg", "L", "L_rpn_cls", "L_rpn_reg", "lr")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 90000
    batch_size: int = 4
    learning_rate: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_iters: int = 500
    warmup_ratio: float = 1e-3
    lr_steps: tuple[int, ...] = (60000, 80000)
    lr_gamma: float = 0.1
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_steps", tuple(int(s) for s in self.lr_steps))
        if self.iterations < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("iterations >= 0, batch_size >= 1 and learning_rate > 0 required")

    def lr_at(self, it: int) -> float:
        """Learning rate for 0-based iteration ``it``: linear warmup, then step decay."""
        lr = self.learning_rate * self.lr_gamma ** sum(it >= s for s in self.lr_steps)
        if it < self.warmup_iters:
            lr *= self.warmup_ratio + (1.0 - self.warmup_ratio) * it / self.warmup_iters
        return lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_steps"] = list(self.lr_steps)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in dict(d).items() if k in known})


@dataclass
class TrainSample:
    """Everything one training image contributes to a step."""

    image_id: int
    pixels: np.ndarray
    gt_boxes: np.ndarray          # (G, 4) base annotations
    gt_labels: np.ndarray         # (G,) base category index
    distill_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    distill_feats: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), np.float32))
    distill_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))


def build_samples(dataset: Dataset, store: Mapping[int, Sequence[ClipProposal]] | None,
                  gen_cfg: ProposalGenConfig | None = None) -> list[TrainSample]:
    """Training images (with at least one base instance) paired with their fixed distillation subset."""
    split = dataset.split
    base_index = {n: i for i, n in enumerate(split.base_categories)}
    gen_cfg = gen_cfg or ProposalGenConfig()
    anns = dataset.annotations_by_image()
    out = []
    for rec in filter_training_images(dataset.images, dataset.annotations, split):
        base = [a for a in anns.get(rec.image_id, []) if a.category in base_index]
        s = TrainSample(rec.image_id, rec.load(),
                        G.as_boxes([a.box for a in base]),
                        np.asarray([base_index[a.category] for a in base], dtype=np.int64))
        if store is not None:
            props = store.get(rec.image_id)
            if props is None:
                raise KeyError(f"proposal store has no entry for training image {rec.image_id}")
            sub = sample_training_subset(props, gen_cfg, rec.image_id)
            if sub:
                s.distill_boxes = G.as_boxes([p.box for p in sub])
                s.distill_feats = np.stack([p.feature for p in sub]).astype(np.float32)
                s.distill_weights = np.asarray([p.objectness for p in sub], dtype=np.float64)
        out.append(s)
    return out


# ------------------------------------------------------------ assignment

def _sample(rng: np.random.Generator, pos: np.ndarray, neg: np.ndarray, total: int,
            pos_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    n_pos = min(len(pos), int(total * pos_fraction))
    n_neg = min(len(neg), total - n_pos)
    pos = rng.choice(pos, n_pos, replace=False) if n_pos < len(pos) else pos
    neg = rng.choice(neg, n_neg, replace=False) if n_neg < len(neg) else neg
    return np.sort(pos), np.sort(neg)


def assign_anchors(anchors: np.ndarray, gt: np.ndarray, cfg: DetectorConfig,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """RPN targets: sampled positive and negative anchor indices and the GT matched to each positive."""
    if len(gt) == 0:
        neg = np.arange(len(anchors))
        _, neg = _sample(rng, np.zeros(0, np.int64), neg, cfg.rpn_batch, cfg.rpn_pos_fraction)
        return np.zeros(0, np.int64), neg, np.zeros(0, np.int64)
    ious = G.pairwise_iou(anchors, gt)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(anchors)), best]
    labels = np.full(len(anchors), -1)
    labels[best_iou < cfg.rpn_neg_iou] = 0
    labels[best_iou >= cfg.rpn_pos_iou] = 1
    # every GT keeps its best-matching anchors as positives
    per_gt = ious.max(axis=0)
    for j in range(len(gt)):
        if per_gt[j] > 0:
            hits = np.nonzero(ious[:, j] == per_gt[j])[0]
            labels[hits] = 1
            best[hits] = j
    pos, neg = _sample(rng, np.nonzero(labels == 1)[0], np.nonzero(labels == 0)[0],
                       cfg.rpn_batch, cfg.rpn_pos_fraction)
    return pos, neg, best[pos]


def assign_proposals(proposals: np.ndarray, gt: np.ndarray, gt_labels: np.ndarray, num_base: int,
                     cfg: DetectorConfig, rng: np.random.Generator):
    """Head targets for one image.

    GT boxes are added to the candidate pool. Returns ``(boxes, labels, targets, fg_mask)``:
    labels use ``num_base`` for background, ``targets`` are deltas for foreground rows only.
    """
    boxes = np.concatenate([proposals, gt], axis=0) if len(gt) else proposals
    if len(gt):
        ious = G.pairwise_iou(boxes, gt)
        match = ious.argmax(axis=1)
        best = ious[np.arange(len(boxes)), match]
    else:
        match = np.zeros(len(boxes), np.int64)
        best = np.zeros(len(boxes))
    fg = np.nonzero(best >= cfg.fg_iou)[0]
    bg = np.nonzero(best < cfg.bg_iou)[0]
    fg, bg = _sample(rng, fg, bg, cfg.rois_per_image, cfg.fg_fraction)
    keep = np.concatenate([fg, bg])
    labels = np.full(len(keep), num_base, dtype=np.int64)
    labels[:len(fg)] = gt_labels[match[fg]]
    targets = G.encode_deltas(boxes[fg], gt[match[fg]]) if len(fg) else np.zeros((0, 4))
    fg_mask = np.zeros(len(keep), dtype=bool)
    fg_mask[:len(fg)] = True
    return boxes[keep], labels, targets, fg_mask


# ------------------------------------------------------------------ step

def _t(a, dtype=torch.float32):
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def compute_losses(model: Detector, batch: Sequence[TrainSample], rng: np.random.Generator,
                   distill: bool | None = None) -> LossBreakdown:
    """Forward one batch and return the loss breakdown (RPN terms included)."""
    cfg = model.cfg
    distill = cfg.distill if distill is None else distill
    images = batch_images([s.pixels for s in batch])
    feat = model.backbone(images)
    fh, fw = feat.shape[-2:]
    anchors = model.anchors(fh, fw)
    rpn_logits, rpn_deltas = model.rpn(feat)

    # rpn
    cls_terms, reg_terms, n_sampled = [], [], 0
    roi_boxes, roi_labels, roi_targets, roi_fg = [], [], [], []
    for i, s in enumerate(batch):
        pos, neg, matched = assign_anchors(anchors, s.gt_boxes, cfg, rng)
        idx = np.concatenate([pos, neg])
        target = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        cls_terms.append(F.binary_cross_entropy_with_logits(
            rpn_logits[i, _t(idx, torch.long)], _t(target), reduction="sum"))
        if len(pos):
            tgt = G.encode_deltas(anchors[pos], s.gt_boxes[matched])
            reg_terms.append(F.smooth_l1_loss(rpn_deltas[i, _t(pos, torch.long)], _t(tgt),
                                              beta=1.0 / 9, reduction="sum"))
        n_sampled += len(idx)

        props, _ = model.propose(rpn_logits[i], rpn_deltas[i], anchors, s.pixels.shape[:2], training=True)
        b, lab, tgt, fgm = assign_proposals(props, s.gt_boxes, s.gt_labels, model.classifier.num_base, cfg, rng)
        roi_boxes.append(_t(b))
        roi_labels.append(lab)
        roi_targets.append(tgt)
        roi_fg.append(fgm)
    n_sampled = max(n_sampled, 1)
    rpn_cls = torch.stack(cls_terms).sum() / n_sampled
    rpn_reg = (torch.stack(reg_terms).sum() if reg_terms else feat.sum() * 0.0) / n_sampled

    # head
    pooled = model.pool(feat, roi_boxes)
    emb = model.heads.embed(pooled)
    labels = torch.from_numpy(np.concatenate(roi_labels))
    logits = model.classifier.logits(emb, "train")
    cls = classification_loss(logits, labels)

    fg = torch.from_numpy(np.concatenate(roi_fg))
    r = model.heads.regress_features(pooled[fg])
    label_emb = model.classifier.base[labels[fg]]
    pred = model.heads.semantic_regress(r, label_emb)
    reg = regression_loss(pred, _t(np.concatenate(roi_targets)))

    # distillation over the fixed per-image proposal subset
    if distill and any(len(s.distill_boxes) for s in batch):
        dpooled = model.pool(feat, [_t(s.distill_boxes) for s in batch])
        demb = model.heads.embed(dpooled)
        items, start = [], 0
        for s in batch:
            m = len(s.distill_boxes)
            items.append((demb[start:start + m], _t(s.distill_feats), _t(s.distill_weights)))
            start += m
        dist = batched_distillation_loss(items, cfg.distill_normalize)
    else:
        dist = torch.zeros(())
    return total_loss(dist, cls, reg, rpn_cls, rpn_reg)


def _stage_seed(seed: int, stage: str) -> list[int]:
    return [int(seed), zlib.crc32(stage.encode())]


def train(model: Detector, samples: Sequence[TrainSample], cfg: TrainConfig = TrainConfig(),
          loss_csv=None, distill: bool | None = None,
          callback: Callable[[int, dict], None] | None = None) -> list[dict]:
    """Run ``cfg.iterations`` SGD steps in place; returns the per-iteration loss rows.

    Images are visited in seeded epoch-wise permutations. If ``loss_csv`` is
    given the rows are also written there.
    """
    if not samples:
        raise ValueError("no training images with base annotations")
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng(_stage_seed(cfg.seed, "train-order"))
    assign_rng = np.random.default_rng(_stage_seed(cfg.seed, "train-assign"))
    queue: list[int] = []
    rows = []
    model.train()
    for it in range(cfg.iterations):
        lr = cfg.lr_at(it)
        for group in opt.param_groups:
            group["lr"] = lr
        batch = []
        while len(batch) < min(cfg.batch_size, len(samples)):
            if not queue:
                queue = list(order_rng.permutation(len(samples)))
            batch.append(samples[queue.pop(0)])
        losses = compute_losses(model, batch, assign_rng, distill)
        opt.zero_grad(set_to_none=True)
        losses.total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        vals = losses.as_floats()
        row = {"iter": it + 1, "L_dist": vals["dist"], "L_cls": vals["cls"], "L_reg": vals["reg"],
               "L": vals["L"], "L_rpn_cls": vals["rpn_cls"], "L_rpn_reg": vals["rpn_reg"], "lr": lr}
        if not all(np.isfinite(v) for v in row.values()):
            raise FloatingPointError(f"non-finite loss at iteration {it + 1}: {row}")
        rows.append(row)
        if callback is not None:
            callback(it + 1, row)
        if (it + 1) % 50 == 0 or it == 0:
            log.info("iter %d: L=%.4f dist=%.4f cls=%.4f reg=%.4f rpn=%.4f/%.4f", it + 1, row["L"],
                     row["L_dist"], row["L_cls"], row["L_reg"], row["L_rpn_cls"], row["L_rpn_reg"])
    model.eval()
    if loss_csv is not None:
        write_loss_csv(loss_csv, rows)
    return rows


def write_loss_csv(path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for r in rows:
            w.writerow([r["iter"]] + [repr(float(r[c])) for c in LOSS_COLUMNS[1:]])


def read_loss_csv(path) -> list[dict]:
    with open(path) as f:
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]


# ------------------------------------------------------------ checkpoint

def save_detector(model: Detector, path, meta: Mapping | None = None) -> None:
    """Write every parameter and buffer plus the config fingerprint."""
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    header = {"kind": "detector", "config": model.cfg.to_dict(), "tau": model.classifier.tau,
              "fingerprint": fingerprint(model.cfg.to_dict())}
    header.update(meta or {})
    save_arrays(path, arrays, header)


def load_detector(path) -> tuple[Detector, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "detector":
        raise ValueError(f"{path}: not a detector checkpoint")
    cfg = DetectorConfig.from_dict(meta["config"])
    if fingerprint(cfg.to_dict()) != meta.get("fingerprint"):
        raise ValueError(f"{path}: config fingerprint mismatch")
    model = Detector(cfg, arrays["classifier.base"])
    model.classifier.set_novel(arrays["classifier.novel"])
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    model.load_state_dict(state)
    model.eval()
    return model, meta
