"""Inference with the base + novel text dictionary."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .. import geometry as G
from .model import Detector, batch_images


@dataclass(frozen=True)
class Detection:
    image_id: int
    box: tuple[float, float, float, float]
    category: str
    score: float

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "box": list(self.box), "category": self.category,
                "score": self.score}


@torch.no_grad()
def infer(model: Detector, pixels: np.ndarray, names: Sequence[str], score_threshold: float = 0.05,
          nms_iou: float = 0.5, max_dets: int = 100, image_id: int = 0) -> list[Detection]:
    """Detect base and novel categories on one image.

    ``names`` lists the base then novel categories in the classifier's slot order.
    A proposal is dropped when the background slot wins the softmax; otherwise it is
    labelled with its best non-background category, kept if that probability exceeds
    ``score_threshold`` and refined with that category's embedding.
    """
    model.eval()
    table = model.classifier.embeddings("inference")
    if len(names) != len(table):
        raise ValueError(f"{len(names)} names for {len(table)} classifier slots")
    h, w = pixels.shape[:2]
    feat = model.backbone(batch_images([pixels]))
    anchors = model.anchors(*feat.shape[-2:])
    logits, deltas = model.rpn(feat)
    props, _ = model.propose(logits[0], deltas[0], anchors, (h, w), training=False)
    if len(props) == 0:
        return []
    pooled = model.pool(feat, [torch.as_tensor(props, dtype=torch.float32)])
    emb = model.heads.embed(pooled)
    probs = torch.softmax(model.classifier.logits(emb, "inference").double(), dim=1).numpy()
    fg_probs = probs[:, :-1]
    pred = fg_probs.argmax(axis=1)
    score = fg_probs[np.arange(len(pred)), pred]
    keep = (probs.argmax(axis=1) != probs.shape[1] - 1) & (score > score_threshold)
    if not keep.any():
        return []
    idx = np.nonzero(keep)[0]
    r = model.heads.regress_features(pooled[torch.from_numpy(idx)])
    d = model.heads.semantic_regress(r, table[torch.from_numpy(pred[idx])]).double().numpy()
    boxes = G.clip_boxes(G.decode_deltas(props[idx], d), w, h)
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, labels, scores = boxes[ok], pred[idx][ok], score[idx][ok]
    sel = G.batched_nms(boxes, scores, labels, nms_iou)[:max_dets]
    return [Detection(image_id, tuple(float(v) for v in boxes[i]), names[labels[i]], float(scores[i]))
            for i in sel]


def detect_dataset(model: Detector, dataset, names: Sequence[str], score_threshold: float = 0.05,
                   nms_iou: float = 0.5, max_dets: int = 100, images=None) -> list[Detection]:
    out = []
    for rec in (dataset.images if images is None else images):
        out.extend(infer(model, rec.load(), names, score_threshold, nms_iou, max_dets, rec.image_id))
    return out
