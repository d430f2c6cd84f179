"""Training objectives of the detection head.

All functions are dtype-agnostic torch code so they can be checked against
finite differences in float64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)


def distillation_loss(model_feats: torch.Tensor, clip_feats: torch.Tensor, weights: torch.Tensor,
                      normalize: bool = False) -> torch.Tensor:
    """Objectness-weighted L1 between head features and cached encoder features.

    ``(1/M) * sum_i w_i * |clip_i - model_i|_1`` over the M proposals of one image.
    With ``normalize`` both sides are L2-normalized first.
    """
    if not (len(model_feats) == len(clip_feats) == len(weights)):
        raise ValueError("model features, encoder features and weights differ in length")
    m = len(model_feats)
    if m == 0:
        log.debug("distillation loss over zero proposals; contributing 0")
        return model_feats.new_zeros(())
    if normalize:
        model_feats = F.normalize(model_feats, dim=1)
        clip_feats = F.normalize(clip_feats, dim=1)
    per = (clip_feats - model_feats).abs().sum(dim=1)
    return (weights * per).sum() / m


def batched_distillation_loss(items: Sequence[tuple[torch.Tensor, torch.Tensor, torch.Tensor]],
                              normalize: bool = False) -> torch.Tensor:
    """Per-image :func:`distillation_loss`, averaged over images that have proposals."""
    losses = [distillation_loss(a, b, w, normalize) for a, b, w in items if len(a)]
    if not losses:
        return items[0][0].new_zeros(()) if items else torch.zeros(())
    return torch.stack(losses).mean()


def cosine_logits(features: torch.Tensor, base: torch.Tensor, background: torch.Tensor,
                  tau: float, novel: torch.Tensor | None = None) -> torch.Tensor:
    """Temperature-scaled cosine scores, laid out ``[base..., novel..., background]``.

    Raises:
        ValueError: a feature vector has zero norm.
    """
    if features.shape[-1] != base.shape[-1]:
        raise ValueError("feature and embedding dimensions differ")
    norms = features.norm(dim=-1)
    if len(features) and bool((norms == 0).any()):
        raise ValueError("zero-norm region feature")
    table = [base] if novel is None or len(novel) == 0 else [base, novel]
    table.append(background.reshape(1, -1))
    emb = F.normalize(torch.cat(table, dim=0), dim=-1)
    return (features / norms[:, None]) @ emb.T / tau


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels (last slot = background)."""
    if len(logits) == 0:
        raise ValueError("classification loss needs at least one proposal")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if bool((labels < 0).any()) or bool((labels >= logits.shape[1]).any()):
        raise ValueError("label outside the logit vector")
    return F.cross_entropy(logits, labels)


def regression_loss(pred: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """``(1/K) * sum_i |pred_i - target_i|_1`` over K foreground proposals; 0 when K = 0."""
    if pred.shape != targets.shape:
        raise ValueError("prediction and target shapes differ")
    if len(pred) == 0:
        log.debug("regression loss over zero foreground proposals; contributing 0")
        return pred.new_zeros(()) + 0.0 * pred.sum()
    return (pred - targets).abs().sum(dim=1).mean()


@dataclass
class LossBreakdown:
    dist: torch.Tensor
    cls: torch.Tensor
    reg: torch.Tensor
    rpn_cls: torch.Tensor
    rpn_reg: torch.Tensor

    @property
    def head(self) -> torch.Tensor:
        """Sum of the three head terms with unit weights."""
        return self.dist + self.cls + self.reg

    @property
    def total(self) -> torch.Tensor:
        return self.head + self.rpn_cls + self.rpn_reg

    def as_floats(self) -> dict[str, float]:
        vals = {k: float(getattr(self, k).detach()) for k in ("dist", "cls", "reg", "rpn_cls", "rpn_reg")}
        vals["L"] = vals["dist"] + vals["cls"] + vals["reg"]
        return vals


def total_loss(dist, cls, reg, rpn_cls=None, rpn_reg=None) -> LossBreakdown:
    """Bundle the terms; ``.head`` is L_dist + L_cls + L_reg, RPN terms are reported alongside."""
    zero = torch.zeros((), dtype=torch.as_tensor(cls).dtype)
    as_t = lambda v: zero if v is None else torch.as_tensor(v, dtype=zero.dtype)
    return LossBreakdown(as_t(dist), as_t(cls), as_t(reg), as_t(rpn_cls), as_t(rpn_reg))
