"""Toy-scale two-stage detector: conv backbone, single-scale RPN, RoIAlign and the text-embedding head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import nms as tv_nms

from .. import geometry as G
from .losses import cosine_logits


@dataclass(frozen=True)
class DetectorConfig:
    # architecture
    backbone_channels: int = 64
    backbone_blocks: int = 4
    backbone_stride: int = 8
    pool_size: int = 7
    head_channels: int = 64
    head_hidden: int = 1024
    reg_dim: int = 256
    embed_dim: int = 32
    tau: float = 0.01
    # rpn
    rpn_sizes: tuple[float, ...] = (16.0, 32.0, 64.0)
    rpn_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    rpn_pre_nms_train: int = 2000
    rpn_post_nms_train: int = 512
    rpn_pre_nms_test: int = 1000
    rpn_post_nms_test: int = 300
    rpn_nms_iou: float = 0.7
    # roi head sampling
    fg_iou: float = 0.5
    bg_iou: float = 0.5
    rois_per_image: int = 512
    fg_fraction: float = 0.25
    # distillation
    distill: bool = True
    distill_normalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rpn_sizes", tuple(float(s) for s in self.rpn_sizes))
        object.__setattr__(self, "rpn_ratios", tuple(float(r) for r in self.rpn_ratios))
        if self.backbone_stride != 8 or self.backbone_blocks < 3:
            raise ValueError("only stride-8 backbones (>= 3 blocks) are supported")

    @property
    def rpn_anchors(self) -> G.AnchorConfig:
        return G.AnchorConfig(self.backbone_stride, self.rpn_sizes, self.rpn_ratios)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rpn_sizes"] = list(self.rpn_sizes)
        d["rpn_ratios"] = list(self.rpn_ratios)
        return d

    @classmethod
    def from_dict(cls, d) -> "DetectorConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in dict(d).items() if k in known})


PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """HxWx3 uint8 -> normalized 3xHxW float32."""
    x = torch.from_numpy(np.array(pixels, dtype=np.uint8)).permute(2, 0, 1).float() / 255.0
    return (x - PIXEL_MEAN) / PIXEL_STD


def batch_images(images: list[np.ndarray]) -> torch.Tensor:
    """Stack images, zero-padding at the bottom/right to a common size."""
    h = max(im.shape[0] for im in images)
    w = max(im.shape[1] for im in images)
    out = torch.zeros((len(images), 3, h, w))
    for i, im in enumerate(images):
        out[i, :, :im.shape[0], :im.shape[1]] = to_tensor(im)
    return out


class Backbone(nn.Module):
    """Stride-8 conv stack: three stride-2 blocks, then stride-1 blocks."""

    def __init__(self, channels: int = 64, blocks: int = 4):
        super().__init__()
        layers = []
        cin = 3
        for i in range(blocks):
            stride = 2 if i < 3 else 1
            cout = channels if i > 0 else max(channels // 2, 8)
            layers += [nn.Conv2d(cin, cout, 3, stride, 1), nn.ReLU(inplace=True)]
            cin = cout
        self.body = nn.Sequential(*layers)
        self.out_channels = cin
        self.stride = 8

    def forward(self, x):
        return self.body(x)


class RPN(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, 1, 1)
        self.cls = nn.Conv2d(channels, num_anchors, 1)
        self.reg = nn.Conv2d(channels, 4 * num_anchors, 1)
        for layer in (self.conv, self.cls, self.reg):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, feat):
        """Per-image (H*W*A,) logits and (H*W*A, 4) deltas, ordered row, column, anchor."""
        h = F.relu(self.conv(feat))
        n = feat.shape[0]
        logits = self.cls(h).permute(0, 2, 3, 1).reshape(n, -1)
        deltas = self.reg(h).permute(0, 2, 3, 1).reshape(n, -1, 4)
        return logits, deltas


def _axis_weights(lo: torch.Tensor, hi: torch.Tensor, size: int, sampling: int, limit: int) -> torch.Tensor:
    """(K, size, limit) weights that bilinearly sample and bin-average along one axis.

    Samples sit at ``sampling`` regularly spaced points per bin. A sample more than
    one cell outside the map contributes zero; otherwise it is clamped to the edge.
    """
    g = size * sampling
    t = (torch.arange(g, dtype=lo.dtype) + 0.5) / g
    v = lo[:, None] + t * (hi - lo)[:, None]
    valid = ((v >= -1.0) & (v <= limit)).to(lo.dtype)
    v = v.clamp(0, limit - 1)
    i0 = v.floor().long()
    i1 = (i0 + 1).clamp(max=limit - 1)
    f = v - i0.to(lo.dtype)
    w = torch.zeros((len(lo), g, limit), dtype=lo.dtype)
    w.scatter_add_(2, i0[..., None], ((1 - f) * valid)[..., None])
    w.scatter_add_(2, i1[..., None], (f * valid)[..., None])
    return w.reshape(len(lo), size, sampling, limit).mean(dim=2)


def roi_align(feat: torch.Tensor, boxes: list[torch.Tensor], size: int, stride: int,
              sampling: int = 2) -> torch.Tensor:
    """Pixel-aligned RoIAlign written as two small matmuls per image.

    Bilinear sampling factorizes over the two axes, so each region is
    ``Ay @ F @ Ax.T``; gradients flow to ``feat`` through plain einsums.
    """
    outs = []
    for i, b in enumerate(boxes):
        if len(b) == 0:
            continue
        b = b.to(feat.dtype) / stride - 0.5
        ay = _axis_weights(b[:, 1], b[:, 3], size, sampling, feat.shape[-2])
        ax = _axis_weights(b[:, 0], b[:, 2], size, sampling, feat.shape[-1])
        outs.append(torch.einsum("kpw,kcqw->kcqp", ax, torch.einsum("kqh,chw->kcqw", ay, feat[i])))
    if not outs:
        return feat.new_zeros((0, feat.shape[1], size, size))
    return torch.cat(outs)


def pool_regions(feat: torch.Tensor, boxes: list[torch.Tensor], size: int, stride: int) -> torch.Tensor:
    """RoIAlign of per-image box lists onto a fixed ``size`` x ``size`` grid."""
    return roi_align(feat, boxes, size, stride)


class HeadBranches(nn.Module):
    """Classification/distillation branch, regression branch and the semantic regressor."""

    def __init__(self, in_channels: int, pool: int, channels: int, hidden: int, embed_dim: int,
                 reg_dim: int):
        super().__init__()
        flat = channels * pool * pool
        self.conv_c = nn.Sequential(
            nn.Conv2d(in_channels, channels, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Flatten(), nn.Linear(flat, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, embed_dim))
        self.conv_r = nn.Sequential(
            nn.Conv2d(in_channels, channels, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1), nn.ReLU(inplace=True),
            nn.Flatten(), nn.Linear(flat, reg_dim), nn.ReLU(inplace=True))
        self.regressor = nn.Linear(reg_dim + embed_dim, 4)
        nn.init.normal_(self.regressor.weight, std=0.001)
        nn.init.zeros_(self.regressor.bias)

    def embed(self, pooled):
        return self.conv_c(pooled)

    def regress_features(self, pooled):
        return self.conv_r(pooled)

    def semantic_regress(self, r: torch.Tensor, class_embedding: torch.Tensor) -> torch.Tensor:
        """Class-agnostic (dx, dy, dw, dh) from ``Cat(r, embedding)``."""
        if r.shape[-1] + class_embedding.shape[-1] != self.regressor.in_features:
            raise ValueError("regression feature + embedding size does not match the regressor")
        return self.regressor(torch.cat([r, class_embedding], dim=-1))


class TextClassifier(nn.Module):
    """Fixed base (and optional novel) text embeddings plus a learnable background vector."""

    def __init__(self, base: np.ndarray, tau: float, seed_vector: torch.Tensor | None = None):
        super().__init__()
        base_t = torch.as_tensor(np.asarray(base), dtype=torch.float32)
        self.register_buffer("base", base_t.clone())
        self.register_buffer("novel", torch.zeros((0, base_t.shape[1])))
        bg = seed_vector if seed_vector is not None else torch.randn(base_t.shape[1]) * 0.01
        self.background = nn.Parameter(bg.clone().float())
        self.tau = float(tau)

    @property
    def num_base(self) -> int:
        return len(self.base)

    def set_novel(self, novel: np.ndarray | None) -> None:
        dim = self.base.shape[1]
        t = torch.zeros((0, dim)) if novel is None else torch.as_tensor(np.asarray(novel), dtype=torch.float32)
        if t.ndim != 2 or t.shape[1] != dim:
            raise ValueError("novel embeddings must be (k, D)")
        self.novel = t.clone()

    def logits(self, feats: torch.Tensor, mode: str = "train") -> torch.Tensor:
        if mode == "train":
            return cosine_logits(feats, self.base, self.background, self.tau)
        if mode == "inference":
            return cosine_logits(feats, self.base, self.background, self.tau, self.novel)
        raise ValueError(f"unknown mode {mode!r}")

    def embeddings(self, mode: str = "train") -> torch.Tensor:
        """Category embedding table (no background) in logit order."""
        return self.base if mode == "train" else torch.cat([self.base, self.novel], dim=0)


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig, base_embeddings: np.ndarray):
        super().__init__()
        if np.shape(base_embeddings)[1] != cfg.embed_dim:
            raise ValueError("base embeddings do not match cfg.embed_dim")
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone_channels, cfg.backbone_blocks)
        self.rpn = RPN(self.backbone.out_channels, cfg.rpn_anchors.num_shapes)
        self.heads = HeadBranches(self.backbone.out_channels, cfg.pool_size, cfg.head_channels,
                                  cfg.head_hidden, cfg.embed_dim, cfg.reg_dim)
        self.classifier = TextClassifier(base_embeddings, cfg.tau)
        for m in list(self.backbone.modules()) + list(self.heads.modules()) + [self.rpn.conv]:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def anchors(self, feat_h: int, feat_w: int) -> np.ndarray:
        """Unclipped anchor grid matching the RPN output layout."""
        s = self.stride
        return G.generate_anchors(feat_w * s, feat_h * s, self.cfg.rpn_anchors, clip=False)

    def pool(self, feat, boxes):
        return pool_regions(feat, boxes, self.cfg.pool_size, self.stride)

    def region_embeddings(self, feat, boxes: list[torch.Tensor]) -> torch.Tensor:
        return self.heads.embed(self.pool(feat, boxes))

    def propose(self, logits: torch.Tensor, deltas: torch.Tensor, anchors: np.ndarray,
                image_size: tuple[int, int], training: bool) -> tuple[np.ndarray, np.ndarray]:
        """Decode, clip and NMS one image's RPN output into (boxes, scores)."""
        cfg = self.cfg
        pre = cfg.rpn_pre_nms_train if training else cfg.rpn_pre_nms_test
        post = cfg.rpn_post_nms_train if training else cfg.rpn_post_nms_test
        scores = logits.detach().double().numpy()
        order = np.argsort(-scores, kind="stable")[:pre]
        boxes = G.decode_deltas(anchors[order], deltas.detach().double().numpy()[order])
        h, w = image_size
        boxes = G.clip_boxes(boxes, w, h)
        sc = scores[order]
        ok = ((boxes[:, 2] - boxes[:, 0]) >= 1.0) & ((boxes[:, 3] - boxes[:, 1]) >= 1.0)
        boxes, sc = boxes[ok], sc[ok]
        keep = tv_nms(torch.from_numpy(boxes), torch.from_numpy(sc), cfg.rpn_nms_iou).numpy()[:post]
        return boxes[keep], 1.0 / (1.0 + np.exp(-sc[keep]))
