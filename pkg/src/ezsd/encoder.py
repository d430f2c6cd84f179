"""Vision-language encoders: region cropping, image/text features, cosine classification.

Two implementations share one interface:

* :class:`MockEncoder` -- deterministic, seeded, CPU-cheap. Image features are a
  fixed random projection of a color/shape descriptor passed through a
  LayerNorm; text features project the descriptor of a canonical rendering of
  the named toy shape. The LayerNorm is the adaptable parameter subset.
* :class:`ClipAdapter` -- wraps a ``transformers`` CLIP model (optional).
"""

from __future__ import annotations

import copy
import math
import os
import zlib
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dataset as ds
from .geometry import BoxLike, as_boxes

DEFAULT_PROMPT = "a photo of a {name}"
DEFAULT_TAU = 0.01
CHECKPOINT_ENV = "EZSD_CLIP_CHECKPOINT"

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

NORM_TYPES = (nn.LayerNorm, nn.GroupNorm, nn.BatchNorm1d, nn.BatchNorm2d)


class CropError(ValueError):
    """Region does not overlap the image."""


# ------------------------------------------------------------------ cropping

def _raster(boxes: np.ndarray, width: int, height: int):
    x0 = np.clip(np.floor(boxes[:, 0]), 0, width).astype(np.int64)
    y0 = np.clip(np.floor(boxes[:, 1]), 0, height).astype(np.int64)
    x1 = np.clip(np.ceil(boxes[:, 2]), 0, width).astype(np.int64)
    y1 = np.clip(np.ceil(boxes[:, 3]), 0, height).astype(np.int64)
    bad = (x1 <= x0) | (y1 <= y0)
    if bad.any():
        raise CropError(f"box {boxes[np.argmax(bad)].tolist()} lies outside the "
                        f"{width}x{height} image")
    return x0, y0, x1 - x0, y1 - y0


def _axis_taps(start, length, side, out):
    """Bilinear taps along one axis of a zero-padded square crop.

    Returns (K, out, 2) source indices and weights; taps landing in the padding
    get weight zero.
    """
    pad = (side - length) // 2
    u = (np.arange(out) + 0.5)[None, :] * (side[:, None] / out) - 0.5
    u = np.clip(u, 0, (side - 1)[:, None])
    i0 = np.floor(u).astype(np.int64)
    i1 = np.minimum(i0 + 1, (side - 1)[:, None])
    frac = u - i0
    idx = np.stack([i0, i1], axis=2) - pad[:, None, None]
    weight = np.stack([1.0 - frac, frac], axis=2)
    inside = (idx >= 0) & (idx < length[:, None, None])
    weight = np.where(inside, weight, 0.0)
    idx = np.clip(idx, 0, None) + start[:, None, None]
    idx = np.minimum(idx, (start + length - 1)[:, None, None])
    return idx, weight


def crop_batch(pixels: np.ndarray, boxes, side: int) -> np.ndarray:
    """Crop, zero-pad to square and resize every box to ``side`` x ``side``.

    Args:
        pixels: HxWx3 uint8 image.
        boxes: (K, 4) boxes in image coordinates.

    Returns:
        (K, 3, side, side) float32 in [0, 1], before channel normalization.
    """
    boxes = as_boxes(boxes)
    h, w = pixels.shape[:2]
    x0, y0, cw, ch = _raster(boxes, w, h)
    sq = np.maximum(cw, ch)
    ri, rw = _axis_taps(y0, ch, sq, side)
    ci, cwt = _axis_taps(x0, cw, sq, side)
    img = pixels.astype(np.float32) / 255.0
    out = np.zeros((len(boxes), side, side, 3), dtype=np.float32)
    for a in range(2):
        for b in range(2):
            wgt = (rw[:, :, a][:, :, None] * cwt[:, :, b][:, None, :]).astype(np.float32)
            out += wgt[..., None] * img[ri[:, :, a][:, :, None], ci[:, :, b][:, None, :]]
    return out.transpose(0, 3, 1, 2).copy()


def crop_and_preprocess(pixels: np.ndarray, box: BoxLike, input_side: int,
                        mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)) -> np.ndarray:
    """One region as a normalized (3, side, side) float32 array."""
    crop = crop_batch(pixels, [tuple(box)], input_side)[0]
    m = np.asarray(mean, dtype=np.float32)[:, None, None]
    s = np.asarray(std, dtype=np.float32)[:, None, None]
    return (crop - m) / s


# ------------------------------------------------------------------ interface

def norm_parameter_names(module: nn.Module) -> list[str]:
    names = []
    for mname, mod in module.named_modules():
        if isinstance(mod, NORM_TYPES):
            for pname, _ in mod.named_parameters(recurse=False):
                names.append(f"{mname}.{pname}" if mname else pname)
    return names


class VisionLanguageEncoder(nn.Module):
    """Image tower + text tower in a shared D-dimensional space.

    Subclasses implement :meth:`stem`, :meth:`head` and :meth:`_text_features`.
    ``stem`` must hold no trainable state so adaptation can cache its output.
    """

    dim: int
    input_side: int
    pixel_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    pixel_std: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def preprocess(self, pixels: np.ndarray, boxes) -> torch.Tensor:
        crops = crop_batch(pixels, boxes, self.input_side)
        m = np.asarray(self.pixel_mean, dtype=np.float32)[None, :, None, None]
        s = np.asarray(self.pixel_std, dtype=np.float32)[None, :, None, None]
        return torch.from_numpy((crops - m) / s)

    def stem(self, crops: torch.Tensor) -> torch.Tensor:
        return crops

    def head(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        return self.head(self.stem(crops))

    @torch.no_grad()
    def encode_regions(self, pixels: np.ndarray, boxes, batch_size: int = 256) -> np.ndarray:
        """(K, D) float32 features of image regions."""
        boxes = as_boxes(boxes)
        outs = [np.zeros((0, self.dim), dtype=np.float32)]
        for i in range(0, len(boxes), batch_size):
            crops = self.preprocess(pixels, boxes[i:i + batch_size])
            outs.append(self(crops).float().numpy())
        return np.concatenate(outs, axis=0)

    def encode_image_region(self, pixels: np.ndarray, box: BoxLike) -> np.ndarray:
        return self.encode_regions(pixels, [tuple(box)])[0]

    def prompts(self, names: Sequence[str], template: str = DEFAULT_PROMPT) -> list[str]:
        if not names:
            raise ValueError("need at least one category name")
        if "{name}" not in template:
            raise ValueError("prompt template must contain '{name}'")
        for n in names:
            if not n or not str(n).strip():
                raise ValueError("empty category name")
        return [template.format(name=n) for n in names]

    @torch.no_grad()
    def encode_text(self, names: Sequence[str], template: str = DEFAULT_PROMPT) -> np.ndarray:
        """(len(names), D) float32 text embeddings."""
        prompts = self.prompts(names, template)
        return self._text_features(list(names), prompts).float().numpy()

    def _text_features(self, names: list[str], prompts: list[str]) -> torch.Tensor:
        raise NotImplementedError

    def norm_parameter_names(self) -> list[str]:
        return norm_parameter_names(self)

    def parameter_partition(self) -> tuple[dict[str, nn.Parameter], dict[str, nn.Parameter]]:
        """(normalization params, all other params) by name."""
        norm = set(self.norm_parameter_names())
        params = dict(self.named_parameters())
        return ({k: v for k, v in params.items() if k in norm},
                {k: v for k, v in params.items() if k not in norm})

    def clone(self) -> "VisionLanguageEncoder":
        return copy.deepcopy(self)


# ------------------------------------------------------------------ mock

PALETTE = np.asarray(list(ds.COLORS.values()), dtype=np.float32) / 255.0
FILL_CENTERS = (1.0, math.pi / 4, 0.5)


def shape_descriptor(rgb: torch.Tensor) -> torch.Tensor:
    """Color and shape statistics of (K, 3, S, S) crops in [0, 1]."""
    k, _, s, _ = rgb.shape
    sat = rgb.amax(1) - rgb.amin(1)
    m = torch.sigmoid((sat - 0.3) / 0.04)
    area = m.mean((1, 2))
    mass = m.sum((1, 2))
    # texture noise never reaches 1% of the crop; below that shape/color channels are off
    gate = torch.clamp((area - 0.01) / 0.03, 0, 1)

    pal = torch.from_numpy(PALETTE).to(rgb)
    d2 = ((rgb ** 2).sum(1, keepdim=True) - 2 * torch.einsum("kcxy,pc->kpxy", rgb, pal)
          + (pal ** 2).sum(1)[None, :, None, None])
    p = torch.softmax(-d2 / (2 * 0.12 ** 2), dim=1)
    hist = (p * m[:, None]).sum((2, 3)) / (mass + 1e-3)[:, None]

    coords = (torch.arange(s, dtype=rgb.dtype) + 0.5) / s
    ys, xs = coords[None, :, None], coords[None, None, :]
    m00 = torch.clamp(area, min=1e-3)
    cx = (m * xs).mean((1, 2)) / m00
    cy = (m * ys).mean((1, 2)) / m00
    dx = xs - cx[:, None, None]
    dy = ys - cy[:, None, None]
    etas = []
    for p_, q_ in ((2, 0), (0, 2), (1, 1), (3, 0), (0, 3), (2, 1), (1, 2)):
        mu = (m * dx ** p_ * dy ** q_).mean((1, 2))
        etas.append(mu / m00 ** (1 + (p_ + q_) / 2))
    eta = torch.stack(etas, 1)
    eta = eta * torch.tensor([10, 10, 10, 30, 30, 30, 30], dtype=rgb.dtype)

    hard = m > 0.5
    rows = hard.any(2)
    cols = hard.any(1)
    idx = torch.arange(s)
    big = s + 1

    def extent(mask):
        first = torch.where(mask, idx, big).amin(1)
        last = torch.where(mask, idx, -1).amax(1)
        return torch.clamp(last - first + 1, min=1).to(rgb.dtype)

    eh, ew = extent(rows), extent(cols)
    any_ = rows.any(1)
    fill = torch.where(any_, hard.sum((1, 2)).to(rgb.dtype) / (eh * ew), torch.zeros_like(area))
    centers = torch.tensor(FILL_CENTERS, dtype=rgb.dtype)
    rbf = torch.exp(-(fill[:, None] - centers[None]) ** 2 / (2 * 0.07 ** 2))
    aspect = torch.where(any_, torch.log(eh / ew).clamp(-1.5, 1.5), torch.zeros_like(area))

    g = gate[:, None]
    # last two: object area and emptiness; an empty crop is a lone spike in the emptiness channel
    return torch.cat([3.0 * hist * g, 2.0 * rbf * g, eta * g, aspect[:, None] * g,
                      area[:, None] * g, 1 - g], dim=1)


DESCRIPTOR_DIM = len(PALETTE) + len(FILL_CENTERS) + 7 + 1 + 2
COLOR_CHANNELS = slice(0, len(PALETTE))
SHAPE_CHANNELS = slice(len(PALETTE), DESCRIPTOR_DIM - 2)
SIZE_CHANNELS = slice(DESCRIPTOR_DIM - 2, DESCRIPTOR_DIM)


def canonical_crop(spec: ds.ShapeSpec, side: int = 40, factor: float = 1.2) -> tuple[np.ndarray, tuple]:
    """A shape centered on flat gray, plus its ``factor``-enlarged box."""
    canvas = int(math.ceil(side * factor)) + 8
    img = np.full((canvas, canvas, 3), 120.0)
    w = side
    h = max(4, int(round(side * spec.aspect)))
    x1 = (canvas - w) // 2
    y1 = (canvas - h) // 2
    ds.paint(img, spec, (x1, y1, x1 + w, y1 + h))
    cx, cy = x1 + w / 2, y1 + h / 2
    box = (cx - w * factor / 2, cy - h * factor / 2, cx + w * factor / 2, cy + h * factor / 2)
    return img.astype(np.uint8), box


class MockEncoder(VisionLanguageEncoder):
    """Seeded stand-in for a pretrained vision-language model.

    Fully determined by ``(seed, dim, input_side)``. The only normalization
    parameters are those of ``self.ln``.
    """

    pixel_mean = (0.5, 0.5, 0.5)
    pixel_std = (0.25, 0.25, 0.25)

    def __init__(self, seed: int = 0, dim: int = 32, input_side: int = 24):
        super().__init__()
        self.seed = int(seed)
        self.dim = int(dim)
        self.input_side = int(input_side)
        gen = torch.Generator().manual_seed(self.seed)
        self.ln = nn.LayerNorm(DESCRIPTOR_DIM)
        self.proj = nn.Linear(DESCRIPTOR_DIM, self.dim, bias=False)
        with torch.no_grad():
            # orthonormal columns keep descriptor cosines intact (when dim >= DESCRIPTOR_DIM)
            q, _ = torch.linalg.qr(torch.randn(max(self.dim, DESCRIPTOR_DIM), DESCRIPTOR_DIM, generator=gen))
            self.proj.weight.copy_(q[:self.dim])
        self._text_cache: dict[str, torch.Tensor] = {}

    def config(self) -> dict:
        return {"kind": "mock", "seed": self.seed, "dim": self.dim, "input_side": self.input_side}

    def stem(self, crops):
        mean = torch.tensor(self.pixel_mean, dtype=crops.dtype)[None, :, None, None]
        std = torch.tensor(self.pixel_std, dtype=crops.dtype)[None, :, None, None]
        return shape_descriptor(crops * std + mean)

    def _project(self, x):
        # broadcast-and-sum keeps every row bit-identical whatever the batch size (a GEMM does not)
        return (x[..., None, :] * self.proj.weight).sum(-1)

    def head(self, x):
        return self._project(self.ln(x))

    def _descriptor_for_name(self, name: str) -> torch.Tensor:
        try:
            spec = ds.parse_shape_name(name)
        except ValueError:
            spec = None
        if spec is None:
            g = torch.Generator().manual_seed((self.seed * 1_000_003 + zlib.crc32(name.encode())) % 2**63)
            return torch.randn(DESCRIPTOR_DIM, generator=g)
        img, box = canonical_crop(spec)
        with torch.no_grad():
            return self.stem(self.preprocess(img, [box]))[0]

    @torch.no_grad()
    def _text_features(self, names, prompts):
        rows = []
        for n in names:
            if n not in self._text_cache:
                d = self._descriptor_for_name(n)
                # calibrated reference normalization, independent of the adaptable LN state
                self._text_cache[n] = self._project(F.layer_norm(d, (DESCRIPTOR_DIM,)))
            rows.append(self._text_cache[n])
        return torch.stack(rows)

    def miscalibrate(self, seed: int, suppress: float = 0.1, nuisance: float = 3.0,
                     jitter: float = 0.3, shift: float = 1.0) -> "MockEncoder":
        """Copy with a deliberately perturbed LayerNorm (a synthetic domain gap).

        Either the color or the shape group of descriptor channels (alternating
        with ``seed`` parity) is scaled by ``suppress``, the size channels are
        amplified and offset by ``nuisance``, every gain gets log-normal
        ``jitter`` and every bias a normal offset of scale ``shift``.
        """
        out = self.clone()
        g = torch.Generator().manual_seed(int(seed))
        w = torch.exp(jitter * torch.randn(DESCRIPTOR_DIM, generator=g))
        b = torch.zeros(DESCRIPTOR_DIM)
        w[COLOR_CHANNELS if seed % 2 == 0 else SHAPE_CHANNELS] *= suppress
        w[SIZE_CHANNELS] *= nuisance
        b[SIZE_CHANNELS] = nuisance * torch.randn(2, generator=g)
        # a constant tilt drags every region toward whichever classes it happens to favor
        b += shift * torch.randn(DESCRIPTOR_DIM, generator=g)
        with torch.no_grad():
            out.ln.weight.copy_(w)
            out.ln.bias.copy_(b)
        return out


# ------------------------------------------------------------------ real model

class ClipAdapter(VisionLanguageEncoder):
    """Adapter around a ``transformers`` CLIPModel.

    ``tokenizer`` is any callable returning ``input_ids``/``attention_mask``
    tensors for a list of strings.
    """

    pixel_mean = CLIP_MEAN
    pixel_std = CLIP_STD

    def __init__(self, model, tokenizer, input_side: int = 224, locator: str | None = None):
        super().__init__()
        self.model = model
        self.tokenizer = tokenizer
        self.input_side = input_side
        self.dim = int(model.config.projection_dim)
        self.locator = locator

    @classmethod
    def from_pretrained(cls, locator: str | None = None) -> "ClipAdapter":
        from transformers import CLIPModel, CLIPTokenizer

        locator = locator or os.environ.get(CHECKPOINT_ENV)
        if not locator:
            raise FileNotFoundError(f"no CLIP checkpoint given and ${CHECKPOINT_ENV} unset")
        model = CLIPModel.from_pretrained(locator)
        tok = CLIPTokenizer.from_pretrained(locator)
        return cls(model.eval(), tok, model.config.vision_config.image_size, locator)

    def config(self) -> dict:
        return {"kind": "pretrained", "checkpoint": self.locator, "dim": self.dim,
                "input_side": self.input_side}

    def head(self, x):
        return self.model.get_image_features(pixel_values=x)

    def norm_parameter_names(self) -> list[str]:
        return [n for n in norm_parameter_names(self) if ".vision_model." in f".{n}"]

    def _text_features(self, names, prompts):
        tokens = self.tokenizer(prompts, padding=True, return_tensors="pt")
        return self.model.get_text_features(input_ids=tokens["input_ids"],
                                            attention_mask=tokens.get("attention_mask"))


def build_encoder(cfg: dict) -> VisionLanguageEncoder:
    """``{"kind": "mock", "seed", "dim", "input_side"}`` or ``{"kind": "pretrained", "checkpoint"}``."""
    kind = cfg.get("kind", "mock")
    if kind == "mock":
        return MockEncoder(cfg.get("seed", 0), cfg.get("dim", 32), cfg.get("input_side", 24))
    if kind == "pretrained":
        return ClipAdapter.from_pretrained(cfg.get("checkpoint"))
    raise ValueError(f"unknown encoder kind {kind!r}")


def save_encoder(enc: VisionLanguageEncoder, path) -> None:
    from .checkpoint import save_arrays

    arrays = {k: v.detach().numpy() for k, v in enc.state_dict().items()}
    save_arrays(path, arrays, {"encoder": enc.config()})


def load_encoder(path) -> VisionLanguageEncoder:
    from .checkpoint import load_arrays

    arrays, meta = load_arrays(path)
    enc = build_encoder(meta["encoder"])
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    enc.load_state_dict(state)
    return enc


# ------------------------------------------------------------------ classification

def cosine_matrix(features: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    e = np.asarray(embeddings, dtype=np.float64)
    fn = np.linalg.norm(f, axis=-1, keepdims=True)
    en = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(fn == 0) or np.any(en == 0):
        raise ValueError("zero-norm feature or embedding")
    return (f / fn) @ (e / en).T


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def classify_features(features: np.ndarray, embeddings: np.ndarray,
                      tau: float = DEFAULT_TAU) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`classify_feature`: (K,) predictions and (K, C) scores."""
    features = np.atleast_2d(features)
    if features.shape[1] != np.shape(embeddings)[-1]:
        raise ValueError("feature and embedding dimensions differ")
    scores = softmax(cosine_matrix(features, embeddings) / tau, axis=1)
    return scores.argmax(axis=1), scores


def classify_feature(feature: np.ndarray, embeddings: np.ndarray,
                     tau: float = DEFAULT_TAU) -> tuple[int, np.ndarray]:
    """Softmax over temperature-scaled cosines; ties go to the lower index."""
    if len(embeddings) == 0:
        raise ValueError("need at least one embedding")
    pred, scores = classify_features(np.asarray(feature)[None], embeddings, tau)
    return int(pred[0]), scores[0]
