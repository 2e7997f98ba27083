"""Perceptual measurement: deep-feature distances between the four images
``x``, ``x_hat``, ``m``, ``m_hat`` summed into a per-pixel anomaly map, which
is normalized, thresholded into a mask, and pooled into an image score.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import MeasurementConfig
from .errors import BackboneUnavailableError, InvalidThresholdError, ShapeError

WEIGHTS_ENV = "TWOSTAGE_BACKBONE_WEIGHTS"

# VGG-19 convolution stack up to conv5_4: (name, out_channels), "M" = 2x2 max-pool.
_VGG19 = [("conv1_1", 64), ("conv1_2", 64), "M",
          ("conv2_1", 128), ("conv2_2", 128), "M",
          ("conv3_1", 256), ("conv3_2", 256), ("conv3_3", 256), ("conv3_4", 256), "M",
          ("conv4_1", 512), ("conv4_2", 512), ("conv4_3", 512), ("conv4_4", 512), "M",
          ("conv5_1", 512), ("conv5_2", 512), ("conv5_3", 512), ("conv5_4", 512)]
LAYER_NAMES = [e[0] for e in _VGG19 if e != "M"]


def _torchvision_index():
    """Map layer name -> index of the conv in torchvision's ``vgg19().features``."""
    index, i = {}, 0
    for entry in _VGG19:
        if entry == "M":
            i += 1
        else:
            index[entry[0]] = i
            i += 2  # conv + ReLU
    return index


class VGGBackbone(nn.Module):
    """Frozen VGG-19 prefix returning post-ReLU activations of named layers."""

    def __init__(self, layers=("conv1_2", "conv2_2", "conv3_4"),
                 mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225)):
        super().__init__()
        unknown = [l for l in layers if l not in LAYER_NAMES]
        if unknown:
            raise ValueError(f"unknown backbone layers {unknown}; choose from {LAYER_NAMES}")
        self.layers = tuple(layers)
        deepest = max(LAYER_NAMES.index(l) for l in layers)
        self.plan = []
        convs = {}
        prev = 3
        for entry in _VGG19:
            if entry == "M":
                self.plan.append("M")
                continue
            name, ch = entry
            if LAYER_NAMES.index(name) > deepest:
                break
            convs[name] = nn.Conv2d(prev, ch, 3, padding=1)
            self.plan.append(name)
            prev = ch
        while self.plan[-1] == "M":
            self.plan.pop()
        self.convs = nn.ModuleDict(convs)
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def init_random(self, seed: int) -> "VGGBackbone":
        gen = torch.Generator().manual_seed(seed)
        for conv in self.convs.values():
            fan_out = conv.out_channels * 9
            conv.weight.data = torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_out)
            conv.bias.data.zero_()
        return self

    def load_weights(self, path) -> "VGGBackbone":
        """Load from a torchvision-layout ``vgg19`` state dict (``.pth``) or an
        ``.npz`` holding the same ``features.<i>.weight/bias`` keys."""
        path = Path(path)
        if path.suffix == ".npz":
            with np.load(path) as data:
                state = {k: torch.from_numpy(data[k]) for k in data.files}
        else:
            state = torch.load(path, map_location="cpu", weights_only=True)
        state = {k.removeprefix("module."): v for k, v in state.items()}
        index = _torchvision_index()
        for name, conv in self.convs.items():
            i = index[name]
            for attr in ("weight", "bias"):
                key = f"features.{i}.{attr}"
                if key not in state:
                    raise BackboneUnavailableError(f"{path} lacks {key}")
                getattr(conv, attr).data.copy_(state[key].float())
        return self

    def forward(self, x) -> dict[str, torch.Tensor]:
        if x.shape[1] == 1:
            x = x.repeat(1, 3, 1, 1)
        h = (x - self.mean) / self.std
        feats = {}
        for step in self.plan:
            if step == "M":
                h = F.max_pool2d(h, 2)
            else:
                h = F.relu(self.convs[step](h))
                if step in self.layers:
                    feats[step] = h
        return feats


def build_backbone(cfg: MeasurementConfig) -> VGGBackbone:
    """Backbone per config: pretrained weights from ``cfg.weights_path`` (or
    the ``TWOSTAGE_BACKBONE_WEIGHTS`` variable), or seeded frozen random
    weights when ``cfg.backbone == "fallback"``."""
    net = VGGBackbone(cfg.layers, cfg.input_mean, cfg.input_std)
    if cfg.backbone == "fallback":
        return net.init_random(cfg.backbone_seed)
    path = os.environ.get(WEIGHTS_ENV) or cfg.weights_path
    if not path or not Path(path).is_file():
        raise BackboneUnavailableError(
            f"pretrained backbone weights not found (pm.weights_path={cfg.weights_path!r}, "
            f"${WEIGHTS_ENV}); set pm.backbone=fallback to use random features")
    return net.load_weights(path)


def backbone_features(backbone: VGGBackbone, x) -> dict[str, torch.Tensor]:
    with torch.no_grad():
        return backbone(x)


# ----------------------------------------------------------------------
# Distances and maps

def layer_distance(a, b, out_size=None):
    """Channel-mean absolute difference of two (N, C, h, w) feature maps,
    bilinearly resized to ``out_size`` when given.  Returns (N, H, W)."""
    if a.shape != b.shape:
        raise ShapeError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    d = (a - b).abs().mean(dim=1, keepdim=True)
    if out_size is not None and tuple(d.shape[-2:]) != tuple(out_size):
        d = F.interpolate(d, size=tuple(out_size), mode="bilinear", align_corners=False)
    return d[:, 0]


@dataclass
class AnomalyMap:
    raw: np.ndarray
    normalized: np.ndarray
    lo: float
    hi: float

    @classmethod
    def from_raw(cls, raw, normalization: str = "minmax", percentile: float = 99.0):
        raw = np.asarray(raw, dtype=np.float64)
        lo = float(raw.min())
        hi = float(raw.max()) if normalization == "minmax" else float(np.percentile(raw, percentile))
        if hi > lo:
            norm = np.clip((raw - lo) / (hi - lo), 0.0, 1.0)
        else:
            norm = np.zeros_like(raw)
        return cls(raw, norm, lo, hi)


@dataclass
class SegmentationMask:
    y: np.ndarray
    alpha: float


def anomaly_map(x, x_hat, m, m_hat, backbone=None, layer_weights=(1.0, 1.0, 1.0),
                use_expert: bool = True, use_naive_term: bool = True,
                mode: str = "perceptual"):
    """Raw anomaly maps (N, H, W) for batches of the four images.

    Perceptual mode sums, over backbone layers, the weighted distances
    ``d(x, x_hat) + d(m, m_hat) + d(x, m)``.  ``use_expert=False`` keeps
    only ``d(x, m)``; ``use_naive_term=False`` drops ``d(m, m_hat)``.  The
    ``pixel_*`` modes return a single channel-mean pixel L1 difference.
    """
    shapes = {tuple(t.shape) for t in (x, m) + ((x_hat, m_hat) if use_expert else ())}
    if len(shapes) != 1:
        raise ShapeError(f"image shapes differ: {sorted(shapes)}")
    size = x.shape[-2:]
    if mode != "perceptual":
        a, b = {"pixel_x_xhat": (x, x_hat), "pixel_x_m": (x, m),
                "pixel_m_mhat": (m, m_hat)}[mode]
        return layer_distance(a, b)
    pairs = [(0, 1)]  # (x, m)
    stack = [x, m]
    if use_expert:
        stack += [x_hat, m_hat]
        pairs.append((0, 2))
        if use_naive_term:
            pairs.append((1, 3))
    n = x.shape[0]
    with torch.no_grad():
        feats = backbone(torch.cat(stack))
    if len(layer_weights) != len(backbone.layers):
        raise ShapeError("one weight per backbone layer is required")
    e = x.new_zeros((n,) + tuple(size))
    for name, w in zip(backbone.layers, layer_weights):
        f = feats[name].view(len(stack), n, *feats[name].shape[1:])
        for i, j in pairs:
            e = e + w * layer_distance(f[i], f[j], size)
    return e


def segment(e, alpha: float = 0.5) -> SegmentationMask:
    """Binary mask of pixels whose normalized score strictly exceeds ``alpha``."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidThresholdError(f"alpha must lie in [0, 1], got {alpha}")
    values = e.normalized if isinstance(e, AnomalyMap) else np.asarray(e)
    return SegmentationMask((values > alpha).astype(np.uint8), alpha)


def image_score(e, top_k_fraction: float = 0.01) -> float:
    """Mean of the highest ``top_k_fraction`` of raw anomaly values."""
    values = np.asarray(e.raw if isinstance(e, AnomalyMap) else e, dtype=np.float64).ravel()
    k = max(1, math.ceil(top_k_fraction * values.size - 1e-9))
    return float(np.partition(values, values.size - k)[-k:].mean())
