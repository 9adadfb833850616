"""Frozen feature extractor used by the perceptual (feature) loss.

Two backbones are available behind one interface:

``vgg16``
    torchvision VGG16 truncated at a ``reluX_Y`` tap, ImageNet-normalised
    input.  Weights are read from ``$CYCLESPECTRAL_CACHE`` or the torch hub
    checkpoint cache; nothing is downloaded.
``structure``
    A fixed bank of oriented Gaussian-derivative filters whose rectified,
    contrast-normalised responses are pooled into three stages named like
    the VGG taps (``relu1_2``, ``relu2_2``, ``relu3_3``).  It compares local
    edge structure and ignores contrast polarity, which keeps it usable across
    spectra when no pretrained weights are on disk.

``auto`` picks ``vgg16`` when weights are found and ``structure`` otherwise.
"""

import logging
import math
import os
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

log = logging.getLogger(__name__)

CACHE_ENV = "CYCLESPECTRAL_CACHE"
VGG16_FILENAME = "vgg16-397923af.pth"
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Index of each ReLU in torchvision's vgg16().features.
VGG16_TAPS = {
    "relu1_1": 1, "relu1_2": 3,
    "relu2_1": 6, "relu2_2": 8,
    "relu3_1": 11, "relu3_2": 13, "relu3_3": 15,
    "relu4_1": 18, "relu4_2": 20, "relu4_3": 22,
}
STRUCTURE_TAPS = ("relu1_2", "relu2_2", "relu3_3")


def find_vgg16_weights():
    candidates = []
    if os.environ.get(CACHE_ENV):
        candidates.append(Path(os.environ[CACHE_ENV]) / VGG16_FILENAME)
    candidates.append(Path(torch.hub.get_dir()) / "checkpoints" / VGG16_FILENAME)
    for path in candidates:
        if path.is_file():
            return path
    return None


def _gaussian_1d(sigma, dtype=torch.float32):
    radius = max(1, int(math.ceil(3 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    g = torch.exp(-0.5 * (x / sigma) ** 2)
    return (g / g.sum()).to(dtype), x.to(dtype)


def gaussian_blur(x, sigma):
    """Separable Gaussian blur of every channel, replicate borders."""
    g, _ = _gaussian_1d(sigma, x.dtype)
    g = g.to(x.device)
    c = x.shape[1]
    r = (g.numel() - 1) // 2
    x = F.pad(x, (r, r, 0, 0), mode="replicate")
    x = F.conv2d(x, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.pad(x, (0, 0, r, r), mode="replicate")
    return F.conv2d(x, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


class StructureBank(nn.Module):
    """Fixed oriented-edge feature pyramid (no trainable parameters)."""

    def __init__(self, layer="relu2_2", sigma=1.0, orientations=4, norm_sigma=4.0, eps=0.02, gain=20.0):
        super().__init__()
        if layer not in STRUCTURE_TAPS:
            raise ConfigError(f"structure backbone taps are {STRUCTURE_TAPS}, got {layer!r}", key="feature_layer")
        self.layer = layer
        self.norm_sigma = norm_sigma
        self.eps = eps
        self.gain = gain
        g, x = _gaussian_1d(sigma, torch.float64)
        dg = -x / sigma ** 2 * g
        gx = g[:, None] * dg[None, :]
        gy = dg[:, None] * g[None, :]
        filters = []
        for k in range(orientations):
            theta = math.pi * k / orientations
            filters.append(math.cos(theta) * gx + math.sin(theta) * gy)
        self.register_buffer("filters", torch.stack(filters)[:, None].float())

    def forward(self, x):
        gray = x.mean(dim=1, keepdim=True)
        r = (self.filters.shape[-1] - 1) // 2
        resp = F.conv2d(F.pad(gray, (r, r, r, r), mode="replicate"), self.filters.to(x.dtype))
        # |r| = relu(r) + relu(-r): polarity-free edge energy per orientation.
        energy = F.relu(resp) + F.relu(-resp)
        local = gaussian_blur(energy.sum(dim=1, keepdim=True), self.norm_sigma)
        feats = self.gain * energy / (local + self.eps)
        if self.layer == "relu1_2":
            return feats
        feats = gaussian_blur(F.avg_pool2d(feats, 2, ceil_mode=True), 1.0)
        if self.layer == "relu2_2":
            return feats
        return F.avg_pool2d(feats, 2, ceil_mode=True)


class VGGTap(nn.Module):
    def __init__(self, layer, weights_path):
        super().__init__()
        from torchvision.models import vgg16

        if layer not in VGG16_TAPS:
            raise ConfigError(f"unknown VGG16 tap {layer!r}; choose from {sorted(VGG16_TAPS)}", key="feature_layer")
        net = vgg16(weights=None)
        net.load_state_dict(torch.load(weights_path, map_location="cpu", weights_only=True))
        self.layer = layer
        self.features = net.features[:VGG16_TAPS[layer] + 1]
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return self.features((x - self.mean.to(x.dtype)) / self.std.to(x.dtype))


class FeatureExtractor(nn.Module):
    """Frozen activation tap; call on ``(N, C, H, W)`` images in [0, 1]."""

    def __init__(self, layer="relu3_3", backbone="auto", weights_path=None):
        super().__init__()
        if backbone not in ("auto", "vgg16", "structure"):
            raise ConfigError(f"unknown feature backbone {backbone!r}", key="feature_backbone")
        if backbone in ("auto", "vgg16"):
            weights_path = weights_path or find_vgg16_weights()
            if weights_path is None:
                if backbone == "vgg16":
                    raise ConfigError(
                        f"VGG16 weights {VGG16_FILENAME} not found; set ${CACHE_ENV}", key="feature_backbone")
                log.info("no VGG16 weights on disk, using the structure feature bank")
                backbone = "structure"
            else:
                backbone = "vgg16"
        self.backbone = backbone
        self.layer = layer
        self.net = VGGTap(layer, weights_path) if backbone == "vgg16" else StructureBank(layer)
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # Always stays in eval mode.
        return super().train(False)

    def forward(self, x):
        return self.net(x)

    def describe(self):
        return {"backbone": self.backbone, "layer": self.layer}
