"""Synthetic pseudo-spectral pairs with known flow, and pair augmentation.

A pair is built from a base canvas: ``img_a`` is the canvas (optionally with
a margin cropped away) and ``img_b`` is the canvas backward-warped by the
ground-truth flow and then pushed through a spectral transform.  Because the
transform does not move pixels, ``bilinear_warp(img_a, gt_flow)`` reproduces
the geometry of ``img_b`` exactly wherever the sample points fall inside
``img_a``.
"""

from dataclasses import dataclass, field
import math

import cv2
import numpy as np
import torch

from .errors import ConfigError, ContractViolation
from .features import gaussian_blur
from .warp import ImageTensor, pixel_grid, sample_bilinear

FLOW_KINDS = ("zero", "translation", "affine", "homography", "smooth")
TRANSFORM_KINDS = ("identity", "channel_mix", "gray_invert_blur")
DEFAULT_TRANSFORM_SPECTRUM = {"identity": "synthB", "channel_mix": "nir", "gray_invert_blur": "fir"}
MAX_FLOW_FRACTION = 0.1


@dataclass
class PairSample:
    img_a: ImageTensor
    img_b: ImageTensor
    gt_flow: torch.Tensor = None
    meta: dict = field(default_factory=dict)
    # Optional annotations for evaluation: binary (H, W) masks and point rows.
    mask_a: np.ndarray = None
    mask_b: np.ndarray = None
    points: list = None

    def __post_init__(self):
        if self.img_a.spectrum == self.img_b.spectrum:
            raise ContractViolation(f"pair images share spectrum tag {self.img_a.spectrum!r}")


@dataclass
class FlowSpec:
    """Recipe for a ground-truth flow field on an ``H x W`` grid.

    ``translation`` uses ``(tx, ty)``; ``affine`` a 2x3 matrix and
    ``homography`` a 3x3 matrix, both mapping a pixel of ``img_b`` to its
    source location in ``img_a`` (coordinates relative to the image centre);
    ``smooth`` bilinearly upsamples a ``grid x grid`` noise field and scales it
    so the largest vector has length ``max_magnitude``.
    """

    kind: str = "zero"
    translation: tuple = (0.0, 0.0)
    matrix: tuple = None
    max_magnitude: float = 0.0
    grid: int = 4

    def __post_init__(self):
        if self.kind not in FLOW_KINDS:
            raise ConfigError(f"unknown flow kind {self.kind!r}; choose from {FLOW_KINDS}", key="flow.kind")

    def field(self, h, w, rng):
        xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        if self.kind == "zero":
            u, v = np.zeros((h, w)), np.zeros((h, w))
        elif self.kind == "translation":
            u = np.full((h, w), float(self.translation[0]))
            v = np.full((h, w), float(self.translation[1]))
        elif self.kind in ("affine", "homography"):
            mat = np.asarray(self.matrix, dtype=np.float64)
            cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
            pts = np.stack([xs - cx, ys - cy, np.ones_like(xs)])
            if self.kind == "affine":
                if mat.shape != (2, 3):
                    raise ConfigError("affine matrix must be 2x3", key="flow.matrix")
                q = np.tensordot(mat, pts, axes=1)
                qx, qy = q[0], q[1]
            else:
                if mat.shape != (3, 3):
                    raise ConfigError("homography matrix must be 3x3", key="flow.matrix")
                q = np.tensordot(mat, pts, axes=1)
                qx, qy = q[0] / q[2], q[1] / q[2]
            u, v = qx - (xs - cx), qy - (ys - cy)
        else:
            g = max(2, int(self.grid))
            coarse = rng.uniform(-1.0, 1.0, size=(2, g, g))
            gx = coarse[0].astype(np.float64)
            gy = coarse[1].astype(np.float64)
            u = cv2.resize(gx, (w, h), interpolation=cv2.INTER_LINEAR)
            v = cv2.resize(gy, (w, h), interpolation=cv2.INTER_LINEAR)
            peak = np.sqrt(u * u + v * v).max()
            scale = self.max_magnitude / peak if peak > 0 else 0.0
            u, v = u * scale, v * scale
        return np.stack([u, v]).astype(np.float32)


def check_flow_bound(flow, width):
    bound = MAX_FLOW_FRACTION * width
    mag = float(np.sqrt((np.asarray(flow, dtype=np.float64) ** 2).sum(axis=0)).max()) if np.size(flow) else 0.0
    if not mag < bound:
        raise ConfigError(
            f"flow magnitude {mag:.3f} px reaches the bound of {MAX_FLOW_FRACTION:.0%} of width = {bound:.3f} px",
            key="flow.max_magnitude")
    return mag


@dataclass
class SpectralTransform:
    """Geometry-preserving intensity transform that produces the second spectrum."""

    kind: str = "identity"
    mix: tuple = None
    blur_sigma: float = 1.5
    noise_std: float = 0.01
    spectrum: str = None

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigError(f"unknown transform {self.kind!r}; choose from {TRANSFORM_KINDS}", key="transform.kind")
        if self.spectrum is None:
            self.spectrum = DEFAULT_TRANSFORM_SPECTRUM[self.kind]

    def apply(self, data, rng):
        """Transform a ``(1, C, H, W)`` tensor; returns the new data tensor."""
        if self.kind == "identity":
            return data.clone()
        if self.kind == "channel_mix":
            mix = torch.as_tensor(
                np.asarray(self.mix if self.mix is not None else [[0.2, 0.3, 0.5]], dtype=np.float64),
                dtype=data.dtype)
            if mix.shape[1] != data.shape[1]:
                raise ConfigError(f"mix matrix needs {data.shape[1]} columns", key="transform.mix")
            return torch.einsum("oc,nchw->nohw", mix, data).clamp(0.0, 1.0)
        gray = 1.0 - data.mean(dim=1, keepdim=True)
        if self.blur_sigma > 0:
            gray = gaussian_blur(gray, self.blur_sigma)
        if self.noise_std > 0:
            noise = rng.normal(0.0, self.noise_std, size=tuple(gray.shape)).astype(np.float32)
            gray = gray + torch.from_numpy(noise).to(gray.dtype)
        return gray.clamp(0.0, 1.0)


def random_scene(h, w, rng, channels=3, shapes=None):
    """Procedural scene: smooth background, textured band and many flat shapes.

    Returns a float32 ``(C, H, W)`` array in [0, 1].
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    c0, c1 = rng.uniform(0.2, 0.8, size=(2, channels)).astype(np.float32)
    t = ((xx / max(w - 1, 1)) * rng.uniform(0.3, 1.0) + (yy / max(h - 1, 1)) * rng.uniform(0.0, 0.7))
    t = t / max(float(t.max()), 1e-6)
    img = (c0[:, None, None] * (1 - t) + c1[:, None, None] * t).transpose(1, 2, 0).copy()
    n_shapes = shapes if shapes is not None else int(rng.integers(18, 30))
    scale = min(h, w)
    for _ in range(n_shapes):
        color = tuple(float(c) for c in rng.uniform(0.0, 1.0, size=channels))
        kind = int(rng.integers(0, 3))
        cx, cy = int(rng.integers(0, w)), int(rng.integers(0, h))
        size = int(rng.integers(max(3, scale // 16), max(4, scale // 4)))
        if kind == 0:
            cv2.rectangle(img, (cx - size, cy - size // 2), (cx + size, cy + size // 2), color, -1)
        elif kind == 1:
            axes = (size, max(2, int(size * rng.uniform(0.4, 1.0))))
            cv2.ellipse(img, (cx, cy), axes, float(rng.uniform(0, 180)), 0, 360, color, -1)
        else:
            pts = np.stack([cx + rng.integers(-size, size + 1, 3), cy + rng.integers(-size, size + 1, 3)], axis=1)
            cv2.fillPoly(img, [pts.astype(np.int32)], color)
    # Low-amplitude stripes give texture inside flat regions.
    freq = rng.uniform(0.15, 0.4)
    angle = rng.uniform(0, np.pi)
    stripes = 0.06 * np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    img = img + stripes[..., None]
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def generate_pair(base, flow_spec, transform, seed, margin=0):
    """Build a :class:`PairSample` whose ``gt_flow`` aligns ``img_a`` to ``img_b``.

    ``base`` is an :class:`ImageTensor` (or ``(C, H, W)`` array tagged
    ``rgb``).  With ``margin > 0`` the flow and both images live on the
    central ``(H - 2m) x (W - 2m)`` window, and ``img_b`` samples the full
    canvas so it has no out-of-frame fill.
    """
    if not isinstance(base, ImageTensor):
        base = ImageTensor(torch.as_tensor(np.asarray(base, dtype=np.float32)), "rgb")
    rng = np.random.default_rng(seed)
    canvas = base.data[:1]
    _, _, H, W = canvas.shape
    mg = int(margin)
    h, w = H - 2 * mg, W - 2 * mg
    if h < 1 or w < 1:
        raise ContractViolation(f"margin {mg} leaves no image inside a {H}x{W} canvas")
    flow_np = flow_spec.field(h, w, rng)
    check_flow_bound(flow_np, w)
    flow = torch.from_numpy(flow_np).unsqueeze(0).to(canvas.dtype)

    gx, gy = pixel_grid(1, h, w, canvas.dtype)
    warped, inside = sample_bilinear(canvas, gx + mg + flow[:, 0], gy + mg + flow[:, 1])
    base_valid, _ = sample_bilinear(base.valid[:1].to(canvas.dtype), gx + mg + flow[:, 0], gy + mg + flow[:, 1])
    valid_b = (base_valid * inside).clamp(0.0, 1.0)
    data_b = transform.apply(warped, rng)

    img_a = ImageTensor(canvas[:, :, mg:mg + h, mg:mg + w].clone(), base.spectrum,
                        base.valid[:1, :, mg:mg + h, mg:mg + w].clone())
    img_b = ImageTensor(data_b, transform.spectrum, valid_b)
    meta = {"seed": seed, "flow_kind": flow_spec.kind, "transform": transform.kind}
    return PairSample(img_a, img_b, flow, meta)


def synthetic_pair(h, w, flow_spec, transform, seed, spectrum="rgb", margin=None):
    """Convenience wrapper: random scene canvas plus :func:`generate_pair`.

    The default margin covers the largest flow the bound allows, so ``img_b``
    never needs out-of-frame fill.
    """
    if margin is None:
        margin = int(math.ceil(MAX_FLOW_FRACTION * w)) + 2
    rng = np.random.default_rng([seed, 7919])
    canvas = random_scene(h + 2 * margin, w + 2 * margin, rng)
    base = ImageTensor(torch.from_numpy(canvas), spectrum)
    sample = generate_pair(base, flow_spec, transform, seed, margin=margin)
    return sample


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    crop: tuple = None
    # Largest per-image crop displacement; None means 12.5% of the crop width.
    max_offset: int = None
    jitter_frac: float = 0.0
    visible_spectra: tuple = ("rgb",)
    seed: int = 0


def _crop(img, y, x, ch, cw):
    return ImageTensor(img.data[..., y:y + ch, x:x + cw], img.spectrum, img.valid[..., y:y + ch, x:x + cw])


def _band(length, shift):
    """1D indicator of ``q`` in [0, length) with ``q + shift`` also in [0, length)."""
    q = torch.arange(length)
    return ((q + shift >= 0) & (q + shift < length)).float()


def augment(sample, cfg, rng=None):
    """Pair-consistent flip, pair-independent crop and visible-channel jitter."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    a, b, gt = sample.img_a, sample.img_b, sample.gt_flow
    H, W = a.hw
    if b.hw != (H, W):
        raise ContractViolation(f"pair dims differ: {a.hw} vs {b.hw}")
    meta = dict(sample.meta)

    flipped = bool(rng.random() < cfg.flip_prob)
    if flipped:
        a = ImageTensor(a.data.flip(-1), a.spectrum, a.valid.flip(-1))
        b = ImageTensor(b.data.flip(-1), b.spectrum, b.valid.flip(-1))
        if gt is not None:
            gt = gt.flip(-1) * gt.new_tensor([-1.0, 1.0]).view(1, 2, 1, 1)

    ch, cw = cfg.crop if cfg.crop is not None else (H, W)
    if ch > H or cw > W:
        raise ContractViolation(f"crop {ch}x{cw} larger than image {H}x{W}")
    max_off = cfg.max_offset if cfg.max_offset is not None else int(0.125 * cw)
    cy, cx = (H - ch) // 2, (W - cw) // 2
    d = rng.integers(-max_off, max_off + 1, size=4) if max_off > 0 else np.zeros(4, dtype=np.int64)
    ya = int(np.clip(cy + d[0], 0, H - ch))
    xa = int(np.clip(cx + d[1], 0, W - cw))
    yb = int(np.clip(cy + d[2], 0, H - ch))
    xb = int(np.clip(cx + d[3], 0, W - cw))
    a = _crop(a, ya, xa, ch, cw)
    b = _crop(b, yb, xb, ch, cw)
    # Content of a'(q) is a(q + o_a); it is inside b's window iff q + o_a - o_b is in frame.
    pair_a = _band(ch, ya - yb)[:, None] * _band(cw, xa - xb)[None, :]
    pair_b = _band(ch, yb - ya)[:, None] * _band(cw, xb - xa)[None, :]
    a = ImageTensor(a.data, a.spectrum, a.valid * pair_a.to(a.valid.dtype))
    b = ImageTensor(b.data, b.spectrum, b.valid * pair_b.to(b.valid.dtype))
    if gt is not None:
        shift = gt.new_tensor([xb - xa, yb - ya]).view(1, 2, 1, 1)
        gt = gt[..., yb:yb + ch, xb:xb + cw] + shift

    if cfg.jitter_frac > 0:
        jittered = []
        for img in (a, b):
            if img.spectrum in cfg.visible_spectra:
                factors = 1.0 + rng.uniform(-cfg.jitter_frac, cfg.jitter_frac, size=img.channels)
                f = torch.as_tensor(factors, dtype=img.data.dtype).view(1, -1, 1, 1)
                img = ImageTensor((img.data * f).clamp(0.0, 1.0), img.spectrum, img.valid)
            jittered.append(img)
        a, b = jittered

    meta.update({"flipped": flipped, "offset_a": (ya, xa), "offset_b": (yb, xb)})
    return PairSample(a, b, gt, meta)


def collate(samples):
    """Stack single-pair samples into one batched :class:`PairSample`."""
    if not samples:
        raise ContractViolation("cannot collate an empty batch")
    first = samples[0]
    for s in samples[1:]:
        if s.img_a.hw != first.img_a.hw or s.img_a.spectrum != first.img_a.spectrum \
                or s.img_b.spectrum != first.img_b.spectrum:
            raise ContractViolation("batch samples must share dims and spectrum tags")
    a = ImageTensor(torch.cat([s.img_a.data for s in samples]), first.img_a.spectrum,
                    torch.cat([s.img_a.valid for s in samples]))
    b = ImageTensor(torch.cat([s.img_b.data for s in samples]), first.img_b.spectrum,
                    torch.cat([s.img_b.valid for s in samples]))
    gt = None
    if all(s.gt_flow is not None for s in samples):
        gt = torch.cat([s.gt_flow for s in samples])
    return PairSample(a, b, gt, {"batch": [s.meta for s in samples]})
