"""Differentiable backward bilinear warping.

All grids are batched torch tensors laid out ``(N, C, H, W)``.  A flow field
is a plain ``(N, 2, H, W)`` tensor of pixel displacements ``(u, v)`` on the
*output* grid: ``out(p) = src(p + flow(p))``.  Samples that fall outside
the source are filled with zero and the validity mask is zeroed with the
same bilinear weights.
"""

from dataclasses import dataclass, replace
import re

import numpy as np
import torch

from .errors import ContractViolation

_TAG_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_]*$")


def check_spectrum_tag(tag):
    if not isinstance(tag, str) or not _TAG_RE.match(tag):
        raise ContractViolation(f"invalid spectrum tag {tag!r}; use [A-Za-z][A-Za-z0-9_]*")
    return tag


@dataclass(frozen=True)
class ImageTensor:
    """Batched multi-channel raster tagged with the spectrum it was captured in.

    ``data`` is ``(N, C, H, W)`` with intensities in [0, 1]; ``valid`` is
    ``(N, 1, H, W)`` in [0, 1] and marks pixels that are paired and in bounds.
    """

    data: torch.Tensor
    spectrum: str
    valid: torch.Tensor = None

    def __post_init__(self):
        data = self.data
        if isinstance(data, np.ndarray):
            data = torch.from_numpy(np.ascontiguousarray(data))
        if data.dim() == 3:
            data = data.unsqueeze(0)
        if data.dim() != 4:
            raise ContractViolation(f"image data must be (N,C,H,W), got shape {tuple(data.shape)}")
        valid = self.valid
        if valid is None:
            valid = torch.ones_like(data[:, :1])
        else:
            if isinstance(valid, np.ndarray):
                valid = torch.from_numpy(np.ascontiguousarray(valid))
            valid = valid.to(data.dtype)
            while valid.dim() < 4:
                valid = valid.unsqueeze(0)
            if valid.shape[-2:] != data.shape[-2:] or valid.shape[1] != 1:
                raise ContractViolation(
                    f"valid mask shape {tuple(valid.shape)} does not match image {tuple(data.shape)}")
            valid = valid.expand(data.shape[0], 1, *data.shape[-2:])
        check_spectrum_tag(self.spectrum)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def hw(self):
        return tuple(self.data.shape[-2:])

    @property
    def channels(self):
        return self.data.shape[1]

    def replace(self, **changes):
        return replace(self, **changes)

    def to(self, *args, **kwargs):
        return ImageTensor(self.data.to(*args, **kwargs), self.spectrum, self.valid.to(*args, **kwargs))


def pixel_grid(n, h, w, dtype, device=None):
    """Return ``(x, y)`` integer pixel coordinates of shape ``(n, h, w)``."""
    ys = torch.arange(h, dtype=dtype, device=device).view(1, h, 1).expand(n, h, w)
    xs = torch.arange(w, dtype=dtype, device=device).view(1, 1, w).expand(n, h, w)
    return xs, ys


def sample_bilinear(src, x, y):
    """Bilinearly sample ``src`` at absolute pixel coordinates.

    ``src`` is ``(N, C, H, W)``; ``x`` and ``y`` are ``(N, h, w)``.  Returns the
    sampled values ``(N, C, h, w)`` and the summed weight of in-bounds corners
    ``(N, 1, h, w)``, which is the soft in-bounds indicator.
    """
    n, c, hs, ws = src.shape
    h, w = x.shape[-2:]
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx1 = x - x0
    wy1 = y - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1
    x0 = x0.long()
    y0 = y0.long()
    flat = src.reshape(n, c, hs * ws)
    out = src.new_zeros(n, c, h * w)
    inside = src.new_zeros(n, 1, h * w)
    for dx, dy, wgt in ((0, 0, wx0 * wy0), (1, 0, wx1 * wy0), (0, 1, wx0 * wy1), (1, 1, wx1 * wy1)):
        xi = x0 + dx
        yi = y0 + dy
        inb = ((xi >= 0) & (xi <= ws - 1) & (yi >= 0) & (yi <= hs - 1)).to(src.dtype)
        idx = (yi.clamp(0, hs - 1) * ws + xi.clamp(0, ws - 1)).view(n, 1, h * w)
        vals = torch.gather(flat, 2, idx.expand(n, c, h * w))
        wk = (wgt * inb.view_as(wgt)).view(n, 1, h * w)
        out = out + wk * vals
        inside = inside + wk
    return out.view(n, c, h, w), inside.view(n, 1, h, w)


def _check_flow(flow, hw, what):
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise ContractViolation(f"flow must be (N,2,H,W), got {tuple(flow.shape)}")
    if tuple(flow.shape[-2:]) != tuple(hw):
        raise ContractViolation(
            f"{what} spatial dims {tuple(hw)} do not match flow dims {tuple(flow.shape[-2:])}")


def warp_tensor(data, flow):
    """Warp a raw ``(N, C, H, W)`` tensor; returns ``(warped, in_bounds)``."""
    _check_flow(flow, data.shape[-2:], "source")
    if flow.shape[0] != data.shape[0]:
        raise ContractViolation(f"batch size mismatch: {data.shape[0]} vs {flow.shape[0]}")
    n, _, h, w = flow.shape
    gx, gy = pixel_grid(n, h, w, flow.dtype, flow.device)
    return sample_bilinear(data, gx + flow[:, 0], gy + flow[:, 1])


def bilinear_warp(src, flow):
    """Backward-warp an :class:`ImageTensor` by ``flow``.

    The validity mask of the result is the warped source mask times the soft
    in-bounds indicator; it is computed without gradient.
    """
    data, _ = warp_tensor(src.data, flow)
    with torch.no_grad():
        valid, inside = warp_tensor(src.valid.to(flow.dtype), flow.detach())
        valid = (valid * inside).clamp_(0.0, 1.0)
    return ImageTensor(data, src.spectrum, valid.to(data.dtype))


def warp_flow(inner, by):
    """Warp flow field ``inner`` by flow field ``by`` (zero fill out of bounds)."""
    _check_flow(inner, by.shape[-2:], "inner flow")
    out, _ = warp_tensor(inner, by)
    return out


def in_bounds(flow):
    """Soft indicator that ``p + flow(p)`` lands inside the frame (no gradient)."""
    with torch.no_grad():
        n, _, h, w = flow.shape
        ones = flow.new_ones(n, 1, h, w)
        _, inside = warp_tensor(ones, flow.detach())
    return inside
