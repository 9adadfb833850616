"""Self-supervision losses and their weighted combination.

Every reduction is a (soft) masked mean per sample followed by a mean over
the batch, so loss weights do not depend on resolution or batch size.
"""

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractViolation
from .warp import ImageTensor, in_bounds, warp_flow

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=torch.float64)
_SOBEL_Y = _SOBEL_X.t().contiguous()
MASK_EPS = 1e-8


@dataclass
class LossWeights:
    alpha: float = 3.4e-1
    beta: float = 3.6e-4
    gamma: float = 6.7e-1
    delta: float = 6.9e-2
    epsilon: float = 2.7e-1
    # Disparity cap in pixels; None means 10% of the image width.
    m: float = None

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "epsilon"):
            value = getattr(self, name)
            if not value >= 0:
                raise ConfigError(f"loss weight must be >= 0, got {value}", key=f"weights.{name}")
        if self.m is not None and not self.m > 0:
            raise ConfigError(f"disparity cap must be > 0, got {self.m}", key="weights.m")

    def cap_for(self, width):
        return float(self.m) if self.m is not None else 0.1 * width

    def combine(self, L_C, L_B, L_F, L_R, L_S):
        return (self.alpha * L_C + self.beta * L_B + self.gamma * L_F
                + self.delta * L_R + self.epsilon * L_S)


@dataclass
class LossBreakdown:
    L_C: torch.Tensor
    L_B: torch.Tensor
    L_F: torch.Tensor
    L_R: torch.Tensor
    L_S: torch.Tensor
    total: torch.Tensor
    components: dict = field(default_factory=dict)

    def as_floats(self):
        out = {k: float(getattr(self, k).detach()) for k in ("L_C", "L_B", "L_F", "L_R", "L_S", "total")}
        return out


def _data(x):
    return x.data if isinstance(x, ImageTensor) else x


def masked_mean(values, mask=None):
    """Per-sample mask-weighted mean of ``(N, 1, H, W)`` values, averaged over N."""
    if mask is None:
        return values.mean()
    mask = mask.to(values.dtype).expand_as(values)
    num = (values * mask).flatten(1).sum(dim=1)
    den = mask.flatten(1).sum(dim=1).clamp_min(MASK_EPS)
    return (num / den).mean()


def erode(mask):
    """3x3 min-filter: drops pixels whose stencil touches a masked pixel."""
    return -F.max_pool2d(-mask, 3, stride=1, padding=1)


def cycle_loss(reconstructed, original, mask=None):
    """Masked mean squared intensity difference between a reconstruction and its original."""
    if reconstructed.spectrum != original.spectrum:
        raise ContractViolation(
            f"cycle loss compares same-spectrum images, got {reconstructed.spectrum!r} vs {original.spectrum!r}")
    if reconstructed.shape != original.shape:
        raise ContractViolation(f"shape mismatch {reconstructed.shape} vs {original.shape}")
    if mask is None:
        mask = reconstructed.valid * original.valid
    sq = (reconstructed.data - original.data).pow(2).mean(dim=1, keepdim=True)
    return masked_mean(sq, mask)


def bidirectional_loss(f_fwd, f_bwd, mask=None):
    """Masked mean L1 norm of ``f_fwd + (f_bwd warped by f_fwd)``.

    On top of ``mask``, a pixel counts only if all four bilinear corners of
    its sample point are in frame; otherwise the zero fill would show up as
    a spurious residual.
    """
    if f_fwd.shape != f_bwd.shape:
        raise ContractViolation(f"flow shapes differ: {tuple(f_fwd.shape)} vs {tuple(f_bwd.shape)}")
    residual = f_fwd + warp_flow(f_bwd, f_fwd)
    l1 = residual.abs().sum(dim=1, keepdim=True)
    eff = (in_bounds(f_fwd) > 1.0 - MASK_EPS).to(l1.dtype)
    if mask is not None:
        eff = eff * mask
    return masked_mean(l1, eff)


def feature_loss(warped, target, phi, mask=None):
    """Perceptual distance ``||phi(warped) - phi(target)||^2 / CHW``.

    With ``mask`` both inputs are multiplied by it before ``phi`` so masked
    pixels never reach the extractor, and the spatial mean runs over the
    mask (eroded to feature resolution for strided taps).
    """
    w, t = _data(warped), _data(target)
    if w.shape[0] != t.shape[0] or w.shape[-2:] != t.shape[-2:]:
        raise ContractViolation(f"feature loss inputs differ: {tuple(w.shape)} vs {tuple(t.shape)}")
    if mask is not None:
        m = mask.to(w.dtype)
        w, t = w * m, t * m
    fw, ft = phi(w), phi(t)
    sq = (fw - ft).pow(2).mean(dim=1, keepdim=True)
    if mask is None:
        return sq.mean()
    fmask = 1.0 - F.adaptive_max_pool2d(1.0 - mask.to(sq.dtype), sq.shape[-2:])
    return masked_mean(sq, fmask)


def huber(x):
    return torch.where(x.abs() < 1.0, 0.5 * x * x, x.abs() - 0.5)


def regularization_loss(flow, m):
    """Huber penalty on flow magnitude in excess of ``m`` pixels, mean over pixels."""
    if not m > 0:
        raise ContractViolation(f"disparity cap must be > 0, got {m}")
    excess = F.relu(torch.linalg.vector_norm(flow, dim=1, keepdim=True) - m)
    return huber(excess).mean()


def sobel_magnitude(x, mask=None, eps=1e-8):
    """Channel-averaged Sobel gradient magnitude scaled to [0, 1] per sample.

    The scale is the per-sample maximum, taken over ``mask > 0`` when a mask
    is given; outside the mask the result is zero.
    """
    x = _data(x)
    n, c, h, w = x.shape
    kernels = torch.stack([_SOBEL_X, _SOBEL_Y]).to(x.dtype).to(x.device)
    kernels = kernels[:, None].repeat(c, 1, 1, 1)
    grads = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), kernels, groups=c)
    grads = grads.view(n, c, 2, h, w)
    mag = torch.linalg.vector_norm(grads, dim=2).mean(dim=1, keepdim=True)
    if mask is None:
        peak = mag.flatten(1).max(dim=1).values
        region = None
    else:
        region = (mask > 0).to(mag.dtype)
        peak = (mag * region).flatten(1).max(dim=1).values
    # A flat field only carries rounding noise; report it as exactly zero.
    peak = peak.view(n, 1, 1, 1)
    out = torch.where(peak > eps, mag / peak.clamp_min(eps), torch.zeros_like(mag))
    if region is not None:
        out = out * region
    return out


def smoothing_loss(flow, guide, mask=None):
    """Mean of ``|h(flow) * (1 - h(guide))|`` with ``h`` the normalised Sobel magnitude.

    With a mask, the mean runs over the eroded mask so that no term touches a
    masked pixel.
    """
    g = _data(guide)
    if flow.shape[-2:] != g.shape[-2:] or flow.shape[0] != g.shape[0]:
        raise ContractViolation(f"flow {tuple(flow.shape)} and guide {tuple(g.shape)} dims differ")
    region = None if mask is None else erode(mask.to(flow.dtype))
    hf = sobel_magnitude(flow, region)
    hg = sobel_magnitude(g, region)
    return masked_mean((hf * (1.0 - hg)).abs(), region)


def total_loss(outputs, I_A, I_B, weights, phi):
    """Assemble every loss term of one cycle and their weighted total."""
    o = outputs
    first = I_A.valid * I_B.valid
    second = o.w_AB.valid * o.w_BA.valid
    m = weights.cap_for(I_A.hw[1])

    comps = {
        "L_C1": cycle_loss(o.w_ABA, I_A, o.w_ABA.valid * I_A.valid),
        "L_C2": cycle_loss(o.w_BAB, I_B, o.w_BAB.valid * I_B.valid),
        "L_B1": bidirectional_loss(o.f_AB, o.f_BA, o.w_AB.valid * I_B.valid),
        "L_B1_inv": bidirectional_loss(o.f_BA, o.f_AB, o.w_BA.valid * I_A.valid),
        "L_B2": bidirectional_loss(o.f_ABA, o.f_BAB, second),
        "L_B2_inv": bidirectional_loss(o.f_BAB, o.f_ABA, second),
        "L_F1": feature_loss(o.w_AB, I_B, phi, o.w_AB.valid * I_B.valid),
        "L_F2": feature_loss(o.w_BA, I_A, phi, o.w_BA.valid * I_A.valid),
        "L_R1": regularization_loss(o.f_AB, m),
        "L_R2": regularization_loss(o.f_BA, m),
        "L_S1": smoothing_loss(o.f_AB, I_A, first),
        "L_S2": smoothing_loss(o.f_BA, I_B, first),
        "L_S3": smoothing_loss(o.f_ABA, o.w_AB, second),
        "L_S4": smoothing_loss(o.f_BAB, o.w_BA, second),
    }
    L_C = comps["L_C1"] + comps["L_C2"]
    L_B = comps["L_B1"] + comps["L_B1_inv"] + comps["L_B2"] + comps["L_B2_inv"]
    L_F = comps["L_F1"] + comps["L_F2"]
    L_R = comps["L_R1"] + comps["L_R2"]
    L_S = comps["L_S1"] + comps["L_S2"] + comps["L_S3"] + comps["L_S4"]
    total = weights.combine(L_C, L_B, L_F, L_R, L_S)
    return LossBreakdown(L_C, L_B, L_F, L_R, L_S, total, comps)


def weights_dict(weights):
    return asdict(weights)
