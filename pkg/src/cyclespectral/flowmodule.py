"""Flow estimation network: two spectrum encoders and one shared decoder.

The decoder works coarse to fine over six pyramid levels.  At every level it
backward-warps the source features by the current flow, correlates them with
the target features, and predicts a residual flow from the cost volume, the
target features and the current flow.  Flow is carried between levels by a
learned strided transpose convolution.  Flow values are always expressed in
pixels of the level they live on.
"""


import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractViolation
from .warp import check_spectrum_tag, warp_tensor

NUM_LEVELS = 6
DEFAULT_ENCODER_WIDTHS = (16, 32, 64, 96, 128, 196)
DEFAULT_ESTIMATOR_WIDTHS = (128, 128, 96, 64, 32)
DEFAULT_RADIUS = 4
LEAKY_SLOPE = 0.1
HEAD_GAIN = 0.01
FEATURE_EPS = 1e-6


def level_dims(h, w, levels=NUM_LEVELS):
    """Spatial dims of each pyramid level (level 1 first) under ceil padding."""
    dims = []
    for _ in range(levels):
        h, w = (h + 1) // 2, (w + 1) // 2
        dims.append((h, w))
    return dims


def conv(in_ch, out_ch, stride=1):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1, bias=True),
        nn.LeakyReLU(LEAKY_SLOPE),
    )


def _init_conv(m):
    nn.init.kaiming_uniform_(m.weight, a=LEAKY_SLOPE, mode="fan_in", nonlinearity="leaky_relu")
    if m.bias is not None:
        nn.init.zeros_(m.bias)


def pad_to_even(x):
    h, w = x.shape[-2:]
    if h % 2 == 0 and w % 2 == 0:
        return x
    return F.pad(x, (0, w % 2, 0, h % 2), mode="replicate")


class SpectrumEncoder(nn.Module):
    """Six-level feature pyramid, one 3-conv block per level (first conv strided)."""

    def __init__(self, in_channels, widths=DEFAULT_ENCODER_WIDTHS, spectrum=None):
        super().__init__()
        if len(widths) != NUM_LEVELS:
            raise ConfigError(f"need {NUM_LEVELS} encoder widths, got {len(widths)}", key="encoder_widths")
        self.in_channels = int(in_channels)
        self.widths = tuple(int(w) for w in widths)
        self.spectrum = spectrum
        blocks = {}
        prev = self.in_channels
        for lvl, width in enumerate(self.widths, start=1):
            blocks[f"level{lvl}"] = nn.Sequential(conv(prev, width, 2), conv(width, width), conv(width, width))
            prev = width
        self.levels = nn.ModuleDict(blocks)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                _init_conv(m)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ContractViolation(
                f"encoder for {self.spectrum!r} expects {self.in_channels} channels, got {x.shape[1]}")
        pyramid = []
        for block in self.levels.values():
            x = block(pad_to_even(x))
            pyramid.append(x)
        return pyramid


def rms_normalize(x, eps=FEATURE_EPS):
    """Scale each pixel's feature vector to unit root-mean-square."""
    return x / x.pow(2).mean(dim=1, keepdim=True).add(eps).sqrt()


def correlate(ref, warped, radius=DEFAULT_RADIUS, normalize=True):
    """Cost volume between ``ref`` and ``warped`` features.

    Channel ``(dy + r) * (2r + 1) + (dx + r)`` holds, at pixel ``p``, the
    channel mean of ``ref(p) * warped(p + (dx, dy))``; ``warped`` is zero
    outside the frame.  With ``normalize`` both inputs are first scaled to
    unit RMS per pixel, so each entry is the cosine of the two feature
    vectors.  Raw products of randomly initialised features are two orders
    of magnitude smaller than the features themselves, which leaves the
    estimators blind to the matching signal early in training.
    """
    if ref.shape != warped.shape:
        raise ContractViolation(f"cost volume inputs differ: {tuple(ref.shape)} vs {tuple(warped.shape)}")
    if radius < 1:
        raise ContractViolation(f"search radius must be >= 1, got {radius}")
    if normalize:
        ref, warped = rms_normalize(ref), rms_normalize(warped)
    h, w = ref.shape[-2:]
    padded = F.pad(warped, (radius, radius, radius, radius))
    maps = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = padded[:, :, radius + dy:radius + dy + h, radius + dx:radius + dx + w]
            maps.append((ref * shifted).mean(dim=1))
    return torch.stack(maps, dim=1)


class FlowEstimator(nn.Module):
    """Densely connected 5-conv stack with a 2-channel flow head."""

    def __init__(self, in_channels, widths=DEFAULT_ESTIMATOR_WIDTHS):
        super().__init__()
        layers = []
        ch = in_channels
        for width in widths:
            layers.append(conv(ch, width))
            ch += width
        self.layers = nn.ModuleList(layers)
        self.head = nn.Conv2d(ch, 2, kernel_size=3, padding=1)

    def forward(self, x):
        for layer in self.layers:
            x = torch.cat([layer(x), x], dim=1)
        return self.head(x)


def bilinear_kernel(channels, size=4):
    factor = (size + 1) // 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    og = torch.arange(size, dtype=torch.float64)
    filt1d = 1 - torch.abs(og - center) / factor
    filt = filt1d[:, None] * filt1d[None, :]
    weight = torch.zeros(channels, channels, size, size, dtype=torch.float64)
    for c in range(channels):
        weight[c, c] = filt
    return weight


class FlowUpsampler(nn.Module):
    """Learned x2 transpose-conv upsampling of a flow field, values scaled x2.

    Initialised to bilinear interpolation.  The input is replicate-padded by
    one pixel so borders are not attenuated; the result is cropped to the
    requested dims.
    """

    def __init__(self):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(2, 2, kernel_size=4, stride=2, padding=1)
        with torch.no_grad():
            self.deconv.weight.copy_(bilinear_kernel(2))
            self.deconv.bias.zero_()

    def forward(self, flow, out_hw):
        h, w = out_hw
        up = self.deconv(F.pad(flow, (1, 1, 1, 1), mode="replicate"))
        return 2.0 * up[:, :, 2:2 + h, 2:2 + w]


class SharedDecoder(nn.Module):
    """Per-level estimators and upsamplers; no parameters shared across levels."""

    def __init__(self, encoder_widths=DEFAULT_ENCODER_WIDTHS, estimator_widths=DEFAULT_ESTIMATOR_WIDTHS,
                 radius=DEFAULT_RADIUS, finest_level=2):
        super().__init__()
        if not 1 <= finest_level <= NUM_LEVELS:
            raise ConfigError(f"finest_level must be in 1..{NUM_LEVELS}", key="finest_level")
        self.radius = int(radius)
        self.finest_level = int(finest_level)
        self.estimator_widths = tuple(int(w) for w in estimator_widths)
        nd = (2 * self.radius + 1) ** 2
        # Submodules are registered as ``level6`` .. ``level1`` so parameter
        # names read ``decoder.level<l>.*``.
        for lvl in range(NUM_LEVELS, 0, -1):
            parts = {"upsample": FlowUpsampler()}
            if lvl >= self.finest_level:
                parts["estimator"] = FlowEstimator(nd + encoder_widths[lvl - 1] + 2, self.estimator_widths)
            self.add_module(f"level{lvl}", nn.ModuleDict(parts))
        for lvl in range(NUM_LEVELS, 0, -1):
            level = self.level(lvl)
            if "estimator" in level:
                for m in level["estimator"].modules():
                    if isinstance(m, nn.Conv2d):
                        _init_conv(m)
                with torch.no_grad():
                    level["estimator"].head.weight.mul_(HEAD_GAIN)

    def level(self, lvl):
        return getattr(self, f"level{lvl}")

    def forward(self, src_pyramid, tgt_pyramid, out_hw):
        flow = None
        for lvl in range(NUM_LEVELS, 0, -1):
            level = self.level(lvl)
            out_dims = tgt_pyramid[lvl - 2].shape[-2:] if lvl > 1 else out_hw
            if "estimator" in level:
                src = src_pyramid[lvl - 1]
                tgt = tgt_pyramid[lvl - 1]
                if flow is None:
                    flow = tgt.new_zeros(tgt.shape[0], 2, *tgt.shape[-2:])
                    warped = src
                else:
                    warped, _ = warp_tensor(src, flow)
                cost = F.leaky_relu(correlate(tgt, warped, self.radius), LEAKY_SLOPE)
                flow = flow + level["estimator"](torch.cat([cost, tgt, flow], dim=1))
            flow = level["upsample"](flow, out_dims)
        return flow


class SigmaModel(nn.Module):
    """The flow estimation module with one encoder per spectrum and a shared decoder.

    ``spectra`` maps each spectrum tag to the channel count of its images.
    The same parameter store plays both roles of the dual architecture; the
    role is decided by which image is passed as source.
    """

    def __init__(self, spectra, encoder_widths=DEFAULT_ENCODER_WIDTHS,
                 estimator_widths=DEFAULT_ESTIMATOR_WIDTHS, radius=DEFAULT_RADIUS, finest_level=2):
        super().__init__()
        spectra = dict(spectra)
        if len(spectra) != 2:
            raise ConfigError(f"a model pairs exactly two spectra, got {sorted(spectra)}", key="spectra")
        for tag in spectra:
            check_spectrum_tag(tag)
        # Sorted so parameter order is canonical across checkpoint round trips.
        self.spectra = {tag: int(spectra[tag]) for tag in sorted(spectra)}
        self.encoder_widths = tuple(int(w) for w in encoder_widths)
        self.encoder = nn.ModuleDict({
            tag: SpectrumEncoder(ch, self.encoder_widths, spectrum=tag) for tag, ch in self.spectra.items()
        })
        self.decoder = SharedDecoder(self.encoder_widths, estimator_widths, radius, finest_level)

    @property
    def radius(self):
        return self.decoder.radius

    def select_encoder(self, spectrum):
        try:
            return self.encoder[spectrum]
        except KeyError:
            raise ConfigError(
                f"no encoder registered for spectrum {spectrum!r}; model has {sorted(self.spectra)}",
                key="spectrum") from None

    def encode(self, img):
        return self.select_encoder(img.spectrum)(img.data)

    def estimate(self, src_pyramid, tgt_pyramid, out_hw):
        return self.decoder(src_pyramid, tgt_pyramid, out_hw)

    def forward(self, src, tgt):
        return sigma_forward(src, tgt, self)

    def parameter_groups(self):
        """Named partition of all parameters: one group per encoder plus the decoder."""
        groups = {f"encoder.{tag}": list(enc.parameters()) for tag, enc in self.encoder.items()}
        groups["decoder"] = list(self.decoder.parameters())
        return groups

    def manifest(self):
        return {
            "spectra": dict(self.spectra),
            "encoder_widths": list(self.encoder_widths),
            "estimator_widths": list(self.decoder.estimator_widths),
            "radius": self.decoder.radius,
            "levels": NUM_LEVELS,
            "finest_level": self.decoder.finest_level,
        }

    @classmethod
    def from_manifest(cls, manifest):
        return cls(
            manifest["spectra"],
            encoder_widths=manifest["encoder_widths"],
            estimator_widths=manifest["estimator_widths"],
            radius=manifest["radius"],
            finest_level=manifest.get("finest_level", 2),
        )


def encode(img, enc):
    """Encode an :class:`ImageTensor` into a six-level pyramid (level 1 first)."""
    return enc(img.data)


def sigma_forward(src, tgt, model):
    """Estimate the flow that backward-warps ``src`` onto ``tgt``'s grid.

    Each input is encoded by the encoder registered for its own spectrum tag.
    """
    if src.hw != tgt.hw:
        raise ContractViolation(f"source {src.hw} and target {tgt.hw} dims differ")
    if src.data.shape[0] != tgt.data.shape[0]:
        raise ContractViolation("source and target batch sizes differ")
    return model.estimate(model.encode(src), model.encode(tgt), src.hw)
