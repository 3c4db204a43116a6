"""U-Net with temporal attention encoder (U-TAE).

The sequence is encoded frame by frame by a shared convolutional encoder. At
the lowest resolution a lightweight temporal attention encoder (L-TAE) produces
``G`` attention masks per pixel; the masks are bilinearly upsampled to every
level and used to collapse the time axis of each feature map sequence group by
group. A convolutional decoder then rebuilds full-resolution features.

Padded frames (``pad_mask == False``) are never passed through the encoder and
receive exactly zero attention weight.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DegenerateSequence, ShapeError, UnknownAblation

ABLATIONS = ("full", "mean_attention", "skip_mean", "skip_mean_conv",
             "batchnorm_encoder", "single_date")


@dataclass(frozen=True)
class UTAEConfig:
    input_dim: int = 10
    encoder_widths: tuple[int, ...] = (64, 64, 64, 128)
    decoder_widths: tuple[int, ...] = (32, 32, 64, 128)
    # Semantic head widths after d^1; the last entry is the number of classes.
    # Empty for panoptic use, where d^1 feeds the PaPs module directly.
    out_conv: tuple[int, ...] = (32, 20)
    n_head: int = 16
    d_k: int = 4
    d_model: int = 256
    norm_groups: int = 4
    pos_period: float = 1000.0
    ablation: str = "full"
    # single_date: acquisition used, as a day offset (nearest real date wins);
    # None picks the middle real acquisition.
    single_date_day: int | None = None
    padding_mode: str = "reflect"

    def __post_init__(self):
        for name in ("encoder_widths", "decoder_widths", "out_conv"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if self.ablation not in ABLATIONS:
            raise UnknownAblation(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        L = len(self.encoder_widths)
        if L < 2 or len(self.decoder_widths) != L:
            raise ConfigError("need >= 2 levels and as many decoder as encoder widths")
        if min(self.encoder_widths + self.decoder_widths) <= 0:
            raise ConfigError("widths must be positive")
        if self.decoder_widths[-1] != self.encoder_widths[-1]:
            raise ConfigError("innermost decoder width must equal innermost encoder width")
        if self.encoder_widths[-1] % self.n_head or self.d_model % self.n_head:
            raise ConfigError("innermost encoder width and d_model must be divisible by n_head")
        for w in self.encoder_widths[:-1]:
            if w % self.n_head:
                raise ConfigError(f"encoder width {w} not divisible by n_head={self.n_head}")
        if any(w % self.norm_groups for w in self.encoder_widths):
            raise ConfigError("encoder widths must be divisible by norm_groups")

    @property
    def levels(self) -> int:
        return len(self.encoder_widths)

    @property
    def encoder_norm(self) -> str:
        return "batch" if self.ablation == "batchnorm_encoder" else "group"

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("encoder_widths", "decoder_widths", "out_conv"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UTAEConfig":
        return cls(**d)

    def replace(self, **kw) -> "UTAEConfig":
        return replace(self, **kw)


# --------------------------------------------------------------------------- blocks

def _norm(kind: str, channels: int, groups: int) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(groups, channels)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    raise ConfigError(f"unknown norm {kind!r}")


class ConvLayer(nn.Sequential):
    """Convolution, normalization, ReLU."""

    def __init__(self, d_in, d_out, norm="batch", k=3, s=1, p=1, groups=4, padding_mode="reflect"):
        super().__init__(
            nn.Conv2d(d_in, d_out, k, s, p, padding_mode=padding_mode),
            _norm(norm, d_out, groups),
            nn.ReLU(),
        )


class ConvBlock(nn.Module):
    """3x3 convolution to the output width followed by a residual 3x3 convolution."""

    def __init__(self, d_in, d_out, norm="batch", groups=4, padding_mode="reflect"):
        super().__init__()
        self.conv1 = ConvLayer(d_in, d_out, norm, groups=groups, padding_mode=padding_mode)
        self.conv2 = ConvLayer(d_out, d_out, norm, groups=groups, padding_mode=padding_mode)

    def forward(self, x):
        x = self.conv1(x)
        return x + self.conv2(x)


class DownBlock(nn.Module):
    def __init__(self, d_in, d_out, norm="group", groups=4, padding_mode="reflect"):
        super().__init__()
        self.down = ConvLayer(d_in, d_in, norm, k=4, s=2, p=1, groups=groups, padding_mode=padding_mode)
        self.block = ConvBlock(d_in, d_out, norm, groups, padding_mode)

    def forward(self, x):
        return self.block(self.down(x))


class UpBlock(nn.Module):
    """Strided transposed convolution, concatenation with the skip map, conv block."""

    def __init__(self, d_in, d_out, d_skip, padding_mode="reflect"):
        super().__init__()
        self.up = nn.Sequential(nn.ConvTranspose2d(d_in, d_out, 4, 2, 1),
                                nn.BatchNorm2d(d_out), nn.ReLU())
        self.block = ConvBlock(d_out + d_skip, d_out, "batch", padding_mode=padding_mode)

    def forward(self, x, skip):
        return self.block(torch.cat([self.up(x), skip], dim=1))


class SkipConv(nn.Sequential):
    """Shared 1x1 convolution applied to a collapsed skip connection."""

    def __init__(self, d):
        super().__init__(nn.Conv2d(d, d, 1), nn.BatchNorm2d(d), nn.ReLU())


class MaybeBatchNorm1d(nn.BatchNorm1d):
    """BatchNorm1d that falls back to running statistics for single-row batches."""

    def forward(self, x):
        if self.training and x.shape[0] < 2:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight,
                                self.bias, False, 0.0, self.eps)
        return super().forward(x)


# --------------------------------------------------------------------------- temporal

def positional_encoding(days: torch.Tensor, d: int, period: float = 1000.0, repeat: int = 1):
    """Sinusoidal encoding of day offsets, ``(..., d * repeat)``."""
    i = torch.arange(d, device=days.device, dtype=torch.float64)
    denom = torch.pow(torch.tensor(period, dtype=torch.float64), 2 * torch.div(i, 2, rounding_mode="floor") / d)
    table = days.to(torch.float64)[..., None] / denom
    enc = torch.where(i.long() % 2 == 0, torch.sin(table), torch.cos(table))
    if repeat > 1:
        enc = enc.repeat(*([1] * (enc.dim() - 1)), repeat)
    return enc


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    """Softmax over ``dim`` where ``mask == False`` entries get exactly zero weight."""
    logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=dim)


def masked_group_norm(x: torch.Tensor, mask: torch.Tensor, norm: nn.GroupNorm) -> torch.Tensor:
    """GroupNorm of ``N x C x T`` sequences with statistics over real steps only.

    Padded steps (``mask == False``) neither enter the statistics nor keep a
    value: they are set to zero.
    """
    N, C, T = x.shape
    G = norm.num_groups
    m = mask[:, None, None, :].to(x.dtype)                       # N x 1 x 1 x T
    xg = x.view(N, G, C // G, T)
    count = m.sum(dim=(2, 3), keepdim=True) * (C // G)
    mean = (xg * m).sum(dim=(2, 3), keepdim=True) / count
    var = (((xg - mean) * m) ** 2).sum(dim=(2, 3), keepdim=True) / count
    out = ((xg - mean) / torch.sqrt(var + norm.eps)).view(N, C, T)
    if norm.affine:
        out = out * norm.weight[:, None] + norm.bias[:, None]
    return out * mask[:, None, :].to(x.dtype)


class LTAE(nn.Module):
    """Lightweight temporal attention encoder applied independently at every pixel.

    Each head owns a learned master query; keys are a linear projection of the
    (normalized, projected, position-encoded) input. The head outputs are the
    attention-weighted sums of the input channels of that head, concatenated and
    passed through an MLP back to the input width.
    """

    def __init__(self, in_channels=128, d_model=256, n_head=16, d_k=4, period=1000.0):
        super().__init__()
        self.n_head, self.d_k, self.d_model, self.period = n_head, d_k, d_model, period
        self.in_norm = nn.GroupNorm(n_head, in_channels)
        self.inconv = nn.Conv1d(in_channels, d_model, 1)
        self.query = nn.Parameter(torch.randn(n_head, d_k) * math.sqrt(2.0 / d_k))
        self.fc_k = nn.Linear(d_model, n_head * d_k)
        nn.init.normal_(self.fc_k.weight, mean=0.0, std=math.sqrt(2.0 / d_k))
        self.mlp = nn.Sequential(nn.Linear(d_model, in_channels), MaybeBatchNorm1d(in_channels), nn.ReLU())
        self.out_norm = nn.GroupNorm(n_head, in_channels)

    def forward(self, x, dates, pad_mask):
        """``x``: B x T x C x H x W. Returns (B x C x H x W output, G x B x T x H x W masks)."""
        B, T, C, H, W = x.shape
        if not bool(pad_mask.any(dim=1).all()):
            raise DegenerateSequence("a sequence in the batch has no real acquisition")
        G = self.n_head
        seq = x.permute(0, 3, 4, 2, 1).reshape(B * H * W, C, T)
        mask = pad_mask[:, None, None, :].expand(B, H, W, T).reshape(B * H * W, T)
        seq = self.inconv(masked_group_norm(seq, mask, self.in_norm)).transpose(1, 2)  # N x T x d_model
        pos = positional_encoding(dates, self.d_model // G, self.period, G)  # B x T x d_model
        pos = pos.to(seq.dtype)[:, None, None].expand(B, H, W, T, self.d_model)
        seq = seq + pos.reshape(B * H * W, T, self.d_model)

        keys = self.fc_k(seq).view(B * H * W, T, G, self.d_k)
        logits = torch.einsum("ntgd,gd->ngt", keys, self.query) / math.sqrt(self.d_k)
        attn = masked_softmax(logits, mask[:, None, :], dim=-1)              # N x G x T

        values = seq.view(B * H * W, T, G, self.d_model // G)
        out = torch.einsum("ngt,ntgc->ngc", attn, values).reshape(B * H * W, self.d_model)
        out = self.out_norm(self.mlp(out))
        out = out.view(B, H, W, C).permute(0, 3, 1, 2)
        attn = attn.view(B, H, W, G, T).permute(3, 0, 4, 1, 2)
        return out, attn


def interpolate_masks(attn: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize of ``G x B x T x H x W`` masks (half-pixel centers), clamped to [0, 1]."""
    G, B, T, H, W = attn.shape
    out = F.interpolate(attn.reshape(G * B, T, H, W), size=tuple(size), mode="bilinear",
                        align_corners=False)
    return out.clamp(0.0, 1.0).view(G, B, T, *size)


def temporal_collapse(e: torch.Tensor, attn: torch.Tensor) -> torch.Tensor:
    """Group-wise attention-weighted temporal sum.

    ``e``: B x T x C x H x W, ``attn``: G x B x T x H x W. Channel group ``g``
    (contiguous block of ``C / G`` channels) is averaged over time with weights
    ``attn[g]``. Returns B x C x H x W.
    """
    G = attn.shape[0]
    C = e.shape[2]
    if C % G:
        raise ShapeError(f"{C} channels cannot be split into {G} groups")
    groups = torch.stack(e.chunk(G, dim=2))                 # G x B x T x C/G x H x W
    out = (groups * attn[:, :, :, None]).sum(dim=2)         # G x B x C/G x H x W
    return torch.cat(list(out), dim=1)


def uniform_masks(pad_mask: torch.Tensor, G: int, size, dtype) -> torch.Tensor:
    w = pad_mask.to(dtype) / pad_mask.sum(dim=1, keepdim=True).to(dtype)
    return w[None, :, :, None, None].expand(G, -1, -1, *size)


# --------------------------------------------------------------------------- model

@dataclass
class FeaturePyramid:
    """Per-level tensors; index 0 is the full-resolution level."""

    e: list = field(default_factory=list)
    a: list = field(default_factory=list)
    f: list = field(default_factory=list)
    d: list = field(default_factory=list)


class UTAE(nn.Module):
    def __init__(self, config: UTAEConfig = UTAEConfig()):
        super().__init__()
        self.config = cfg = config
        enc, dec = cfg.encoder_widths, cfg.decoder_widths
        L = cfg.levels
        norm = cfg.encoder_norm
        self.in_block = ConvBlock(cfg.input_dim, enc[0], norm, cfg.norm_groups, cfg.padding_mode)
        self.down_blocks = nn.ModuleList(
            DownBlock(enc[l - 1], enc[l], norm, cfg.norm_groups, cfg.padding_mode) for l in range(1, L))
        if cfg.ablation != "single_date":
            self.temporal_encoder = LTAE(enc[-1], cfg.d_model, cfg.n_head, cfg.d_k, cfg.pos_period)
        else:
            self.temporal_encoder = None
        if cfg.ablation != "skip_mean":
            self.skip_convs = nn.ModuleList(SkipConv(enc[l]) for l in range(L - 1))
        else:
            self.skip_convs = None
        self.up_blocks = nn.ModuleList(
            UpBlock(dec[l + 1], dec[l], enc[l], cfg.padding_mode) for l in reversed(range(L - 1)))
        if cfg.out_conv:
            widths = (dec[0],) + cfg.out_conv
            layers = []
            for a, b in zip(widths[:-2], widths[1:-1]):
                layers.append(ConvLayer(a, b, "batch", padding_mode=cfg.padding_mode))
            layers.append(nn.Conv2d(widths[-2], widths[-1], 3, 1, 1, padding_mode=cfg.padding_mode))
            self.out_conv = nn.Sequential(*layers)
        else:
            self.out_conv = None

    @property
    def stack_dim(self) -> int:
        return sum(self.config.decoder_widths)

    # -- stages ------------------------------------------------------------

    def spatial_encode(self, x: torch.Tensor, pad_mask: torch.Tensor) -> list[torch.Tensor]:
        """Encode real frames only; padded frames get all-zero features."""
        B, T, C, H, W = x.shape
        k = 2 ** (self.config.levels - 1)
        if H % k or W % k:
            raise ShapeError(f"H, W = {H}, {W} must be divisible by {k}")
        frames = x[pad_mask]
        feats = [self.in_block(frames)]
        for block in self.down_blocks:
            feats.append(block(feats[-1]))
        out = []
        for f in feats:
            full = f.new_zeros((B, T) + f.shape[1:])
            full[pad_mask] = f
            out.append(full)
        return out

    def _single_date_index(self, dates, pad_mask):
        day = self.config.single_date_day
        lengths = pad_mask.sum(dim=1)
        if day is None:
            return (lengths - 1) // 2
        dist = (dates - day).abs().masked_fill(~pad_mask, torch.iinfo(dates.dtype).max)
        return dist.argmin(dim=1)

    def collapse(self, e, dates, pad_mask):
        """Return ``(f, a)``: collapsed maps per level and attention masks per level."""
        cfg = self.config
        L = cfg.levels
        G = cfg.n_head
        if cfg.ablation == "single_date":
            idx = self._single_date_index(dates, pad_mask)
            b = torch.arange(len(idx), device=idx.device)
            f = [el[b, idx] for el in e]
            f = [self.skip_convs[l](f[l]) for l in range(L - 1)] + [f[-1]]
            return f, []

        f_top, attn = self.temporal_encoder(e[-1], dates, pad_mask)
        masks = []
        f = []
        for l in range(L - 1):
            size = e[l].shape[-2:]
            if cfg.ablation in ("skip_mean", "skip_mean_conv"):
                a = uniform_masks(pad_mask, G, size, e[l].dtype)
            else:
                a = interpolate_masks(attn, size)
                if cfg.ablation == "mean_attention":
                    a = a.mean(dim=0, keepdim=True).expand_as(a)
            masks.append(a)
            fl = temporal_collapse(e[l], a)
            if self.skip_convs is not None:
                fl = self.skip_convs[l](fl)
            f.append(fl)
        masks.append(attn)
        f.append(f_top)
        return f, masks

    def decode(self, f: list[torch.Tensor]) -> list[torch.Tensor]:
        L = self.config.levels
        d = [None] * L
        d[-1] = f[-1]
        for k, block in enumerate(self.up_blocks):
            l = L - 2 - k
            d[l] = block(d[l + 1], f[l])
        return d

    def forward(self, x, dates, pad_mask, return_pyramid: bool = False):
        """``x``: B x T x C x H x W; ``dates``: B x T; ``pad_mask``: B x T (bool).

        Returns the semantic logits (or ``d^1`` when there is no head), and the
        feature pyramid when ``return_pyramid`` is set. The pyramid's temporal
        axis stops at the last step that is real for some sequence.
        """
        pad_mask = pad_mask.bool()
        if not bool(pad_mask.any(dim=1).all()):
            raise DegenerateSequence("a sequence in the batch has no real acquisition")
        # Time steps that are padding for the whole batch carry no information;
        # dropping them makes extra trailing padding an exact no-op.
        t_used = int(pad_mask.any(dim=0).nonzero().max()) + 1
        x, dates, pad_mask = x[:, :t_used], dates[:, :t_used], pad_mask[:, :t_used]
        e = self.spatial_encode(x, pad_mask)
        f, a = self.collapse(e, dates, pad_mask)
        d = self.decode(f)
        out = self.out_conv(d[0]) if self.out_conv is not None else d[0]
        if return_pyramid:
            return out, FeaturePyramid(e, a, f, d)
        return out


def semantic_loss(logits: torch.Tensor, target: torch.Tensor, void_label: int) -> torch.Tensor:
    """Pixel-wise cross-entropy ignoring void pixels; zero (with zero gradient) if all void."""
    valid = target != void_label
    if not bool(valid.any()):
        return logits.sum() * 0.0
    return F.cross_entropy(logits, target, ignore_index=void_label)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
