"""MetaFormer U-net over range-azimuth radar videos.

Tensors at module boundaries are channels-last: token grids are
(B, T', H', W', C) and the network input is (B, T, chirps, H, W, 2) with the
real/imaginary parts as the trailing channels. Convolutions permute to the
torch-native (B, C, T, H, W) layout internally.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


class ShapeError(ValueError):
    """Input tensor shape violates the model contract."""


def _check_axis(name: str, actual: int, expected: int):
    if actual != expected:
        raise ShapeError(f"axis {name!r} has size {actual}, expected {expected}")


class ChannelNorm(nn.Module):
    """Per-token layer norm over the channel axis, learnable scale, no bias."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.weight.shape, self.weight, None, self.eps)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SepConvMixer(nn.Module):
    """Inverted separable convolution mixer over the (T', H', W') token grid.

    Pointwise expansion (ratio 2) -> GELU -> depthwise 3D conv with "same"
    zero padding -> pointwise projection back to the stage width.
    """

    def __init__(self, dim: int, dw_kernel: tuple[int, int, int], expansion: int = 2):
        super().__init__()
        mid = dim * expansion
        self.pw1 = nn.Linear(dim, mid)
        self.act = nn.GELU()
        self.dw = nn.Conv3d(
            mid, mid, kernel_size=dw_kernel,
            padding=tuple(k // 2 for k in dw_kernel), groups=mid,
        )
        self.pw2 = nn.Linear(mid, dim)

    def forward(self, x):
        x = self.act(self.pw1(x))
        x = x.permute(0, 4, 1, 2, 3)
        x = self.dw(x)
        x = x.permute(0, 2, 3, 4, 1)
        return self.pw2(x)


class AttentionMixer(nn.Module):
    """Multi-head self-attention over all T'*H'*W' tokens.

    No positional encoding: tokens are already location-aware, and the mixer
    is exactly permutation-equivariant over flattened token positions.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ShapeError(f"channels {dim} not divisible by attn_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, h, w, c = x.shape
        n = t * h * w
        tokens = x.reshape(b, n, c)
        qkv = self.qkv(tokens).reshape(b, n, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # each (B, heads, N, hd)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out).reshape(b, t, h, w, c)


class MetaFormerBlock(nn.Module):
    """norm -> token mixer -> residual, then norm -> MLP -> residual."""

    def __init__(self, dim: int, mixer_kind: str, cfg: ModelConfig):
        super().__init__()
        self.norm1 = ChannelNorm(dim)
        if mixer_kind == "sepconv":
            self.mixer = SepConvMixer(dim, cfg.dw_kernel)
        elif mixer_kind == "attention":
            self.mixer = AttentionMixer(dim, cfg.attn_heads)
        else:
            raise ValueError(f"unknown mixer kind {mixer_kind!r}")
        self.norm2 = ChannelNorm(dim)
        self.mlp = Mlp(dim, cfg.mlp_ratio)

    def forward(self, x):
        x = x + self.mixer(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class TokenEmbed(nn.Module):
    """Chirp-merging convolution followed by 2x2x2 spatiotemporal patching.

    The chirp merge acts like a learned FFT across the chirp axis; the patch
    conv turns every 8 spatiotemporal neighbors into one token, yielding a
    T/2 x H/2 x W/2 token grid. The "pool" variant replaces both convolutions
    with average pooling plus linear layers.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1 = cfg.embed_channels, cfg.stage_channels[0]
        if cfg.embed_kind == "conv":
            self.chirp_conv = nn.Conv3d(
                2, c0, kernel_size=(cfg.num_chirps, 1, 1), stride=(cfg.num_chirps, 1, 1)
            )
            self.patch_conv = nn.Conv3d(c0, c1, kernel_size=2, stride=2)
        else:
            self.chirp_linear = nn.Linear(2, c0)
            self.patch_linear = nn.Linear(c0, c1)

    def forward(self, x):
        cfg = self.cfg
        if x.ndim != 6:
            raise ShapeError(f"expected 6D input (B,T,chirps,H,W,2), got {x.ndim}D")
        b, t, chirps, h, w, reim = x.shape
        _check_axis("chirps", chirps, cfg.num_chirps)
        _check_axis("real/imag", reim, 2)
        _check_axis("T", t, cfg.num_frames)
        _check_axis("H", h, cfg.height)
        _check_axis("W", w, cfg.width)
        if cfg.embed_kind == "conv":
            # (B*T, 2, chirps, H, W) -> chirp merge -> (B, T, H, W, C0)
            y = x.reshape(b * t, chirps, h, w, 2).permute(0, 4, 1, 2, 3)
            y = self.chirp_conv(y).reshape(b, t, -1, h, w).permute(0, 1, 3, 4, 2)
            # (B, C0, T, H, W) -> 2x2x2 patches -> (B, T/2, H/2, W/2, C1)
            y = y.permute(0, 4, 1, 2, 3)
            y = self.patch_conv(y).permute(0, 2, 3, 4, 1)
        else:
            y = self.chirp_linear(x.mean(dim=2))            # (B, T, H, W, C0)
            y = y.permute(0, 4, 1, 2, 3)
            y = F.avg_pool3d(y, kernel_size=2, stride=2)
            y = y.permute(0, 2, 3, 4, 1)
            y = self.patch_linear(y)
        return y


def rearrange_2x2(x):
    """Concatenate each 2x2 spatial token neighborhood into the channel axis.

    The four tokens at (2i,2j), (2i,2j+1), (2i+1,2j), (2i+1,2j+1) land in the
    output channels in exactly that order. Parameter-free; the temporal axis
    is untouched.
    """
    b, t, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"spatial extents must be even to merge, got H'={h}, W'={w}")
    x00 = x[:, :, 0::2, 0::2, :]
    x01 = x[:, :, 0::2, 1::2, :]
    x10 = x[:, :, 1::2, 0::2, :]
    x11 = x[:, :, 1::2, 1::2, :]
    return torch.cat([x00, x01, x10, x11], dim=-1)


def unarrange_2x2(y):
    """Exact inverse of :func:`rearrange_2x2` (a permutation of values)."""
    b, t, h2, w2, c4 = y.shape
    if c4 % 4:
        raise ShapeError(f"channel count {c4} not a multiple of 4")
    c = c4 // 4
    x = y.new_empty((b, t, h2 * 2, w2 * 2, c))
    x[:, :, 0::2, 0::2, :] = y[..., 0 * c:1 * c]
    x[:, :, 0::2, 1::2, :] = y[..., 1 * c:2 * c]
    x[:, :, 1::2, 0::2, :] = y[..., 2 * c:3 * c]
    x[:, :, 1::2, 1::2, :] = y[..., 3 * c:4 * c]
    return x


class TokenMerging(nn.Module):
    """Halve spatial resolution by merging every 2x2 token neighborhood.

    Default: parameter-free rearrangement into 4C channels, then channel norm
    and a learnable 4C -> next_channels projection. The "conv" variant is the
    ablation that swaps the rearrangement for a strided 1x2x2 convolution.
    """

    def __init__(self, in_channels: int, out_channels: int, kind: str = "rearrange"):
        super().__init__()
        self.kind = kind
        if kind == "rearrange":
            self.norm = ChannelNorm(4 * in_channels)
            self.proj = nn.Linear(4 * in_channels, out_channels)
        else:
            self.conv = nn.Conv3d(
                in_channels, out_channels, kernel_size=(1, 2, 2), stride=(1, 2, 2)
            )

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(
                f"spatial extents must be even to merge, got H'={x.shape[2]}, W'={x.shape[3]}"
            )
        if self.kind == "rearrange":
            return self.proj(self.norm(rearrange_2x2(x)))
        y = x.permute(0, 4, 1, 2, 3)
        return self.conv(y).permute(0, 2, 3, 4, 1)


class TokenSplitting(nn.Module):
    """Map each token to a 2x2 spatial neighborhood via a transposed conv.

    Kernel and stride 1x2x2: the learned weights decide how a merged token is
    split back apart, and the temporal axis stays fixed.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.deconv = nn.ConvTranspose3d(
            in_channels, out_channels, kernel_size=(1, 2, 2), stride=(1, 2, 2)
        )

    def forward(self, x):
        y = x.permute(0, 4, 1, 2, 3)
        return self.deconv(y).permute(0, 2, 3, 4, 1)


class SkipFusion(nn.Module):
    """Concatenate decoder and encoder tokens, project back to stage width."""

    def __init__(self, width: int):
        super().__init__()
        self.proj = nn.Linear(2 * width, width)

    def forward(self, dec, enc):
        for axis, name in ((1, "T'"), (2, "H'"), (3, "W'")):
            if dec.shape[axis] != enc.shape[axis]:
                raise ShapeError(
                    f"axis {name!r} mismatch between decoder ({dec.shape[axis]}) "
                    f"and encoder skip ({enc.shape[axis]})"
                )
        return self.proj(torch.cat([dec, enc], dim=-1))


class OutputHead(nn.Module):
    """Trilinear x2 upsampling, pointwise conv to classes, logistic squash."""

    def __init__(self, in_channels: int, num_classes: int, bias_init: float = -3.0):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, num_classes, kernel_size=1)
        self.bias_init = bias_init

    def forward(self, x):
        y = x.permute(0, 4, 1, 2, 3)
        y = F.interpolate(y, scale_factor=2, mode="trilinear", align_corners=False)
        y = torch.sigmoid(self.conv(y))
        return y.permute(0, 2, 1, 3, 4)  # (B, T, classes, H, W)


class MRadNet(nn.Module):
    """Hierarchical MetaFormer encoder/decoder producing class confidence maps.

    Encoder: TokenEmbed, then per stage a run of MetaFormer blocks followed by
    TokenMerging (except after the deepest stage); every stage output is kept
    for its skip connection. Decoder: per stage TokenSplitting, fusion with
    the matching encoder output, then MetaFormer blocks. The head restores the
    full T x H x W resolution.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        chans = cfg.stage_channels
        s = cfg.num_stages

        self.embed = TokenEmbed(cfg)
        self.encoder_stages = nn.ModuleList(
            nn.ModuleList(
                MetaFormerBlock(chans[i], cfg.stage_mixers[i], cfg)
                for _ in range(cfg.stage_depths[i])
            )
            for i in range(s)
        )
        self.merges = nn.ModuleList(
            TokenMerging(chans[i], chans[i + 1], cfg.merge_kind) for i in range(s - 1)
        )

        dec_widths = tuple(reversed(chans[:-1]))
        dec_depths = cfg.resolved_decoder_depths()
        dec_mixers = cfg.resolved_decoder_mixers()
        self.splits = nn.ModuleList(
            TokenSplitting(chans[s - 1 - j], dec_widths[j]) for j in range(s - 1)
        )
        self.fusions = nn.ModuleList(SkipFusion(w) for w in dec_widths)
        self.decoder_stages = nn.ModuleList(
            nn.ModuleList(
                MetaFormerBlock(dec_widths[j], dec_mixers[j], cfg)
                for _ in range(dec_depths[j])
            )
            for j in range(s - 1)
        )
        self.head = OutputHead(chans[0], cfg.num_classes, cfg.head_bias_init)
        self.apply(init_parameters)
        with torch.no_grad():
            self.head.conv.bias.fill_(cfg.head_bias_init)

    def forward(self, x):
        t = self.embed(x)
        skips = []
        for i, blocks in enumerate(self.encoder_stages):
            for block in blocks:
                t = block(t)
            skips.append(t)
            if i < len(self.merges):
                t = self.merges[i](t)
        for j, blocks in enumerate(self.decoder_stages):
            t = self.splits[j](t)
            t = self.fusions[j](t, skips[len(skips) - 2 - j])
            for block in blocks:
                t = block(t)
        return self.head(t)


def init_parameters(module):
    """Fan-in-scaled truncated-normal weights, zero biases, unit norm scales.

    A fixed small std starves tiny desk-scale models of input signal and they
    collapse to the constant-background minimum, so the std follows
    1/sqrt(3*fan_in) per layer (truncated at 2 std).
    """
    if isinstance(module, (nn.Linear, nn.Conv3d)):
        w = module.weight
        fan_in = w.shape[1] * (math.prod(w.shape[2:]) if w.dim() > 2 else 1)
        std = math.sqrt(1.0 / (3.0 * fan_in))
        nn.init.trunc_normal_(w, std=std, a=-2 * std, b=2 * std)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.ConvTranspose3d):
        # stride equals kernel here, so each output sees in_channels inputs
        std = math.sqrt(1.0 / (3.0 * module.weight.shape[0]))
        nn.init.trunc_normal_(module.weight, std=std, a=-2 * std, b=2 * std)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, ChannelNorm):
        nn.init.ones_(module.weight)


def build_model(cfg: ModelConfig, seed: int = 0) -> MRadNet:
    """Construct a model with a reproducible seeded initialization."""
    torch.manual_seed(seed)
    return MRadNet(cfg)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def count_flops(cfg: ModelConfig) -> int:
    """Analytic forward FLOPs for one window at batch size 1.

    Pure shape algebra mirroring ``MRadNet.forward``. Convention: one
    multiply-accumulate in a convolution, linear layer, or attention matmul
    counts as 2 FLOPs; normalization, activations, softmax scaling,
    interpolation, and residual adds are omitted.
    """
    cfg.validate()
    t2, h2, w2 = cfg.num_frames // 2, cfg.height // 2, cfg.width // 2
    c0 = cfg.embed_channels
    chans = cfg.stage_channels
    macs = 0

    if cfg.embed_kind == "conv":
        macs += cfg.num_frames * cfg.height * cfg.width * c0 * (cfg.num_chirps * 2)
        macs += (t2 * h2 * w2) * chans[0] * (8 * c0)
    else:
        macs += cfg.num_frames * cfg.height * cfg.width * c0 * 2
        macs += (t2 * h2 * w2) * chans[0] * c0

    def block_macs(c: int, n: int, mixer: str) -> int:
        mlp = 2 * int(c * cfg.mlp_ratio) * c * n
        if mixer == "sepconv":
            mid = 2 * c
            mixer_macs = n * (c * mid + mid * math.prod(cfg.dw_kernel) + mid * c)
        else:
            mixer_macs = n * (3 * c * c + c * c) + 2 * n * n * c  # qkv+proj, QK^T+AV
        return mixer_macs + mlp

    h, w = h2, w2
    for i, c in enumerate(chans):
        n = t2 * h * w
        macs += cfg.stage_depths[i] * block_macs(c, n, cfg.stage_mixers[i])
        if i < len(chans) - 1:
            macs += (t2 * (h // 2) * (w // 2)) * chans[i + 1] * (4 * c)  # merge
            h, w = h // 2, w // 2

    dec_widths = tuple(reversed(chans[:-1]))
    dec_depths = cfg.resolved_decoder_depths()
    dec_mixers = cfg.resolved_decoder_mixers()
    in_c = chans[-1]
    for j, c in enumerate(dec_widths):
        h, w = h * 2, w * 2
        n = t2 * h * w
        macs += n * c * in_c            # 1x2x2 transposed conv
        macs += n * c * (2 * c)         # skip fusion projection
        macs += dec_depths[j] * block_macs(c, n, dec_mixers[j])
        in_c = c

    macs += cfg.num_frames * cfg.height * cfg.width * cfg.num_classes * chans[0]  # head
    return 2 * macs
