"""Network families: LSA-ViT UNet denoiser, discriminator, RRDB super-resolution
generator and the segmentation UNet."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import ShapeError, concat, group_norm, maxpool2d, softmax, upsample_bilinear


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_channels: int = 16
    down_factor: int = 4
    num_down: int = 2
    num_up: int = 4
    vit_heads: int = 4
    vit_depth: int = 2
    time_dim: int = 64
    T: int = 1000
    groups: int = 1  # one group keeps per-image intensity offsets visible to the network

    def __post_init__(self):
        if 2 ** self.num_up != self.down_factor ** self.num_down:
            raise ValueError(
                f"{self.num_up} x2 up-sampling blocks cannot undo {self.num_down} "
                f"down-sampling blocks of factor {self.down_factor}"
            )
        width = 2 * self.base_channels
        if self.base_channels % self.groups or width % self.vit_heads:
            raise ValueError("base_channels must be divisible by groups and 2*base by vit_heads")

    @property
    def total_downscale(self) -> int:
        return self.down_factor ** self.num_down

    def to_dict(self) -> dict:
        return asdict(self)


# -- attention --------------------------------------------------------------

def lsa_weights(q: torch.Tensor, k: torch.Tensor, tau) -> torch.Tensor:
    """softmax(q k^T / tau) over the last axis with the diagonal masked to -inf."""
    n_tok = q.shape[-2]
    if n_tok < 2:
        raise ShapeError("locality self-attention needs at least 2 tokens")
    scores = (q @ k.transpose(-2, -1)) / tau
    # mask after scaling so no -inf ever reaches the tau gradient
    diag = torch.eye(n_tok, dtype=torch.bool, device=q.device)
    return softmax(scores.masked_fill(diag, float("-inf")), axis=-1)


def lsa_attention(x: torch.Tensor, wq, wk, wv, wo, tau, heads: int = 1, return_weights: bool = False):
    """Multi-head locality self-attention over tokens ``x`` of shape [..., n_tok, d].

    Projection weights use the ``F.linear`` convention ([out, in]).
    """
    *lead, n_tok, d = x.shape
    if d % heads:
        raise ShapeError(f"token dim {d} not divisible by {heads} heads")
    hd = d // heads

    def split(w):
        y = F.linear(x, w)
        return y.reshape(*lead, n_tok, heads, hd).transpose(-3, -2)

    weights = lsa_weights(split(wq), split(wk), tau)
    out = (weights @ split(wv)).transpose(-3, -2).reshape(*lead, n_tok, d)
    out = F.linear(out, wo)
    return (out, weights) if return_weights else out


class LSAAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim)
        self.tau = nn.Parameter(torch.tensor(math.sqrt(dim // heads)))

    def forward(self, x, return_weights: bool = False):
        out = lsa_attention(x, self.q.weight, self.k.weight, self.v.weight, self.proj.weight,
                            self.tau, self.heads, return_weights)
        if return_weights:
            out, w = out
            return out + self.proj.bias, w
        return out + self.proj.bias


class ViTEncoder(nn.Module):
    """Pre-norm transformer layers over the spatial positions of a feature map."""

    def __init__(self, dim: int, heads: int = 4, depth: int = 2, mlp_ratio: int = 2):
        super().__init__()
        self.layers = nn.ModuleList()
        for _ in range(depth):
            self.layers.append(nn.ModuleDict({
                "norm1": nn.LayerNorm(dim),
                "attn": LSAAttention(dim, heads),
                "norm2": nn.LayerNorm(dim),
                "mlp": nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)),
            }))

    def forward(self, x):
        n, c, h, w = x.shape
        tok = x.flatten(2).transpose(1, 2)
        for layer in self.layers:
            tok = tok + layer["attn"](layer["norm1"](tok))
            tok = tok + layer["mlp"](layer["norm2"](tok))
        return tok.transpose(1, 2).reshape(n, c, h, w)


# -- denoiser ---------------------------------------------------------------

def time_embedding(t, dim: int, T: int | None = None) -> torch.Tensor:
    """Sinusoidal encoding of integer step(s) ``t``; shape [dim] or [N, dim]."""
    t_arr = torch.as_tensor(t)
    if T is not None and (t_arr.min() < 1 or t_arr.max() > T):
        raise ValueError(f"diffusion step outside [1, {T}]")
    if dim % 2:
        raise ValueError("time embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t_arr.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).to(torch.get_default_dtype())


class ConvBlock(nn.Module):
    """conv - GN - GELU - conv - GN, optionally wrapped in a residual connection."""

    def __init__(self, cin: int, cout: int, groups: int = 8, residual: bool = False):
        super().__init__()
        if residual and cin != cout:
            raise ValueError("residual conv block needs cin == cout")
        self.residual = residual
        self.groups = groups
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, cout)

    def forward(self, x):
        h = self.norm2(self.conv2(F.gelu(self.norm1(self.conv1(x)))))
        return F.gelu(x + h) if self.residual else h


class TimeProjection(nn.Sequential):
    def __init__(self, time_dim: int, channels: int):
        super().__init__(nn.SiLU(), nn.Linear(time_dim, channels))

    def forward(self, emb):
        return super().forward(emb)[:, :, None, None]


class DownBlock(nn.Module):
    def __init__(self, cin, cout, window, cfg: DenoiserConfig):
        super().__init__()
        self.window = window
        self.block1 = ConvBlock(cin, cin, cfg.groups, residual=True)
        self.block2 = ConvBlock(cin, cout, cfg.groups)
        self.time = TimeProjection(cfg.time_dim, cout)
        self.vit = ViTEncoder(cout, cfg.vit_heads, cfg.vit_depth)

    def forward(self, x, emb):
        x = self.block2(self.block1(maxpool2d(x, self.window)))
        return self.vit(x + self.time(emb))


class UpBlock(nn.Module):
    def __init__(self, cin, cout, cfg: DenoiserConfig):
        super().__init__()
        self.block1 = ConvBlock(cin, cin, cfg.groups, residual=True)
        self.block2 = ConvBlock(cin, cout, cfg.groups)
        self.time = TimeProjection(cfg.time_dim, cout)

    def forward(self, x, skip, emb):
        x = upsample_bilinear(x, 2)
        if skip is not None:
            x = concat([x, skip], axis=1)
        return self.block2(self.block1(x)) + self.time(emb)


class Denoiser(nn.Module):
    """UNet with LSA-ViT encoders after each down-sampling stage; predicts noise."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        b, wide = cfg.base_channels, 2 * cfg.base_channels
        self.init_conv = nn.Conv2d(cfg.in_channels, b, 3, padding=1)
        self.init_norm = nn.GroupNorm(cfg.groups, b)

        # channel plan: b at full resolution, doubled at the first down-sample, constant after
        self.downs = nn.ModuleList()
        cin = b
        skip_channels = {1: b}
        scale = 1
        for _ in range(cfg.num_down):
            self.downs.append(DownBlock(cin, wide, cfg.down_factor, cfg))
            cin = wide
            scale *= cfg.down_factor
            skip_channels[scale] = wide
        del skip_channels[scale]  # the deepest map feeds the bottleneck, not a skip

        self.bottleneck = nn.Sequential(*(ConvBlock(wide, wide, cfg.groups) for _ in range(3)))

        self.ups = nn.ModuleList()
        self.up_skips: list[int | None] = []
        for i in range(cfg.num_up):
            scale //= 2
            skip = skip_channels.get(scale)
            cout = b if i >= cfg.num_up // 2 else wide
            self.ups.append(UpBlock(cin + (skip or 0), cout, cfg))
            self.up_skips.append(scale if skip else None)
            cin = cout
        self.final = nn.Conv2d(cin, cfg.out_channels, 1)

    def forward(self, x, t, cond=None):
        if cond is not None:
            x = concat([x, cond], axis=1)
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"denoiser expects {self.cfg.in_channels} input channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        k = self.cfg.total_downscale
        if h % k or w % k:
            raise ShapeError(f"spatial extent {h}x{w} not divisible by {k}")
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        emb = time_embedding(t, self.cfg.time_dim, self.cfg.T).to(x.dtype)

        feats = {1: F.gelu(self.init_norm(self.init_conv(x)))}
        hcur = feats[1]
        scale = 1
        for down in self.downs:
            hcur = down(hcur, emb)
            scale *= self.cfg.down_factor
            feats[scale] = hcur
        hcur = self.bottleneck(hcur)
        for up, skip in zip(self.ups, self.up_skips):
            hcur = up(hcur, feats[skip] if skip else None, emb)
        return self.final(hcur)


def build_denoiser(cfg: DenoiserConfig, seed: int = 0) -> Denoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Denoiser(cfg)


def denoise_forward(model: Denoiser, x, t, cond=None):
    return model(x, t, cond)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -- discriminator ----------------------------------------------------------

class Discriminator(nn.Module):
    """PatchGAN-style critic with ViT encoders; kernel 4, strides 2,1,2,2,1.

    The scalar score is the mean of the per-patch sigmoid outputs.
    Inputs must be at least 32x32.
    """

    def __init__(self, in_channels: int = 4, base_channels: int = 16, vit_heads: int = 4, vit_depth: int = 1):
        super().__init__()
        b = base_channels
        self.initial = nn.Sequential(nn.Conv2d(in_channels, b, 4, 2, 1), nn.LeakyReLU(0.2))
        widths = [(b, 2 * b, 1), (2 * b, 4 * b, 2), (4 * b, 4 * b, 2)]
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(cin, cout, 4, stride, 1),
                nn.InstanceNorm2d(cout, affine=True),
                nn.LeakyReLU(0.2),
                ViTEncoder(cout, vit_heads, vit_depth),
            )
            for cin, cout, stride in widths
        )
        self.final = nn.Conv2d(4 * b, 1, 4, 1, 1)

    def patch_logits(self, x):
        h = self.initial(x)
        for block in self.blocks:
            h = block(h)
        return self.final(h)

    def forward(self, x):
        return torch.sigmoid(self.patch_logits(x)).mean(dim=(1, 2, 3))


def discriminate(D: Discriminator, fundus, vessel):
    """Realism score in (0, 1) for each aligned (fundus, vessel) pair."""
    if fundus.shape[-2:] != vessel.shape[-2:] or fundus.shape[0] != vessel.shape[0]:
        raise ShapeError(f"misaligned pair {tuple(fundus.shape)} vs {tuple(vessel.shape)}")
    return D(concat([fundus, vessel], axis=1))


# -- super-resolution -------------------------------------------------------

class ResidualDenseBlock(nn.Module):
    def __init__(self, nf: int = 32, gc: int = 16, res_scale: float = 0.2):
        super().__init__()
        self.res_scale = res_scale
        self.convs = nn.ModuleList(nn.Conv2d(nf + i * gc, gc, 3, 1, 1) for i in range(4))
        self.fuse = nn.Conv2d(nf + 4 * gc, nf, 3, 1, 1)

    def forward(self, x):
        feats = [x]
        for conv in self.convs:
            feats.append(F.leaky_relu(conv(torch.cat(feats, 1)), 0.2))
        return x + self.res_scale * self.fuse(torch.cat(feats, 1))


class RRDB(nn.Module):
    def __init__(self, nf: int = 32, gc: int = 16, res_scale: float = 0.2):
        super().__init__()
        self.res_scale = res_scale
        self.rdbs = nn.Sequential(*(ResidualDenseBlock(nf, gc, res_scale) for _ in range(3)))

    def forward(self, x):
        return x + self.res_scale * self.rdbs(x)


class RRDBNet(nn.Module):
    """ESRGAN-style generator predicting a residual over bilinear up-sampling.

    The output convolution starts at zero, so an untrained network returns the
    bilinear baseline exactly.
    """

    def __init__(self, in_channels: int = 3, out_channels: int | None = None, scale: int = 2,
                 nf: int = 32, gc: int = 16, num_blocks: int = 4, res_scale: float = 0.2):
        super().__init__()
        if scale not in (2, 4):
            raise ValueError(f"unsupported scale {scale}; expected 2 or 4")
        out_channels = out_channels or in_channels
        if out_channels != in_channels:
            raise ValueError("bilinear baseline needs out_channels == in_channels")
        self.scale = scale
        self.conv_first = nn.Conv2d(in_channels, nf, 3, 1, 1)
        self.trunk = nn.Sequential(*(RRDB(nf, gc, res_scale) for _ in range(num_blocks)))
        self.trunk_conv = nn.Conv2d(nf, nf, 3, 1, 1)
        self.up_convs = nn.ModuleList(nn.Conv2d(nf, nf, 3, 1, 1) for _ in range(int(math.log2(scale))))
        self.hr_conv = nn.Conv2d(nf, nf, 3, 1, 1)
        self.conv_last = nn.Conv2d(nf, out_channels, 3, 1, 1)
        nn.init.zeros_(self.conv_last.weight)
        nn.init.zeros_(self.conv_last.bias)

    def forward(self, x):
        fea = self.conv_first(x)
        fea = fea + self.trunk_conv(self.trunk(fea))
        for conv in self.up_convs:
            fea = F.leaky_relu(conv(F.interpolate(fea, scale_factor=2, mode="nearest")), 0.2)
        residual = self.conv_last(F.leaky_relu(self.hr_conv(fea), 0.2))
        return upsample_bilinear(x, self.scale) + residual


def sr_forward(G: RRDBNet, low):
    return G(low)


# -- segmentation -----------------------------------------------------------

class _DoubleConv(nn.Sequential):
    def __init__(self, cin, cout, groups=8):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(groups, cout), nn.ReLU(),
            nn.Conv2d(cout, cout, 3, padding=1), nn.GroupNorm(groups, cout), nn.ReLU(),
        )


class SegUNet(nn.Module):
    def __init__(self, in_channels: int = 3, base_channels: int = 16, depth: int = 3):
        super().__init__()
        widths = [base_channels * 2 ** i for i in range(depth + 1)]
        self.enc = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.enc.append(_DoubleConv(cin, w))
            cin = w
        self.dec = nn.ModuleList(_DoubleConv(widths[i + 1] + widths[i], widths[i]) for i in reversed(range(depth)))
        self.head = nn.Conv2d(widths[0], 1, 1)

    def logits(self, x):
        skips = []
        h = x
        for i, enc in enumerate(self.enc):
            if i:
                h = F.max_pool2d(h, 2)
            h = enc(h)
            skips.append(h)
        skips.pop()
        for dec in self.dec:
            h = upsample_bilinear(h, 2)
            h = dec(torch.cat([h, skips.pop()], 1))
        return self.head(h)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def segment(model: SegUNet, image):
    return model(image)
