"""Domain attention blocks, density estimation block and the three-subnet model."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import Encoder, EncoderConfig, FeaturePyramid


@dataclass
class DabConfig:
    num_heads: int = 2
    conv_kernel: int = 3
    dab_scales: tuple = (2, 3, 4)
    bidirectional: bool = False
    shared: bool = True
    deb_widths: tuple = (32, 16)

    def __post_init__(self):
        self.dab_scales = tuple(sorted(int(s) for s in self.dab_scales))
        self.deb_widths = tuple(int(w) for w in self.deb_widths)
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")
        if not set(self.dab_scales) <= {2, 3, 4}:
            raise ValueError(f"dab_scales must be a subset of (2, 3, 4), got {self.dab_scales}")

    @classmethod
    def paper(cls) -> "DabConfig":
        return cls(num_heads=8, deb_widths=(64, 32))

    @classmethod
    def toy(cls) -> "DabConfig":
        return cls()


def sinusoidal_encoding(n: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """n x dim table of sine/cosine features over flattened token index."""
    pos = torch.arange(n, dtype=torch.float64, device=device).unsqueeze(1)
    i = torch.arange(0, dim, 2, dtype=torch.float64, device=device)
    freq = torch.exp(-math.log(10000.0) * i / dim)
    pe = torch.zeros(n, dim, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return pe.to(dtype)


def conv_bn_relu(cin, cout, k):
    return nn.Sequential(nn.Conv2d(cin, cout, k, padding=k // 2), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


@dataclass
class AttentionOutput:
    a_attn: torch.Tensor      # B x c' x h x w
    score_map: torch.Tensor   # B x hw x hw, head- and layer-averaged softmax scores


class DomainAttentionBlock(nn.Module):
    """Dense token attention of ``q`` layers against ``k`` layers, refined by a conv stack.

    The per-layer score maps (B, e, hw, hw) are concatenated along the key axis,
    the key axis is treated as channels over the h x w query grid and reduced back
    to hw channels by three conv/BN/ReLU layers; the refined map then weights the
    value tokens.
    """

    def __init__(self, dim, num_layers, hw, out_dim, num_heads=2, kernel=3, bidirectional=False):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim, self.num_layers, self.hw = dim, num_layers, hw
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.bidirectional = bidirectional
        self.q_proj = nn.ModuleList([nn.Linear(dim, dim) for _ in range(num_layers)])
        self.k_proj = nn.ModuleList([nn.Linear(dim, dim) for _ in range(num_layers)])
        self.v_proj = nn.Linear(dim, dim)
        self.refine = nn.Sequential(
            conv_bn_relu(num_layers * hw, hw, kernel), conv_bn_relu(hw, hw, kernel), conv_bn_relu(hw, hw, kernel))
        self.out = conv_bn_relu(self.head_dim, out_dim, 3)

    def _heads(self, x):
        B, N, _ = x.shape
        return x.view(B, N, self.num_heads, self.head_dim).transpose(1, 2)

    def scores(self, q_feats, k_feats):
        """Per-layer softmax score maps, list of B x e x hw x hw."""
        maps = []
        for l, (fq, fk) in enumerate(zip(q_feats, k_feats)):
            tq, tk = _tokens(fq), _tokens(fk)
            pe = sinusoidal_encoding(tq.shape[1], self.dim, tq.dtype, tq.device)
            q = self._heads(self.q_proj[l](tq + pe))
            k = self._heads(self.k_proj[l](tk + pe))
            s = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
            if self.bidirectional:
                q2 = self._heads(self.q_proj[l](tk + pe))
                k2 = self._heads(self.k_proj[l](tq + pe))
                s = 0.5 * (s + torch.softmax(q2 @ k2.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1))
            maps.append(s)
        return maps

    def forward(self, q_feats, k_feats, v) -> AttentionOutput:
        if len(q_feats) != len(k_feats) or len(q_feats) != self.num_layers:
            raise ValueError(f"expected {self.num_layers} q/k layers, got {len(q_feats)}/{len(k_feats)}")
        for fq, fk in zip(q_feats, k_feats):
            if fq.shape != fk.shape or fq.shape[-2:] != v.shape[-2:]:
                raise ValueError(f"shape mismatch: q {tuple(fq.shape)} k {tuple(fk.shape)} v {tuple(v.shape)}")
        B, _, h, w = v.shape
        if h * w != self.hw:
            raise ValueError(f"block built for {self.hw} tokens, got {h}x{w}")
        maps = self.scores(q_feats, k_feats)
        e = self.num_heads
        cat = torch.cat(maps, dim=-1)                                   # B, e, hw, L*hw
        x = cat.reshape(B * e, h, w, -1).permute(0, 3, 1, 2)            # B*e, L*hw, h, w
        refined = self.refine(x).permute(0, 2, 3, 1).reshape(B, e, h * w, h * w)
        tv = _tokens(v)
        vv = self._heads(self.v_proj(tv))
        heads = refined @ vv                                            # B, e, hw, d
        mixed = heads.mean(dim=1).transpose(1, 2).reshape(B, self.head_dim, h, w)
        score = torch.stack(maps, 0).mean(dim=(0, 2))
        return AttentionOutput(self.out(mixed), score)


def _tokens(x):
    # B x C x h x w -> B x hw x C
    return x.flatten(2).transpose(1, 2)


class DensityEstimationBlock(nn.Module):
    """Fuse the upsampled attention map with the two scale-1 skips; three conv+ReLU down to 1 channel."""

    def __init__(self, attn_dim, skip_dim, widths=(32, 16)):
        super().__init__()
        c1, c2 = widths
        self.conv1 = nn.Conv2d(attn_dim + 2 * skip_dim, c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.conv3 = nn.Conv2d(c2, 1, 1)
        nn.init.constant_(self.conv3.bias, 0.01)

    def forward(self, a_attn, skip_s, skip_t, out_size=None):
        if skip_s.shape != skip_t.shape:
            raise ValueError(f"skip shapes differ: {tuple(skip_s.shape)} vs {tuple(skip_t.shape)}")
        if a_attn.shape[-2:] != skip_s.shape[-2:]:
            a_attn = F.interpolate(a_attn, size=skip_s.shape[-2:], mode="bilinear", align_corners=False)
        x = torch.cat([a_attn, skip_s, skip_t], dim=1)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        if out_size is not None and tuple(out_size) != tuple(x.shape[-2:]):
            factor = (out_size[0] * out_size[1]) / (x.shape[-2] * x.shape[-1])
            x = F.interpolate(x, size=tuple(out_size), mode="bilinear", align_corners=False) / factor
        return x


class Decoder(nn.Module):
    """Attention-to-adapt decoder: DABs at scales 4 -> 3 -> 2, then the DEB.

    Built for a fixed input size, since the score-map conv stacks have hw channels.
    """

    def __init__(self, enc_cfg: EncoderConfig, img_size: int, cfg: DabConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DabConfig()
        self.img_size = img_size
        dims = enc_cfg.embed_dims
        self.blocks = nn.ModuleDict()
        for scale in (4, 3, 2):
            side = _grid(img_size, enc_cfg.patch_size, scale)
            out_dim = dims[scale - 2]
            if scale in cfg.dab_scales:
                self.blocks[str(scale)] = DomainAttentionBlock(
                    dims[scale - 1], enc_cfg.depths[scale - 1], side * side, out_dim,
                    cfg.num_heads, cfg.conv_kernel, cfg.bidirectional)
            else:
                self.blocks[str(scale)] = nn.Conv2d(dims[scale - 1], out_dim, 1)
        self.deb = DensityEstimationBlock(dims[0], dims[0], cfg.deb_widths)

    def forward(self, pyr_q: FeaturePyramid, pyr_k: FeaturePyramid, mode="cross", out_size=None):
        """Return (density B x 1 x H x W, {scale: score map})."""
        if mode not in ("self", "cross"):
            raise ValueError(f"mode must be 'self' or 'cross', got {mode!r}")
        if mode == "self" and pyr_k is not pyr_q:
            raise ValueError("self mode takes a single pyramid for both queries and keys")
        v = pyr_q.last(4) + pyr_k.last(4)
        scores = {}
        for scale in (4, 3, 2):
            blk = self.blocks[str(scale)]
            if isinstance(blk, DomainAttentionBlock):
                res = blk(pyr_q.scale(scale), pyr_k.scale(scale), v)
                v, scores[scale] = res.a_attn, res.score_map
            else:
                v = blk(v)
            target = pyr_q.last(scale - 1).shape[-2:]
            v = F.interpolate(v, size=target, mode="bilinear", align_corners=False)
        size = out_size or (self.img_size, self.img_size)
        density = self.deb(v, pyr_k.last(1), pyr_q.last(1), out_size=size)
        return density, scores


def _grid(img_size, patch, scale):
    side = -(-img_size // patch)
    for _ in range(scale - 1):
        side = -(-side // 2)
    return side


@dataclass
class ModelConfig:
    profile: str = "toy"
    img_size: int = 64
    encoder: EncoderConfig = None
    dab: DabConfig = None

    def __post_init__(self):
        if self.encoder is None:
            self.encoder = EncoderConfig.for_profile(self.profile)
        elif isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.dab is None:
            self.dab = DabConfig.paper() if self.profile == "paper" else DabConfig.toy()
        elif isinstance(self.dab, dict):
            self.dab = DabConfig(**self.dab)


class CountingModel(nn.Module):
    """Shared encoder + decoder; evaluates the source, target and source-target subnets."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.encoder = Encoder(cfg.encoder)
        self.decoder = Decoder(cfg.encoder, cfg.img_size, cfg.dab)
        # unshared ablation: separate decoders per subnet
        self.decoders = None
        if not cfg.dab.shared:
            self.decoders = nn.ModuleDict({
                k: Decoder(cfg.encoder, cfg.img_size, cfg.dab) for k in ("t", "st")})

    def _decoder(self, which):
        if self.decoders is None or which == "s":
            return self.decoder
        return self.decoders[which]

    def encode(self, img):
        return self.encoder(img)

    def predict(self, img_t):
        """Inference path: target subnet only."""
        pyr = self.encoder(img_t)
        dens, _ = self._decoder("t")(pyr, pyr, "self", out_size=img_t.shape[-2:])
        return dens

    def forward(self, img_s, img_t, cross=True):
        if img_s.shape[0] != img_t.shape[0]:
            raise ValueError(f"unpaired batches: {img_s.shape[0]} source vs {img_t.shape[0]} target")
        size = img_t.shape[-2:]
        pyr_s, pyr_t = self.encoder(img_s), self.encoder(img_t)
        t_s, sc_s = self._decoder("s")(pyr_s, pyr_s, "self", out_size=size)
        t_t, sc_t = self._decoder("t")(pyr_t, pyr_t, "self", out_size=size)
        out = {"T_s": t_s, "T_t": t_t, "score_s": sc_s, "score_t": sc_t}
        if cross:
            t_st, sc_st = self._decoder("st")(pyr_t, pyr_s, "cross", out_size=size)
            out.update(T_st=t_st, score_st=sc_st)
        return out


def subnet_forward(pyr_q, pyr_k, decoder: Decoder, mode="self", out_size=None):
    return decoder(pyr_q, pyr_k, mode, out_size)


def dab_forward(q_feats, k_feats, v, block: DomainAttentionBlock) -> AttentionOutput:
    return block(q_feats, k_feats, v)


def deb_forward(a_attn_up, skip_s, skip_t, deb: DensityEstimationBlock, out_size=None):
    return deb(a_attn_up, skip_s, skip_t, out_size)


def zero_biases(module: nn.Module) -> nn.Module:
    """Zero every bias (linear, conv, norm) in place; used for linearity checks."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    return module
