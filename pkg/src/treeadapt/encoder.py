"""Hierarchical shifted-window transformer encoder shared by both domains."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class EncoderConfig:
    patch_size: int = 4
    embed_dims: tuple = (32, 64, 128, 256)
    depths: tuple = (2, 2, 2, 2)
    window_size: int = 4
    num_heads: tuple = (2, 4, 4, 8)
    mlp_ratio: float = 4.0
    profile: str = "toy"

    def __post_init__(self):
        self.embed_dims = tuple(int(v) for v in self.embed_dims)
        self.depths = tuple(int(v) for v in self.depths)
        self.num_heads = tuple(int(v) for v in self.num_heads)
        if len(self.embed_dims) != 4 or len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ValueError("embed_dims, depths and num_heads need one entry per scale (4)")
        if min(self.depths) < 1:
            raise ValueError("every scale needs at least one layer")
        for c, h in zip(self.embed_dims, self.num_heads):
            if c % h:
                raise ValueError(f"embed dim {c} not divisible by {h} heads")

    @classmethod
    def paper(cls) -> "EncoderConfig":
        return cls(embed_dims=(128, 256, 512, 1024), depths=(2, 2, 18, 2), window_size=7,
                   num_heads=(4, 8, 16, 32), profile="paper")

    @classmethod
    def toy(cls) -> "EncoderConfig":
        return cls()

    @classmethod
    def for_profile(cls, name: str) -> "EncoderConfig":
        if name not in ("paper", "toy"):
            raise ValueError(f"unknown profile {name!r}")
        return getattr(cls, name)()


@dataclass
class FeaturePyramid:
    """``feats[i][l]`` holds layer ``l`` of scale ``i`` (0-based), each B x C x H x W."""

    feats: list = field(default_factory=list)

    def layer(self, scale: int, layer: int) -> torch.Tensor:
        """1-based accessor matching the usual F_{i,l} numbering."""
        return self.feats[scale - 1][layer - 1]

    def scale(self, scale: int) -> list:
        return self.feats[scale - 1]

    def last(self, scale: int) -> torch.Tensor:
        return self.feats[scale - 1][-1]

    def __len__(self):
        return sum(len(s) for s in self.feats)


def window_partition(x, ws):
    B, H, W, C = x.shape
    x = x.view(B, H // ws, ws, W // ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, C)


def window_reverse(windows, ws, H, W):
    C = windows.shape[-1]
    x = windows.view(-1, H // ws, W // ws, ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def relative_position_index(ws: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel = rel + (ws - 1)
    return rel[..., 0] * (2 * ws - 1) + rel[..., 1]


class WindowAttention(nn.Module):
    """Multi-head self attention inside square windows, with relative position bias."""

    def __init__(self, dim, num_heads, window_size):
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, num_heads))
        self.register_buffer("relative_position_index", relative_position_index(window_size), persistent=False)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self.keep_attn = False
        self.last_attn = None

    def position_bias(self):
        n = self.window_size**2
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        return bias.view(n, n, -1).permute(2, 0, 1)

    def forward(self, x, mask=None):
        # x: (num_windows*B, N, C); mask: (num_windows, N, N) additive
        Bw, N, C = x.shape
        qkv = self.qkv(x).reshape(Bw, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1) + self.position_bias().unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(Bw // nw, nw, self.num_heads, N, N) + mask.unsqueeze(1).unsqueeze(0)
            attn = attn.view(Bw, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        if self.keep_attn:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock(nn.Module):
    """LN -> (shifted) window MSA -> residual -> LN -> MLP -> residual, on B x H x W x C tokens."""

    def __init__(self, dim, num_heads, window_size, shift, mlp_ratio=4.0):
        super().__init__()
        self.window_size = window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def _mask(self, Hp, Wp, H, W, shift, device, dtype):
        ws = self.window_size
        # region ids for the shifted layout; padded cells get their own id so they are never attended
        img = torch.zeros(1, Hp, Wp, 1, device=device)
        if shift:
            cnt = 0
            for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
                for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
                    img[:, hs, wsl, :] = cnt
                    cnt += 1
        valid = torch.zeros(1, Hp, Wp, 1, device=device)
        valid[:, :H, :W] = 1
        if shift:
            valid = torch.roll(valid, shifts=(-shift, -shift), dims=(1, 2))
        if not shift and Hp == H and Wp == W:
            return None
        ids = window_partition(img, ws).squeeze(-1)
        ok = window_partition(valid, ws).squeeze(-1)
        same = ids.unsqueeze(1) == ids.unsqueeze(2)
        keep = same & (ok.unsqueeze(1) > 0)
        mask = torch.zeros(keep.shape, device=device, dtype=dtype)
        return mask.masked_fill(~keep, -100.0)

    def forward(self, x):
        B, H, W, C = x.shape
        ws = self.window_size
        shortcut = x
        x = self.norm1(x)
        pad_b, pad_r = (-H) % ws, (-W) % ws
        x = F.pad(x, (0, 0, 0, pad_r, 0, pad_b))
        Hp, Wp = H + pad_b, W + pad_r
        shift = self.shift if (Hp > ws or Wp > ws) else 0
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        mask = self._mask(Hp, Wp, H, W, shift, x.device, x.dtype)
        win = self.attn(window_partition(x, ws), mask)
        x = window_reverse(win, ws, Hp, Wp)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        x = shortcut + x[:, :H, :W]
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    """Linear projection of non-overlapping p x p x 3 patches."""

    def __init__(self, patch_size, dim):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, img):
        # img: B x 3 x H x W -> B x H/p x W/p x C
        p = self.patch_size
        H, W = img.shape[-2:]
        img = F.pad(img, (0, (-W) % p, 0, (-H) % p))
        return self.proj(img).permute(0, 2, 3, 1)


class PatchMerging(nn.Module):
    def __init__(self, dim, out_dim):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, out_dim, bias=False)

    def forward(self, x):
        B, H, W, C = x.shape
        x = F.pad(x, (0, 0, 0, W % 2, 0, H % 2))
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x))


class Encoder(nn.Module):
    """Four-scale encoder; keeps every block output of every scale."""

    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or EncoderConfig()
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.embed_dims[0])
        self.merges = nn.ModuleList(
            [PatchMerging(cfg.embed_dims[i], cfg.embed_dims[i + 1]) for i in range(3)])
        self.stages = nn.ModuleList()
        for dim, depth, heads in zip(cfg.embed_dims, cfg.depths, cfg.num_heads):
            self.stages.append(nn.ModuleList([
                SwinBlock(dim, heads, cfg.window_size, 0 if j % 2 == 0 else cfg.window_size // 2, cfg.mlp_ratio)
                for j in range(depth)]))
        self.apply(_init_weights)

    def forward(self, img: torch.Tensor) -> FeaturePyramid:
        """``img`` is B x 3 x H x W."""
        x = self.patch_embed(img)
        feats = []
        for i, blocks in enumerate(self.stages):
            if i > 0:
                x = self.merges[i - 1](x)
            layers = []
            for blk in blocks:
                x = blk(x)
                layers.append(x.permute(0, 3, 1, 2))
            feats.append(layers)
        return FeaturePyramid(feats)

    def load_weights(self, state: dict, strict: bool = False) -> tuple[list, list]:
        """Copy externally trained weights into matching parameters.

        Entries whose name or shape does not match are skipped (or rejected when
        ``strict``). Returns ``(loaded, skipped)`` key lists.
        """
        own = self.state_dict()
        loaded, skipped = [], []
        for k, v in state.items():
            v = torch.as_tensor(v)
            if k in own and own[k].shape == v.shape:
                loaded.append(k)
            else:
                skipped.append(k)
        missing = sorted(set(own) - set(loaded))
        if strict and (skipped or missing):
            raise ValueError(f"weights do not match encoder: skipped={skipped[:5]} missing={missing[:5]}")
        with torch.no_grad():
            for k in loaded:
                own[k].copy_(torch.as_tensor(state[k]))
        return loaded, skipped


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def patch_embed(image, embed: PatchEmbed) -> torch.Tensor:
    """Functional form on an H x W x 3 array; returns the (H/p) x (W/p) x C token map."""
    img = torch.as_tensor(image, dtype=embed.proj.weight.dtype).permute(2, 0, 1).unsqueeze(0)
    return embed(img)[0]


def htfe_forward(image, encoder: Encoder) -> FeaturePyramid:
    """Encode an H x W x 3 array (or B x 3 x H x W tensor)."""
    if not torch.is_tensor(image) or image.dim() == 3:
        image = torch.as_tensor(image, dtype=next(encoder.parameters()).dtype).permute(2, 0, 1).unsqueeze(0)
    return encoder(image)
