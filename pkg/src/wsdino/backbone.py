"""ViT encoder with a DINO-style projection head and class-token attention export.

Parameter names follow the public DINO ViT layout (``patch_embed.proj``, ``blocks.N.attn.qkv``,
...) so externally trained backbone weights load by name.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 8
    embed_dim: int = 384
    depth: int = 12
    n_heads: int = 6
    mlp_ratio: float = 4.0
    in_chans: int = 3
    base_size: int = 224
    out_dim: int = 65536
    head_layers: int = 3
    head_hidden: int = 2048
    head_bottleneck: int = 256
    norm_last_layer: bool = True

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ParameterError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.base_size % self.patch_size:
            raise ParameterError("base_size must be a multiple of patch_size")
        if self.head_layers < 1:
            raise ParameterError("head_layers must be >= 1")

    @classmethod
    def full(cls):
        """ViT-S/8 with the default DINO head."""
        return cls()

    @classmethod
    def toy(cls, **overrides):
        params = dict(patch_size=8, embed_dim=64, depth=4, n_heads=4, base_size=32,
                      out_dim=256, head_hidden=512, head_bottleneck=64)
        params.update(overrides)
        return cls(**params)

    @classmethod
    def preset(cls, name, **overrides):
        if name == "full":
            return cls(**overrides)
        if name == "toy":
            return cls.toy(**overrides)
        raise ParameterError(f"unknown ViT preset {name!r}")

    def to_dict(self):
        return asdict(self)


class PatchEmbed(nn.Module):
    def __init__(self, patch_size, in_chans, embed_dim):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2)


class Attention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.scale = (dim // n_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, c // self.n_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q * self.scale) @ k.transpose(-2, -1)).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out), attn


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim, n_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, return_attention=False):
        y, attn = self.attn(self.norm1(x))
        if return_attention:
            return attn
        x = x + y
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.in_chans, cfg.embed_dim)
        n_patches = (cfg.base_size // cfg.patch_size) ** 2
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_patches + 1, cfg.embed_dim))
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.embed_dim, eps=1e-6)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.apply(_init_weights)

    def interpolate_pos_encoding(self, h, w):
        """Bicubically resample the patch position embeddings to an ``h x w`` token grid."""
        n_base = self.pos_embed.shape[1] - 1
        side = int(math.sqrt(n_base))
        if h == side and w == side:
            return self.pos_embed
        cls_pos, patch_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        grid = patch_pos.reshape(1, side, side, -1).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(h, w), mode="bicubic", align_corners=False)
        return torch.cat([cls_pos, grid.permute(0, 2, 3, 1).reshape(1, h * w, -1)], dim=1)

    def prepare_tokens(self, x):
        x = to_input_planes(x, self.cfg.in_chans)
        b, _, height, width = x.shape
        p = self.cfg.patch_size
        if height % p or width % p:
            raise ShapeError(f"input {height}x{width} not divisible by patch size {p}")
        tokens = self.patch_embed(x)
        tokens = torch.cat([self.cls_token.expand(b, -1, -1), tokens], dim=1)
        return tokens + self.interpolate_pos_encoding(height // p, width // p)

    def forward(self, x):
        x = self.prepare_tokens(x)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)[:, 0]

    def get_last_selfattention(self, x):
        x = self.prepare_tokens(x)
        for blk in self.blocks[:-1]:
            x = blk(x)
        return self.blocks[-1](x, return_attention=True)


class DINOHead(nn.Module):
    """MLP -> L2-normalised bottleneck -> unit-norm linear layer onto ``out_dim`` logits."""

    def __init__(self, in_dim, out_dim, n_layers=3, hidden=2048, bottleneck=256, norm_last_layer=True):
        super().__init__()
        if n_layers == 1:
            self.mlp = nn.Linear(in_dim, bottleneck)
        else:
            layers = [nn.Linear(in_dim, hidden), nn.GELU()]
            for _ in range(n_layers - 2):
                layers += [nn.Linear(hidden, hidden), nn.GELU()]
            layers.append(nn.Linear(hidden, bottleneck))
            self.mlp = nn.Sequential(*layers)
        self.apply(_init_weights)
        self.last_layer = nn.Linear(bottleneck, out_dim, bias=False)
        # weight-norm gain; frozen at 1 when norm_last_layer
        self.last_gain = nn.Parameter(torch.ones(out_dim, 1), requires_grad=not norm_last_layer)

    def forward(self, x):
        x = F.normalize(self.mlp(x), dim=-1, p=2)
        return F.linear(x, self.last_gain * F.normalize(self.last_layer.weight, dim=1))


class WSDinoNet(nn.Module):
    """Backbone + head; ``forward`` takes a list of crops and groups equal resolutions."""

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = VisionTransformer(cfg)
        self.head = DINOHead(cfg.embed_dim, cfg.out_dim, cfg.head_layers, cfg.head_hidden, cfg.head_bottleneck,
                            cfg.norm_last_layer)

    def forward(self, crops):
        if isinstance(crops, torch.Tensor):
            crops = [crops]
        sizes = torch.tensor([c.shape[-1] for c in crops])
        ends = torch.cumsum(torch.unique_consecutive(sizes, return_counts=True)[1], 0).tolist()
        feats, start = [], 0
        for end in ends:
            feats.append(self.backbone(torch.cat(crops[start:end])))
            start = end
        return self.head(torch.cat(feats))

    def encode(self, x):
        """Return ``(cls_embedding, head_output)`` for a batch of crops."""
        cls = self.backbone(x)
        return cls, self.head(cls)


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def to_input_planes(x, in_chans=3):
    """Accept ``(H, W)``, ``(B, H, W)`` or ``(B, C, H, W)``; replicate grayscale to ``in_chans`` planes."""
    x = torch.as_tensor(x, dtype=torch.float32) if not isinstance(x, torch.Tensor) else x
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.shape[1] == 1 and in_chans > 1:
        x = x.expand(-1, in_chans, -1, -1)
    return x


def encode(image_crop, model: WSDinoNet):
    with torch.no_grad():
        cls, head = model.encode(image_crop)
    return cls, head


@dataclass
class AttentionMap:
    """Last-layer class-token attention, ``weights`` shaped ``heads x H/p x W/p``.

    ``cls_rows`` keeps the full softmax row (class token included) for each head.
    """

    weights: np.ndarray
    cls_rows: np.ndarray

    def mean_map(self):
        return self.weights.mean(axis=0)


def attention_maps(image, model: WSDinoNet) -> AttentionMap:
    x = to_input_planes(image, model.cfg.in_chans)
    if x.shape[0] != 1:
        raise ShapeError("attention_maps takes a single image")
    p = model.cfg.patch_size
    h, w = x.shape[-2] // p, x.shape[-1] // p
    with torch.no_grad():
        attn = model.backbone.get_last_selfattention(x)
    rows = attn[0, :, 0, :].double().numpy()
    return AttentionMap(weights=rows[:, 1:].reshape(-1, h, w), cls_rows=rows)


def load_pretrained_backbone(model: WSDinoNet, state_dict, name_map=None, strict=False):
    """Load external backbone tensors, stripping ``module.``/``backbone.`` prefixes.

    ``name_map`` optionally renames keys (source name -> our name) before loading.
    Returns the ``(missing, unexpected)`` key lists from ``load_state_dict``.
    """
    cleaned = {}
    for key, value in state_dict.items():
        for prefix in ("module.", "backbone."):
            if key.startswith(prefix):
                key = key[len(prefix):]
        if name_map:
            key = name_map.get(key, key)
        cleaned[key] = value
    pos = cleaned.get("pos_embed")
    if pos is not None and pos.shape != model.backbone.pos_embed.shape:
        side = int(math.sqrt(pos.shape[1] - 1))
        target = int(math.sqrt(model.backbone.pos_embed.shape[1] - 1))
        grid = pos[:, 1:].reshape(1, side, side, -1).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(target, target), mode="bicubic", align_corners=False)
        cleaned["pos_embed"] = torch.cat([pos[:, :1], grid.permute(0, 2, 3, 1).reshape(1, target * target, -1)], 1)
    return model.backbone.load_state_dict(cleaned, strict=strict)
