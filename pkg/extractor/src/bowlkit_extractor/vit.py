"""Minimal ViT forward pass exposing per-patch attention key features.

Weight names follow the reference DINO ViT checkpoints (``cls_token``,
``pos_embed``, ``patch_embed.proj.*``, ``blocks.N.*``, ``norm.*``), so those
state dicts load directly. The patch-embedding stride is configurable
independently of the 16x16 kernel, producing overlapping patches; position
embeddings are bicubically resampled to the resulting token grid.

Key features for layer L are the per-head key vectors of block L's
attention, concatenated across heads, one vector per (non-class) token.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def qkv_split(self, x):
        b, n, c = x.shape
        qkv = (
            self.qkv(x)
            .reshape(b, n, 3, self.num_heads, c // self.num_heads)
            .permute(2, 0, 3, 1, 4)
        )
        return qkv[0], qkv[1], qkv[2]

    def forward(self, x):
        b, n, c = x.shape
        q, k, v = self.qkv_split(x)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x

    def keys(self, x):
        """Concatenated per-head key vectors for this block's attention."""
        b, n, c = x.shape
        _, k, _ = self.attn.qkv_split(self.norm1(x))
        return k.transpose(1, 2).reshape(b, n, c)


class ViTKeyExtractor(nn.Module):
    """Patch tokenizer plus transformer blocks, stride decoupled from kernel."""

    def __init__(self, embed_dim=384, depth=12, num_heads=6, patch_size=16,
                 stride=8, mlp_ratio=4.0, pos_grid=14):
        super().__init__()
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.embed_dim = embed_dim
        self.patch_size = patch_size
        self.stride = stride
        self.pos_grid = pos_grid
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(
            torch.zeros(1, pos_grid * pos_grid + 1, embed_dim)
        )
        self.patch_embed = nn.Module()
        self.patch_embed.proj = nn.Conv2d(
            3, embed_dim, kernel_size=patch_size, stride=stride
        )
        self.blocks = nn.ModuleList(
            Block(embed_dim, num_heads, mlp_ratio) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(embed_dim, eps=1e-6)

    def grid_shape(self, height, width):
        if height < self.patch_size or width < self.patch_size:
            raise ValueError(
                f"image {width}x{height} smaller than one {self.patch_size}px patch"
            )
        gh = (height - self.patch_size) // self.stride + 1
        gw = (width - self.patch_size) // self.stride + 1
        return gh, gw

    def _resampled_pos_embed(self, gh, gw):
        cls_pos = self.pos_embed[:, :1]
        patch_pos = self.pos_embed[:, 1:]
        if (gh, gw) == (self.pos_grid, self.pos_grid):
            return self.pos_embed
        grid = patch_pos.reshape(
            1, self.pos_grid, self.pos_grid, self.embed_dim
        ).permute(0, 3, 1, 2)
        grid = F.interpolate(
            grid, size=(gh, gw), mode="bicubic", align_corners=False
        )
        flat = grid.permute(0, 2, 3, 1).reshape(1, gh * gw, self.embed_dim)
        return torch.cat([cls_pos, flat], dim=1)

    @torch.no_grad()
    def key_features(self, image, layer):
        """(grid_h, grid_w, dim) key features of ``layer`` for one 3xHxW image."""
        if not 0 <= layer < len(self.blocks):
            raise ValueError(f"layer {layer} outside 0..{len(self.blocks) - 1}")
        self.grid_shape(image.shape[1], image.shape[2])  # raises when too small
        x = self.patch_embed.proj(image.unsqueeze(0))
        _, _, gh, gw = x.shape
        x = x.flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token, x], dim=1)
        x = x + self._resampled_pos_embed(gh, gw)
        for block in self.blocks[:layer]:
            x = block(x)
        keys = self.blocks[layer].keys(x)
        return keys[0, 1:].reshape(gh, gw, self.embed_dim)


def _strip_prefixes(state_dict):
    cleaned = {}
    for key, value in state_dict.items():
        for prefix in ("module.", "backbone."):
            if key.startswith(prefix):
                key = key[len(prefix):]
        cleaned[key] = value
    return cleaned


def load_extractor(checkpoint_path, stride=8, num_heads=6):
    """Build a ViTKeyExtractor sized from a checkpoint and load it strictly.

    Accepts a bare state dict or one nested under ``state_dict`` / ``teacher``.
    """
    payload = torch.load(checkpoint_path, map_location="cpu", weights_only=True)
    for nested in ("state_dict", "teacher", "model"):
        if isinstance(payload, dict) and nested in payload and isinstance(
            payload[nested], dict
        ):
            payload = payload[nested]
    state = _strip_prefixes(payload)
    if "patch_embed.proj.weight" not in state:
        raise ValueError(f"{checkpoint_path}: not a ViT state dict")
    conv = state["patch_embed.proj.weight"]
    embed_dim = conv.shape[0]
    patch_size = conv.shape[2]
    depth = 1 + max(
        int(key.split(".")[1]) for key in state if key.startswith("blocks.")
    )
    hidden = state["blocks.0.mlp.fc1.weight"].shape[0]
    n_pos = state["pos_embed"].shape[1] - 1
    pos_grid = int(math.isqrt(n_pos))
    if pos_grid * pos_grid != n_pos:
        raise ValueError(f"{checkpoint_path}: non-square position grid ({n_pos})")
    model = ViTKeyExtractor(
        embed_dim=embed_dim,
        depth=depth,
        num_heads=num_heads,
        patch_size=patch_size,
        stride=stride,
        mlp_ratio=hidden / embed_dim,
        pos_grid=pos_grid,
    )
    model.load_state_dict(state, strict=True)
    model.eval()
    return model


def random_checkpoint(path, seed=0, embed_dim=384, depth=12, num_heads=6,
                      patch_size=16, pos_grid=14):
    """Write a seeded random state dict with reference key names (for tests)."""
    generator = torch.Generator().manual_seed(seed)
    model = ViTKeyExtractor(
        embed_dim=embed_dim, depth=depth, num_heads=num_heads,
        patch_size=patch_size, pos_grid=pos_grid,
    )
    state = model.state_dict()
    for key in state:
        state[key] = 0.02 * torch.randn(
            state[key].shape, generator=generator, dtype=torch.float32
        )
    torch.save(state, path)
    return path
