"""Patch image encoder and token text encoder shared by both models."""

from __future__ import annotations

import math

import numpy as np
import torch
from PIL import Image
from torch import nn


class ChannelError(ValueError):
    pass


def prepare_image(pixels: np.ndarray, size: int) -> torch.Tensor:
    """Resize an ``(H, W, 3)`` uint8 image to ``size x size`` and return a
    ``(3, size, size)`` float64 tensor centered around zero."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ChannelError(f"expected an (H, W, 3) RGB image, got shape {pixels.shape}")
    if pixels.shape[:2] != (size, size):
        pixels = np.asarray(Image.fromarray(pixels).resize((size, size), Image.BOX))
    arr = pixels.astype(np.float64) / 255.0 - 0.5
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


class PatchEncoder(nn.Module):
    """Linear patch embedding plus learned position embeddings."""

    def __init__(self, image_size: int, patch_size: int, d: int):
        super().__init__()
        if image_size % patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        self.image_size = image_size
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.num_patches = self.grid ** 2
        self.proj = nn.Linear(3 * patch_size * patch_size, d)
        self.pos = nn.Parameter(torch.randn(self.num_patches, d) * 0.1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, 3, S, S)`` -> ``(B, num_patches, d)``; patches in row-major order."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.shape[1] != 3:
            raise ChannelError(f"expected 3 channels, got {images.shape[1]}")
        p = self.patch_size
        b = images.shape[0]
        patches = images.unfold(2, p, p).unfold(3, p, p)  # B, 3, g, g, p, p
        patches = patches.permute(0, 2, 3, 1, 4, 5).reshape(b, self.num_patches, -1)
        return self.proj(patches) + self.pos


def sinusoidal_positions(max_len: int, d: int) -> torch.Tensor:
    """Fixed sine/cosine position table ``(max_len, d)``."""
    pos = torch.arange(max_len, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    table = torch.zeros(max_len, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: d // 2])
    return table


class TokenEncoder(nn.Module):
    """Token embeddings plus position embeddings, ``learned`` or fixed ``sinusoidal``."""

    def __init__(self, vocab_size: int, max_len: int, d: int, positions: str = "learned"):
        super().__init__()
        self.max_len = max_len
        self.embed = nn.Embedding(vocab_size, d, padding_idx=0)
        if positions == "learned":
            self.pos = nn.Parameter(torch.randn(max_len, d) * 0.1)
        elif positions == "sinusoidal":
            self.register_buffer("pos", sinusoidal_positions(max_len, d), persistent=False)
        else:
            raise ValueError(f"positions must be 'learned' or 'sinusoidal', got {positions!r}")
        nn.init.normal_(self.embed.weight, std=0.5)
        with torch.no_grad():
            self.embed.weight[0].zero_()

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.embed(ids) + self.pos[: ids.shape[-1]].to(self.embed.weight.dtype)


def pad_ids(sequences, max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad/truncate id lists to ``max_len``; returns ``(ids, mask)`` with mask True on real tokens."""
    ids = torch.zeros(len(sequences), max_len, dtype=torch.long)
    mask = torch.zeros(len(sequences), max_len, dtype=torch.bool)
    for i, seq in enumerate(sequences):
        seq = list(seq)[:max_len]
        if not seq:
            raise ValueError("empty token sequence")
        ids[i, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        mask[i, : len(seq)] = True
    return ids, mask
