"""Conditional image generator for the GAN-style attack (an attacker-side tool)."""

from __future__ import annotations

import torch
from torch import nn


class ConditionalGenerator(nn.Module):
    """G(z|c): class embedding joined to z, one projection, two upsampling stages, sigmoid."""

    def __init__(self, n_classes: int, image_shape: tuple[int, int, int], latent_dim: int = 64,
                 embed_dim: int = 16, width: int = 32) -> None:
        super().__init__()
        channels, height, width_px = image_shape
        if height % 4 or width_px % 4:
            raise ValueError("image sides must be divisible by 4")
        self.latent_dim = latent_dim
        self.n_classes = n_classes
        self.image_shape = image_shape
        self._base = (width * 2, height // 4, width_px // 4)
        self.embed = nn.Embedding(n_classes, embed_dim)
        self.project = nn.Sequential(nn.Linear(latent_dim + embed_dim, width * 2 * (height // 4) * (width_px // 4)), nn.ReLU())
        self.up = nn.Sequential(
            nn.ConvTranspose2d(width * 2, width, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(width, channels, 4, stride=2, padding=1),
        )

    def forward(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        h = self.project(torch.cat([z, self.embed(c)], dim=1))
        return torch.sigmoid(self.up(h.view(len(z), *self._base)))


def diversity_loss(images: torch.Tensor, z: torch.Tensor, cap: float = 1.0) -> torch.Tensor:
    """Mode-seeking term for a batch whose halves share classes pairwise.

    Ratio of mean absolute image distance to mean absolute latent distance,
    capped, negated so that minimising it spreads the outputs apart.
    """
    half = len(images) // 2
    if half == 0:
        return images.sum() * 0.0
    d_img = (images[:half] - images[half : 2 * half]).abs().flatten(1).mean(1)
    d_z = (z[:half] - z[half : 2 * half]).abs().mean(1).clamp_min(1e-8)
    return -(d_img / d_z).clamp(max=cap).mean()
