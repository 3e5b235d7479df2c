"""Encoder, decoder and critic networks for the desk-scale generative model.

The decoder layout is pinned to the matcher toolkit's weight-file contract:
dense (latent -> 32x3x4 base map, ReLU), then three nearest-upsample +
3x3 replicate-padded conv stages with channels 32 -> 16 -> 8 -> 1, ReLU
between stages and a sigmoid at the output (32x24 images).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

LATENT_DIM_DEFAULT = 24
BASE_C, BASE_H, BASE_W = 32, 3, 4
IMG_H, IMG_W = 24, 32


class Decoder(nn.Module):
    def __init__(self, latent_dim: int = LATENT_DIM_DEFAULT):
        super().__init__()
        self.latent_dim = latent_dim
        self.dense = nn.Linear(latent_dim, BASE_C * BASE_H * BASE_W)
        self.conv1 = nn.Conv2d(32, 16, 3, padding=1, padding_mode="replicate")
        self.conv2 = nn.Conv2d(16, 8, 3, padding=1, padding_mode="replicate")
        self.conv3 = nn.Conv2d(8, 1, 3, padding=1, padding_mode="replicate")

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.dense(z)).view(-1, BASE_C, BASE_H, BASE_W)
        h = F.relu(self.conv1(F.interpolate(h, scale_factor=2, mode="nearest")))
        h = F.relu(self.conv2(F.interpolate(h, scale_factor=2, mode="nearest")))
        h = self.conv3(F.interpolate(h, scale_factor=2, mode="nearest"))
        return torch.sigmoid(h)

    def finetune_parameters(self):
        """The last three convolutional layers; everything else stays frozen
        during adversarial fine-tuning."""
        for layer in (self.conv1, self.conv2, self.conv3):
            yield from layer.parameters()


class Encoder(nn.Module):
    """Diagonal-Gaussian posterior over the latent space."""

    def __init__(self, latent_dim: int = LATENT_DIM_DEFAULT):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 16, 3, padding=1, padding_mode="replicate")
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1, padding_mode="replicate")
        self.dense = nn.Linear(32 * 6 * 8, 128)
        self.mu = nn.Linear(128, latent_dim)
        self.logvar = nn.Linear(128, latent_dim)

    def forward(self, x: torch.Tensor):
        h = F.max_pool2d(F.relu(self.conv1(x)), 2)
        h = F.max_pool2d(F.relu(self.conv2(h)), 2)
        h = F.relu(self.dense(h.flatten(1)))
        return self.mu(h), self.logvar(h)


class Critic(nn.Module):
    """Scalar score network for the adversarial fine-tuning stage.

    No normalization layers: the gradient penalty handles the Lipschitz
    constraint.
    """

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1)
        self.dense1 = nn.Linear(32 * 6 * 8, 64)
        self.dense2 = nn.Linear(64, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.avg_pool2d(F.leaky_relu(self.conv1(x), 0.2), 2)
        h = F.avg_pool2d(F.leaky_relu(self.conv2(h), 0.2), 2)
        h = F.leaky_relu(self.dense1(h.flatten(1)), 0.2)
        return self.dense2(h).squeeze(-1)
