"""Capacity-controlled VAE training stage.

The objective is reconstruction error plus gamma * |KL - C|, with a diagonal
Gaussian posterior, the standard reparameterized sampling, and the capacity
C ramping linearly from 0 to its maximum over a fixed number of steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .models import Decoder, Encoder


@dataclass
class BvaeConfig:
    latent_dim: int = 24
    gamma: float = 2.0
    c_max: float = 10.0           # nats
    c_warmup_steps: int = 10000
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0 or self.c_max < 0:
            raise ValueError("gamma and c_max must be >= 0")


def kl_diag_gaussian(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(q || N(0, I)) per batch item, summed over latent dimensions."""
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=1)


def bvae_loss(recon, x, mu, logvar, gamma, capacity):
    """Reconstruction + gamma * |KL - C|; returns (loss, recon term, KL mean)."""
    rec = (recon - x).pow(2).flatten(1).sum(dim=1).mean()
    kl = kl_diag_gaussian(mu, logvar).mean()
    return rec + gamma * (kl - capacity).abs(), rec, kl


def train_bvae(images: torch.Tensor, cfg: BvaeConfig):
    """Returns (encoder, decoder, history) trained on (N, 1, 24, 32) images."""
    torch.manual_seed(cfg.seed)
    encoder = Encoder(cfg.latent_dim)
    decoder = Decoder(cfg.latent_dim)
    opt = torch.optim.Adam(
        list(encoder.parameters()) + list(decoder.parameters()), lr=cfg.lr
    )
    n = images.shape[0]
    gen = torch.Generator().manual_seed(cfg.seed)
    history = {"loss": [], "reconstruction": [], "kl": []}
    step = 0
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        ep_loss, ep_rec, ep_kl, batches = 0.0, 0.0, 0.0, 0
        for start in range(0, n, cfg.batch_size):
            x = images[perm[start : start + cfg.batch_size]]
            mu, logvar = encoder(x)
            std = (0.5 * logvar).exp()
            z = mu + std * torch.randn(mu.shape, generator=gen)
            recon = decoder(z)
            capacity = cfg.c_max * min(1.0, step / max(1, cfg.c_warmup_steps))
            loss, rec, kl = bvae_loss(recon, x, mu, logvar, cfg.gamma, capacity)
            if not torch.isfinite(loss):
                raise RuntimeError(f"VAE training diverged at step {step}: loss {loss}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            ep_loss += float(loss.detach())
            ep_rec += float(rec.detach())
            ep_kl += float(kl.detach())
            batches += 1
            step += 1
        history["loss"].append(ep_loss / batches)
        history["reconstruction"].append(ep_rec / batches)
        history["kl"].append(ep_kl / batches)
    return encoder, decoder, history
