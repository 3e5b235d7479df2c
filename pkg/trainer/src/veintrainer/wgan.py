"""Adversarial fine-tuning of the decoder's last three convolutional layers.

The critic minimizes E[D(generated)] - E[D(real)] plus the gradient penalty
lambda * E[(||grad_xhat D(xhat)||_2 - 1)^2], with xhat sampled uniformly on
segments between real and generated batches.  Generated samples are
reconstructions (real images passed through the frozen encoder and the
decoder).  The encoder and the decoder's dense layer stay frozen; only the
three conv layers receive updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .models import Critic, Decoder, Encoder


@dataclass
class WganConfig:
    penalty_weight: float = 10.0
    critic_steps: int = 5
    critic_lr: float = 1e-4
    decoder_lr: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.penalty_weight < 0:
            raise ValueError("penalty weight must be >= 0")


def gradient_penalty(critic, real: torch.Tensor, fake: torch.Tensor, gen: torch.Generator):
    """lambda-free penalty term E[(||grad D(xhat)|| - 1)^2] on interpolates."""
    alpha = torch.rand(real.shape[0], 1, 1, 1, generator=gen)
    xhat = (alpha * real + (1.0 - alpha) * fake).requires_grad_(True)
    scores = critic(xhat)
    grads = torch.autograd.grad(scores.sum(), xhat, create_graph=True)[0]
    norms = grads.flatten(1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def _reconstruct(encoder: Encoder, decoder: Decoder, x: torch.Tensor) -> torch.Tensor:
    mu, _ = encoder(x)   # posterior mean; no sampling during fine-tuning
    return decoder(mu)


def critic_gap(critic, encoder, decoder, images: torch.Tensor) -> float:
    """E[D(real)] - E[D(generated)] over the whole dataset."""
    with torch.no_grad():
        fake = _reconstruct(encoder, decoder, images)
        return float(critic(images).mean() - critic(fake).mean())


def finetune_wgan_gp(encoder: Encoder, decoder: Decoder, images: torch.Tensor, cfg: WganConfig):
    """Returns (decoder, critic, history); mutates only the decoder convs."""
    torch.manual_seed(cfg.seed)
    critic = Critic()
    for p in encoder.parameters():
        p.requires_grad_(False)
    for p in decoder.parameters():
        p.requires_grad_(False)
    tuned = list(decoder.finetune_parameters())
    for p in tuned:
        p.requires_grad_(True)

    opt_c = torch.optim.Adam(critic.parameters(), lr=cfg.critic_lr, betas=(0.5, 0.9))
    opt_g = torch.optim.Adam(tuned, lr=cfg.decoder_lr, betas=(0.5, 0.9))
    gen = torch.Generator().manual_seed(cfg.seed)
    n = images.shape[0]
    history = {"critic_loss": [], "generator_loss": []}

    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        ep_c, ep_g, gsteps = 0.0, 0.0, 0
        batch_starts = list(range(0, n, cfg.batch_size))
        i = 0
        while i < len(batch_starts):
            # several critic steps per generator step
            for _ in range(cfg.critic_steps):
                if i >= len(batch_starts):
                    break
                x = images[perm[batch_starts[i] : batch_starts[i] + cfg.batch_size]]
                i += 1
                with torch.no_grad():
                    fake = _reconstruct(encoder, decoder, x)
                loss_c = (
                    critic(fake).mean()
                    - critic(x).mean()
                    + cfg.penalty_weight * gradient_penalty(critic, x, fake, gen)
                )
                if not torch.isfinite(loss_c):
                    raise RuntimeError(f"critic loss diverged: {loss_c}")
                opt_c.zero_grad()
                loss_c.backward()
                opt_c.step()
                ep_c += float(loss_c.detach())
            x = images[perm[batch_starts[max(i - 1, 0)] : batch_starts[max(i - 1, 0)] + cfg.batch_size]]
            fake = _reconstruct(encoder, decoder, x)
            loss_g = -critic(fake).mean()
            if not torch.isfinite(loss_g):
                raise RuntimeError(f"generator loss diverged: {loss_g}")
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            ep_g += float(loss_g.detach())
            gsteps += 1
        history["critic_loss"].append(ep_c / max(1, i))
        history["generator_loss"].append(ep_g / max(1, gsteps))
    return decoder, critic, history
