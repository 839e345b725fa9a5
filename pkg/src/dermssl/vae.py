"""Variational autoencoder around a configurable convolutional encoder."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbones import Backbone, BackboneSpec, build_decoder, build_encoder, init_weights
from .errors import ShapeError

LATENT_DIM = 256


@dataclass
class LatentStats:
    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        self.mu = torch.as_tensor(self.mu)
        self.logvar = torch.as_tensor(self.logvar)
        if self.mu.shape != self.logvar.shape:
            raise ShapeError("latent stats", tuple(self.mu.shape), tuple(self.logvar.shape))

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[-1]


@dataclass
class ElboTerms:
    recon: torch.Tensor
    kl: torch.Tensor
    beta: float
    total: torch.Tensor

    def item(self) -> dict[str, float]:
        return {
            "recon": float(self.recon),
            "kl": float(self.kl),
            "beta": float(self.beta),
            "total": float(self.total),
        }


class VAE(nn.Module):
    """Encoder, affine mu/logvar heads on the pooled feature, mirrored decoder."""

    def __init__(self, spec: BackboneSpec, latent_dim: int = LATENT_DIM):
        super().__init__()
        self.spec = spec
        self.latent_dim = latent_dim
        self.encoder: Backbone = build_encoder(spec)
        self.fc_mu = nn.Linear(spec.feature_dim, latent_dim)
        self.fc_logvar = nn.Linear(spec.feature_dim, latent_dim)
        init_weights(self.fc_mu)
        init_weights(self.fc_logvar)
        self.decoder = build_decoder(spec, latent_dim)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (3, self.spec.image_size, self.spec.image_size)

    def encode(self, x: torch.Tensor) -> LatentStats:
        h = self.encoder.forward_features(x)
        return LatentStats(self.fc_mu(h), self.fc_logvar(h))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError("latent vector", f"(N, {self.latent_dim})", tuple(z.shape))
        return self.decoder(z)

    def forward(self, x: torch.Tensor, noise: torch.Tensor | None = None):
        stats = self.encode(x)
        if noise is None:
            noise = torch.randn_like(stats.mu) if self.training else torch.zeros_like(stats.mu)
        z = reparameterize(stats, noise)
        return self.decode(z), stats


def encode(image: torch.Tensor, model: VAE) -> LatentStats:
    """Latent statistics for one ``(3, H, W)`` image or a batch."""
    single = image.dim() == 3
    x = image.unsqueeze(0) if single else image
    stats = model.encode(x)
    if single:
        return LatentStats(stats.mu[0], stats.logvar[0])
    return stats


def decode(z: torch.Tensor, model: VAE) -> torch.Tensor:
    single = z.dim() == 1
    out = model.decode(z.unsqueeze(0) if single else z)
    return out[0] if single else out


def reparameterize(stats: LatentStats, noise: torch.Tensor) -> torch.Tensor:
    """``mu + exp(logvar / 2) * noise``."""
    noise = torch.as_tensor(noise, dtype=stats.mu.dtype)
    if noise.shape != stats.mu.shape:
        raise ShapeError("noise", tuple(stats.mu.shape), tuple(noise.shape))
    return stats.mu + torch.exp(0.5 * stats.logvar) * noise


def kl_divergence(stats: LatentStats) -> torch.Tensor:
    """KL(q(z|x) || N(0, I)) summed over latent dims, averaged over the batch."""
    mu, logvar = stats.mu, stats.logvar
    if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
        raise ValueError("latent stats must be finite")
    per_dim = 1 + logvar - mu.pow(2) - logvar.exp()
    kl = -0.5 * per_dim.sum(dim=-1)
    return kl.mean() if kl.dim() else kl


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    x, x_hat = torch.as_tensor(x), torch.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError("reconstruction", tuple(x.shape), tuple(x_hat.shape))
    return (x_hat - x).pow(2).mean()


def beta_schedule(epoch: int, warmup_epochs: int, ceiling: float = 1.0) -> float:
    """Linear KL warm-up: 0 at epoch 0, ``ceiling`` from ``warmup_epochs`` on."""
    if warmup_epochs < 1:
        raise ValueError("warmup_epochs must be >= 1")
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return ceiling * min(epoch / warmup_epochs, 1.0)


def elbo_loss(x, x_hat, stats: LatentStats, beta: float) -> ElboTerms:
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    recon = reconstruction_loss(x, x_hat)
    kl = kl_divergence(stats)
    return ElboTerms(recon, kl, beta, recon + beta * kl)
