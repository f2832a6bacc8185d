"""
Variational-information-bottleneck gate shared by the item router and the
user router.

The trunk reads an input vector, produces a diagonal Gaussian q(z_r | x)
through mean and log-variance heads, and a scalar gate head turns a draw
of z_r into a weight in [0, 1]. In train mode z_r is reparameterized
(z_r = m + exp(s / 2) * eps); in eval mode z_r is the mean, so routing is
deterministic.
"""

import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ShapeError
from nn_core import DTYPE, LoraLinear, RngSeed

# Configure logging
logger = logging.getLogger(__name__)


def vib_kl(m, s):
    """
    Closed-form KL of N(m, diag(exp(s))) to the standard normal.

    Args:
        m (Tensor): Mean vector (..., d_r)
        s (Tensor): Log-variance vector, same shape as m

    Returns:
        Tensor: 0.5 * sum_j (m_j^2 + exp(s_j) - 1 - s_j) over the last axis
    """
    m = torch.as_tensor(m, dtype=DTYPE)
    s = torch.as_tensor(s, dtype=DTYPE)
    if m.shape != s.shape:
        raise ShapeError(f"Mean shape {tuple(m.shape)} does not match log-variance shape {tuple(s.shape)}")
    return 0.5 * (m.pow(2) + torch.exp(s) - 1.0 - s).sum(-1)


class VibRouter(nn.Module):
    """Two-layer perceptron trunk, Gaussian heads and a sigmoid gate."""

    def __init__(self, input_dim, hidden=128, latent_dim=16, generator=None):
        super().__init__()
        self.input_dim = input_dim
        self.hidden = hidden
        self.latent_dim = latent_dim
        self.trunk1 = LoraLinear(input_dim, hidden, generator=generator)
        self.trunk2 = LoraLinear(hidden, hidden, generator=generator)
        self.mean_head = LoraLinear(hidden, latent_dim, generator=generator)
        self.logvar_head = LoraLinear(hidden, latent_dim, generator=generator, zero_init=True)
        self.gate = LoraLinear(latent_dim, 1, generator=generator)

    def spec(self):
        return {'input_dim': self.input_dim, 'hidden': self.hidden, 'latent_dim': self.latent_dim}

    def posterior(self, x):
        h = F.gelu(self.trunk2(F.gelu(self.trunk1(x))))
        return self.mean_head(h), self.logvar_head(h)

    def forward(self, x, noise=None, generator=None):
        """
        Args:
            x (Tensor): (..., input_dim)
            noise (Tensor, optional): Fixed eps for the train-mode draw
            generator (torch.Generator, optional): Source of eps when noise is omitted

        Returns:
            tuple: (alpha (...,), m, s)
        """
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"Router expects input dimension {self.input_dim}, got {x.shape[-1]}")
        m, s = self.posterior(x)
        if self.training:
            if noise is None:
                noise = torch.randn(m.shape, generator=generator, dtype=DTYPE)
            z_r = m + torch.exp(0.5 * s) * noise
        else:
            z_r = m
        alpha = torch.sigmoid(self.gate(z_r)).squeeze(-1)
        return alpha, m, s


def build_router(input_dim, hidden, latent_dim, seed, label):
    rng = RngSeed(seed, f"{label}/init")
    rng.seed_torch()
    return VibRouter(input_dim, hidden, latent_dim, generator=rng.generator())
