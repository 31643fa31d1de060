"""Training objectives for noisy-feature classification.

The main loss is a categorical negative log-likelihood on the noise-corrupted
feature plus a weighted KL term that pushes individual feature dimensions
toward zero. The KL to the log-uniform prior has no closed form; the standard
three-constant sigmoid fit is used, with the additive constant dropped (it
does not affect optimization). Natural logarithms throughout, so the beta
values quoted for this codebase assume nats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .channel import transmit
from .errors import ModelContractViolation


@dataclass(frozen=True)
class KlConstants:
    """Fixed constants of the sigmoid fit to the log-uniform KL; never trained."""

    k1: float = 0.63576
    k2: float = 1.87320
    k3: float = 1.48695


DEFAULT_KL_CONSTANTS = KlConstants()


def kl_log_uniform(z: torch.Tensor, sigma2, constants: KlConstants = DEFAULT_KL_CONSTANTS) -> torch.Tensor:
    """Per-dimension KL between N(z, sigma2) and the log-uniform prior.

    Returns -[k1 * S(k2 + k3 * log alpha) - 0.5 * log(1 + 1/alpha)] with
    alpha = sigma2 / z^2, elementwise over ``z``. The additive constant of
    the approximation is dropped. Exact zeros short-circuit to the analytic
    limit -k1, which is also the global minimum; the value grows
    monotonically in |z|.

    ``sigma2`` may be a scalar or a per-row tensor of shape (batch,) or
    (batch, 1) when ``z`` is a (batch, n) matrix.
    """
    sigma2_t = torch.as_tensor(sigma2, dtype=z.dtype, device=z.device)
    if sigma2_t.dim() == 1 and z.dim() == 2 and sigma2_t.shape[0] == z.shape[0]:
        sigma2_t = sigma2_t.unsqueeze(1)
    if bool((sigma2_t <= 0).any()):
        raise ValueError("sigma2 must be positive")
    z_sq = z * z
    safe_z_sq = torch.where(z_sq > 0, z_sq, torch.ones_like(z_sq))
    log_alpha = torch.log(sigma2_t) - torch.log(safe_z_sq)
    value = -(
        constants.k1 * torch.sigmoid(constants.k2 + constants.k3 * log_alpha)
        - 0.5 * F.softplus(-log_alpha)
    )
    limit = torch.as_tensor(-constants.k1, dtype=z.dtype, device=z.device)
    return torch.where(z_sq > 0, value, limit)


@dataclass(frozen=True)
class VibLossTerms:
    """Decomposed loss: total = cross_entropy + beta * kl_total, in nats."""

    cross_entropy: torch.Tensor
    kl_total: torch.Tensor
    beta: float

    @property
    def total(self) -> torch.Tensor:
        return self.cross_entropy + self.beta * self.kl_total

    def detach_floats(self) -> dict:
        return {
            "cross_entropy": float(self.cross_entropy.detach()),
            "kl_total": float(self.kl_total.detach()),
            "total": float(self.total.detach()),
        }


KlFunction = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def vib_loss(
    batch,
    encoder,
    decoder,
    sigma2: float,
    beta: float,
    noise_samples: int = 1,
    rng: Optional[torch.Generator] = None,
    kl_fn: Optional[KlFunction] = None,
) -> VibLossTerms:
    """Noisy-classification loss at a fixed channel noise level.

    ``encoder`` maps inputs to channel symbols and may return either ``z`` or
    ``(z, active_mask)``; masked dimensions are zeroed in the received vector
    as well, since nothing is transmitted on them. The cross-entropy averages
    ``noise_samples`` independent channel draws per example; the KL term is
    evaluated on the noiseless encoder output.
    """
    inputs, targets = batch
    if inputs.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if noise_samples < 1:
        raise ValueError(f"noise_samples must be >= 1, got {noise_samples}")
    z, mask = _unpack_encoded(encoder(inputs))
    sigma2_t = torch.as_tensor(sigma2, dtype=z.dtype, device=z.device)
    cross_entropy = _noisy_cross_entropy(
        z, mask, targets, sigma2_t, decoder, noise_samples, rng
    )
    kl_fn = kl_fn or kl_log_uniform
    kl_total = kl_fn(z, sigma2_t).sum(dim=-1).mean()
    return VibLossTerms(cross_entropy=cross_entropy, kl_total=kl_total, beta=beta)


def vl_vib_loss(
    batch,
    encoder,
    decoder,
    sigma2_sampler,
    beta: float,
    noise_samples: int = 1,
    rng: Optional[torch.Generator] = None,
    kl_fn: Optional[KlFunction] = None,
) -> VibLossTerms:
    """Mixed-noise variant: one sampled noise variance per batch element.

    The sampled variance drives both the channel draw and the encoder, which
    here must accept ``(inputs, sigma2_vector)`` and may adapt its active
    dimensions to it.
    """
    inputs, targets = batch
    if inputs.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if noise_samples < 1:
        raise ValueError(f"noise_samples must be >= 1, got {noise_samples}")
    sigma2_vec = sigma2_sampler(inputs.shape[0], rng).to(dtype=inputs.dtype)
    z, mask = _unpack_encoded(encoder(inputs, sigma2_vec))
    per_row = sigma2_vec.unsqueeze(1)
    cross_entropy = _noisy_cross_entropy(
        z, mask, targets, per_row, decoder, noise_samples, rng
    )
    kl_fn = kl_fn or kl_log_uniform
    kl_total = kl_fn(z, per_row).sum(dim=-1).mean()
    return VibLossTerms(cross_entropy=cross_entropy, kl_total=kl_total, beta=beta)


def uniform_sigma2_sampler(low: float, high: float):
    """Factory for the uniform noise-variance sampler used in mixed training."""
    if not 0 < low <= high:
        raise ValueError(f"need 0 < low <= high, got [{low}, {high}]")

    def sample(n: int, rng: Optional[torch.Generator]) -> torch.Tensor:
        u = torch.rand(n, generator=rng, dtype=torch.float64)
        return low + (high - low) * u

    return sample


def point_sigma2_sampler(value: float):
    """Degenerate sampler: every element gets the same noise variance."""
    if value <= 0:
        raise ValueError(f"sigma2 must be positive, got {value}")

    def sample(n: int, rng: Optional[torch.Generator]) -> torch.Tensor:
        return torch.full((n,), value, dtype=torch.float64)

    return sample


class GaussianPriorKl(torch.nn.Module):
    """Closed-form KL to a trainable diagonal-Gaussian prior (ablation arm).

    KL(N(z, sigma2) || N(mu_i, s_i^2)) per dimension, with mu and log s^2
    trained jointly with the network. Unlike the log-uniform term this one
    has no special preference for z = 0.
    """

    def __init__(self, n_dims: int):
        super().__init__()
        self.mean = torch.nn.Parameter(torch.zeros(n_dims))
        self.log_var = torch.nn.Parameter(torch.zeros(n_dims))

    def forward(self, z: torch.Tensor, sigma2) -> torch.Tensor:
        sigma2_t = torch.as_tensor(sigma2, dtype=z.dtype, device=z.device)
        if sigma2_t.dim() == 1 and z.dim() == 2 and sigma2_t.shape[0] == z.shape[0]:
            sigma2_t = sigma2_t.unsqueeze(1)
        prior_var = self.log_var.exp()
        return 0.5 * (
            self.log_var
            - torch.log(sigma2_t)
            + (sigma2_t + (z - self.mean) ** 2) / prior_var
            - 1.0
        )


def _unpack_encoded(encoded):
    if isinstance(encoded, tuple):
        z, mask = encoded[0], encoded[1]
    else:
        z, mask = encoded, None
    return z, mask


def _noisy_cross_entropy(z, mask, targets, sigma2_t, decoder, noise_samples, rng):
    if noise_samples > 1:
        z = z.repeat_interleave(noise_samples, dim=0)
        targets = targets.repeat_interleave(noise_samples, dim=0)
        if mask is not None:
            mask = _expand_mask(mask, noise_samples)
        if sigma2_t.dim() > 0 and sigma2_t.shape[0] > 1:
            sigma2_t = sigma2_t.repeat_interleave(noise_samples, dim=0)
    received = transmit(z, sigma2_t, rng)
    if mask is not None:
        received = received * mask
    logits = decoder(received)
    if not torch.isfinite(logits).all():
        raise ModelContractViolation("decoder produced non-finite logits")
    return F.cross_entropy(logits, targets)


def _expand_mask(mask, noise_samples):
    if mask.dim() == 1:
        return mask
    return mask.repeat_interleave(noise_samples, dim=0)
