"""Amplitude-limited scalar Gaussian channel model.

Covers PSNR/noise-variance conversions, noisy transmission of feature
vectors, pilot-based noise-variance estimation, a capacity upper bound for
the amplitude-limited channel, and the latency accounting used to compare
analog feature transmission against digital (quantize-and-code) schemes.

All functions are pure; the only stochastic operation, :func:`transmit`,
requires an explicit seeded ``torch.Generator`` so that every noisy forward
pass in the repository is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InsufficientPilots, LatencyUndefined, PowerConstraintViolation

DEFAULT_BANDWIDTH_HZ = 12_500.0
DEFAULT_SYMBOL_RATE_BAUD = 9_600.0

#: PSNR assumed by a transmitter with no channel knowledge (zero pilots).
BLIND_WORST_CASE_PSNR_DB = 10.0

#: Slack allowed on the Tanh amplitude bound before transmit() rejects input.
AMPLITUDE_TOLERANCE = 1e-6


@dataclass(frozen=True)
class ChannelSpec:
    """Static description of the scalar Gaussian channel.

    ``peak_power`` stays at 1.0 in practice because the encoder output is
    Tanh-bounded; it remains a field for generality.
    """

    peak_power: float = 1.0
    noise_variance: float = 0.01
    bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ
    symbol_rate_baud: float = DEFAULT_SYMBOL_RATE_BAUD

    def __post_init__(self):
        if self.peak_power <= 0:
            raise ValueError(f"peak_power must be positive, got {self.peak_power}")
        if self.noise_variance <= 0:
            raise ValueError(f"noise_variance must be positive, got {self.noise_variance}")
        if self.symbol_rate_baud <= 0:
            raise ValueError(f"symbol_rate_baud must be positive, got {self.symbol_rate_baud}")

    @property
    def psnr_db(self) -> float:
        return sigma2_to_psnr(self.noise_variance, self.peak_power)

    @classmethod
    def from_psnr(cls, psnr_db: float, peak_power: float = 1.0, **kwargs) -> "ChannelSpec":
        sigma2 = psnr_to_sigma2(psnr_db, peak_power)
        return cls(peak_power=peak_power, noise_variance=sigma2, **kwargs)


@dataclass(frozen=True)
class NoiseVarianceEstimate:
    """Transmitter-side belief about the channel noise variance.

    mode is one of ``known`` (oracle), ``estimated`` (from pilots), or
    ``blind`` (worst case of the configured PSNR range, no pilots).
    """

    estimate: float
    pilot_count: int
    mode: str

    def __post_init__(self):
        if self.mode not in ("known", "estimated", "blind"):
            raise ValueError(f"unknown estimate mode {self.mode!r}")
        if self.mode == "estimated" and self.pilot_count < 2:
            raise ValueError("estimated mode requires at least 2 pilots")


def psnr_to_sigma2(psnr_db: float, peak_power: float = 1.0) -> float:
    """Noise variance for a given PSNR: sigma^2 = P * 10^(-PSNR/10)."""
    if peak_power <= 0:
        raise ValueError(f"peak_power must be positive, got {peak_power}")
    return peak_power * 10.0 ** (-psnr_db / 10.0)


def sigma2_to_psnr(sigma2: float, peak_power: float = 1.0) -> float:
    """PSNR in dB for a given noise variance: 10 log10(P / sigma^2)."""
    if peak_power <= 0:
        raise ValueError(f"peak_power must be positive, got {peak_power}")
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    return 10.0 * math.log10(peak_power / sigma2)


def transmit(z: torch.Tensor, sigma2, rng: torch.Generator, peak_power: float = 1.0) -> torch.Tensor:
    """Send ``z`` through the channel: returns z + eps, eps ~ N(0, sigma2 I).

    ``sigma2`` may be a scalar or a tensor broadcastable against ``z``
    (e.g. one variance per batch row). The noise is detached from any
    autograd graph, which is exactly the reparameterized noisy feature.
    """
    limit = math.sqrt(peak_power)
    max_amp = float(z.detach().abs().max()) if z.numel() else 0.0
    if max_amp > limit + AMPLITUDE_TOLERANCE:
        raise PowerConstraintViolation(
            f"channel input amplitude {max_amp:.6g} exceeds sqrt(P)={limit:.6g}"
        )
    sigma2_t = torch.as_tensor(sigma2, dtype=z.dtype, device=z.device)
    if bool((sigma2_t <= 0).any()):
        raise ValueError("sigma2 must be positive")
    noise = torch.randn(z.shape, generator=rng, dtype=z.dtype, device=z.device)
    return z + noise * sigma2_t.sqrt()


def estimate_noise_variance(pilots_sent, pilots_received) -> NoiseVarianceEstimate:
    """Estimate sigma^2 from m known pilot symbols.

    Uses 1/(m-1) * sum((received - sent)^2). Because the pilot symbols are
    known, dividing by m would be the unbiased choice; the m-1 divisor is
    kept as-is and makes the estimator high by a factor of m/(m-1) in
    expectation. Callers that care about the bias should use large m.
    """
    sent = _as_1d_array(pilots_sent)
    received = _as_1d_array(pilots_received)
    if sent.shape != received.shape:
        raise ValueError(
            f"pilot vectors must have equal length, got {sent.shape} vs {received.shape}"
        )
    m = sent.size
    if m < 2:
        raise InsufficientPilots(f"need at least 2 pilots, got {m}")
    estimate = float(np.sum((received - sent) ** 2) / (m - 1))
    return NoiseVarianceEstimate(estimate=estimate, pilot_count=m, mode="estimated")


def known_noise_variance(sigma2: float) -> NoiseVarianceEstimate:
    """Oracle estimate: the transmitter knows the true noise variance."""
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    return NoiseVarianceEstimate(estimate=float(sigma2), pilot_count=0, mode="known")


def blind_noise_variance(peak_power: float = 1.0) -> NoiseVarianceEstimate:
    """Zero-pilot fallback: assume the worst-case PSNR of the operating range."""
    sigma2 = psnr_to_sigma2(BLIND_WORST_CASE_PSNR_DB, peak_power)
    return NoiseVarianceEstimate(estimate=sigma2, pilot_count=0, mode="blind")


def capacity_bpcu(peak_power: float, sigma2: float) -> float:
    """Capacity upper bound of the amplitude-limited scalar Gaussian channel.

    min{ log2(1 + sqrt(2P / (pi e sigma^2))), 1/2 log2(1 + P / sigma^2) }
    in bits per channel use.
    """
    if peak_power <= 0 or sigma2 <= 0:
        raise ValueError(f"peak_power and sigma2 must be positive, got P={peak_power}, sigma2={sigma2}")
    low_snr = math.log2(1.0 + math.sqrt(2.0 * peak_power / (math.pi * math.e * sigma2)))
    high_snr = 0.5 * math.log2(1.0 + peak_power / sigma2)
    return min(low_snr, high_snr)


def latency_analog(n_active: int, symbol_rate_baud: float = DEFAULT_SYMBOL_RATE_BAUD) -> float:
    """Transmission time in seconds for one analog symbol per active dimension."""
    if n_active < 0:
        raise ValueError(f"n_active must be nonnegative, got {n_active}")
    if symbol_rate_baud <= 0:
        raise ValueError(f"symbol_rate_baud must be positive, got {symbol_rate_baud}")
    return n_active / symbol_rate_baud


def latency_digital(
    n_dims: int,
    bits_per_dim: int,
    peak_power: float,
    sigma2: float,
    symbol_rate_baud: float = DEFAULT_SYMBOL_RATE_BAUD,
) -> float:
    """Transmission time for a quantized feature under ideal channel coding.

    The payload of n_dims * bits_per_dim bits (rounded up to an integer) is
    sent at the capacity bound, so the symbol count may be fractional:
    idealized coding, not a concrete code.
    """
    if n_dims < 0 or bits_per_dim < 0:
        raise ValueError("n_dims and bits_per_dim must be nonnegative")
    if symbol_rate_baud <= 0:
        raise ValueError(f"symbol_rate_baud must be positive, got {symbol_rate_baud}")
    if n_dims == 0 or bits_per_dim == 0:
        return 0.0
    rate = capacity_bpcu(peak_power, sigma2)
    if rate == 0.0:
        raise LatencyUndefined("channel capacity underflowed to zero")
    total_bits = math.ceil(n_dims * bits_per_dim)
    return (total_bits / rate) / symbol_rate_baud


def _as_1d_array(values) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    return arr
