"""Bottleneck layers exposing per-dimension importance.

`ImportanceBottleneck` is a fully-connected encoder head whose augmented
rows (weights plus bias) are l2-normalized, so the magnitude of each output
is controlled by a single scale per dimension. For static channels the scale
is a trainable importance parameter and low-importance rows are permanently
pruned; for dynamic channels the scale comes from a `MonotoneGate`, a tiny
constrained perceptron of the channel noise variance whose structure forces
the active dimensions to form a consecutive prefix.
"""

from __future__ import annotations

import logging
import math

import torch
import torch.nn as nn

logger = logging.getLogger(__name__)

#: Rows with an l2 norm below this are degenerate and get auto-pruned.
ROW_NORM_EPSILON = 1e-8


class ImportanceBottleneck(nn.Module):
    """Weight-normalized linear head with per-row importance and Tanh bound.

    Output i is ``tanh(scale_i * (w_i / ||w_i||) . [a; 1])`` where ``w_i`` is
    the augmented row over the input ``a`` and a constant 1 (the bias slot).
    ``scale`` defaults to the trainable importance vector; dynamic callers
    pass an external per-example scale instead. Pruned rows emit exact zeros
    and receive no gradient, and pruning is permanent.
    """

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.empty(out_features))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        bound = 1.0 / math.sqrt(in_features)
        nn.init.uniform_(self.bias, -bound, bound)
        # Importance starts at the initial row norm, so the normalized layer
        # matches an unnormalized linear layer at initialization.
        with torch.no_grad():
            initial_norms = self.augmented_rows().norm(dim=1)
        self.gamma = nn.Parameter(initial_norms.clone())
        self.register_buffer("active_mask", torch.ones(out_features))

    def augmented_rows(self) -> torch.Tensor:
        return torch.cat([self.weight, self.bias.unsqueeze(1)], dim=1)

    def forward(self, inputs: torch.Tensor, scale: torch.Tensor | None = None) -> torch.Tensor:
        rows = self.augmented_rows()
        norms = rows.norm(dim=1)
        self._autoprune_degenerate(norms)
        unit_rows = rows / norms.clamp_min(ROW_NORM_EPSILON).unsqueeze(1)
        augmented = torch.cat(
            [inputs, torch.ones(inputs.shape[0], 1, dtype=inputs.dtype, device=inputs.device)],
            dim=1,
        )
        pre = augmented @ unit_rows.t()
        if scale is None:
            scale = self.gamma
        return torch.tanh(scale * pre) * self.active_mask

    def prune(self, threshold: float) -> int:
        """Permanently prune every still-active row with importance <= threshold."""
        if threshold < 0:
            raise ValueError(f"threshold must be nonnegative, got {threshold}")
        with torch.no_grad():
            newly = (self.gamma <= threshold) & (self.active_mask > 0)
            self.active_mask[newly] = 0.0
        return int(newly.sum())

    def project_nonnegative_importance(self) -> None:
        """Clamp the importance vector at zero; call after each optimizer step."""
        with torch.no_grad():
            self.gamma.clamp_(min=0.0)

    @property
    def active_count(self) -> int:
        return int(self.active_mask.sum())

    def _autoprune_degenerate(self, norms: torch.Tensor) -> None:
        with torch.no_grad():
            degenerate = (norms < ROW_NORM_EPSILON) & (self.active_mask > 0)
            if bool(degenerate.any()):
                indices = degenerate.nonzero(as_tuple=False).flatten().tolist()
                logger.warning(
                    "auto-pruning %d degenerate bottleneck row(s) with near-zero norm: %s",
                    len(indices),
                    indices,
                )
                self.active_mask[degenerate] = 0.0


class MonotoneGate(nn.Module):
    """Maps a noise variance to a nonnegative, ordered importance vector.

    A small perceptron whose effective weights are the absolute values of its
    parameters and whose activations are tanh, so each raw output is
    nonnegative and nondecreasing in the input. The importance of dimension i
    is the tail sum of the raw outputs from i onward, which makes the vector
    nonincreasing in the index: thresholding it always activates a
    consecutive prefix of dimensions, and higher noise can only grow it.
    """

    def __init__(
        self,
        out_features: int,
        hidden_units: int = 16,
        hidden_layers: int = 2,
        reference_sigma2: float = 0.05,
        initial_output: float = 0.1,
        init_rng: torch.Generator | None = None,
    ):
        super().__init__()
        self.out_features = out_features
        sizes = [1] + [hidden_units] * hidden_layers + [out_features]
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = torch.empty(fan_out, fan_in)
            if fan_in == 1:
                # Spread tanh(|w| sigma2) over its useful range for small variances.
                w.uniform_(0.0, 12.0, generator=init_rng)
            else:
                w.uniform_(-1.0 / fan_in, 1.0 / fan_in, generator=init_rng)
            params.append(nn.Parameter(w))
        self.layers = nn.ParameterList(params)
        self._rescale_final_layer(reference_sigma2, initial_output)
        self.register_buffer("trained_sigma2_range", torch.tensor([float("nan"), float("nan")]))
        self._warned_extrapolation = False

    def raw_outputs(self, sigma2) -> torch.Tensor:
        """The nonnegative increasing per-dimension outputs g(sigma2)."""
        s = torch.as_tensor(sigma2, dtype=self.layers[0].dtype, device=self.layers[0].device)
        scalar_input = s.dim() == 0
        h = s.reshape(-1, 1)
        if bool((h <= 0).any()):
            raise ValueError("sigma2 must be positive")
        self._check_range(h)
        for w in self.layers:
            h = torch.tanh(h @ w.abs().t())
        return h.squeeze(0) if scalar_input else h

    def forward(self, sigma2) -> torch.Tensor:
        """Importance vector: tail-cumulative sum of the raw outputs."""
        g = self.raw_outputs(sigma2)
        return torch.flip(torch.cumsum(torch.flip(g, dims=[-1]), dim=-1), dims=[-1])

    def set_trained_range(self, low: float, high: float) -> None:
        with torch.no_grad():
            self.trained_sigma2_range.copy_(torch.tensor([low, high]))

    def _check_range(self, sigma2: torch.Tensor) -> None:
        low, high = self.trained_sigma2_range.tolist()
        if math.isnan(low) or self._warned_extrapolation:
            return
        if bool((sigma2 < low).any()) or bool((sigma2 > high).any()):
            self._warned_extrapolation = True
            logger.warning(
                "gate queried outside its trained variance range [%.3g, %.3g]; extrapolating",
                low,
                high,
            )

    def _rescale_final_layer(self, reference_sigma2: float, initial_output: float) -> None:
        # Normalize each output row so training starts with every dimension
        # comfortably above typical deactivation thresholds at the reference
        # variance; a cold (all-deactivated) start would get no gradient.
        with torch.no_grad():
            h = torch.tensor([[reference_sigma2]])
            for w in list(self.layers)[:-1]:
                h = torch.tanh(h @ w.abs().t())
            final = self.layers[-1]
            raw = (h @ final.abs().t()).squeeze(0)
            target = math.atanh(initial_output)
            final.mul_((target / raw.clamp_min(1e-12)).unsqueeze(1))


def forward_static(inputs: torch.Tensor, layer: ImportanceBottleneck, upstream=None) -> torch.Tensor:
    """Static-channel encoding: importance comes from the layer's own vector."""
    features = upstream(inputs) if upstream is not None else inputs
    return layer(features)


def forward_dynamic(
    inputs: torch.Tensor,
    sigma2,
    layer: ImportanceBottleneck,
    gate: MonotoneGate,
    threshold: float,
    upstream=None,
):
    """Channel-adaptive encoding: gate the layer with importance(sigma2).

    Dimensions whose gated importance is <= threshold are deactivated for
    this pass only: they output exact zeros and receive no gradient. Returns
    the features and the number of active dimensions (an int for a scalar
    sigma2, a per-example tensor otherwise). The active set is always the
    prefix 1..k by construction of the gate.
    """
    features = upstream(inputs) if upstream is not None else inputs
    gamma = gate(sigma2)
    active = (gamma > threshold).to(features.dtype)
    z = layer(features, scale=gamma) * active
    if gamma.dim() == 1:
        return z, int(active.sum())
    return z, active.sum(dim=-1).to(torch.long)


def prune_static(layer: ImportanceBottleneck, threshold: float) -> int:
    """Permanently prune rows with importance <= threshold; returns the count."""
    return layer.prune(threshold)


def gate_values(gate: MonotoneGate, sigma2) -> torch.Tensor:
    """Importance vector gamma(sigma2); see MonotoneGate.forward."""
    return gate(sigma2)
