"""Network assembly for the classification tasks and the baseline heads.

All variants of a task share the same backbone and server-side network; only
the encoder head differs: an ImportanceBottleneck (static importance or
gate-driven), a plain Tanh projection (analog baseline), or a Tanh projection
followed by a uniform quantizer trained with straight-through gradients
(digital baseline).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .bottleneck import ImportanceBottleneck, MonotoneGate, forward_dynamic
from .errors import InvalidArchitecture

TASKS = ("mnist", "cifar10", "tiny-imagenet")
VARIANTS = ("vfe", "vl-vfe", "deep-jscc", "quantization")

#: Pruning/deactivation thresholds reproduced per task.
DEFAULT_GAMMA0 = {"mnist": 0.05, "cifar10": 0.01, "tiny-imagenet": 0.05}


@dataclass(frozen=True)
class ArchitectureSpec:
    """Task identity plus the initial bottleneck width."""

    task: str
    bottleneck_width: int = 64

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidArchitecture(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.bottleneck_width < 1:
            raise InvalidArchitecture(f"bottleneck_width must be >= 1, got {self.bottleneck_width}")

    @property
    def num_classes(self) -> int:
        return {"mnist": 10, "cifar10": 10, "tiny-imagenet": 200}[self.task]

    @property
    def input_shape(self) -> tuple:
        return {
            "mnist": (784,),
            "cifar10": (3, 32, 32),
            "tiny-imagenet": (3, 64, 64),
        }[self.task]

    @property
    def bottleneck_input_dim(self) -> int:
        return {"mnist": 784, "cifar10": 64, "tiny-imagenet": 512}[self.task]

    def to_dict(self) -> dict:
        return {"task": self.task, "bottleneck_width": self.bottleneck_width}

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureSpec":
        return cls(task=data["task"], bottleneck_width=int(data["bottleneck_width"]))


@dataclass(frozen=True)
class BaselineSpec:
    """Configuration of a fixed-length baseline head."""

    kind: str
    n: int
    bits_per_dim: int = 2

    def __post_init__(self):
        if self.kind not in ("deep-jscc", "quantization"):
            raise InvalidArchitecture(f"unknown baseline kind {self.kind!r}")
        if self.n < 1:
            raise InvalidArchitecture(f"feature dimension must be >= 1, got {self.n}")
        if self.kind == "quantization" and self.bits_per_dim < 1:
            raise InvalidArchitecture(f"bits_per_dim must be >= 1, got {self.bits_per_dim}")


def quantize(features: torch.Tensor, bits: int) -> torch.Tensor:
    """Uniform midrise quantization of [-1, 1] values to 2^bits levels."""
    if bits < 1:
        raise ValueError(f"bits must be >= 1, got {bits}")
    levels = 2 ** bits
    step = 2.0 / levels
    clamped = features.clamp(-1.0, 1.0)
    index = torch.floor((clamped + 1.0) / step).clamp(max=levels - 1)
    return -1.0 + step * (index + 0.5)


class UniformQuantizer(nn.Module):
    """Midrise quantizer with straight-through gradients while training.

    Inputs outside [-1, 1] are clamped and counted; with a Tanh immediately
    upstream this counter stays at zero.
    """

    def __init__(self, bits: int):
        super().__init__()
        if bits < 1:
            raise ValueError(f"bits must be >= 1, got {bits}")
        self.bits = bits
        self.register_buffer("clamp_events", torch.zeros((), dtype=torch.long))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            self.clamp_events += int((x.abs() > 1.0).sum())
        q = quantize(x, self.bits)
        if self.training:
            return x + (q - x).detach()
        return q


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with an identity or 1x1-projection shortcut."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride=stride)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.conv1(x))
        out = self.conv2(out)
        return F.relu(out + self.shortcut(x))


class PlainTanhHead(nn.Module):
    """Fixed-width linear head with the Tanh amplitude bound (analog baseline)."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.linear = nn.Linear(in_features, out_features)

    def forward(self, x):
        return torch.tanh(self.linear(x))


def _mnist_backbone() -> nn.Module:
    return nn.Flatten()


def _cifar_backbone() -> nn.Module:
    return nn.Sequential(
        nn.Conv2d(3, 128, 3, stride=1, padding=1),
        nn.ReLU(),
        nn.Conv2d(128, 128, 3, stride=1, padding=1),
        nn.ReLU(),
        ResidualBlock(128, 128, stride=2),
        nn.Conv2d(128, 16, 3, stride=2, padding=1),
        nn.ReLU(),
        nn.Conv2d(16, 4, 3, stride=2, padding=1),
        nn.ReLU(),
        nn.Flatten(),
    )


def _tiny_imagenet_backbone() -> nn.Module:
    return nn.Sequential(
        ResidualBlock(3, 64, stride=2),
        ResidualBlock(64, 128, stride=2),
        ResidualBlock(128, 256, stride=2),
        ResidualBlock(256, 512, stride=2),
        ResidualBlock(512, 512, stride=1),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
    )


def _server_network(spec: ArchitectureSpec) -> nn.Module:
    n = spec.bottleneck_width
    if spec.task == "mnist":
        return nn.Sequential(
            nn.Linear(n, 1024),
            nn.ReLU(),
            nn.Linear(1024, 256),
            nn.ReLU(),
            nn.Linear(256, 10),
        )
    if spec.task == "cifar10":
        return nn.Sequential(
            nn.Linear(n, 64),
            nn.ReLU(),
            nn.Unflatten(1, (4, 4, 4)),
            nn.Conv2d(4, 256, 3, stride=1, padding=1),
            nn.ReLU(),
            nn.Conv2d(256, 512, 3, stride=1, padding=1),
            nn.ReLU(),
            ResidualBlock(512, 512, stride=1),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(512, 10),
        )
    return nn.Sequential(
        nn.Linear(n, 512),
        nn.ReLU(),
        nn.Linear(512, 200),
    )


class TaskModel(nn.Module):
    """On-device encoder plus server-side decoder for one task/variant pair."""

    def __init__(self, spec, variant, backbone, head, decoder, gate=None, gate_threshold=None):
        super().__init__()
        if variant not in VARIANTS:
            raise InvalidArchitecture(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.spec = spec
        self.variant = variant
        self.backbone = backbone
        self.head = head
        self.decoder = decoder
        self.gate = gate
        self.gate_threshold = gate_threshold
        if variant == "vl-vfe" and (gate is None or gate_threshold is None):
            raise InvalidArchitecture("vl-vfe requires a gate and a gate threshold")

    @property
    def bottleneck(self) -> ImportanceBottleneck:
        if not isinstance(self.head, ImportanceBottleneck):
            raise InvalidArchitecture(f"variant {self.variant!r} has no importance bottleneck")
        return self.head

    def encode_static(self, inputs):
        """Fixed-channel encoding path; returns (symbols, active mask)."""
        features = self.backbone(inputs)
        if self.variant in ("vfe",):
            z = self.head(features)
            return z, self.head.active_mask
        z = self.head(features)
        return z, None

    def encode_dynamic(self, inputs, sigma2):
        """Channel-adaptive path: gate the bottleneck with gamma(sigma2)."""
        if self.variant != "vl-vfe":
            raise InvalidArchitecture(f"variant {self.variant!r} is not channel-adaptive")
        features = self.backbone(inputs)
        gamma = self.gate(sigma2)
        active = (gamma > self.gate_threshold).to(features.dtype)
        z = self.head(features, scale=gamma) * active
        return z, active

    def encode(self, inputs, sigma2=None):
        if self.variant == "vl-vfe":
            if sigma2 is None:
                raise ValueError("vl-vfe encoding requires the (estimated) noise variance")
            return self.encode_dynamic(inputs, sigma2)
        return self.encode_static(inputs)

    def decode(self, received):
        return self.decoder(received)

    def class_probabilities(self, received):
        return F.softmax(self.decoder(received), dim=-1)

    def active_dimensions(self, sigma2=None) -> int:
        """Number of feature dimensions actually transmitted."""
        if self.variant == "vfe":
            return self.head.active_count
        if self.variant == "vl-vfe":
            if sigma2 is None:
                raise ValueError("vl-vfe active count depends on the noise variance")
            gamma = self.gate(torch.as_tensor(float(sigma2)))
            return int((gamma > self.gate_threshold).sum())
        return self.spec.bottleneck_width

    def on_device_parameter_count(self) -> int:
        """Weights and biases of the transmitter side (importance excluded)."""
        total = sum(p.numel() for p in self.backbone.parameters())
        if isinstance(self.head, ImportanceBottleneck):
            total += self.head.weight.numel() + self.head.bias.numel()
        else:
            total += sum(p.numel() for p in self.head.parameters())
        return total


def build_model(
    spec: ArchitectureSpec,
    variant: str,
    seed: int,
    gamma0: float | None = None,
    bits_per_dim: int = 2,
    gate_hidden_units: int = 16,
) -> TaskModel:
    """Construct the encoder/decoder pair for a task and variant, deterministically."""
    if variant not in VARIANTS:
        raise InvalidArchitecture(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    torch.manual_seed(seed)
    backbone = {
        "mnist": _mnist_backbone,
        "cifar10": _cifar_backbone,
        "tiny-imagenet": _tiny_imagenet_backbone,
    }[spec.task]()
    in_dim = spec.bottleneck_input_dim
    n = spec.bottleneck_width
    gate = None
    gate_threshold = None
    if variant in ("vfe", "vl-vfe"):
        head = ImportanceBottleneck(in_dim, n)
        if variant == "vl-vfe":
            gate = MonotoneGate(n, hidden_units=gate_hidden_units)
            gate_threshold = DEFAULT_GAMMA0[spec.task] if gamma0 is None else gamma0
    elif variant == "deep-jscc":
        head = PlainTanhHead(in_dim, n)
    else:
        head = nn.Sequential(PlainTanhHead(in_dim, n), UniformQuantizer(bits_per_dim))
    decoder = _server_network(spec)
    return TaskModel(
        spec=spec,
        variant=variant,
        backbone=backbone,
        head=head,
        decoder=decoder,
        gate=gate,
        gate_threshold=gate_threshold,
    )


def structure_signature(module: nn.Module) -> list:
    """Layer-type and parameter-shape listing, for structural comparisons."""
    signature = []
    for name, sub in module.named_modules():
        entry = (name, type(sub).__name__, tuple(
            (pname, tuple(p.shape)) for pname, p in sub.named_parameters(recurse=False)
        ))
        signature.append(entry)
    return signature
