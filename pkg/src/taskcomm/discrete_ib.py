"""Exact information-bottleneck quantities on small finite alphabets.

Everything here is computed by brute-force enumeration of the joint
distribution, so it serves as an independent oracle for the variational
objectives used in training. All information quantities are in bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORMALIZATION_ATOL = 1e-12
MAX_ALPHABET = 32


@dataclass(frozen=True)
class DiscreteSystem:
    """A joint source p(x, y) together with a stochastic encoder p(z|x).

    ``joint_xy`` has shape (nx, ny); ``encoder`` has shape (nx, nz) with each
    row a distribution over the encoded alphabet. The Markov chain is
    Y - X - Z: the code depends on the input only.
    """

    joint_xy: np.ndarray
    encoder: np.ndarray

    def __post_init__(self):
        joint = np.asarray(self.joint_xy, dtype=np.float64)
        enc = np.asarray(self.encoder, dtype=np.float64)
        object.__setattr__(self, "joint_xy", joint)
        object.__setattr__(self, "encoder", enc)
        if joint.ndim != 2 or enc.ndim != 2:
            raise ValueError("joint_xy and encoder must be 2-D arrays")
        if joint.shape[0] != enc.shape[0]:
            raise ValueError(
                f"alphabet mismatch: joint has {joint.shape[0]} inputs, encoder {enc.shape[0]}"
            )
        if max(joint.shape) > MAX_ALPHABET or enc.shape[1] > MAX_ALPHABET:
            raise ValueError(f"alphabets larger than {MAX_ALPHABET} are not enumerable here")
        if (joint < 0).any() or (enc < 0).any():
            raise ValueError("distributions must be nonnegative")
        if abs(joint.sum() - 1.0) > NORMALIZATION_ATOL:
            raise ValueError(f"joint_xy sums to {joint.sum()!r}, expected 1")
        row_sums = enc.sum(axis=1)
        if np.max(np.abs(row_sums - 1.0)) > NORMALIZATION_ATOL:
            raise ValueError("every encoder row must sum to 1")

    @property
    def p_x(self) -> np.ndarray:
        return self.joint_xy.sum(axis=1)

    @property
    def p_y(self) -> np.ndarray:
        return self.joint_xy.sum(axis=0)

    @property
    def p_z(self) -> np.ndarray:
        return self.p_x @ self.encoder

    @property
    def joint_zx(self) -> np.ndarray:
        """Shape (nz, nx): p(z, x) = p(z|x) p(x)."""
        return (self.encoder * self.p_x[:, None]).T

    @property
    def joint_zy(self) -> np.ndarray:
        """Shape (nz, ny): p(z, y) = sum_x p(z|x) p(x, y)."""
        return self.encoder.T @ self.joint_xy


def entropy_bits(p: np.ndarray) -> float:
    """Shannon entropy in bits; 0 log 0 treated as 0."""
    p = np.asarray(p, dtype=np.float64)
    mask = p > 0
    return float(-np.sum(p[mask] * np.log2(p[mask])))


def kl_divergence_bits(p: np.ndarray, q: np.ndarray) -> float:
    """D(p || q) in bits; +inf if q has a zero where p does not."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] * (np.log2(p[mask]) - np.log2(q[mask]))))


def mutual_information_bits(joint: np.ndarray) -> float:
    """I between the two axes of a joint distribution, in bits."""
    joint = np.asarray(joint, dtype=np.float64)
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    return entropy_bits(pa) + entropy_bits(pb) - entropy_bits(joint.reshape(-1))


def exact_ib_objective(system: DiscreteSystem, beta: float) -> float:
    """-I(Z; Y) + beta * I(Z; X), computed exactly from the enumerated joint."""
    i_zy = mutual_information_bits(system.joint_zy)
    i_zx = mutual_information_bits(system.joint_zx)
    return -i_zy + beta * i_zx


def exact_vib_objective(
    system: DiscreteSystem,
    q_z: np.ndarray,
    q_y_given_z: np.ndarray,
    beta: float,
) -> float:
    """Variational objective E[-log2 q(y|z)] + beta E_x[D(p(z|x) || q(z))].

    This upper-bounds exact_ib_objective + H(Y) for every valid variational
    pair, with equality when q_z and q_y_given_z equal the true marginals.
    """
    q_z = np.asarray(q_z, dtype=np.float64)
    q_yz = np.asarray(q_y_given_z, dtype=np.float64)
    nz = system.encoder.shape[1]
    ny = system.joint_xy.shape[1]
    if q_z.shape != (nz,):
        raise ValueError(f"q_z must have shape ({nz},), got {q_z.shape}")
    if q_yz.shape != (nz, ny):
        raise ValueError(f"q_y_given_z must have shape ({nz}, {ny}), got {q_yz.shape}")
    if (q_z < 0).any() or (q_yz < 0).any():
        raise ValueError("variational distributions must be nonnegative")
    if abs(q_z.sum() - 1.0) > NORMALIZATION_ATOL:
        raise ValueError("q_z must sum to 1")
    if np.max(np.abs(q_yz.sum(axis=1) - 1.0)) > NORMALIZATION_ATOL:
        raise ValueError("every q_y_given_z row must sum to 1")

    joint_zy = system.joint_zy
    mask = joint_zy > 0
    if np.any(q_yz[mask] == 0):
        cross_entropy = float("inf")
    else:
        cross_entropy = float(-np.sum(joint_zy[mask] * np.log2(q_yz[mask])))

    p_x = system.p_x
    rate = 0.0
    for x in range(len(p_x)):
        if p_x[x] == 0:
            continue
        rate += p_x[x] * kl_divergence_bits(system.encoder[x], q_z)
    return cross_entropy + beta * rate


def true_variational_pair(system: DiscreteSystem) -> tuple[np.ndarray, np.ndarray]:
    """The optimal variational pair: the true p(z) and p(y|z).

    Rows of p(y|z) with p(z) = 0 are filled uniformly; they carry no mass.
    """
    p_z = system.p_z
    joint_zy = system.joint_zy
    ny = joint_zy.shape[1]
    q_yz = np.full_like(joint_zy, 1.0 / ny)
    nonzero = p_z > 0
    q_yz[nonzero] = joint_zy[nonzero] / p_z[nonzero, None]
    return p_z, q_yz


def random_system(
    rng: np.random.Generator,
    nx: int = 4,
    ny: int = 3,
    nz: int = 4,
    concentration: float = 1.0,
) -> DiscreteSystem:
    """Draw a random system with Dirichlet-distributed rows (for property tests)."""
    joint = rng.dirichlet(np.full(nx * ny, concentration)).reshape(nx, ny)
    encoder = rng.dirichlet(np.full(nz, concentration), size=nx)
    return DiscreteSystem(joint_xy=joint, encoder=encoder)


def random_variational_pair(
    rng: np.random.Generator, nz: int, ny: int, concentration: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Draw a random (q_z, q_y_given_z) pair for bound checks."""
    q_z = rng.dirichlet(np.full(nz, concentration))
    q_yz = rng.dirichlet(np.full(ny, concentration), size=nz)
    return q_z, q_yz
