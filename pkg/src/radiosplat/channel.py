"""Spatially correlated statistical channel model.

The traditional oracle against which the field-driven pipeline is compared:
user-to-antenna and panel-to-antenna links are correlated Rayleigh channels
h = sqrt(alpha) * sqrtm(R) * g with an exponential correlation structure
R[a,b] = rho^{|xi_a - xi_b|} over antenna separation (measured in wavelengths
on the movable-antenna plane), while the panel-to-user link is line of sight.
Free-space path loss alpha = (lambda / (4*pi*d))^2 is used for both correlated
hops.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .scene import RisPanel, Scene, TWO_PI


@dataclass(frozen=True)
class CorrelationSpec:
    """Exponential correlation: coefficient rho plus scalar antenna coordinates."""

    rho: float
    positions: np.ndarray

    def __post_init__(self):
        if not (0.0 <= self.rho <= 1.0):
            raise ValidationError(f"correlation coefficient must be in [0, 1], got {self.rho}")
        pos = np.asarray(self.positions, dtype=float).reshape(-1)
        if not np.all(np.isfinite(pos)):
            raise ValidationError("correlation positions must be finite")
        object.__setattr__(self, "positions", pos)


def correlation_from_distances(rho: float, distances: np.ndarray) -> np.ndarray:
    """rho^distance entry-wise with the 0^0 := 1 convention, clipped to PSD."""
    if not (0.0 <= rho <= 1.0):
        raise ValidationError(f"correlation coefficient must be in [0, 1], got {rho}")
    distances = np.asarray(distances, dtype=float)
    if rho == 0.0:
        matrix = np.where(distances == 0.0, 1.0, 0.0)
    else:
        matrix = rho ** distances
    matrix = 0.5 * (matrix + matrix.T)
    # eigenvalue clip at zero keeps the matrix usable for square roots
    values, vectors = np.linalg.eigh(matrix)
    if values.min() < 0:
        matrix = (vectors * np.maximum(values, 0.0)) @ vectors.T
    return matrix


def correlation_matrix(spec: CorrelationSpec) -> np.ndarray:
    """Correlation matrix rho^{|pos_a - pos_b|} for scalar antenna coordinates."""
    distances = np.abs(spec.positions[:, None] - spec.positions[None, :])
    return correlation_from_distances(spec.rho, distances)


def hermitian_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root S with S @ S.T == matrix.

    Eigenvalues may undershoot zero by at most 1e-10 (they are clipped);
    anything worse, or asymmetry beyond 1e-8, is rejected.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValidationError(f"matrix must be square, got {matrix.shape}")
    if np.max(np.abs(matrix - matrix.T)) > 1e-8:
        raise ValidationError("matrix is not symmetric within 1e-8")
    values, vectors = np.linalg.eigh(matrix)
    if values.min() < -1e-10:
        raise ValidationError(f"matrix is not PSD: smallest eigenvalue {values.min():.3e}")
    values = np.maximum(values, 0.0)
    return (vectors * np.sqrt(values)) @ vectors.T


def free_space_path_loss(wavelength: float, distance: float) -> float:
    return (wavelength / (4.0 * math.pi * max(distance, 1e-12))) ** 2


@dataclass
class ChannelRealization:
    """One draw of all links for a scene.

    direct[u]  : (M,) complex user-u to antenna channels
    cascade[u] : (N,) complex panel to user-u line-of-sight channels
    panel      : (N, M) complex panel to antenna channels
    """

    direct: dict
    cascade: dict
    panel: np.ndarray
    alpha_direct: dict = field(default_factory=dict)
    alpha_panel: float = 1.0
    rho_direct: float = 0.0
    rho_panel: float = 0.0


def antenna_plane_distances(scene: Scene) -> np.ndarray:
    """Pairwise antenna distances on the movable plane, in wavelengths."""
    pos = scene.fas.positions / scene.wavelength
    return np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)


def _complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def sample_channel(scene: Scene, rng=None, rho_direct: float = 0.7,
                   rho_panel: float = 0.9) -> ChannelRealization:
    """Draw one correlated realization of every link in the scene.

    Correlated links are formed as sqrt(alpha) * S * g with g circularly
    symmetric unit-variance complex normal from the seeded generator; the
    line-of-sight panel-to-user entries are exp(-j*2*pi*d/lambda)/d.
    """
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    lam = scene.wavelength
    centroid = scene.fas.centroid_world()
    panel_center = scene.ris.element_positions.mean(axis=0)
    distances = antenna_plane_distances(scene)
    m = scene.fas.count
    n = scene.ris.size

    root_direct = hermitian_sqrt(correlation_from_distances(rho_direct, distances))
    root_panel = hermitian_sqrt(correlation_from_distances(rho_panel, distances))

    alpha_panel = free_space_path_loss(lam, float(np.linalg.norm(panel_center - centroid)))
    panel = math.sqrt(alpha_panel) * (_complex_normal(gen, (n, m)) @ root_panel.T)

    direct, cascade, alpha_direct = {}, {}, {}
    for u, user in enumerate(scene.users):
        alpha = free_space_path_loss(lam, float(np.linalg.norm(user.position - centroid)))
        direct[u] = math.sqrt(alpha) * (root_direct @ _complex_normal(gen, m))
        alpha_direct[u] = alpha
        d_elems = np.linalg.norm(scene.ris.element_positions - user.position[None, :], axis=1)
        cascade[u] = np.exp(-1j * TWO_PI * d_elems / lam) / np.maximum(d_elems, 1e-12)
    return ChannelRealization(direct=direct, cascade=cascade, panel=panel,
                              alpha_direct=alpha_direct, alpha_panel=alpha_panel,
                              rho_direct=rho_direct, rho_panel=rho_panel)


def effective_channel(realization: ChannelRealization, ris: RisPanel,
                      antenna: int, user: int = None) -> complex:
    """Composite channel at one antenna: direct term plus the panel cascade.

    h_km[m] + sum_n h_kr[n] * A_n * exp(j*theta_n) * h_rm[n, m]
    """
    users = sorted(realization.direct)
    if user is None:
        user = users[0]
    if user not in realization.direct:
        raise ValidationError(f"unknown user index {user}")
    direct = realization.direct[user]
    if not (0 <= antenna < direct.shape[0]):
        raise ValidationError(f"antenna index {antenna} out of range [0, {direct.shape[0]})")
    phasors = ris.element_amplitudes * np.exp(1j * ris.phase_values())
    cascade = np.sum(realization.cascade[user] * phasors * realization.panel[:, antenna])
    return complex(direct[antenna] + cascade)


def sinr_channel(realization: ChannelRealization, ris: RisPanel, antenna: int,
                 desired: int, power_watts: float, noise_watts: float) -> float:
    """SINR of the composite channel at one antenna.

    Gamma = P |h_desired|^2 / (sum_j P |h_j|^2 + sigma^2) over the composite
    per-user channels.
    """
    if power_watts <= 0 or noise_watts <= 0:
        raise ValidationError("power and noise must be positive")
    signal = abs(effective_channel(realization, ris, antenna, desired)) ** 2
    interference = 0.0
    for u in realization.direct:
        if u != desired:
            interference += abs(effective_channel(realization, ris, antenna, u)) ** 2
    return power_watts * signal / (power_watts * interference + noise_watts)


def rate(gamma: float) -> float:
    """Achievable rate log2(1 + Gamma) in bit/s/Hz."""
    if gamma < 0:
        raise ValidationError(f"SINR must be >= 0, got {gamma}")
    return math.log2(1.0 + gamma)


def export_vector_csv(values: np.ndarray, path) -> None:
    """Debug export of a complex vector: columns antenna, real, imag."""
    values = np.asarray(values).reshape(-1)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["antenna", "real", "imag"])
        for i, v in enumerate(values):
            writer.writerow([i, repr(float(np.real(v))), repr(float(np.imag(v)))])
