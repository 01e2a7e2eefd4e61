"""Complex 3D Gaussian radiation fields.

A field is a superposition of complex-amplitude anisotropic Gaussian kernels.
Each primitive contributes

    A * exp(j*zeta) * exp(-0.5 * (x - q)^T Sigma^{-1} (x - q))

at an observation point x.  Primitives carry no spatial phase variation of
their own; interference arises from the fixed per-primitive phases.  Virtual
point emitters provide the analytic spherical-wave oracle used for ground
truth.  Panel elements map deterministically onto primitives: the element
phase plus the round-trip geometric phase becomes the primitive phase.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NumericError
from .scene import RisPanel, Scene, TWO_PI, User, as_vec3, wrap_angle

COVARIANCE_EIGENVALUE_FLOOR = 1e-6  # m^2


@dataclass(frozen=True)
class GaussianPrimitive:
    """One complex Gaussian kernel: center, covariance, amplitude, phase."""

    center: np.ndarray      # (3,) meters
    covariance: np.ndarray  # (3, 3) symmetric positive definite, m^2
    amplitude: float
    phase: float            # radians, stored wrapped to [0, 2*pi)

    def __post_init__(self):
        object.__setattr__(self, "center", as_vec3(self.center, "primitive center"))
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (3, 3):
            raise NumericError(f"primitive covariance must be 3x3, got {cov.shape}")
        if not np.all(np.isfinite(cov)) or np.max(np.abs(cov - cov.T)) > 1e-9 * max(1.0, np.abs(cov).max()):
            raise NumericError("primitive covariance must be finite and symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NumericError(
                f"primitive at {self.center.tolist()} has non positive-definite covariance") from exc
        if not (math.isfinite(self.amplitude) and self.amplitude >= 0):
            raise NumericError(f"primitive amplitude must be finite and >= 0, got {self.amplitude}")
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "phase", float(wrap_angle(self.phase)))


def isotropic_covariance(sigma: float) -> np.ndarray:
    return (sigma ** 2) * np.eye(3)


def eval_primitive(primitive: GaussianPrimitive, point) -> complex:
    """Evaluate one kernel at a point; the inverse is applied by Cholesky solve."""
    point = as_vec3(point, "evaluation point")
    diff = point - primitive.center
    try:
        factor = cho_factor(primitive.covariance, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"primitive at {primitive.center.tolist()} has non positive-definite covariance") from exc
    m2 = float(diff @ cho_solve(factor, diff))
    return primitive.amplitude * np.exp(1j * primitive.phase - 0.5 * m2)


class RadiationField:
    """Packed, immutable-by-convention set of primitives plus user tags."""

    def __init__(self, centers, covariances, amplitudes, phases, wavelength,
                 user_tags=None):
        self.centers = np.asarray(centers, dtype=float).reshape(-1, 3)
        n = self.centers.shape[0]
        self.covariances = np.asarray(covariances, dtype=float).reshape(n, 3, 3)
        self.amplitudes = np.asarray(amplitudes, dtype=float).reshape(n)
        self.phases = wrap_angle(np.asarray(phases, dtype=float).reshape(n))
        self.wavelength = float(wavelength)
        if self.wavelength <= 0:
            raise NumericError(f"wavelength must be positive, got {wavelength}")
        if user_tags is None:
            user_tags = np.zeros(n, dtype=int)
        self.user_tags = np.asarray(user_tags, dtype=int).reshape(n)
        self._inverse_covariances = None

    @classmethod
    def from_primitives(cls, primitives, wavelength, user_tags=None) -> "RadiationField":
        primitives = list(primitives)
        if not primitives:
            return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0), np.zeros(0),
                       wavelength, np.zeros(0, dtype=int))
        return cls(
            np.stack([p.center for p in primitives]),
            np.stack([p.covariance for p in primitives]),
            np.array([p.amplitude for p in primitives]),
            np.array([p.phase for p in primitives]),
            wavelength,
            user_tags,
        )

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    def primitives(self) -> list:
        return [GaussianPrimitive(self.centers[i], self.covariances[i],
                                  float(self.amplitudes[i]), float(self.phases[i]))
                for i in range(self.size)]

    def inverse_covariances(self) -> np.ndarray:
        """Per-primitive inverse covariances, computed once via Cholesky solves."""
        if self._inverse_covariances is None:
            inv = np.empty_like(self.covariances)
            eye = np.eye(3)
            for i in range(self.size):
                try:
                    factor = cho_factor(self.covariances[i], lower=True)
                except np.linalg.LinAlgError as exc:
                    raise NumericError(
                        f"primitive {i} at {self.centers[i].tolist()} has "
                        "non positive-definite covariance") from exc
                inv[i] = cho_solve(factor, eye)
            self._inverse_covariances = inv
        return self._inverse_covariances

    def complex_amplitudes(self) -> np.ndarray:
        return self.amplitudes * np.exp(1j * self.phases)

    def select(self, mask) -> "RadiationField":
        mask = np.asarray(mask)
        return RadiationField(self.centers[mask], self.covariances[mask],
                              self.amplitudes[mask], self.phases[mask],
                              self.wavelength, self.user_tags[mask])

    def shifted_phases(self, offset: float) -> "RadiationField":
        return RadiationField(self.centers, self.covariances, self.amplitudes,
                              self.phases + offset, self.wavelength, self.user_tags)


def concat_fields(first: RadiationField, second: RadiationField) -> RadiationField:
    if first.wavelength != second.wavelength:
        raise NumericError("cannot concatenate fields with different wavelengths")
    return RadiationField(
        np.concatenate([first.centers, second.centers]),
        np.concatenate([first.covariances, second.covariances]),
        np.concatenate([first.amplitudes, second.amplitudes]),
        np.concatenate([first.phases, second.phases]),
        first.wavelength,
        np.concatenate([first.user_tags, second.user_tags]),
    )


def _mahalanobis_terms(field: RadiationField, points: np.ndarray):
    """Return (diffs, solved, m2) for a (k,3) batch of points."""
    inv = field.inverse_covariances()
    diffs = points[:, None, :] - field.centers[None, :, :]          # (k, n, 3)
    solved = np.einsum("nij,knj->kni", inv, diffs)                   # Sigma^{-1} (x - q)
    m2 = np.einsum("kni,kni->kn", diffs, solved)
    return diffs, solved, m2


def eval_field_many(field: RadiationField, points) -> np.ndarray:
    """Evaluate the superposed field at a (k, 3) batch of points."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if field.size == 0:
        return np.zeros(points.shape[0], dtype=complex)
    _, _, m2 = _mahalanobis_terms(field, points)
    terms = field.complex_amplitudes()[None, :] * np.exp(-0.5 * m2)
    return terms.sum(axis=1)


def eval_field(field: RadiationField, point) -> complex:
    return complex(eval_field_many(field, np.asarray(point, dtype=float)[None, :])[0])


def eval_field_gradient(field: RadiationField, point):
    """Field value and its spatial gradient dE/dx at one point.

    Each kernel differentiates to G_i(x) * (-Sigma_i^{-1} (x - q_i)); the
    phase factor is position-independent.
    """
    point = np.asarray(point, dtype=float)[None, :]
    if field.size == 0:
        return 0.0 + 0.0j, np.zeros(3, dtype=complex)
    _, solved, m2 = _mahalanobis_terms(field, point)
    terms = field.complex_amplitudes() * np.exp(-0.5 * m2[0])        # (n,)
    grad = -np.einsum("n,ni->i", terms, solved[0])
    return complex(terms.sum()), grad


def power_gradient(field: RadiationField, point):
    """|E(x)|^2 and its gradient 2*Re{conj(E) dE/dx}."""
    value, grad = eval_field_gradient(field, point)
    return abs(value) ** 2, 2.0 * np.real(np.conj(value) * grad)


@dataclass(frozen=True)
class VirtualEmitter:
    """Point source used as the analytic spherical-wave oracle."""

    position: np.ndarray
    gain: float
    phase: float

    def __post_init__(self):
        object.__setattr__(self, "position", as_vec3(self.position, "emitter position"))
        if not (math.isfinite(self.gain) and self.gain >= 0):
            raise NumericError(f"emitter gain must be finite and >= 0, got {self.gain}")
        object.__setattr__(self, "phase", float(self.phase))


def virtual_emitter_field(emitters, point, wavelength: float,
                          free_space_decay: bool = False) -> complex:
    """Exact analytic sum of spherical-wave terms at a point.

    Implements the literal path sum: gain * exp(j*phase) * exp(-j*2*pi*d/lambda).
    When `free_space_decay` is set, every term is additionally divided by the
    propagation distance (guarded at 1e-9 m) for physically plausible datasets.
    """
    if wavelength <= 0:
        raise NumericError(f"wavelength must be positive, got {wavelength}")
    point = as_vec3(point, "probe point")
    total = 0.0 + 0.0j
    for em in emitters:
        d = float(np.linalg.norm(point - em.position))
        term = em.gain * np.exp(1j * (em.phase - TWO_PI * d / wavelength))
        if free_space_decay:
            term = term / max(d, 1e-9)
        total += term
    return complex(total)


def ris_to_primitives(ris: RisPanel, tx_position, fas_centroid, wavelength: float,
                      base_covariance) -> list:
    """Map panel elements onto primitives.

    Element n becomes a kernel at its own center with phase
    theta_n + (2*pi/lambda) * (|tx - r_n| + |centroid - r_n|), wrapped, with the
    element amplitude and the shared base covariance.
    """
    if wavelength <= 0:
        raise NumericError(f"wavelength must be positive, got {wavelength}")
    tx_position = as_vec3(tx_position, "tx position")
    fas_centroid = as_vec3(fas_centroid, "fas centroid")
    base_covariance = np.asarray(base_covariance, dtype=float)
    thetas = ris.phase_values()
    d_tx = np.linalg.norm(ris.element_positions - tx_position[None, :], axis=1)
    d_rx = np.linalg.norm(ris.element_positions - fas_centroid[None, :], axis=1)
    psis = wrap_angle(thetas + TWO_PI / wavelength * (d_tx + d_rx))
    return [GaussianPrimitive(ris.element_positions[n], base_covariance,
                              float(ris.element_amplitudes[n]), float(psis[n]))
            for n in range(ris.size)]


def default_ris_covariance(ris: RisPanel, wavelength: float) -> np.ndarray:
    """Isotropic primitive covariance with sigma = half the element pitch.

    Single-element panels fall back to sigma = lambda/4 (half of the common
    half-wavelength pitch).
    """
    pitch = ris.element_pitch()
    sigma = 0.5 * pitch if pitch > 0 else 0.25 * wavelength
    return isotropic_covariance(sigma)


def direct_path_primitive(user: User, fas_centroid, wavelength: float,
                          spread_sigma: float) -> GaussianPrimitive:
    """Local direct-path field of a user over the antenna region.

    A single broad kernel centered on the region: free-space amplitude
    lambda/(4*pi*d) and the propagation phase -2*pi*d/lambda of the
    user-to-centroid distance.  The kernel spread should cover the movable
    region so the direct field is locally flat, matching a plane wave whose
    phase variation across a sub-wavelength region is ignored.
    """
    fas_centroid = as_vec3(fas_centroid, "fas centroid")
    d = float(np.linalg.norm(user.position - fas_centroid))
    if d <= 0:
        raise NumericError("user sits on the antenna centroid; direct path undefined")
    amplitude = wavelength / (4.0 * math.pi * d)
    phase = wrap_angle(-TWO_PI * d / wavelength)
    return GaussianPrimitive(fas_centroid, isotropic_covariance(spread_sigma),
                             amplitude, float(phase))


def composite_field(scene: Scene, user: User, tx_primitives,
                    ris_covariance=None, fas_centroid=None) -> RadiationField:
    """Environment primitives plus the panel primitives for one user's transmitter.

    All primitives are tagged with the user's index so desired and interference
    powers can be separated downstream.  Environment primitives are expected to
    already carry any learned attenuation scaling.
    """
    if fas_centroid is None:
        fas_centroid = scene.fas.centroid_world()
    if ris_covariance is None:
        ris_covariance = default_ris_covariance(scene.ris, scene.wavelength)
    user_index = scene.users.index(user)
    env = list(tx_primitives)
    ris_prims = ris_to_primitives(scene.ris, user.position, fas_centroid,
                                  scene.wavelength, ris_covariance)
    prims = env + ris_prims
    tags = np.full(len(prims), user_index, dtype=int)
    return RadiationField.from_primitives(prims, scene.wavelength, tags)


def apply_coefficients(field: RadiationField, mu, delta) -> RadiationField:
    """Scale amplitudes by mu and shift phases by delta, element-wise."""
    mu = np.asarray(mu, dtype=float).reshape(field.size)
    delta = np.asarray(delta, dtype=float).reshape(field.size)
    return RadiationField(field.centers, field.covariances,
                          field.amplitudes * mu, field.phases + delta,
                          field.wavelength, field.user_tags)


def received_sample(field: RadiationField, point, power_watts: float,
                    noise_watts: float, rng=None) -> complex:
    """One received sample sqrt(P)*E(x) + w with circular complex noise.

    `rng` may be a seed or a numpy Generator; zero noise power returns the
    noiseless value without consuming randomness.
    """
    if power_watts <= 0:
        raise NumericError(f"transmit power must be positive, got {power_watts}")
    if noise_watts < 0:
        raise NumericError(f"noise power must be >= 0, got {noise_watts}")
    value = math.sqrt(power_watts) * eval_field(field, point)
    if noise_watts == 0:
        return value
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    scale = math.sqrt(noise_watts / 2.0)
    noise = scale * (gen.standard_normal() + 1j * gen.standard_normal())
    return value + noise


# ---------------------------------------------------------------------------
# CSV serialization: qx,qy,qz, 6 upper-triangle covariance values, A, zeta, tag
# ---------------------------------------------------------------------------

_CSV_HEADER = ["qx", "qy", "qz", "sxx", "sxy", "sxz", "syy", "syz", "szz",
               "amplitude", "phase", "user_tag"]
_UPPER = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def save_field_csv(field: RadiationField, path) -> None:
    with open(Path(path), "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(_CSV_HEADER)
        for i in range(field.size):
            cov = field.covariances[i]
            row = [repr(float(v)) for v in field.centers[i]]
            row += [repr(float(cov[a, b])) for a, b in _UPPER]
            row += [repr(float(field.amplitudes[i])), repr(float(field.phases[i])),
                    str(int(field.user_tags[i]))]
            writer.writerow(row)


def load_field_csv(path, wavelength: float) -> RadiationField:
    with open(Path(path), newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != _CSV_HEADER:
            raise NumericError(f"unexpected primitive CSV header in {path}: {header}")
        centers, covs, amps, phases, tags = [], [], [], [], []
        for row in reader:
            vals = [float(v) for v in row[:11]]
            centers.append(vals[0:3])
            cov = np.zeros((3, 3))
            for value, (a, b) in zip(vals[3:9], _UPPER):
                cov[a, b] = value
                cov[b, a] = value
            covs.append(cov)
            amps.append(vals[9])
            phases.append(vals[10])
            tags.append(int(row[11]))
    if not centers:
        return RadiationField.from_primitives([], wavelength)
    return RadiationField(np.array(centers), np.array(covs), np.array(amps),
                          np.array(phases), wavelength, np.array(tags))
