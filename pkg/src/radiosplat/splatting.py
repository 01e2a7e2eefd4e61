"""Angular projection and electromagnetic splatting.

Primitives are projected into a longitude/latitude grid seen from the receiver
pose.  Each grid bin accumulates the contributions of the primitives whose
angular footprint covers it, walked in increasing range order while a running
complex transmittance multiplies in the per-primitive attenuation
coefficients.  The per-bin rule, for gathered primitives sorted by
(range, index):

    T = 1
    R_bin += T * C_i          with C_i = A_i exp(j*zeta_i) * w_i(bin)
    T *= mu_i * exp(j*delta_i)

where w_i(bin) evaluates the primitive's kernel at the closest-approach point
of the bin-center ray (clamped to the forward half-line), and a primitive is
gathered when that closest-approach Mahalanobis distance is at most 3.

The computation is blocked over bins; block boundaries depend only on the
problem size, so sequential and multi-worker runs produce bit-identical
spectra.
"""

from __future__ import annotations

import math
import multiprocessing as mp
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericError, ValidationError
from .field import RadiationField
from .scene import Pose, TWO_PI

FOOTPRINT_CUTOFF = 3.0          # Mahalanobis inclusion radius
_BLOCK_BUDGET = 1_000_000       # bins*primitives elements per block


@dataclass(frozen=True)
class AngularGrid:
    """Uniform longitude/latitude grid: lon in [-pi, pi), lat in [-pi/2, pi/2]."""

    n_lon: int
    n_lat: int

    def __post_init__(self):
        if self.n_lon < 1 or self.n_lat < 1:
            raise ValidationError(f"grid dimensions must be >= 1, got {self.n_lat}x{self.n_lon}")

    @property
    def shape(self) -> tuple:
        return (self.n_lat, self.n_lon)

    @property
    def n_bins(self) -> int:
        return self.n_lat * self.n_lon

    @property
    def lon_centers(self) -> np.ndarray:
        width = TWO_PI / self.n_lon
        return -math.pi + (np.arange(self.n_lon) + 0.5) * width

    @property
    def lat_centers(self) -> np.ndarray:
        height = math.pi / self.n_lat
        return -math.pi / 2 + (np.arange(self.n_lat) + 0.5) * height

    def local_directions(self) -> np.ndarray:
        """Unit direction per bin in receiver-local coordinates, shape (n_bins, 3)."""
        lats = self.lat_centers[:, None]
        lons = self.lon_centers[None, :]
        x = np.cos(lats) * np.cos(lons)
        y = np.cos(lats) * np.sin(lons)
        z = np.broadcast_to(np.sin(lats), x.shape)
        return np.stack([x, y, z], axis=-1).reshape(-1, 3)

    def bin_index(self, lon: float, lat: float) -> tuple:
        """(lat_index, lon_index) of the bin containing the given angles."""
        i_lon = int(np.clip(math.floor((lon + math.pi) / (TWO_PI / self.n_lon)),
                            0, self.n_lon - 1))
        i_lat = int(np.clip(math.floor((lat + math.pi / 2) / (math.pi / self.n_lat)),
                            0, self.n_lat - 1))
        return i_lat, i_lon


@dataclass(frozen=True)
class SplatCoefficients:
    """Per-primitive transmittance amplitude mu in [0,1] and phase offset delta."""

    mu: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        delta = np.asarray(self.delta, dtype=float).reshape(-1)
        if mu.shape != delta.shape:
            raise ValidationError("mu and delta must have matching lengths")
        if np.any(mu < 0) or np.any(mu > 1 + 1e-12):
            raise ValidationError("transmittance amplitudes must lie in [0, 1]")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "delta", np.mod(delta, TWO_PI))

    @classmethod
    def ones(cls, count: int) -> "SplatCoefficients":
        return cls(np.ones(count), np.zeros(count))

    @property
    def size(self) -> int:
        return self.mu.shape[0]

    def complex_values(self) -> np.ndarray:
        return self.mu * np.exp(1j * self.delta)


class AngularSpectrum:
    """Complex per-bin accumulation and its power grid."""

    def __init__(self, grid: AngularGrid, complex_field: np.ndarray):
        complex_field = np.asarray(complex_field, dtype=complex).reshape(grid.shape)
        self.grid = grid
        self.complex_field = complex_field
        self.power = np.abs(complex_field) ** 2

    @property
    def shape(self) -> tuple:
        return self.grid.shape


def project(point, rx_pose: Pose) -> tuple:
    """Angular coordinates (lon, lat) of a world point in the receiver frame.

    lon = atan2(y, x) with atan2(0, 0) defined as 0; lat = asin(z / |p|).
    """
    local = rx_pose.to_local(point)
    norm = float(np.linalg.norm(local))
    if norm == 0.0:
        raise NumericError("cannot project the receiver origin itself")
    lon = math.atan2(local[1], local[0])
    lat = math.asin(np.clip(local[2] / norm, -1.0, 1.0))
    return lon, lat


# ---------------------------------------------------------------------------
# Core footprint geometry, shared by rendering and the training chain
# ---------------------------------------------------------------------------

def _sorted_field_arrays(field: RadiationField, rx_pose: Pose):
    """Depth-sort primitives by (range, original index); return packed terms."""
    ranges = np.linalg.norm(field.centers - rx_pose.origin[None, :], axis=1)
    order = np.argsort(ranges, kind="stable")
    inv = field.inverse_covariances()[order]
    centers = field.centers[order]
    diffs = rx_pose.origin[None, :] - centers                    # d_i = origin - q_i
    solved = np.einsum("nij,nj->ni", inv, diffs)                 # A_i d_i
    d_ad = np.einsum("ni,ni->n", diffs, solved)
    weights_phase = field.amplitudes[order] * np.exp(1j * field.phases[order])
    return order, centers, inv, diffs, solved, d_ad, weights_phase


def _footprint_block(directions, inv, solved, d_ad):
    """Footprint weight and inclusion mask for a block of bin directions.

    For ray x(t) = origin + t*u the squared Mahalanobis distance to a primitive
    is quadratic in t; its minimizer over t >= 0 gives the closest-approach
    weight exp(-m2/2) and the inclusion test m2 <= cutoff^2.
    """
    u_ad = np.einsum("bj,nj->bn", directions, solved)            # u^T A d
    u_a = np.einsum("bj,nji->bni", directions, inv)              # u^T A
    u_au = np.einsum("bni,bi->bn", u_a, directions)              # u^T A u  (> 0)
    t_star = np.maximum(-u_ad / u_au, 0.0)
    m2 = d_ad[None, :] + 2.0 * t_star * u_ad + t_star ** 2 * u_au
    mask = m2 <= FOOTPRINT_CUTOFF ** 2
    weight = np.where(mask, np.exp(-0.5 * np.minimum(m2, 200.0)), 0.0)
    return weight, mask


def _block_bounds(n_bins: int, n_prims: int):
    rows = max(16, _BLOCK_BUDGET // max(n_prims, 1))
    starts = list(range(0, n_bins, rows))
    return [(s, min(s + rows, n_bins)) for s in starts]


def _splat_block(args):
    (start, stop), directions, inv, solved, d_ad, amp_phase, coeff = args
    weight, mask = _footprint_block(directions[start:stop], inv, solved, d_ad)
    contrib = weight * amp_phase[None, :]
    factors = np.where(mask, coeff[None, :], 1.0 + 0.0j)
    running = np.cumprod(factors, axis=1)
    transmittance = np.concatenate(
        [np.ones((weight.shape[0], 1), dtype=complex), running[:, :-1]], axis=1)
    return (transmittance * contrib).sum(axis=1)


def splat(field: RadiationField, coefficients: SplatCoefficients, rx_pose: Pose,
          grid: AngularGrid, workers: int = 1) -> AngularSpectrum:
    """Render the angular spectrum of a field under the given transmittances.

    The result is independent of primitive storage order (sorting is canonical)
    and of `workers` (identical fixed-size bin blocks are computed either
    serially or in a process pool and concatenated in order).
    """
    if coefficients.size != field.size:
        raise ValidationError(
            f"coefficient count {coefficients.size} != primitive count {field.size}")
    if field.size == 0:
        return AngularSpectrum(grid, np.zeros(grid.n_bins, dtype=complex))
    order, _, inv, _, solved, d_ad, amp_phase = _sorted_field_arrays(field, rx_pose)
    coeff = coefficients.complex_values()[order]
    directions = grid.local_directions() @ rx_pose.axes          # world-frame rays
    blocks = _block_bounds(grid.n_bins, field.size)
    payload = [(b, directions, inv, solved, d_ad, amp_phase, coeff) for b in blocks]
    if workers <= 1 or len(blocks) == 1:
        parts = [_splat_block(p) for p in payload]
    else:
        ctx = mp.get_context("fork")
        with ctx.Pool(processes=workers) as pool:
            parts = pool.map(_splat_block, payload)
    return AngularSpectrum(grid, np.concatenate(parts))


# ---------------------------------------------------------------------------
# Cached forward / reverse pass for the training chain
# ---------------------------------------------------------------------------

@dataclass
class SplatCache:
    """Everything the reverse pass needs from a coefficient-scaled forward."""

    grid: AngularGrid
    order: np.ndarray            # sort permutation (sorted -> original index)
    mask: np.ndarray             # (n_bins, n) gather mask, sorted order
    base: np.ndarray             # (n_bins, n) complex w * A * exp(j zeta)
    coeff: np.ndarray            # (n,) complex coefficients, sorted order
    transmittance: np.ndarray    # (n_bins, n) exclusive prefix products
    accumulated: np.ndarray      # (n_bins,) complex totals
    power: np.ndarray            # (n_bins,) |R|^2


def splat_forward_cached(field: RadiationField, mu, delta, rx_pose: Pose,
                         grid: AngularGrid) -> tuple:
    """Coefficient-scaled splat used by the learned attenuation chain.

    The coefficients act twice, matching the depth-ordered accumulation rule:
    primitive i's own contribution is scaled by c_i = mu_i exp(j delta_i), and
    c_i also multiplies into the running transmittance applied to everything
    behind it.  Returns (AngularSpectrum, SplatCache).
    """
    mu = np.asarray(mu, dtype=float).reshape(field.size)
    delta = np.asarray(delta, dtype=float).reshape(field.size)
    if field.size == 0:
        spectrum = AngularSpectrum(grid, np.zeros(grid.n_bins, dtype=complex))
        cache = SplatCache(grid, np.zeros(0, dtype=int), np.zeros((grid.n_bins, 0), bool),
                           np.zeros((grid.n_bins, 0), complex), np.zeros(0, complex),
                           np.zeros((grid.n_bins, 0), complex),
                           np.zeros(grid.n_bins, complex), np.zeros(grid.n_bins))
        return spectrum, cache
    order, _, inv, _, solved, d_ad, amp_phase = _sorted_field_arrays(field, rx_pose)
    coeff = (mu * np.exp(1j * delta))[order]
    directions = grid.local_directions() @ rx_pose.axes
    weight, mask = _footprint_block(directions, inv, solved, d_ad)
    base = weight * amp_phase[None, :]
    factors = np.where(mask, coeff[None, :], 1.0 + 0.0j)
    running = np.cumprod(factors, axis=1)
    transmittance = np.concatenate(
        [np.ones((grid.n_bins, 1), dtype=complex), running[:, :-1]], axis=1)
    accumulated = (transmittance * base * coeff[None, :]).sum(axis=1)
    spectrum = AngularSpectrum(grid, accumulated)
    cache = SplatCache(grid, order, mask, base, coeff, transmittance,
                       accumulated, np.abs(accumulated) ** 2)
    return spectrum, cache


def splat_backward(cache: SplatCache, power_sensitivity) -> tuple:
    """Reverse pass: d(loss)/d(mu), d(loss)/d(delta) in original primitive order.

    `power_sensitivity` is d(loss)/d(power) per bin.  The forward accumulation
    per bin is the scan  R += T*base_i*c_i ; T *= F_i  with F_i = c_i on
    gathered primitives and 1 elsewhere; its adjoint walks the primitives in
    reverse, so no division by potentially tiny coefficients occurs.
    """
    n = cache.coeff.shape[0]
    sens = np.asarray(power_sensitivity, dtype=float).reshape(-1)
    lam = sens * np.conj(cache.accumulated)                      # (n_bins,)
    bar_c_sorted = np.zeros(n, dtype=complex)
    bar_t = np.zeros(lam.shape[0], dtype=complex)
    for i in range(n - 1, -1, -1):
        t_col = cache.transmittance[:, i]
        base_col = cache.base[:, i]
        mask_col = cache.mask[:, i]
        bar_c_sorted[i] = np.sum(lam * t_col * base_col) + np.sum(bar_t * t_col * mask_col)
        factor = np.where(mask_col, cache.coeff[i], 1.0 + 0.0j)
        bar_t = bar_t * factor + lam * base_col * cache.coeff[i]
    mu_sorted = np.abs(cache.coeff)
    phase_sorted = np.exp(1j * np.angle(cache.coeff))
    d_mu_sorted = 2.0 * np.real(bar_c_sorted * phase_sorted)
    d_delta_sorted = -2.0 * mu_sorted * np.imag(bar_c_sorted * phase_sorted)
    d_mu = np.zeros(n)
    d_delta = np.zeros(n)
    d_mu[cache.order] = d_mu_sorted
    d_delta[cache.order] = d_delta_sorted
    return d_mu, d_delta


# ---------------------------------------------------------------------------
# Metrics and exports
# ---------------------------------------------------------------------------

def spectrum_metrics(reference: AngularSpectrum, candidate: AngularSpectrum) -> tuple:
    """(mse, ssim, psnr) between two spectra over their power grids.

    PSNR uses the reference's peak power; identical spectra give (0, 1, inf).
    """
    if reference.shape != candidate.shape:
        raise ValidationError(
            f"spectrum grids differ: {reference.shape} vs {candidate.shape}")
    from .srn import SsimConfig, ssim as ssim_fn  # local import avoids a cycle
    diff = reference.power - candidate.power
    mse = float(np.mean(diff ** 2))
    peak = float(reference.power.max())
    cfg = SsimConfig.for_dynamic_range(max(peak, 1e-12))
    ssim_value = ssim_fn(reference.power, candidate.power, cfg)
    psnr = math.inf if mse == 0 else 10.0 * math.log10(max(peak, 1e-300) ** 2 / mse)
    return mse, ssim_value, psnr


def save_spectrum_csv(spectrum: AngularSpectrum, path) -> None:
    """Power grid as CSV, one latitude row per line, longitudes as columns."""
    lines = []
    for row in spectrum.power:
        lines.append(",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_spectrum_csv(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append([float(v) for v in line.split(",")])
    return np.asarray(rows, dtype=float)


def save_spectrum_pgm(spectrum: AngularSpectrum, path, sidecar_path=None) -> None:
    """8-bit binary P5 greymap of log-normalized power plus a sidecar.

    The sidecar records the log floor and the normalization bounds so the
    quantized image can be mapped back to approximate power values.
    """
    path = Path(path)
    power = spectrum.power
    peak = float(power.max())
    floor = peak * 1e-6 if peak > 0 else 1.0
    log_power = np.log10(np.maximum(power, floor))
    lo, hi = float(log_power.min()), float(log_power.max())
    if hi > lo:
        scaled = (log_power - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(log_power)
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    n_lat, n_lon = spectrum.shape
    header = f"P5\n{n_lon} {n_lat}\n255\n".encode("ascii")
    path.write_bytes(header + pixels.tobytes())
    if sidecar_path is None:
        sidecar_path = path.with_suffix(path.suffix + ".norm.txt")
    Path(sidecar_path).write_text(
        "log10_floor={!r}\nlog10_min={!r}\nlog10_max={!r}\n".format(floor, lo, hi),
        encoding="utf-8")
