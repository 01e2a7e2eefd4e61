"""Synthetic scenes, desk-scale experiment geometry, and oracle datasets.

Ground truth comes from virtual point emitters: the analytic spherical-wave
sum provides spatial field checks, and a Gaussian angular response around each
emitter direction provides angular power spectra for training datasets.  The
angular window exp(-sin(phi)^2 / (2 sigma^2)) is exactly the footprint of an
isotropic kernel of spatial spread sigma*range placed at the emitter, so a
well-trained attenuation network can reproduce these spectra.
"""

from __future__ import annotations

import math

import numpy as np

from .datasets import SpectrumSample
from .errors import ValidationError
from .field import (GaussianPrimitive, VirtualEmitter, direct_path_primitive,
                    isotropic_covariance)
from .scene import (FasRegion, Pose, RisPanel, Scene, TWO_PI, User, wrap_angle)
from .splatting import AngularGrid


def default_min_spacing(width: float, count: int, wavelength: float) -> float:
    """Usable spacing default: half a wavelength, shrunk to half the uniform
    grid pitch when `count` antennas would not otherwise fit (or move) in the
    box."""
    if count <= 1:
        return 0.5 * wavelength
    side = math.ceil(math.sqrt(count))
    grid_pitch = width / (side - 1) if side > 1 else width
    return min(0.5 * wavelength, 0.5 * grid_pitch)


def uniform_grid_positions(count: int, width: float) -> np.ndarray:
    """First `count` points of the smallest uniform square grid over [0, W]^2."""
    side = math.ceil(math.sqrt(count))
    if side == 1:
        return np.array([[width / 2.0, width / 2.0]])
    ticks = np.linspace(0.0, width, side)
    uu, vv = np.meshgrid(ticks, ticks, indexing="ij")
    pts = np.stack([uu.ravel(), vv.ravel()], axis=1)
    return pts[:count]


def cascade_amplitude(wavelength: float, d_tx_panel: float, d_panel_rx: float) -> float:
    """Reflection strength absorbing the two-hop free-space amplitude decay.

    The Gaussian panel mapping carries propagation delay in its phases only,
    so the element amplitude is the natural place for the cascade
    lambda^2 / ((4*pi)^2 * d1 * d2) scale; without it the reflected field
    would dwarf every direct-path term by orders of magnitude.
    """
    return wavelength ** 2 / ((4.0 * math.pi) ** 2
                              * max(d_tx_panel, 1e-9) * max(d_panel_rx, 1e-9))


def panel_grid(center, n_elements: int, pitch: float, plane: str = "xz") -> np.ndarray:
    """Element centers of a roughly square panel around `center`."""
    center = np.asarray(center, dtype=float)
    cols = math.ceil(math.sqrt(n_elements))
    rows = math.ceil(n_elements / cols)
    axis_a = {"xz": np.array([1.0, 0, 0]), "yz": np.array([0, 1.0, 0])}[plane]
    axis_b = np.array([0, 0, 1.0])
    points = []
    for idx in range(n_elements):
        r, c = divmod(idx, cols)
        offset = (c - (cols - 1) / 2.0) * pitch * axis_a + (r - (rows - 1) / 2.0) * pitch * axis_b
        points.append(center + offset)
    return np.asarray(points)


def generate_synthetic_scene(n_emitters: int, extents=(6.0, 6.0, 3.0), seed: int = 0,
                             *, wavelength: float = 0.1, n_ris: int = 16,
                             levels: int = 4, m_antennas: int = 4,
                             power_dbm: float = 10.0, noise_dbm: float = -90.0,
                             gain_range=(0.5, 1.0)):
    """Deterministic synthetic scene plus its virtual-emitter ground truth.

    Emitters are placed uniformly inside the box [0, ex] x [0, ey] x [0, ez];
    the returned emitters are the analytic oracle for field checks and the
    scene's point cloud holds their positions.
    """
    if n_emitters < 1:
        raise ValidationError(f"emitter count must be >= 1, got {n_emitters}")
    extents = np.asarray(extents, dtype=float)
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, 1.0, size=(n_emitters, 3)) * extents[None, :]
    gains = rng.uniform(gain_range[0], gain_range[1], size=n_emitters)
    phases = rng.uniform(0.0, TWO_PI, size=n_emitters)
    emitters = [VirtualEmitter(positions[i], float(gains[i]), float(phases[i]))
                for i in range(n_emitters)]

    rx_origin = np.array([0.15, 0.15, 0.5]) * extents
    rx_pose = Pose.identity(rx_origin)
    width = wavelength
    spacing = default_min_spacing(width, m_antennas, wavelength)
    fas = FasRegion(
        frame=Pose(rx_origin - np.array([width / 2, width / 2, 0.0]), np.eye(3)),
        width=width,
        min_spacing=spacing,
        positions=uniform_grid_positions(m_antennas, width),
    )
    ris_center = np.array([0.4, 0.85, 0.5]) * extents
    user = User(position=np.array([0.8, 0.3, 0.5]) * extents,
                power_dbm=power_dbm, desired=True)
    amplitude = cascade_amplitude(wavelength,
                                  float(np.linalg.norm(user.position - ris_center)),
                                  float(np.linalg.norm(ris_center - rx_origin)))
    ris = RisPanel(
        element_positions=panel_grid(ris_center, n_ris, 0.5 * wavelength),
        phase_indices=np.zeros(n_ris, dtype=int),
        levels=levels,
        element_amplitudes=np.full(n_ris, amplitude),
    )
    scene = Scene(rx_pose=rx_pose, fas=fas, ris=ris, users=(user,),
                  wavelength=wavelength, noise_dbm=noise_dbm,
                  point_cloud=positions.astype(np.float32))
    return scene, emitters


def demo_scene(seed: int = 0, *, n_ris: int = 64, m_antennas: int = 16,
               levels: int = 4, n_interferers: int = 2,
               w_over_lambda: float = 1.0, wavelength: float = 0.1,
               power_dbm: float = 10.0, noise_dbm: float = -90.0,
               ris_center=None) -> Scene:
    """Desk-scale multi-user scene with seeded geometry jitter."""
    rng = np.random.default_rng(seed)
    rx_origin = np.array([0.0, 0.0, 1.5])
    width = w_over_lambda * wavelength
    spacing = default_min_spacing(width, m_antennas, wavelength)
    fas = FasRegion(
        frame=Pose(rx_origin - np.array([width / 2, width / 2, 0.0]), np.eye(3)),
        width=width,
        min_spacing=spacing,
        positions=uniform_grid_positions(m_antennas, width),
    )
    if ris_center is None:
        ris_center = np.array([2.5, 3.0, 1.5])
    ris_center = np.asarray(ris_center, dtype=float) + rng.normal(0.0, 0.05, 3)
    users = [User(position=np.array([5.0, 0.5, 1.5]) + rng.normal(0.0, 0.3, 3),
                  power_dbm=power_dbm, desired=True)]
    centroid = rx_origin
    amplitude = cascade_amplitude(wavelength,
                                  float(np.linalg.norm(users[0].position - ris_center)),
                                  float(np.linalg.norm(ris_center - centroid)))
    ris = RisPanel(
        element_positions=panel_grid(ris_center, n_ris, 0.5 * wavelength),
        phase_indices=np.zeros(n_ris, dtype=int),
        levels=levels,
        element_amplitudes=np.full(n_ris, amplitude),
    )
    base_interferers = np.array([[4.2, 2.6, 1.4], [3.4, -2.7, 1.6], [5.6, -1.2, 1.2],
                                 [2.8, 2.1, 1.8]])
    for j in range(n_interferers):
        users.append(User(position=base_interferers[j % 4] + rng.normal(0.0, 0.3, 3),
                          power_dbm=power_dbm, desired=False))
    return Scene(rx_pose=Pose.identity(rx_origin), fas=fas, ris=ris,
                 users=tuple(users), wavelength=wavelength, noise_dbm=noise_dbm)


def local_scatter_primitives(scene: Scene, user: User, count: int, rng,
                             amplitude_scale: float = None) -> list:
    """Sub-wavelength environment structure around the antenna region.

    A few kernels with spreads of a fraction of a wavelength and random phases
    stand in for the learned local standing-wave pattern of one user; their
    interference makes antenna placement matter.
    """
    lam = scene.wavelength
    centroid = scene.fas.centroid_world()
    if amplitude_scale is None:
        d = float(np.linalg.norm(user.position - centroid))
        amplitude_scale = lam / (4.0 * math.pi * max(d, 1e-9))
    width = scene.fas.width
    prims = []
    for _ in range(count):
        offset = rng.uniform(-0.9, 0.9, 3) * np.array([width, width, 0.4 * width])
        sigma = lam * rng.uniform(0.25, 0.6)
        amplitude = amplitude_scale * rng.uniform(0.4, 1.0)
        phase = rng.uniform(0.0, TWO_PI)
        prims.append(GaussianPrimitive(centroid + offset, isotropic_covariance(sigma),
                                       float(amplitude), float(phase)))
    return prims


def default_environment(scene: Scene, seed: int = 0, n_scatter: int = 4,
                        include_direct: bool = True) -> dict:
    """Per-user environment primitives: direct-path kernel plus local scatter."""
    rng = np.random.default_rng(seed)
    centroid = scene.fas.centroid_world()
    spread = 4.0 * scene.fas.width
    env = {}
    for idx, user in enumerate(scene.users):
        prims = []
        if include_direct:
            prims.append(direct_path_primitive(user, centroid, scene.wavelength, spread))
        if n_scatter > 0:
            prims.extend(local_scatter_primitives(scene, user, n_scatter, rng))
        env[idx] = prims
    return env


def beam_spread_covariance(scene: Scene, factor: float = 5.0) -> np.ndarray:
    """Panel-primitive covariance spanning the panel-to-receiver range.

    The half-pitch default localizes primitives at the panel, which is the
    right picture for angular rendering; for field evaluation at the antennas
    the kernel must instead cover the propagation distance, otherwise the
    reflected field underflows to zero before it reaches the receiver.
    """
    centroid = scene.fas.centroid_world()
    panel_center = scene.ris.element_positions.mean(axis=0)
    distance = float(np.linalg.norm(panel_center - centroid))
    return isotropic_covariance(factor * max(distance, scene.wavelength))


# ---------------------------------------------------------------------------
# Emitter-oracle angular spectra and datasets
# ---------------------------------------------------------------------------

def emitter_directions(emitters, rx_pose: Pose) -> np.ndarray:
    """Unit direction of each emitter in receiver-local coordinates."""
    out = []
    for em in emitters:
        local = rx_pose.to_local(em.position)
        norm = np.linalg.norm(local)
        if norm == 0:
            raise ValidationError("emitter coincides with the receiver origin")
        out.append(local / norm)
    return np.asarray(out)


def _angular_window(bin_dirs: np.ndarray, emitter_dirs: np.ndarray,
                    beam_sigma: float) -> np.ndarray:
    """Gaussian angular response exp(-sin^2(phi)/(2 sigma^2)) on the front lobe."""
    cosang = np.clip(bin_dirs @ emitter_dirs.T, -1.0, 1.0)
    sin2 = 1.0 - cosang ** 2
    window = np.exp(-0.5 * sin2 / beam_sigma ** 2)
    return np.where(cosang > 0.0, window, 0.0)


def emitter_angular_spectrum(emitters, rx_pose: Pose, grid: AngularGrid,
                             beam_sigma: float, gains=None, phases=None) -> np.ndarray:
    """Analytic angular power grid: coherent windowed sum over emitters."""
    if not emitters:
        return np.zeros(grid.shape)
    dirs = emitter_directions(emitters, rx_pose)
    if gains is None:
        gains = np.array([em.gain for em in emitters])
    if phases is None:
        phases = np.array([em.phase for em in emitters])
    window = _angular_window(grid.local_directions(), dirs, beam_sigma)
    amplitudes = window * (gains * np.exp(1j * phases))[None, :]
    return (np.abs(amplitudes.sum(axis=1)) ** 2).reshape(grid.shape)


def well_separated_emitters(count: int, rx_pose: Pose, grid: AngularGrid,
                            box_lo, box_hi, seed: int = 0,
                            min_separation_bins: float = 2.0,
                            min_range: float = 1.0,
                            gain_range=(0.5, 1.0)) -> list:
    """Emitters rejection-sampled so their directions stay bins apart."""
    rng = np.random.default_rng(seed)
    box_lo = np.asarray(box_lo, dtype=float)
    box_hi = np.asarray(box_hi, dtype=float)
    bin_width = min(TWO_PI / grid.n_lon, math.pi / grid.n_lat)
    min_angle = min_separation_bins * bin_width
    chosen, dirs = [], []
    attempts = 0
    while len(chosen) < count:
        attempts += 1
        if attempts > 20000:
            raise ValidationError("could not place emitters with the requested separation")
        pos = rng.uniform(box_lo, box_hi)
        local = rx_pose.to_local(pos)
        norm = np.linalg.norm(local)
        if norm < min_range:
            continue
        direction = local / norm
        if any(math.acos(float(np.clip(direction @ d, -1, 1))) < min_angle for d in dirs):
            continue
        gain = float(rng.uniform(*gain_range))
        phase = float(rng.uniform(0.0, TWO_PI))
        chosen.append(VirtualEmitter(pos, gain, phase))
        dirs.append(direction)
    return chosen


def bin_centered_emitters(count: int, rx_pose: Pose, grid: AngularGrid,
                          box_lo, box_hi, seed: int = 0,
                          min_separation_bins: int = 2,
                          min_range: float = 1.0,
                          lat_band: float = math.pi / 4,
                          gain_range=(0.5, 1.0)) -> list:
    """Emitters placed exactly on angular bin centers inside a box.

    Bin-centered directions with at least `min_separation_bins` of index
    separation keep every emitter's footprint inside its own bin, so the
    coefficient-scaled render can match the windowed oracle exactly; ranges
    are drawn uniformly up to the box boundary along each direction.
    """
    rng = np.random.default_rng(seed)
    box_lo = np.asarray(box_lo, dtype=float)
    box_hi = np.asarray(box_hi, dtype=float)
    lats = grid.lat_centers
    lons = grid.lon_centers
    candidates = [(i, j) for i in range(grid.n_lat) if abs(lats[i]) <= lat_band
                  for j in range(grid.n_lon)]
    chosen, out = [], []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 20000:
            raise ValidationError("could not place bin-centered emitters in the box")
        i, j = candidates[int(rng.integers(0, len(candidates)))]
        if any(max(abs(i - ci), min(abs(j - cj), grid.n_lon - abs(j - cj)))
               < min_separation_bins for ci, cj in chosen):
            continue
        local = np.array([math.cos(lats[i]) * math.cos(lons[j]),
                          math.cos(lats[i]) * math.sin(lons[j]),
                          math.sin(lats[i])])
        direction = rx_pose.axes.T @ local
        # largest range staying inside the box along this direction
        with np.errstate(divide="ignore"):
            t_hi = np.where(direction > 0, (box_hi - rx_pose.origin) / direction, np.inf)
            t_lo = np.where(direction < 0, (box_lo - rx_pose.origin) / direction, np.inf)
        r_max = 0.95 * float(np.min(np.minimum(t_hi, t_lo)))
        if r_max <= min_range * 1.05:
            continue
        r = float(rng.uniform(min_range, r_max))
        gain = float(rng.uniform(*gain_range))
        phase = float(rng.uniform(0.0, TWO_PI))
        chosen.append((i, j))
        out.append(VirtualEmitter(rx_pose.origin + r * direction, gain, phase))
    return out


def emitter_primitives(emitters, rx_pose: Pose, beam_sigma: float) -> list:
    """Unit-amplitude kernels at the emitter positions.

    The isotropic spread beam_sigma*range reproduces the dataset's angular
    window exactly, so the learned attenuation only has to supply per-point
    gain (and phase, when bins interfere).
    """
    prims = []
    for em in emitters:
        r = float(np.linalg.norm(em.position - rx_pose.origin))
        prims.append(GaussianPrimitive(em.position,
                                       isotropic_covariance(beam_sigma * max(r, 1e-6)),
                                       1.0, 0.0))
    return prims


def sample_tx_positions(count: int, box_lo, box_hi, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(np.asarray(box_lo, float), np.asarray(box_hi, float),
                       size=(count, 3))


def synthesize_spectrum_samples(emitters, rx_pose: Pose, grid: AngularGrid,
                                tx_positions, wavelength: float,
                                beam_sigma: float, peak_amplitude: float = 0.9) -> list:
    """Oracle dataset: one angular spectrum per transmitter position.

    Each emitter re-radiates the transmitter's signal with the round-trip
    propagation phase -2*pi*(d_tx + d_rx)/lambda added to its own phase and a
    1/(d_tx*d_rx) amplitude decay; the whole dataset is then rescaled so the
    strongest windowed amplitude equals `peak_amplitude`.
    """
    tx_positions = np.atleast_2d(np.asarray(tx_positions, dtype=float))
    dirs = emitter_directions(emitters, rx_pose)
    window = _angular_window(grid.local_directions(), dirs, beam_sigma)
    base_gain = np.array([em.gain for em in emitters])
    base_phase = np.array([em.phase for em in emitters])
    positions = np.stack([em.position for em in emitters])
    d_rx = np.linalg.norm(positions - rx_pose.origin[None, :], axis=1)
    fields = []
    for tx in tx_positions:
        d_tx = np.linalg.norm(positions - tx[None, :], axis=1)
        gains = base_gain / np.maximum(d_tx * d_rx, 1e-9)
        phases = base_phase - TWO_PI * (d_tx + d_rx) / wavelength
        fields.append((window * (gains * np.exp(1j * phases))[None, :]).sum(axis=1))
    peak = max(float(np.abs(f).max()) for f in fields)
    scale = peak_amplitude / peak if peak > 0 else 1.0
    return [SpectrumSample(tx_positions[i], (np.abs(fields[i] * scale) ** 2).reshape(grid.shape))
            for i in range(tx_positions.shape[0])]
