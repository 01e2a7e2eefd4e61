"""Scene description: world geometry, panel/antenna configuration, and JSON I/O.

A scene bundles everything the simulator needs: the receiver pose, the fluid
antenna region, the reflecting panel, the users, the carrier wavelength, the
noise power, and an optional environment point cloud.  Configuration files use
dBm for powers and degrees are never used; angles are radians throughout and
all numerics run in linear watts.

Scene file schema (UTF-8 JSON):
    wavelength_m      carrier wavelength in meters
    noise_dbm         receiver noise power in dBm
    rx_pose           {"origin": [x,y,z], "axes": [[...],[...],[...]]}
    fas               {"frame": pose, "W_m": edge, "D_m": spacing,
                       "antennas": [[u,v], ...]}
    ris               {"elements": [[x,y,z], ...], "phase_indices": [...],
                       "Lc": levels, "amplitudes": [...]}
    users             [{"position": [x,y,z], "power_dbm": p, "desired": bool}]
    point_cloud_path  optional path to little-endian float32 xyz triples
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SchemaError, ValidationError

TWO_PI = 2.0 * math.pi

ORTHONORMAL_TOL = 1e-9


def dbm_to_watts(p_dbm: float) -> float:
    return 10.0 ** ((p_dbm - 30.0) / 10.0)


def watts_to_dbm(p_watts: float) -> float:
    return 10.0 * math.log10(p_watts) + 30.0


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into [0, 2*pi)."""
    return np.mod(theta, TWO_PI)


def as_vec3(value, name: str = "vector") -> np.ndarray:
    v = np.asarray(value, dtype=float)
    if v.shape != (3,):
        raise ValidationError(f"{name} must have exactly 3 components, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} must be finite, got {v.tolist()}")
    return v


@dataclass(frozen=True)
class Pose:
    """Rigid frame: origin plus a 3x3 rotation whose rows are the local axes."""

    origin: np.ndarray
    axes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", as_vec3(self.origin, "pose origin"))
        axes = np.asarray(self.axes, dtype=float)
        if axes.shape != (3, 3):
            raise ValidationError(f"pose axes must be 3x3, got {axes.shape}")
        err = np.max(np.abs(axes.T @ axes - np.eye(3)))
        if not err <= ORTHONORMAL_TOL:
            raise ValidationError(f"pose axes not orthonormal (max deviation {err:.3e})")
        object.__setattr__(self, "axes", axes)

    def to_local(self, world_point) -> np.ndarray:
        return self.axes @ (np.asarray(world_point, dtype=float) - self.origin)

    def to_world(self, local_point) -> np.ndarray:
        return self.origin + self.axes.T @ np.asarray(local_point, dtype=float)

    @staticmethod
    def identity(origin=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(np.asarray(origin, dtype=float), np.eye(3))


@dataclass(frozen=True)
class RisPanel:
    """Reflecting panel: element centers, quantized phase state, amplitudes."""

    element_positions: np.ndarray  # (N, 3) meters
    phase_indices: np.ndarray      # (N,) ints in [0, levels)
    levels: int                    # phase quantization level count
    element_amplitudes: np.ndarray  # (N,) nonnegative reflection gains

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.element_positions, dtype=float))
        idx = np.atleast_1d(np.asarray(self.phase_indices))
        amp = np.atleast_1d(np.asarray(self.element_amplitudes, dtype=float))
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValidationError(f"panel element positions must be (N,3) with N>=1, got {pos.shape}")
        n = pos.shape[0]
        if idx.shape != (n,) or amp.shape != (n,):
            raise ValidationError(
                "panel field lengths disagree: "
                f"{n} elements, {idx.shape[0]} phase indices, {amp.shape[0]} amplitudes")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("panel element positions must be finite")
        if self.levels < 1:
            raise ValidationError(f"phase level count must be >= 1, got {self.levels}")
        if np.any(idx != np.floor(idx)):
            raise ValidationError("phase indices must be integers")
        idx = idx.astype(int)
        if np.any(idx < 0) or np.any(idx >= self.levels):
            bad = int(idx[(idx < 0) | (idx >= self.levels)][0])
            raise ValidationError(f"phase index out of range: {bad} not in [0, {self.levels})")
        if np.any(amp < 0) or not np.all(np.isfinite(amp)):
            raise ValidationError("element amplitudes must be finite and >= 0")
        object.__setattr__(self, "element_positions", pos)
        object.__setattr__(self, "phase_indices", idx)
        object.__setattr__(self, "element_amplitudes", amp)

    @property
    def size(self) -> int:
        return self.element_positions.shape[0]

    def phase_values(self, indices=None) -> np.ndarray:
        """Physical phases theta_n = 2*pi*index/levels in [0, 2*pi)."""
        if indices is None:
            indices = self.phase_indices
        return TWO_PI * np.asarray(indices, dtype=float) / self.levels

    def with_phase_indices(self, indices) -> "RisPanel":
        return RisPanel(self.element_positions, np.asarray(indices), self.levels,
                        self.element_amplitudes)

    def with_amplitudes(self, amplitudes) -> "RisPanel":
        return RisPanel(self.element_positions, self.phase_indices, self.levels,
                        np.asarray(amplitudes, dtype=float))

    def element_pitch(self) -> float:
        """Smallest inter-element distance; falls back to 0 for a single element."""
        if self.size < 2:
            return 0.0
        d = self.element_positions[:, None, :] - self.element_positions[None, :, :]
        dist = np.linalg.norm(d, axis=2)
        dist[np.diag_indices_from(dist)] = np.inf
        return float(dist.min())


@dataclass(frozen=True)
class FasRegion:
    """Square movable-antenna region [0, W]^2 with minimum spacing D.

    `frame` maps local (u, v) coordinates into the world: a local point (u, v)
    sits at frame.origin + u*frame.axes[0] + v*frame.axes[1].
    """

    frame: Pose
    width: float       # W, region edge length in meters
    min_spacing: float  # D, minimum pairwise antenna distance in meters
    positions: np.ndarray  # (M, 2) local coordinates

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 1:
            raise ValidationError(f"antenna positions must be (M,2) with M>=1, got {pos.shape}")
        if not (self.width > 0 and math.isfinite(self.width)):
            raise ValidationError(f"region edge W must be positive, got {self.width}")
        if not (self.min_spacing >= 0 and math.isfinite(self.min_spacing)):
            raise ValidationError(f"minimum spacing D must be >= 0, got {self.min_spacing}")
        object.__setattr__(self, "positions", pos)
        validate_antenna_layout(pos, self.width, self.min_spacing)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def world_positions(self, local_positions=None) -> np.ndarray:
        """Map local (u, v) rows onto world coordinates."""
        if local_positions is None:
            local_positions = self.positions
        local_positions = np.atleast_2d(np.asarray(local_positions, dtype=float))
        plane = self.frame.axes[:2]  # rows: u and v directions
        return self.frame.origin[None, :] + local_positions @ plane

    def centroid_world(self, local_positions=None) -> np.ndarray:
        return self.world_positions(local_positions).mean(axis=0)

    def with_positions(self, local_positions) -> "FasRegion":
        return FasRegion(self.frame, self.width, self.min_spacing,
                         np.asarray(local_positions, dtype=float))


def validate_antenna_layout(positions: np.ndarray, width: float, min_spacing: float,
                            tol: float = 1e-9) -> None:
    """Raise ValidationError when a layout leaves the box or violates spacing."""
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    if np.any(pos < -tol * width) or np.any(pos > width * (1 + tol)):
        raise ValidationError(
            f"antenna coordinates must lie in [0, {width}]^2, got min {pos.min()}, max {pos.max()}")
    m = pos.shape[0]
    if m > 1 and min_spacing > 0:
        d = pos[:, None, :] - pos[None, :, :]
        dist = np.linalg.norm(d, axis=2)
        iu = np.triu_indices(m, k=1)
        worst = dist[iu].min()
        if worst < min_spacing * (1 - 1e-9):
            raise ValidationError(
                f"minimum spacing violated: closest antenna pair at {worst:.6g} m < D = {min_spacing:.6g} m")


@dataclass(frozen=True)
class User:
    position: np.ndarray
    power_dbm: float
    desired: bool = False

    def __post_init__(self):
        object.__setattr__(self, "position", as_vec3(self.position, "user position"))
        if not math.isfinite(self.power_dbm):
            raise ValidationError("user power_dbm must be finite")

    @property
    def power_watts(self) -> float:
        return dbm_to_watts(self.power_dbm)


@dataclass(frozen=True)
class Scene:
    rx_pose: Pose
    fas: FasRegion
    ris: RisPanel
    users: tuple
    wavelength: float
    noise_dbm: float
    point_cloud: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        if not (self.wavelength > 0 and math.isfinite(self.wavelength)):
            raise ValidationError(f"wavelength must be positive, got {self.wavelength}")
        if not math.isfinite(self.noise_dbm):
            raise ValidationError("noise power must be finite")
        users = tuple(self.users)
        if len(users) < 1:
            raise ValidationError("scene needs at least one user")
        n_desired = sum(1 for u in users if u.desired)
        if n_desired != 1:
            raise ValidationError(f"scene needs exactly one desired user, got {n_desired}")
        cloud = np.asarray(self.point_cloud, dtype=np.float32).reshape(-1, 3)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "point_cloud", cloud)

    @property
    def noise_watts(self) -> float:
        return dbm_to_watts(self.noise_dbm)

    @property
    def desired_index(self) -> int:
        return next(i for i, u in enumerate(self.users) if u.desired)

    @property
    def interferer_indices(self) -> list:
        return [i for i, u in enumerate(self.users) if not u.desired]

    def replace(self, **kwargs) -> "Scene":
        from dataclasses import replace as dc_replace
        return dc_replace(self, **kwargs)


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise SchemaError(f"missing key '{key}' in {context}")
    return mapping[key]


def _pose_from_json(obj: dict, context: str) -> Pose:
    origin = _require(obj, "origin", context)
    axes = _require(obj, "axes", context)
    return Pose(np.asarray(origin, dtype=float), np.asarray(axes, dtype=float))


def _pose_to_json(pose: Pose) -> dict:
    return {"origin": [float(v) for v in pose.origin],
            "axes": [[float(v) for v in row] for row in pose.axes]}


def scene_from_dict(doc: dict, base_dir: Path | None = None) -> Scene:
    """Build and validate a Scene from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise SchemaError("scene document must be a JSON object")
    wavelength = float(_require(doc, "wavelength_m", "scene"))
    noise_dbm = float(_require(doc, "noise_dbm", "scene"))
    rx_pose = _pose_from_json(_require(doc, "rx_pose", "scene"), "rx_pose")

    fas_doc = _require(doc, "fas", "scene")
    fas = FasRegion(
        frame=_pose_from_json(_require(fas_doc, "frame", "fas"), "fas.frame"),
        width=float(_require(fas_doc, "W_m", "fas")),
        min_spacing=float(_require(fas_doc, "D_m", "fas")),
        positions=np.asarray(_require(fas_doc, "antennas", "fas"), dtype=float),
    )

    ris_doc = _require(doc, "ris", "scene")
    ris = RisPanel(
        element_positions=np.asarray(_require(ris_doc, "elements", "ris"), dtype=float),
        phase_indices=np.asarray(_require(ris_doc, "phase_indices", "ris")),
        levels=int(_require(ris_doc, "Lc", "ris")),
        element_amplitudes=np.asarray(_require(ris_doc, "amplitudes", "ris"), dtype=float),
    )

    users_doc = _require(doc, "users", "scene")
    if not isinstance(users_doc, list) or not users_doc:
        raise SchemaError("scene 'users' must be a non-empty list")
    users = []
    for i, u in enumerate(users_doc):
        users.append(User(
            position=np.asarray(_require(u, "position", f"users[{i}]"), dtype=float),
            power_dbm=float(_require(u, "power_dbm", f"users[{i}]")),
            desired=bool(u.get("desired", False)),
        ))

    cloud = np.zeros((0, 3), dtype=np.float32)
    if doc.get("point_cloud_path"):
        cloud_path = Path(doc["point_cloud_path"])
        if base_dir is not None and not cloud_path.is_absolute():
            cloud_path = base_dir / cloud_path
        cloud = read_point_cloud(cloud_path)

    return Scene(rx_pose=rx_pose, fas=fas, ris=ris, users=tuple(users),
                 wavelength=wavelength, noise_dbm=noise_dbm, point_cloud=cloud)


def scene_to_dict(scene: Scene, point_cloud_path: str | None = None) -> dict:
    doc = {
        "wavelength_m": float(scene.wavelength),
        "noise_dbm": float(scene.noise_dbm),
        "rx_pose": _pose_to_json(scene.rx_pose),
        "fas": {
            "frame": _pose_to_json(scene.fas.frame),
            "W_m": float(scene.fas.width),
            "D_m": float(scene.fas.min_spacing),
            "antennas": [[float(u), float(v)] for u, v in scene.fas.positions],
        },
        "ris": {
            "elements": [[float(c) for c in row] for row in scene.ris.element_positions],
            "phase_indices": [int(i) for i in scene.ris.phase_indices],
            "Lc": int(scene.ris.levels),
            "amplitudes": [float(a) for a in scene.ris.element_amplitudes],
        },
        "users": [
            {"position": [float(c) for c in u.position],
             "power_dbm": float(u.power_dbm),
             "desired": bool(u.desired)}
            for u in scene.users
        ],
    }
    if point_cloud_path is not None:
        doc["point_cloud_path"] = point_cloud_path
    return doc


def load_scene(path) -> Scene:
    """Load and validate a scene file.

    Raises SchemaError (with line/key context) on parse problems and
    ValidationError naming the violated constraint on invariant problems.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read scene file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"scene file {path} is not valid JSON "
                          f"(line {exc.lineno}, column {exc.colno}): {exc.msg}") from exc
    return scene_from_dict(doc, base_dir=path.parent)


def save_scene(scene: Scene, path, point_cloud_path=None) -> None:
    """Write a scene as JSON; the point cloud goes to a sibling binary file.

    Floats round-trip exactly: json emits shortest-repr doubles, so
    load(save(scene)) reproduces every finite value bit for bit.
    """
    path = Path(path)
    rel_cloud = None
    if scene.point_cloud.size:
        if point_cloud_path is None:
            point_cloud_path = path.with_suffix("").name + "_points.bin"
        cloud_file = Path(point_cloud_path)
        if not cloud_file.is_absolute():
            cloud_file = path.parent / cloud_file
        write_point_cloud(scene.point_cloud, cloud_file)
        rel_cloud = str(point_cloud_path)
    doc = scene_to_dict(scene, point_cloud_path=rel_cloud)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_point_cloud(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise SchemaError(f"cannot read point cloud {path}: {exc}") from exc
    if len(raw) % 12 != 0:
        raise SchemaError(f"point cloud {path} length {len(raw)} is not a multiple of 12 bytes")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 3).copy()


def write_point_cloud(points: np.ndarray, path) -> None:
    arr = np.asarray(points, dtype="<f4").reshape(-1, 3)
    Path(path).write_bytes(arr.tobytes())
