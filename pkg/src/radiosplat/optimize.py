"""Field-driven objective evaluation and joint position/phase optimization.

The objective is built directly on the reconstructed radiation field: the
desired-user power spectrum over the movable antennas

    Phi(positions, phases) = (1/M) sum_m |E_k(xi_m)|^2

and its interference counterpart feed an SINR and a rate.  Antenna positions
are optimized by safeguarded projected gradient ascent on a first-order
surrogate (backtracking keeps every accepted step non-decreasing); panel
phases are optimized either by a greedy codebook sweep or by a genetic search
over the index vector; the outer loop alternates the two until the objective
settles.

With interferers present, the loop maximizes the rate (whose maximizer
coincides with the power spectrum's when there is no interference); the power
spectrum itself remains the default objective of the standalone operations.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import FeasibilityError, ValidationError
from .field import default_ris_covariance, GaussianPrimitive
from .scene import Scene, TWO_PI, validate_antenna_layout, wrap_angle
from .synthetic import beam_spread_covariance, uniform_grid_positions

LOG2 = math.log(2.0)


# ---------------------------------------------------------------------------
# Configurations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Codebook:
    """Uniform L-level phase codebook {2*pi*l/L}."""

    levels: int

    def __post_init__(self):
        if self.levels < 1:
            raise ValidationError(f"codebook needs >= 1 level, got {self.levels}")

    @property
    def values(self) -> np.ndarray:
        return TWO_PI * np.arange(self.levels) / self.levels

    def index_of(self, value: float) -> int:
        wrapped = float(wrap_angle(value))
        idx = int(round(wrapped * self.levels / TWO_PI)) % self.levels
        if abs(float(wrap_angle(wrapped - self.values[idx] + math.pi)) - math.pi) > 1e-9:
            raise ValidationError(f"phase {value} is not a codebook value (L={self.levels})")
        return idx


@dataclass(frozen=True)
class ScaConfig:
    """Safeguarded ascent on antenna positions.

    `step_init` is the initial trial displacement as a fraction of the region
    edge; the actual update is positions + theta * gradient with the scalar
    theta chosen so the largest per-antenna move equals the adapted step.
    """

    step_init: float = 0.25
    backtrack: float = 0.5
    min_step_wavelengths: float = 1e-6
    tol: float = 1e-9
    max_iters: int = 60

    def __post_init__(self):
        if not (0.0 < self.step_init <= 1.0):
            raise ValidationError("initial step must lie in (0, 1]")
        if not (0.0 < self.backtrack < 1.0):
            raise ValidationError("backtracking factor must lie in (0, 1)")


@dataclass(frozen=True)
class GreedyConfig:
    tol: float = 1e-12
    max_sweeps: int = 8


@dataclass(frozen=True)
class GaConfig:
    population: int = 32
    generations: int = 50
    elitism: int = 1
    tournament: int = 3
    crossover: float = 0.9
    mutation: float | None = None  # None -> 1/N
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValidationError("population must be >= 2")
        if self.elitism < 1:
            raise ValidationError("elitism must be >= 1 to keep the best fitness monotone")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    phi: float
    phi_int: float
    gamma: float
    rate: float
    objective: float


@dataclass
class OptimizerState:
    positions: np.ndarray
    phase_indices: np.ndarray
    records: list
    converged: bool
    iterations: int
    wall_ms: list = field(default_factory=list)

    @property
    def objective_trace(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    @property
    def rate(self) -> float:
        return self.records[-1].rate


# ---------------------------------------------------------------------------
# Feasibility projection
# ---------------------------------------------------------------------------

def project_feasible(positions, width: float, spacing: float,
                     max_rounds: int = 100) -> np.ndarray:
    """Clamp into [0, W]^2, then push violating pairs apart until feasible.

    Each violating pair moves symmetrically along its connecting line out to
    the required spacing (coincident pairs separate along +u), with
    re-clamping after every round.  Raises FeasibilityError when 100 rounds
    do not produce a feasible layout.
    """
    pos = np.clip(np.asarray(positions, dtype=float).copy(), 0.0, width)
    m = pos.shape[0]
    if m <= 1 or spacing <= 0:
        return pos
    iu = np.triu_indices(m, k=1)

    def pair_distances():
        gaps = pos[:, None, :] - pos[None, :, :]
        return np.sqrt((gaps ** 2).sum(axis=2))[iu]

    for _ in range(max_rounds):
        violating = np.nonzero(pair_distances() < spacing * (1.0 - 1e-9))[0]
        if violating.size == 0:
            return pos
        for k in violating:
            i, j = int(iu[0][k]), int(iu[1][k])
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            d = math.hypot(dx, dy)
            if d >= spacing * (1.0 - 1e-9):
                continue
            ux, uy = (dx / d, dy / d) if d > 1e-15 else (1.0, 0.0)
            push = 0.5 * (spacing - d)
            pos[i, 0] -= push * ux
            pos[i, 1] -= push * uy
            pos[j, 0] += push * ux
            pos[j, 1] += push * uy
        np.clip(pos, 0.0, width, out=pos)
    if pair_distances().min() >= spacing * (1.0 - 1e-9):
        return pos
    raise FeasibilityError(
        f"no feasible layout for {m} antennas with spacing {spacing} in [0, {width}]^2 "
        f"after {max_rounds} rounds")


# ---------------------------------------------------------------------------
# Scene objective
# ---------------------------------------------------------------------------

class SceneObjective:
    """Per-scene evaluator of the field-driven objective and its gradients.

    Environment primitives are provided per user (optionally with an injected
    direct-path kernel); panel primitives are rebuilt from the phase state.
    The panel-to-receiver distance entering the panel phases uses a reference
    centroid that is only refreshed on request (and only when the antennas
    moved more than 0.1 wavelengths), so the objective stays a fixed smooth
    function during any one optimization stage.
    """

    def __init__(self, scene: Scene, env=None, include_direct_path: bool = False,
                 ris_covariance=None, reference=None):
        self.scene = scene
        self.codebook = Codebook(scene.ris.levels)
        self.wavelength = scene.wavelength
        self.power_watts = scene.users[scene.desired_index].power_watts
        self.noise_watts = scene.noise_watts
        self.desired = scene.desired_index
        self.has_interferers = len(scene.users) > 1
        self.default_mode = "rate" if self.has_interferers else "phi"
        if ris_covariance is None:
            ris_covariance = beam_spread_covariance(scene)
        self.ris_covariance = np.asarray(ris_covariance, dtype=float)

        env = dict(env or {})
        centroid = scene.fas.centroid_world()
        self._users = []
        for idx, user in enumerate(scene.users):
            prims = list(env.get(idx, ()))
            if include_direct_path:
                from .field import direct_path_primitive
                prims.insert(0, direct_path_primitive(user, centroid, scene.wavelength,
                                                      4.0 * scene.fas.width))
            self._users.append(self._pack_user(user, prims))
        self._reference = np.asarray(reference, dtype=float) if reference is not None \
            else centroid
        self._refresh_geo_phases()

    # -- static packing -----------------------------------------------------

    def _pack_user(self, user, env_prims):
        ris = self.scene.ris
        env_centers = np.array([p.center for p in env_prims]).reshape(-1, 3)
        env_covs = (np.array([p.covariance for p in env_prims]).reshape(-1, 3, 3)
                    if env_prims else np.zeros((0, 3, 3)))
        centers = np.concatenate([env_centers, ris.element_positions])
        covs = np.concatenate([env_covs,
                               np.broadcast_to(self.ris_covariance,
                                               (ris.size, 3, 3))])
        inv = np.linalg.inv(covs) if covs.size else np.zeros((0, 3, 3))
        amps = np.concatenate([np.array([p.amplitude for p in env_prims]),
                               ris.element_amplitudes])
        env_phases = np.array([p.phase for p in env_prims])
        d_tx = np.linalg.norm(ris.element_positions - user.position[None, :], axis=1)
        return {
            "user": user,
            "centers": centers,
            "inv_covs": inv,
            "amps": amps,
            "env_phases": env_phases,
            "n_env": len(env_prims),
            "d_tx": d_tx,
            "geo": None,  # ris geometric phases, set on refresh
        }

    def _refresh_geo_phases(self):
        ris = self.scene.ris
        d_rx = np.linalg.norm(ris.element_positions - self._reference[None, :], axis=1)
        for packed in self._users:
            packed["geo"] = TWO_PI / self.wavelength * (packed["d_tx"] + d_rx)

    @property
    def reference(self) -> np.ndarray:
        return self._reference.copy()

    def set_reference(self, positions) -> None:
        self._reference = self.scene.fas.centroid_world(positions)
        self._refresh_geo_phases()

    def maybe_refresh(self, positions) -> bool:
        """Refresh the panel-phase reference when the centroid moved > 0.1 lambda."""
        centroid = self.scene.fas.centroid_world(positions)
        if np.linalg.norm(centroid - self._reference) > 0.1 * self.wavelength:
            self._reference = centroid
            self._refresh_geo_phases()
            return True
        return False

    # -- evaluation ----------------------------------------------------------

    def _phase_vector(self, packed, theta_values):
        return np.concatenate([packed["env_phases"], theta_values + packed["geo"]])

    def _check_positions(self, positions) -> np.ndarray:
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        validate_antenna_layout(positions, self.scene.fas.width,
                                self.scene.fas.min_spacing)
        return positions

    def field_values(self, positions, theta_values) -> np.ndarray:
        """Per-user complex field at every antenna, shape (U, M)."""
        positions = self._check_positions(positions)
        world = self.scene.fas.world_positions(positions)
        out = np.zeros((len(self._users), world.shape[0]), dtype=complex)
        for u, packed in enumerate(self._users):
            if packed["centers"].shape[0] == 0:
                continue
            weights = packed["amps"] * np.exp(1j * self._phase_vector(packed, theta_values))
            diffs = world[:, None, :] - packed["centers"][None, :, :]
            solved = np.einsum("nij,mnj->mni", packed["inv_covs"], diffs)
            m2 = np.einsum("mni,mni->mn", diffs, solved)
            out[u] = (weights[None, :] * np.exp(-0.5 * m2)).sum(axis=1)
        return out

    def powers(self, positions, theta_values) -> tuple:
        values = self.field_values(positions, theta_values)
        return self._powers_from_values(values)

    def _powers_from_values(self, values) -> tuple:
        per_user = np.mean(np.abs(values) ** 2, axis=1)
        phi_val = float(per_user[self.desired])
        phi_int = float(per_user.sum() - per_user[self.desired])
        return phi_val, phi_int

    def _gamma(self, phi_val, phi_int) -> float:
        return self.power_watts * phi_val / (self.power_watts * phi_int + self.noise_watts)

    def value(self, positions, theta_values, mode: str) -> float:
        phi_val, phi_int = self.powers(positions, theta_values)
        if mode == "phi":
            return phi_val
        return math.log2(1.0 + self._gamma(phi_val, phi_int))

    def record(self, iteration: int, positions, theta_values, mode: str) -> IterationRecord:
        phi_val, phi_int = self.powers(positions, theta_values)
        gamma = self._gamma(phi_val, phi_int)
        rate = math.log2(1.0 + gamma)
        objective = phi_val if mode == "phi" else rate
        return IterationRecord(iteration, phi_val, phi_int, gamma, rate, objective)

    def gradient(self, positions, theta_values, mode: str = "phi") -> np.ndarray:
        """d(objective)/d(u_m, v_m) for every antenna, shape (M, 2)."""
        positions = self._check_positions(positions)
        world = self.scene.fas.world_positions(positions)
        m_count = world.shape[0]
        values = np.zeros((len(self._users), m_count), dtype=complex)
        grads = np.zeros((len(self._users), m_count, 3), dtype=complex)
        for u, packed in enumerate(self._users):
            if packed["centers"].shape[0] == 0:
                continue
            weights = packed["amps"] * np.exp(1j * self._phase_vector(packed, theta_values))
            diffs = world[:, None, :] - packed["centers"][None, :, :]
            solved = np.einsum("nij,mnj->mni", packed["inv_covs"], diffs)
            m2 = np.einsum("mni,mni->mn", diffs, solved)
            terms = weights[None, :] * np.exp(-0.5 * m2)
            values[u] = terms.sum(axis=1)
            grads[u] = -np.einsum("mn,mni->mi", terms, solved)
        # d(mean |E|^2)/dx per user: antenna m only sees its own term
        d_power = 2.0 * np.real(np.conj(values)[:, :, None] * grads) / m_count
        d_phi = d_power[self.desired]
        if mode == "phi":
            d_world = d_phi
        else:
            phi_val, phi_int = self._powers_from_values(values)
            d_phi_int = d_power.sum(axis=0) - d_phi
            denom = self.power_watts * phi_int + self.noise_watts
            gamma = self.power_watts * phi_val / denom
            d_gamma = (self.power_watts * d_phi * denom
                       - self.power_watts * phi_val * self.power_watts * d_phi_int) / denom ** 2
            d_world = d_gamma / ((1.0 + gamma) * LOG2)
        plane = self.scene.fas.frame.axes[:2]  # (2, 3) u and v directions
        return np.real(d_world) @ plane.T

    def ris_matrices(self, positions) -> list:
        """Affine representation E_u = base_u + phasors @ B_u at fixed antennas.

        Returns one (base (M,), B (N, M)) pair per user, so any phase vector is
        evaluated with a single small matrix product.
        """
        positions = self._check_positions(positions)
        world = self.scene.fas.world_positions(positions)
        out = []
        for packed in self._users:
            n_env = packed["n_env"]
            weights_env = (packed["amps"][:n_env] * np.exp(1j * packed["env_phases"]))
            diffs = world[:, None, :] - packed["centers"][None, :, :]
            solved = np.einsum("nij,mnj->mni", packed["inv_covs"], diffs)
            m2 = np.einsum("mni,mni->mn", diffs, solved)
            kernels = np.exp(-0.5 * m2)                     # (M, n)
            base = (weights_env[None, :] * kernels[:, :n_env]).sum(axis=1)
            ris_weights = packed["amps"][n_env:] * np.exp(1j * packed["geo"])
            b_matrix = (ris_weights[:, None] * kernels[:, n_env:].T)
            out.append((base, b_matrix))
        return out

    def fitness_from_fields(self, field_rows, mode: str) -> float:
        phi_val, phi_int = self._powers_from_values(np.asarray(field_rows))
        if mode == "phi":
            return phi_val
        return math.log2(1.0 + self._gamma(phi_val, phi_int))


# ---------------------------------------------------------------------------
# Spec-level operations
# ---------------------------------------------------------------------------

def _objective_for(scene_or_objective, env, include_direct_path, ris_covariance):
    if isinstance(scene_or_objective, SceneObjective):
        return scene_or_objective
    return SceneObjective(scene_or_objective, env=env,
                          include_direct_path=include_direct_path,
                          ris_covariance=ris_covariance)


def phi(scene, positions, theta_values, env=None, include_direct_path: bool = False,
        ris_covariance=None) -> float:
    """Mean desired-user field power over the antenna positions."""
    obj = _objective_for(scene, env, include_direct_path, ris_covariance)
    return obj.powers(positions, np.asarray(theta_values, dtype=float))[0]


def phi_int(scene, positions, theta_values, env=None, include_direct_path: bool = False,
            ris_covariance=None) -> float:
    """Mean total interference field power over the antenna positions."""
    obj = _objective_for(scene, env, include_direct_path, ris_covariance)
    return obj.powers(positions, np.asarray(theta_values, dtype=float))[1]


def sinr_field(scene, positions, theta_values, power_watts: float, noise_watts: float,
               env=None, include_direct_path: bool = False, ris_covariance=None) -> float:
    """Gamma = P*Phi / (P*Phi_int + sigma^2) over the reconstructed fields."""
    if power_watts <= 0 or noise_watts <= 0:
        raise ValidationError("power and noise must be positive")
    obj = _objective_for(scene, env, include_direct_path, ris_covariance)
    phi_val, phi_i = obj.powers(positions, np.asarray(theta_values, dtype=float))
    return power_watts * phi_val / (power_watts * phi_i + noise_watts)


def rate_field(scene, positions, theta_values, power_watts: float, noise_watts: float,
               **kwargs) -> float:
    return math.log2(1.0 + sinr_field(scene, positions, theta_values,
                                      power_watts, noise_watts, **kwargs))


def fas_gradient(scene, positions, theta_values, antenna: int = None, env=None,
                 include_direct_path: bool = False, ris_covariance=None,
                 mode: str = "phi"):
    """Analytic objective gradient in local coordinates; one antenna or all."""
    obj = _objective_for(scene, env, include_direct_path, ris_covariance)
    grad = obj.gradient(positions, np.asarray(theta_values, dtype=float), mode)
    return grad if antenna is None else grad[antenna]


def marginal_power(scene, positions, theta_values, element: int, candidate: float,
                   env=None, include_direct_path: bool = False, ris_covariance=None,
                   mode: str = "phi") -> float:
    """Fitness change when element's phase is replaced by a codebook candidate."""
    obj = _objective_for(scene, env, include_direct_path, ris_covariance)
    theta_values = np.asarray(theta_values, dtype=float).copy()
    if not 0 <= element < theta_values.shape[0]:
        raise ValidationError(f"element index {element} out of range")
    obj.codebook.index_of(candidate)  # validates membership
    before = obj.value(positions, theta_values, mode)
    theta_values[element] = candidate
    after = obj.value(positions, theta_values, mode)
    return after - before


# ---------------------------------------------------------------------------
# Inner optimizers
# ---------------------------------------------------------------------------

def optimize_fas(objective: SceneObjective, positions, theta_values,
                 cfg: ScaConfig = ScaConfig(), mode: str = "phi"):
    """Safeguarded projected gradient ascent over antenna positions.

    Every accepted step is non-decreasing (backtracking halves the step until
    the projected trial stops losing), and iteration stops once an accepted
    update changes the objective by less than the tolerance.
    """
    theta_values = np.asarray(theta_values, dtype=float)
    width = objective.scene.fas.width
    spacing = objective.scene.fas.min_spacing
    lam = objective.wavelength
    pos = project_feasible(np.asarray(positions, dtype=float), width, spacing)
    current = objective.value(pos, theta_values, mode)
    trace = [current]
    step_len = cfg.step_init * width  # largest per-antenna displacement, meters
    for _ in range(cfg.max_iters):
        grad = objective.gradient(pos, theta_values, mode)
        gmax = float(np.linalg.norm(grad, axis=1).max())
        if gmax == 0.0:
            trace.append(current)
            break
        backtracked = False
        while True:
            if step_len < cfg.min_step_wavelengths * lam:
                trial, trial_value = pos, current
                break
            try:
                trial = project_feasible(pos + (step_len / gmax) * grad, width, spacing)
            except FeasibilityError:
                # overshoot collapsed the layout; treat as a failed trial
                step_len *= cfg.backtrack
                backtracked = True
                continue
            trial_value = objective.value(trial, theta_values, mode)
            if trial_value >= current:
                break
            step_len *= cfg.backtrack
            backtracked = True
        if not backtracked:
            step_len = min(2.0 * step_len, width)
        delta = trial_value - current
        pos, current = trial, trial_value
        trace.append(current)
        if abs(delta) < cfg.tol:
            break
    return pos, trace


def optimize_ris_greedy(objective: SceneObjective, positions, indices,
                        cfg: GreedyConfig = GreedyConfig(), mode: str = "phi"):
    """Greedy codebook sweep: each element takes the argmax candidate in turn.

    Ties break toward the lowest codebook index; the fitness trace (recorded
    after every element update) is non-decreasing because the current phase is
    always among the candidates.
    """
    indices = np.asarray(indices, dtype=int).copy()
    matrices = objective.ris_matrices(positions)
    phasors = np.exp(1j * objective.codebook.values)
    fields = [base + phasors[indices] @ b for base, b in matrices]
    current = objective.fitness_from_fields(fields, mode)
    trace = [current]
    n = indices.shape[0]
    for _ in range(cfg.max_sweeps):
        sweep_start = current
        for element in range(n):
            best_level, best_value, best_fields = indices[element], -math.inf, None
            for level in range(objective.codebook.levels):
                shift = phasors[level] - phasors[indices[element]]
                trial_fields = [f + shift * b[element] for f, (_, b) in zip(fields, matrices)]
                value = objective.fitness_from_fields(trial_fields, mode)
                if value > best_value:
                    best_level, best_value, best_fields = level, value, trial_fields
            indices[element] = best_level
            fields = best_fields
            current = best_value
            trace.append(current)
        if abs(current - sweep_start) < cfg.tol:
            break
    return indices, trace


def optimize_ris_ga(objective: SceneObjective, positions, cfg: GaConfig = GaConfig(),
                    theta0=None, mode: str = "phi"):
    """Genetic search over the phase-index vector.

    Tournament selection, single-point crossover, per-gene uniform-codebook
    mutation, and elitism; the best-fitness trace is non-decreasing and the
    whole run is determined by the config seed.
    """
    rng = np.random.default_rng(cfg.seed)
    matrices = objective.ris_matrices(positions)
    levels = objective.codebook.levels
    n = objective.scene.ris.size
    mutation = cfg.mutation if cfg.mutation is not None else 1.0 / n

    population = rng.integers(0, levels, size=(cfg.population, n))
    if theta0 is not None:
        population[0] = np.asarray(theta0, dtype=int)

    def fitness_batch(pop):
        phasors = np.exp(1j * TWO_PI * pop / levels)           # (P, N)
        rows = []
        for base, b in matrices:
            rows.append(base[None, :] + phasors @ b)            # (P, M)
        stacked = np.stack(rows)                                # (U, P, M)
        out = np.empty(pop.shape[0])
        for p in range(pop.shape[0]):
            out[p] = objective.fitness_from_fields(stacked[:, p, :], mode)
        return out

    fitness = fitness_batch(population)
    best_idx = int(np.argmax(fitness))
    best = population[best_idx].copy()
    best_value = float(fitness[best_idx])
    trace = [best_value]

    for _ in range(cfg.generations):
        order = np.argsort(-fitness, kind="stable")
        children = [population[i].copy() for i in order[:cfg.elitism]]
        while len(children) < cfg.population:
            picks = rng.integers(0, cfg.population, size=cfg.tournament)
            parent_a = population[picks[np.argmax(fitness[picks])]]
            picks = rng.integers(0, cfg.population, size=cfg.tournament)
            parent_b = population[picks[np.argmax(fitness[picks])]]
            child = parent_a.copy()
            if n > 1 and rng.random() < cfg.crossover:
                point = int(rng.integers(1, n))
                child = np.concatenate([parent_a[:point], parent_b[point:]])
            mask = rng.random(n) < mutation
            if mask.any():
                child = child.copy()
                child[mask] = rng.integers(0, levels, size=int(mask.sum()))
            children.append(child)
        population = np.stack(children)
        fitness = fitness_batch(population)
        gen_best = int(np.argmax(fitness))
        if fitness[gen_best] > best_value:
            best_value = float(fitness[gen_best])
            best = population[gen_best].copy()
        trace.append(best_value)
    return best, trace


def optimize_ris_continuous(objective: SceneObjective, positions, theta_values,
                            max_iters: int = 300, step_init: float = 0.5,
                            tol: float = 1e-10, mode: str = "phi"):
    """Phase-parameterized gradient ascent with continuous phases.

    The unit-modulus constraint is satisfied by construction; trial updates
    move the phase vector by an adapted angle along the normalized gradient
    and terminate on a relative objective change below `tol`.
    """
    if mode != "phi":
        raise ValidationError("continuous ascent implements the power objective")
    matrices = objective.ris_matrices(positions)
    theta = np.asarray(theta_values, dtype=float).copy()
    m_count = objective.scene.fas.count

    def value_and_grad(th):
        phasors = np.exp(1j * th)
        fields = [base + phasors @ b for base, b in matrices]
        val = objective.fitness_from_fields(fields, mode)
        desired = fields[objective.desired]
        _, b = matrices[objective.desired]
        grad = 2.0 / m_count * np.real(
            np.conj(desired)[None, :] * (1j * phasors[:, None] * b)).sum(axis=1)
        return val, grad

    current, grad = value_and_grad(theta)
    trace = [current]
    step = step_init  # radians of largest per-element phase move
    for _ in range(max_iters):
        gmax = float(np.abs(grad).max())
        if gmax == 0.0:
            break
        backtracked = False
        finished = False
        while True:
            if step < 1e-10:
                finished = True
                break
            trial = theta + (step / gmax) * grad
            trial_value, trial_grad = value_and_grad(trial)
            if trial_value >= current:
                break
            step *= 0.5
            backtracked = True
        if finished:
            break
        if not backtracked:
            step = min(2.0 * step, math.pi)
        delta = trial_value - current
        theta, current, grad = trial, trial_value, trial_grad
        trace.append(current)
        if abs(delta) < tol * max(abs(current), 1e-300):
            break
    return wrap_angle(theta), trace


def quantize_to_codebook(theta_values, codebook: Codebook) -> np.ndarray:
    """Nearest codebook index per phase value."""
    theta = wrap_angle(np.asarray(theta_values, dtype=float))
    idx = np.rint(theta * codebook.levels / TWO_PI).astype(int) % codebook.levels
    return idx


# ---------------------------------------------------------------------------
# Alternating loop and baselines
# ---------------------------------------------------------------------------

def fao(scene: Scene, *, env=None, include_direct_path: bool = True,
        ris_covariance=None, init_positions=None, init_indices=None,
        epsilon: float = 1e-4, max_outer: int = 50, ris_mode: str = "greedy",
        sca: ScaConfig = ScaConfig(), greedy: GreedyConfig = GreedyConfig(),
        ga: GaConfig = GaConfig(), objective_mode: str = None) -> OptimizerState:
    """Alternate antenna-position and panel-phase updates until the objective
    settles within epsilon or the outer-iteration cap is reached.

    The panel geometric phases are re-referenced to the moved antenna centroid
    at the end of each outer iteration, but only when doing so does not lower
    the recorded objective, which keeps the trace non-decreasing.
    """
    if ris_mode not in ("greedy", "ga"):
        raise ValidationError(f"unknown ris mode {ris_mode!r}")
    objective = SceneObjective(scene, env=env, include_direct_path=include_direct_path,
                               ris_covariance=ris_covariance)
    mode = objective_mode or objective.default_mode
    positions = np.asarray(init_positions if init_positions is not None
                           else scene.fas.positions, dtype=float)
    indices = np.asarray(init_indices if init_indices is not None
                         else scene.ris.phase_indices, dtype=int)
    theta = objective.codebook.values[indices]
    records = [objective.record(0, positions, theta, mode)]
    wall_ms = []
    converged = False
    iterations = 0
    from dataclasses import replace as dc_replace
    for outer in range(max_outer):
        tic = time.perf_counter()
        snapshot = (positions.copy(), indices.copy(), objective.reference)
        positions, _ = optimize_fas(objective, positions, theta, sca, mode)
        if ris_mode == "greedy":
            indices, _ = optimize_ris_greedy(objective, positions, indices, greedy, mode)
        else:
            ga_round = GaConfig(population=ga.population, generations=ga.generations,
                                elitism=ga.elitism, tournament=ga.tournament,
                                crossover=ga.crossover, mutation=ga.mutation,
                                seed=ga.seed + outer)
            indices, _ = optimize_ris_ga(objective, positions, ga_round,
                                         theta0=indices, mode=mode)
        theta = objective.codebook.values[indices]
        previous = records[-1].objective
        old_reference = objective.reference
        if objective.maybe_refresh(positions):
            refreshed = objective.value(positions, theta, mode)
            if refreshed < previous:
                objective._reference = old_reference
                objective._refresh_geo_phases()
        iterations = outer + 1
        wall_ms.append(1000.0 * (time.perf_counter() - tic))
        candidate = objective.record(iterations, positions, theta, mode)
        value = candidate.objective
        if value < previous:
            # no usable progress this round (cross-path rounding or a refresh
            # regression): keep the previous iterate so the trace never drops
            positions, indices, reference = snapshot
            theta = objective.codebook.values[indices]
            objective._reference = reference
            objective._refresh_geo_phases()
            records.append(dc_replace(records[-1], iteration=iterations))
            converged = True
            break
        records.append(candidate)
        if abs(value - previous) < epsilon:
            converged = True
            break
    return OptimizerState(positions=positions, phase_indices=indices,
                          records=records, converged=converged,
                          iterations=iterations, wall_ms=wall_ms)


BASELINE_KINDS = ("wo_ris", "random_ris", "fpa", "gd")


def run_baseline(scene: Scene, kind: str, seed: int = 0, *, env=None,
                 include_direct_path: bool = True, ris_covariance=None,
                 sca: ScaConfig = ScaConfig(), greedy: GreedyConfig = GreedyConfig(),
                 objective_mode: str = None):
    """Reference schemes: no panel, random phases, fixed antennas, or
    continuous-phase ascent followed by codebook quantization.

    Returns (rate, OptimizerState).
    """
    if kind not in BASELINE_KINDS:
        raise ValidationError(f"unknown baseline {kind!r}; expected one of {BASELINE_KINDS}")
    rng = np.random.default_rng(seed)
    work_scene = scene
    indices = np.asarray(scene.ris.phase_indices, dtype=int)
    positions = np.asarray(scene.fas.positions, dtype=float)

    if kind == "wo_ris":
        work_scene = scene.replace(ris=scene.ris.with_amplitudes(
            np.zeros(scene.ris.size)))
    elif kind == "random_ris":
        indices = rng.integers(0, scene.ris.levels, size=scene.ris.size)

    objective = SceneObjective(work_scene, env=env,
                               include_direct_path=include_direct_path,
                               ris_covariance=ris_covariance)
    mode = objective_mode or objective.default_mode
    theta = objective.codebook.values[indices]

    if kind == "fpa":
        positions = uniform_grid_positions(scene.fas.count, scene.fas.width)
        indices, _ = optimize_ris_greedy(objective, positions, indices,
                                         greedy, mode)
        theta = objective.codebook.values[indices]
    elif kind == "gd":
        theta_cont, _ = optimize_ris_continuous(objective, positions, theta, mode="phi")
        indices = quantize_to_codebook(theta_cont, objective.codebook)
        theta = objective.codebook.values[indices]
        positions, _ = optimize_fas(objective, positions, theta, sca, mode)
    else:
        positions, _ = optimize_fas(objective, positions, theta, sca, mode)

    record = objective.record(0, positions, theta, mode)
    state = OptimizerState(positions=positions, phase_indices=indices,
                           records=[record], converged=True, iterations=1)
    return record.rate, state


def write_run_log(records, path) -> None:
    """Per-iteration CSV: iteration, phi, phi_int, gamma, rate.

    Wall-clock timings stay out of the CSV so seeded reruns are byte-identical;
    they belong in the run manifest.
    """
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iteration", "phi", "phi_int", "gamma", "rate"])
        for r in records:
            writer.writerow([r.iteration, repr(r.phi), repr(r.phi_int),
                             repr(r.gamma), repr(r.rate)])
