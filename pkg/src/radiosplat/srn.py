"""Learned per-point attenuation: a two-head perceptron with exact backprop.

The network maps (point, transmitter position) to an attenuation amplitude
mu in [0, 1] and a phase offset delta in [0, 2*pi).  A geometry trunk embeds
the point and emits mu through a sigmoid; a fusion trunk consumes the geometry
feature concatenated with the transmitter position and emits delta as the
angle of a 2-vector, which keeps gradients smooth across the wrap.

Training minimizes a hybrid of squared error and structural dissimilarity
between rendered and ground-truth power grids, with reverse-mode gradients
propagated analytically through the power map, the depth-ordered splat, the
complex coefficients, and both trunks.  The optimizer is Adam
(beta1 = 0.9, beta2 = 0.999, eps = 1e-8) with exponential step decay.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .field import RadiationField
from .scene import Pose, TWO_PI, wrap_angle
from .splatting import AngularGrid, splat_backward, splat_forward_cached

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"RSPL"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SrnConfig:
    hidden_layers: int = 2
    hidden_size: int = 64
    activation_slope: float = 0.01

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_size < 1:
            raise ValidationError("network needs at least one hidden layer and one unit")


def _leaky(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def _leaky_grad(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, 1.0, slope)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class SrnModel:
    """Weight container; layers are (W, b) pairs applied as x @ W + b."""

    def __init__(self, geometry, mu_head, fusion, phase_head, config: SrnConfig):
        self.geometry = [(np.asarray(w, float), np.asarray(b, float)) for w, b in geometry]
        self.mu_head = (np.asarray(mu_head[0], float), np.asarray(mu_head[1], float))
        self.fusion = [(np.asarray(w, float), np.asarray(b, float)) for w, b in fusion]
        self.phase_head = (np.asarray(phase_head[0], float), np.asarray(phase_head[1], float))
        self.config = config
        for arr in self.parameters():
            if not np.all(np.isfinite(arr)):
                raise ValidationError("model weights must be finite")

    @classmethod
    def _layer_shapes(cls, config: SrnConfig):
        h, depth = config.hidden_size, config.hidden_layers
        geometry = [(3, h)] + [(h, h)] * (depth - 1)
        fusion = [(h + 3, h)] + [(h, h)] * (depth - 1)
        return geometry, (h, 1), fusion, (h, 2)

    @classmethod
    def create(cls, config: SrnConfig = SrnConfig(), seed: int = 0) -> "SrnModel":
        rng = np.random.default_rng(seed)
        geom_shapes, mu_shape, fusion_shapes, phase_shape = cls._layer_shapes(config)

        def init(shape):
            fan_in = shape[0]
            return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), np.zeros(shape[1])

        return cls([init(s) for s in geom_shapes], init(mu_shape),
                   [init(s) for s in fusion_shapes], init(phase_shape), config)

    @classmethod
    def zeros(cls, config: SrnConfig = SrnConfig()) -> "SrnModel":
        geom_shapes, mu_shape, fusion_shapes, phase_shape = cls._layer_shapes(config)
        zero = lambda s: (np.zeros(s), np.zeros(s[1]))
        return cls([zero(s) for s in geom_shapes], zero(mu_shape),
                   [zero(s) for s in fusion_shapes], zero(phase_shape), config)

    def parameters(self) -> list:
        arrays = []
        for w, b in self.geometry:
            arrays += [w, b]
        arrays += [self.mu_head[0], self.mu_head[1]]
        for w, b in self.fusion:
            arrays += [w, b]
        arrays += [self.phase_head[0], self.phase_head[1]]
        return arrays

    def with_parameters(self, arrays: list) -> "SrnModel":
        it = iter(arrays)
        depth = self.config.hidden_layers
        geometry = [(next(it), next(it)) for _ in range(depth)]
        mu_head = (next(it), next(it))
        fusion = [(next(it), next(it)) for _ in range(depth)]
        phase_head = (next(it), next(it))
        return SrnModel(geometry, mu_head, fusion, phase_head, self.config)

    def copy(self) -> "SrnModel":
        return self.with_parameters([a.copy() for a in self.parameters()])


@dataclass
class ForwardCache:
    points: np.ndarray
    tx_tiled: np.ndarray
    geom_pre: list
    geom_act: list
    mu_pre: np.ndarray
    mu: np.ndarray
    fusion_input: np.ndarray
    fusion_pre: list
    fusion_act: list
    phase_pre: np.ndarray
    delta: np.ndarray


def srn_forward_batch(model: SrnModel, points, tx_position):
    """(mu, delta, cache) for a batch of points and one transmitter position."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tx = np.asarray(tx_position, dtype=float).reshape(3)
    slope = model.config.activation_slope

    act = points
    geom_pre, geom_act = [], []
    for w, b in model.geometry:
        pre = act @ w + b
        act = _leaky(pre, slope)
        geom_pre.append(pre)
        geom_act.append(act)
    feature = act

    mu_pre = feature @ model.mu_head[0] + model.mu_head[1]
    mu = _sigmoid(mu_pre[:, 0])

    tx_tiled = np.broadcast_to(tx, (points.shape[0], 3))
    fusion_input = np.concatenate([feature, tx_tiled], axis=1)
    act = fusion_input
    fusion_pre, fusion_act = [], []
    for w, b in model.fusion:
        pre = act @ w + b
        act = _leaky(pre, slope)
        fusion_pre.append(pre)
        fusion_act.append(act)

    phase_pre = act @ model.phase_head[0] + model.phase_head[1]
    delta = wrap_angle(np.arctan2(phase_pre[:, 1], phase_pre[:, 0]))

    cache = ForwardCache(points, np.asarray(tx_tiled), geom_pre, geom_act,
                         mu_pre, mu, fusion_input, fusion_pre, fusion_act,
                         phase_pre, delta)
    return mu, delta, cache


def srn_forward(model: SrnModel, point, tx_position) -> tuple:
    """Single-point forward pass: (mu, delta)."""
    mu, delta, _ = srn_forward_batch(model, np.asarray(point, float)[None, :], tx_position)
    return float(mu[0]), float(delta[0])


def complex_coeff(mu, delta):
    """mu * (cos(delta) + j sin(delta))."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0):
        raise ValidationError("attenuation amplitude must be >= 0")
    out = mu * (np.cos(delta) + 1j * np.sin(delta))
    return complex(out) if out.ndim == 0 else out


def srn_backward_batch(model: SrnModel, cache: ForwardCache, d_mu, d_delta) -> list:
    """Weight gradients given sensitivities of the batch outputs.

    The phase output differentiates through the 2-vector angle: for
    delta = atan2(b, a), d(delta) = (-b da + a db) / (a^2 + b^2); degenerate
    zero vectors get zero gradient.
    """
    slope = model.config.activation_slope
    d_mu = np.asarray(d_mu, dtype=float).reshape(-1)
    d_delta = np.asarray(d_delta, dtype=float).reshape(-1)

    d_mu_pre = (d_mu * cache.mu * (1.0 - cache.mu))[:, None]
    grad_mu_w = cache.geom_act[-1].T @ d_mu_pre
    grad_mu_b = d_mu_pre.sum(axis=0)
    d_feature = d_mu_pre @ model.mu_head[0].T

    a = cache.phase_pre[:, 0]
    b = cache.phase_pre[:, 1]
    r2 = a * a + b * b
    safe = r2 > 0
    inv_r2 = np.where(safe, 1.0 / np.where(safe, r2, 1.0), 0.0)
    d_phase_pre = np.stack([-b * inv_r2 * d_delta, a * inv_r2 * d_delta], axis=1)
    grad_phase_w = cache.fusion_act[-1].T @ d_phase_pre
    grad_phase_b = d_phase_pre.sum(axis=0)

    grads_fusion = []
    upstream = d_phase_pre @ model.phase_head[0].T
    for layer in range(len(model.fusion) - 1, -1, -1):
        d_pre = upstream * _leaky_grad(cache.fusion_pre[layer], slope)
        below = cache.fusion_input if layer == 0 else cache.fusion_act[layer - 1]
        grads_fusion.append((below.T @ d_pre, d_pre.sum(axis=0)))
        upstream = d_pre @ model.fusion[layer][0].T
    grads_fusion.reverse()
    d_feature = d_feature + upstream[:, : model.config.hidden_size]

    grads_geometry = []
    upstream = d_feature
    for layer in range(len(model.geometry) - 1, -1, -1):
        d_pre = upstream * _leaky_grad(cache.geom_pre[layer], slope)
        below = cache.points if layer == 0 else cache.geom_act[layer - 1]
        grads_geometry.append((below.T @ d_pre, d_pre.sum(axis=0)))
        upstream = d_pre @ model.geometry[layer][0].T
    grads_geometry.reverse()

    arrays = []
    for w, b in grads_geometry:
        arrays += [w, b]
    arrays += [grad_mu_w, grad_mu_b]
    for w, b in grads_fusion:
        arrays += [w, b]
    arrays += [grad_phase_w, grad_phase_b]
    return arrays


# ---------------------------------------------------------------------------
# Structural similarity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SsimConfig:
    """Stabilizers and windowing; window=None means one whole-grid window."""

    c1: float
    c2: float
    window: int | None = None

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValidationError("SSIM stabilizers must be positive")
        if self.window is not None and self.window < 1:
            raise ValidationError("SSIM window must be >= 1")

    @classmethod
    def for_dynamic_range(cls, peak: float, window: int | None = None) -> "SsimConfig":
        peak = max(float(peak), 1e-12)
        return cls((0.01 * peak) ** 2, (0.03 * peak) ** 2, window)


def _ssim_statistics(x: np.ndarray, y: np.ndarray):
    n = x.size
    mx, my = x.mean(), y.mean()
    vx = ((x - mx) ** 2).sum() / n
    vy = ((y - my) ** 2).sum() / n
    cxy = ((x - mx) * (y - my)).sum() / n
    return mx, my, vx, vy, cxy


def _ssim_formula(mx, my, vx, vy, cxy, cfg: SsimConfig) -> float:
    num = (2.0 * mx * my + cfg.c1) * (2.0 * cxy + cfg.c2)
    den = (mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2)
    return num / den


def ssim(x, y, cfg: SsimConfig) -> float:
    """Structural similarity of two real grids; identical inputs give exactly 1.

    Single-window mode evaluates the formula over whole-grid statistics
    (biased 1/n variances); sliding mode averages the per-window values over
    all fully contained k x k windows.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValidationError(f"SSIM operands differ in shape: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValidationError("SSIM needs at least 2 elements")
    if cfg.window is None:
        return float(_ssim_formula(*_ssim_statistics(x.ravel(), y.ravel()), cfg))
    k = cfg.window
    if x.ndim != 2 or x.shape[0] < k or x.shape[1] < k:
        raise ValidationError(f"grid {x.shape} too small for window {k}")
    values = []
    for i in range(x.shape[0] - k + 1):
        for j in range(x.shape[1] - k + 1):
            xw = x[i:i + k, j:j + k].ravel()
            yw = y[i:i + k, j:j + k].ravel()
            values.append(_ssim_formula(*_ssim_statistics(xw, yw), cfg))
    return float(np.mean(values))


def ssim_with_gradient(x, y, cfg: SsimConfig):
    """Single-window SSIM value and its gradient with respect to `y`."""
    if cfg.window is not None:
        raise ValidationError("analytic SSIM gradient supports single-window mode only")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValidationError(f"SSIM operands differ in shape: {x.shape} vs {y.shape}")
    xf, yf = x.ravel(), y.ravel()
    n = xf.size
    mx, my, vx, vy, cxy = _ssim_statistics(xf, yf)
    n1 = 2.0 * mx * my + cfg.c1
    n2 = 2.0 * cxy + cfg.c2
    d1 = mx * mx + my * my + cfg.c1
    d2 = vx + vy + cfg.c2
    value = (n1 * n2) / (d1 * d2)
    # derivatives of the statistics: dmy = 1/n, dvy = 2(y-my)/n, dcxy = (x-mx)/n
    d_n1 = 2.0 * mx / n
    d_n2 = 2.0 * (xf - mx) / n
    d_d1 = 2.0 * my / n
    d_d2 = 2.0 * (yf - my) / n
    grad = ((d_n1 * n2 + n1 * d_n2) * d1 * d2 - n1 * n2 * (d_d1 * d2 + d1 * d_d2)) / (d1 * d2) ** 2
    return float(value), grad.reshape(y.shape)


# ---------------------------------------------------------------------------
# Loss and the full reverse chain
# ---------------------------------------------------------------------------

def reconstruction_loss(gt_power, pred_power, eta: float, cfg: SsimConfig = None) -> float:
    """(1-eta) * ||gt - pred||_2^2 + eta * (1 - ssim(gt, pred)) over power grids."""
    gt_power = np.asarray(gt_power, dtype=float)
    pred_power = np.asarray(pred_power, dtype=float)
    if gt_power.shape != pred_power.shape:
        raise ValidationError("loss operands must share a grid shape")
    if not 0.0 <= eta <= 1.0:
        raise ValidationError(f"loss weight eta must be in [0, 1], got {eta}")
    if cfg is None:
        cfg = SsimConfig.for_dynamic_range(gt_power.max())
    value = (1.0 - eta) * float(((gt_power - pred_power) ** 2).sum())
    if eta > 0.0:
        value += eta * (1.0 - ssim(gt_power, pred_power, cfg))
    return value


def loss_power_gradient(gt_power, pred_power, eta: float, cfg: SsimConfig):
    """Loss value and d(loss)/d(pred_power)."""
    diff = pred_power - gt_power
    value = (1.0 - eta) * float((diff ** 2).sum())
    grad = 2.0 * (1.0 - eta) * diff
    if eta > 0.0:
        s, s_grad = ssim_with_gradient(gt_power, pred_power, cfg)
        value += eta * (1.0 - s)
        grad = grad - eta * s_grad
    return value, grad


@dataclass
class SrnContext:
    """Fixed per-scene rendering context for training and evaluation."""

    env_field: RadiationField
    rx_pose: Pose
    grid: AngularGrid


def render_spectrum(model: SrnModel, context: SrnContext, tx_position):
    """Predicted angular spectrum for one transmitter position.

    Runs the full chain: network coefficients -> coefficient-scaled,
    depth-ordered splat of the environment field -> power grid.
    """
    mu, delta, _ = srn_forward_batch(model, context.env_field.centers, tx_position)
    spectrum, _ = splat_forward_cached(context.env_field, mu, delta,
                                       context.rx_pose, context.grid)
    return spectrum


def sample_loss_and_gradients(model: SrnModel, context: SrnContext, tx_position,
                              gt_power, eta: float, cfg: SsimConfig = None):
    """Loss and exact weight gradients for one (tx, spectrum) sample."""
    gt_power = np.asarray(gt_power, dtype=float)
    if gt_power.shape != context.grid.shape:
        raise ValidationError(
            f"sample grid {gt_power.shape} does not match context grid {context.grid.shape}")
    if cfg is None:
        cfg = SsimConfig.for_dynamic_range(gt_power.max())
    mu, delta, fwd_cache = srn_forward_batch(model, context.env_field.centers, tx_position)
    spectrum, splat_cache = splat_forward_cached(context.env_field, mu, delta,
                                                 context.rx_pose, context.grid)
    value, d_power = loss_power_gradient(gt_power, spectrum.power, eta, cfg)
    d_mu, d_delta = splat_backward(splat_cache, d_power.ravel())
    grads = srn_backward_batch(model, fwd_cache, d_mu, d_delta)
    return value, grads


def backward(model: SrnModel, context: SrnContext, sample, eta: float) -> list:
    """Gradient-set of the scalar loss for one dataset sample."""
    return sample_loss_and_gradients(model, context, sample.tx_position,
                                     sample.spectrum, eta)[1]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    decay: float = 0.95
    decay_every: int = 20
    epochs: int = 300
    batch_size: int = 8
    eta: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValidationError(f"eta must be in [0, 1], got {self.eta}")
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be positive")

    def rate_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay ** (epoch // self.decay_every)


class AdamState:
    def __init__(self, parameters: list):
        self.m = [np.zeros_like(p) for p in parameters]
        self.v = [np.zeros_like(p) for p in parameters]
        self.t = 0

    def step(self, parameters: list, grads: list, lr: float) -> list:
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(parameters, grads)):
            self.m[i] = ADAM_BETA1 * self.m[i] + (1 - ADAM_BETA1) * g
            self.v[i] = ADAM_BETA2 * self.v[i] + (1 - ADAM_BETA2) * g * g
            m_hat = self.m[i] / (1 - ADAM_BETA1 ** self.t)
            v_hat = self.v[i] / (1 - ADAM_BETA2 ** self.t)
            out.append(p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
        return out


def train(model: SrnModel, dataset, context: SrnContext, cfg: TrainConfig):
    """Train on the dataset's train split; returns (model, history).

    Mini-batches are drawn by an epoch-level seeded shuffle; the batch gradient
    is the mean over its samples.  History rows are
    (epoch, mean train loss, learning rate).
    """
    train_samples = [dataset.samples[i] for i in dataset.train_indices]
    if not train_samples:
        raise ValidationError("training requires a non-empty train split")
    for s in train_samples:
        if s.spectrum.shape != context.grid.shape:
            raise ValidationError(
                f"dataset grid {s.spectrum.shape} does not match context grid {context.grid.shape}")
    rng = np.random.default_rng(cfg.seed)
    params = [p.copy() for p in model.parameters()]
    state = AdamState(params)
    history = []
    current = model.with_parameters(params)
    peak = max(float(s.spectrum.max()) for s in train_samples)
    ssim_cfg = SsimConfig.for_dynamic_range(peak)
    for epoch in range(cfg.epochs):
        lr = cfg.rate_at(epoch)
        order = rng.permutation(len(train_samples))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
            total = 0.0
            grad_sum = None
            for sample in batch:
                value, grads = sample_loss_and_gradients(
                    current, context, sample.tx_position, sample.spectrum,
                    cfg.eta, ssim_cfg)
                total += value
                if grad_sum is None:
                    grad_sum = grads
                else:
                    grad_sum = [a + g for a, g in zip(grad_sum, grads)]
            mean_grads = [g / len(batch) for g in grad_sum]
            params = state.step(params, mean_grads, lr)
            current = current.with_parameters(params)
            batch_losses.append(total / len(batch))
        history.append((epoch, float(np.mean(batch_losses)), lr))
    return current, history


def save_history_csv(history, path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "mean_loss", "learning_rate"])
        for epoch, loss_value, lr in history:
            writer.writerow([epoch, repr(float(loss_value)), repr(float(lr))])


# ---------------------------------------------------------------------------
# Checkpoints: header (magic, version, sizes, grid, slope) + raw float64 LE
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIII d")


def save_checkpoint(model: SrnModel, grid: AngularGrid, path) -> None:
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                          model.config.hidden_layers, model.config.hidden_size,
                          grid.n_lat, grid.n_lon, model.config.activation_slope)
    blobs = [arr.astype("<f8").tobytes() for arr in model.parameters()]
    Path(path).write_bytes(header + b"".join(blobs))


def load_checkpoint(path):
    """Read a checkpoint; returns (model, grid)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a model checkpoint")
    magic, version, depth, width, n_lat, n_lon, slope = _HEADER.unpack_from(raw)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    config = SrnConfig(hidden_layers=depth, hidden_size=width, activation_slope=slope)
    template = SrnModel.zeros(config)
    offset = _HEADER.size
    arrays = []
    for param in template.parameters():
        count = param.size
        end = offset + count * 8
        if end > len(raw):
            raise FormatError(f"checkpoint {path} truncated")
        arrays.append(np.frombuffer(raw[offset:end], dtype="<f8").reshape(param.shape).copy())
        offset = end
    if offset != len(raw):
        raise FormatError(f"checkpoint {path} has {len(raw) - offset} trailing bytes")
    return template.with_parameters(arrays), AngularGrid(n_lon=n_lon, n_lat=n_lat)
