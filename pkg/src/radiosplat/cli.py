"""Command-line interface.

Subcommands: `scene gen`, `render`, `optimize`, `sweep`, `srn train`,
`srn eval`.  Every command is deterministic given --seed; CSV outputs carry no
timestamps (those live in the per-run manifest.json), so seeded reruns are
byte-identical.  Exit codes: 0 success, 2 usage/file errors, 3 validation
errors, 4 numeric/feasibility errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import load_spectrum_dataset, save_spectrum_dataset
from .errors import (FeasibilityError, FormatError, NumericError, SchemaError,
                     ValidationError)
from .field import RadiationField, VirtualEmitter, direct_path_primitive
from .optimize import (BASELINE_KINDS, GaConfig, GreedyConfig, ScaConfig,
                       fao, run_baseline, write_run_log)
from .scene import Scene, load_scene, save_scene
from .splatting import (AngularGrid, SplatCoefficients, save_spectrum_csv,
                        save_spectrum_pgm, splat)
from .srn import (SrnConfig, SrnContext, SrnModel, TrainConfig, load_checkpoint,
                  render_spectrum, save_checkpoint, save_history_csv, train)
from .synthetic import (default_environment, demo_scene, emitter_primitives,
                        default_min_spacing, generate_synthetic_scene, panel_grid,
                        sample_tx_positions, synthesize_spectrum_samples,
                        uniform_grid_positions, well_separated_emitters)
from .splatting import spectrum_metrics, AngularSpectrum


def _parse_grid(text: str) -> AngularGrid:
    try:
        n_lat, n_lon = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ValidationError(f"grid must look like '16x16', got {text!r}") from exc
    return AngularGrid(n_lon=n_lon, n_lat=n_lat)


def _write_manifest(out_dir: Path, args_ns, extras=None) -> None:
    payload = {k: v for k, v in sorted(vars(args_ns).items()) if k != "func"}
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str)
                            .encode()).hexdigest()
    doc = {
        "config": payload,
        "config_hash": digest,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": sys.version.split()[0],
    }
    if extras:
        doc.update(extras)
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, default=str) + "\n",
                                           encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# scene gen
# ---------------------------------------------------------------------------

def cmd_scene_gen(args) -> int:
    started = time.perf_counter()
    out = _out_dir(args)
    extents = tuple(float(v) for v in args.extents.split(","))
    scene, emitters = generate_synthetic_scene(
        args.emitters, extents=extents, seed=args.seed,
        wavelength=args.wavelength, n_ris=args.ris_n, m_antennas=args.antennas)
    scene_path = out / "scene.json"
    save_scene(scene, scene_path)
    emitters_doc = [{"position": [float(c) for c in e.position],
                     "gain": e.gain, "phase": e.phase} for e in emitters]
    (out / "emitters.json").write_text(json.dumps(emitters_doc, indent=2) + "\n",
                                       encoding="utf-8")
    extras = {"wall_time_s": None}
    if args.spectrum_samples > 0:
        grid = _parse_grid(args.grid)
        beam_sigma = args.beam_sigma if args.beam_sigma > 0 else 2 * np.pi / grid.n_lon
        lo = np.array([0.3, 0.1, 0.2]) * np.asarray(extents)
        hi = np.array([0.9, 0.9, 0.8]) * np.asarray(extents)
        separated = well_separated_emitters(args.emitters, scene.rx_pose, grid,
                                            lo * 0 + 0.5, np.asarray(extents) - 0.5,
                                            seed=args.seed)
        tx = sample_tx_positions(args.spectrum_samples, lo, hi, seed=args.seed + 1)
        samples = synthesize_spectrum_samples(separated, scene.rx_pose, grid, tx,
                                              scene.wavelength, beam_sigma)
        dataset_dir = out / "dataset"
        save_spectrum_dataset(samples, dataset_dir, train_fraction=0.8,
                              shuffle_seed=args.seed)
        sep_doc = [{"position": [float(c) for c in e.position],
                    "gain": e.gain, "phase": e.phase} for e in separated]
        (out / "dataset_emitters.json").write_text(json.dumps(sep_doc, indent=2) + "\n",
                                                   encoding="utf-8")
        extras["dataset_dir"] = str(dataset_dir)
        extras["beam_sigma"] = beam_sigma
    extras["wall_time_s"] = time.perf_counter() - started
    _write_manifest(out, args, extras)
    print(f"scene={scene_path}")
    return 0


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

def _render_field(scene: Scene, include_direct: bool) -> RadiationField:
    from .field import composite_field
    user = scene.users[scene.desired_index]
    env = []
    if include_direct:
        env.append(direct_path_primitive(user, scene.fas.centroid_world(),
                                         scene.wavelength, 4.0 * scene.fas.width))
    return composite_field(scene, user, env)


def cmd_render(args) -> int:
    started = time.perf_counter()
    scene = load_scene(args.scene)
    out = _out_dir(args)
    grid = _parse_grid(args.grid)
    field = _render_field(scene, include_direct=not args.no_direct_path)
    spectrum = splat(field, SplatCoefficients.ones(field.size), scene.rx_pose, grid,
                     workers=max(1, args.threads))
    save_spectrum_csv(spectrum, out / "spectrum.csv")
    save_spectrum_pgm(spectrum, out / "spectrum.pgm", out / "spectrum.pgm.norm.txt")
    _write_manifest(out, args, {"wall_time_s": time.perf_counter() - started,
                                "primitives": field.size})
    print(f"spectrum={out / 'spectrum.csv'}")
    return 0


# ---------------------------------------------------------------------------
# optimize
# ---------------------------------------------------------------------------

def cmd_optimize(args) -> int:
    started = time.perf_counter()
    scene = load_scene(args.scene)
    out = _out_dir(args)
    env = default_environment(scene, seed=args.seed, n_scatter=args.env_scatter,
                              include_direct=False)
    include_direct = not args.no_direct_path
    if args.baseline:
        rate, state = run_baseline(scene, args.baseline, seed=args.seed, env=env,
                                   include_direct_path=include_direct)
    else:
        state = fao(scene, env=env, include_direct_path=include_direct,
                    epsilon=args.epsilon, max_outer=args.max_outer,
                    ris_mode=args.ris_mode, ga=GaConfig(seed=args.seed))
        rate = state.rate
    write_run_log(state.records, out / "run_log.csv")
    final_scene = scene.replace(
        fas=scene.fas.with_positions(state.positions),
        ris=scene.ris.with_phase_indices(state.phase_indices))
    save_scene(final_scene, out / "final_scene.json")
    _write_manifest(out, args, {
        "wall_time_s": time.perf_counter() - started,
        "iteration_wall_ms": list(state.wall_ms),
        "converged": state.converged,
    })
    print(f"rate_bps_hz={rate!r}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_VARIABLES = ("power_dbm", "ris_n", "ris_x_m", "fas_range_over_lambda")


def _derive_scene(template: Scene, variable: str, value: float) -> Scene:
    if variable == "power_dbm":
        users = tuple(type(u)(position=u.position, power_dbm=float(value),
                              desired=u.desired) for u in template.users)
        return template.replace(users=users)
    if variable == "ris_n":
        n = int(value)
        center = template.ris.element_positions.mean(axis=0)
        pitch = template.ris.element_pitch()
        if pitch <= 0:
            pitch = 0.5 * template.wavelength
        panel = template.ris
        return template.replace(ris=type(panel)(
            element_positions=panel_grid(center, n, pitch),
            phase_indices=np.zeros(n, dtype=int),
            levels=panel.levels,
            element_amplitudes=np.ones(n)))
    if variable == "ris_x_m":
        panel = template.ris
        center = panel.element_positions.mean(axis=0)
        shift = np.array([float(value) - center[0], 0.0, 0.0])
        return template.replace(ris=type(panel)(
            element_positions=panel.element_positions + shift[None, :],
            phase_indices=panel.phase_indices,
            levels=panel.levels,
            element_amplitudes=panel.element_amplitudes))
    if variable == "fas_range_over_lambda":
        width = float(value) * template.wavelength
        m = template.fas.count
        spacing = default_min_spacing(width, m, template.wavelength)
        centroid = template.fas.centroid_world()
        frame = template.fas.frame
        origin = (centroid - (width / 2.0) * frame.axes[0]
                  - (width / 2.0) * frame.axes[1])
        new_frame = type(frame)(origin, frame.axes)
        return template.replace(fas=type(template.fas)(
            frame=new_frame, width=width, min_spacing=spacing,
            positions=uniform_grid_positions(m, width)))
    raise ValidationError(f"unknown sweep variable {variable!r}")


def _run_cell(scene: Scene, method: str, seed: int, include_direct: bool) -> float:
    env = default_environment(scene, seed=seed, n_scatter=4, include_direct=False)
    if method == "fao":
        state = fao(scene, env=env, include_direct_path=include_direct,
                    ga=GaConfig(seed=seed))
        return state.rate
    rate, _ = run_baseline(scene, method, seed=seed, env=env,
                           include_direct_path=include_direct)
    return rate


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    template = load_scene(args.scene)
    out = _out_dir(args)
    values = [float(v) for v in args.values.split(",")]
    if not values:
        raise ValidationError("sweep needs at least one value")
    methods = [m.strip() for m in args.methods.split(",")]
    for m in methods:
        if m != "fao" and m not in BASELINE_KINDS:
            raise ValidationError(f"unknown method {m!r}")
    if args.repetitions < 1:
        raise ValidationError("repetitions must be >= 1")
    include_direct = not args.no_direct_path

    run_rows = []
    for value in values:
        scene_v = _derive_scene(template, args.variable, value)
        for method in methods:
            for rep in range(args.repetitions):
                rate = _run_cell(scene_v, method, args.seed + rep, include_direct)
                run_rows.append((value, method, args.seed + rep, rate))

    with open(out / "sweep_runs.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["variable", "value", "method", "seed", "rate"])
        for value, method, seed, rate in run_rows:
            writer.writerow([args.variable, repr(value), method, seed, repr(rate)])

    with open(out / "sweep.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["variable", "value", "method", "mean_rate", "n_seeds"])
        for value in values:
            for method in methods:
                rates = [r for v, m, _, r in run_rows if v == value and m == method]
                writer.writerow([args.variable, repr(value), method,
                                 repr(float(np.mean(rates))), len(rates)])

    _write_manifest(out, args, {"wall_time_s": time.perf_counter() - started})
    print(f"table={out / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------
# srn train / eval
# ---------------------------------------------------------------------------

def _load_srn_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise SchemaError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config {path}: invalid JSON at line {exc.lineno}") from exc
    return doc


def _srn_context(scene: Scene, grid: AngularGrid, config: dict) -> SrnContext:
    if scene.point_cloud.size == 0:
        raise ValidationError("scene has no point cloud to seed environment kernels")
    angular_sigma = float(config.get("angular_sigma", 2 * np.pi / grid.n_lon))
    emitters = [VirtualEmitter(p, 1.0, 0.0) for p in scene.point_cloud.astype(float)]
    prims = emitter_primitives(emitters, scene.rx_pose, angular_sigma)
    env_field = RadiationField.from_primitives(prims, scene.wavelength)
    return SrnContext(env_field=env_field, rx_pose=scene.rx_pose, grid=grid)


def cmd_srn_train(args) -> int:
    started = time.perf_counter()
    dataset = load_spectrum_dataset(args.dataset)
    scene = load_scene(args.scene)
    config = _load_srn_config(args.config)
    out = _out_dir(args)
    grid = AngularGrid(n_lon=dataset.n_lon, n_lat=dataset.n_lat)
    context = _srn_context(scene, grid, config)
    model_cfg = SrnConfig(hidden_layers=int(config.get("hidden_layers", 2)),
                          hidden_size=int(config.get("hidden_size", 64)),
                          activation_slope=float(config.get("activation_slope", 0.01)))
    train_cfg = TrainConfig(learning_rate=float(config.get("learning_rate", 5e-4)),
                            epochs=int(config.get("epochs", 300)),
                            batch_size=int(config.get("batch_size", 8)),
                            eta=float(config.get("eta", 0.5)),
                            seed=int(config.get("seed", args.seed)))
    model = SrnModel.create(model_cfg, seed=train_cfg.seed)
    model, history = train(model, dataset, context, train_cfg)
    save_checkpoint(model, grid, out / "checkpoint.bin")
    save_history_csv(history, out / "history.csv")
    _write_manifest(out, args, {"wall_time_s": time.perf_counter() - started,
                                "final_loss": history[-1][1]})
    print(f"checkpoint={out / 'checkpoint.bin'}")
    return 0


def cmd_srn_eval(args) -> int:
    started = time.perf_counter()
    dataset = load_spectrum_dataset(args.dataset)
    scene = load_scene(args.scene)
    config = _load_srn_config(args.config)
    out = _out_dir(args)
    model, grid = load_checkpoint(args.checkpoint)
    if grid.shape != dataset.grid_shape:
        raise ValidationError(
            f"grid mismatch: checkpoint {grid.shape} vs dataset {dataset.grid_shape}")
    context = _srn_context(scene, grid, config)
    rows = []
    for idx in dataset.test_indices:
        sample = dataset.samples[idx]
        predicted = render_spectrum(model, context, sample.tx_position)
        reference = AngularSpectrum(grid, np.sqrt(sample.spectrum).astype(complex))
        mse, ssim_value, psnr = spectrum_metrics(reference, predicted)
        rows.append((idx, mse, ssim_value, psnr))
    with open(out / "metrics.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["sample", "mse", "ssim", "psnr"])
        for idx, mse, ssim_value, psnr in rows:
            writer.writerow([idx, repr(mse), repr(ssim_value), repr(psnr)])
    _write_manifest(out, args, {"wall_time_s": time.perf_counter() - started,
                                "mean_ssim": float(np.mean([r[2] for r in rows]))})
    print(f"metrics={out / 'metrics.csv'}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="global random seed")
    common.add_argument("--threads", type=int, default=1, help="worker processes")
    common.add_argument("--out", required=True, help="output directory")

    parser = argparse.ArgumentParser(prog="radiosplat",
                                     description="Gaussian radiation-field toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    scene_p = sub.add_parser("scene", help="scene utilities")
    scene_sub = scene_p.add_subparsers(dest="scene_command", required=True)
    gen = scene_sub.add_parser("gen", parents=[common], help="generate a synthetic scene")
    gen.add_argument("--emitters", type=int, default=8)
    gen.add_argument("--extents", default="6,6,3")
    gen.add_argument("--wavelength", type=float, default=0.1)
    gen.add_argument("--ris-n", type=int, default=16)
    gen.add_argument("--antennas", type=int, default=4)
    gen.add_argument("--spectrum-samples", type=int, default=0,
                     help="also synthesize an oracle spectrum dataset")
    gen.add_argument("--grid", default="16x16")
    gen.add_argument("--beam-sigma", type=float, default=0.0,
                     help="angular response width; <=0 selects one bin width")
    gen.set_defaults(func=cmd_scene_gen)

    render = sub.add_parser("render", parents=[common], help="render an angular spectrum")
    render.add_argument("scene")
    render.add_argument("--grid", default="16x16")
    render.add_argument("--no-direct-path", action="store_true")
    render.set_defaults(func=cmd_render)

    optimize = sub.add_parser("optimize", parents=[common],
                              help="joint position/phase optimization")
    optimize.add_argument("scene")
    optimize.add_argument("--ris-mode", choices=("greedy", "ga"), default="greedy")
    optimize.add_argument("--baseline", choices=BASELINE_KINDS, default=None)
    optimize.add_argument("--epsilon", type=float, default=1e-4)
    optimize.add_argument("--max-outer", type=int, default=50)
    optimize.add_argument("--env-scatter", type=int, default=4)
    optimize.add_argument("--no-direct-path", action="store_true")
    optimize.set_defaults(func=cmd_optimize)

    sweep = sub.add_parser("sweep", parents=[common], help="seeded method comparison sweeps")
    sweep.add_argument("scene")
    sweep.add_argument("--variable", choices=SWEEP_VARIABLES, required=True)
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.add_argument("--repetitions", type=int, default=3)
    sweep.add_argument("--methods", default="fao,wo_ris,random_ris,fpa,gd")
    sweep.add_argument("--no-direct-path", action="store_true")
    sweep.set_defaults(func=cmd_sweep)

    srn_p = sub.add_parser("srn", help="attenuation network")
    srn_sub = srn_p.add_subparsers(dest="srn_command", required=True)
    srn_train = srn_sub.add_parser("train", parents=[common])
    srn_train.add_argument("dataset")
    srn_train.add_argument("scene")
    srn_train.add_argument("config")
    srn_train.set_defaults(func=cmd_srn_train)
    srn_eval = srn_sub.add_parser("eval", parents=[common])
    srn_eval.add_argument("dataset")
    srn_eval.add_argument("scene")
    srn_eval.add_argument("config")
    srn_eval.add_argument("checkpoint")
    srn_eval.set_defaults(func=cmd_srn_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 3
    except (FeasibilityError, NumericError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
