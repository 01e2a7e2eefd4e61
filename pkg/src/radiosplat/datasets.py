"""Spectrum dataset I/O.

On-disk layout: a directory holding `meta.json` with keys `n_lat`, `n_lon`,
`train_fraction`, `shuffle_seed`, plus one `sample_%06d.csv` per sample.  Each
sample file starts with a line `tx <x> <y> <z>` followed by n_lat rows of
n_lon comma-separated non-negative powers.  The train/test split is derived
from a seeded shuffle of the filename-sorted sample list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError


@dataclass(frozen=True)
class SpectrumSample:
    tx_position: np.ndarray  # (3,)
    spectrum: np.ndarray     # (n_lat, n_lon) linear power

    def __post_init__(self):
        object.__setattr__(self, "tx_position", np.asarray(self.tx_position, dtype=float).reshape(3))
        spec = np.asarray(self.spectrum, dtype=float)
        if spec.ndim != 2:
            raise FormatError(f"sample spectrum must be 2D, got shape {spec.shape}")
        if np.any(spec < 0) or not np.all(np.isfinite(spec)):
            raise FormatError("sample spectrum must contain finite non-negative powers")
        object.__setattr__(self, "spectrum", spec)


@dataclass(frozen=True)
class SpectrumDataset:
    samples: tuple
    n_lat: int
    n_lon: int
    train_indices: tuple
    test_indices: tuple

    def __post_init__(self):
        train = tuple(self.train_indices)
        test = tuple(self.test_indices)
        if set(train) & set(test):
            raise FormatError("train and test splits overlap")
        if set(train) | set(test) != set(range(len(self.samples))):
            raise FormatError("train and test splits must partition the samples")
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "train_indices", train)
        object.__setattr__(self, "test_indices", test)

    @property
    def grid_shape(self) -> tuple:
        return (self.n_lat, self.n_lon)


def split_indices(count: int, train_fraction: float, shuffle_seed: int):
    """Seeded-shuffle split: first round(fraction*count) shuffled indices train."""
    order = np.random.default_rng(shuffle_seed).permutation(count)
    n_train = int(round(train_fraction * count))
    return tuple(int(i) for i in order[:n_train]), tuple(int(i) for i in order[n_train:])


def _parse_sample(path: Path, expected_shape) -> SpectrumSample:
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines or not lines[0].startswith("tx"):
        raise FormatError(f"{path.name}: first line must be 'tx <x> <y> <z>'")
    head = lines[0].split()
    if len(head) != 4:
        raise FormatError(f"{path.name}: malformed tx line {lines[0]!r}")
    try:
        tx = np.array([float(v) for v in head[1:]])
        rows = [[float(v) for v in line.split(",")] for line in lines[1:]]
    except ValueError as exc:
        raise FormatError(f"{path.name}: {exc}") from exc
    spectrum = np.asarray(rows, dtype=float)
    if spectrum.shape != expected_shape:
        raise FormatError(
            f"{path.name}: grid shape {spectrum.shape} does not match metadata {expected_shape}")
    if np.any(spectrum < 0):
        raise FormatError(f"{path.name}: negative power value")
    return SpectrumSample(tx, spectrum)


def load_spectrum_dataset(directory) -> SpectrumDataset:
    """Load a dataset directory; samples are ordered by filename."""
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise FormatError(f"missing metadata file {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: invalid JSON ({exc.msg}, line {exc.lineno})") from exc
    for key in ("n_lat", "n_lon", "train_fraction", "shuffle_seed"):
        if key not in meta:
            raise FormatError(f"{meta_path}: missing key '{key}'")
    shape = (int(meta["n_lat"]), int(meta["n_lon"]))
    files = sorted(directory.glob("sample_*.csv"))
    if not files:
        raise FormatError(f"no samples found in {directory}")
    samples = tuple(_parse_sample(f, shape) for f in files)
    train, test = split_indices(len(samples), float(meta["train_fraction"]),
                                int(meta["shuffle_seed"]))
    return SpectrumDataset(samples=samples, n_lat=shape[0], n_lon=shape[1],
                           train_indices=train, test_indices=test)


def save_spectrum_dataset(samples, directory, train_fraction: float = 0.8,
                          shuffle_seed: int = 0) -> None:
    """Write samples plus metadata into a dataset directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    samples = list(samples)
    if not samples:
        raise FormatError("cannot save an empty dataset")
    shape = samples[0].spectrum.shape
    meta = {"n_lat": int(shape[0]), "n_lon": int(shape[1]),
            "train_fraction": float(train_fraction), "shuffle_seed": int(shuffle_seed)}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    for i, sample in enumerate(samples):
        if sample.spectrum.shape != shape:
            raise FormatError("all samples must share one grid shape")
        lines = ["tx {!r} {!r} {!r}".format(*[float(v) for v in sample.tx_position])]
        for row in sample.spectrum:
            lines.append(",".join(repr(float(v)) for v in row))
        (directory / f"sample_{i:06d}.csv").write_text("\n".join(lines) + "\n",
                                                       encoding="utf-8")
