"""
Regression datasets: loading delimited files, synthetic generators, the
90/10 split protocol and train-statistics standardization.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import pandas as pd

from src.utils.errors import DatasetError

logger = logging.getLogger(__name__)

MIN_BENCH_ROWS = 20
MISSING_MARKERS = ("", "nan", "na", "?")


def _parse_cell(cell) -> float:
    # float() is correctly rounded, so written files reload bitwise
    try:
        return float(cell)
    except (TypeError, ValueError):
        return math.nan


@dataclass(frozen=True)
class Dataset:
    name: str
    features: np.ndarray
    targets: np.ndarray

    @property
    def size(self) -> int:
        return self.targets.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.name, self.features[idx], self.targets[idx])


@dataclass(frozen=True)
class SplitSpec:
    """Random train/test split protocol: ``repeats`` splits of ``train_fraction``."""

    train_fraction: float = 0.9
    repeats: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie strictly between 0 and 1")
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")


@dataclass(frozen=True)
class Standardizer:
    """Train-set statistics; test targets stay in original units."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def features(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_std

    def targets(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_std

    def inverse_targets(self, y: np.ndarray) -> np.ndarray:
        return y * self.y_std + self.y_mean


def load_dataset(
    path: Union[str, Path],
    delimiter: str = ",",
    target_column: int = -1,
    name: str = None,
) -> Dataset:
    """
    Load a numeric delimited text file.

    Args:
        path: file with one example per row and no header
        delimiter: column separator; whitespace runs are accepted for " "
        target_column: index of the target column (negative counts from the end)
        name: dataset name, defaults to the file stem

    Returns:
        Parsed dataset

    Raises:
        DatasetError: on unreadable files, ragged rows, non-numeric or missing
            cells (the message names the 1-based row and column)
    """
    path = Path(path)
    sep = r"\s+" if delimiter in (" ", r"\s+") else delimiter
    try:
        raw = pd.read_csv(path, sep=sep, header=None, dtype=str, keep_default_na=False, engine="python")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DatasetError(f"Failed to parse {path}: {e}") from e

    matrix = raw.apply(lambda column: column.map(_parse_cell)).to_numpy(dtype=float)
    bad = ~np.isfinite(matrix)
    if bad.any():
        row, col = map(int, np.argwhere(bad)[0])
        cell = raw.iat[row, col]
        cell = cell.strip() if isinstance(cell, str) else ""
        kind = "missing value" if cell.lower() in MISSING_MARKERS else f"non-numeric value {cell!r}"
        raise DatasetError(f"{path}: {kind} at row {row + 1}, column {col + 1}")

    if matrix.shape[1] < 2:
        raise DatasetError(f"{path}: need at least one feature column and a target column")
    target = target_column % matrix.shape[1]
    features = np.delete(matrix, target, axis=1)
    return Dataset(name or path.stem, features, matrix[:, target])


def write_dataset(ds: Dataset, path: Union[str, Path], delimiter: str = ",") -> None:
    """Write features followed by the target column, with round-trip float precision."""
    frame = pd.DataFrame(np.column_stack([ds.features, ds.targets]))
    frame.to_csv(path, sep=delimiter, header=False, index=False, float_format="%.17g")


def make_linear_gaussian(
    n: int, d: int, rng: np.random.Generator, noise_std: float = 1.0, name: str = "synthetic-linear"
) -> Dataset:
    """y = x^T w + b + noise_std * eps with standard normal inputs."""
    x = rng.standard_normal((n, d))
    w = rng.standard_normal(d)
    y = x @ w + rng.standard_normal() + noise_std * rng.standard_normal(n)
    return Dataset(name, x, y)


def make_mlp_teacher(
    n: int = 400,
    d: int = 8,
    rng: np.random.Generator = None,
    hidden: int = 10,
    noise_std: float = 0.1,
    name: str = "synthetic-mlp",
) -> Dataset:
    """Targets from a random one-hidden-layer tanh network plus Gaussian noise."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x = rng.standard_normal((n, d))
    w1 = rng.standard_normal((d, hidden)) / math.sqrt(d)
    w2 = rng.standard_normal(hidden)
    y = np.tanh(x @ w1) @ w2 + noise_std * rng.standard_normal(n)
    return Dataset(name, x, y)


def resolve_dataset(
    spec: str, delimiter: str = ",", target_column: int = -1, size: int = 400, features: int = 8, seed: int = 0
) -> Dataset:
    """Load a dataset file or generate one of the bundled synthetic tasks."""
    if spec == "synthetic-linear":
        return make_linear_gaussian(size, features, np.random.default_rng(seed))
    if spec == "synthetic-mlp":
        return make_mlp_teacher(size, features, np.random.default_rng(seed))
    return load_dataset(spec, delimiter=delimiter, target_column=target_column)


def make_splits(n: int, split: SplitSpec) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Random disjoint (train, test) index pairs, one per repeat.

    Each repeat draws its own permutation from (seed, repeat) so splits do
    not depend on how many repeats are requested.
    """
    if n < MIN_BENCH_ROWS:
        raise DatasetError(f"benchmark datasets need at least {MIN_BENCH_ROWS} rows, got {n}")
    n_train = int(round(split.train_fraction * n))
    splits = []
    for repeat in range(split.repeats):
        order = np.random.default_rng([split.seed, repeat]).permutation(n)
        splits.append((np.sort(order[:n_train]), np.sort(order[n_train:])))
    return splits


def normalize_split(
    ds: Dataset, train_idx: np.ndarray, test_idx: np.ndarray
) -> Tuple[Dataset, Dataset, Standardizer]:
    """
    Standardize with train statistics.

    Train features and targets become zero-mean, unit-variance; test
    features use the same transform, test targets stay raw. A constant
    feature is only centered.
    """
    if np.intersect1d(train_idx, test_idx).size:
        raise ValueError("train and test indices overlap")
    train, test = ds.subset(train_idx), ds.subset(test_idx)
    x_mean = train.features.mean(axis=0)
    x_std = train.features.std(axis=0)
    constant = x_std == 0
    if constant.any():
        logger.warning(
            "%s: features %s have zero variance and are only centered",
            ds.name, np.flatnonzero(constant).tolist(),
        )
        x_std = np.where(constant, 1.0, x_std)
    y_mean = float(train.targets.mean())
    y_std = float(train.targets.std())
    if y_std == 0:
        logger.warning("%s: training targets are constant and are only centered", ds.name)
        y_std = 1.0
    transforms = Standardizer(x_mean, x_std, y_mean, y_std)
    train_norm = Dataset(ds.name, transforms.features(train.features), transforms.targets(train.targets))
    test_norm = Dataset(ds.name, transforms.features(test.features), test.targets)
    return train_norm, test_norm, transforms
