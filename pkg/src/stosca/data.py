"""Dataset ingestion and preprocessing.

Order of operations is fixed: impute (column medians over the whole table),
normalize (inputs to [-0.5, 0.5], regression targets to [-0.9, 0.9]), then
split into train/test.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .nn_core import MiniBatch

log = logging.getLogger(__name__)

MISSING_TOKENS = {"", "?", "na", "nan"}

INPUT_RANGE = (-0.5, 0.5)
OUTPUT_RANGE = (-0.9, 0.9)


class CsvFormatError(ValueError):
    pass


class MissingColumnError(ValueError):
    pass


@dataclass
class RawTable:
    columns: list[str]
    values: np.ndarray  # float matrix, NaN marks a missing entry

    def __len__(self):
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]


def _parse_cell(tok: str) -> float:
    tok = tok.strip().strip('"')
    if tok.lower() in MISSING_TOKENS:
        return np.nan
    try:
        return float(tok)
    except ValueError:
        return np.nan


def load_csv(path, delimiter: str = ",", header: bool = True) -> RawTable:
    """Parse a numeric CSV file; empty or non-numeric cells become NaN."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        raise CsvFormatError(f"{path} contains no data")
    if header:
        columns = [c.strip().strip('"') for c in rows[0]]
        body = rows[1:]
        first_line = 2
    else:
        columns = [f"c{i}" for i in range(len(rows[0]))]
        body = rows
        first_line = 1
    width = len(columns)
    for off, r in enumerate(body):
        if len(r) != width:
            raise CsvFormatError(
                f"{path}: line {first_line + off} has {len(r)} fields, expected {width} "
                f"(wrong delimiter?)"
            )
    values = np.array([[_parse_cell(c) for c in r] for r in body], dtype=float).reshape(len(body), width)
    if values.shape[0]:
        empty = np.all(np.isnan(values), axis=0)
        if np.any(empty):
            names = [columns[i] for i in np.flatnonzero(empty)]
            raise MissingColumnError(f"{path}: column(s) {names} have no numeric values")
    return RawTable(columns, values)


def impute_median(values: np.ndarray) -> np.ndarray:
    """Replace NaNs with the median of their column."""
    values = np.array(values, dtype=float)
    missing = np.isnan(values)
    if not missing.any():
        return values
    if np.any(missing.all(axis=0)):
        raise MissingColumnError("cannot impute a column with no present values")
    med = np.nanmedian(values, axis=0)
    rows, cols = np.nonzero(missing)
    values[rows, cols] = med[cols]
    return values


@dataclass(frozen=True)
class AffineParams:
    """Per-column map ``[lo, hi] -> [a, b]``; constant columns (or spans too
    small to scale in double precision) go to the midpoint."""

    lo: np.ndarray
    hi: np.ndarray
    a: float
    b: float

    def _scale(self):
        span = self.hi - self.lo
        with np.errstate(over="ignore", divide="ignore"):
            scale = (self.b - self.a) / np.where(span > 0, span, 1.0)
        return np.where((span > 0) & np.isfinite(scale), scale, 0.0)

    def _varying(self):
        return self._scale() > 0

    def transform(self, x):
        x = np.asarray(x, dtype=float)
        mid = 0.5 * (self.a + self.b)
        return np.where(self._varying(), self.a + (x - self.lo) * self._scale(), mid)

    def inverse(self, u):
        u = np.asarray(u, dtype=float)
        ok = self._varying()
        safe = np.where(ok, self._scale(), 1.0)
        return np.where(ok, self.lo + (u - self.a) / safe, self.lo)

    def to_dict(self) -> dict:
        return {"lo": np.atleast_1d(self.lo).tolist(), "hi": np.atleast_1d(self.hi).tolist(), "a": self.a, "b": self.b}


def normalize(values, kind: str = "input"):
    """Affinely map every column onto the input or output range.

    Returns ``(normalized, params)``; ``params.inverse`` undoes the map.
    """
    a, b = {"input": INPUT_RANGE, "output": OUTPUT_RANGE}[kind]
    values = np.asarray(values, dtype=float)
    lo = np.min(values, axis=0)
    hi = np.max(values, axis=0)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("normalization needs finite column ranges")
    params = AffineParams(lo, hi, a, b)
    return params.transform(values), params


@dataclass(frozen=True)
class Dataset:
    name: str
    inputs: np.ndarray
    targets: np.ndarray
    task: str = "regression"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.task not in ("regression", "binary"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets disagree on the number of samples")

    def __len__(self):
        return self.targets.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx])


def prepare(table: RawTable, target: str, task: str = "regression", drop=(), name: str = "data") -> Dataset:
    """Impute, then normalize inputs (and regression targets)."""
    values = impute_median(table.values)
    t = table.columns.index(target)
    keep = [i for i, c in enumerate(table.columns) if i != t and c not in set(drop)]
    X, in_params = normalize(values[:, keep], "input")
    y = values[:, t]
    meta = {"columns": [table.columns[i] for i in keep], "target": target, "input_params": in_params.to_dict()}
    if task == "regression":
        y, out_params = normalize(y, "output")
        meta["output_params"] = out_params.to_dict()
    else:
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("binary targets must be 0 or 1")
    return Dataset(name, X, y, task, meta)


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie strictly between 0 and 1")


def split_indices(n: int, spec: SplitSpec):
    if n < 4:
        raise ValueError("need at least 4 samples to split")
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_test = int(round(n * spec.test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def split(dataset: Dataset, spec: SplitSpec):
    train_idx, test_idx = split_indices(len(dataset), spec)
    return dataset.subset(train_idx), dataset.subset(test_idx)


def sample_minibatch(train: Dataset, L: int, rng: np.random.Generator) -> MiniBatch:
    """Uniform draw of ``L`` distinct samples."""
    n = len(train)
    if L > n:
        raise ValueError(f"batch size {L} exceeds the {n} training samples")
    if L < 1:
        raise ValueError("batch size must be positive")
    idx = rng.choice(n, size=L, replace=False)
    return MiniBatch(idx, train.inputs[idx], train.targets[idx])


class MiniBatchStream:
    """Seeded source of mini-batches; two streams with equal seeds yield the
    same batch sequence, which lets optimizers be compared on identical data."""

    def __init__(self, train: Dataset, L: int, seed: int):
        self.train = train
        self.L = L
        self.rng = np.random.default_rng(seed)

    def __iter__(self):
        return self

    def __next__(self) -> MiniBatch:
        return sample_minibatch(self.train, self.L, self.rng)


def synth_regression(N: int, d: int, noise: float = 0.0, seed: int = 0) -> Dataset:
    """``y = sin(a^T x) + 0.5 (b^T x)^2 + eps``, normalized like real data."""
    if N <= 0:
        raise ValueError("cannot build an empty dataset")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(d) / np.sqrt(d)
    b = rng.standard_normal(d) / np.sqrt(d)
    X = rng.uniform(-1.0, 1.0, size=(N, d))
    y = np.sin(2.0 * X @ a) + 0.5 * (X @ b) ** 2
    if noise > 0:
        y = y + noise * rng.standard_normal(N)
    Xn, _ = normalize(X, "input")
    yn, params = normalize(y, "output")
    return Dataset(f"synth_regression_{N}x{d}", Xn, yn, "regression", {"seed": seed, "noise": noise, "output_params": params.to_dict()})


def synth_classification(N: int, d: int = 18, seed: int = 0, label_noise: float = 0.1) -> Dataset:
    """Binary task with a nonlinear decision boundary and some label noise.

    Stand-in for large physics classification data at desk scale.
    """
    if N <= 0:
        raise ValueError("cannot build an empty dataset")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, d))
    u = rng.standard_normal((d, 4)) / np.sqrt(d)
    h = np.tanh(X @ u)
    score = 1.5 * h[:, 0] - 1.0 * h[:, 1] * h[:, 2] + 0.8 * h[:, 3] ** 2 - 0.3 + 0.3 * X[:, 0]
    p = 1.0 / (1.0 + np.exp(-3.0 * score))
    y = (rng.uniform(size=N) < p).astype(float)
    flip = rng.uniform(size=N) < label_noise
    y[flip] = 1.0 - y[flip]
    Xn, _ = normalize(X, "input")
    return Dataset(f"synth_binary_{N}x{d}", Xn, y, "binary", {"seed": seed})


# ---------------------------------------------------------------------------
# Mid-sized UCI regression benchmarks.  Files are user supplied; ``fetch``
# downloads them on request only.


@dataclass(frozen=True)
class KnownDataset:
    name: str
    url: str
    filename: str
    target: str
    delimiter: str = ","
    drop: tuple = ()
    samples: int = 0
    table_features: int = 0
    topology: str = ""


KNOWN_DATASETS = {
    "casp": KnownDataset(
        "casp",
        "https://archive.ics.uci.edu/ml/machine-learning-databases/00265/CASP.csv",
        "CASP.csv", "RMSD", samples=45730, table_features=9, topology="9/10/6/1",
    ),
    "parkinsons": KnownDataset(
        "parkinsons",
        "https://archive.ics.uci.edu/ml/machine-learning-databases/parkinsons/telemonitoring/parkinsons_updrs.data",
        "parkinsons_updrs.data", "total_UPDRS", drop=("subject#", "motor_UPDRS"),
        samples=5875, table_features=19, topology="19/15/5/1",
    ),
    "skillcraft": KnownDataset(
        "skillcraft",
        "https://archive.ics.uci.edu/ml/machine-learning-databases/00272/SkillCraft1_Dataset.csv",
        "SkillCraft1_Dataset.csv", "LeagueIndex", drop=("GameID",),
        samples=3395, table_features=20, topology="18/15/10/1",
    ),
    "wine": KnownDataset(
        "wine",
        "https://archive.ics.uci.edu/ml/machine-learning-databases/wine-quality/winequality-white.csv",
        "winequality-white.csv", "quality", delimiter=";",
        samples=4898, table_features=12, topology="11/10/4/1",
    ),
}


def load_known(name: str, data_dir) -> Dataset:
    spec = KNOWN_DATASETS[name.lower()]
    path = Path(data_dir) / spec.filename
    table = load_csv(path, delimiter=spec.delimiter)
    if len(table) != spec.samples:
        log.warning("%s: expected %d samples, found %d", name, spec.samples, len(table))
    return prepare(table, spec.target, "regression", spec.drop, spec.name)


def fetch(name: str, data_dir) -> Path:
    """Download one of the known datasets into ``data_dir``."""
    import urllib.request

    spec = KNOWN_DATASETS[name.lower()]
    dest = Path(data_dir) / spec.filename
    dest.parent.mkdir(parents=True, exist_ok=True)
    log.info("downloading %s -> %s", spec.url, dest)
    urllib.request.urlretrieve(spec.url, dest)
    return dest
