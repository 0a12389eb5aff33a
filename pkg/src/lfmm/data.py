"""Long-format longitudinal datasets and the synthetic benchmark scenario."""
import csv
from dataclasses import dataclass, field
import hashlib
import io
import math

import numpy as np

from .exceptions import DatasetParseError, InvalidArgumentError
from .state import difference_penalty

__all__ = [
    "Dataset",
    "load_dataset",
    "write_dataset",
    "ScenarioConfig",
    "SyntheticTruth",
    "generate_synthetic",
    "TRUE_CORE_COEFFICIENTS",
    "true_curve_index",
    "sample_random_effect_curves",
]

BASE_COLUMNS = ("subject", "trial", "time", "y")


@dataclass
class Dataset:
    """Rows of ``(subject, trial, time, y, x_1..x_p)`` with 1-based levels and times."""

    subject: np.ndarray
    trial: np.ndarray
    time: np.ndarray
    y: np.ndarray
    x: np.ndarray
    levels: tuple
    num_times: int

    def __post_init__(self):
        self.subject = np.asarray(self.subject).astype(str).astype(object)
        self.trial = np.asarray(self.trial, dtype=np.int64)
        self.time = np.asarray(self.time, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=float)
        self.x = np.asarray(self.x, dtype=np.int64)
        if self.x.ndim == 1:
            self.x = self.x.reshape(-1, 1)
        self.levels = tuple(int(v) for v in self.levels)
        self.num_times = int(self.num_times)

    @property
    def n_rows(self):
        return self.y.size

    @property
    def p(self):
        return self.x.shape[1]

    @property
    def subjects(self):
        """Subject identifiers in order of first appearance."""
        _, first = np.unique(self.subject.astype(str), return_index=True)
        return [self.subject[i] for i in np.sort(first)]

    @property
    def combinations(self):
        """Observed level combinations (0-based), sorted lexicographically."""
        return np.unique(self.x - 1, axis=0)

    def validate(self, require_coverage=True):
        """Check level ranges, time range, keys and (optionally) level coverage."""
        n = self.n_rows
        for name in ("subject", "trial", "time"):
            if getattr(self, name).shape != (n,):
                raise InvalidArgumentError(f"column {name} has the wrong length")
        if self.x.shape != (n, len(self.levels)):
            raise InvalidArgumentError("covariate matrix does not match the declared levels")
        if any(v < 2 for v in self.levels):
            raise InvalidArgumentError("every predictor needs at least two levels")
        if self.num_times < 2:
            raise InvalidArgumentError("at least two time points are required")
        if not np.all(np.isfinite(self.y)):
            raise InvalidArgumentError("responses must be finite")
        if n and (self.time.min() < 1 or self.time.max() > self.num_times):
            raise InvalidArgumentError(f"time indices must lie in 1..{self.num_times}")
        for j, x_max in enumerate(self.levels):
            col = self.x[:, j]
            if n and (col.min() < 1 or col.max() > x_max):
                raise InvalidArgumentError(f"levels of x{j + 1} must lie in 1..{x_max}")
        keys = set(zip(self.subject.tolist(), self.trial.tolist(), self.time.tolist()))
        if len(keys) != n:
            raise InvalidArgumentError("duplicate (subject, trial, time) keys")
        if require_coverage:
            for j, x_max in enumerate(self.levels):
                seen = np.zeros((self.num_times, x_max), dtype=bool)
                seen[self.time - 1, self.x[:, j] - 1] = True
                if not seen.all():
                    t, level = np.argwhere(~seen)[0] + 1
                    raise InvalidArgumentError(
                        f"level {level} of x{j + 1} has no observation at time {t}"
                    )
        return self

    def subset(self, mask):
        mask = np.asarray(mask)
        return Dataset(self.subject[mask], self.trial[mask], self.time[mask], self.y[mask],
                       self.x[mask], self.levels, self.num_times)

    def to_csv_text(self):
        buf = io.StringIO()
        _write_rows(self, buf)
        return buf.getvalue()

    def digest(self):
        return hashlib.sha256(self.to_csv_text().encode()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.levels == other.levels and self.num_times == other.num_times
                and np.array_equal(self.subject, other.subject)
                and np.array_equal(self.trial, other.trial)
                and np.array_equal(self.time, other.time)
                and np.array_equal(self.y, other.y)
                and np.array_equal(self.x, other.x))


def _write_rows(dataset, handle):
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(list(BASE_COLUMNS) + [f"x{j + 1}" for j in range(dataset.p)])
    for i in range(dataset.n_rows):
        writer.writerow([dataset.subject[i], int(dataset.trial[i]), int(dataset.time[i]),
                         repr(float(dataset.y[i]))] + [int(v) for v in dataset.x[i]])


def write_dataset(dataset, path):
    with open(path, "w", newline="") as handle:
        _write_rows(dataset, handle)


def load_dataset(path, levels=None, num_times=None, num_predictors=None, require_coverage=False):
    """Read a long-format CSV file.

    The header must be ``subject,trial,time,y,x1,...,xp``. ``levels`` and
    ``num_times`` default to the largest values found in the file.

    Raises
    ------
    DatasetParseError
        For malformed rows, out-of-range levels or duplicate keys, with the
        offending line number.
    """
    try:
        handle = open(path, newline="")
    except OSError as err:
        raise DatasetParseError(f"cannot open data file: {err.strerror}", path=path) from err
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetParseError("empty file", line=1, path=path) from None
        header = [h.strip() for h in header]
        p = len(header) - len(BASE_COLUMNS)
        expected = list(BASE_COLUMNS) + [f"x{j + 1}" for j in range(max(p, 0))]
        if p < 1 or header != expected:
            raise DatasetParseError(f"header must be {','.join(BASE_COLUMNS)},x1..xp", line=1, path=path)
        if num_predictors is not None and p != num_predictors:
            raise DatasetParseError(f"expected {num_predictors} predictors, found {p}", line=1, path=path)
        if levels is not None and len(levels) != p:
            raise DatasetParseError(f"declared {len(levels)} level counts for {p} predictors", line=1, path=path)
        subject, trial, time, y, x = [], [], [], [], []
        seen = {}
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DatasetParseError(f"expected {len(header)} fields, got {len(row)}", line=line, path=path)
            try:
                tr, tm = int(row[1]), int(row[2])
                value = float(row[3])
                levels_row = [int(v) for v in row[4:]]
            except ValueError as err:
                raise DatasetParseError(f"malformed value ({err})", line=line, path=path) from None
            sid = row[0].strip()
            if not sid:
                raise DatasetParseError("empty subject identifier", line=line, path=path)
            if not math.isfinite(value):
                raise DatasetParseError("response must be finite", line=line, path=path)
            if tm < 1 or (num_times is not None and tm > num_times):
                raise DatasetParseError(f"time index {tm} out of range", line=line, path=path)
            for j, level in enumerate(levels_row):
                if level < 1 or (levels is not None and level > levels[j]):
                    raise DatasetParseError(f"level {level} of x{j + 1} out of range", line=line, path=path)
            key = (sid, tr, tm)
            if key in seen:
                raise DatasetParseError(f"duplicate key {key} (first seen on line {seen[key]})",
                                        line=line, path=path)
            seen[key] = line
            subject.append(sid)
            trial.append(tr)
            time.append(tm)
            y.append(value)
            x.append(levels_row)
    x = np.asarray(x, dtype=np.int64).reshape(-1, p)
    if levels is None:
        levels = tuple(max(2, int(v)) for v in (x.max(axis=0) if len(x) else np.full(p, 2)))
    if num_times is None:
        num_times = max(2, max(time, default=2))
    dataset = Dataset(np.array(subject, dtype=object), trial, time, y, x, levels, num_times)
    try:
        dataset.validate(require_coverage=require_coverage)
    except InvalidArgumentError as err:
        raise DatasetParseError(str(err), path=path) from None
    return dataset


# Unique core coefficient vectors of the ten-predictor benchmark (T = 20).
TRUE_CORE_COEFFICIENTS = np.array([
    [5, 5, 5, 5, 6, 7.25, 8.5, 9, 9.25, 9.5, 9.5, 9.25, 9, 8.5, 7.25, 6, 5, 5, 5, 5],
    [5, 5, 5, 5, 4, 2.75, 1.5, 1, 0.75, 0.5, 0.5, 0.75, 1, 1.5, 2.75, 4, 5, 5, 5, 5],
    [5, 5, 5, 5, 6, 7.25, 8.5, 10.5, 12, 13.25, 13.75, 13.75, 13.5, 13, 12.5, 12, 11.25,
     10.5, 9.5, 8.5],
])


def true_curve_index(x1, x3):
    """Which true coefficient vector drives the 1-based levels ``(x1, x3)``.

    Level 3 of ``x3`` follows the second vector whatever ``x1`` is; levels 1
    and 2 follow the first vector when ``x1 = 1`` and the third otherwise.
    """
    x1 = np.asarray(x1)
    x3 = np.asarray(x3)
    return np.where(x3 >= 3, 1, np.where(x1 == 1, 0, 2))


@dataclass
class ScenarioConfig:
    n: int = 50
    trials: int = 5
    num_times: int = 20
    levels: tuple = (2, 2, 3, 3, 3, 3, 3, 3, 3, 3)
    sigma_eps2: float = 1.0
    sigma_us2: float = 0.1
    sigma_ua2: float = 2.0

    def validate(self):
        if self.n < 1 or self.trials < 1:
            raise InvalidArgumentError("n and trials must be positive")
        if self.num_times != TRUE_CORE_COEFFICIENTS.shape[1]:
            raise InvalidArgumentError(
                f"the benchmark curves are defined on {TRUE_CORE_COEFFICIENTS.shape[1]} time points"
            )
        levels = tuple(self.levels)
        if len(levels) < 3 or levels[0] < 2 or levels[2] < 3 or any(v < 2 for v in levels):
            raise InvalidArgumentError("need x1 with >= 2 levels and x3 with >= 3 levels")
        for name in ("sigma_eps2", "sigma_us2", "sigma_ua2"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise InvalidArgumentError(f"{name} must be finite and nonnegative")
        return self


@dataclass
class SyntheticTruth:
    core_coefficients: np.ndarray
    subject_levels: np.ndarray
    curve_index: np.ndarray
    random_effects: np.ndarray
    fixed_effect_rows: np.ndarray
    sigma_eps2: float
    sigma_us2: float
    sigma_ua2: float
    levels: tuple = field(default=())

    def fixed_effect(self, combination):
        """True curve (length T) of a 1-based level combination."""
        combination = np.asarray(combination)
        return self.core_coefficients[int(true_curve_index(combination[0], combination[2]))]

    def location_partition(self, combinations, k):
        """True partition at 0-based location ``k`` of 1-based ``combinations``."""
        combinations = np.asarray(combinations)
        values = self.core_coefficients[true_curve_index(combinations[:, 0], combinations[:, 2]), k]
        groups = {}
        for c, v in enumerate(values.tolist()):
            groups.setdefault(v, []).append(c)
        return {frozenset(g) for g in groups.values()}

    def as_dict(self):
        return {
            "core_coefficients": self.core_coefficients.tolist(),
            "subject_levels": self.subject_levels.tolist(),
            "curve_index": self.curve_index.tolist(),
            "random_effects": self.random_effects.tolist(),
            "sigma_eps2": self.sigma_eps2,
            "sigma_us2": self.sigma_us2,
            "sigma_ua2": self.sigma_ua2,
            "levels": list(self.levels),
        }


def sample_random_effect_curves(n, K, sigma_us2, sigma_ua2, rng):
    """Draw ``n`` curves from ``MVN(0, (I / sigma_ua2 + P / sigma_us2)^-1)``.

    Zero ``sigma_ua2`` gives flat zero curves; zero ``sigma_us2`` forces
    constant curves.
    """
    if sigma_ua2 == 0:
        return np.zeros((n, K))
    if sigma_us2 == 0:
        return np.repeat(rng.standard_normal((n, 1)) * math.sqrt(sigma_ua2 / K), K, axis=1)
    precision = np.eye(K) / sigma_ua2 + difference_penalty(K) / sigma_us2
    chol = np.linalg.cholesky(precision)
    z = rng.standard_normal((K, n))
    return np.linalg.solve(chol.T, z).T


def generate_synthetic(config=None, rng=None):
    """Simulate the benchmark scenario with two locally important predictors.

    Each subject gets covariate levels drawn uniformly, fixed over trials and
    time. Responses are true curve + subject random effect + Gaussian noise.
    """
    config = (config or ScenarioConfig()).validate()
    rng = np.random.default_rng(rng)
    n, L, T = config.n, config.trials, config.num_times
    levels = tuple(int(v) for v in config.levels)
    subject_levels = np.stack([rng.integers(1, x_max + 1, size=n) for x_max in levels], axis=1)
    curve_index = true_curve_index(subject_levels[:, 0], subject_levels[:, 2])
    random_effects = sample_random_effect_curves(n, T, config.sigma_us2, config.sigma_ua2, rng)

    subj = np.repeat(np.arange(n), T * L)
    time = np.tile(np.repeat(np.arange(1, T + 1), L), n)
    trial = np.tile(np.arange(1, L + 1), n * T)
    fixed = TRUE_CORE_COEFFICIENTS[curve_index[subj], time - 1]
    noise = rng.standard_normal(subj.size) * math.sqrt(config.sigma_eps2)
    y = fixed + random_effects[subj, time - 1] + noise
    width = len(str(n))
    names = np.array([f"s{i + 1:0{width}d}" for i in range(n)], dtype=object)
    dataset = Dataset(names[subj], trial, time, y, subject_levels[subj], levels, T)
    truth = SyntheticTruth(
        core_coefficients=TRUE_CORE_COEFFICIENTS.astype(float).copy(),
        subject_levels=subject_levels,
        curve_index=curve_index,
        random_effects=random_effects,
        fixed_effect_rows=fixed,
        sigma_eps2=config.sigma_eps2,
        sigma_us2=config.sigma_us2,
        sigma_ua2=config.sigma_ua2,
        levels=levels,
    )
    return dataset, truth
