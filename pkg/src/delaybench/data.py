"""Assignment records: CSV ingest, cleaning, max-abs normalization, splits
and a seeded synthetic generator shaped after the study's descriptive table.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import combinations
from pathlib import Path

import numpy as np

ID_COLUMNS = ("student_id", "course_id", "assignment_id")
SUBJ_COLUMNS = ("gase", "sdls", "apss", "aps")
OBJ_COLUMNS = ("clicks_assignment", "interval_days", "clicks_activities")
TARGET_COLUMN = "delay"
NUMERIC_COLUMNS = SUBJ_COLUMNS + OBJ_COLUMNS + (TARGET_COLUMN,)
CSV_HEADER = ID_COLUMNS + SUBJ_COLUMNS + OBJ_COLUMNS + ("delay_days",)

# (mean, sd, min, max) per variable
COLUMN_TARGETS = {
    "gase": (19.71, 3.10, 8.0, 25.0),
    "sdls": (38.74, 5.29, 18.0, 50.0),
    "apss": (11.04, 4.16, 5.0, 21.0),
    "aps": (72.51, 11.87, 43.0, 104.0),
    "clicks_assignment": (6.58, 4.91, 1.0, 34.0),
    "interval_days": (-7.13, 32.40, -150.30, 98.72),
    "clicks_activities": (173.83, 168.44, 0.0, 1237.0),
    "delay": (-1.66, 18.26, -113.51, 132.43),
}
INTEGER_COLUMNS = ("gase", "sdls", "apss", "aps", "clicks_assignment", "clicks_activities")


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, row, column, value):
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r}")
        self.row = row
        self.column = column


class EmptyDatasetError(DataError):
    pass


class CalibrationError(DataError):
    pass


class PredictorSet(str, Enum):
    SUBJ = "subj"
    OBJ = "obj"
    COMB = "comb"

    @property
    def columns(self) -> tuple[str, ...]:
        if self is PredictorSet.SUBJ:
            return SUBJ_COLUMNS
        if self is PredictorSet.OBJ:
            return OBJ_COLUMNS
        # objective block first, then subjective
        return OBJ_COLUMNS + SUBJ_COLUMNS


class NormalizationScope(str, Enum):
    ALL_ROWS = "all_rows"
    TRAIN_ONLY = "train_only"


@dataclass
class AssignmentRecord:
    student_id: str | None
    course_id: str | None
    assignment_id: str | None
    gase: float | None
    sdls: float | None
    apss: float | None
    aps: float | None
    clicks_assignment: float | None
    interval_days: float | None
    clicks_activities: float | None
    delay: float | None

    def is_complete(self) -> bool:
        return all(getattr(self, name) is not None for name in ID_COLUMNS + NUMERIC_COLUMNS)


@dataclass
class Dataset:
    """Complete rows held column-wise.

    ``values`` has one column per entry of ``NUMERIC_COLUMNS`` (delay last).
    """

    student_id: np.ndarray
    course_id: np.ndarray
    assignment_id: np.ndarray
    values: np.ndarray
    dropped: int = 0
    scales: "NormalizationScales | None" = None

    def __len__(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, NUMERIC_COLUMNS.index(name)]

    @property
    def delay(self) -> np.ndarray:
        return self.column(TARGET_COLUMN)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return replace(
            self,
            student_id=self.student_id[rows],
            course_id=self.course_id[rows],
            assignment_id=self.assignment_id[rows],
            values=self.values[rows],
        )

    def group_codes(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense integer codes for (student, course) membership of every row."""
        _, students = np.unique(self.student_id, return_inverse=True)
        _, courses = np.unique(self.course_id, return_inverse=True)
        return students.astype(np.int64), courses.astype(np.int64)


@dataclass(frozen=True)
class NormalizationScales:
    max_abs: dict
    scope: NormalizationScope = NormalizationScope.ALL_ROWS

    @property
    def y_max(self) -> float:
        return self.max_abs[TARGET_COLUMN]


# --------------------------------------------------------------------------
# ingest


def _parse_float(text, row, column):
    text = text.strip()
    if text == "":
        return None
    try:
        value = float(text)
    except ValueError:
        raise ParseError(row, column, text) from None
    if not math.isfinite(value):
        raise ParseError(row, column, text)
    return value


def load_csv(path) -> list[AssignmentRecord]:
    """Read assignment rows; empty cells become ``None``.

    Row numbers in errors count the header as row 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header") from None
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise SchemaError(f"missing column {missing[0]!r}")
        extra = [c for c in header if c not in CSV_HEADER]
        if extra:
            raise SchemaError(f"unexpected column {extra[0]!r}")
        if len(set(header)) != len(header):
            raise SchemaError("duplicate column in header")
        index = {name: header.index(name) for name in CSV_HEADER}

        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(lineno, "<row>", ",".join(row))
            fields = {}
            for name in ID_COLUMNS:
                text = row[index[name]].strip()
                fields[name] = text or None
            for name in SUBJ_COLUMNS + OBJ_COLUMNS:
                fields[name] = _parse_float(row[index[name]], lineno, name)
            fields["delay"] = _parse_float(row[index["delay_days"]], lineno, "delay_days")
            records.append(AssignmentRecord(**fields))
    return records


def _fmt(value: float, integer: bool) -> str:
    if integer and float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def write_csv(dataset: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for i in range(len(dataset)):
            row = [dataset.student_id[i], dataset.course_id[i], dataset.assignment_id[i]]
            row += [
                _fmt(v, name in INTEGER_COLUMNS)
                for name, v in zip(NUMERIC_COLUMNS, dataset.values[i])
            ]
            writer.writerow(row)


def drop_missing(records) -> Dataset:
    complete = [r for r in records if r.is_complete()]
    if not complete:
        raise EmptyDatasetError(f"all {len(records)} rows have missing fields")
    values = np.array(
        [[getattr(r, c) for c in NUMERIC_COLUMNS] for r in complete], dtype=float
    )
    return Dataset(
        student_id=np.array([r.student_id for r in complete], dtype=object),
        course_id=np.array([r.course_id for r in complete], dtype=object),
        assignment_id=np.array([r.assignment_id for r in complete], dtype=object),
        values=values,
        dropped=len(records) - len(complete),
    )


# --------------------------------------------------------------------------
# normalization


def fit_normalizer(
    dataset: Dataset,
    scope=NormalizationScope.ALL_ROWS,
    train_indices=None,
    columns=NUMERIC_COLUMNS,
) -> NormalizationScales:
    """Max-absolute scale per column.

    Columns left out of ``columns`` get scale 1 (passed through unchanged),
    as do all-zero columns.
    """
    scope = NormalizationScope(scope)
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot fit scales on an empty dataset")
    values = dataset.values
    if scope is NormalizationScope.TRAIN_ONLY:
        if train_indices is None:
            raise ValueError("TRAIN_ONLY scope needs train_indices")
        values = values[np.asarray(train_indices)]
    scales = {}
    for j, name in enumerate(NUMERIC_COLUMNS):
        m = float(np.max(np.abs(values[:, j]))) if name in columns else 0.0
        scales[name] = m if m > 0 else 1.0
    return NormalizationScales(max_abs=scales, scope=scope)


def _scale_vector(scales: NormalizationScales) -> np.ndarray:
    try:
        return np.array([scales.max_abs[c] for c in NUMERIC_COLUMNS], dtype=float)
    except KeyError as exc:
        raise SchemaError(f"scales lack column {exc.args[0]!r}") from None


def apply_normalizer(dataset: Dataset, scales: NormalizationScales) -> Dataset:
    """Divide every column by its scale. Out-of-range values are kept as is."""
    if dataset.values.shape[1] != len(NUMERIC_COLUMNS):
        raise SchemaError("dataset columns do not match the record schema")
    return replace(dataset, values=dataset.values / _scale_vector(scales), scales=scales)


def invert_normalizer(dataset: Dataset, scales: NormalizationScales) -> Dataset:
    return replace(dataset, values=dataset.values * _scale_vector(scales), scales=None)


def project(dataset: Dataset, predictor_set) -> tuple[np.ndarray, np.ndarray]:
    cols = PredictorSet(predictor_set).columns
    idx = [NUMERIC_COLUMNS.index(c) for c in cols]
    return dataset.values[:, idx].copy(), dataset.delay.copy()


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    partitions: tuple
    train_fraction: float = 0.8

    def __len__(self):
        return len(self.partitions)


def make_split_plan(n_rows: int, seed: int, n_splits: int = 10, train_fraction: float = 0.8) -> SplitPlan:
    if n_rows < 10:
        raise ValueError(f"need at least 10 rows to split, got {n_rows}")
    n_train = int(math.floor(train_fraction * n_rows))
    if not 0 < n_train < n_rows:
        raise ValueError(f"train_fraction {train_fraction} leaves an empty side")
    if math.comb(n_rows, n_train) < n_splits:
        raise ValueError(f"only {math.comb(n_rows, n_train)} distinct splits exist")
    rng = np.random.default_rng(seed)
    seen = set()
    partitions = []
    while len(partitions) < n_splits:
        perm = rng.permutation(n_rows)
        train = np.sort(perm[:n_train])
        key = train.tobytes()
        if key in seen:
            continue
        seen.add(key)
        partitions.append((train, np.sort(perm[n_train:])))
    return SplitPlan(seed=seed, partitions=tuple(partitions), train_fraction=train_fraction)


def overlap_stats(plan: SplitPlan) -> tuple[float, float, int, int]:
    """(mean, sample sd, min, max) of test-set intersections over all pairs."""
    if len(plan) < 2:
        raise ValueError("overlap needs at least two partitions")
    sizes = [
        np.intersect1d(a[1], b[1], assume_unique=True).size
        for a, b in combinations(plan.partitions, 2)
    ]
    sizes = np.array(sizes, dtype=float)
    sd = float(sizes.std(ddof=1)) if sizes.size > 1 else float("nan")
    return float(sizes.mean()), sd, int(sizes.min()), int(sizes.max())


# --------------------------------------------------------------------------
# synthetic data


def _default_signals():
    # coefficients on standardized predictors; objective block dominates
    return {
        "clicks_assignment": -0.35,
        "interval_days": 0.85,
        "clicks_activities": -0.20,
        "gase": -0.15,
        "sdls": -0.10,
        "apss": 0.30,
        "aps": 0.20,
    }


@dataclass
class SynthConfig:
    n_students: int = 134
    n_courses: int = 126
    n_assignments: int = 1107
    target_timely_fraction: float = 0.67
    column_targets: dict = field(default_factory=lambda: dict(COLUMN_TARGETS))
    signal_strengths: dict = field(default_factory=_default_signals)
    student_effect_sd: float = 0.25
    course_effect_sd: float = 0.25
    noise_sd: float = 0.55
    max_courses_per_student: int = 3

    def validate(self) -> None:
        if not 0.0 < self.target_timely_fraction < 1.0:
            raise ValueError(
                f"target_timely_fraction must lie in (0, 1), got {self.target_timely_fraction}"
            )
        for name in ("n_students", "n_courses", "n_assignments", "max_courses_per_student"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_assignments < self.n_courses:
            raise ValueError("need at least one assignment per course")
        for name in NUMERIC_COLUMNS:
            mean, sd, lo, hi = self.column_targets[name]
            if not lo < hi:
                raise ValueError(f"{name}: min {lo} must be below max {hi}")
            if sd <= 0:
                raise ValueError(f"{name}: sd must be positive")
        unknown = set(self.signal_strengths) - set(SUBJ_COLUMNS + OBJ_COLUMNS)
        if unknown:
            raise ValueError(f"signal for unknown predictor {sorted(unknown)[0]!r}")
        for name in ("student_effect_sd", "course_effect_sd", "noise_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _calibrate_mean(values, weights, target, lo, hi, iters=50):
    """Shift then clip until the weighted mean hits ``target``."""
    x = np.clip(values, lo, hi)
    for _ in range(iters):
        gap = target - np.average(x, weights=weights)
        if abs(gap) < 1e-9 * max(1.0, abs(target)):
            break
        x = np.clip(x + gap, lo, hi)
    return x


def _draw_column(rng, name, size, targets):
    mean, sd, lo, hi = targets[name]
    if name in ("clicks_assignment", "clicks_activities"):
        # right-skewed counts: shifted gamma with matching moments
        excess = mean - lo
        shape = (excess / sd) ** 2
        return lo + rng.gamma(shape, sd**2 / excess, size)
    return rng.normal(mean, sd, size)


def _enrollments(rng, cfg: SynthConfig):
    """Student/course pairs covering every student and every course."""
    pairs = set()
    courses = rng.permutation(cfg.n_courses)
    students = rng.permutation(cfg.n_students)
    for i in range(max(cfg.n_students, cfg.n_courses)):
        pairs.add((int(students[i % cfg.n_students]), int(courses[i % cfg.n_courses])))
    for s in range(cfg.n_students):
        extra = min(int(rng.integers(0, cfg.max_courses_per_student)), cfg.n_courses)
        for c in rng.choice(cfg.n_courses, size=extra, replace=False):
            pairs.add((s, int(c)))
    return np.array(sorted(pairs), dtype=np.int64)


def _scale_two_sided(latent, mean, sd):
    """Positive scalings (a, b) of the late/timely parts so that
    a*L+ - b*L- has the requested mean and sd. Signs are preserved."""
    pos = np.maximum(latent, 0.0)
    neg = np.maximum(-latent, 0.0)
    mp, mn = pos.mean(), neg.mean()
    qp, qn = (pos**2).mean(), (neg**2).mean()
    if mp <= 0 or mn <= 0:
        raise CalibrationError("latent delay has only one sign")
    second = sd**2 + mean**2
    # a = (mean + b*mn)/mp substituted into a^2 qp + b^2 qn = second
    qa = mn**2 * qp / mp**2 + qn
    qb = 2.0 * mean * mn * qp / mp**2
    qc = mean**2 * qp / mp**2 - second
    disc = qb**2 - 4 * qa * qc
    if disc < 0:
        raise CalibrationError("no scaling matches the delay mean and sd")
    b = (-qb + math.sqrt(disc)) / (2 * qa)
    a = (mean + b * mn) / mp
    if a <= 0 or b <= 0:
        raise CalibrationError("delay mean/sd targets incompatible with the timely fraction")
    return a, b


def generate_synthetic(config: SynthConfig | None = None, seed: int = 0) -> Dataset:
    """Hierarchical students x courses x assignments sample.

    Subjective scores are drawn per student, activity clicks per course and
    the two assignment-level features per row. Delay follows a linear latent
    model on standardized predictors plus student and course effects and
    Gaussian noise; the intercept is set so the timely share matches the
    target, then each sign half is rescaled toward the delay mean/sd.
    """
    cfg = config or SynthConfig()
    cfg.validate()
    targets = cfg.column_targets
    rng = np.random.default_rng(seed)

    pairs = _enrollments(rng, cfg)
    n = cfg.n_assignments
    # every enrollment gets a share of the rows; first pass guarantees coverage
    if n >= len(pairs):
        owner = np.concatenate([np.arange(len(pairs)), rng.integers(0, len(pairs), n - len(pairs))])
    else:
        owner = rng.choice(len(pairs), size=n, replace=False)
    owner = np.sort(owner)
    student = pairs[owner, 0]
    course = pairs[owner, 1]

    cols = {}
    row_weights = np.ones(n)
    student_counts = np.bincount(student, minlength=cfg.n_students).astype(float)
    course_counts = np.bincount(course, minlength=cfg.n_courses).astype(float)
    for name in SUBJ_COLUMNS:
        mean, _, lo, hi = targets[name]
        per_student = _draw_column(rng, name, cfg.n_students, targets)
        per_student = _calibrate_mean(per_student, student_counts + 1e-12, mean, lo, hi)
        cols[name] = per_student[student]
    mean, _, lo, hi = targets["clicks_activities"]
    per_course = _draw_column(rng, "clicks_activities", cfg.n_courses, targets)
    per_course = _calibrate_mean(per_course, course_counts + 1e-12, mean, lo, hi)
    cols["clicks_activities"] = per_course[course]
    for name in ("clicks_assignment", "interval_days"):
        mean, _, lo, hi = targets[name]
        cols[name] = _calibrate_mean(_draw_column(rng, name, n, targets), row_weights, mean, lo, hi)
    for name in INTEGER_COLUMNS:
        lo, hi = targets[name][2], targets[name][3]
        cols[name] = np.clip(np.round(cols[name]), math.ceil(lo), math.floor(hi))

    latent = np.zeros(n)
    for name, strength in cfg.signal_strengths.items():
        mean, sd, _, _ = targets[name]
        latent += strength * (cols[name] - mean) / sd
    latent += rng.normal(0.0, cfg.student_effect_sd, cfg.n_students)[student]
    latent += rng.normal(0.0, cfg.course_effect_sd, cfg.n_courses)[course]
    latent += rng.normal(0.0, cfg.noise_sd, n)

    if np.ptp(latent) == 0:
        raise CalibrationError("latent delay is constant; nothing to calibrate")
    latent = latent - np.quantile(latent, cfg.target_timely_fraction)
    timely = float(np.mean(latent <= 0))
    if abs(timely - cfg.target_timely_fraction) > 0.03 + 1.0 / n:
        raise CalibrationError(
            f"timely share {timely:.3f} cannot reach target {cfg.target_timely_fraction}"
        )

    mean, sd, lo, hi = targets["delay"]
    aim_mean, aim_sd = mean, sd
    for _ in range(20):
        a, b = _scale_two_sided(latent, aim_mean, aim_sd)
        delay = np.clip(np.where(latent > 0, a * latent, b * latent), lo, hi)
        gap_mean, gap_sd = mean - delay.mean(), sd - delay.std()
        if abs(gap_mean) < 1e-6 and abs(gap_sd) < 1e-6:
            break
        # clipping shrank the tails; aim past the target
        aim_mean += gap_mean
        aim_sd += gap_sd
    cols["delay"] = np.round(delay, 2)
    # rounding must not flip a timely row to late
    cols["delay"] = np.where(latent > 0, np.maximum(cols["delay"], 0.01), np.minimum(cols["delay"], 0.0))

    values = np.column_stack([cols[c] for c in NUMERIC_COLUMNS])
    width_s = len(str(cfg.n_students - 1))
    width_c = len(str(cfg.n_courses - 1))
    return Dataset(
        student_id=np.array([f"s{s:0{width_s}d}" for s in student], dtype=object),
        course_id=np.array([f"c{c:0{width_c}d}" for c in course], dtype=object),
        assignment_id=np.array([f"a{i:05d}" for i in range(n)], dtype=object),
        values=values,
    )
