"""Fault-sensor rows, windowing, train/test split and scenario task streams."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_FEATURES = 51
N_FAULT_TYPES = 11
N_ZONES = 4
N_RESISTANCES = 22
WINDOW = 12
STRIDE = 6
TRAIN_FRACTION = 0.8
LABEL_COLUMNS = ("fault_type", "zone", "resistance_id")


class DataError(ValueError):
    pass


@dataclass
class SampleRows:
    """Column-oriented collection of sensor rows."""

    features: np.ndarray  # N x F float64
    fault_type: np.ndarray  # N int
    zone: np.ndarray  # N int
    resistance_id: np.ndarray  # N int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.fault_type = np.asarray(self.fault_type, dtype=np.int64)
        self.zone = np.asarray(self.zone, dtype=np.int64)
        self.resistance_id = np.asarray(self.resistance_id, dtype=np.int64)
        n = len(self.features)
        if self.features.ndim != 2 or not (len(self.fault_type) == len(self.zone) == len(self.resistance_id) == n):
            raise DataError("row columns have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.features)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampleRows):
            return NotImplemented
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.fault_type, other.fault_type)
            and np.array_equal(self.zone, other.zone)
            and np.array_equal(self.resistance_id, other.resistance_id)
        )

    def validate(self, n_features: int = N_FEATURES, n_types: int = N_FAULT_TYPES, n_zones: int = N_ZONES) -> None:
        if self.features.shape[1] != n_features:
            raise DataError(f"expected {n_features} features per row, got {self.features.shape[1]}")
        for name, col, hi in (("fault_type", self.fault_type, n_types), ("zone", self.zone, n_zones)):
            bad = np.flatnonzero((col < 0) | (col >= hi))
            if len(bad):
                raise DataError(f"row {bad[0]}: {name}={col[bad[0]]} outside 0..{hi - 1}")

    def take(self, idx) -> "SampleRows":
        return SampleRows(self.features[idx], self.fault_type[idx], self.zone[idx], self.resistance_id[idx])

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features, self.fault_type, self.zone, self.resistance_id):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


@dataclass
class WindowSet:
    """Windows of W consecutive rows with their (shared) labels.

    ``uid`` is a stable identifier assigned at windowing time; it is used
    for de-duplication and as the tie-break order in buffer selection.
    """

    x: np.ndarray  # N x W x F
    fault_type: np.ndarray
    zone: np.ndarray
    uid: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    def labels(self, target: str) -> np.ndarray:
        if target == "fault_type":
            return self.fault_type
        if target == "zone":
            return self.zone
        raise ValueError(f"unknown target {target!r}")

    def take(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(self.x[idx], self.fault_type[idx], self.zone[idx], self.uid[idx])

    @staticmethod
    def concat(parts: list["WindowSet"]) -> "WindowSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise DataError("nothing to concatenate")
        return WindowSet(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.fault_type for p in parts]),
            np.concatenate([p.zone for p in parts]),
            np.concatenate([p.uid for p in parts]),
        )


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool mask of zero-variance columns

    def apply(self, values: np.ndarray) -> np.ndarray:
        safe = np.where(self.constant, 1.0, self.std)
        out = (values - self.mean) / safe
        out[..., self.constant] = 0.0
        return out


@dataclass
class DatasetSplit:
    train: WindowSet
    test: WindowSet
    normalization: NormStats
    source_digest: str = ""


@dataclass(frozen=True)
class TaskSpec:
    class_set: tuple[int, ...]
    zone_filter: tuple[int, ...] | None = None


@dataclass
class ScenarioPlan:
    scenario_id: int
    target: str  # "fault_type" or "zone"
    tasks: list[TaskSpec]
    n_classes: int
    incremental: str  # "class" or "domain"

    def classes_through(self, t: int) -> list[int]:
        seen = set()
        for task in self.tasks[: t + 1]:
            seen.update(task.class_set)
        return sorted(seen)


@dataclass
class Scenario:
    plan: ScenarioPlan
    train_streams: list[WindowSet] = field(default_factory=list)
    test_streams: list[WindowSet] = field(default_factory=list)
    test: WindowSet | None = None
    train: WindowSet | None = None


# ----------------------------------------------------------------------
# normalization and windowing
# ----------------------------------------------------------------------


def zscore_fit(values: np.ndarray) -> NormStats:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or len(values) == 0:
        raise DataError("z-score fit needs a non-empty 2-D table")
    if len(values) < 2:
        raise DataError("z-score fit needs at least 2 rows")
    mean = values.mean(axis=0)
    std = values.std(axis=0)  # population convention
    return NormStats(mean, std, std < 1e-9)


def zscore_fit_apply(values: np.ndarray) -> tuple[np.ndarray, NormStats]:
    stats = zscore_fit(values)
    return stats.apply(np.asarray(values, dtype=np.float64)), stats


def window_count(n: int, window: int = WINDOW, stride: int = STRIDE) -> int:
    trimmed = window * (n // window)
    if trimmed < window:
        return 0
    return (trimmed - window) // stride + 1


def window_starts(n: int, window: int = WINDOW, stride: int = STRIDE) -> np.ndarray:
    trimmed = window * (n // window)
    return np.arange(0, trimmed - window + 1, stride) if trimmed >= window else np.zeros(0, dtype=np.int64)


def group_rows(rows: SampleRows) -> list[tuple[tuple[int, int], np.ndarray]]:
    """Row indices per (fault_type, zone), groups sorted by class, rows kept in order."""
    keys = rows.fault_type * 1000 + rows.zone
    order = np.argsort(keys, kind="stable")
    groups = []
    for key in np.unique(keys):
        idx = order[keys[order] == key]
        groups.append(((int(key // 1000), int(key % 1000)), idx))
    return groups


def windowize_indices(rows: SampleRows, window: int = WINDOW, stride: int = STRIDE):
    """Row-index matrix (N x window) plus per-window labels."""
    starts_all, ft, zn = [], [], []
    for (f, z), idx in group_rows(rows):
        starts = window_starts(len(idx), window, stride)
        for s in starts:
            starts_all.append(idx[s : s + window])
            ft.append(f)
            zn.append(z)
    if not starts_all:
        return np.zeros((0, window), np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.stack(starts_all), np.asarray(ft), np.asarray(zn)


def windowize(rows: SampleRows, window: int = WINDOW, stride: int = STRIDE) -> WindowSet:
    ridx, ft, zn = windowize_indices(rows, window, stride)
    x = rows.features[ridx] if len(ridx) else np.zeros((0, window, rows.features.shape[1]))
    return WindowSet(x.astype(np.float32), ft, zn, np.arange(len(ft)))


def stratified_split(ft: np.ndarray, zn: np.ndarray, train_fraction: float, rng: np.random.Generator):
    train, test = [], []
    keys = ft * 1000 + zn
    for key in np.unique(keys):
        idx = np.flatnonzero(keys == key)
        perm = rng.permutation(idx)
        k = int(round(train_fraction * len(idx)))
        train.append(np.sort(perm[:k]))
        test.append(np.sort(perm[k:]))
    return np.concatenate(train), np.concatenate(test)


def prepare_split(
    rows: SampleRows,
    seed: int,
    train_fraction: float = TRAIN_FRACTION,
    window: int = WINDOW,
    stride: int = STRIDE,
) -> DatasetSplit:
    """Windowize raw rows, split windows per cell, fit z-score on train rows only."""
    ridx, ft, zn = windowize_indices(rows, window, stride)
    if len(ridx) == 0:
        raise DataError("no complete windows in the dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5711]))
    tr, te = stratified_split(ft, zn, train_fraction, rng)
    train_rows = np.unique(ridx[tr].ravel())
    stats = zscore_fit(rows.features[train_rows])
    x = stats.apply(rows.features[ridx]).astype(np.float32)
    uid = np.arange(len(ridx))
    train = WindowSet(x[tr], ft[tr], zn[tr], uid[tr])
    test = WindowSet(x[te], ft[te], zn[te], uid[te])
    return DatasetSplit(train, test, stats, rows.digest())


# ----------------------------------------------------------------------
# scenarios
# ----------------------------------------------------------------------


def scenario_plan(scenario_id: int, n_types: int = N_FAULT_TYPES, n_zones: int = N_ZONES) -> ScenarioPlan:
    if scenario_id == 1:
        sets = [(0, 1, 2), (3, 4), (5, 6), (7, 8), (9, 10)]
        return ScenarioPlan(1, "fault_type", [TaskSpec(s) for s in sets], n_types, "class")
    if scenario_id == 2:
        sets = [(0, 1, 2)] + [(c,) for c in range(3, n_types)]
        return ScenarioPlan(2, "fault_type", [TaskSpec(s) for s in sets], n_types, "class")
    if scenario_id == 3:
        all_types = tuple(range(n_types))
        return ScenarioPlan(3, "fault_type", [TaskSpec(all_types, (z,)) for z in range(n_zones)], n_types, "domain")
    if scenario_id == 4:
        sets = [(0, 1), (2,), (3,)]
        return ScenarioPlan(4, "zone", [TaskSpec(s) for s in sets], n_zones, "class")
    raise ValueError(f"unknown scenario id {scenario_id!r}; expected 1..4")


def _task_mask(ws: WindowSet, plan: ScenarioPlan, task: TaskSpec) -> np.ndarray:
    mask = np.isin(ws.labels(plan.target), task.class_set)
    if task.zone_filter is not None:
        mask &= np.isin(ws.zone, task.zone_filter)
    return mask


def build_scenario(split: DatasetSplit, scenario_id: int) -> Scenario:
    plan = scenario_plan(scenario_id)
    sc = Scenario(plan, train=split.train, test=split.test)
    for task in plan.tasks:
        sc.train_streams.append(split.train.take(np.flatnonzero(_task_mask(split.train, plan, task))))
        sc.test_streams.append(split.test.take(np.flatnonzero(_task_mask(split.test, plan, task))))
    return sc


# ----------------------------------------------------------------------
# synthetic generator
# ----------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    """Generator settings; the defaults were tuned once and are frozen."""

    rows_per_cell: int = 264
    n_features: int = N_FEATURES
    n_types: int = N_FAULT_TYPES
    n_zones: int = N_ZONES
    seed: int = 0
    run_length: int = WINDOW
    class_mean_scale: float = 0.5
    zone_shift_scale: float = 0.6
    amplitude: float = 0.5
    noise: float = 1.8
    phase_jitter: float = 2.0


def generate_synthetic(config: SyntheticConfig | None = None, **overrides) -> SampleRows:
    """Deterministic stand-in for the feeder fault dataset.

    Each fault type owns a per-channel sinusoid family (frequency, phase,
    amplitude) and a small mean offset; each zone adds a mean shift and its
    own noise level.  Rows come in runs of ``run_length`` consecutive
    samples with a shared phase jitter so a window sees a coherent signal.
    """
    cfg = config or SyntheticConfig()
    if overrides:
        cfg = SyntheticConfig(**{**cfg.__dict__, **overrides})
    if cfg.rows_per_cell <= 0 or cfg.n_features <= 0 or cfg.n_types <= 0 or cfg.n_zones <= 0:
        raise ValueError("synthetic counts must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xDA7A]))
    F = cfg.n_features
    freq = rng.uniform(0.5, 3.0, size=(cfg.n_types, F))
    phase = rng.uniform(0, 2 * np.pi, size=(cfg.n_types, F))
    amp = cfg.amplitude * rng.uniform(0.3, 1.0, size=(cfg.n_types, F))
    class_mean = rng.normal(0, cfg.class_mean_scale, size=(cfg.n_types, F))
    zone_shift = rng.normal(0, cfg.zone_shift_scale, size=(cfg.n_zones, F))
    zone_noise = cfg.noise * np.linspace(0.8, 1.4, cfg.n_zones)
    chan_scale = rng.uniform(0.5, 2.0, size=F)
    chan_offset = rng.normal(0, 2.0, size=F)

    n = cfg.rows_per_cell
    t = np.arange(n)
    pos = (t % cfg.run_length) / cfg.run_length
    run = t // cfg.run_length
    n_runs = run[-1] + 1
    feats, ft, zn, rid = [], [], [], []
    for c in range(cfg.n_types):
        for z in range(cfg.n_zones):
            jitter = rng.uniform(-cfg.phase_jitter, cfg.phase_jitter, size=n_runs)[run]
            gain = rng.uniform(0.8, 1.2, size=n_runs)[run]
            wave = np.sin(2 * np.pi * freq[c] * pos[:, None] + phase[c] + jitter[:, None])
            x = class_mean[c] + zone_shift[z] + gain[:, None] * amp[c] * wave
            x = x + zone_noise[z] * rng.standard_normal((n, F))
            feats.append(chan_offset + chan_scale * x)
            ft.append(np.full(n, c))
            zn.append(np.full(n, z))
            rid.append(run % N_RESISTANCES)
    return SampleRows(np.concatenate(feats), np.concatenate(ft), np.concatenate(zn), np.concatenate(rid))


# ----------------------------------------------------------------------
# CSV i/o
# ----------------------------------------------------------------------


def feature_names(n: int = N_FEATURES) -> list[str]:
    return [f"f{i}" for i in range(n)]


def save_csv(rows: SampleRows, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(feature_names(rows.features.shape[1]) + list(LABEL_COLUMNS))
        for i in range(len(rows)):
            w.writerow(
                [repr(float(v)) for v in rows.features[i]]
                + [int(rows.fault_type[i]), int(rows.zone[i]), int(rows.resistance_id[i])]
            )


def load_csv(
    path, n_features: int = N_FEATURES, n_types: int = N_FAULT_TYPES, n_zones: int = N_ZONES
) -> SampleRows:
    """Parse a row table; feature columns are every column except the label ones."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for col in ("fault_type", "zone"):
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        fcols = [i for i, h in enumerate(header) if h not in LABEL_COLUMNS]
        if len(fcols) != n_features:
            raise DataError(f"{path}: expected {n_features} feature columns, found {len(fcols)}")
        i_ft, i_zn = header.index("fault_type"), header.index("zone")
        i_rid = header.index("resistance_id") if "resistance_id" in header else None
        feats, ft, zn, rid = [], [], [], []
        for rowno, rec in enumerate(reader):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: row {rowno}: expected {len(header)} cells, got {len(rec)}")
            try:
                feats.append([float(rec[i]) for i in fcols])
                f, z = int(rec[i_ft]), int(rec[i_zn])
                r = int(rec[i_rid]) if i_rid is not None else -1
            except ValueError as exc:
                raise DataError(f"{path}: row {rowno}: non-numeric cell ({exc})") from None
            if not 0 <= f < n_types:
                raise DataError(f"{path}: row {rowno}: fault_type={f} outside 0..{n_types - 1}")
            if not 0 <= z < n_zones:
                raise DataError(f"{path}: row {rowno}: zone={z} outside 0..{n_zones - 1}")
            ft.append(f)
            zn.append(z)
            rid.append(r)
    if not feats:
        return SampleRows(np.zeros((0, n_features)), [], [], [])
    return SampleRows(np.asarray(feats), ft, zn, rid)


def cell_counts(rows: SampleRows) -> dict[tuple[int, int], int]:
    keys, counts = np.unique(np.stack([rows.fault_type, rows.zone], axis=1), axis=0, return_counts=True)
    return {(int(k[0]), int(k[1])): int(c) for k, c in zip(keys, counts)}
