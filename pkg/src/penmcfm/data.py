"""Survival datasets: validation, column roles, splitting and standardization."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

BLOCKS = ("Zu", "Zp", "Xu", "Xp")


class DataValidationError(ValueError):
    """Raised when an input table violates the dataset invariants."""


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 0)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SurvivalDataset:
    """Observed right-censored data with the four covariate blocks.

    ``Zu``/``Zp`` feed the incidence (cure) part, ``Xu``/``Xp`` the latency
    part; the ``p`` blocks are penalized. ``y_true``, ``w_true`` and
    ``pi_true`` are only populated by the simulator (NaN marks an unknown
    cure status).
    """

    t: np.ndarray
    delta: np.ndarray
    Zu: np.ndarray
    Zp: np.ndarray
    Xu: np.ndarray
    Xp: np.ndarray
    y_true: np.ndarray | None = None
    w_true: np.ndarray | None = None
    pi_true: np.ndarray | None = None
    names: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    shared_penalized: bool = False

    @property
    def n(self) -> int:
        return int(self.t.shape[0])

    @property
    def widths(self) -> dict[str, int]:
        return {b: int(getattr(self, b).shape[1]) for b in BLOCKS}

    def column_names(self, block: str) -> tuple[str, ...]:
        names = self.names.get(block)
        if names is None:
            names = tuple(f"{block}_{j}" for j in range(getattr(self, block).shape[1]))
        return tuple(names)

    def subset(self, rows) -> "SurvivalDataset":
        rows = np.asarray(rows)
        kw = {}
        for name in ("t", "delta", "Zu", "Zp", "Xu", "Xp", "y_true", "w_true", "pi_true"):
            val = getattr(self, name)
            kw[name] = None if val is None else val[rows]
        if self.shared_penalized:
            kw["Xp"] = kw["Zp"]
        return make_dataset(**kw, names=self.names, shared_penalized=self.shared_penalized)


def make_dataset(
    t,
    delta,
    Zu=None,
    Zp=None,
    Xu=None,
    Xp=None,
    y_true=None,
    w_true=None,
    pi_true=None,
    names: Mapping[str, Sequence[str]] | None = None,
    shared_penalized: bool = False,
) -> SurvivalDataset:
    """Build a validated :class:`SurvivalDataset` from array-likes.

    Missing covariate blocks become ``n x 0`` matrices. When
    ``shared_penalized`` is set and ``Xp`` is omitted, ``Xp`` is ``Zp``.
    """
    t_arr = _frozen(t, 1).ravel()
    n = t_arr.shape[0]
    blocks = {}
    for name, val in (("Zu", Zu), ("Zp", Zp), ("Xu", Xu), ("Xp", Xp)):
        if val is None:
            if name == "Xp" and shared_penalized and Zp is not None:
                continue
            arr = np.zeros((n, 0))
            arr.setflags(write=False)
        else:
            arr = _frozen(val, 2)
            if arr.size == 0:
                arr = np.zeros((n, 0))
                arr.setflags(write=False)
        blocks[name] = arr
    if shared_penalized:
        blocks["Xp"] = blocks["Zp"]
    opt = {}
    for name, val in (("y_true", y_true), ("w_true", w_true), ("pi_true", pi_true)):
        opt[name] = None if val is None else _frozen(val, 1).ravel()
    ds = SurvivalDataset(
        t=t_arr,
        delta=_frozen(delta, 1).ravel(),
        **blocks,
        **opt,
        names={k: tuple(v) for k, v in (names or {}).items()},
        shared_penalized=shared_penalized,
    )
    check_dataset(ds)
    return ds


def check_dataset(ds: SurvivalDataset) -> None:
    """Raise :class:`DataValidationError` if any dataset invariant fails."""
    n = ds.n
    if ds.delta.shape[0] != n:
        raise DataValidationError(f"row-count mismatch: status has {ds.delta.shape[0]} rows, time has {n}")
    bad = np.flatnonzero(~np.isfinite(ds.t))
    if bad.size:
        raise DataValidationError(f"non-finite value in column 'time' at row {bad[0]}")
    bad = np.flatnonzero(ds.t <= 0)
    if bad.size:
        raise DataValidationError(f"non-positive time at row {bad[0]} (t={ds.t[bad[0]]!r})")
    bad = np.flatnonzero(~np.isin(ds.delta, (0.0, 1.0)))
    if bad.size:
        raise DataValidationError(f"status outside {{0,1}} at row {bad[0]} (value {ds.delta[bad[0]]!r})")
    for block in BLOCKS:
        arr = getattr(ds, block)
        if arr.ndim != 2 or arr.shape[0] != n:
            raise DataValidationError(f"row-count mismatch in block {block}: {arr.shape[0]} rows, expected {n}")
        if arr.size and not np.all(np.isfinite(arr)):
            r, c = np.argwhere(~np.isfinite(arr))[0]
            raise DataValidationError(
                f"non-finite value in column '{ds.column_names(block)[c]}' ({block}) at row {r}"
            )
    if ds.y_true is not None and ds.y_true.shape[0] != n:
        raise DataValidationError("row-count mismatch in y_true")
    if ds.pi_true is not None and ds.pi_true.shape[0] != n:
        raise DataValidationError("row-count mismatch in pi_true")


# ---------------------------------------------------------------------------
# column roles and CSV input
# ---------------------------------------------------------------------------

ROLE_KEYS = ("time", "status", "z_unpen", "z_pen", "x_unpen", "x_pen")


@dataclass(frozen=True)
class ColumnRoles:
    time: str
    status: str
    z_unpen: tuple[str, ...] = ()
    z_pen: tuple[str, ...] = ()
    x_unpen: tuple[str, ...] = ()
    x_pen: tuple[str, ...] = ()
    shared_penalized: bool = False

    @classmethod
    def from_mapping(cls, cfg: Mapping) -> "ColumnRoles":
        unknown = set(cfg) - set(ROLE_KEYS) - {"shared_penalized"}
        if unknown:
            raise DataValidationError(f"unknown role keys: {sorted(unknown)}")
        if "time" not in cfg or "status" not in cfg:
            raise DataValidationError("roles must name exactly one 'time' and one 'status' column")
        lists = {k: tuple(cfg.get(k, ())) for k in ("z_unpen", "z_pen", "x_unpen", "x_pen")}
        shared = bool(cfg.get("shared_penalized", False))
        if shared:
            pen = lists["z_pen"] or lists["x_pen"]
            if lists["z_pen"] and lists["x_pen"] and lists["z_pen"] != lists["x_pen"]:
                raise DataValidationError("shared_penalized requires z_pen and x_pen to list the same columns")
            lists["z_pen"] = lists["x_pen"] = pen
        return cls(time=str(cfg["time"]), status=str(cfg["status"]), shared_penalized=shared, **lists)

    @classmethod
    def from_json(cls, path) -> "ColumnRoles":
        with open(path) as fh:
            return cls.from_mapping(json.load(fh))

    def to_mapping(self) -> dict:
        return {
            "time": self.time,
            "status": self.status,
            "z_unpen": list(self.z_unpen),
            "z_pen": list(self.z_pen),
            "x_unpen": list(self.x_unpen),
            "x_pen": list(self.x_pen),
            "shared_penalized": self.shared_penalized,
        }

    def check(self, columns: Sequence[str]) -> None:
        cols = set(columns)
        used = [self.time, self.status, *self.z_unpen, *self.z_pen, *self.x_unpen]
        used += [] if self.shared_penalized else list(self.x_pen)
        missing = [c for c in used + list(self.x_pen) if c not in cols]
        if missing:
            raise DataValidationError(f"roles reference missing columns: {missing}")
        seen: dict[str, int] = {}
        for c in used:
            seen[c] = seen.get(c, 0) + 1
        dup = sorted(c for c, k in seen.items() if k > 1)
        if dup:
            raise DataValidationError(f"columns assigned more than one role: {dup}")


def validate_dataset(table: Mapping[str, Sequence], roles: ColumnRoles) -> SurvivalDataset:
    """Turn a parsed column table into a :class:`SurvivalDataset`.

    ``table`` maps column name to a sequence of values. Errors name the
    offending column and row. Constant penalized columns are reported with a
    warning and kept (they are never selected after standardization).
    """
    roles.check(list(table))
    lengths = {c: len(v) for c, v in table.items()}
    n = lengths[roles.time]
    for c, k in lengths.items():
        if k != n:
            raise DataValidationError(f"row-count mismatch: column '{c}' has {k} rows, expected {n}")

    def column(name):
        vals = table[name]
        out = np.empty(n)
        for i, v in enumerate(vals):
            try:
                out[i] = float(v)
            except (TypeError, ValueError):
                raise DataValidationError(f"non-numeric or missing value in column '{name}' at row {i}") from None
        bad = np.flatnonzero(~np.isfinite(out))
        if bad.size:
            raise DataValidationError(f"non-finite value in column '{name}' at row {bad[0]}")
        return out

    def matrix(names):
        if not names:
            return np.zeros((n, 0))
        return np.column_stack([column(c) for c in names])

    t = column(roles.time)
    bad = np.flatnonzero(t <= 0)
    if bad.size:
        raise DataValidationError(f"non-positive time in column '{roles.time}' at row {bad[0]}")
    delta = column(roles.status)
    bad = np.flatnonzero(~np.isin(delta, (0.0, 1.0)))
    if bad.size:
        raise DataValidationError(f"status outside {{0,1}} in column '{roles.status}' at row {bad[0]}")

    Zp = matrix(roles.z_pen)
    Xp = Zp if roles.shared_penalized else matrix(roles.x_pen)
    names = {"Zu": roles.z_unpen, "Zp": roles.z_pen, "Xu": roles.x_unpen, "Xp": roles.x_pen}
    for label, mat, cols in (("Zp", Zp, roles.z_pen), ("Xp", Xp, roles.x_pen)):
        if mat.shape[1] and n > 1:
            const = np.flatnonzero(np.ptp(mat, axis=0) == 0)
            if const.size:
                warnings.warn(
                    f"constant penalized columns in {label} excluded from selection: "
                    f"{[cols[j] for j in const]}",
                    stacklevel=2,
                )
    return make_dataset(
        t,
        delta,
        matrix(roles.z_unpen),
        Zp,
        matrix(roles.x_unpen),
        Xp,
        names=names,
        shared_penalized=roles.shared_penalized,
    )


def read_table(path) -> dict[str, list[str]]:
    """Read a headed CSV into a column-name -> string values mapping."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        cols: dict[str, list[str]] = {h: [] for h in header}
        if len(cols) != len(header):
            raise DataValidationError(f"{path}: duplicate column names in header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataValidationError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
            for h, v in zip(header, row):
                if v.strip() == "":
                    raise DataValidationError(f"{path}: missing value in column '{h}' at row {lineno - 2}")
                cols[h].append(v)
    return cols


def load_csv(data_path, roles: ColumnRoles | str | Path) -> SurvivalDataset:
    if not isinstance(roles, ColumnRoles):
        roles = ColumnRoles.from_json(roles)
    return validate_dataset(read_table(data_path), roles)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def split_indices(n: int, test_fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n_test > n - 1:
        raise ValueError(f"test_fraction={test_fraction} leaves an empty part for n={n}")
    perm = _rng(seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def split_train_test(ds: SurvivalDataset, test_fraction: float, seed) -> tuple[SurvivalDataset, SurvivalDataset]:
    """Random disjoint train/test partition, deterministic in ``seed``."""
    train, test = split_indices(ds.n, test_fraction, seed)
    return ds.subset(train), ds.subset(test)


def kfold_partition(n: int, k: int, seed) -> list[np.ndarray]:
    """Shuffle ``range(n)`` and cut into ``k`` folds whose sizes differ by at most one."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"k={k} exceeds n={n}")
    perm = _rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingInfo:
    """Column means/stds applied to ``Zp`` and ``Xp``.

    Constant columns keep ``std = 1`` and are centred to zero, so they carry
    no signal and their coefficients stay at zero.
    """

    mean_z: np.ndarray
    std_z: np.ndarray
    mean_x: np.ndarray
    std_x: np.ndarray
    constant_z: np.ndarray
    constant_x: np.ndarray

    def scale(self, ds: SurvivalDataset) -> SurvivalDataset:
        Zp = _frozen((ds.Zp - self.mean_z) / self.std_z, 2)
        Xp = Zp if ds.shared_penalized else _frozen((ds.Xp - self.mean_x) / self.std_x, 2)
        return replace(ds, Zp=Zp, Xp=Xp)

    def unscale(self, ds: SurvivalDataset) -> SurvivalDataset:
        Zp = _frozen(ds.Zp * self.std_z + self.mean_z, 2)
        Xp = Zp if ds.shared_penalized else _frozen(ds.Xp * self.std_x + self.mean_x, 2)
        return replace(ds, Zp=Zp, Xp=Xp)


def _moments(mat: np.ndarray):
    if mat.shape[1] == 0:
        empty = np.zeros(0)
        return empty, np.ones(0), np.zeros(0, dtype=bool)
    mean = mat.mean(axis=0)
    std = mat.std(axis=0, ddof=1) if mat.shape[0] > 1 else np.zeros(mat.shape[1])
    const = ~(std > 1e-12 * np.maximum(1.0, np.abs(mean)))
    std = np.where(const, 1.0, std)
    return mean, std, const


def standardize_penalized(ds: SurvivalDataset) -> tuple[SurvivalDataset, ScalingInfo]:
    """Centre and scale every penalized column to sample mean 0, sample std 1."""
    mz, sz, cz = _moments(ds.Zp)
    if ds.shared_penalized:
        mx, sx, cx = mz, sz, cz
    else:
        mx, sx, cx = _moments(ds.Xp)
    if cz.any() or cx.any():
        warnings.warn(
            f"{int(cz.sum())} constant Zp and {int(cx.sum())} constant Xp columns excluded from penalization",
            stacklevel=2,
        )
    info = ScalingInfo(mz, sz, mx, sx, cz, cx)
    return info.scale(ds), info
