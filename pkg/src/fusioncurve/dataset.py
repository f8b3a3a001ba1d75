"""Fused two-study data model: validated records, CSV ingestion, overlap tools.

The fused dataset stacks a historical efficacy trial (covariates, arm, marker,
right-censored outcome) and a bridging study (covariates, arm, marker only).
Records are validated on construction and the dataset is immutable afterwards;
columnar numpy views are cached for the numerical code.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from fusioncurve.errors import (
    AllBridgingDropped,
    BadArmCode,
    EmptyArm,
    HorizonExceedsData,
    MissingColumn,
    NonPositiveTime,
)


class ArmLabel(enum.IntEnum):
    """Vaccine assignment: placebo 0, approved 1, investigational 1' (coded 2)."""

    PLACEBO = 0
    APPROVED = 1
    INVESTIGATIONAL = 2


class TrialIndicator(enum.IntEnum):
    HISTORICAL = 0
    BRIDGING = 1


# text codes used in CSV files; "1p" keeps the prime ASCII-clean
_ARM_CODES = {"0": ArmLabel.PLACEBO, "1": ArmLabel.APPROVED, "1p": ArmLabel.INVESTIGATIONAL}
_ARM_TEXT = {v: k for k, v in _ARM_CODES.items()}


@dataclass(frozen=True)
class SubjectRecord:
    """One subject; outcome fields present iff the record is historical."""

    x: tuple
    a: ArmLabel
    gamma: TrialIndicator
    s: tuple
    t_obs: Optional[float] = None
    delta: Optional[int] = None

    def validate(self, d: int, n_marker: int, n_causes: int) -> None:
        if len(self.x) != d:
            raise MissingColumn(f"covariate vector has length {len(self.x)}, expected {d}")
        if len(self.s) != n_marker:
            raise MissingColumn(f"marker vector has length {len(self.s)}, expected {n_marker}")
        if self.gamma == TrialIndicator.BRIDGING:
            if self.t_obs is not None or self.delta is not None:
                raise BadArmCode("bridging records must not carry outcome fields")
            if self.a == ArmLabel.PLACEBO:
                raise BadArmCode("placebo arm is not allowed in the bridging study")
        else:
            if self.t_obs is None or self.delta is None:
                raise MissingColumn("historical records need observed time and event fields")
            if self.t_obs <= 0:
                raise NonPositiveTime(f"observed time must be positive, got {self.t_obs}")
            if not (0 <= self.delta <= n_causes):
                raise BadArmCode(
                    f"event code {self.delta} outside 0..{n_causes}")
            if self.a == ArmLabel.INVESTIGATIONAL:
                raise BadArmCode("investigational arm is not allowed in the historical study")


class FusedDataset:
    """Immutable container for the stacked historical + bridging records.

    Parameters
    ----------
    records : sequence of SubjectRecord
    horizon : float
        Maximal analysis time H; must not exceed the largest observed time.
    n_causes : int
        Number of event causes J (1 for the single-endpoint analysis).
    n_trimmed : int
        Bookkeeping from trim_to_overlap (0 for freshly loaded data).
    """

    def __init__(self, records: Sequence[SubjectRecord], horizon: float,
                 n_causes: int = 1, n_trimmed: int = 0):
        records = tuple(records)
        if not records:
            raise EmptyArm("no records supplied")
        d = len(records[0].x)
        n_marker = len(records[0].s)
        for r in records:
            r.validate(d, n_marker, n_causes)
        self.records = records
        self.d = d
        self.n_marker = n_marker
        self.J = n_causes
        self.n_trimmed = n_trimmed

        gamma = np.array([int(r.gamma) for r in records], dtype=np.int8)
        self.gamma = gamma
        self.arm = np.array([int(r.a) for r in records], dtype=np.int8)
        self.x = np.array([r.x for r in records], dtype=float)
        self.s = np.array([r.s for r in records], dtype=float)
        self.t_obs = np.array([r.t_obs if r.t_obs is not None else np.nan for r in records])
        self.delta = np.array([r.delta if r.delta is not None else -1 for r in records],
                              dtype=np.int64)
        self.n_h = int(np.sum(gamma == 0))
        self.n_b = int(np.sum(gamma == 1))

        for g, name in ((0, "historical"), (1, "bridging")):
            arms, counts = np.unique(self.arm[gamma == g], return_counts=True)
            if arms.size == 0:
                raise EmptyArm(f"no {name} records")
            for a, c in zip(arms, counts):
                if c < 2:
                    raise EmptyArm(f"{name} arm {_ARM_TEXT[ArmLabel(a)]} has {c} row(s); need >= 2")

        if horizon <= 0:
            raise NonPositiveTime(f"horizon must be positive, got {horizon}")
        tmax = float(np.nanmax(self.t_obs))
        if horizon > tmax:
            raise HorizonExceedsData(
                f"horizon {horizon} exceeds largest observed time {tmax}")
        self.horizon = float(horizon)

    @property
    def n(self) -> int:
        return self.n_h + self.n_b

    @property
    def kappa_hat(self) -> float:
        return self.n_b / self.n

    def mask(self, gamma=None, arm=None) -> np.ndarray:
        m = np.ones(self.n, dtype=bool)
        if gamma is not None:
            m &= self.gamma == int(gamma)
        if arm is not None:
            m &= self.arm == int(arm)
        return m

    def __repr__(self):
        return (f"FusedDataset(n_h={self.n_h}, n_b={self.n_b}, d={self.d}, "
                f"J={self.J}, horizon={self.horizon})")


@dataclass
class OverlapDiagnostic:
    """Per-coordinate range comparison between the two trials."""

    hist_min: np.ndarray
    hist_max: np.ndarray
    bridge_min: np.ndarray
    bridge_max: np.ndarray
    outside_fraction: np.ndarray = field(default=None)


def _require(row: dict, col: str, row_idx: int, path: str) -> str:
    if col not in row or row[col] is None or row[col] == "":
        raise MissingColumn(f"{path}: row {row_idx}: missing value for column '{col}'")
    return row[col]


def _read_rows(path: str, needed: Sequence[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in needed:
            if col not in header:
                raise MissingColumn(f"{path}: column '{col}' not in header {header}")
        return list(reader)


def load_fused_csv(path_h: str, path_b: str, schema: dict, horizon: float) -> FusedDataset:
    """Load and validate the two study files into one FusedDataset.

    schema keys: covariate_cols (list), arm_col, marker_cols (list),
    time_col, event_col (the last two apply to the historical file only).
    Gamma is assigned by source file.  J is the number of marker columns.
    """
    xcols = list(schema["covariate_cols"])
    mcols = list(schema["marker_cols"])
    acol = schema["arm_col"]
    tcol, ecol = schema["time_col"], schema["event_col"]
    n_causes = len(mcols)

    records = []
    for row_idx, row in enumerate(_read_rows(path_h, xcols + mcols + [acol, tcol, ecol])):
        code = _require(row, acol, row_idx, path_h)
        if code not in ("0", "1"):
            raise BadArmCode(f"{path_h}: row {row_idx}: arm '{code}' not allowed in the "
                             "historical file (expected 0 or 1)")
        t_obs = float(_require(row, tcol, row_idx, path_h))
        if t_obs <= 0:
            raise NonPositiveTime(f"{path_h}: row {row_idx}: time {t_obs} <= 0")
        records.append(SubjectRecord(
            x=tuple(float(_require(row, c, row_idx, path_h)) for c in xcols),
            a=_ARM_CODES[code], gamma=TrialIndicator.HISTORICAL,
            s=tuple(float(_require(row, c, row_idx, path_h)) for c in mcols),
            t_obs=t_obs, delta=int(_require(row, ecol, row_idx, path_h))))
    for row_idx, row in enumerate(_read_rows(path_b, xcols + mcols + [acol])):
        code = _require(row, acol, row_idx, path_b)
        if code not in ("1", "1p"):
            raise BadArmCode(f"{path_b}: row {row_idx}: arm '{code}' not allowed in the "
                             "bridging file (expected 1 or 1p)")
        records.append(SubjectRecord(
            x=tuple(float(_require(row, c, row_idx, path_b)) for c in xcols),
            a=_ARM_CODES[code], gamma=TrialIndicator.BRIDGING,
            s=tuple(float(_require(row, c, row_idx, path_b)) for c in mcols)))
    return FusedDataset(records, horizon=horizon, n_causes=n_causes)


def write_fused_csv(ds: FusedDataset, path_h: str, path_b: str, schema: dict) -> None:
    """Inverse of load_fused_csv (round-trips numeric text via repr)."""
    xcols = list(schema["covariate_cols"])
    mcols = list(schema["marker_cols"])
    acol, tcol, ecol = schema["arm_col"], schema["time_col"], schema["event_col"]
    with open(path_h, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(xcols + mcols + [acol, tcol, ecol])
        for r in ds.records:
            if r.gamma == TrialIndicator.HISTORICAL:
                w.writerow([repr(float(v)) for v in r.x] + [repr(float(v)) for v in r.s]
                           + [_ARM_TEXT[r.a], repr(float(r.t_obs)), r.delta])
    with open(path_b, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(xcols + mcols + [acol])
        for r in ds.records:
            if r.gamma == TrialIndicator.BRIDGING:
                w.writerow([repr(float(v)) for v in r.x] + [repr(float(v)) for v in r.s] + [_ARM_TEXT[r.a]])


def overlap_report(ds: FusedDataset) -> OverlapDiagnostic:
    """Range comparison of covariates between trials (purely diagnostic)."""
    xh = ds.x[ds.gamma == 0]
    xb = ds.x[ds.gamma == 1]
    lo, hi = xh.min(axis=0), xh.max(axis=0)
    outside = ((xb < lo) | (xb > hi)).mean(axis=0)
    return OverlapDiagnostic(hist_min=lo, hist_max=hi,
                             bridge_min=xb.min(axis=0), bridge_max=xb.max(axis=0),
                             outside_fraction=outside)


def trim_to_overlap(ds: FusedDataset) -> FusedDataset:
    """Drop bridging rows outside the historical per-coordinate covariate box.

    The returned dataset records the number of dropped rows in n_trimmed and
    recomputes all counts (and hence kappa-hat).
    """
    xh = ds.x[ds.gamma == 0]
    lo, hi = xh.min(axis=0), xh.max(axis=0)
    keep = []
    dropped = 0
    for r in ds.records:
        if r.gamma == TrialIndicator.BRIDGING:
            inside = all(l <= v <= h for v, l, h in zip(r.x, lo, hi))
            if not inside:
                dropped += 1
                continue
        keep.append(r)
    if not any(r.gamma == TrialIndicator.BRIDGING for r in keep):
        raise AllBridgingDropped("no bridging rows remain inside the historical range")
    return FusedDataset(keep, horizon=ds.horizon, n_causes=ds.J, n_trimmed=dropped)
