"""Raw counter-record ingestion.

The counter reports, per clump, the array-to-array transit time dt_f and the
total blocked time dt_b; with the fixed 0.00078 m array gap these give the
clump velocity v = 0.00078/dt_f (m/s) and physical clump length
cl = v * dt_b (m). Real records contain junk (negative velocities or
lengths, fragments far below one particle diameter) which is screened out
before estimation; screening is itemized, never silent.

Analysis can run in the physical domain (mm) or the time domain (msec);
division by the mean velocity (numerically equal in mm/msec and m/s) maps
one onto the other, and flow-intensity estimates transform inversely.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .estimate import DEFAULT_SINGLETON_RTOL, ClumpSample

SENSOR_GAP_M = 0.00078
# fraction of removed records above which a run is suspect
REMOVAL_WARN_FRACTION = 0.01

SCHEMAS = {
    "dtf_dtb": ("dt_f_s", "dt_b_s"),
    "v_cl": ("v_m_s", "cl_m"),
}


@dataclass(frozen=True)
class CounterRecord:
    """One clump as reported by the counter, in SI units."""

    v: float                    # m/s
    cl: float                   # meters
    dt_f: float | None = None   # seconds
    dt_b: float | None = None   # seconds

    @classmethod
    def from_timings(cls, dt_f: float, dt_b: float) -> "CounterRecord":
        if dt_f == 0.0:
            raise ZeroDivisionError("dt_f = 0 gives infinite velocity")
        v = SENSOR_GAP_M / dt_f
        return cls(v=v, cl=v * dt_b, dt_f=dt_f, dt_b=dt_b)


@dataclass(frozen=True)
class RejectedRow:
    row: int
    reason: str
    raw: str


def parse_counter_csv(path, schema: str) -> tuple[list[CounterRecord], list[RejectedRow]]:
    """Parse a counter CSV; malformed rows go to the rejects list.

    Accepted schemas: ``dtf_dtb`` with header ``dt_f_s,dt_b_s`` and ``v_cl``
    with header ``v_m_s,cl_m``. A zero-byte file yields no records and no
    rejects; a wrong header is an error.
    """
    if schema not in SCHEMAS:
        raise DataError(f"unknown schema {schema!r}; expected one of {sorted(SCHEMAS)}")
    expected = SCHEMAS[schema]
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    records: list[CounterRecord] = []
    rejects: list[RejectedRow] = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return records, rejects
        if [h.strip() for h in header] != list(expected):
            raise DataError(
                f"header {header} does not match schema {schema!r} {expected}"
            )
        for i, row in enumerate(reader, start=2):
            raw = ",".join(row)
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                rejects.append(RejectedRow(i, "wrong column count", raw))
                continue
            try:
                a, b = float(row[0]), float(row[1])
            except ValueError:
                rejects.append(RejectedRow(i, "non-numeric value", raw))
                continue
            if not (math.isfinite(a) and math.isfinite(b)):
                rejects.append(RejectedRow(i, "non-finite value", raw))
                continue
            if schema == "dtf_dtb":
                if a == 0.0:
                    rejects.append(RejectedRow(i, "infinite velocity (dt_f = 0)", raw))
                    continue
                records.append(CounterRecord.from_timings(a, b))
            else:
                records.append(CounterRecord(v=a, cl=b))
    return records, rejects


@dataclass
class RemovalReport:
    """Which records cleaning removed, and why."""

    n_raw: int
    removed: list[tuple[CounterRecord, str]] = field(default_factory=list)

    @property
    def n_removed(self) -> int:
        return len(self.removed)

    @property
    def fraction(self) -> float:
        return self.n_removed / self.n_raw if self.n_raw else 0.0

    def counts_by_reason(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for _, reason in self.removed:
            out[reason] = out.get(reason, 0) + 1
        return out


def clean_records(records: list[CounterRecord], d0: float,
                  min_frac: float = 0.5) -> tuple[list[CounterRecord], RemovalReport]:
    """Screen out physically impossible or fragmentary records.

    Removes negative/zero velocities, nonpositive lengths, and clumps shorter
    than ``min_frac`` particle diameters (d0 in meters). Removing more than
    1% of a run raises a warning; clean runs should stay below that.
    Idempotent: cleaning a cleaned list removes nothing.
    """
    if d0 <= 0:
        raise ValueError("d0 must be positive")
    if not 0.0 <= min_frac < 1.0:
        raise ValueError("min_frac must be in [0, 1)")
    kept: list[CounterRecord] = []
    report = RemovalReport(n_raw=len(records))
    for rec in records:
        if rec.v <= 0.0:
            report.removed.append((rec, "negative velocity"))
        elif rec.cl <= 0.0:
            report.removed.append((rec, "nonpositive length"))
        elif rec.cl < min_frac * d0:
            report.removed.append((rec, "short clump"))
        else:
            kept.append(rec)
    if report.fraction > REMOVAL_WARN_FRACTION:
        warnings.warn(
            f"cleaning removed {report.fraction:.1%} of records "
            f"(> {REMOVAL_WARN_FRACTION:.0%}); run is suspect",
            stacklevel=2,
        )
    return kept, report


def to_time_domain(values, vbar: float):
    """Map physical lengths (mm) to passage times (msec) by mean velocity."""
    if vbar <= 0:
        raise ValueError("mean velocity must be positive")
    return np.asarray(values, dtype=float) / vbar


def to_physical_domain(values, vbar: float):
    """Inverse of to_time_domain."""
    if vbar <= 0:
        raise ValueError("mean velocity must be positive")
    return np.asarray(values, dtype=float) * vbar


def rate_to_time_domain(lam: float, vbar: float) -> float:
    """Flow intensity transforms inversely to lengths: per-msec = per-mm * vbar."""
    if vbar <= 0:
        raise ValueError("mean velocity must be positive")
    return lam * vbar


def build_sample(lengths, mu: float,
                 singleton_rtol: float = DEFAULT_SINGLETON_RTOL) -> ClumpSample:
    """ClumpSample from cleaned lengths (any single consistent unit)."""
    y = np.asarray(lengths, dtype=float)
    if y.size == 0:
        raise DataError("no clump lengths; nothing to analyze")
    if np.any(y <= 0):
        raise DataError("nonpositive clump lengths present; clean the records first")
    return ClumpSample.from_lengths(y, mu=mu, singleton_rtol=singleton_rtol)


@dataclass
class RunSummary:
    """Per-run ingest summary in the chosen analysis domain."""

    run_id: str
    n_raw: int
    n_removed: int
    n: int
    ybar: float
    s2y: float
    vbar: float
    domain: str

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "n_raw": self.n_raw,
            "n_removed": self.n_removed,
            "n": self.n,
            "ybar": self.ybar,
            "s2y": self.s2y,
            "vbar": self.vbar,
            "domain": self.domain,
        }
