"""Ground-truth simulation of particle flow through a type-II counter.

Arrivals follow a Poisson process on [0, t]; particle i blocks the sensor on
[a_i, a_i + s_i]. Maximal unions of overlapping blockages form clumps. A
clump still open at the horizon is flagged residual: it is excluded from the
observed sample (its length is not observable) but its particles still count
toward the true total flow A(t).

Arrivals are generated by accumulating exponential inter-arrival gaps in
fixed-size blocks, so extending the horizon extends a stream instead of
reshuffling it; arrival and segment draws come from separate child streams
for the same reason.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .estimate import ClumpSample
from .model import ModelParams, SegmentLaw
from .numerics import RandomStream

_ARRIVAL_BLOCK = 4096


@dataclass
class SimRun:
    """One simulated observation period, with full ground truth."""

    arrivals: np.ndarray
    segments: np.ndarray
    clump_starts: np.ndarray
    clump_lengths: np.ndarray
    clump_orders: np.ndarray
    spacings: np.ndarray
    residual_open: bool
    residual_order: int
    a_t: int
    horizon: float

    @property
    def n_clumps(self) -> int:
        return self.clump_lengths.size

    def summary(self) -> dict:
        lengths = self.clump_lengths
        return {
            "n_clumps": int(self.n_clumps),
            "a_t": int(self.a_t),
            "residual_open": bool(self.residual_open),
            "residual_order": int(self.residual_order),
            "mean_length": float(lengths.mean()) if lengths.size else None,
            "var_length": float(lengths.var(ddof=1)) if lengths.size > 1 else None,
            "horizon": float(self.horizon),
        }

    def write_clumps_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["start", "length", "order"])
            for s, l, k in zip(self.clump_starts, self.clump_lengths, self.clump_orders):
                writer.writerow([f"{s:.12g}", f"{l:.12g}", int(k)])


def poisson_arrivals(lam: float, horizon: float, rng: np.random.Generator) -> np.ndarray:
    """Arrival times of a rate-lam Poisson process on [0, horizon]."""
    if lam <= 0 or horizon <= 0:
        raise ValueError("lam and horizon must be positive")
    chunks = []
    last = 0.0
    while True:
        gaps = rng.exponential(1.0 / lam, _ARRIVAL_BLOCK)
        times = last + np.cumsum(gaps)
        if times[-1] > horizon:
            chunks.append(times[times <= horizon])
            break
        chunks.append(times)
        last = times[-1]
    return np.concatenate(chunks)


def clumps_from_arrivals(arrivals: np.ndarray, segments: np.ndarray, horizon: float):
    """Sweep arrivals into clumps of overlapping occupation intervals.

    Returns (starts, lengths, orders, spacings, residual_open, residual_order)
    where the first four cover complete clumps only. A new clump begins at
    arrival a_j exactly when a_j exceeds the running maximum occupation end.
    Spacings pair one-to-one with complete clumps; the first spacing runs from
    the origin to the first arrival.
    """
    arrivals = np.asarray(arrivals, dtype=float)
    segments = np.asarray(segments, dtype=float)
    if arrivals.shape != segments.shape:
        raise ValueError("arrivals and segments must be parallel")
    if np.any(np.diff(arrivals) < 0):
        raise ValueError("arrivals must be sorted ascending")
    if np.any(segments <= 0):
        raise ValueError("segment lengths must be positive")
    empty = np.empty(0)
    if arrivals.size == 0:
        return empty, empty, np.empty(0, dtype=int), empty, False, 0

    running_end = np.maximum.accumulate(arrivals + segments)
    is_new = np.empty(arrivals.size, dtype=bool)
    is_new[0] = True
    is_new[1:] = arrivals[1:] > running_end[:-1]
    start_idx = np.flatnonzero(is_new)
    bounds = np.append(start_idx, arrivals.size)

    starts = arrivals[start_idx]
    ends = running_end[bounds[1:] - 1]
    lengths = ends - starts
    orders = np.diff(bounds)
    spacings = starts - np.concatenate(([0.0], ends[:-1]))

    residual_open = bool(ends[-1] > horizon)
    residual_order = int(orders[-1]) if residual_open else 0
    if residual_open:
        starts, lengths, orders = starts[:-1], lengths[:-1], orders[:-1]
        spacings = spacings[:-1]
    return starts, lengths, orders, spacings, residual_open, residual_order


def simulate_run(params: ModelParams, stream: RandomStream) -> SimRun:
    """Simulate one observation period under the given model parameters."""
    if params.horizon_t is None:
        raise ValueError("params.horizon_t must be set for simulation")
    rng_arrivals, rng_segments = stream.generators(2)
    arrivals = poisson_arrivals(params.lam, params.horizon_t, rng_arrivals)
    segments = params.segments.sample(rng_segments, arrivals.size)
    starts, lengths, orders, spacings, residual_open, residual_order = clumps_from_arrivals(
        arrivals, segments, params.horizon_t
    )
    return SimRun(
        arrivals=arrivals, segments=segments,
        clump_starts=starts, clump_lengths=lengths, clump_orders=orders,
        spacings=spacings, residual_open=residual_open, residual_order=residual_order,
        a_t=int(arrivals.size), horizon=params.horizon_t,
    )


@dataclass(frozen=True)
class CellParams:
    """One (sigma, t, lambda) cell of a crossed simulation design."""

    sigma: float
    horizon: float
    lam: float
    index: int

    def key(self) -> tuple[float, float, float]:
        return (self.sigma, self.horizon, self.lam)


@dataclass(frozen=True)
class ExperimentDesign:
    """Crossed (lambda x horizon x sigma) design with common segment mean."""

    lambdas: tuple[float, ...] = (0.1, 0.2, 0.3)
    horizons: tuple[float, ...] = (1000.0, 10000.0)
    sigmas: tuple[float, ...] = (0.0, 0.5, 1.0)
    mu: float = 5.0
    replicates: int = 500
    master_seed: int = 0

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.mu <= 0 or any(l <= 0 for l in self.lambdas) or any(t <= 0 for t in self.horizons):
            raise ValueError("lambdas, horizons and mu must be positive")
        if any(s < 0 for s in self.sigmas):
            raise ValueError("sigmas must be nonnegative")

    def cells(self) -> list[CellParams]:
        out = []
        for sigma in self.sigmas:
            for horizon in self.horizons:
                for lam in self.lambdas:
                    out.append(CellParams(sigma, horizon, lam, index=len(out)))
        return out


@dataclass
class CellReplicate:
    """Observable sample plus ground-truth summary for one replicate."""

    cell: CellParams
    replicate: int
    summary: dict
    sample: ClumpSample | None = field(repr=False, default=None)


def replicate_stream(design: ExperimentDesign, cell: CellParams, replicate: int) -> RandomStream:
    """Stream for one replicate: stream_id = cell_index * replicates + replicate."""
    return RandomStream(design.master_seed, cell.index * design.replicates + replicate)


def _run_replicate(design: ExperimentDesign, cell: CellParams, rep: int) -> CellReplicate:
    params = ModelParams(
        lam=cell.lam,
        segments=SegmentLaw(mean=design.mu, sd=cell.sigma),
        horizon_t=cell.horizon,
    )
    run = simulate_run(params, replicate_stream(design, cell, rep))
    sample = None
    if run.n_clumps:
        sample = ClumpSample.from_lengths(
            run.clump_lengths, mu=design.mu, spacings=run.spacings
        )
    return CellReplicate(cell=cell, replicate=rep, summary=run.summary(), sample=sample)


def run_design(design: ExperimentDesign, threads: int = 1,
               cells: list[CellParams] | None = None) -> dict[tuple, list[CellReplicate]]:
    """Run all replicates of all cells; deterministic given the master seed.

    Output order and content depend only on (design, master_seed), never on
    the thread count: each replicate draws from its own derived stream and
    results are assembled in (cell, replicate) index order.
    """
    if cells is None:
        cells = design.cells()
    jobs = [(cell, rep) for cell in cells for rep in range(design.replicates)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda cr: _run_replicate(design, *cr), jobs))
    else:
        results = [_run_replicate(design, cell, rep) for cell, rep in jobs]
    out: dict[tuple, list[CellReplicate]] = {cell.key(): [] for cell in cells}
    for item in results:
        out[item.cell.key()].append(item)
    for key, reps in out.items():
        if any(r.sample is None for r in reps):
            raise DataError(f"cell {key} produced an empty replicate; horizon too short")
    return out
