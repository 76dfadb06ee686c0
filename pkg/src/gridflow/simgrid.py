"""Simulated grid plus a desk-scale diffusion case study.

The case study models helium tracers moving through a one-dimensional
zeolite-like channel partly blocked by a static heavy adsorbate:

    lattice -> cbmc -> gcmc -> md -> analysis

Each stage stands in for a real simulation code. Every mock writes a
deliberately different native text format (CSV-like, key-value, fixed-width)
and ships with an adapter back to the canonical dataset form, so no stage
can talk to another except through the storage mediator.

The walk physics is exactly solvable: a free symmetric +-1 walk has
MSD(t) = t and self-diffusivity D = 1/2 via the Einstein relation, which
gives the analysis stage an analytic oracle. Blocking sites slows the walk,
so D decreases with loading fraction theta.

SimulatedExecutor runs jobs on a virtual clock: per-resource queues bounded
by the calculator's max_concurrent, a fixed per-resource latency, and seeded
shuffling of same-tick completions. Equal (seed, fault plan) means an
identical event order, which is what makes whole runs reproducible.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import numpy as np

from .errors import GridflowError, RuntimeFailure, UserError
from .model import (
    ACTIVITY,
    FINAL,
    FREE,
    PINNED_BOTH,
    PINNED_PROGRAM,
    START,
    Binding,
    Node,
    WorkflowGraph,
    build_graph,
)
from .quantities import Dataset, ExtractionSpec, Observable, format_number, get_unit, merge
from .resources import (
    FAILED,
    QUEUED,
    RUNNING,
    SUCCEEDED,
    TERMINAL_STATES,
    WITHDRAWN,
    Calculator,
    JobHandle,
    JobRequest,
    JobStatus,
    LaunchTemplate,
    License,
    ResourceDescriptor,
    ResourceRegistry,
    UnknownJob,
    UsageRecord,
)

__all__ = [
    "BadParams",
    "NoFreeSites",
    "Trajectory",
    "SimProgram",
    "SimulatedExecutor",
    "PROGRAMS",
    "mock_lattice",
    "mock_cbmc",
    "mock_gcmc",
    "mock_md",
    "mock_analysis",
    "msd",
    "diffusivity",
    "diffusivity_with_se",
    "standard_descriptors",
    "standard_registry",
    "build_case_study",
]


class BadParams(UserError):
    pass


class NoFreeSites(RuntimeFailure):
    pass


ONE = get_unit("dimensionless")
ANGSTROM = get_unit("angstrom")
ANGSTROM2 = get_unit("angstrom^2")
PS = get_unit("ps")
D_UNIT = get_unit("angstrom^2/ps")

# params the engine injects per job; mocks treat them as plumbing, not physics
RESERVED_PARAMS = ("seed", "attempt")


def _int_param(params, key, default=None) -> int:
    raw = params.get(key, default)
    if raw is None:
        raise BadParams(f"missing parameter {key!r}")
    try:
        return int(str(raw))
    except ValueError:
        raise BadParams(f"parameter {key!r} must be an integer, got {raw!r}") from None


def _float_param(params, key, default=None) -> float:
    raw = params.get(key, default)
    if raw is None:
        raise BadParams(f"missing parameter {key!r}")
    try:
        value = float(str(raw))
    except ValueError:
        raise BadParams(f"parameter {key!r} must be a number, got {raw!r}") from None
    if not math.isfinite(value):
        raise BadParams(f"parameter {key!r} must be finite")
    return value


def _seed_param(params) -> int:
    return _int_param(params, "seed", 0)


def _merged(inputs: dict) -> Dataset:
    if not inputs:
        return Dataset.build([])
    return merge([inputs[slot] for slot in sorted(inputs)])


# ---------------------------------------------------------------------------
# native format A: CSV-like (structure generator)
# ---------------------------------------------------------------------------


def lattice_native(params) -> str:
    """Chain of equally spaced sites, written as commented CSV."""
    cells = _int_param(params, "cells")
    cell_length = _float_param(params, "cell_length", "1.0")
    if cells < 2:
        raise BadParams(f"lattice needs at least 2 sites, got {cells}")
    if cell_length <= 0:
        raise BadParams("cell_length must be positive")
    lines = ["# lattice-csv 1", f"# cell_length = {format_number(cell_length)}", "x"]
    lines.extend(format_number(i * cell_length) for i in range(cells))
    return "\n".join(lines) + "\n"


def parse_lattice_native(text: str) -> Dataset:
    cell_length = None
    rows = []
    saw_header = False
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("cell_length"):
                cell_length = float(body.split("=", 1)[1])
            continue
        if not saw_header:
            if line != "x":
                raise RuntimeFailure(f"lattice output: expected column header 'x', got {line!r}")
            saw_header = True
            continue
        rows.append((float(line),))
    if cell_length is None or not rows:
        raise RuntimeFailure("lattice output: missing cell_length or site rows")
    return Dataset.build(
        [
            Observable.table("sites", ("x",), rows, ANGSTROM),
            Observable.scalar("cell_length", cell_length, ANGSTROM),
            Observable.scalar("n_sites", float(len(rows)), ONE),
        ]
    )


def mock_lattice(params) -> Dataset:
    return parse_lattice_native(lattice_native(params))


# ---------------------------------------------------------------------------
# native format B: key-value (Monte Carlo stages, analysis, test probes)
# ---------------------------------------------------------------------------


def _kv_text(tag: str, entries) -> str:
    lines = [f"format = {tag}"]
    lines.extend(f"{key} = {value}" for key, value in entries)
    return "\n".join(lines) + "\n"


def _kv_parse(text: str, tag: str) -> dict:
    entries = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise RuntimeFailure(f"{tag}: bad key-value line {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    if entries.get("format") != tag:
        raise RuntimeFailure(f"expected format {tag!r}, got {entries.get('format')!r}")
    return entries


def _int_list(raw: str) -> list[int]:
    raw = raw.strip()
    if not raw:
        return []
    return [int(tok) for tok in raw.split(",")]


def cbmc_native(lattice: Dataset, params) -> str:
    """Occupy floor(theta * L) sites uniformly at random under the seed."""
    theta = _float_param(params, "theta")
    if not 0.0 <= theta <= 1.0:
        raise BadParams(f"theta must lie in [0, 1], got {theta}")
    n_sites = int(lattice.get("n_sites").magnitude)
    rng = random.Random(_seed_param(params))
    occupied = sorted(rng.sample(range(n_sites), int(theta * n_sites)))
    return _kv_text(
        "mcsim-kv",
        [
            ("n_sites", str(n_sites)),
            ("theta", format_number(theta)),
            ("occupied", ",".join(str(s) for s in occupied)),
        ],
    )


def parse_cbmc_native(text: str) -> Dataset:
    entries = _kv_parse(text, "mcsim-kv")
    n_sites = int(entries["n_sites"])
    occupied = set(_int_list(entries.get("occupied", "")))
    rows = [(float(i), 1.0 if i in occupied else 0.0) for i in range(n_sites)]
    return Dataset.build(
        [
            Observable.table("occupancy", ("site", "occupied"), rows, ONE),
            Observable.scalar("n_occupied", float(len(occupied)), ONE),
            Observable.scalar("n_sites", float(n_sites), ONE),
            Observable.scalar("theta", float(entries["theta"]), ONE),
        ]
    )


def mock_cbmc(lattice: Dataset, params) -> Dataset:
    return parse_cbmc_native(cbmc_native(lattice, params))


def _occupied_sites(ds: Dataset) -> tuple[set[int], int]:
    table = ds.get("occupancy")
    occupied = {int(site) for site, flag in table.values if flag}
    return occupied, len(table.values)


def gcmc_native(occupancy: Dataset, params) -> str:
    """Drop helium walkers uniformly onto unoccupied sites (they overlap
    freely with each other, only the adsorbate blocks)."""
    n_helium = _int_param(params, "n_helium")
    if n_helium < 1:
        raise BadParams(f"n_helium must be >= 1, got {n_helium}")
    occupied, n_sites = _occupied_sites(occupancy)
    free = [s for s in range(n_sites) if s not in occupied]
    if not free:
        raise NoFreeSites("every lattice site is occupied by the adsorbate")
    rng = random.Random(_seed_param(params))
    positions = [rng.choice(free) for _ in range(n_helium)]
    return _kv_text(
        "gulpgc-kv",
        [
            ("n_sites", str(n_sites)),
            ("positions", ",".join(str(p) for p in positions)),
        ],
    )


def parse_gcmc_native(text: str) -> Dataset:
    entries = _kv_parse(text, "gulpgc-kv")
    positions = _int_list(entries["positions"])
    return Dataset.build(
        [
            Observable.series(
                "helium_positions",
                [(float(i), float(p)) for i, p in enumerate(positions)],
                ONE,
            ),
            Observable.scalar("n_walkers", float(len(positions)), ONE),
            Observable.scalar("n_sites", float(entries["n_sites"]), ONE),
        ]
    )


def mock_gcmc(occupancy: Dataset, params) -> Dataset:
    return parse_gcmc_native(gcmc_native(occupancy, params))


# ---------------------------------------------------------------------------
# native format C: fixed-width columns (the walk itself)
# ---------------------------------------------------------------------------

_COL = 12
_TIMESTEP_PS = 1.0


def md_native(config: Dataset, params) -> str:
    """Symmetric +-1 walk; moves onto adsorbate sites are rejected.

    Positions are unwrapped (displacement accumulates without the periodic
    fold), while the blocking test uses the folded coordinate.
    """
    steps = _int_param(params, "steps")
    if steps < 1:
        raise BadParams(f"steps must be >= 1, got {steps}")
    occupied, n_sites = _occupied_sites(config)
    walkers = [int(v) for _, v in config.get("helium_positions").values]
    if not walkers:
        raise BadParams("no helium walkers to propagate")
    theta = config.get("theta").magnitude if config.has("theta") else 0.0

    rng = random.Random(_seed_param(params))
    trail = [[p] for p in walkers]
    current = list(walkers)
    for _ in range(steps):
        for w in range(len(current)):
            move = rng.choice((-1, 1))
            if (current[w] + move) % n_sites not in occupied:
                current[w] += move
            trail[w].append(current[w])

    header = [
        "MDRUN TRAJECTORY 1",
        f"THETA    {format_number(theta)}",
        f"TIMESTEP {format_number(_TIMESTEP_PS)} ps",
        f"WALKERS  {len(walkers)}",
        f"STEPS    {steps}",
    ]
    cols = ["T"] + [f"W{w}" for w in range(len(walkers))]
    lines = ["".join(f"{c:>{_COL}}" for c in cols)]
    for t in range(steps + 1):
        row = [t] + [trail[w][t] for w in range(len(walkers))]
        lines.append("".join(f"{v:>{_COL}d}" for v in row))
    return "\n".join(header + lines) + "\n"


def parse_md_native(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines or lines[0] != "MDRUN TRAJECTORY 1":
        raise RuntimeFailure("trajectory output: bad banner")
    meta = {}
    body_at = None
    for i, line in enumerate(lines[1:], start=1):
        key = line[:9].strip()
        if key in ("THETA", "TIMESTEP", "WALKERS", "STEPS"):
            meta[key] = line[9:].split()[0]
        else:
            body_at = i
            break
    walkers = int(meta["WALKERS"])
    steps = int(meta["STEPS"])
    width = walkers + 1
    rows = []
    for line in lines[body_at + 1 :]:
        if not line.strip():
            continue
        cells = [line[i * _COL : (i + 1) * _COL] for i in range(width)]
        rows.append(tuple(float(c) for c in cells))
    if len(rows) != steps + 1:
        raise RuntimeFailure(f"trajectory output: expected {steps + 1} rows, got {len(rows)}")
    columns = ("t",) + tuple(f"w{w}" for w in range(walkers))
    return Dataset.build(
        [
            Observable.table("trajectory", columns, rows, ONE),
            Observable.scalar("timestep", float(meta["TIMESTEP"]), PS),
            Observable.scalar("theta", float(meta["THETA"]), ONE),
        ]
    )


def mock_md(config: Dataset, params) -> Dataset:
    return parse_md_native(md_native(config, params))


# ---------------------------------------------------------------------------
# trajectory analysis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """Unwrapped walker positions, one row per walker, T+1 samples each."""

    positions: tuple[tuple[int, ...], ...]
    timestep: float = 1.0  # picoseconds per step
    theta: float = 0.0

    def __post_init__(self):
        if len(self.positions) < 1:
            raise BadParams("trajectory needs at least one walker")
        lengths = {len(p) for p in self.positions}
        if len(lengths) != 1 or lengths == {1}:
            raise BadParams("every walker needs the same number of samples, at least 2")
        if not 0.0 <= self.theta <= 1.0:
            raise BadParams("theta must lie in [0, 1]")
        for track in self.positions:
            for a, b in zip(track, track[1:]):
                if abs(b - a) > 1:
                    raise BadParams("walkers may move at most one site per step")

    @property
    def walkers(self) -> int:
        return len(self.positions)

    @property
    def steps(self) -> int:
        return len(self.positions[0]) - 1

    @staticmethod
    def from_dataset(ds: Dataset) -> "Trajectory":
        table = ds.get("trajectory")
        ordered = sorted(table.values, key=lambda row: row[0])
        positions = tuple(
            tuple(int(row[w]) for row in ordered) for w in range(1, len(table.columns))
        )
        timestep = ds.get("timestep").magnitude if ds.has("timestep") else 1.0
        theta = ds.get("theta").magnitude if ds.has("theta") else 0.0
        return Trajectory(positions, timestep, theta)


def _msd_values(positions, cell_length: float) -> list[float]:
    tracks = np.asarray(positions, dtype=float) * cell_length
    deltas = tracks - tracks[:, :1]
    return list(np.mean(deltas * deltas, axis=0))


def msd(traj: Trajectory, cell_length: float = 1.0) -> Dataset:
    """Mean square displacement over walkers, in squared length units."""
    if traj.walkers < 2:
        raise BadParams("MSD needs at least 2 walkers to average over")
    values = _msd_values(traj.positions, cell_length)
    return Dataset.build(
        [
            Observable.series("msd", [(float(t), v) for t, v in enumerate(values)], ANGSTROM2),
            Observable.scalar("timestep", traj.timestep, PS),
            Observable.scalar("n_walkers", float(traj.walkers), ONE),
        ]
    )


def _fit_second_half(values: list[float]):
    """Least-squares slope over the series' second half plus a regime check.

    The check is the growth exponent of the window (slope of log MSD against
    log t): near 1 for diffusive transport, 2 for ballistic, below 1 once
    confinement saturates the walk. The residual is the exponent's distance
    from 1, so a linear fit far outside the diffusive regime gets flagged.
    """
    n = len(values)
    xs = np.arange(n // 2, n, dtype=float)
    ys = np.asarray(values[n // 2 :], dtype=float)
    slope, _ = np.polyfit(xs, ys, 1)
    if np.all(ys > 0.0):
        exponent = np.polyfit(np.log(xs), np.log(ys), 1)[0]
        residual = abs(float(exponent) - 1.0)
    else:
        residual = 0.0
    return float(slope), residual


_FIT_WARN_THRESHOLD = 0.5


def diffusivity(msd_ds: Dataset, dimensionality: int = 1) -> Dataset:
    """Einstein relation: D = slope(MSD) / (2 d), converted to area per time."""
    if dimensionality < 1:
        raise BadParams("dimensionality must be >= 1")
    series = msd_ds.get("msd")
    values = [v for _, v in series.values]
    if len(values) < 10:
        raise BadParams(f"need an MSD series of at least 10 points, got {len(values)}")
    timestep = msd_ds.get("timestep").magnitude if msd_ds.has("timestep") else _TIMESTEP_PS
    slope, residual = _fit_second_half(values)
    d_value = slope / (2.0 * dimensionality) / timestep
    return Dataset.build(
        [
            Observable.scalar("diffusivity", d_value, D_UNIT),
            Observable.scalar("fit_residual", residual, ONE),
            Observable.scalar(
                "fit_warning", 1.0 if residual > _FIT_WARN_THRESHOLD else 0.0, ONE
            ),
            Observable.scalar("einstein_dimensionality", float(dimensionality), ONE),
        ]
    )


def diffusivity_with_se(
    traj: Trajectory, cell_length: float = 1.0, groups: int = 10, dimensionality: int = 1
):
    """Overall D plus its standard error from walker-group resampling."""
    groups = min(groups, traj.walkers)
    if groups < 2:
        raise BadParams("need at least 2 walker groups for a standard error")
    overall, _ = _fit_second_half(_msd_values(traj.positions, cell_length))
    estimates = []
    for g in range(groups):
        member_tracks = traj.positions[g::groups]
        slope, _ = _fit_second_half(_msd_values(member_tracks, cell_length))
        estimates.append(slope / (2.0 * dimensionality) / traj.timestep)
    d_value = overall / (2.0 * dimensionality) / traj.timestep
    se = float(np.std(estimates, ddof=1) / math.sqrt(groups))
    return d_value, se


def analysis_native(inputs: Dataset, params) -> str:
    """MSD and diffusivity of a trajectory, written as key-value text."""
    traj = Trajectory.from_dataset(inputs)
    cell_length = inputs.get("cell_length").magnitude if inputs.has("cell_length") else 1.0
    groups = _int_param(params, "groups", "10")
    dim = _int_param(params, "einstein_dimensionality", "1")
    msd_ds = msd(traj, cell_length)
    fit = diffusivity(msd_ds, dim)
    _, se = diffusivity_with_se(traj, cell_length, groups, dim)
    msd_values = [v for _, v in msd_ds.get("msd").values]
    return _kv_text(
        "tsfit-kv",
        [
            ("diffusivity", format_number(fit.get("diffusivity").magnitude)),
            ("diffusivity_se", format_number(se)),
            ("fit_residual", format_number(fit.get("fit_residual").magnitude)),
            ("fit_warning", format_number(fit.get("fit_warning").magnitude)),
            ("msd", ",".join(format_number(v) for v in msd_values)),
        ],
    )


def parse_analysis_native(text: str) -> Dataset:
    entries = _kv_parse(text, "tsfit-kv")
    msd_values = [float(tok) for tok in entries["msd"].split(",")]
    return Dataset.build(
        [
            Observable.scalar("diffusivity", float(entries["diffusivity"]), D_UNIT),
            Observable.scalar("diffusivity_se", float(entries["diffusivity_se"]), D_UNIT),
            Observable.scalar("fit_residual", float(entries["fit_residual"]), ONE),
            Observable.scalar("fit_warning", float(entries["fit_warning"]), ONE),
            Observable.series(
                "msd", [(float(t), v) for t, v in enumerate(msd_values)], ANGSTROM2
            ),
        ]
    )


def mock_analysis(inputs: Dataset, params) -> Dataset:
    return parse_analysis_native(analysis_native(inputs, params))


# ---------------------------------------------------------------------------
# probe programs for plumbing tests: emit numeric params as observables
# ---------------------------------------------------------------------------


def _numeric_params(params) -> list[tuple[str, float]]:
    out = []
    for key in sorted(params):
        if key in RESERVED_PARAMS:
            continue
        try:
            out.append((key, float(params[key])))
        except ValueError:
            continue
    return out


def noop_native(params) -> str:
    entries = [(k, format_number(v)) for k, v in _numeric_params(params)]
    entries.append(("done", format_number(1.0)))
    return _kv_text("noop-kv", entries)


def parse_noop_native(text: str) -> Dataset:
    entries = _kv_parse(text, "noop-kv")
    obs = [
        Observable.scalar(k, float(v), ONE) for k, v in entries.items() if k != "format"
    ]
    return Dataset.build(obs)


def flip_native(params) -> str:
    """Converges on the Nth visit: emits converged=1 once the engine-supplied
    attempt counter reaches the converge_after parameter."""
    attempt = _int_param(params, "attempt", "1")
    target = _int_param(params, "converge_after", "3")
    entries = [(k, format_number(v)) for k, v in _numeric_params(params)]
    entries.append(("converged", format_number(1.0 if attempt >= target else 0.0)))
    return _kv_text("flip-kv", entries)


def parse_flip_native(text: str) -> Dataset:
    entries = _kv_parse(text, "flip-kv")
    obs = [
        Observable.scalar(k, float(v), ONE) for k, v in entries.items() if k != "format"
    ]
    return Dataset.build(obs)


# ---------------------------------------------------------------------------
# the program table the executor dispatches on
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimProgram:
    """A runnable mock: produce native text, then adapt it to a dataset."""

    name: str
    run: object  # (params: dict, inputs: dict[slot -> Dataset]) -> native str
    parse: object  # (native str) -> Dataset


PROGRAMS = {
    "latgen": SimProgram("latgen", lambda p, i: lattice_native(p), parse_lattice_native),
    "mcsim": SimProgram("mcsim", lambda p, i: cbmc_native(_merged(i), p), parse_cbmc_native),
    "gulpgc": SimProgram("gulpgc", lambda p, i: gcmc_native(_merged(i), p), parse_gcmc_native),
    "mdrun": SimProgram("mdrun", lambda p, i: md_native(_merged(i), p), parse_md_native),
    "tsfit": SimProgram("tsfit", lambda p, i: analysis_native(_merged(i), p), parse_analysis_native),
    "noop": SimProgram("noop", lambda p, i: noop_native(p), parse_noop_native),
    "flip": SimProgram("flip", lambda p, i: flip_native(p), parse_flip_native),
}


# ---------------------------------------------------------------------------
# simulated executor
# ---------------------------------------------------------------------------


@dataclass
class _SimJob:
    job_id: str
    req: JobRequest
    state: str = QUEUED
    submit_tick: int = 0
    start_tick: int | None = None
    occurrence: int = 1
    inject_fault: bool = False
    result: object = None
    reason: str | None = None


class SimulatedExecutor:
    """Deterministic virtual-clock job runner over a resource registry.

    Jobs queue per resource, run for that resource's fixed latency, and
    complete in seeded-shuffle order within a tick. A fault plan of
    (activity id, occurrence) pairs fails the matching submissions.
    """

    def __init__(self, registry: ResourceRegistry, store, programs=None,
                 seed: int = 0, fault_plan=(), latencies=None):
        self.registry = registry
        self.store = store
        self.programs = dict(PROGRAMS) if programs is None else dict(programs)
        self.seed = seed
        self.fault_plan = frozenset((a, int(n)) for a, n in fault_plan)
        self._latencies = dict(latencies or {})
        self._jobs: dict[str, _SimJob] = {}
        self._queue: dict[str, list[str]] = {}
        self._running: dict[str, list[str]] = {}
        self._submissions: dict[str, int] = {}
        self._completions: list[JobHandle] = []
        self._consumed = 0
        self._clock = 0
        self._counter = 0

    @property
    def clock(self) -> int:
        return self._clock

    def latency(self, resource_id: str) -> int:
        return self._latencies.get(resource_id, 1)

    def submit(self, req: JobRequest) -> JobHandle:
        self.registry.check_submittable(req.resource_id)
        self._counter += 1
        occurrence = self._submissions.get(req.activity_id, 0) + 1
        self._submissions[req.activity_id] = occurrence
        job = _SimJob(
            f"job-{self._counter:04d}",
            req,
            submit_tick=self._clock,
            occurrence=occurrence,
            inject_fault=(req.activity_id, occurrence) in self.fault_plan,
        )
        self._jobs[job.job_id] = job
        self._queue.setdefault(req.resource_id, []).append(job.job_id)
        self.registry.record_started(req.resource_id)
        return JobHandle(job.job_id, req.resource_id)

    def _job(self, handle: JobHandle) -> _SimJob:
        try:
            return self._jobs[handle.job_id]
        except KeyError:
            raise UnknownJob(f"unknown job: {handle.job_id}") from None

    def poll(self, handle: JobHandle) -> JobStatus:
        job = self._job(handle)
        return JobStatus(job.state, job.result, job.reason)

    def withdraw(self, handle: JobHandle) -> JobStatus:
        job = self._job(handle)
        if job.state not in TERMINAL_STATES:
            rid = job.req.resource_id
            if job.job_id in self._queue.get(rid, []):
                self._queue[rid].remove(job.job_id)
            if job.job_id in self._running.get(rid, []):
                self._running[rid].remove(job.job_id)
            job.state = WITHDRAWN
            self.registry.record_terminal(rid, WITHDRAWN, self._clock - job.submit_tick)
        return self.poll(handle)

    def usage(self, resource_id: str) -> UsageRecord:
        return self.registry.usage(resource_id)

    def live_jobs(self) -> bool:
        return any(j.state in (QUEUED, RUNNING) for j in self._jobs.values())

    def tick(self):
        """Advance one tick: dispatch what fits, then finish what is due."""
        for rid in sorted(self._queue):
            cap = self.registry.get(rid).calculator.max_concurrent
            running = self._running.setdefault(rid, [])
            queue = self._queue[rid]
            while queue and len(running) < cap:
                job = self._jobs[queue.pop(0)]
                job.state = RUNNING
                job.start_tick = self._clock
                running.append(job.job_id)
        self._clock += 1
        due = []
        for rid in sorted(self._running):
            for job_id in self._running[rid]:
                job = self._jobs[job_id]
                if job.start_tick + self.latency(rid) <= self._clock:
                    due.append(job_id)
        random.Random(f"{self.seed}:{self._clock}").shuffle(due)
        for job_id in due:
            job = self._jobs[job_id]
            self._running[job.req.resource_id].remove(job_id)
            self._finish(job)

    def _finish(self, job: _SimJob):
        rid = job.req.resource_id
        wall = float(self._clock - job.submit_tick)
        if job.inject_fault:
            job.state = FAILED
            job.reason = f"injected fault (occurrence {job.occurrence})"
        else:
            try:
                program = self.registry.get(rid).program
                sim = self.programs.get(program)
                if sim is None:
                    raise RuntimeFailure(f"no simulated behavior for program {program!r}")
                inputs = {slot: self.store.get_by_hash(h) for slot, h in job.req.inputs}
                job.result = sim.parse(sim.run(job.req.param_map(), inputs))
                job.state = SUCCEEDED
            except GridflowError as exc:
                job.state = FAILED
                job.reason = str(exc)
        self.registry.record_terminal(rid, job.state, wall)
        self._completions.append(JobHandle(job.job_id, rid))

    def wait_any(self) -> list[JobHandle]:
        """Advance the clock until at least one job reaches a terminal state;
        returns newly terminal handles in completion order, oldest first.
        Returns [] when nothing is queued or running."""
        while True:
            fresh = self._completions[self._consumed :]
            if fresh:
                self._consumed = len(self._completions)
                return list(fresh)
            if not self.live_jobs():
                return []
            self.tick()


# ---------------------------------------------------------------------------
# resource pool and the case-study workflow
# ---------------------------------------------------------------------------

_LATTICE_SPEC = [("sites", "angstrom"), ("cell_length", "angstrom"), ("n_sites", "dimensionless")]
_OCCUPANCY_SPEC = [("occupancy", "dimensionless"), ("n_sites", "dimensionless")]
_MD_CONFIG_SPEC = [
    ("occupancy", "dimensionless"),
    ("n_sites", "dimensionless"),
    ("theta", "dimensionless"),
]
_TRAJECTORY_SPEC = [
    ("trajectory", "dimensionless"),
    ("timestep", "ps"),
    ("theta", "dimensionless"),
]


def standard_descriptors() -> list[ResourceDescriptor]:
    """The simulated pool: one descriptor per mock program."""
    return [
        ResourceDescriptor(
            "latgen@struct-01",
            "latgen",
            Calculator("struct-01", "linux", 2),
            frozenset({"lattice", "structure"}),
            License("open"),
            LaunchTemplate(
                "latgen -n ${params.cells} -o ${workdir}/sites.dat", (), "sites"
            ),
            1.0,
            "2.3",
        ),
        ResourceDescriptor(
            "mcsim@mc-farm-01",
            "mcsim",
            Calculator("mc-farm-01", "linux", 4),
            frozenset({"mc", "adsorption"}),
            License("academic", "MCSIM configurational-bias Monte Carlo package, v2.1"),
            LaunchTemplate(
                "mcsim ${lattice} --theta ${params.theta} -o ${workdir}/occ.dat",
                (("lattice", ExtractionSpec.of(*_LATTICE_SPEC)),),
                "occ",
            ),
            1.0,
            "2.1",
        ),
        ResourceDescriptor(
            "gulpgc@mc-farm-02",
            "gulpgc",
            Calculator("mc-farm-02", "linux", 4),
            frozenset({"mc", "grand-canonical"}),
            License("academic", "GULPGC grand-canonical lattice sampler, v1.4"),
            LaunchTemplate(
                "gulpgc ${occupancy} -n ${params.n_helium} -o ${workdir}/walkers.dat",
                (("occupancy", ExtractionSpec.of(*_OCCUPANCY_SPEC)),),
                "walkers",
            ),
            1.0,
            "1.4",
        ),
        ResourceDescriptor(
            "mdrun@hpc-01",
            "mdrun",
            Calculator("hpc-01", "linux", 8),
            frozenset({"molecular-dynamics", "lattice-walk"}),
            License("academic", "MDRUN lattice kinetics engine, v3.0"),
            LaunchTemplate(
                "mdrun ${config} ${occupancy} --steps ${params.steps} -o ${workdir}/traj.dat",
                (
                    ("config", ExtractionSpec.of(("helium_positions", "dimensionless"))),
                    ("occupancy", ExtractionSpec.of(*_MD_CONFIG_SPEC)),
                ),
                "traj",
            ),
            2.0,
            "3.0",
        ),
        ResourceDescriptor(
            "tsfit@desk-01",
            "tsfit",
            Calculator("desk-01", "linux", 2),
            frozenset({"timeseries", "fitting"}),
            License("open"),
            LaunchTemplate(
                "tsfit ${trajectory} ${cell} -o ${workdir}/fit.dat",
                (
                    ("trajectory", ExtractionSpec.of(*_TRAJECTORY_SPEC)),
                    ("cell", ExtractionSpec.of(("cell_length", "angstrom"))),
                ),
                "fit",
            ),
            1.0,
            "0.9",
        ),
        ResourceDescriptor(
            "noop@sandbox-01",
            "noop",
            Calculator("sandbox-01", "linux", 4),
            frozenset({"sim", "probe"}),
            License("open"),
            LaunchTemplate("noop -o ${workdir}/out.dat", (), "out"),
            1.0,
        ),
        ResourceDescriptor(
            "flip@sandbox-01",
            "flip",
            Calculator("sandbox-01", "linux", 4),
            frozenset({"loop-probe"}),
            License("open"),
            LaunchTemplate("flip -o ${workdir}/out.dat", (), "out"),
            1.0,
        ),
    ]


def standard_registry() -> ResourceRegistry:
    registry = ResourceRegistry()
    for descriptor in standard_descriptors():
        registry.register(descriptor)
    return registry


def build_case_study(
    cells: int = 8,
    theta: float = 0.0,
    walkers: int = 4,
    steps: int = 16,
    cell_length: float = 1.0,
) -> WorkflowGraph:
    """The five-stage diffusion pipeline, one binding variant per lane kind:
    the structure stage pins program and host, the Monte Carlo stages pin the
    program only, and the walk and analysis stages match by capability."""
    nodes = [
        Node("start", START),
        Node(
            "lattice",
            ACTIVITY,
            binding=Binding(PINNED_BOTH, "latgen", "latgen@struct-01", frozenset({"lattice"})),
            params=(("cell_length", repr(cell_length)), ("cells", str(cells))),
            cite=("Structure collection of porous frameworks, 2024 release",),
        ),
        Node(
            "cbmc",
            ACTIVITY,
            binding=Binding(PINNED_PROGRAM, "mcsim", None, frozenset({"mc"})),
            params=(("theta", repr(theta)),),
        ),
        Node(
            "gcmc",
            ACTIVITY,
            binding=Binding(PINNED_PROGRAM, "gulpgc", None, frozenset({"mc"})),
            params=(("n_helium", str(walkers)),),
        ),
        Node(
            "md",
            ACTIVITY,
            binding=Binding(FREE, None, None, frozenset({"molecular-dynamics"})),
            params=(("steps", str(steps)),),
        ),
        Node(
            "analysis",
            ACTIVITY,
            binding=Binding(FREE, None, None, frozenset({"timeseries", "fitting"})),
            params=(
                ("einstein_dimensionality", "1"),
                ("fit_window", "second-half"),
                ("groups", "10"),
            ),
        ),
        Node("end", FINAL),
    ]
    edges = [
        ("start", "lattice"),
        ("lattice", "cbmc"),
        ("cbmc", "gcmc"),
        ("gcmc", "md"),
        ("md", "analysis"),
        ("analysis", "end"),
    ]
    flows = [
        ("lattice", "cbmc", ExtractionSpec.of(*_LATTICE_SPEC)),
        ("cbmc", "gcmc", ExtractionSpec.of(*_OCCUPANCY_SPEC)),
        ("cbmc", "md", ExtractionSpec.of(*_MD_CONFIG_SPEC)),
        ("gcmc", "md", ExtractionSpec.of(("helium_positions", "dimensionless"))),
        ("md", "analysis", ExtractionSpec.of(*_TRAJECTORY_SPEC)),
        ("lattice", "analysis", ExtractionSpec.of(("cell_length", "angstrom"))),
    ]
    return build_graph(
        "helium-diffusion-study",
        nodes,
        edges,
        flows,
        source_refs=("Helium diffusion in loaded zeolite frameworks: simulation protocol",),
    )
