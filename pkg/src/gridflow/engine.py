"""Planning and execution of workflows over a resource pool and a store.

plan() binds every activity to the cheapest admissible resource and applies
the license gate; execute() plays a token game over the graph, staging each
activity's declared input projections through the store, deriving a per-job
seed, and checkpointing every completed result. A failed activity aborts the
run but keeps its committed checkpoints, so resume() can replay them in the
original completion order and continue with live jobs from the frontier.

Whole runs are reproducible: the job seed is a digest of the run seed, the
activity, its firing number, and its staged input hashes, so a resumed or
rolled-back run re-derives exactly the seeds of an uninterrupted one.

Every run leaves a JSON manifest (workflow text, bindings, counters, trace)
under <store root>/runs/ next to, but outside, the append-only blob index.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .dsl import UnsoundWorkflow, emit_dsl, parse
from .errors import GridflowError, IterationLimit, RuntimeFailure, UserError
from .model import DECISION, FINAL, FORK, JOIN, WorkflowGraph, verify
from .quantities import Dataset, merge_with, project
from .resources import (
    SUCCEEDED,
    JobRequest,
    MissingInput,
    ResourceRegistry,
    render_launch,
)
from .storage import ACTIVE, COMPLETED, FAILED_RUN, ContentStore, UnknownRun

__all__ = [
    "ACADEMIC",
    "COMMERCIAL",
    "NoResource",
    "LicenseViolation",
    "ActivityFailed",
    "NothingToResume",
    "UserProfile",
    "ExecutionPlan",
    "ActivityEntry",
    "RunRecord",
    "ProvenanceRecord",
    "Engine",
]

ACADEMIC = "academic"
COMMERCIAL = "commercial"


class NoResource(UserError):
    """Discovery produced no admissible resource for an activity."""


class LicenseViolation(UserError):
    """Every admissible resource is licensed away from this user."""


class ActivityFailed(RuntimeFailure):
    """A job failed; committed checkpoints survive for a later resume."""

    def __init__(self, message: str, run_id: str | None = None):
        super().__init__(message)
        self.run_id = run_id


class NothingToResume(UserError):
    pass


@dataclass(frozen=True)
class UserProfile:
    user: str
    affiliation: str = ACADEMIC

    def __post_init__(self):
        if self.affiliation not in (ACADEMIC, COMMERCIAL):
            raise UserError(f"unknown affiliation: {self.affiliation!r}")


@dataclass(frozen=True)
class ExecutionPlan:
    """A verified workflow with every activity bound to one resource."""

    graph: WorkflowGraph
    bindings: tuple[tuple[str, str], ...]  # (activity id, resource id)
    params: tuple[tuple[str, str], ...]  # run-level overrides
    user: UserProfile
    max_iterations: int = 100
    seed: int = 0

    def binding_map(self) -> dict[str, str]:
        return dict(self.bindings)


@dataclass(frozen=True)
class ActivityEntry:
    """One executed (or replayed) activity firing."""

    activity: str
    firing: int
    resource: str
    job_id: str  # "(replayed)" when served from a checkpoint
    result_hash: str
    submitted_tick: int
    finished_tick: int
    replayed: bool = False


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    workflow_name: str
    status: str
    entries: tuple[ActivityEntry, ...]
    counters: tuple[tuple[str, int], ...]  # successful completions per activity
    trace: tuple[tuple[str, ...], ...]
    seed: int
    started_at: str
    finished_at: str
    failure: str | None = None

    def counter_map(self) -> dict[str, int]:
        return dict(self.counters)


@dataclass(frozen=True)
class ProvenanceRecord:
    """What a run depended on: inputs, code, resources, and credit owed.

    The ledger carries one entry per distinct citation demanded by a
    non-open license among the resources the run touched, plus one entry
    per workflow source reference. Open-licensed programs owe nothing.
    """

    workflow_name: str
    workflow_hash: str
    user: str
    affiliation: str
    seed: int
    max_iterations: int
    parameters: tuple[tuple[str, str], ...]  # ("activity.key", value)
    resources: tuple[tuple[str, str, str], ...]  # (activity, resource, program)
    ledger: tuple[tuple[str, str], ...]  # (citation, origin)


def _freeze(params) -> tuple[tuple[str, str], ...]:
    if hasattr(params, "items"):
        params = params.items()
    return tuple(sorted((str(k), str(v)) for k, v in params))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def workflow_hash(graph: WorkflowGraph) -> str:
    """Digest of the canonical workflow text, stable across formatting."""
    return hashlib.sha256(emit_dsl(graph).encode("utf-8")).hexdigest()


class Engine:
    """Single mediator between workflows, the resource pool, and the store."""

    def __init__(self, registry: ResourceRegistry, store: ContentStore, executor_factory=None):
        self.registry = registry
        self.store = store
        self._executor_factory = executor_factory or self._simulated_executor

    def _simulated_executor(self, seed, fault_plan):
        from .simgrid import SimulatedExecutor

        return SimulatedExecutor(
            self.registry, self.store, seed=seed, fault_plan=fault_plan
        )

    # -- planning ------------------------------------------------------------

    def plan(self, graph, user, params=(), max_iterations=100, seed=0) -> ExecutionPlan:
        report = verify(graph, max_iterations)
        if not report.sound:
            raise UnsoundWorkflow(report)
        bindings = []
        for node in sorted(graph.activities(), key=lambda n: n.id):
            hits = self.registry.discover(node.binding.requirement(node.id))
            if not hits:
                raise NoResource(f"no resource admits activity {node.id!r}")
            if user.affiliation == COMMERCIAL:
                open_hits = [
                    r for r in hits if self.registry.get(r).license.kind != ACADEMIC
                ]
                if not open_hits:
                    program = self.registry.get(hits[0]).program
                    raise LicenseViolation(
                        f"activity {node.id!r}: program {program!r} admits only "
                        f"academically licensed resources"
                    )
                hits = open_hits
            bindings.append((node.id, hits[0]))
        return ExecutionPlan(
            graph, tuple(bindings), _freeze(params), user, max_iterations, seed
        )

    # -- execution -----------------------------------------------------------

    def execute(self, plan: ExecutionPlan, run_id=None, fault_plan=()) -> RunRecord:
        run_id = run_id or self._next_run_id()
        executor = self._executor_factory(plan.seed, tuple(fault_plan))
        return _Execution(self, plan, run_id, executor, replay=()).drive()

    def resume(self, run_id: str, fault_plan=()) -> RunRecord:
        manifest = self._load_manifest(run_id)
        # the store sees rollbacks the manifest does not, so its status wins
        # for any run it knows about
        try:
            state = self.store.run_state(run_id)
            status, replay = state.status, state.checkpoints
        except UnknownRun:
            status, replay = manifest["status"], ()
        if status == COMPLETED:
            raise NothingToResume(f"run {run_id} already completed")
        plan = self._plan_from_manifest(manifest)
        executor = self._executor_factory(plan.seed, tuple(fault_plan))
        return _Execution(self, plan, run_id, executor, replay=replay).drive()

    def _plan_from_manifest(self, manifest) -> ExecutionPlan:
        graph = parse(manifest["workflow_text"])
        bindings = tuple((a, r) for a, r in manifest["bindings"])
        for _, resource in bindings:
            self.registry.get(resource)  # must still be registered
        return ExecutionPlan(
            graph,
            bindings,
            tuple((k, v) for k, v in manifest["params"]),
            UserProfile(**manifest["user"]),
            manifest["max_iterations"],
            manifest["seed"],
        )

    # -- inspection ----------------------------------------------------------

    def record(self, run_id: str) -> RunRecord:
        return _record_from_manifest(self._load_manifest(run_id))

    def provenance(self, run_id: str) -> ProvenanceRecord:
        manifest = self._load_manifest(run_id)
        graph = parse(manifest["workflow_text"])
        overrides = {k: v for k, v in manifest["params"]}
        parameters = []
        for node in graph.activities():
            for key, value in node.params:
                parameters.append((f"{node.id}.{key}", overrides.get(key, value)))
        resources = []
        credit: dict[str, str] = {}
        for activity, resource in manifest["bindings"]:
            if activity not in manifest["touched"]:
                continue
            d = self.registry.get(resource)
            resources.append((activity, resource, d.program_spec))
            if d.license.kind != "open" and d.license.citation not in credit:
                credit[d.license.citation] = d.program
        ledger = [(c, credit[c]) for c in sorted(credit)]
        ledger.extend((ref, "workflow-source") for ref in graph.source_refs)
        return ProvenanceRecord(
            manifest["workflow_name"],
            manifest["workflow_hash"],
            manifest["user"]["user"],
            manifest["user"]["affiliation"],
            manifest["seed"],
            manifest["max_iterations"],
            tuple(sorted(parameters)),
            tuple(sorted(resources)),
            tuple(ledger),
        )

    def checkpoint_hashes(self, run_id: str) -> list[str]:
        """Committed checkpoint hashes in commit order."""
        try:
            return [key.hash for _, key in self.store.checkpoints(run_id)]
        except UnknownRun:
            self._load_manifest(run_id)  # raise only if truly unknown
            return []

    def report(self, run_id: str, deterministic: bool = False) -> dict:
        manifest = self._load_manifest(run_id)
        prov = self.provenance(run_id)
        results = {}
        try:
            state = self.store.run_state(run_id)
        except UnknownRun:
            state = None
        if state is not None:
            for activity in sorted({a for a, _ in state.checkpoints}):
                key = state.latest(activity)
                ds = self.store.get(key)
                scalars = {
                    obs.name: obs.values[0]
                    for obs in ds.observables
                    if obs.kind == "scalar"
                }
                others = {
                    obs.name: f"{obs.kind}[{len(obs.values)}]"
                    for obs in ds.observables
                    if obs.kind != "scalar"
                }
                results[activity] = {"hash": key.hash, "scalars": scalars, "other": others}
        data = {
            "run": run_id,
            "workflow": manifest["workflow_name"],
            "workflow_hash": manifest["workflow_hash"],
            "status": manifest["status"],
            "seed": manifest["seed"],
            "user": manifest["user"],
            "max_iterations": manifest["max_iterations"],
            "parameters": manifest["params"],
            "bindings": {a: r for a, r in manifest["bindings"]},
            "counters": manifest["counters"],
            "checkpoints": self.checkpoint_hashes(run_id),
            "entries": manifest["entries"],
            "trace": manifest["trace"],
            "results": results,
            "provenance": {
                "parameters": [list(p) for p in prov.parameters],
                "resources": [list(r) for r in prov.resources],
                "ledger": [list(e) for e in prov.ledger],
            },
            "started_at": manifest["started_at"],
            "finished_at": manifest["finished_at"],
            "failure": manifest["failure"],
        }
        if deterministic:
            data["started_at"] = data["finished_at"] = "<redacted>"
            text = json.dumps(data).replace(run_id, "<run>")
            data = json.loads(text)
        return data

    # -- manifests -----------------------------------------------------------

    @property
    def _runs_dir(self) -> Path:
        return Path(self.store.root) / "runs"

    def _manifest_path(self, run_id: str) -> Path:
        return self._runs_dir / f"{run_id}.json"

    def _load_manifest(self, run_id: str) -> dict:
        path = self._manifest_path(run_id)
        if not path.exists():
            raise UnknownRun(f"unknown run: {run_id}")
        return json.loads(path.read_text(encoding="utf-8"))

    def _write_manifest(self, data: dict):
        path = self._manifest_path(data["run_id"])
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        tmp.rename(path)

    def _next_run_id(self) -> str:
        highest = 0
        names = [p.stem for p in self._runs_dir.glob("run-*.json")] if self._runs_dir.exists() else []
        names.extend(self.store.runs())
        for name in names:
            m = re.fullmatch(r"run-(\d+)", name)
            if m:
                highest = max(highest, int(m.group(1)))
        return f"run-{highest + 1:04d}"

    def runs(self) -> list[str]:
        if not self._runs_dir.exists():
            return []
        return sorted(p.stem for p in self._runs_dir.glob("*.json"))

    def _set_store_status(self, run_id: str, status: str):
        # the store learns about a run on its first checkpoint; before that
        # the manifest alone carries the status
        try:
            self.store.set_status(run_id, status)
        except UnknownRun:
            pass


def _record_from_manifest(manifest) -> RunRecord:
    return RunRecord(
        manifest["run_id"],
        manifest["workflow_name"],
        manifest["status"],
        tuple(ActivityEntry(*entry) for entry in manifest["entries"]),
        tuple((a, n) for a, n in manifest["counters"]),
        tuple(tuple(ev) for ev in manifest["trace"]),
        manifest["seed"],
        manifest["started_at"],
        manifest["finished_at"],
        manifest["failure"],
    )


class _Execution:
    """One run of the token game, fresh or resumed.

    Tokens live on edges. Control nodes fire deterministically (sorted by
    node id) until quiescent; enabled activities then launch as jobs, and a
    batch of completions is absorbed before the next round. On a resumed run
    the committed checkpoints are replayed first, in commit order, which
    reproduces the original blackboard merge order exactly.
    """

    def __init__(self, engine: Engine, plan: ExecutionPlan, run_id, executor, replay):
        self.engine = engine
        self.plan = plan
        self.g = plan.graph
        self.run_id = run_id
        self.executor = executor
        self.replay = list(replay)  # ordered (activity id, ResultKey)
        self.bindings = plan.binding_map()
        self.overrides = dict(plan.params)
        self.tokens: dict[tuple[str, str], int] = {}
        self.back_counts: dict[tuple[str, str], int] = {}
        self.firings: dict[str, int] = {}
        self.counters: dict[str, int] = {}
        self.latest: dict[str, object] = {}  # activity -> ResultKey
        self.blackboard = Dataset.build([])
        self.trace: list[tuple[str, ...]] = []
        self.entries: list[ActivityEntry] = []
        self.pending: dict = {}  # JobHandle -> (activity, firing, submit tick)
        self.touched: set[str] = set()
        self.final_reached = False
        self.failure: str | None = None
        self.started_at = _now()

    # -- top level -----------------------------------------------------------

    def drive(self) -> RunRecord:
        self._persist(ACTIVE)
        try:
            self._play()
        except GridflowError as exc:
            self.failure = str(exc)
            self._persist(FAILED_RUN)
            self.engine._set_store_status(self.run_id, FAILED_RUN)
            raise
        self._persist(COMPLETED)
        self.engine._set_store_status(self.run_id, COMPLETED)
        return _record_from_manifest(self.engine._load_manifest(self.run_id))

    def _play(self):
        for edge in self.g.out_edges(self.g.start().id):
            self._put_token(edge)
        while True:
            self._settle_controls()
            if self.replay:
                head, _ = self.replay[0]
                raise RuntimeFailure(
                    f"checkpoint for {head!r} does not fit the workflow state; "
                    f"was the workflow text changed?"
                )
            for node in sorted(self.g.activities(), key=lambda n: n.id):
                if self._has_token(node.id):
                    self._launch(node)
            if not self.pending:
                break
            self._absorb_batch()
        leftovers = sum(self.tokens.values())
        if not self.final_reached or leftovers:
            raise RuntimeFailure(
                f"run stalled: final={self.final_reached}, live tokens={leftovers}"
            )

    # -- token mechanics -----------------------------------------------------

    def _put_token(self, edge):
        self.tokens[edge] = self.tokens.get(edge, 0) + 1
        if self.g.is_back_edge(edge):
            count = self.back_counts.get(edge, 0) + 1
            self.back_counts[edge] = count
            if count > self.plan.max_iterations:
                raise IterationLimit(
                    f"cycle through {edge[0]} -> {edge[1]} exceeded "
                    f"{self.plan.max_iterations} iterations"
                )

    def _has_token(self, node_id) -> bool:
        return any(self.tokens.get(e, 0) for e in self.g.in_edges(node_id))

    def _consume_one(self, node_id):
        for edge in sorted(self.g.in_edges(node_id)):
            if self.tokens.get(edge, 0):
                self.tokens[edge] -= 1
                return
        raise RuntimeFailure(f"no token to consume at {node_id}")

    def _emit(self, node_id):
        for edge in self.g.out_edges(node_id):
            self._put_token(edge)

    def _settle_controls(self):
        """Fire replays and control nodes until nothing changes."""
        controls = sorted(
            (n for n in self.g.nodes if n.kind in (DECISION, FORK, JOIN, FINAL)),
            key=lambda n: n.id,
        )
        progressed = True
        while progressed:
            progressed = False
            if self.replay:
                activity, key = self.replay[0]
                if self.g.has_node(activity) and self._has_token(activity):
                    self.replay.pop(0)
                    self._replay_one(activity, key)
                    progressed = True
                    continue
            for node in controls:
                if node.kind == JOIN:
                    waits = [e for e in self.g.in_edges(node.id) if not self.g.is_back_edge(e)]
                    if waits and all(self.tokens.get(e, 0) for e in waits):
                        for edge in waits:
                            self.tokens[edge] -= 1
                        self._emit(node.id)
                        progressed = True
                elif self._has_token(node.id):
                    self._consume_one(node.id)
                    if node.kind == FORK:
                        self._emit(node.id)
                    elif node.kind == DECISION:
                        self._decide(node)
                    elif node.kind == FINAL:
                        self.final_reached = True
                    progressed = True

    def _decide(self, node):
        for guard, target in node.cases:
            if guard.evaluate(self.blackboard):
                self.trace.append(("decision", node.id, target, guard.text()))
                self._put_token((node.id, target))
                return
        self.trace.append(("decision", node.id, node.else_target, "else"))
        self._put_token((node.id, node.else_target))

    # -- activity firings ----------------------------------------------------

    def _replay_one(self, activity, key):
        self._consume_one(activity)
        firing = self.firings.get(activity, 0) + 1
        self.firings[activity] = firing
        ds = self.engine.store.get(key)
        self.latest[activity] = key
        self.counters[activity] = self.counters.get(activity, 0) + 1
        self.touched.add(activity)
        self.entries.append(
            ActivityEntry(activity, firing, self.bindings[activity], "(replayed)",
                          key.hash, 0, 0, True)
        )
        self.trace.append(("replayed", activity, key.hash))
        self._merge(activity, ds)
        self._emit(activity)

    def _launch(self, node):
        activity = node.id
        self._consume_one(activity)
        firing = self.firings.get(activity, 0) + 1
        self.firings[activity] = firing
        staged = self._stage_inputs(activity)
        resource = self.bindings[activity]
        descriptor = self.engine.registry.get(resource)
        job_inputs = self._match_slots(activity, descriptor.launch_template, staged)
        params = dict(node.params)
        for key in params:
            if key in self.overrides:
                params[key] = self.overrides[key]
        params["seed"] = str(self._job_seed(activity, firing, [h for _, h in job_inputs]))
        params["attempt"] = str(firing)
        req = JobRequest.build(resource, activity, self.run_id, job_inputs, params)
        launch = render_launch(
            descriptor.launch_template, req, f"work/{self.run_id}/{activity}/{firing}"
        )
        self.trace.append(("launch", activity, launch.command))
        handle = self.executor.submit(req)
        self.touched.add(activity)
        self.trace.append(("submitted", activity, handle.job_id, str(firing)))
        self.pending[handle] = (activity, firing, self.executor.clock)

    def _job_seed(self, activity, firing, input_hashes) -> int:
        basis = "|".join([str(self.plan.seed), activity, str(firing), *input_hashes])
        return int.from_bytes(hashlib.sha256(basis.encode("utf-8")).digest()[:8], "big")

    def _stage_inputs(self, activity):
        """File one projection per incoming object flow; skip producers that
        never ran (their branch was not taken)."""
        staged = []
        flows = sorted(
            (f for f in self.g.object_flows if f[1] == activity), key=lambda f: f[0]
        )
        for producer, _, spec in flows:
            key = self.latest.get(producer)
            if key is None:
                continue
            projection = project(self.engine.store.get(key), spec)
            pkey = self.engine.store.put(projection, self.run_id, f"{activity}.in")
            staged.append((producer, pkey.hash, set(projection.names)))
            self.trace.append(("staged", activity, producer, pkey.hash))
        return staged

    def _match_slots(self, activity, template, staged):
        """Pair template slots with staged projections by observable names."""
        inputs = []
        for slot, spec in template.input_slots:
            want = {name for name, _ in spec.wanted}
            hit = next((h for _, h, names in staged if want <= names), None)
            if hit is None:
                raise MissingInput(
                    f"activity {activity!r}: no staged input covers slot {slot!r} "
                    f"(wants {sorted(want)})"
                )
            inputs.append((slot, hit))
        return inputs

    def _absorb_batch(self):
        completions = self.executor.wait_any()
        if not completions:
            raise RuntimeFailure("executor went idle with jobs outstanding")
        for handle in completions:
            activity, firing, submitted = self.pending.pop(handle)
            status = self.executor.poll(handle)
            if status.state == SUCCEEDED:
                key = self.engine.store.put(status.result, self.run_id, activity)
                self.engine.store.checkpoint(self.run_id, activity, key)
                self.latest[activity] = key
                self.counters[activity] = self.counters.get(activity, 0) + 1
                self.entries.append(
                    ActivityEntry(activity, firing, self.bindings[activity],
                                  handle.job_id, key.hash, submitted, self.executor.clock)
                )
                self.trace.append(("completed", activity, handle.job_id, key.hash))
                self._merge(activity, status.result)
                self._emit(activity)
            else:
                reason = status.reason or "job failed"
                self.trace.append(("failed", activity, handle.job_id, reason))
                for other in list(self.pending):
                    self.executor.withdraw(other)
                    self.trace.append(("withdrawn", *self.pending.pop(other)[:1]))
                raise ActivityFailed(
                    f"activity {activity!r} failed: {reason}", self.run_id
                )

    def _merge(self, activity, ds):
        before = self.blackboard
        merged, clashes = merge_with([self.blackboard, ds])
        for name in clashes:
            if before.get(name) != ds.get(name):
                self.trace.append(("clash", activity, name))
        self.blackboard = merged

    # -- persistence ---------------------------------------------------------

    def _persist(self, status):
        self.engine._write_manifest(
            {
                "run_id": self.run_id,
                "workflow_name": self.g.name,
                "workflow_text": emit_dsl(self.g),
                "workflow_hash": workflow_hash(self.g),
                "seed": self.plan.seed,
                "user": {"user": self.plan.user.user, "affiliation": self.plan.user.affiliation},
                "params": [list(p) for p in self.plan.params],
                "max_iterations": self.plan.max_iterations,
                "bindings": sorted([a, r] for a, r in self.bindings.items()),
                "status": status,
                "counters": sorted([a, n] for a, n in self.counters.items()),
                "touched": sorted(self.touched),
                "entries": [
                    [e.activity, e.firing, e.resource, e.job_id, e.result_hash,
                     e.submitted_tick, e.finished_tick, e.replayed]
                    for e in self.entries
                ],
                "trace": [list(ev) for ev in self.trace],
                "started_at": self.started_at,
                "finished_at": _now() if status != ACTIVE else None,
                "failure": self.failure,
            }
        )
