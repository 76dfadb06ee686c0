"""Activity-diagram workflow IR and its logical-level verifier.

A workflow is a directed graph of Start/Final/Activity/Decision/Fork/Join
nodes. Loops are expressed as back-edges: edges whose target dominates their
source. Degree invariants apply to forward edges only; a back-edge re-enables
its target like an extra exclusive input (the target fires again on a token
from either side), which is what makes guarded iteration representable
without a dedicated merge kind.

Token semantics during verification and execution:

  Start     emits one token on its out-edge when the run begins
  Activity  fires on a token on any one in-edge, emits on every out-edge
  Decision  fires on any one in-edge, emits on exactly one chosen out-edge
  Fork      fires on its in-edge, emits on every out-edge
  Join      fires only when every forward in-edge holds a token, consumes
            one from each, emits one on its single out-edge
  Final     consumes any token that reaches it

`verify` plays this token game exhaustively over all static decision-outcome
assignments (small graphs) and combines it with structural rules; the verdict
`sound` means zero findings.
"""

from __future__ import annotations

import itertools
import operator
from dataclasses import dataclass, field

import networkx as nx

from .errors import UserError
from .quantities import (
    DimensionMismatch,
    ExtractionSpec,
    MissingObservable,
    Observable,
    Unit,
    convert,
)
from .resources import BindingRequirement

__all__ = [
    "START",
    "FINAL",
    "ACTIVITY",
    "DECISION",
    "FORK",
    "JOIN",
    "PINNED_BOTH",
    "PINNED_PROGRAM",
    "FREE",
    "Guard",
    "Binding",
    "Node",
    "WorkflowGraph",
    "Finding",
    "VerificationReport",
    "StructuralError",
    "GuardEvaluationError",
    "build_graph",
    "verify",
    "binding_requirements",
    "topological_activities",
]

START = "start"
FINAL = "final"
ACTIVITY = "activity"
DECISION = "decision"
FORK = "fork"
JOIN = "join"

KINDS = (START, FINAL, ACTIVITY, DECISION, FORK, JOIN)

PINNED_BOTH = "pinned-both"
PINNED_PROGRAM = "pinned-program"
FREE = "free"

# forward-degree invariants: (min_in, max_in, min_out, max_out), None = unbounded
_DEGREE_RULES = {
    START: (0, 0, 1, 1),
    FINAL: (1, None, 0, 0),
    ACTIVITY: (1, 1, 1, 1),
    DECISION: (1, 1, 2, None),
    FORK: (1, 1, 2, None),
    JOIN: (2, None, 1, 1),
}

_GUARD_OPS = {
    "<": operator.lt,
    "<=": operator.le,
    "==": operator.eq,
    "!=": operator.ne,
    ">=": operator.ge,
    ">": operator.gt,
}

# decision-count ceiling for the exhaustive token game; beyond it only the
# structural rules run and the report says so
EXHAUSTIVE_DECISION_LIMIT = 12

STRUCTURAL_ONLY = "structural-only"
EXHAUSTIVE = "exhaustive"

UNREACHABLE = "Unreachable"
NO_TERMINATION = "NoTermination"
JOIN_DEADLOCK = "JoinDeadlock"
UNBALANCED_FORK_JOIN = "UnbalancedForkJoin"
UNBOUND_OBJECT_FLOW = "UnboundObjectFlow"
UNGUARDED_CYCLE = "UnguardedCycle"


class StructuralError(UserError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class GuardEvaluationError(UserError):
    pass


@dataclass(frozen=True)
class Guard:
    """Comparison of one dataset observable against a unit-tagged literal."""

    observable: str
    op: str
    value: float
    unit: Unit

    def __post_init__(self):
        if self.op not in _GUARD_OPS:
            raise StructuralError([f"unknown guard operator: {self.op!r}"])

    def evaluate(self, ds) -> bool:
        try:
            obs = ds.get(self.observable)
            if obs.kind != "scalar":
                raise GuardEvaluationError(
                    f"guard observable {self.observable} is {obs.kind}, need scalar"
                )
            magnitude = convert(obs, self.unit).magnitude
        except MissingObservable as exc:
            raise GuardEvaluationError(f"guard: {exc}") from None
        except DimensionMismatch as exc:
            raise GuardEvaluationError(f"guard: {exc}") from None
        return _GUARD_OPS[self.op](magnitude, self.value)

    def text(self) -> str:
        return f"{self.observable} {self.op} {self.value:g} {self.unit.name}"


@dataclass(frozen=True)
class Binding:
    """How an activity gets matched to a resource: the three lane variants."""

    variant: str
    program: str | None = None
    actuator: str | None = None
    capabilities: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.variant == PINNED_BOTH:
            if not (self.program and self.actuator):
                raise StructuralError(["pinned-both binding needs program and actuator"])
        elif self.variant == PINNED_PROGRAM:
            if not self.program or self.actuator:
                raise StructuralError(["pinned-program binding needs program only"])
        elif self.variant == FREE:
            if self.program or self.actuator:
                raise StructuralError(["free binding must not pin program or actuator"])
            if not self.capabilities:
                raise StructuralError(["free binding needs at least one capability tag"])
        else:
            raise StructuralError([f"unknown binding variant: {self.variant!r}"])

    def requirement(self, activity_id: str) -> BindingRequirement:
        return BindingRequirement(activity_id, self.program, self.actuator, self.capabilities)


@dataclass(frozen=True)
class Node:
    """One workflow node; `cases`/`else_target` route decisions, `binding`,
    `params` and `cite` belong to activities."""

    id: str
    kind: str
    binding: Binding | None = None
    params: tuple[tuple[str, str], ...] = ()
    cases: tuple[tuple[Guard, str], ...] = ()
    else_target: str | None = None
    cite: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StructuralError([f"{self.id}: unknown node kind {self.kind!r}"])

    def param_map(self) -> dict[str, str]:
        return dict(self.params)


@dataclass(frozen=True)
class WorkflowGraph:
    name: str
    nodes: tuple[Node, ...]
    edges: tuple[tuple[str, str], ...]
    object_flows: tuple[tuple[str, str, ExtractionSpec], ...] = ()
    source_refs: tuple[str, ...] = ()
    back_edges: frozenset[tuple[str, str]] = frozenset()

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def has_node(self, node_id: str) -> bool:
        return any(n.id == node_id for n in self.nodes)

    def start(self) -> Node:
        return next(n for n in self.nodes if n.kind == START)

    def finals(self) -> tuple[Node, ...]:
        return tuple(n for n in self.nodes if n.kind == FINAL)

    def activities(self) -> tuple[Node, ...]:
        return tuple(n for n in self.nodes if n.kind == ACTIVITY)

    def out_edges(self, node_id: str) -> tuple[tuple[str, str], ...]:
        return tuple(e for e in self.edges if e[0] == node_id)

    def in_edges(self, node_id: str) -> tuple[tuple[str, str], ...]:
        return tuple(e for e in self.edges if e[1] == node_id)

    def forward_edges(self) -> tuple[tuple[str, str], ...]:
        return tuple(e for e in self.edges if e not in self.back_edges)

    def is_back_edge(self, edge: tuple[str, str]) -> bool:
        return edge in self.back_edges

    def same_structure(self, other: "WorkflowGraph") -> bool:
        """Equality up to declaration order of nodes, edges and flows."""
        return (
            self.name == other.name
            and set(self.nodes) == set(other.nodes)
            and set(self.edges) == set(other.edges)
            and set(self.object_flows) == set(other.object_flows)
            and self.source_refs == other.source_refs
        )


def _dominates(idom: dict, v: str, u: str) -> bool:
    """True when v lies on u's dominator chain (v == u counts)."""
    node = u
    while True:
        if node == v:
            return True
        parent = idom.get(node)
        if parent is None or parent == node:
            return False
        node = parent


def _classify_back_edges(nodes, edges) -> frozenset[tuple[str, str]]:
    starts = [n.id for n in nodes if n.kind == START]
    if len(starts) != 1:
        return frozenset()
    g = nx.DiGraph()
    g.add_nodes_from(n.id for n in nodes)
    g.add_edges_from(edges)
    idom = nx.immediate_dominators(g, starts[0])
    return frozenset((u, v) for u, v in edges if v in idom and u in idom and _dominates(idom, v, u))


def build_graph(name, nodes, edges, object_flows=(), source_refs=()) -> WorkflowGraph:
    """Check every structural invariant; collect all violations, not just one."""
    nodes = tuple(nodes)
    edges = tuple(tuple(e) for e in edges)
    flows = tuple((p, c, spec) for p, c, spec in object_flows)
    violations: list[str] = []

    ids = [n.id for n in nodes]
    by_id = {n.id: n for n in nodes}
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        violations.append(f"DuplicateNode: {', '.join(dupes)}")

    if len(set(edges)) != len(edges):
        violations.append("DuplicateEdge: repeated control edge")
    for u, v in edges:
        if u not in by_id or v not in by_id:
            violations.append(f"DanglingEdge: {u} -> {v}")

    starts = [n for n in nodes if n.kind == START]
    if len(starts) > 1:
        violations.append(f"TwoStarts: {', '.join(sorted(n.id for n in starts))}")
    elif not starts:
        violations.append("NoStart: workflow needs a start node")
    if not any(n.kind == FINAL for n in nodes):
        violations.append("NoFinal: workflow needs at least one final node")

    if violations:
        raise StructuralError(violations)

    back = _classify_back_edges(nodes, edges)
    forward = [e for e in edges if e not in back]

    # in-degree rules see forward edges only (a back-edge is an extra
    # exclusive input); out-degree rules see every edge, because a node's
    # emission arity is its real branch count: a loop decision's back-edge
    # is one of its >= 2 branches
    fwd_in = {n.id: 0 for n in nodes}
    out_all = {n.id: 0 for n in nodes}
    for u, v in edges:
        out_all[u] += 1
        if (u, v) not in back:
            fwd_in[v] += 1

    for n in nodes:
        min_in, max_in, min_out, max_out = _DEGREE_RULES[n.kind]
        if fwd_in[n.id] < min_in or (max_in is not None and fwd_in[n.id] > max_in):
            violations.append(f"BadDegree: {n.id} ({n.kind}) has {fwd_in[n.id]} incoming")
        if out_all[n.id] < min_out or (max_out is not None and out_all[n.id] > max_out):
            violations.append(f"BadDegree: {n.id} ({n.kind}) has {out_all[n.id]} outgoing")

    for u, v in back:
        if by_id[v].kind in (START, FINAL, JOIN):
            violations.append(f"BadBackEdge: {u} -> {v} targets a {by_id[v].kind} node")

    for n in nodes:
        if n.kind == ACTIVITY and n.binding is None:
            violations.append(f"MissingBinding: activity {n.id}")
        if n.kind == DECISION:
            targets = [t for _, t in n.cases]
            if n.else_target is not None:
                targets.append(n.else_target)
            out_targets = sorted(v for u, v in edges if u == n.id)
            if n.else_target is None:
                violations.append(f"DecisionRouting: {n.id} has no else branch")
            elif sorted(targets) != out_targets or len(targets) != len(set(targets)):
                violations.append(f"DecisionRouting: {n.id} cases do not match its edges")

    for p, c, _spec in flows:
        for end in (p, c):
            if end not in by_id or by_id[end].kind != ACTIVITY:
                violations.append(f"ObjectFlowEndpoint: {p} -> {c} must link activities")

    # a reachable cycle with no dominating entry cannot be classified as a
    # loop; the forward edges of the reachable region must form a DAG for
    # topological passes to work (unreachable islands are verify findings,
    # not build errors, so they are exempt)
    full = nx.DiGraph()
    full.add_nodes_from(by_id)
    full.add_edges_from(edges)
    start_id = starts[0].id
    reachable = set(nx.descendants(full, start_id)) | {start_id}
    fwd_graph = nx.DiGraph()
    fwd_graph.add_nodes_from(reachable)
    fwd_graph.add_edges_from((u, v) for u, v in forward if u in reachable and v in reachable)
    if not nx.is_directed_acyclic_graph(fwd_graph):
        cycle = nx.find_cycle(fwd_graph)
        members = "->".join(u for u, _ in cycle)
        violations.append(f"IrreducibleCycle: {members} has no single entry point")

    if violations:
        raise StructuralError(sorted(violations))
    return WorkflowGraph(name, nodes, edges, flows, tuple(source_refs), back)


@dataclass(frozen=True)
class Finding:
    kind: str
    subject: str
    detail: str = ""

    def text(self) -> str:
        return f"{self.kind}({self.subject})" + (f": {self.detail}" if self.detail else "")


@dataclass(frozen=True)
class VerificationReport:
    workflow: str
    mode: str
    findings: tuple[Finding, ...]

    @property
    def sound(self) -> bool:
        return not self.findings

    def kinds(self) -> set[str]:
        return {f.kind for f in self.findings}


def _structural_findings(g: WorkflowGraph) -> list[Finding]:
    digraph = nx.DiGraph()
    digraph.add_nodes_from(n.id for n in g.nodes)
    digraph.add_edges_from(g.edges)
    start = g.start().id
    reachable = set(nx.descendants(digraph, start)) | {start}
    findings = []

    for n in g.nodes:
        if n.id not in reachable:
            findings.append(Finding(UNREACHABLE, n.id, "no path from start"))

    final_ids = {n.id for n in g.finals()}
    reaches_final = set(final_ids)
    for f in final_ids:
        reaches_final |= set(nx.ancestors(digraph, f))
    for n in g.nodes:
        if n.id in reachable and n.id not in reaches_final:
            findings.append(Finding(NO_TERMINATION, n.id, "no path to any final"))

    # a cycle with no decision on it survives deleting all decision nodes
    reduced = digraph.copy()
    reduced.remove_nodes_from(n.id for n in g.nodes if n.kind == DECISION)
    try:
        cycle = nx.find_cycle(reduced)
        members = "->".join(u for u, _ in cycle)
        findings.append(Finding(UNGUARDED_CYCLE, members, "cycle contains no decision"))
    except nx.NetworkXNoCycle:
        pass

    for p, c, _spec in g.object_flows:
        if p == c or not nx.has_path(digraph, p, c):
            findings.append(
                Finding(UNBOUND_OBJECT_FLOW, f"{p}->{c}", "no control path producer to consumer")
            )
    return findings


class _TokenGame:
    """Exhaustive marking exploration under one static decision assignment."""

    def __init__(self, g: WorkflowGraph, max_iterations: int):
        self.g = g
        self.max_iterations = max_iterations
        self.edges = list(g.edges)
        self.edge_index = {e: i for i, e in enumerate(self.edges)}
        self.back_list = sorted(g.back_edges)
        self.back_pos = {e: i for i, e in enumerate(self.back_list)}
        self.by_id = {n.id: n for n in g.nodes}
        self.joins = [n.id for n in g.nodes if n.kind == JOIN]
        self.fwd_in = {
            n.id: [self.edge_index[e] for e in g.in_edges(n.id) if not g.is_back_edge(e)]
            for n in g.nodes
        }
        self.all_in = {n.id: [self.edge_index[e] for e in g.in_edges(n.id)] for n in g.nodes}
        self.out = {n.id: [self.edge_index[e] for e in g.out_edges(n.id)] for n in g.nodes}

    def assignments(self):
        decisions = sorted(n.id for n in self.g.nodes if n.kind == DECISION)
        choice_lists = [[self.edge_index[e] for e in sorted(self.g.out_edges(d))] for d in decisions]
        for combo in itertools.product(*choice_lists):
            yield dict(zip(decisions, combo))

    def _enabled_moves(self, marking, assignment):
        """Yield (node id, consumed edge indices) for every firable node."""
        for node_id, node in self.by_id.items():
            if node.kind == START:
                continue
            if node.kind == JOIN:
                inputs = self.fwd_in[node_id]
                if inputs and all(marking[i] > 0 for i in inputs):
                    yield node_id, tuple(inputs)
            else:
                for i in self.all_in[node_id]:
                    if marking[i] > 0:
                        yield node_id, (i,)

    def _fire(self, marking, node_id, consumed, assignment):
        node = self.by_id[node_id]
        next_marking = list(marking)
        for i in consumed:
            next_marking[i] -= 1
        if node.kind == FINAL:
            emitted = []
        elif node.kind == DECISION:
            emitted = [assignment[node_id]]
        else:
            emitted = self.out[node_id]
        for i in emitted:
            next_marking[i] += 1
        back_fired = [i for i in emitted if self.edges[i] in self.g.back_edges]
        return tuple(next_marking), back_fired

    def explore(self, assignment):
        """All reachable states; reports per-assignment findings and fired nodes."""
        start_edge = self.edge_index[self.g.out_edges(self.g.start().id)[0]]
        initial = tuple(1 if i == start_edge else 0 for i in range(len(self.edges)))
        zero_counts = tuple(0 for _ in self.back_list)
        stack = [(initial, zero_counts)]
        seen = {(initial, zero_counts)}
        findings: set[Finding] = set()
        fired: set[str] = set()

        while stack:
            marking, counts = stack.pop()
            moves = list(self._enabled_moves(marking, assignment))
            if not moves:
                for join in self.joins:
                    if any(marking[i] > 0 for i in self.all_in[join]):
                        findings.add(
                            Finding(JOIN_DEADLOCK, join, "waits on an input that never arrives")
                        )
                continue
            for node_id, consumed in moves:
                next_marking, back_fired = self._fire(marking, node_id, consumed, assignment)
                next_counts = list(counts)
                over_budget = False
                for i in back_fired:
                    pos = self.back_pos[self.edges[i]]
                    next_counts[pos] += 1
                    if next_counts[pos] > self.max_iterations:
                        over_budget = True
                if over_budget:
                    continue
                flooded = [i for i, c in enumerate(next_marking) if c > 1]
                if flooded:
                    u, v = self.edges[flooded[0]]
                    findings.add(
                        Finding(
                            UNBALANCED_FORK_JOIN,
                            v,
                            f"edge {u}->{v} accumulates more than one token",
                        )
                    )
                    continue
                fired.add(node_id)
                state = (next_marking, tuple(next_counts))
                if state not in seen:
                    seen.add(state)
                    stack.append(state)
        return findings, fired


def verify(g: WorkflowGraph, max_iterations: int = 100) -> VerificationReport:
    """Pure check: structural rules always, token game when small enough."""
    findings = set(_structural_findings(g))
    decisions = sum(1 for n in g.nodes if n.kind == DECISION)
    if decisions <= EXHAUSTIVE_DECISION_LIMIT:
        mode = EXHAUSTIVE
        game = _TokenGame(g, max_iterations)
        for assignment in game.assignments():
            assignment_findings, _fired = game.explore(assignment)
            findings |= assignment_findings
    else:
        mode = STRUCTURAL_ONLY
    ordered = tuple(sorted(findings, key=lambda f: (f.kind, f.subject, f.detail)))
    return VerificationReport(g.name, mode, ordered)


def topological_activities(g: WorkflowGraph) -> tuple[str, ...]:
    """Activity ids in forward-edge topological order, ties by id.

    Unreachable activities (possible only in graphs verify will flag) come
    last, sorted by id, so the result is still total and deterministic.
    """
    full = nx.DiGraph()
    full.add_nodes_from(n.id for n in g.nodes)
    full.add_edges_from(g.edges)
    start = g.start().id
    reachable = set(nx.descendants(full, start)) | {start}
    digraph = nx.DiGraph()
    digraph.add_nodes_from(reachable)
    digraph.add_edges_from(e for e in g.forward_edges() if e[0] in reachable and e[1] in reachable)
    order = [i for i in nx.lexicographical_topological_sort(digraph) if g.node(i).kind == ACTIVITY]
    order.extend(sorted(n.id for n in g.activities() if n.id not in reachable))
    return tuple(order)


def binding_requirements(g: WorkflowGraph) -> list[tuple[str, BindingRequirement]]:
    out = []
    for activity_id in topological_activities(g):
        node = g.node(activity_id)
        out.append((activity_id, node.binding.requirement(activity_id)))
    return out
