"""Textual workflow language and the translators out of it.

One surface, four targets: `parse` turns workflow text into the graph IR,
`emit_dsl` prints a graph back to canonical text, `to_job_xml` produces the
job-sequence XML document, `to_functional_plan` produces the combinator plan
(map/reduce style), and `to_dot` renders a diagram.

The grammar is statement-oriented, `;`-separated, with `//` comments:

    workflow "name" {
      cite "methodology reference";
      start -> stage1;
      activity stage1 {
        program: "gulp";
        actuator: "gulp@cluster1";          // optional, pins the host
        capabilities: [mc-gcmc];
        params: [pressure = "1.0"];
        inputs: [other.sites "angstrom"];   // producer.observable "unit"
        outputs: [occupancy];
        cite: ["program reference"];
      }
      fork f after stage1 into (a, b);
      join j waits (a, b) -> stage2;
      decision d after stage2 { when converged != 1 "dimensionless" -> stage2; else -> end; }
      stage1 -> end;
    }

Each `start ->` statement introduces its own start node, so a file with two
of them builds a graph the structural checks will reject; that is deliberate.
"""

from __future__ import annotations

import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass

import networkx as nx

from .errors import IterationLimit, UserError
from .model import (
    ACTIVITY,
    DECISION,
    FINAL,
    FORK,
    FREE,
    JOIN,
    PINNED_BOTH,
    PINNED_PROGRAM,
    START,
    Binding,
    Guard,
    Node,
    WorkflowGraph,
    build_graph,
    topological_activities,
    verify,
)
from .quantities import ExtractionSpec, UnknownUnit, get_unit

__all__ = [
    "parse",
    "emit_dsl",
    "to_job_xml",
    "to_functional_plan",
    "to_dot",
    "validate_job_xml",
    "interpret_plan",
    "Run",
    "Seq",
    "ParMap",
    "Choice",
    "Loop",
    "DslSyntaxError",
    "SemanticError",
    "UnsoundWorkflow",
    "NotSeriesParallel",
    "IterationLimit",
]


class DslSyntaxError(UserError):
    def __init__(self, line: int, col: int, expected: str, found: str):
        super().__init__(f"line {line}, column {col}: expected {expected}, found {found}")
        self.line = line
        self.col = col
        self.expected = expected
        self.found = found


class SemanticError(UserError):
    pass


class UnsoundWorkflow(UserError):
    def __init__(self, report):
        findings = ", ".join(f.text() for f in report.findings)
        super().__init__(f"workflow {report.workflow!r} is not sound: {findings}")
        self.report = report


class NotSeriesParallel(UserError):
    pass


# ---------------------------------------------------------------------------
# lexer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>//[^\n]*)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<number>-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<id>[A-Za-z_][A-Za-z0-9_]*(?:-[A-Za-z0-9_]+)*)
  | (?P<op>->|<=|>=|==|!=|[{}()\[\],;:=.<>])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    value: str
    line: int
    col: int


def _lex(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    line = 1
    line_start = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            col = pos - line_start + 1
            raise DslSyntaxError(line, col, "a token", repr(text[pos]))
        kind = m.lastgroup
        value = m.group()
        if kind not in ("ws", "comment"):
            tokens.append(_Token(kind, value, line, pos - line_start + 1))
        newlines = value.count("\n")
        if newlines:
            line += newlines
            line_start = m.start() + value.rindex("\n") + 1
        pos = m.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


def _unquote(raw: str) -> str:
    body = raw[1:-1]
    return body.replace('\\"', '"').replace("\\\\", "\\")


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.tokens = _lex(text)
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def fail(self, expected: str):
        tok = self.peek()
        found = tok.value if tok.kind != "eof" else "end of input"
        raise DslSyntaxError(tok.line, tok.col, expected, repr(found))

    def expect(self, value: str) -> _Token:
        tok = self.peek()
        if tok.value != value or tok.kind == "string":
            self.fail(repr(value))
        return self.advance()

    def expect_kind(self, kind: str, what: str) -> _Token:
        tok = self.peek()
        if tok.kind != kind:
            self.fail(what)
        return self.advance()

    def at(self, value: str) -> bool:
        tok = self.peek()
        return tok.value == value and tok.kind != "string"

    def ident(self) -> str:
        return self.expect_kind("id", "an identifier").value

    def string(self) -> str:
        return _unquote(self.expect_kind("string", "a quoted string").value)

    def number(self) -> float:
        return float(self.expect_kind("number", "a number").value)


class _ActivityDecl:
    def __init__(self):
        self.program = None
        self.actuator = None
        self.capabilities = []
        self.params = []
        self.inputs = []  # (producer, observable, unit name)
        self.outputs = None
        self.cite = []


def parse(text: str) -> WorkflowGraph:
    """Parse workflow text and run every structural check on the result."""
    p = _Parser(text)
    p.expect("workflow")
    name = p.string()
    p.expect("{")

    start_edges: list[str] = []
    plain_edges: list[tuple[str, str]] = []
    activities: dict[str, _ActivityDecl] = {}
    forks: dict[str, tuple[str, list[str]]] = {}
    joins: dict[str, tuple[list[str], str]] = {}
    decisions: dict[str, tuple[str, list[tuple[Guard, str]], str]] = {}
    source_refs: list[str] = []
    declared_order: list[str] = []

    while not p.at("}"):
        tok = p.peek()
        if tok.kind == "eof":
            p.fail("'}'")
        if p.at("start"):
            p.advance()
            p.expect("->")
            start_edges.append(p.ident())
            p.expect(";")
        elif p.at("cite"):
            p.advance()
            source_refs.append(p.string())
            p.expect(";")
        elif p.at("activity"):
            p.advance()
            aid = p.ident()
            _check_fresh(p, aid, activities, forks, joins, decisions)
            activities[aid] = _parse_activity_body(p)
            declared_order.append(aid)
        elif p.at("fork"):
            p.advance()
            fid = p.ident()
            _check_fresh(p, fid, activities, forks, joins, decisions)
            p.expect("after")
            source = p.ident()
            p.expect("into")
            p.expect("(")
            targets = [p.ident()]
            while p.at(","):
                p.advance()
                targets.append(p.ident())
            p.expect(")")
            p.expect(";")
            forks[fid] = (source, targets)
            declared_order.append(fid)
        elif p.at("join"):
            p.advance()
            jid = p.ident()
            _check_fresh(p, jid, activities, forks, joins, decisions)
            p.expect("waits")
            p.expect("(")
            waits = [p.ident()]
            while p.at(","):
                p.advance()
                waits.append(p.ident())
            p.expect(")")
            p.expect("->")
            target = _edge_target(p)
            p.expect(";")
            joins[jid] = (waits, target)
            declared_order.append(jid)
        elif p.at("decision"):
            p.advance()
            did = p.ident()
            _check_fresh(p, did, activities, forks, joins, decisions)
            p.expect("after")
            source = p.ident()
            p.expect("{")
            cases = []
            while p.at("when"):
                p.advance()
                guard = _parse_guard(p)
                p.expect("->")
                cases.append((guard, _edge_target(p)))
                p.expect(";")
            if not cases:
                p.fail("'when'")
            p.expect("else")
            p.expect("->")
            else_target = _edge_target(p)
            p.expect(";")
            p.expect("}")
            decisions[did] = (source, cases, else_target)
            declared_order.append(did)
        elif tok.kind == "id":
            src = p.ident()
            p.expect("->")
            plain_edges.append((src, _edge_target(p)))
            p.expect(";")
        else:
            p.fail("a statement")
    p.expect("}")
    p.expect_kind("eof", "end of input")

    return _assemble(
        name,
        start_edges,
        plain_edges,
        activities,
        forks,
        joins,
        decisions,
        source_refs,
        declared_order,
    )


def _edge_target(p: _Parser) -> str:
    if p.at("end"):
        p.advance()
        return "end"
    return p.ident()


def _check_fresh(p: _Parser, node_id, *tables):
    if any(node_id in t for t in tables):
        tok = p.tokens[p.pos - 1]
        raise SemanticError(f"line {tok.line}: node {node_id!r} declared twice")


def _parse_guard(p: _Parser) -> Guard:
    observable = p.ident()
    op_tok = p.peek()
    if op_tok.value not in ("<", "<=", "==", "!=", ">=", ">") or op_tok.kind == "string":
        p.fail("a comparison operator")
    p.advance()
    value = p.number()
    unit_name = "dimensionless"
    if p.peek().kind == "string":
        unit_name = p.string()
    try:
        unit = get_unit(unit_name)
    except UnknownUnit as exc:
        raise SemanticError(f"line {op_tok.line}: {exc}") from None
    return Guard(observable, op_tok.value, value, unit)


def _parse_activity_body(p: _Parser) -> _ActivityDecl:
    decl = _ActivityDecl()
    p.expect("{")
    while not p.at("}"):
        key_tok = p.peek()
        if key_tok.kind != "id":
            p.fail("an activity property")
        key = p.ident()
        p.expect(":")
        if key == "program":
            decl.program = p.string()
        elif key == "actuator":
            decl.actuator = p.string()
        elif key == "capabilities":
            decl.capabilities = _parse_id_list(p)
        elif key == "params":
            p.expect("[")
            while not p.at("]"):
                pname = p.ident()
                p.expect("=")
                decl.params.append((pname, p.string()))
                if p.at(","):
                    p.advance()
            p.expect("]")
        elif key == "inputs":
            p.expect("[")
            while not p.at("]"):
                producer = p.ident()
                p.expect(".")
                observable = p.ident()
                unit_name = p.string()
                decl.inputs.append((producer, observable, unit_name))
                if p.at(","):
                    p.advance()
            p.expect("]")
        elif key == "outputs":
            decl.outputs = _parse_id_list(p)
        elif key == "cite":
            p.expect("[")
            cites = []
            while not p.at("]"):
                cites.append(p.string())
                if p.at(","):
                    p.advance()
            p.expect("]")
            decl.cite = cites
        else:
            raise DslSyntaxError(
                key_tok.line, key_tok.col, "one of program/actuator/capabilities/params/inputs/outputs/cite", key
            )
        p.expect(";")
    p.expect("}")
    return decl


def _parse_id_list(p: _Parser) -> list[str]:
    p.expect("[")
    items = []
    while not p.at("]"):
        items.append(p.ident())
        if p.at(","):
            p.advance()
    p.expect("]")
    return items


def _assemble(
    name,
    start_edges,
    plain_edges,
    activities,
    forks,
    joins,
    decisions,
    source_refs,
    declared_order,
) -> WorkflowGraph:
    nodes: list[Node] = []
    edges: list[tuple[str, str]] = []
    flows: list[tuple[str, str, ExtractionSpec]] = []

    for i, target in enumerate(start_edges):
        sid = "start" if i == 0 else f"start{i + 1}"
        nodes.append(Node(sid, START))
        edges.append((sid, target))

    for nid in declared_order:
        if nid in activities:
            decl = activities[nid]
            nodes.append(
                Node(
                    nid,
                    ACTIVITY,
                    binding=_binding_from_decl(nid, decl),
                    params=tuple(sorted(decl.params)),
                    cite=tuple(decl.cite),
                )
            )
        elif nid in forks:
            source, targets = forks[nid]
            nodes.append(Node(nid, FORK))
            edges.append((source, nid))
            edges.extend((nid, t) for t in targets)
        elif nid in joins:
            waits, target = joins[nid]
            nodes.append(Node(nid, JOIN))
            edges.extend((w, nid) for w in waits)
            edges.append((nid, target))
        elif nid in decisions:
            source, cases, else_target = decisions[nid]
            nodes.append(Node(nid, DECISION, cases=tuple(cases), else_target=else_target))
            edges.append((source, nid))
            edges.extend((nid, t) for _, t in cases)
            edges.append((nid, else_target))

    edges.extend(plain_edges)
    mentioned = {e for pair in edges for e in pair}
    if "end" in mentioned and not any(n.id == "end" for n in nodes):
        nodes.append(Node("end", FINAL))

    # inputs declared on the consumer become producer->consumer object flows,
    # grouped per producer, in declaration order
    for consumer, decl in activities.items():
        per_producer: dict[str, list[tuple[str, str]]] = {}
        for producer, observable, unit_name in decl.inputs:
            per_producer.setdefault(producer, []).append((observable, unit_name))
        for producer, wanted in per_producer.items():
            if producer in activities and activities[producer].outputs is not None:
                declared = set(activities[producer].outputs)
                for observable, _unit in wanted:
                    if observable not in declared:
                        raise SemanticError(
                            f"{consumer}: input {producer}.{observable} is not among "
                            f"{producer}'s declared outputs"
                        )
            try:
                spec = ExtractionSpec.of(*wanted)
            except UnknownUnit as exc:
                raise SemanticError(str(exc)) from None
            flows.append((producer, consumer, spec))

    deduped = list(dict.fromkeys(edges))
    return build_graph(name, nodes, deduped, flows, source_refs)


def _binding_from_decl(aid: str, decl: _ActivityDecl) -> Binding:
    caps = frozenset(decl.capabilities)
    if decl.actuator and decl.program:
        return Binding(PINNED_BOTH, decl.program, decl.actuator, caps)
    if decl.actuator:
        raise SemanticError(f"activity {aid}: actuator given without a program")
    if decl.program:
        return Binding(PINNED_PROGRAM, decl.program, None, caps)
    return Binding(FREE, None, None, caps)


# ---------------------------------------------------------------------------
# emitter
# ---------------------------------------------------------------------------


def _format_guard(guard: Guard) -> str:
    value = repr(guard.value)
    unit = "" if guard.unit.name == "dimensionless" else f" {_quote(guard.unit.name)}"
    return f"{guard.observable} {guard.op} {value}{unit}"


def emit_dsl(g: WorkflowGraph) -> str:
    """Canonical text for a graph: parse(emit_dsl(g)) reproduces g.

    Only single-final graphs are expressible (the language spells the final
    node `end`); multi-final graphs must stay programmatic.
    """
    finals = g.finals()
    if len(finals) != 1:
        raise SemanticError("the workflow language can express exactly one final node")
    final_id = finals[0].id

    def show(node_id: str) -> str:
        return "end" if node_id == final_id else node_id

    covered: set[tuple[str, str]] = set()
    lines = [f"workflow {_quote(g.name)} {{"]
    for ref in g.source_refs:
        lines.append(f"  cite {_quote(ref)};")

    starts = sorted(n.id for n in g.nodes if n.kind == START)
    for sid in starts:
        for edge in sorted(g.out_edges(sid)):
            lines.append(f"  start -> {show(edge[1])};")
            covered.add(edge)

    for nid in _declaration_order(g):
        node = g.node(nid)
        if node.kind == ACTIVITY:
            lines.extend(_emit_activity(g, node))
        elif node.kind == FORK:
            sources = [u for u, _ in g.in_edges(nid) if not g.is_back_edge((u, nid))]
            targets = sorted(v for _, v in g.out_edges(nid))
            lines.append(f"  fork {nid} after {sources[0]} into ({', '.join(map(show, targets))});")
            covered.add((sources[0], nid))
            covered.update((nid, v) for v in targets)
        elif node.kind == JOIN:
            waits = sorted(u for u, _ in g.in_edges(nid))
            target = g.out_edges(nid)[0][1]
            lines.append(f"  join {nid} waits ({', '.join(waits)}) -> {show(target)};")
            covered.update((u, nid) for u in waits)
            covered.add((nid, target))
        elif node.kind == DECISION:
            sources = [u for u, _ in g.in_edges(nid) if not g.is_back_edge((u, nid))]
            body = [f"when {_format_guard(gd)} -> {show(t)};" for gd, t in node.cases]
            body.append(f"else -> {show(node.else_target)};")
            lines.append(f"  decision {nid} after {sources[0]} {{ {' '.join(body)} }}")
            covered.add((sources[0], nid))
            covered.update((nid, t) for _, t in node.cases)
            covered.add((nid, node.else_target))

    for u, v in sorted(e for e in g.edges if e not in covered):
        lines.append(f"  {u} -> {show(v)};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _declaration_order(g: WorkflowGraph) -> list[str]:
    full = nx.DiGraph()
    full.add_nodes_from(n.id for n in g.nodes)
    full.add_edges_from(g.edges)
    start = g.start().id
    reachable = set(nx.descendants(full, start)) | {start}
    fwd = nx.DiGraph()
    fwd.add_nodes_from(reachable)
    fwd.add_edges_from(e for e in g.forward_edges() if e[0] in reachable and e[1] in reachable)
    order = [
        i
        for i in nx.lexicographical_topological_sort(fwd)
        if g.node(i).kind in (ACTIVITY, FORK, JOIN, DECISION)
    ]
    order.extend(
        sorted(
            n.id
            for n in g.nodes
            if n.id not in reachable and n.kind in (ACTIVITY, FORK, JOIN, DECISION)
        )
    )
    return order


def _emit_activity(g: WorkflowGraph, node: Node) -> list[str]:
    lines = [f"  activity {node.id} {{"]
    binding = node.binding
    if binding.program:
        lines.append(f"    program: {_quote(binding.program)};")
    if binding.actuator:
        lines.append(f"    actuator: {_quote(binding.actuator)};")
    if binding.capabilities:
        lines.append(f"    capabilities: [{', '.join(sorted(binding.capabilities))}];")
    if node.params:
        rendered = ", ".join(f"{k} = {_quote(v)}" for k, v in node.params)
        lines.append(f"    params: [{rendered}];")
    inputs = []
    for producer, consumer, spec in g.object_flows:
        if consumer == node.id:
            for observable, unit in spec.wanted:
                inputs.append(f"{producer}.{observable} {_quote(unit.name)}")
    if inputs:
        lines.append(f"    inputs: [{', '.join(inputs)}];")
    if node.cite:
        lines.append(f"    cite: [{', '.join(_quote(c) for c in node.cite)}];")
    lines.append("  }")
    return lines


# ---------------------------------------------------------------------------
# functional plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Run:
    activity: str


@dataclass(frozen=True)
class Seq:
    items: tuple


@dataclass(frozen=True)
class ParMap:
    """Map over parallel branches, then reduce at the named join."""

    branches: tuple
    reduce_join: str


@dataclass(frozen=True)
class Choice:
    decision: str
    guard: Guard
    then: object
    orelse: object


@dataclass(frozen=True)
class Loop:
    """Do-while: run body, then repeat while guard holds."""

    decision: str
    guard: Guard
    body: object
    max_iterations: int


_NEGATED = {"<": ">=", "<=": ">", "==": "!=", "!=": "==", ">=": "<", ">": "<="}


def _negate(guard: Guard) -> Guard:
    return Guard(guard.observable, _NEGATED[guard.op], guard.value, guard.unit)


_CHOICE_END = "__choice_end__"


def to_functional_plan(g: WorkflowGraph, max_iterations: int = 100):
    """Reduce a sound graph to Run/Seq/ParMap/Choice/Loop combinators.

    Raises NotSeriesParallel when the fork/join structure cannot be reduced;
    such graphs are still executable directly, just not expressible as a
    structured plan.
    """
    report = verify(g, max_iterations)
    if not report.sound:
        raise UnsoundWorkflow(report)

    succ = {n.id: sorted(v for _, v in g.out_edges(n.id)) for n in g.nodes}
    fwd_in_count = {
        n.id: sum(1 for e in g.in_edges(n.id) if not g.is_back_edge(e)) for n in g.nodes
    }
    by_id = {n.id: n for n in g.nodes}
    back_in: dict[str, list[str]] = {}
    for u, v in g.back_edges:
        back_in.setdefault(v, []).append(u)

    def walk(node_id: str, stop_at: str | None = None, skip_loop_at: str | None = None):
        """Plan for the region from node_id until stop_at, a final, or a join.

        Returns (plan, where it stopped). A decision hands the remainder of
        the region to its branches, so it stops at the _CHOICE_END marker.
        """
        items = []
        current = node_id
        while True:
            if current == stop_at:
                return _seq(items), current
            node = by_id[current]
            if node.kind in (FINAL, JOIN):
                return _seq(items), current
            if current in back_in and current != skip_loop_at:
                loop, after = reduce_loop(current)
                items.append(loop)
                current = after
            elif node.kind == ACTIVITY:
                items.append(Run(current))
                current = succ[current][0]
            elif node.kind == FORK:
                par, after = reduce_fork(current)
                items.append(par)
                current = after
            elif node.kind == DECISION:
                items.append(reduce_choice(node))
                return _seq(items), _CHOICE_END
            else:
                raise NotSeriesParallel(f"cannot reduce node {current} ({node.kind})")

    def reduce_fork(fork_id: str):
        branches = []
        join_id = None
        for target in succ[fork_id]:
            plan, stopped = walk(target)
            if stopped == _CHOICE_END or by_id[stopped].kind != JOIN:
                raise NotSeriesParallel(
                    f"fork {fork_id}: branch via {target} does not end at a join"
                )
            if join_id is None:
                join_id = stopped
            elif join_id != stopped:
                raise NotSeriesParallel(
                    f"fork {fork_id}: branches end at different joins {join_id} and {stopped}"
                )
            branches.append(plan)
        if fwd_in_count[join_id] != len(branches):
            raise NotSeriesParallel(
                f"join {join_id} also gathers tokens from outside fork {fork_id}"
            )
        return ParMap(tuple(branches), join_id), succ[join_id][0]

    def reduce_choice(node: Node):
        # forward decision: nested Choice, every branch runs to its own end
        def branch_plan(target):
            plan, stopped = walk(target)
            if stopped != _CHOICE_END and by_id[stopped].kind != FINAL:
                raise NotSeriesParallel(
                    f"decision {node.id}: branch via {target} stops at {stopped}"
                )
            return plan

        result = branch_plan(node.else_target)
        for guard, target in reversed(node.cases):
            result = Choice(node.id, guard, branch_plan(target), result)
        return result

    def reduce_loop(header: str):
        sources = back_in[header]
        if len(sources) != 1:
            raise NotSeriesParallel(f"{header} is re-entered by more than one back edge")
        decider = by_id[sources[0]]
        if decider.kind != DECISION:
            raise NotSeriesParallel(
                f"cycle into {header} is closed by {decider.id}, not by a decision"
            )
        if len(decider.cases) != 1:
            raise NotSeriesParallel(f"loop decision {decider.id} must have exactly one case")
        guard, case_target = decider.cases[0]
        if case_target == header:
            repeat_guard, exit_target = guard, decider.else_target
        elif decider.else_target == header:
            repeat_guard, exit_target = _negate(guard), case_target
        else:
            raise NotSeriesParallel(f"decision {decider.id} does not close the loop at {header}")
        body, stopped = walk(header, stop_at=decider.id, skip_loop_at=header)
        if stopped != decider.id:
            raise NotSeriesParallel(
                f"loop body from {header} ends at {stopped}, expected {decider.id}"
            )
        return Loop(decider.id, repeat_guard, body, max_iterations), exit_target

    plan, stopped = walk(succ[g.start().id][0])
    if stopped != _CHOICE_END and by_id[stopped].kind != FINAL:
        raise NotSeriesParallel(f"workflow tail stops at {stopped}")
    return plan


def _seq(items):
    if len(items) == 1:
        return items[0]
    return Seq(tuple(items))


def interpret_plan(plan, outcomes, max_iterations: int = 100) -> list[str]:
    """Reference denotation: the activity sequence one run of the plan makes.

    `outcomes` maps decision id to a bool or a sequence of bools consumed one
    per evaluation. Loops exceeding their bound raise IterationLimit, exactly
    like the engine.
    """
    cursors = {}

    def outcome(decision: str) -> bool:
        value = outcomes.get(decision)
        if isinstance(value, bool):
            return value
        if value is None:
            raise KeyError(f"no outcome scripted for decision {decision}")
        i = cursors.get(decision, 0)
        cursors[decision] = i + 1
        if i >= len(value):
            raise IndexError(f"decision {decision} evaluated more than scripted")
        return value[i]

    trace: list[str] = []

    def run(node):
        if isinstance(node, Run):
            trace.append(node.activity)
        elif isinstance(node, Seq):
            for item in node.items:
                run(item)
        elif isinstance(node, ParMap):
            for branch in node.branches:
                run(branch)
        elif isinstance(node, Choice):
            run(node.then if outcome(node.decision) else node.orelse)
        elif isinstance(node, Loop):
            for iteration in range(node.max_iterations + 1):
                run(node.body)
                if not outcome(node.decision):
                    return
            raise IterationLimit(f"loop at {node.decision} exceeded {node.max_iterations}")
        else:
            raise TypeError(f"not a plan node: {node!r}")

    run(plan)
    return trace


def plan_text(plan, indent: int = 0) -> str:
    """Stable, human-readable rendering used by `export --to plan`."""
    pad = "  " * indent
    if isinstance(plan, Run):
        return f"{pad}run {plan.activity}"
    if isinstance(plan, Seq):
        body = "\n".join(plan_text(item, indent + 1) for item in plan.items)
        return f"{pad}seq\n{body}"
    if isinstance(plan, ParMap):
        body = "\n".join(plan_text(branch, indent + 1) for branch in plan.branches)
        return f"{pad}parmap -> reduce at {plan.reduce_join}\n{body}"
    if isinstance(plan, Choice):
        return (
            f"{pad}choice {plan.decision} when {plan.guard.text()}\n"
            + plan_text(plan.then, indent + 1)
            + f"\n{pad}else\n"
            + plan_text(plan.orelse, indent + 1)
        )
    if isinstance(plan, Loop):
        return (
            f"{pad}loop {plan.decision} while {plan.guard.text()} (max {plan.max_iterations})\n"
            + plan_text(plan.body, indent + 1)
        )
    raise TypeError(f"not a plan node: {plan!r}")


# ---------------------------------------------------------------------------
# job-sequence XML
# ---------------------------------------------------------------------------


def activity_precedence(g: WorkflowGraph) -> set[tuple[str, str]]:
    """Direct precedence: a -> b when a forward path joins them with no
    activity in between."""
    fwd = nx.DiGraph()
    fwd.add_nodes_from(n.id for n in g.nodes)
    fwd.add_edges_from(g.forward_edges())
    activities = set(topological_activities(g))
    pairs = set()
    for a in activities:
        frontier = [v for _, v in fwd.out_edges(a)]
        seen = set(frontier)
        while frontier:
            node = frontier.pop()
            if node in activities:
                pairs.add((a, node))
                continue
            for _, nxt in fwd.out_edges(node):
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
    return pairs


def job_dependencies(g: WorkflowGraph) -> dict[str, list[str]]:
    """depends-on relation: the transitive reduction of activity precedence."""
    dag = nx.DiGraph()
    dag.add_nodes_from(topological_activities(g))
    dag.add_edges_from(activity_precedence(g))
    reduced = nx.transitive_reduction(dag)
    return {a: sorted(u for u, _ in reduced.in_edges(a)) for a in dag.nodes}


def to_job_xml(g: WorkflowGraph, max_iterations: int = 100, force: bool = False) -> bytes:
    """Byte-deterministic job-sequence document for a sound graph."""
    report = verify(g, max_iterations)
    if not report.sound and not force:
        raise UnsoundWorkflow(report)

    root = ET.Element("workflow", {"name": g.name})
    for ref in g.source_refs:
        cite = ET.SubElement(root, "cite")
        cite.text = ref

    deps = job_dependencies(g)
    jobs = ET.SubElement(root, "jobs")
    for aid in topological_activities(g):
        node = g.node(aid)
        binding = node.binding
        attrs = {"id": aid}
        if binding.program:
            attrs["program"] = binding.program
        if binding.actuator:
            attrs["actuator"] = binding.actuator
        if binding.capabilities:
            attrs["capabilities"] = ",".join(sorted(binding.capabilities))
        job = ET.SubElement(jobs, "job", attrs)
        for key, value in node.params:
            ET.SubElement(job, "param", {"name": key, "value": value})
        for producer, consumer, spec in g.object_flows:
            if consumer == aid:
                for observable, unit in spec.wanted:
                    ET.SubElement(
                        job,
                        "input",
                        {"source": producer, "observable": observable, "unit": unit.name},
                    )
        for dep in deps[aid]:
            ET.SubElement(job, "depends-on", {"job": dep})
        for ref in node.cite:
            cite = ET.SubElement(job, "cite")
            cite.text = ref

    structure = ET.SubElement(root, "structure")
    for node in g.nodes:
        if node.kind == FORK:
            fork = ET.SubElement(structure, "fork", {"id": node.id})
            for _, v in sorted(g.out_edges(node.id)):
                ET.SubElement(fork, "branch", {"target": v})
        elif node.kind == JOIN:
            join = ET.SubElement(
                structure, "join", {"id": node.id, "target": g.out_edges(node.id)[0][1]}
            )
            for u, _ in sorted(g.in_edges(node.id)):
                ET.SubElement(join, "wait", {"source": u})
    for u, v in sorted(g.back_edges):
        node = g.node(u)
        attrs = {"decision": u, "back-to": v, "max": str(max_iterations)}
        if node.kind == DECISION:
            for guard, target in node.cases:
                if target == v:
                    attrs["guard"] = guard.text()
        ET.SubElement(structure, "loop", attrs)

    ET.indent(root)
    return ET.tostring(root, encoding="UTF-8", xml_declaration=True) + b"\n"


def validate_job_xml(data: bytes) -> list[str]:
    """Structural validation mirroring the bundled schema; [] means valid."""
    problems = []
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        return [f"malformed XML: {exc}"]
    if root.tag != "workflow":
        return [f"root element must be <workflow>, got <{root.tag}>"]
    if not root.get("name"):
        problems.append("<workflow> needs a name attribute")

    jobs = root.find("jobs")
    if jobs is None:
        return problems + ["missing <jobs> element"]
    ids = [j.get("id") for j in jobs.findall("job")]
    if None in ids:
        problems.append("every <job> needs an id")
    if len(set(ids)) != len(ids):
        problems.append("duplicate job ids")

    dep_graph = nx.DiGraph()
    dep_graph.add_nodes_from(ids)
    for job in jobs.findall("job"):
        for dep in job.findall("depends-on"):
            target = dep.get("job")
            if target not in ids:
                problems.append(f"job {job.get('id')}: depends-on unknown job {target!r}")
            else:
                dep_graph.add_edge(target, job.get("id"))
        for inp in job.findall("input"):
            for attr in ("source", "observable", "unit"):
                if not inp.get(attr):
                    problems.append(f"job {job.get('id')}: input missing {attr}")
    if ids and not nx.is_directed_acyclic_graph(dep_graph):
        problems.append("depends-on edges contain a cycle")

    structure = root.find("structure")
    if structure is not None:
        for fork in structure.findall("fork"):
            if len(fork.findall("branch")) < 2:
                problems.append(f"fork {fork.get('id')}: needs at least two branches")
        for join in structure.findall("join"):
            if len(join.findall("wait")) < 2:
                problems.append(f"join {join.get('id')}: needs at least two waits")
        for loop in structure.findall("loop"):
            if not loop.get("max", "").isdigit():
                problems.append("loop wrapper needs an integer max attribute")
    return problems


# ---------------------------------------------------------------------------
# DOT rendering
# ---------------------------------------------------------------------------

_VARIANT_LABELS = {
    PINNED_BOTH: "pinned program and actuator",
    PINNED_PROGRAM: "pinned program",
    FREE: "system-matched",
}


def to_dot(g: WorkflowGraph) -> str:
    """Graphviz text: activities as rounded boxes grouped by binding variant,
    decisions as diamonds, fork/join as bars."""
    lines = [f'digraph "{g.name}" {{', "  rankdir=TB;"]
    by_variant: dict[str, list[Node]] = {}
    for node in g.nodes:
        if node.kind == ACTIVITY:
            by_variant.setdefault(node.binding.variant, []).append(node)

    for variant in (PINNED_BOTH, PINNED_PROGRAM, FREE):
        members = by_variant.get(variant)
        if not members:
            continue
        lines.append(f"  subgraph cluster_{variant.replace('-', '_')} {{")
        lines.append(f'    label="{_VARIANT_LABELS[variant]}";')
        for node in sorted(members, key=lambda n: n.id):
            label = node.id
            if node.binding.program:
                label += f"\\n{node.binding.program}"
            lines.append(f'    "{node.id}" [shape=box, style=rounded, label="{label}"];')
        lines.append("  }")

    for node in sorted(g.nodes, key=lambda n: n.id):
        if node.kind == START:
            lines.append(f'  "{node.id}" [shape=circle, style=filled, fillcolor=black, label=""];')
        elif node.kind == FINAL:
            lines.append(
                f'  "{node.id}" [shape=doublecircle, style=filled, fillcolor=black, label=""];'
            )
        elif node.kind == DECISION:
            lines.append(f'  "{node.id}" [shape=diamond, label="{node.id}"];')
        elif node.kind in (FORK, JOIN):
            lines.append(
                f'  "{node.id}" [shape=box, height=0.08, style=filled, fillcolor=black, label=""];'
            )

    for u, v in sorted(g.edges):
        attrs = []
        src = g.node(u)
        if src.kind == DECISION:
            for guard, target in src.cases:
                if target == v:
                    attrs.append(f'label="{guard.text()}"')
                    break
            else:
                if src.else_target == v:
                    attrs.append('label="else"')
        if g.is_back_edge((u, v)):
            attrs.append("style=dashed")
        suffix = f" [{', '.join(attrs)}]" if attrs else ""
        lines.append(f'  "{u}" -> "{v}"{suffix};')
    lines.append("}")
    return "\n".join(lines) + "\n"
