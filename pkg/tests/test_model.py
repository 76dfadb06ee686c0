"""Graph construction invariants and the soundness verifier.

The verify tests cross-check every small graph against the brute-force
token simulator in tokenoracle, which shares no code with the verifier.
"""

import pytest

from gridflow.model import (
    ACTIVITY,
    DECISION,
    EXHAUSTIVE,
    FINAL,
    FORK,
    FREE,
    JOIN,
    PINNED_BOTH,
    PINNED_PROGRAM,
    START,
    Binding,
    Guard,
    GuardEvaluationError,
    Node,
    StructuralError,
    WorkflowGraph,
    binding_requirements,
    build_graph,
    topological_activities,
    verify,
)
from gridflow.quantities import Dataset, Observable, get_unit
from tokenoracle import brute_force_findings

from gridflow.resources import BindingRequirement

ONE = get_unit("dimensionless")
K = get_unit("K")


def act(node_id, caps=("sim",), **extra):
    return Node(node_id, ACTIVITY, binding=Binding(FREE, capabilities=frozenset(caps)), **extra)


def guard(name="flag", op="==", value=1.0):
    return Guard(name, op, value, ONE)


def chain_graph():
    return build_graph(
        "chain",
        [Node("start", START), act("a"), Node("end", FINAL)],
        [("start", "a"), ("a", "end")],
    )


def fork_join_graph():
    nodes = [
        Node("start", START),
        Node("f", FORK),
        act("a"),
        act("b"),
        Node("j", JOIN),
        act("c"),
        Node("end", FINAL),
    ]
    edges = [
        ("start", "f"),
        ("f", "a"),
        ("f", "b"),
        ("a", "j"),
        ("b", "j"),
        ("j", "c"),
        ("c", "end"),
    ]
    return build_graph("fork_join", nodes, edges)


def diamond_graph():
    nodes = [
        Node("start", START),
        Node("d", DECISION, cases=((guard(), "a"),), else_target="b"),
        act("a"),
        act("b"),
        Node("end", FINAL),
    ]
    edges = [("start", "d"), ("d", "a"), ("d", "b"), ("a", "end"), ("b", "end")]
    return build_graph("diamond", nodes, edges)


def loop_graph():
    nodes = [
        Node("start", START),
        act("prep"),
        act("work"),
        Node("d", DECISION, cases=((guard("converged", "!=", 1.0), "work"),), else_target="end"),
        Node("end", FINAL),
    ]
    edges = [("start", "prep"), ("prep", "work"), ("work", "d"), ("d", "work"), ("d", "end")]
    return build_graph("loop", nodes, edges)


def join_deadlock_graph():
    nodes = [
        Node("start", START),
        Node("d", DECISION, cases=((guard(), "a"),), else_target="b"),
        act("a"),
        act("b"),
        Node("j", JOIN),
        act("c"),
        Node("end", FINAL),
    ]
    edges = [
        ("start", "d"),
        ("d", "a"),
        ("d", "b"),
        ("a", "j"),
        ("b", "j"),
        ("j", "c"),
        ("c", "end"),
    ]
    return build_graph("join_deadlock", nodes, edges)


def unbalanced_graph():
    # the fork fires once per loop iteration but the join sits outside the
    # loop, so a second iteration floods the join's first input
    nodes = [
        Node("start", START),
        act("l"),
        Node("f", FORK),
        act("a"),
        act("b"),
        Node("d", DECISION, cases=((guard("again", "==", 1.0), "l"),), else_target="j"),
        Node("j", JOIN),
        Node("end", FINAL),
    ]
    edges = [
        ("start", "l"),
        ("l", "f"),
        ("f", "a"),
        ("f", "b"),
        ("a", "j"),
        ("b", "d"),
        ("d", "l"),
        ("d", "j"),
        ("j", "end"),
    ]
    return build_graph("unbalanced", nodes, edges)


def unguarded_cycle_graph():
    nodes = [
        Node("start", START),
        act("a"),
        Node("f", FORK),
        act("c"),
        Node("end", FINAL),
    ]
    edges = [("start", "a"), ("a", "f"), ("f", "a"), ("f", "c"), ("c", "end")]
    return build_graph("unguarded", nodes, edges)


def unreachable_graph():
    # the x/d island satisfies every degree rule but has no path from start
    nodes = [
        Node("start", START),
        act("a"),
        act("x"),
        Node("d", DECISION, cases=((guard(), "x"),), else_target="end"),
        Node("end", FINAL),
    ]
    edges = [("start", "a"), ("a", "end"), ("x", "d"), ("d", "x"), ("d", "end")]
    return build_graph("unreachable", nodes, edges)


def crossing_graph():
    # sound, but its fork/join regions overlap: not series-parallel
    nodes = [
        Node("start", START),
        Node("f1", FORK),
        act("a"),
        act("b"),
        Node("f2", FORK),
        act("c"),
        Node("j", JOIN),
        act("dd"),
        Node("end", FINAL),
    ]
    edges = [
        ("start", "f1"),
        ("f1", "a"),
        ("f1", "b"),
        ("a", "f2"),
        ("f2", "c"),
        ("f2", "j"),
        ("b", "j"),
        ("j", "dd"),
        ("c", "end"),
        ("dd", "end"),
    ]
    return build_graph("crossing", nodes, edges)


def unbound_flow_graph():
    nodes = [
        Node("start", START),
        Node("f", FORK),
        act("a"),
        act("b"),
        Node("j", JOIN),
        Node("end", FINAL),
    ]
    edges = [("start", "f"), ("f", "a"), ("f", "b"), ("a", "j"), ("b", "j"), ("j", "end")]
    from gridflow.quantities import ExtractionSpec

    return build_graph("unbound_flow", nodes, edges, object_flows=[("a", "b", ExtractionSpec.of())])


SOUND_GRAPHS = [chain_graph, fork_join_graph, diamond_graph, loop_graph, crossing_graph]
UNSOUND_GRAPHS = {
    join_deadlock_graph: "JoinDeadlock",
    unbalanced_graph: "UnbalancedForkJoin",
    unguarded_cycle_graph: "UnguardedCycle",
    unreachable_graph: "Unreachable",
    unbound_flow_graph: "UnboundObjectFlow",
}


class TestBuildErrors:
    def base_nodes(self):
        return [Node("start", START), act("a"), Node("end", FINAL)]

    def test_two_starts(self):
        nodes = self.base_nodes() + [Node("start2", START)]
        with pytest.raises(StructuralError, match="TwoStarts"):
            build_graph("w", nodes, [("start", "a"), ("a", "end"), ("start2", "a")])

    def test_no_final(self):
        with pytest.raises(StructuralError, match="NoFinal"):
            build_graph("w", [Node("start", START), act("a")], [("start", "a")])

    def test_dangling_edge(self):
        with pytest.raises(StructuralError, match="DanglingEdge"):
            build_graph("w", self.base_nodes(), [("start", "a"), ("a", "ghost")])

    def test_duplicate_node(self):
        nodes = self.base_nodes() + [act("a")]
        with pytest.raises(StructuralError, match="DuplicateNode"):
            build_graph("w", nodes, [("start", "a"), ("a", "end")])

    def test_fork_with_one_branch(self):
        nodes = [Node("start", START), Node("f", FORK), act("a"), Node("end", FINAL)]
        edges = [("start", "f"), ("f", "a"), ("a", "end")]
        with pytest.raises(StructuralError, match="BadDegree"):
            build_graph("w", nodes, edges)

    def test_join_with_one_input(self):
        nodes = [Node("start", START), act("a"), Node("j", JOIN), Node("end", FINAL)]
        edges = [("start", "a"), ("a", "j"), ("j", "end")]
        with pytest.raises(StructuralError, match="BadDegree"):
            build_graph("w", nodes, edges)

    def test_activity_with_two_forward_inputs(self):
        nodes = [
            Node("start", START),
            Node("d", DECISION, cases=((guard(), "a"),), else_target="b"),
            act("a"),
            act("b"),
            act("c"),
            Node("end", FINAL),
        ]
        edges = [
            ("start", "d"),
            ("d", "a"),
            ("d", "b"),
            ("a", "c"),
            ("b", "c"),
            ("c", "end"),
        ]
        with pytest.raises(StructuralError, match="BadDegree"):
            build_graph("w", nodes, edges)

    def test_decision_without_else(self):
        nodes = [
            Node("start", START),
            Node("d", DECISION, cases=((guard(), "a"), (guard("g2"), "b"))),
            act("a"),
            act("b"),
            Node("end", FINAL),
        ]
        edges = [("start", "d"), ("d", "a"), ("d", "b"), ("a", "end"), ("b", "end")]
        with pytest.raises(StructuralError, match="DecisionRouting"):
            build_graph("w", nodes, edges)

    def test_decision_cases_must_match_edges(self):
        nodes = [
            Node("start", START),
            Node("d", DECISION, cases=((guard(), "ghost"),), else_target="b"),
            act("a"),
            act("b"),
            Node("end", FINAL),
        ]
        edges = [("start", "d"), ("d", "a"), ("d", "b"), ("a", "end"), ("b", "end")]
        with pytest.raises(StructuralError, match="DecisionRouting"):
            build_graph("w", nodes, edges)

    def test_back_edge_into_join_rejected(self):
        nodes = [
            Node("start", START),
            Node("f", FORK),
            act("a"),
            act("b"),
            Node("j", JOIN),
            act("c"),
            Node("d", DECISION, cases=((guard(), "j"),), else_target="end"),
            Node("end", FINAL),
        ]
        edges = [
            ("start", "f"),
            ("f", "a"),
            ("f", "b"),
            ("a", "j"),
            ("b", "j"),
            ("j", "c"),
            ("c", "d"),
            ("d", "j"),
            ("d", "end"),
        ]
        with pytest.raises(StructuralError, match="BadBackEdge"):
            build_graph("w", nodes, edges)

    def test_activity_without_binding(self):
        nodes = [Node("start", START), Node("a", ACTIVITY), Node("end", FINAL)]
        with pytest.raises(StructuralError, match="MissingBinding"):
            build_graph("w", nodes, [("start", "a"), ("a", "end")])

    def test_object_flow_must_link_activities(self):
        from gridflow.quantities import ExtractionSpec

        nodes = self.base_nodes()
        with pytest.raises(StructuralError, match="ObjectFlowEndpoint"):
            build_graph(
                "w",
                nodes,
                [("start", "a"), ("a", "end")],
                object_flows=[("start", "a", ExtractionSpec.of())],
            )


class TestBackEdges:
    def test_loop_back_edge_classified(self):
        g = loop_graph()
        assert g.back_edges == {("d", "work")}
        assert ("d", "end") not in g.back_edges

    def test_chain_has_no_back_edges(self):
        assert chain_graph().back_edges == frozenset()

    def test_forward_edges_exclude_back(self):
        g = loop_graph()
        assert ("d", "work") not in g.forward_edges()
        assert ("work", "d") in g.forward_edges()


class TestVerify:
    @pytest.mark.parametrize("builder", SOUND_GRAPHS, ids=lambda b: b.__name__)
    def test_sound_graphs_have_zero_findings(self, builder):
        report = verify(builder())
        assert report.sound, [f.text() for f in report.findings]
        assert report.mode == EXHAUSTIVE

    @pytest.mark.parametrize(
        "builder,kind", UNSOUND_GRAPHS.items(), ids=lambda x: getattr(x, "__name__", x)
    )
    def test_unsound_graphs_flag_expected_kind(self, builder, kind):
        report = verify(builder())
        assert not report.sound
        assert kind in report.kinds(), [f.text() for f in report.findings]

    def test_verify_is_deterministic(self):
        g = unbalanced_graph()
        assert verify(g) == verify(g)

    @pytest.mark.parametrize(
        "builder",
        SOUND_GRAPHS + list(UNSOUND_GRAPHS),
        ids=lambda b: b.__name__,
    )
    def test_agrees_with_brute_force_oracle(self, builder):
        g = builder()
        oracle_kinds = brute_force_findings(g)
        report = verify(g)
        assert report.kinds() == oracle_kinds
        assert report.sound == (not oracle_kinds)

    def test_adding_unguarded_cycle_never_removes_findings(self):
        # monotonicity: new looping structure adds findings, never subtracts
        before = verify(fork_join_graph()).kinds()
        nodes = [
            Node("start", START),
            Node("f", FORK),
            act("a"),
            act("b"),
            Node("j", JOIN),
            act("c"),
            Node("f2", FORK),
            Node("end", FINAL),
        ]
        edges = [
            ("start", "f"),
            ("f", "a"),
            ("f", "b"),
            ("a", "j"),
            ("b", "j"),
            ("j", "c"),
            ("c", "f2"),
            ("f2", "end"),
            ("f2", "f"),
        ]
        after = verify(build_graph("fork_join_cycle", nodes, edges)).kinds()
        assert before <= after
        assert "UnguardedCycle" in after

    def test_join_deadlock_names_the_join(self):
        report = verify(join_deadlock_graph())
        assert any(f.kind == "JoinDeadlock" and f.subject == "j" for f in report.findings)


class TestGuards:
    def ds(self, **scalars):
        return Dataset.build([Observable.scalar(k, v, K) for k, v in scalars.items()])

    def test_compare_with_conversion(self):
        g = Guard("temp", ">", 300.0, K)
        assert g.evaluate(self.ds(temp=350.0))
        assert not g.evaluate(self.ds(temp=250.0))

    def test_missing_observable(self):
        g = Guard("temp", ">", 300.0, K)
        with pytest.raises(GuardEvaluationError):
            g.evaluate(self.ds(pressure=1.0))

    def test_dimension_mismatch(self):
        g = Guard("temp", ">", 1.0, get_unit("angstrom"))
        with pytest.raises(GuardEvaluationError):
            g.evaluate(self.ds(temp=350.0))

    def test_all_operators(self):
        ds = self.ds(x=2.0)
        for op, expected in [("<", False), ("<=", False), ("==", False),
                             ("!=", True), (">=", True), (">", True)]:
            assert Guard("x", op, 1.0, K).evaluate(ds) is expected


class TestBindingRequirements:
    def test_one_requirement_per_activity_in_topo_order(self):
        g = fork_join_graph()
        reqs = binding_requirements(g)
        assert [r[0] for r in reqs] == ["a", "b", "c"]
        assert all(isinstance(r[1], BindingRequirement) for r in reqs)

    def test_variants_map_to_requirements(self):
        nodes = [
            Node("start", START),
            Node("p1", ACTIVITY, binding=Binding(PINNED_BOTH, program="gulp", actuator="gulp@c1")),
            Node("p2", ACTIVITY, binding=Binding(PINNED_PROGRAM, program="dlpoly")),
            Node("p3", ACTIVITY, binding=Binding(FREE, capabilities=frozenset({"analysis"}))),
            Node("end", FINAL),
        ]
        edges = [("start", "p1"), ("p1", "p2"), ("p2", "p3"), ("p3", "end")]
        reqs = dict(binding_requirements(build_graph("w", nodes, edges)))
        assert reqs["p1"].actuator == "gulp@c1" and reqs["p1"].program == "gulp"
        assert reqs["p2"].program == "dlpoly" and reqs["p2"].actuator is None
        assert reqs["p3"].capabilities == {"analysis"}

    def test_binding_variant_validation(self):
        with pytest.raises(StructuralError):
            Binding(PINNED_BOTH, program="x")
        with pytest.raises(StructuralError):
            Binding(PINNED_PROGRAM, program="x", actuator="y")
        with pytest.raises(StructuralError):
            Binding(FREE)

    def test_topological_activities_ties_by_id(self):
        g = fork_join_graph()
        assert topological_activities(g) == ("a", "b", "c")
