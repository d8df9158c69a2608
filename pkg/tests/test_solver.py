"""The MDP core: Q/C values, forwarding probabilities, Bellman updates,
value iteration, policy extraction and exact policy evaluation."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ovdf.delays import edge_delays
from ovdf.roadgraph import BusLine, Intersection, augment, build_graph
from ovdf.solver import (
    RoutingDecision,
    SolverConfig,
    SolverError,
    TrappedComponentError,
    bellman_update,
    best_decision,
    candidates,
    expected_delay_at,
    forwarding_distribution,
    forwarding_prob,
    policy_evaluation,
    policy_from_dict,
    policy_to_dict,
    qc,
    value_iteration,
)
from ovdf.traffic import IntersectionStats, SegmentStats, StatsError, TrafficStats

from instances import chain_rows, random_grid_instance, walk_delays


# ---------------------------------------------------------------------------
# Small fixture graphs


def line_graph():
    """a -> b -> ap, one-way, 100 m hops at 10 m/s (exactly 10 s per hop)."""
    nodes = [
        Intersection("a", 0.0, 0.0),
        Intersection("b", 100.0, 0.0),
        Intersection("zap", 200.0, 0.0, True),
    ]
    graph = build_graph(nodes, [("a", "b", 100.0), ("b", "zap", 100.0)])
    intersections = {
        "a": IntersectionStats({"b": 1.0}, {"b": 0.0}, {}, {}),
        "b": IntersectionStats({"zap": 1.0}, {"zap": 0.0}, {}, {}),
    }
    segments = {k: SegmentStats(density=0.0, speed=10.0) for k in graph.segments}
    stats = TrafficStats(intersections=intersections, segments=segments)
    return graph, stats, edge_delays(graph, stats)


def star_with_buses():
    """Intersection m with two same-type shortcut edges (to e and far f)."""
    nodes = [
        Intersection("m", 0.0, 0.0),
        Intersection("e", 400.0, 0.0),
        Intersection("f", 800.0, 0.0),
        Intersection("zap", 0.0, 400.0, True),
    ]
    segs = [("m", "e", 400.0), ("e", "f", 400.0), ("m", "zap", 400.0),
            ("e", "m", 400.0), ("f", "e", 400.0), ("zap", "m", 400.0)]
    graph = build_graph(nodes, segs)
    graph = augment(graph, [BusLine(1, ("m", "e", "f"))])
    intersections = {
        "m": IntersectionStats(
            {"e": 0.5, "zap": 0.3}, {"e": 0.2, "zap": 0.2}, {1: 0.2}, {1: 0.5}
        ),
        "e": IntersectionStats({"m": 0.6, "f": 0.4}, {"m": 0.1, "f": 0.1}, {}, {}),
        "f": IntersectionStats({"e": 1.0}, {"e": 0.1}, {}, {}),
    }
    segments = {
        k: SegmentStats(density=0.005, speed=10.0, bus_speeds={1: 8.0})
        for k in graph.segments
    }
    stats = TrafficStats(intersections=intersections, segments=segments)
    return graph, stats, edge_delays(graph, stats)


# ---------------------------------------------------------------------------
# Candidate reduction


class TestCandidates:
    def test_no_buses_all_road_edges(self):
        graph, stats, delays = line_graph()
        cand = candidates(graph, delays, "a", {i: 0.0 for i in graph.intersections})
        assert [(e.to, e.vtype) for e in cand] == [("b", 0)]

    def test_bus_reduction_follows_delay_plus_d(self):
        graph, stats, delays = star_with_buses()
        # D favoring f strongly: the type-1 shortcut to f is retained.
        D = {"m": 0.0, "e": 1000.0, "f": 0.0, "zap": 0.0}
        cand = candidates(graph, delays, "m", D)
        assert [(e.to, e.vtype) for e in cand] == [("e", 0), ("zap", 0), ("f", 1)]
        # D favoring e: the shortcut to e is retained instead.
        D = {"m": 0.0, "e": 0.0, "f": 1000.0, "zap": 0.0}
        cand = candidates(graph, delays, "m", D)
        assert [(e.to, e.vtype) for e in cand] == [("e", 0), ("zap", 0), ("e", 1)]

    def test_tie_breaks_to_smaller_destination(self):
        graph, stats, delays = star_with_buses()
        # Force an exact tie: equal delay + D on both shortcuts.
        delays = dict(delays)
        D = {"m": 0.0, "e": 0.0, "f": 0.0, "zap": 0.0}
        delays[("m", "e", 1)] = 50.0
        delays[("m", "f", 1)] = 50.0
        cand = candidates(graph, delays, "m", D)
        bus = [e for e in cand if e.vtype == 1]
        assert [(e.to, e.vtype) for e in bus] == [("e", 1)]


class TestQC:
    def decision(self, graph, delays, order_by_to):
        cand = tuple(sorted(
            (e for e in graph.out_edges("m")), key=lambda e: (e.vtype, e.to)
        ))
        order = tuple(cand.index(next(e for e in cand if (e.to, e.vtype) == key))
                      for key in order_by_to)
        return RoutingDecision("m", cand, order)

    def test_plain_edge_takes_turn_and_contact(self):
        graph, stats, delays = star_with_buses()
        decision = self.decision(graph, delays,
                                 [("e", 0), ("zap", 0), ("e", 1), ("f", 1)])
        edge = graph.edge("m", "e", 0)
        assert qc(edge, decision, stats) == (0.5, 0.2)

    def test_retained_bus_edge_takes_type_fractions(self):
        graph, stats, delays = star_with_buses()
        decision = self.decision(graph, delays,
                                 [("e", 0), ("f", 1), ("e", 1), ("zap", 0)])
        assert qc(graph.edge("m", "f", 1), decision, stats) == (0.2, 0.5)

    def test_outranked_bus_edge_is_zero(self):
        graph, stats, delays = star_with_buses()
        decision = self.decision(graph, delays,
                                 [("e", 0), ("f", 1), ("e", 1), ("zap", 0)])
        assert qc(graph.edge("m", "e", 1), decision, stats) == (0.0, 0.0)

    def test_four_edge_expansion(self):
        # Expected delay equals the explicit four-term sum P_k (d_k + D_k)
        # with the outranked same-type shortcut contributing zero.
        graph, stats, delays = star_with_buses()
        decision = self.decision(graph, delays,
                                 [("e", 0), ("f", 1), ("e", 1), ("zap", 0)])
        D = {"m": 0.0, "e": 11.0, "f": 7.0, "zap": 0.0}
        probs = forwarding_distribution(decision, stats)
        want = sum(
            p * (delays[e.key] + D[e.to])
            for p, e in zip(probs, decision.prioritized())
        )
        assert expected_delay_at(decision, stats, delays, D) == pytest.approx(want)
        assert probs[2] == 0.0  # the outranked shortcut


# ---------------------------------------------------------------------------
# Forwarding probabilities


def scan_oracle(rng, c, q, order, trials):
    """Simulate the availability scan: independent contact coin per edge,
    one own-move draw, the first available edge in priority order wins."""
    n = len(c)
    contacts = rng.random((trials, n)) < np.asarray(c)[None, :]
    moves = rng.choice(n, size=trials, p=q)
    taken = np.full(trials, -1)
    undecided = np.ones(trials, dtype=bool)
    for k in order:
        available = undecided & (contacts[:, k] | (moves == k))
        taken[available] = k
        undecided &= ~available
        # lower-priority edges never see walks that moved or met here
        undecided &= ~(contacts[:, k] | (moves == k))
    counts = np.array([(taken == k).mean() for k in order])
    return counts


class TestForwardingProb:
    def make_decision(self, c_q_pairs):
        nodes = [Intersection("m", 0.0, 0.0), Intersection("zap", 100.0, 0.0, True)]
        nodes += [
            Intersection(f"n{k}", 100.0 * (k + 2), 0.0) for k in range(len(c_q_pairs))
        ]
        segs = [("m", f"n{k}", 100.0) for k in range(len(c_q_pairs))]
        graph = build_graph(nodes, segs)
        cand = tuple(sorted(graph.out_edges("m"), key=lambda e: (e.vtype, e.to)))
        stats = TrafficStats(
            intersections={
                "m": IntersectionStats(
                    {f"n{k}": q for k, (c, q) in enumerate(c_q_pairs)},
                    {f"n{k}": c for k, (c, q) in enumerate(c_q_pairs)},
                )
            },
            segments={k: SegmentStats(0.0, 10.0) for k in graph.segments},
        )
        return RoutingDecision("m", cand, tuple(range(len(cand)))), stats

    def test_worked_example(self):
        decision, stats = self.make_decision([(0.5, 0.6), (0.2, 0.4)])
        assert forwarding_prob(decision, 0, stats) == pytest.approx(0.8)
        assert forwarding_prob(decision, 1, stats) == pytest.approx(0.2)

    def test_monte_carlo_oracle_small(self):
        decision, stats = self.make_decision([(0.5, 0.6), (0.2, 0.4)])
        probs = forwarding_distribution(decision, stats)
        rng = np.random.default_rng(11)
        counts = scan_oracle(rng, [0.5, 0.2], [0.6, 0.4], decision.order, 200_000)
        assert np.allclose(probs, counts, atol=0.005)

    def test_three_edge_monte_carlo(self):
        pairs = [(0.3, 0.2), (0.6, 0.5), (0.1, 0.3)]
        decision, stats = self.make_decision(pairs)
        order = (2, 0, 1)
        decision = RoutingDecision("m", decision.candidates, order)
        probs = forwarding_distribution(decision, stats)
        rng = np.random.default_rng(12)
        counts = scan_oracle(
            rng, [p[0] for p in pairs], [p[1] for p in pairs], order, 200_000
        )
        assert np.allclose(probs, counts, atol=0.006)

    def test_position_bounds(self):
        decision, stats = self.make_decision([(0.5, 1.0)])
        with pytest.raises(SolverError):
            forwarding_prob(decision, 1, stats)

    def test_corrupt_stats_rejected(self):
        decision, stats = self.make_decision([(0.5, 0.9), (0.2, 0.9)])
        with pytest.raises(StatsError, match="sum to"):
            forwarding_prob(decision, 0, stats)

    @given(
        st.lists(
            st.tuples(st.floats(0.0, 1.0), st.floats(0.01, 1.0)),
            min_size=1,
            max_size=7,
        )
    )
    @settings(max_examples=200, deadline=None)
    def test_probability_conservation(self, pairs):
        total_q = sum(q for _, q in pairs)
        pairs = [(c, q / total_q) for c, q in pairs]
        decision, stats = self.make_decision(pairs)
        assert abs(float(forwarding_distribution(decision, stats).sum()) - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# Optimization


class TestBestDecision:
    def test_single_candidate(self):
        graph, stats, delays = line_graph()
        D = {i: 0.0 for i in graph.intersections}
        decision, value = best_decision(graph, stats, delays, "b", D)
        assert decision.order == (0,)
        assert value == pytest.approx(expected_delay_at(decision, stats, delays, D))

    def test_cheap_edge_first_when_qc_identical(self):
        decision, stats = TestForwardingProb().make_decision([(0.4, 0.5), (0.4, 0.5)])
        graph_delays = {e.key: d for e, d in zip(decision.candidates, (100.0, 10.0))}
        # n1 (delay 10) must outrank n0 (delay 100).
        import ovdf.kernels as kernels

        c = np.array([0.4, 0.4])
        q = np.array([0.5, 0.5])
        w = np.array([100.0, 10.0])
        order, _ = kernels.best_order_brute(c, q, w)
        assert order == (1, 0)

    def test_brute_force_beats_all_permutations_and_greedy_matches(self):
        rng = np.random.default_rng(21)
        for trial in range(60):
            graph, stats, delays = random_grid_instance(rng)
            D = {i: float(rng.uniform(0.0, 300.0)) for i in graph.intersections}
            for i in graph.ap_ids:
                D[i] = 0.0
            i = sorted(graph.non_ap_ids())[int(rng.integers(len(graph.non_ap_ids())))]
            decision, value = best_decision(graph, stats, delays, i, D)
            cand = decision.candidates
            # exhaustive check over all orders
            values = []
            for perm in itertools.permutations(range(len(cand))):
                d = RoutingDecision(i, cand, perm)
                values.append(expected_delay_at(d, stats, delays, D))
            assert value <= min(values) + 1e-12
            # greedy ascending (delay + D) matches the brute-force optimum
            w = [delays[e.key] + D[e.to] for e in cand]
            greedy = tuple(sorted(range(len(cand)), key=lambda k: (w[k], k)))
            gval = expected_delay_at(RoutingDecision(i, cand, greedy), stats, delays, D)
            assert gval == pytest.approx(value, abs=1e-12)

    def test_candidate_limit_enforced(self):
        graph, stats, delays = star_with_buses()
        D = {i: 0.0 for i in graph.intersections}
        with pytest.raises(SolverError, match="exceed"):
            best_decision(graph, stats, delays, "m", D, SolverConfig(max_candidates=2))

    def test_refuses_ap(self):
        graph, stats, delays = line_graph()
        with pytest.raises(SolverError, match="AP"):
            best_decision(graph, stats, delays, "zap", {i: 0.0 for i in graph.intersections})


# ---------------------------------------------------------------------------
# Bellman and value iteration


class TestBellman:
    def test_all_aps_zero(self):
        nodes = [Intersection("a", 0.0, 0.0, True), Intersection("b", 10.0, 0.0, True)]
        graph = build_graph(nodes, [("a", "b", 10.0), ("b", "a", 10.0)])
        stats = TrafficStats({}, {k: SegmentStats(0.0, 10.0) for k in graph.segments})
        new = bellman_update(graph, stats, edge_delays(graph, stats), {"a": 0.0, "b": 0.0})
        assert new == {"a": 0.0, "b": 0.0}

    def test_line_graph_hand_sweeps(self):
        graph, stats, delays = line_graph()
        D0 = {i: 0.0 for i in graph.intersections}
        D1 = bellman_update(graph, stats, delays, D0)
        assert D1 == {"a": 10.0, "b": 10.0, "zap": 0.0}
        D2 = bellman_update(graph, stats, delays, D1)
        assert D2 == {"a": 20.0, "b": 10.0, "zap": 0.0}

    def test_fixed_point_is_stable(self):
        graph, stats, delays = line_graph()
        D = {"a": 20.0, "b": 10.0, "zap": 0.0}
        assert bellman_update(graph, stats, delays, D) == D


class TestValueIteration:
    def test_line_graph(self):
        graph, stats, delays = line_graph()
        D, policy, report = value_iteration(
            graph, stats, delays, SolverConfig(epsilon=1e-6)
        )
        assert report.converged and report.iterations <= 4
        assert D["a"] == pytest.approx(20.0, abs=1e-6)
        assert D["b"] == pytest.approx(10.0, abs=1e-6)
        assert set(policy) == {"a", "b"}

    def test_adjacent_ap_two_sweeps(self):
        # Every intersection one deterministic hop from an AP.
        graph, stats, delays = line_graph()
        stats.intersections["a"] = IntersectionStats({"b": 1.0}, {"b": 0.0}, {}, {})
        sub = build_graph(
            [Intersection("b", 100.0, 0.0), Intersection("zap", 200.0, 0.0, True)],
            [("b", "zap", 100.0)],
        )
        substats = TrafficStats(
            {"b": IntersectionStats({"zap": 1.0}, {"zap": 0.0}, {}, {})},
            {k: SegmentStats(0.0, 10.0) for k in sub.segments},
        )
        D, _, report = value_iteration(sub, substats, edge_delays(sub, substats))
        assert report.converged and report.iterations == 2
        assert D["b"] == pytest.approx(100.0 / 10.0)

    def test_monotone_iterates_from_zero(self):
        rng = np.random.default_rng(31)
        graph, stats, delays = random_grid_instance(rng)
        D = {i: 0.0 for i in graph.intersections}
        for _ in range(30):
            new = bellman_update(graph, stats, delays, D)
            assert all(new[i] >= D[i] - 1e-12 for i in D)
            D = new

    def test_rejects_bad_epsilon(self):
        graph, stats, delays = line_graph()
        with pytest.raises(SolverError, match="epsilon"):
            value_iteration(graph, stats, delays, SolverConfig(epsilon=0.0))

    def test_non_convergence_reported(self):
        graph, stats, delays = line_graph()
        D, _, report = value_iteration(
            graph, stats, delays, SolverConfig(epsilon=1e-9, max_iter=1)
        )
        assert not report.converged
        assert report.iterations == 1
        assert report.final_residual >= 1e-9

    def test_missing_stats_refused(self):
        graph, stats, delays = line_graph()
        broken = TrafficStats(
            intersections={k: v for k, v in stats.intersections.items() if k != "a"},
            segments=stats.segments,
            missing=frozenset({"a"}),
        )
        with pytest.raises(StatsError, match="'a'"):
            value_iteration(graph, broken, delays)

    def test_unreachable_intersection_flagged(self):
        # b's traffic never turns toward the AP: its delay hits the ceiling.
        nodes = [
            Intersection("a", 0.0, 0.0),
            Intersection("b", 100.0, 0.0),
            Intersection("zap", 200.0, 0.0, True),
        ]
        graph = build_graph(
            nodes, [("a", "b", 100.0), ("b", "a", 100.0), ("b", "zap", 100.0)]
        )
        stats = TrafficStats(
            {
                "a": IntersectionStats({"b": 1.0}, {"b": 0.0}, {}, {}),
                "b": IntersectionStats({"a": 1.0}, {"a": 0.0}, {}, {}),
            },
            {k: SegmentStats(0.0, 10.0) for k in graph.segments},
        )
        D, _, report = value_iteration(
            graph, stats, edge_delays(graph, stats), SolverConfig(delay_ceiling=500.0)
        )
        assert report.unreachable == ("a", "b")
        assert D["a"] == 500.0 and D["b"] == 500.0

    def test_gauss_seidel_same_fixed_point(self):
        rng = np.random.default_rng(32)
        graph, stats, delays = random_grid_instance(rng)
        config = SolverConfig(epsilon=1e-9)
        D_j, pol_j, _ = value_iteration(graph, stats, delays, config)
        D_g, pol_g, rep_g = value_iteration(
            graph, stats, delays, SolverConfig(epsilon=1e-9, gauss_seidel=True)
        )
        assert rep_g.converged
        for i in D_j:
            assert D_g[i] == pytest.approx(D_j[i], abs=1e-6)
        assert {i: d.order for i, d in pol_j.items()} == {i: d.order for i, d in pol_g.items()}

    def test_scale_covariance_power_of_two(self):
        rng = np.random.default_rng(33)
        graph, stats, delays = random_grid_instance(rng)
        lam = 4.0  # exact in binary floating point
        scaled = {k: lam * v for k, v in delays.items()}
        cfg = SolverConfig(epsilon=1e-4)
        cfg_scaled = SolverConfig(epsilon=1e-4 * lam)
        D1, pol1, _ = value_iteration(graph, stats, delays, cfg)
        D2, pol2, _ = value_iteration(graph, stats, scaled, cfg_scaled)
        assert all(D2[i] == lam * D1[i] for i in D1)
        assert {i: d.order for i, d in pol1.items()} == {i: d.order for i, d in pol2.items()}

    def test_ap_monotonicity(self):
        rng = np.random.default_rng(34)
        for _ in range(10):
            graph, stats, delays = random_grid_instance(rng, n_aps=1)
            extra = sorted(graph.non_ap_ids())[int(rng.integers(len(graph.non_ap_ids())))]
            bigger_aps = sorted(graph.ap_ids | {extra})
            from instances import grid_graph

            graph2 = grid_graph(4, aps=bigger_aps)
            if graph.bus_lines:
                graph2 = augment(graph2, list(graph.bus_lines))
            delays2 = {k: v for k, v in delays.items()}
            cfg = SolverConfig(epsilon=1e-6)
            D1, _, _ = value_iteration(graph, stats, delays, cfg)
            D2, _, _ = value_iteration(graph2, stats, delays2, cfg)
            assert all(D2[i] <= D1[i] + 1e-9 for i in D1)


# ---------------------------------------------------------------------------
# Policy evaluation


class TestPolicyEvaluation:
    def test_single_hop(self):
        graph, stats, delays = line_graph()
        sub = build_graph(
            [Intersection("b", 0.0, 0.0), Intersection("zap", 70.0, 0.0, True)],
            [("b", "zap", 70.0)],
        )
        substats = TrafficStats(
            {"b": IntersectionStats({"zap": 1.0}, {"zap": 0.0}, {}, {})},
            {k: SegmentStats(0.0, 10.0) for k in sub.segments},
        )
        d = edge_delays(sub, substats)
        _, policy, _ = value_iteration(sub, substats, d)
        D = policy_evaluation(policy, sub, substats, d)
        assert D["b"] == pytest.approx(7.0)

    def test_trapped_cycle_raises(self):
        nodes = [
            Intersection("a", 0.0, 0.0),
            Intersection("b", 100.0, 0.0),
            Intersection("zap", 200.0, 0.0, True),
        ]
        graph = build_graph(
            nodes, [("a", "b", 100.0), ("b", "a", 100.0), ("b", "zap", 100.0)]
        )
        stats = TrafficStats(
            {
                "a": IntersectionStats({"b": 1.0}, {"b": 0.0}, {}, {}),
                "b": IntersectionStats({"a": 1.0}, {"a": 0.0}, {}, {}),
            },
            {k: SegmentStats(0.0, 10.0) for k in graph.segments},
        )
        delays = edge_delays(graph, stats)
        _, policy, _ = value_iteration(graph, stats, delays, SolverConfig(delay_ceiling=100.0))
        with pytest.raises(TrappedComponentError, match="'a', 'b'"):
            policy_evaluation(policy, graph, stats, delays)

    def test_matches_value_iteration(self):
        rng = np.random.default_rng(41)
        for _ in range(5):
            graph, stats, delays = random_grid_instance(rng)
            D, policy, report = value_iteration(graph, stats, delays, SolverConfig(epsilon=1e-6))
            assert report.converged
            exact = policy_evaluation(policy, graph, stats, delays)
            for i in D:
                assert exact[i] == pytest.approx(D[i], abs=1e-5 * 10)

    def test_matches_chain_monte_carlo(self):
        rng = np.random.default_rng(42)
        graph, stats, delays = random_grid_instance(rng, with_bus=False, n_aps=2)
        _, policy, _ = value_iteration(graph, stats, delays, SolverConfig(epsilon=1e-8))
        exact = policy_evaluation(policy, graph, stats, delays)
        rows = chain_rows(policy, graph, stats, delays)
        start = sorted(graph.non_ap_ids())[0]
        walks = walk_delays(rows, graph.ap_ids, start, 100_000, np.random.default_rng(7))
        se = walks.std(ddof=1) / math.sqrt(len(walks))
        assert abs(walks.mean() - exact[start]) <= 3 * se


# ---------------------------------------------------------------------------
# Routing table round trip


class TestPolicySerialization:
    def test_round_trip(self):
        graph, stats, delays = star_with_buses()
        D, policy, _ = value_iteration(graph, stats, delays)
        data = policy_to_dict(policy, D)
        again = policy_from_dict(data, graph)
        assert set(again) == set(policy)
        for i in policy:
            assert [e.key for e in again[i].prioritized()] == [
                e.key for e in policy[i].prioritized()
            ]

    def test_priorities_listed_in_order(self):
        graph, stats, delays = line_graph()
        _, policy, _ = value_iteration(graph, stats, delays)
        data = policy_to_dict(policy)
        entry = {e["id"]: e["priorities"] for e in data["intersections"]}
        assert entry["a"] == [{"to": "b", "vtype": 0}]
