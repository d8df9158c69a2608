"""Delay-optimal anycast routing policies over the augmented road graph.

A packet sits at an intersection (the state). A routing decision there is a
priority permutation of the candidate outgoing edges; the packet leaves
along the highest-priority edge that turns out to be available (a contacted
vehicle moving onto it, or the holder itself). Candidate availability is
driven by two per-edge probabilities: Q, the chance the holder itself moves
onto the edge, and C, the chance of contacting a vehicle moving onto it
during the visit. AP intersections are absorbing with zero delay.

Expected delay satisfies D_i = sum_k P_k(order) * (delay_k + D_dest(k)),
minimized per intersection by value iteration. The permutation search and
probability recursion live in the kernel backend (compiled or pure Python,
bit-identical either way).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .roadgraph import AugmentedEdge, AugmentedGraph, NodeId
from .traffic import StatsError, TrafficStats

QC_SUM_TOL = 1e-9


class SolverError(RuntimeError):
    pass


class TrappedComponentError(SolverError):
    """A policy's chain has a component that cannot reach any AP."""

    def __init__(self, component):
        self.component = tuple(sorted(component, key=repr))
        super().__init__(
            "policy traps packets in an AP-unreachable component: "
            + ", ".join(repr(i) for i in self.component)
        )


@dataclass(frozen=True)
class RoutingDecision:
    """Priority permutation over the canonical candidate list of one intersection.

    candidates are in canonical (vtype, destination) order; order maps
    priority position -> candidate index. candidates carry at most one edge
    per bus type (the reduction performed by candidates()).
    """

    intersection: NodeId
    candidates: tuple[AugmentedEdge, ...]
    order: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.candidates))):
            raise SolverError(
                f"order {self.order} is not a permutation of {len(self.candidates)} candidates"
            )

    def prioritized(self) -> tuple[AugmentedEdge, ...]:
        return tuple(self.candidates[k] for k in self.order)


Policy = dict  # NodeId -> RoutingDecision
DelayVector = dict  # NodeId -> float


@dataclass
class SolveReport:
    iterations: int
    final_residual: float
    epsilon: float
    converged: bool
    unreachable: tuple[NodeId, ...] = ()


@dataclass(frozen=True)
class SolverConfig:
    epsilon: float = 1e-3
    max_iter: int = 10000
    brute_force_cap: int = 8  # exhaustive permutation search up to this many candidates
    max_candidates: int = 64  # refuse pathological intersections outright
    gauss_seidel: bool = False
    delay_ceiling: float = 1e6  # seconds; AP-unreachable intersections stick here


def candidates(graph: AugmentedGraph, delays: dict, i: NodeId, D: DelayVector) -> tuple[AugmentedEdge, ...]:
    """Candidate edges at i: every road edge plus, per bus type, the single
    shortcut minimizing edge delay + D at its head.

    Dropping the other same-type shortcuts is exact: under any decision only
    the best-placed one can receive probability mass, and placing any
    non-minimizing shortcut first is dominated. Ties break toward the
    smaller destination id. Result is in canonical (vtype, to) order.
    """
    plain = []
    best_bus: dict[int, tuple] = {}
    for edge in graph.out_edges(i):
        if edge.vtype == 0:
            plain.append(edge)
        else:
            rank = (delays[edge.key] + D[edge.to], edge.to)
            cur = best_bus.get(edge.vtype)
            if cur is None or rank < cur[0]:
                best_bus[edge.vtype] = (rank, edge)
    chosen = plain + [entry[1] for entry in best_bus.values()]
    return tuple(sorted(chosen, key=lambda e: (e.vtype, e.to)))


def qc(edge: AugmentedEdge, decision: RoutingDecision, stats: TrafficStats) -> tuple[float, float]:
    """(Q, C) of a candidate edge under a decision.

    Road edges take the intersection's turn fraction and contact probability
    toward the edge head. A bus shortcut takes the bus-type fraction pair
    only while it outranks every same-type candidate; otherwise both are
    zero (the bus, once met, uses only its best-ranked shortcut).
    """
    ist = stats.intersection(decision.intersection)
    if edge.vtype == 0:
        return (
            ist.turn_fractions.get(edge.to, 0.0),
            ist.contact_probs.get(edge.to, 0.0),
        )
    try:
        k = decision.candidates.index(edge)
    except ValueError:
        raise SolverError(f"edge {edge.key} is not a candidate at {decision.intersection!r}") from None
    priority = {idx: pos for pos, idx in enumerate(decision.order)}
    for other_k, other in enumerate(decision.candidates):
        if other_k != k and other.vtype == edge.vtype and priority[other_k] < priority[k]:
            return (0.0, 0.0)
    return (
        ist.bus_fractions.get(edge.vtype, 0.0),
        ist.bus_contact_probs.get(edge.vtype, 0.0),
    )


def _qc_arrays(decision: RoutingDecision, stats: TrafficStats):
    """Q and C per canonical candidate, plus the stats-corruption guard."""
    qs = np.empty(len(decision.candidates))
    cs = np.empty(len(decision.candidates))
    for k, edge in enumerate(decision.candidates):
        qs[k], cs[k] = qc(edge, decision, stats)
    if qs.sum() > 1.0 + QC_SUM_TOL:
        raise StatsError(
            f"move probabilities at {decision.intersection!r} sum to {qs.sum()!r} > 1"
        )
    return cs, qs


def forwarding_prob(decision: RoutingDecision, position: int, stats: TrafficStats) -> float:
    """Probability of forwarding along the priority-`position` edge (0-based)."""
    if not 0 <= position < len(decision.order):
        raise SolverError(f"priority position {position} out of range")
    cs, qs = _qc_arrays(decision, stats)
    probs = kernels.forwarding_probs(cs, qs, np.array(decision.order, dtype=np.int64))
    return float(probs[position])


def forwarding_distribution(decision: RoutingDecision, stats: TrafficStats) -> np.ndarray:
    """All forwarding probabilities, aligned with priority positions."""
    cs, qs = _qc_arrays(decision, stats)
    return kernels.forwarding_probs(cs, qs, np.array(decision.order, dtype=np.int64))


def expected_delay_at(decision: RoutingDecision, stats: TrafficStats, delays: dict, D: DelayVector) -> float:
    """sum over priority positions of P * (edge delay + D at the edge head)."""
    cs, qs = _qc_arrays(decision, stats)
    w = np.array([delays[e.key] + D[e.to] for e in decision.candidates])
    return float(kernels.decision_value(cs, qs, w, np.array(decision.order, dtype=np.int64)))


def _decision_arrays(graph, stats, delays, i, D):
    cand = candidates(graph, delays, i, D)
    ist = stats.intersection(i)
    n = len(cand)
    cs = np.empty(n)
    qs = np.empty(n)
    w = np.empty(n)
    for k, edge in enumerate(cand):
        if edge.vtype == 0:
            qs[k] = ist.turn_fractions.get(edge.to, 0.0)
            cs[k] = ist.contact_probs.get(edge.to, 0.0)
        else:
            # Reduced list: one candidate per bus type, so it is always the
            # retained one and (Q, C) do not depend on the order.
            qs[k] = ist.bus_fractions.get(edge.vtype, 0.0)
            cs[k] = ist.bus_contact_probs.get(edge.vtype, 0.0)
        w[k] = delays[edge.key] + D[edge.to]
    if qs.sum() > 1.0 + QC_SUM_TOL:
        raise StatsError(f"move probabilities at {i!r} sum to {qs.sum()!r} > 1")
    return cand, cs, qs, w


def best_decision(graph, stats, delays, i, D, config: SolverConfig = SolverConfig()):
    """Minimum expected-delay decision at i against the delay vector D.

    Exhaustive permutation search up to brute_force_cap candidates; above
    that, the greedy order ascending in (edge delay + D) which the test
    suite cross-validates against brute force.
    """
    if i in graph.ap_ids:
        raise SolverError(f"intersection {i!r} hosts an AP; no decision is taken there")
    cand, cs, qs, w = _decision_arrays(graph, stats, delays, i, D)
    if len(cand) > config.max_candidates:
        raise SolverError(
            f"{len(cand)} candidates at {i!r} exceed the limit {config.max_candidates}"
        )
    if len(cand) == 0:
        return RoutingDecision(i, (), ()), float("inf")
    if len(cand) <= config.brute_force_cap:
        order, value = kernels.best_order_brute(cs, qs, w)
    else:
        order = tuple(sorted(range(len(cand)), key=lambda k: (w[k], k)))
        value = float(
            kernels.decision_value(cs, qs, w, np.array(order, dtype=np.int64))
        )
    return RoutingDecision(i, cand, tuple(order)), float(value)


def bellman_update(graph, stats, delays, D, config: SolverConfig = SolverConfig()) -> DelayVector:
    """One Jacobi sweep: every non-AP intersection re-minimized against the
    old vector; APs stay at zero. Values cap at the configured ceiling."""
    new = {}
    for i in sorted(graph.intersections):
        if i in graph.ap_ids:
            new[i] = 0.0
        else:
            _, value = best_decision(graph, stats, delays, i, D, config)
            new[i] = min(value, config.delay_ceiling)
    return new


def value_iteration(graph, stats, delays, config: SolverConfig = SolverConfig()):
    """Iterate Bellman sweeps from the all-zero vector until the largest
    component change falls below epsilon, then extract the policy against
    the final vector.

    Returns (delay vector, policy, report). Intersections that cannot reach
    an AP climb to the delay ceiling and are flagged in the report.
    """
    if config.epsilon <= 0:
        raise SolverError("epsilon must be positive")
    blocked = sorted(set(stats.missing) & set(graph.non_ap_ids()), key=repr)
    if blocked:
        raise StatsError(
            "no statistics for intersections (rerun with defaults enabled to fill): "
            + ", ".join(repr(i) for i in blocked)
        )
    D = {i: 0.0 for i in graph.intersections}
    residual = float("inf")
    iterations = 0
    converged = False
    for _ in range(config.max_iter):
        if config.gauss_seidel:
            new = dict(D)
            for i in sorted(graph.intersections):
                if i in graph.ap_ids:
                    new[i] = 0.0
                else:
                    _, value = best_decision(graph, stats, delays, i, new, config)
                    new[i] = min(value, config.delay_ceiling)
        else:
            new = bellman_update(graph, stats, delays, D, config)
        residual = max(abs(new[i] - D[i]) for i in D)
        D = new
        iterations += 1
        if residual < config.epsilon:
            converged = True
            break
    unreachable = tuple(i for i in sorted(D, key=repr) if D[i] >= config.delay_ceiling)
    policy: Policy = {}
    for i in graph.non_ap_ids():
        decision, _ = best_decision(graph, stats, delays, i, D, config)
        policy[i] = decision
    report = SolveReport(iterations, residual, config.epsilon, converged, unreachable)
    return D, policy, report


def policy_evaluation(policy: Policy, graph, stats, delays) -> DelayVector:
    """Exact expected delays of a fixed policy via the induced absorbing chain.

    Solves (I - P) D = P d restricted to non-AP intersections. Raises
    TrappedComponentError when some component cannot reach an AP under the
    policy's positive-probability transitions.
    """
    non_ap = graph.non_ap_ids()
    index = {i: k for k, i in enumerate(non_ap)}
    rows = {}
    for i in non_ap:
        decision = policy[i]
        probs = forwarding_distribution(decision, stats)
        edges = decision.prioritized()
        rows[i] = [(e, float(p)) for e, p in zip(edges, probs)]

    # Backward reachability from the APs over positive-probability edges.
    reach_ap = set(graph.ap_ids)
    changed = True
    while changed:
        changed = False
        for i in non_ap:
            if i in reach_ap:
                continue
            if any(p > 0 and e.to in reach_ap for e, p in rows[i]):
                reach_ap.add(i)
                changed = True
    trapped = [i for i in non_ap if i not in reach_ap]
    if trapped:
        raise TrappedComponentError(trapped)

    n = len(non_ap)
    A = np.eye(n)
    b = np.zeros(n)
    for i in non_ap:
        r = index[i]
        for edge, p in rows[i]:
            b[r] += p * delays[edge.key]
            if edge.to not in graph.ap_ids:
                A[r, index[edge.to]] -= p
    solution = np.linalg.solve(A, b)
    D = {i: 0.0 for i in graph.ap_ids}
    for i in non_ap:
        D[i] = float(solution[index[i]])
    return D


# ---------------------------------------------------------------------------
# Routing table serialization (the artifact the simulator loads)


def policy_to_dict(policy: Policy, D: DelayVector | None = None) -> dict:
    entries = []
    for i in sorted(policy, key=repr):
        decision = policy[i]
        entry = {
            "id": i,
            "priorities": [{"to": e.to, "vtype": e.vtype} for e in decision.prioritized()],
        }
        if D is not None:
            entry["expected_delay_s"] = D[i]
        entries.append(entry)
    return {"intersections": entries}


def policy_from_dict(data: dict, graph: AugmentedGraph) -> Policy:
    policy: Policy = {}
    for entry in data["intersections"]:
        i = entry["id"]
        edges = [graph.edge(i, p["to"], p["vtype"]) for p in entry["priorities"]]
        cand = tuple(sorted(edges, key=lambda e: (e.vtype, e.to)))
        order = tuple(cand.index(e) for e in edges)
        policy[i] = RoutingDecision(i, cand, order)
    return policy
