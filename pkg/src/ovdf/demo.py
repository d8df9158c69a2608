"""Built-in demo networks and scenarios, so every pipeline stage runs
without external trace data.

Three fixtures:
  toy_network       9 intersections, two APs, one bus line cutting across;
                    small enough to reason about by hand.
  grid3x3           sparse single-AP grid used for solver-vs-simulator
                    consistency checks (wide blocks, carry-dominated).
  downtown          84 intersections / 112 two-way road segments spanning
                    4.5 km x 4 km, 5 APs, 6 cyclic bus lines; the desk-scale
                    stand-in for a real city graph.

Stats for the synthetic scenarios are not invented: a mobility-only warmup
run produces position traces which estimate_from_traces turns into the
solver inputs, so the statistics describe exactly the traffic the simulator
will generate.
"""

from __future__ import annotations

import numpy as np

from .roadgraph import AugmentedGraph, BusLine, Intersection, augment, build_graph
from .sim import Scenario, scenario_hash, simulate_mobility
from .traffic import (
    EstimationConfig,
    IntersectionStats,
    SegmentStats,
    TrafficStats,
    apply_defaults,
    estimate_from_traces,
)


# ---------------------------------------------------------------------------
# Toy network: 3x3 blocks, APs at two corners, one bus line across


def toy_network() -> AugmentedGraph:
    ids = [f"i{k}" for k in range(1, 10)]
    nodes = []
    for k, name in enumerate(ids):
        r, c = divmod(k, 3)
        nodes.append(Intersection(name, c * 500.0, -r * 500.0, name in ("i7", "i9")))
    streets = [
        ("i1", "i2"), ("i2", "i3"), ("i4", "i5"), ("i5", "i6"), ("i7", "i8"), ("i8", "i9"),
        ("i1", "i4"), ("i4", "i7"), ("i2", "i5"), ("i5", "i8"), ("i3", "i6"), ("i6", "i9"),
    ]
    segments = [(a, b, 500.0) for a, b in streets] + [(b, a, 500.0) for a, b in streets]
    graph = build_graph(nodes, segments)
    return augment(graph, [BusLine(1, ("i1", "i2", "i5", "i8", "i9"))])


def toy_stats() -> TrafficStats:
    """Hand-written statistics for the toy network.

    Intersections on the bus route reserve 0.1 of their arrival mass for the
    bus; everything else splits across the road neighbors.
    """
    graph = toy_network()
    bus_stops = {"i1", "i2", "i5", "i8"}  # stops with outgoing shortcut edges
    intersections = {}
    for i in graph.non_ap_ids():
        neighbors = graph.neighbors(i)
        bus_share = 0.1 if i in bus_stops else 0.0
        q = (1.0 - bus_share) / len(neighbors)
        stats = IntersectionStats(
            turn_fractions={j: q for j in neighbors},
            contact_probs={j: 0.25 for j in neighbors},
            bus_fractions={1: bus_share} if bus_share else {},
            bus_contact_probs={1: 0.3} if bus_share else {},
        )
        intersections[i] = stats
    segments = {
        key: SegmentStats(density=0.004, speed=10.0, bus_speeds={1: 8.0})
        for key in graph.segments
    }
    return TrafficStats(intersections=intersections, segments=segments)


# ---------------------------------------------------------------------------
# Sparse 3x3 grid for chain-vs-simulator consistency


def grid3x3_network(spacing: float = 1000.0) -> AugmentedGraph:
    nodes = []
    for k in range(9):
        r, c = divmod(k, 3)
        nodes.append(Intersection(f"g{k}", c * spacing, r * spacing, k == 4))
    streets = []
    for k in range(9):
        r, c = divmod(k, 3)
        if c < 2:
            streets.append((f"g{k}", f"g{k + 1}"))
        if r < 2:
            streets.append((f"g{k}", f"g{k + 3}"))
    segments = [(a, b, spacing) for a, b in streets] + [(b, a, spacing) for a, b in streets]
    return build_graph(nodes, segments)


def grid3x3_scenario(n_vehicles: int = 10, seed: int = 7, duration: float = 14400.0) -> Scenario:
    graph = grid3x3_network()
    base = uniform_stats(graph, speed=10.0)
    return Scenario(
        graph=graph,
        stats=base,
        n_vehicles=n_vehicles,
        seed=seed,
        sim_duration=duration,
        content_hash=scenario_hash(graph, base),
    )


def uniform_stats(graph: AugmentedGraph, speed: float = 10.0) -> TrafficStats:
    """Uniform turning, fixed speed, zero density: mobility bootstrap stats."""
    intersections = {}
    for i in graph.non_ap_ids():
        neighbors = graph.neighbors(i)
        q = 1.0 / len(neighbors)
        intersections[i] = IntersectionStats(
            turn_fractions={j: q for j in neighbors},
            contact_probs={j: 0.0 for j in neighbors},
        )
    segments = {key: SegmentStats(density=0.0, speed=speed) for key in graph.segments}
    return TrafficStats(intersections=intersections, segments=segments)


# ---------------------------------------------------------------------------
# Downtown: 84 intersections, 112 two-way streets, 5 APs, 6 bus loops.
#
# A river runs between rows 2 and 3 with bridges only at the two arterial
# columns. Greedy geographic forwarding toward the nearest AP presses into
# the bank and stalls there; delay-aware policies detour along the
# arterials to a bridge or a same-side AP. Two of the bus loops cross the
# river at the bridges, so predictable carriers matter most exactly where
# plain traffic is thin.

_DOWNTOWN_COLS = 12
_DOWNTOWN_ROWS = 7
_DOWNTOWN_DX = 4500.0 / (_DOWNTOWN_COLS - 1)
_DOWNTOWN_DY = 4000.0 / (_DOWNTOWN_ROWS - 1)
_DOWNTOWN_APS = ("d0201", "d0901", "d0503", "d0205", "d0905")
_DOWNTOWN_TARGET_STREETS = 112
_RIVER_SOUTH_ROW = 3  # river lies between rows 2 and 3
_BRIDGE_COLS = (2, 9)

_BUS_RECTS = [  # (col_lo, row_lo, col_hi, row_hi) loops
    (0, 0, 5, 2),
    (6, 0, 11, 2),
    (0, 3, 5, 6),
    (6, 3, 11, 6),
    (2, 1, 9, 5),
    (2, 2, 9, 4),
]


def _downtown_id(col: int, row: int) -> str:
    return f"d{col:02d}{row:02d}"


def _rect_loop(col_lo, row_lo, col_hi, row_hi) -> list[str]:
    stops = []
    for c in range(col_lo, col_hi):
        stops.append(_downtown_id(c, row_lo))
    for r in range(row_lo, row_hi):
        stops.append(_downtown_id(col_hi, r))
    for c in range(col_hi, col_lo, -1):
        stops.append(_downtown_id(c, row_hi))
    for r in range(row_hi, row_lo, -1):
        stops.append(_downtown_id(col_lo, r))
    return stops


def downtown_network(seed: int = 2024) -> AugmentedGraph:
    """Deterministic partial grid: the full 12x7 mesh thinned to 112 streets,
    never touching bus-loop streets and never disconnecting the map."""
    cols, rows = _DOWNTOWN_COLS, _DOWNTOWN_ROWS
    nodes = []
    for c in range(cols):
        for r in range(rows):
            nodes.append(Intersection(_downtown_id(c, r), c * _DOWNTOWN_DX, r * _DOWNTOWN_DY,
                                      _downtown_id(c, r) in _DOWNTOWN_APS))
    streets = []
    for c in range(cols):
        for r in range(rows):
            if c < cols - 1:
                streets.append((_downtown_id(c, r), _downtown_id(c + 1, r)))
            if r < rows - 1:
                crosses_river = r + 1 == _RIVER_SOUTH_ROW and c not in _BRIDGE_COLS
                if not crosses_river:
                    streets.append((_downtown_id(c, r), _downtown_id(c, r + 1)))
    protected = set()
    for rect in _BUS_RECTS:
        loop = _rect_loop(*rect)
        for a, b in zip(loop, loop[1:] + loop[:1]):
            protected.add(frozenset((a, b)))
    adjacency: dict[str, set[str]] = {n.id: set() for n in nodes}
    for a, b in streets:
        adjacency[a].add(b)
        adjacency[b].add(a)

    def connected_without(a, b):
        adjacency[a].discard(b)
        adjacency[b].discard(a)
        seen = {nodes[0].id}
        stack = [nodes[0].id]
        while stack:
            for nxt in adjacency[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        ok = len(seen) == len(nodes)
        if not ok:
            adjacency[a].add(b)
            adjacency[b].add(a)
        return ok

    rng = np.random.default_rng(seed)
    candidates = [s for s in streets if frozenset(s) not in protected]
    order = rng.permutation(len(candidates))
    kept = set(map(frozenset, (tuple(s) for s in streets)))
    to_remove = len(streets) - _DOWNTOWN_TARGET_STREETS
    for idx in order:
        if to_remove == 0:
            break
        a, b = candidates[idx]
        if len(adjacency[a]) <= 2 or len(adjacency[b]) <= 2:
            continue
        if connected_without(a, b):
            kept.discard(frozenset((a, b)))
            to_remove -= 1
    if to_remove:
        raise RuntimeError("could not thin the downtown grid to the target street count")
    final = []
    for a, b in streets:
        if frozenset((a, b)) in kept:
            final.append((a, b, None))
            final.append((b, a, None))
    graph = build_graph(nodes, final)
    lines = [BusLine(k + 1, tuple(_rect_loop(*rect)), cyclic=True) for k, rect in enumerate(_BUS_RECTS)]
    return augment(graph, lines)


_ARTERIAL_ROWS = (1, 5)
_ARTERIAL_COLS = (2, 9)


def _is_arterial_street(a: str, b: str) -> bool:
    ca, ra = int(a[1:3]), int(a[3:5])
    cb, rb = int(b[1:3]), int(b[3:5])
    if ra == rb and ra in _ARTERIAL_ROWS:
        return True
    return ca == cb and ca in _ARTERIAL_COLS


def downtown_base_stats(graph: AugmentedGraph, seed: int = 5) -> TrafficStats:
    """Bootstrap stats for downtown mobility with an arterial structure.

    Two fast rows and two fast columns carry most of the traffic (strong
    turning preference, 12..14 m/s); everything else is a slow side street
    (6..8 m/s). The heterogeneous density/speed landscape is what makes
    delay-aware routing differ from plain geographic routing.
    """
    rng = np.random.default_rng(seed)
    segments = {}
    for key in sorted(graph.segments, key=repr):
        if _is_arterial_street(*key):
            speed = float(rng.uniform(12.5, 14.0))
        else:
            speed = float(rng.uniform(4.5, 6.5))
        segments[key] = SegmentStats(density=0.0, speed=speed, bus_speeds={})
    intersections = {}
    for i in graph.non_ap_ids():
        neighbors = graph.neighbors(i)
        weights = np.array([
            (8.0 if _is_arterial_street(i, j) else 1.0) * float(rng.uniform(0.8, 1.2))
            for j in neighbors
        ])
        weights = weights / weights.sum()
        intersections[i] = IntersectionStats(
            turn_fractions={j: float(w) for j, w in zip(neighbors, weights)},
            contact_probs={j: 0.0 for j in neighbors},
        )
    stats = TrafficStats(intersections=intersections, segments=segments)
    return apply_defaults(stats, graph)


def split_bus_count(total: int, lines: int = len(_BUS_RECTS)) -> dict[int, int]:
    counts = {}
    for k in range(lines):
        counts[k + 1] = total // lines + (1 if k < total % lines else 0)
    return {k: v for k, v in counts.items() if v > 0}


def downtown_scenario(n_vehicles: int = 80, n_buses: int = 27, seed: int = 1,
                      duration: float = 3600.0, transfer_budget: int = 120,
                      buffer_capacity: int = 300) -> Scenario:
    """Desk-scale counterpart of the paper-style density settings.

    The transfer budget and buffer capacity are kept modest so that
    replication congestion is visible without a MAC stack (and the runs
    stay fast); single-copy protocols never come near either limit.
    """
    graph = downtown_network()
    stats = downtown_base_stats(graph)
    return Scenario(
        graph=graph,
        stats=stats,
        n_vehicles=n_vehicles,
        bus_counts=split_bus_count(n_buses),
        seed=seed,
        sim_duration=duration,
        transfer_budget=transfer_budget,
        buffer_capacity=buffer_capacity,
        content_hash=scenario_hash(graph, stats),
    )


# ---------------------------------------------------------------------------
# Self-calibrated statistics: warmup mobility -> traces -> estimation


def calibrated_stats(scenario: Scenario, warmup: float = 3600.0, sample_period: float = 5.0,
                     dwell_window: float | None = None, seed: int = 99,
                     graph_override: AugmentedGraph | None = None) -> TrafficStats:
    """Estimate solver statistics from the scenario's own mobility model.

    The dwell window defaults to the transit time of the forwarding dwell
    disk at a nominal speed, which keeps the Poisson contact probabilities
    aligned with what the simulator's intersection rule can actually use.

    graph_override reinterprets the same traces against another graph view;
    passing the bus-less graph yields the statistics a trajectory-blind
    policy would be built from (buses counted as plain vehicles).
    """
    warm = Scenario(
        graph=scenario.graph,
        stats=scenario.stats,
        n_vehicles=scenario.n_vehicles,
        bus_counts=dict(scenario.bus_counts),
        seed=seed,
        sim_duration=warmup,
        dwell_radius=scenario.dwell_radius,
    )
    records = simulate_mobility(warm, sample_period=sample_period)
    if dwell_window is None:
        # The intersection rule fires over the approach half-radius plus the
        # dwell disk, meeting contacts up to a radio range down the street.
        dwell_window = (
            scenario.dwell_radius + scenario.radio_range / 2.0 + scenario.radio_range
        ) / 10.0
    config = EstimationConfig(
        dwell_window=dwell_window,
        snap_radius=scenario.dwell_radius,
        radio_range=scenario.radio_range,
        hop_delay=scenario.hop_delay,
    )
    graph = graph_override if graph_override is not None else scenario.graph
    estimated = estimate_from_traces(records, graph, config)
    return apply_defaults(estimated, graph)
