"""Road network graph and its bus-augmented routing graph.

The road network is a directed graph of intersections and road segments.
Bus lines (vehicles with predetermined routes) add shortcut edges: a bus at
an intersection is guaranteed to carry packets to every intersection further
along its route, so each (route position, later position) pair becomes a
directed edge tagged with the bus type. Type 0 edges are the plain road
segments; type v > 0 edges are bus shortcuts.

Graphs are immutable after construction and safe to share between workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

NodeId = str | int


class GraphError(ValueError):
    """Malformed road network input."""


@dataclass(frozen=True)
class Intersection:
    id: NodeId
    x: float
    y: float
    is_ap: bool = False


@dataclass(frozen=True)
class RoadSegment:
    frm: NodeId
    to: NodeId
    length: float


@dataclass(frozen=True)
class BusLine:
    vtype: int
    route: tuple[NodeId, ...]
    cyclic: bool = False


@dataclass(frozen=True)
class AugmentedEdge:
    """An edge of the augmented graph.

    vtype 0 edges wrap exactly one road segment. vtype > 0 edges wrap the
    contiguous run of segments a type-vtype bus drives from `frm` to `to`.
    """

    frm: NodeId
    to: NodeId
    vtype: int
    segments: tuple[RoadSegment, ...]

    @property
    def key(self) -> tuple[NodeId, NodeId, int]:
        return (self.frm, self.to, self.vtype)

    @property
    def length(self) -> float:
        return sum(s.length for s in self.segments)

    @property
    def single_segment(self) -> bool:
        """True when the edge covers exactly one road segment."""
        return len(self.segments) == 1


class AugmentedGraph:
    """Immutable road graph plus bus shortcut edges and an outgoing index."""

    def __init__(
        self,
        intersections: dict[NodeId, Intersection],
        edges: list[AugmentedEdge],
        bus_lines: tuple[BusLine, ...] = (),
        geo_origin: tuple[float, float] | None = None,
    ):
        self.intersections = dict(intersections)
        self.edges = sorted(edges, key=lambda e: (e.frm, e.vtype, e.to))
        self.bus_lines = tuple(bus_lines)
        self.geo_origin = geo_origin
        self.ap_ids = frozenset(i.id for i in intersections.values() if i.is_ap)
        self.segments: dict[tuple[NodeId, NodeId], RoadSegment] = {
            (e.frm, e.to): e.segments[0] for e in self.edges if e.vtype == 0
        }
        out: dict[NodeId, list[AugmentedEdge]] = {i: [] for i in self.intersections}
        for e in self.edges:
            out[e.frm].append(e)
        self._out = {i: tuple(sorted(es, key=lambda e: (e.vtype, e.to))) for i, es in out.items()}
        self._edge_by_key = {e.key: e for e in self.edges}

    def out_edges(self, i: NodeId) -> tuple[AugmentedEdge, ...]:
        """Outgoing edges of `i`, deterministically ordered by (vtype, to)."""
        if i not in self._out:
            raise GraphError(f"unknown intersection {i!r}")
        return self._out[i]

    def edge(self, frm: NodeId, to: NodeId, vtype: int = 0) -> AugmentedEdge:
        try:
            return self._edge_by_key[(frm, to, vtype)]
        except KeyError:
            raise GraphError(f"no edge {frm!r}->{to!r} of type {vtype}") from None

    def neighbors(self, i: NodeId) -> tuple[NodeId, ...]:
        return tuple(e.to for e in self.out_edges(i) if e.vtype == 0)

    def position(self, i: NodeId) -> tuple[float, float]:
        node = self.intersections[i]
        return (node.x, node.y)

    def non_ap_ids(self) -> list[NodeId]:
        return sorted(i for i in self.intersections if i not in self.ap_ids)

    def __contains__(self, i: NodeId) -> bool:
        return i in self.intersections


def out_edges(graph: AugmentedGraph, i: NodeId) -> tuple[AugmentedEdge, ...]:
    return graph.out_edges(i)


def build_graph(
    intersections, segments, ap_ids=(), geo_origin: tuple[float, float] | None = None
) -> AugmentedGraph:
    """Assemble the plain road graph (type 0 edges only, buses not applied).

    `intersections` is an iterable of Intersection or (id, x, y) tuples;
    `segments` an iterable of RoadSegment or (frm, to[, length]) tuples with
    missing lengths computed from endpoint positions.
    """
    nodes: dict[NodeId, Intersection] = {}
    ap_ids = set(ap_ids)
    for item in intersections:
        node = item if isinstance(item, Intersection) else Intersection(item[0], item[1], item[2])
        if node.id in nodes:
            raise GraphError(f"duplicate intersection id {node.id!r}")
        if not (math.isfinite(node.x) and math.isfinite(node.y)):
            raise GraphError(f"non-finite position for intersection {node.id!r}")
        if node.id in ap_ids:
            node = Intersection(node.id, node.x, node.y, True)
        nodes[node.id] = node
    missing = ap_ids - set(nodes)
    if missing:
        raise GraphError(f"ap_ids not in intersections: {sorted(missing, key=repr)}")
    id_types = {type(i) for i in nodes}
    if len(id_types) > 1:
        raise GraphError("intersection ids must be uniformly str or int")

    edges: list[AugmentedEdge] = []
    seen: set[tuple[NodeId, NodeId]] = set()
    for item in segments:
        if isinstance(item, RoadSegment):
            seg = item
        elif len(item) == 3 and item[2] is not None:
            seg = RoadSegment(item[0], item[1], float(item[2]))
        else:
            frm, to = item[0], item[1]
            if frm not in nodes or to not in nodes:
                raise GraphError(f"segment {frm!r}->{to!r} references unknown intersection")
            a, b = nodes[frm], nodes[to]
            seg = RoadSegment(frm, to, math.hypot(b.x - a.x, b.y - a.y))
        if seg.frm not in nodes or seg.to not in nodes:
            raise GraphError(f"segment {seg.frm!r}->{seg.to!r} references unknown intersection")
        if seg.frm == seg.to:
            raise GraphError(f"self-loop segment at {seg.frm!r}")
        if (seg.frm, seg.to) in seen:
            raise GraphError(f"duplicate segment {seg.frm!r}->{seg.to!r}")
        if not (seg.length > 0 and math.isfinite(seg.length)):
            raise GraphError(f"non-positive length on segment {seg.frm!r}->{seg.to!r}")
        seen.add((seg.frm, seg.to))
        edges.append(AugmentedEdge(seg.frm, seg.to, 0, (seg,)))
    return AugmentedGraph(nodes, edges, geo_origin=geo_origin)


def _route_positions(line: BusLine) -> list[list[int]]:
    """Per start position, the sequence of later route positions.

    Acyclic lines stop at the route end; cyclic lines wrap once around the
    loop without revisiting the start position.
    """
    n = len(line.route)
    out = []
    for r in range(n):
        if line.cyclic:
            out.append([(r + k) % n for k in range(1, n)])
        else:
            out.append(list(range(r + 1, n)))
    return out


def _validate_line(graph: AugmentedGraph, line: BusLine) -> None:
    if line.vtype <= 0:
        raise GraphError(f"bus line type must be positive, got {line.vtype}")
    if len(line.route) < 2:
        raise GraphError(f"bus line {line.vtype} route has fewer than 2 stops")
    hops = list(zip(line.route, line.route[1:]))
    if line.cyclic:
        hops.append((line.route[-1], line.route[0]))
    for frm, to in hops:
        if (frm, to) not in graph.segments:
            raise GraphError(f"bus line {line.vtype} step {frm!r}->{to!r} is not a road segment")


def augment(graph: AugmentedGraph, bus_lines) -> AugmentedGraph:
    """Add bus shortcut edges for every (position, later position) route pair.

    Shortcuts with identical (frm, to, vtype) are deduplicated keeping the
    one with the smallest carried length, so a route visiting a pair twice
    contributes only its best-case carry path.
    """
    lines = tuple(bus_lines)
    types = [ln.vtype for ln in lines]
    if len(types) != len(set(types)):
        raise GraphError("bus line type ids must be unique")
    base = [e for e in graph.edges if e.vtype == 0]
    best: dict[tuple[NodeId, NodeId, int], AugmentedEdge] = {}
    for line in lines:
        _validate_line(graph, line)
        n = len(line.route)
        for r, laters in enumerate(_route_positions(line)):
            segs: list[RoadSegment] = []
            prev = line.route[r]
            for rp in laters:
                stop = line.route[rp]
                segs.append(graph.segments[(prev, stop)])
                prev = stop
                if stop == line.route[r]:
                    continue  # revisited start: no self-loop edge, keep walking
                edge = AugmentedEdge(line.route[r], stop, line.vtype, tuple(segs))
                cur = best.get(edge.key)
                if cur is None or edge.length < cur.length:
                    best[edge.key] = edge
    merged = base + sorted(best.values(), key=lambda e: (e.vtype, e.frm, e.to))
    return AugmentedGraph(graph.intersections, merged, lines, graph.geo_origin)


def without_buses(graph: AugmentedGraph) -> AugmentedGraph:
    """The plain road graph: shortcut edges and bus lines stripped.

    This is how the trajectory-blind policy variant sees the network.
    """
    return AugmentedGraph(
        graph.intersections,
        [e for e in graph.edges if e.vtype == 0],
        (),
        graph.geo_origin,
    )


def graph_from_dict(data: dict) -> AugmentedGraph:
    """Build a fully augmented graph from the JSON document structure."""
    try:
        nodes = [
            Intersection(n["id"], float(n["x"]), float(n["y"]), bool(n.get("is_ap", False)))
            for n in data["intersections"]
        ]
        segs = [(s["from"], s["to"], s.get("length_m")) for s in data["segments"]]
    except (KeyError, TypeError) as exc:
        raise GraphError(f"bad graph document: {exc}") from exc
    origin = None
    if "geo_origin" in data:
        origin = (float(data["geo_origin"]["lat"]), float(data["geo_origin"]["lon"]))
    graph = build_graph(nodes, segs, geo_origin=origin)
    lines = [
        BusLine(int(b["type"]), tuple(b["route"]), bool(b.get("cyclic", False)))
        for b in data.get("bus_lines", [])
    ]
    return augment(graph, lines)


def graph_to_dict(graph: AugmentedGraph) -> dict:
    data: dict = {
        "intersections": [
            {"id": n.id, "x": n.x, "y": n.y, "is_ap": n.is_ap}
            for n in sorted(graph.intersections.values(), key=lambda n: n.id)
        ],
        "segments": [
            {"from": s.frm, "to": s.to, "length_m": s.length}
            for s in sorted(graph.segments.values(), key=lambda s: (s.frm, s.to))
        ],
        "bus_lines": [
            {"type": ln.vtype, "route": list(ln.route), "cyclic": ln.cyclic}
            for ln in graph.bus_lines
        ],
    }
    if graph.geo_origin is not None:
        data["geo_origin"] = {"lat": graph.geo_origin[0], "lon": graph.geo_origin[1]}
    return data


def load_graph(path) -> AugmentedGraph:
    with open(path) as fh:
        return graph_from_dict(json.load(fh))


def save_graph(graph: AugmentedGraph, path) -> None:
    with open(path, "w") as fh:
        json.dump(graph_to_dict(graph), fh, indent=1)
        fh.write("\n")
