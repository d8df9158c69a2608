"""Traffic statistics: the per-intersection and per-segment parameters that
drive both the policy solver and synthetic mobility.

Per intersection i (non-AP):
  turn_fractions[j]      fraction of arrivals that are unpredictable vehicles
                         continuing to neighbor j
  contact_probs[j]       probability of meeting such a vehicle during a visit
  bus_fractions[v]       fraction of arrivals that are type-v buses
  bus_contact_probs[v]   probability of meeting a type-v bus during a visit
The four turn/bus fractions share one denominator (all arrivals at i), so
sum(turn_fractions) + sum(bus_fractions) == 1.

Per directed segment: vehicle density (1/m), mean speed (m/s), and per bus
type the mean bus speed on that segment.

Statistics load from JSON or are estimated from GPS trace records snapped to
the road graph. Contact probabilities use a Poisson contact model,
p = 1 - exp(-rate * dwell_window).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .roadgraph import AugmentedGraph, NodeId, RoadSegment

EARTH_RADIUS_M = 6371000.0
NORMALIZATION_TOL = 1e-9


class StatsError(ValueError):
    """Invalid or insufficient traffic statistics."""


@dataclass(frozen=True)
class IntersectionStats:
    turn_fractions: dict[NodeId, float] = field(default_factory=dict)
    contact_probs: dict[NodeId, float] = field(default_factory=dict)
    bus_fractions: dict[int, float] = field(default_factory=dict)
    bus_contact_probs: dict[int, float] = field(default_factory=dict)

    def validate(self, owner: NodeId) -> None:
        total = sum(self.turn_fractions.values()) + sum(self.bus_fractions.values())
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise StatsError(
                f"turn/bus fractions at intersection {owner!r} sum to {total!r}, expected 1"
            )
        for name, table in (
            ("turn_fractions", self.turn_fractions),
            ("contact_probs", self.contact_probs),
            ("bus_fractions", self.bus_fractions),
            ("bus_contact_probs", self.bus_contact_probs),
        ):
            for key, value in table.items():
                if not (0.0 <= value <= 1.0) or not math.isfinite(value):
                    raise StatsError(
                        f"{name}[{key!r}] at intersection {owner!r} is {value}, outside [0, 1]"
                    )


@dataclass(frozen=True)
class SegmentStats:
    density: float = 0.0
    speed: float = 8.0
    bus_speeds: dict[int, float] = field(default_factory=dict)

    def validate(self, owner) -> None:
        if not math.isfinite(self.density) or self.density < 0:
            raise StatsError(f"density on segment {owner!r} is {self.density}")
        if not math.isfinite(self.speed) or self.speed <= 0:
            raise StatsError(f"speed on segment {owner!r} is {self.speed}")
        for v, s in self.bus_speeds.items():
            if not math.isfinite(s) or s <= 0:
                raise StatsError(f"type-{v} bus speed on segment {owner!r} is {s}")


@dataclass(frozen=True)
class TraceRecord:
    vehicle_id: str
    vtype: int
    t: float
    x: float
    y: float


@dataclass(frozen=True)
class TrafficStats:
    intersections: dict[NodeId, IntersectionStats]
    segments: dict[tuple[NodeId, NodeId], SegmentStats]
    radio_range: float = 150.0
    hop_delay: float = 0.004
    missing: frozenset = frozenset()

    def intersection(self, i: NodeId) -> IntersectionStats:
        try:
            return self.intersections[i]
        except KeyError:
            raise StatsError(f"no statistics for intersection {i!r}") from None

    def segment(self, key: tuple[NodeId, NodeId]) -> SegmentStats:
        try:
            return self.segments[key]
        except KeyError:
            raise StatsError(f"no statistics for segment {key[0]!r}->{key[1]!r}") from None

    def validate(self, graph: AugmentedGraph | None = None) -> None:
        if not (self.radio_range > 0 and self.hop_delay > 0):
            raise StatsError("radio_range and hop_delay must be positive")
        for i, stats in self.intersections.items():
            stats.validate(i)
        for key, stats in self.segments.items():
            stats.validate(key)
        if graph is not None:
            self.validate_coverage(graph)

    def validate_coverage(self, graph: AugmentedGraph) -> None:
        """Check the stats cover every non-AP intersection and every segment."""
        for key in graph.segments:
            if key not in self.segments:
                raise StatsError(f"no statistics for segment {key[0]!r}->{key[1]!r}")
        for i in graph.non_ap_ids():
            if i in self.missing:
                continue
            stats = self.intersection(i)
            neighbors = set(graph.neighbors(i))
            unknown = set(stats.turn_fractions) - neighbors
            if unknown:
                raise StatsError(
                    f"turn fractions at {i!r} reference non-neighbors {sorted(unknown, key=repr)}"
                )
        types = {line.vtype for line in graph.bus_lines}
        for i, stats in self.intersections.items():
            unknown = set(stats.bus_fractions) - types
            if unknown:
                raise StatsError(
                    f"bus fractions at {i!r} reference unknown bus types {sorted(unknown)}"
                )


def apply_defaults(stats: TrafficStats, graph: AugmentedGraph, default_speed: float = 8.0) -> TrafficStats:
    """Fill entries for trace-starved intersections and segments.

    Unobserved intersections get uniform turn fractions over their outgoing
    neighbors and zero contact probability; unobserved segments get zero
    density and the default speed. The returned stats have an empty missing
    set so the solver accepts them.
    """
    intersections = dict(stats.intersections)
    for i in graph.non_ap_ids():
        if i in intersections and i not in stats.missing:
            continue
        neighbors = graph.neighbors(i)
        if not neighbors:
            raise StatsError(f"intersection {i!r} has no outgoing segments to default onto")
        q = 1.0 / len(neighbors)
        intersections[i] = IntersectionStats(
            turn_fractions={j: q for j in neighbors},
            contact_probs={j: 0.0 for j in neighbors},
        )
    segments = dict(stats.segments)
    line_types_by_segment: dict[tuple[NodeId, NodeId], set[int]] = {}
    for line in graph.bus_lines:
        hops = list(zip(line.route, line.route[1:]))
        if line.cyclic:
            hops.append((line.route[-1], line.route[0]))
        for hop in hops:
            line_types_by_segment.setdefault(hop, set()).add(line.vtype)
    for key in graph.segments:
        seg = segments.get(key, SegmentStats(density=0.0, speed=default_speed))
        needed = line_types_by_segment.get(key, set())
        if needed - set(seg.bus_speeds):
            speeds = dict(seg.bus_speeds)
            for v in sorted(needed - set(seg.bus_speeds)):
                speeds[v] = seg.speed
            seg = replace(seg, bus_speeds=speeds)
        segments[key] = seg
    return replace(stats, intersections=intersections, segments=segments, missing=frozenset())


def collapse_bus_stats(stats: TrafficStats, graph: AugmentedGraph) -> TrafficStats:
    """Re-read the statistics as if every bus were an unpredictable vehicle.

    Bus arrival mass at each intersection folds into the turn fraction of
    the line's next stop there, and the contact probabilities combine as
    independent events. The result validates against the bus-less graph.
    """
    next_stop: dict[tuple[NodeId, int], NodeId] = {}
    for line in graph.bus_lines:
        route = list(line.route) + ([line.route[0]] if line.cyclic else [])
        for a, b in zip(route, route[1:]):
            next_stop.setdefault((a, line.vtype), b)
    intersections = {}
    for i, ist in stats.intersections.items():
        if not ist.bus_fractions:
            intersections[i] = ist
            continue
        turn = dict(ist.turn_fractions)
        contact = dict(ist.contact_probs)
        leftover = 0.0
        for v, frac in sorted(ist.bus_fractions.items()):
            j = next_stop.get((i, v))
            if j is None:
                leftover += frac  # line ends here: no heading to fold into
                continue
            turn[j] = turn.get(j, 0.0) + frac
            p_bus = ist.bus_contact_probs.get(v, 0.0)
            contact[j] = 1.0 - (1.0 - contact.get(j, 0.0)) * (1.0 - p_bus)
        if leftover > 0:
            scale = 1.0 / (1.0 - leftover)
            turn = {j: q * scale for j, q in turn.items()}
        intersections[i] = IntersectionStats(turn, contact, {}, {})
    return replace(stats, intersections=intersections)


# ---------------------------------------------------------------------------
# JSON serialization


def stats_to_dict(stats: TrafficStats) -> dict:
    def pairs(table):
        return [[k, table[k]] for k in sorted(table, key=repr)]

    return {
        "radio_range_m": stats.radio_range,
        "hop_delay_s": stats.hop_delay,
        "intersections": [
            {
                "id": i,
                "turn_fractions": pairs(s.turn_fractions),
                "contact_probs": pairs(s.contact_probs),
                "bus_fractions": pairs(s.bus_fractions),
                "bus_contact_probs": pairs(s.bus_contact_probs),
            }
            for i, s in sorted(stats.intersections.items(), key=lambda kv: repr(kv[0]))
        ],
        "segments": [
            {
                "from": frm,
                "to": to,
                "density": s.density,
                "speed": s.speed,
                "bus_speeds": pairs(s.bus_speeds),
            }
            for (frm, to), s in sorted(stats.segments.items(), key=lambda kv: repr(kv[0]))
        ],
        "missing": sorted(stats.missing, key=repr),
    }


def stats_from_dict(data: dict) -> TrafficStats:
    try:
        intersections = {
            entry["id"]: IntersectionStats(
                turn_fractions={k: float(v) for k, v in entry.get("turn_fractions", [])},
                contact_probs={k: float(v) for k, v in entry.get("contact_probs", [])},
                bus_fractions={int(k): float(v) for k, v in entry.get("bus_fractions", [])},
                bus_contact_probs={int(k): float(v) for k, v in entry.get("bus_contact_probs", [])},
            )
            for entry in data["intersections"]
        }
        segments = {
            (entry["from"], entry["to"]): SegmentStats(
                density=float(entry.get("density", 0.0)),
                speed=float(entry.get("speed", 8.0)),
                bus_speeds={int(k): float(v) for k, v in entry.get("bus_speeds", [])},
            )
            for entry in data["segments"]
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise StatsError(f"bad stats document: {exc}") from exc
    return TrafficStats(
        intersections=intersections,
        segments=segments,
        radio_range=float(data.get("radio_range_m", 150.0)),
        hop_delay=float(data.get("hop_delay_s", 0.004)),
        missing=frozenset(data.get("missing", [])),
    )


def load_stats(path, graph: AugmentedGraph | None = None) -> TrafficStats:
    """Load and validate statistics; with a graph, also check coverage."""
    with open(path) as fh:
        stats = stats_from_dict(json.load(fh))
    stats.validate(graph)
    return stats


def save_stats(stats: TrafficStats, path) -> None:
    with open(path, "w") as fh:
        json.dump(stats_to_dict(stats), fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Trace ingestion


def project_lat_lon(lat, lon, origin: tuple[float, float]) -> tuple:
    """Equirectangular projection to meters around (lat0, lon0).

    Good to <0.1% over city extents; not meant for anything larger.
    """
    lat0, lon0 = origin
    x = math.radians(lon - lon0) * EARTH_RADIUS_M * math.cos(math.radians(lat0))
    y = math.radians(lat - lat0) * EARTH_RADIUS_M
    return x, y


def load_traces(path, xy: bool = False, origin: tuple[float, float] | None = None,
                valid_types: set[int] | None = None) -> list[TraceRecord]:
    """Parse a trace CSV with header vehicle_id,vtype,timestamp,lat,lon.

    With xy=True the last two columns are pre-projected meters (header x,y).
    Lat/lon rows are projected around `origin`, defaulting to the trace
    centroid. Rows with a vtype outside valid_types fail naming the line.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise StatsError(f"{path}: empty trace file")
        expected = ["vehicle_id", "vtype", "timestamp"] + (["x", "y"] if xy else ["lat", "lon"])
        if [h.strip().lower() for h in header] != expected:
            raise StatsError(f"{path}: expected header {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vid, vtype, t, a, b = row[0], int(row[1]), float(row[2]), float(row[3]), float(row[4])
            except (ValueError, IndexError) as exc:
                raise StatsError(f"{path}:{lineno}: bad trace record: {exc}") from exc
            if vtype < 0 or (valid_types is not None and vtype not in valid_types):
                raise StatsError(f"{path}:{lineno}: unknown vehicle type {vtype}")
            rows.append((vid, vtype, t, a, b))
    if xy:
        return [TraceRecord(vid, vt, t, a, b) for vid, vt, t, a, b in rows]
    if origin is None:
        if not rows:
            return []
        origin = (
            sum(r[3] for r in rows) / len(rows),
            sum(r[4] for r in rows) / len(rows),
        )
    out = []
    for vid, vt, t, lat, lon in rows:
        x, y = project_lat_lon(lat, lon, origin)
        out.append(TraceRecord(vid, vt, t, x, y))
    return out


def save_traces(records, path, xy: bool = True) -> None:
    if not xy:
        raise StatsError("only pre-projected x,y traces can be written")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["vehicle_id", "vtype", "timestamp", "x", "y"])
        for r in records:
            writer.writerow([r.vehicle_id, r.vtype, repr(r.t), repr(r.x), repr(r.y)])


# ---------------------------------------------------------------------------
# Snapping


class _SegmentIndex:
    """Vectorized point-to-segment distances over all directed segments."""

    def __init__(self, graph: AugmentedGraph):
        keys = sorted(graph.segments, key=repr)
        self.segments = [graph.segments[k] for k in keys]
        ax = np.array([graph.position(s.frm)[0] for s in self.segments])
        ay = np.array([graph.position(s.frm)[1] for s in self.segments])
        bx = np.array([graph.position(s.to)[0] for s in self.segments])
        by = np.array([graph.position(s.to)[1] for s in self.segments])
        self.ax, self.ay = ax, ay
        self.dx, self.dy = bx - ax, by - ay
        self.norm2 = np.maximum(self.dx ** 2 + self.dy ** 2, 1e-12)

    def nearest(self, x: float, y: float) -> tuple[int, float, float]:
        """Index, squared distance and along-track offset of the best segment.

        Ties within 1e-9 m^2 (including the float dust between a road's two
        directions) resolve to the smaller (from, to) pair.
        """
        t = np.clip(((x - self.ax) * self.dx + (y - self.ay) * self.dy) / self.norm2, 0.0, 1.0)
        px = self.ax + t * self.dx - x
        py = self.ay + t * self.dy - y
        d2 = px ** 2 + py ** 2
        best = float(d2.min())
        candidates = np.nonzero(d2 <= best + 1e-9)[0]
        idx = min(candidates, key=lambda k: (self.segments[k].frm, self.segments[k].to))
        seg = self.segments[idx]
        return int(idx), float(d2[idx]), float(t[idx]) * seg.length


def snap(record: TraceRecord, graph: AugmentedGraph, threshold: float = 30.0,
         index: _SegmentIndex | None = None):
    """Nearest directed segment and along-track offset, or None beyond threshold."""
    if not graph.segments:
        return None
    if index is None:
        index = _SegmentIndex(graph)
    idx, d2, offset = index.nearest(record.x, record.y)
    if d2 > threshold * threshold:
        return None
    return index.segments[idx], offset


# ---------------------------------------------------------------------------
# Estimation from traces


@dataclass(frozen=True)
class EstimationConfig:
    dwell_window: float = 30.0  # tau in the Poisson contact model, seconds
    snap_radius: float = 30.0
    default_speed: float = 8.0
    radio_range: float = 150.0
    hop_delay: float = 0.004


class _Tally:
    """Associative count structures; merging two tallies is field-wise addition."""

    def __init__(self):
        self.arrivals: dict[NodeId, int] = {}
        # (intersection, vtype, next neighbor) -> count
        self.arrival_next: dict[tuple[NodeId, int, NodeId], int] = {}
        self.occupancy: dict[tuple[NodeId, NodeId], float] = {}
        self.distance: dict[tuple[NodeId, NodeId], float] = {}
        self.time: dict[tuple[NodeId, NodeId], float] = {}
        self.bus_distance: dict[tuple[NodeId, NodeId, int], float] = {}
        self.bus_time: dict[tuple[NodeId, NodeId, int], float] = {}

    @staticmethod
    def _add(table, key, amount):
        table[key] = table.get(key, 0 if isinstance(amount, int) else 0.0) + amount


def _oriented(graph, road: RoadSegment, off_a: float, off_b: float):
    """Resolve travel direction on a snapped road from the offset delta.

    Returns (directed segment, offsets measured from its tail) or None when
    the pair carries no direction information.
    """
    if off_b > off_a:
        return road, off_a, off_b
    if off_b < off_a:
        reverse = graph.segments.get((road.to, road.frm))
        if reverse is None:
            return None  # against a one-way road: GPS noise, drop the pair
        return reverse, road.length - off_a, road.length - off_b
    return None


def _track_events(graph: AugmentedGraph, samples: list, vtype: int, tally: _Tally) -> None:
    """Fold one vehicle's snapped samples into the tally.

    samples: list of (t, RoadSegment, offset). Consecutive samples either
    share a road (speed/occupancy information) or sit on two roads sharing
    one intersection (an arrival there, with the turning movement). Wider
    gaps break the track.
    """
    for (t1, road1, off1), (t2, road2, off2) in zip(samples, samples[1:]):
        dt = t2 - t1
        if dt <= 0:
            continue
        if {road1.frm, road1.to} == {road2.frm, road2.to}:
            # Same physical road; express both offsets in road1's frame.
            off2_local = off2 if road2 == road1 else road1.length - off2
            oriented = _oriented(graph, road1, off1, off2_local)
            if oriented is None:
                continue
            seg, a, b = oriented
            key = (seg.frm, seg.to)
            _Tally._add(tally.distance, key, b - a)
            _Tally._add(tally.time, key, dt)
            _Tally._add(tally.occupancy, key, dt)
            if vtype > 0:
                _Tally._add(tally.bus_distance, key + (vtype,), b - a)
                _Tally._add(tally.bus_time, key + (vtype,), dt)
            continue
        shared = {road1.frm, road1.to} & {road2.frm, road2.to}
        if len(shared) != 1:
            continue  # track break: more than one intersection between samples
        x = shared.pop()
        # Orient each road so the vehicle moves road1 -> x -> road2.
        in_seg = road1 if road1.to == x else graph.segments.get((road1.to, road1.frm))
        out_seg = road2 if road2.frm == x else graph.segments.get((road2.to, road2.frm))
        if in_seg is None or out_seg is None or in_seg.to != x or out_seg.frm != x:
            continue
        d_in = in_seg.length - (off1 if road1.to == x else road1.length - off1)
        d_out = off2 if road2.frm == x else road2.length - off2
        dist = d_in + d_out
        if dist <= 0:
            continue
        speed = dist / dt
        t_x = t1 + d_in / speed
        _Tally._add(tally.arrivals, x, 1)
        _Tally._add(tally.arrival_next, (x, vtype, out_seg.to), 1)
        for seg, dd, tt in ((in_seg, d_in, t_x - t1), (out_seg, d_out, t2 - t_x)):
            key = (seg.frm, seg.to)
            _Tally._add(tally.distance, key, dd)
            _Tally._add(tally.time, key, tt)
            _Tally._add(tally.occupancy, key, tt)
            if vtype > 0:
                _Tally._add(tally.bus_distance, key + (vtype,), dd)
                _Tally._add(tally.bus_time, key + (vtype,), tt)


def estimate_from_traces(records, graph: AugmentedGraph,
                         config: EstimationConfig = EstimationConfig()) -> TrafficStats:
    """Estimate the full statistics set from snapped GPS trace records.

    Arrivals at an intersection are detected as interpolated transitions
    between two roads sharing it (robust at 30 s sampling, where samples
    rarely fall inside the 30 m disk itself). Turn and bus fractions share
    the all-arrivals denominator; contact probabilities come from the
    Poisson model with the configured dwell window; densities are
    time-averaged occupancy over the observation span; speeds are total
    distance over total time.
    """
    if config.dwell_window <= 0:
        raise StatsError("dwell_window must be positive")
    records = list(records)
    if not records:
        raise StatsError("no trace records")
    index = _SegmentIndex(graph)
    per_vehicle: dict[str, list[TraceRecord]] = {}
    for r in records:
        per_vehicle.setdefault(r.vehicle_id, []).append(r)
    t_lo = min(r.t for r in records)
    t_hi = max(r.t for r in records)
    span = t_hi - t_lo
    if span <= 0:
        raise StatsError("trace observation span is empty")

    tally = _Tally()
    for vid in sorted(per_vehicle):
        recs = per_vehicle[vid]
        if any(b.t < a.t for a, b in zip(recs, recs[1:])):
            raise StatsError(f"timestamps for vehicle {vid} are not non-decreasing")
        vtype = recs[0].vtype
        snapped = []
        for r in recs:
            hit = snap(r, graph, config.snap_radius, index)
            if hit is None:
                if len(snapped) > 1:
                    _track_events(graph, snapped, vtype, tally)
                snapped = []
            else:
                snapped.append((r.t, hit[0], hit[1]))
        if len(snapped) > 1:
            _track_events(graph, snapped, vtype, tally)

    by_intersection: dict[NodeId, dict[tuple[int, NodeId], int]] = {}
    for (x, vt, j), count in tally.arrival_next.items():
        by_intersection.setdefault(x, {})[(vt, j)] = count

    intersections: dict[NodeId, IntersectionStats] = {}
    missing = []
    for i in graph.non_ap_ids():
        total = tally.arrivals.get(i, 0)
        if total == 0:
            missing.append(i)
            continue
        # Bus types with no outgoing shortcut here (route terminals, or a
        # graph solved without bus edges) act as plain vehicles heading to
        # their next neighbor, keeping the fractions summing to one against
        # the candidate structure the solver will build.
        shortcut_types = {e.vtype for e in graph.out_edges(i) if e.vtype > 0}
        turn_counts: dict[NodeId, int] = {}
        bus_counts: dict[int, int] = {}
        for (vt, j), count in by_intersection.get(i, {}).items():
            if vt > 0 and vt in shortcut_types:
                bus_counts[vt] = bus_counts.get(vt, 0) + count
            else:
                turn_counts[j] = turn_counts.get(j, 0) + count
        turn, contact, bus_frac, bus_contact = {}, {}, {}, {}
        for j in graph.neighbors(i):
            count = turn_counts.get(j, 0)
            if count:
                turn[j] = count / total
            contact[j] = 1.0 - math.exp(-(count / span) * config.dwell_window)
        for vt in sorted(bus_counts):
            bus_frac[vt] = bus_counts[vt] / total
            bus_contact[vt] = 1.0 - math.exp(-(bus_counts[vt] / span) * config.dwell_window)
        intersections[i] = IntersectionStats(turn, contact, bus_frac, bus_contact)

    line_types_by_segment: dict[tuple[NodeId, NodeId], list[int]] = {}
    for line in graph.bus_lines:
        hops = list(zip(line.route, line.route[1:]))
        if line.cyclic:
            hops.append((line.route[-1], line.route[0]))
        for hop in hops:
            line_types_by_segment.setdefault(hop, []).append(line.vtype)

    segments: dict[tuple[NodeId, NodeId], SegmentStats] = {}
    for key, seg in graph.segments.items():
        occ = tally.occupancy.get(key, 0.0)
        density = occ / span / seg.length
        dist, time = tally.distance.get(key, 0.0), tally.time.get(key, 0.0)
        speed = dist / time if time > 0 and dist > 0 else config.default_speed
        bus_speeds = {}
        for v in line_types_by_segment.get(key, []):
            bd = tally.bus_distance.get(key + (v,), 0.0)
            bt = tally.bus_time.get(key + (v,), 0.0)
            bus_speeds[v] = bd / bt if bt > 0 and bd > 0 else speed
        segments[key] = SegmentStats(density=density, speed=speed, bus_speeds=bus_speeds)

    stats = TrafficStats(
        intersections=intersections,
        segments=segments,
        radio_range=config.radio_range,
        hop_delay=config.hop_delay,
        missing=frozenset(missing),
    )
    stats.validate(graph)
    return stats
