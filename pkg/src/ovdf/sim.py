"""Deterministic discrete-event simulator of the vehicular sensor network.

World model: vehicles move along directed road segments (synthetic mobility
sampled from the traffic statistics, or replayed GPS itineraries), generate
sensing packets by distance/time/intersection rules, detect each other and
the APs with 1 s beacons over a closed-ball unit-disk radio, and hand
packets over according to the selected protocol. Any AP is a valid
destination; delivery happens on AP contact. Instead of a PHY/MAC stack,
every node has a per-second packet transfer budget, so congestion shows up
as budget exhaustion.

Determinism contract: one (scenario, protocol, seed) tuple always produces
the same result, bit for bit. Every vehicle owns its own seeded RNG stream,
all iteration orders are explicit, and event-queue ties break on
(time, kind rank, entity id, sequence number).

Protocols:
  ovdf-p / ovdf-u  table-driven priority forwarding (the tables differ,
                   the mechanics do not): at intersections scan the priority
                   list for an available option (a contact departing onto
                   the edge, a bus covering the shortcut, or the holder
                   itself); on plain segments forward to a contact on the
                   same segment strictly closer to its head; on bus
                   shortcuts the bus carries with no forwarding until the
                   shortcut head.
  gpsr             greedy geographic anycast with carry-on-failure.
  epidemic         anti-entropy flooding with AP-side delivery acks,
                   drop-oldest buffers, no sender-side deletion.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .roadgraph import AugmentedGraph, NodeId, RoadSegment, graph_to_dict, load_graph
from .solver import Policy
from .traffic import (
    TraceRecord,
    TrafficStats,
    _SegmentIndex,
    _oriented,
    load_stats,
    load_traces,
    snap,
    stats_to_dict,
)

PROTOCOLS = ("ovdf-p", "ovdf-u", "gpsr", "epidemic")

ARRIVAL, GENERATION, BEACON = 0, 1, 2  # event kind ranks


class SimulationError(RuntimeError):
    pass


@dataclass
class Scenario:
    graph: AugmentedGraph
    stats: TrafficStats
    mobility: str = "synthetic"  # "synthetic" | "trace"
    trace_records: list | None = None
    n_vehicles: int = 20  # effective in-area vehicle target, buses included
    bus_counts: dict[int, int] = field(default_factory=dict)  # vtype -> bus count
    radio_range: float = 150.0
    beacon_period: float = 1.0
    hop_delay: float = 0.004
    packet_size: int = 512
    deadline: float = 600.0
    sim_duration: float = 3600.0
    seed: int | None = None
    buffer_capacity: int = 5000
    transfer_budget: int = 250  # packets per node per second
    dwell_radius: float = 30.0
    gen_distance: float = 100.0
    gen_interval: float = 30.0
    # Greedy geographic forwarding between intersections. The paper-style
    # baseline decides at intersections and otherwise buffers; the
    # continuous variant forwards to any closer contact anywhere.
    gpsr_midedge: bool = True
    content_hash: str = ""

    def type0_count(self) -> int:
        n = self.n_vehicles - sum(self.bus_counts.values())
        if n < 0:
            raise SimulationError("bus_counts exceed n_vehicles")
        return n


@dataclass
class PacketRecord:
    id: int
    origin_x: float
    origin_y: float
    created_at: float
    delivered_at: float | None = None
    hops: int = 0
    dropped: bool = False


@dataclass
class SimResult:
    """Raw per-packet outcomes plus the run's identifying metadata."""

    protocol: str
    seed: int
    deadline: float
    sim_duration: float
    content_hash: str
    packets: list[PacketRecord] = field(default_factory=list)
    transfers: int = 0
    generated: int = 0

    def counted(self) -> list:
        """Packets whose full deadline window fits inside the run.

        Packets created in the last `deadline` seconds never had a fair
        chance and are excluded from every ratio, uniformly across
        protocols.
        """
        cutoff = self.sim_duration - self.deadline
        return [p for p in self.packets if p.created_at <= cutoff]

    def delivery_ratio(self) -> float:
        counted = self.counted()
        if not counted:
            return 0.0
        ok = sum(
            1
            for p in counted
            if p.delivered_at is not None and p.delivered_at - p.created_at <= self.deadline
        )
        return ok / len(counted)


class _Packet:
    __slots__ = ("id", "created_at", "origin", "hops", "lock_target", "received_tick")

    def __init__(self, pid, created_at, origin):
        self.id = pid
        self.created_at = created_at
        self.origin = origin
        self.hops = 0
        self.lock_target = None  # bus-carry: no forwarding until this intersection
        self.received_tick = -1.0


class Vehicle:
    """A vehicle on a directed segment: position is tail + speed * elapsed."""

    def __init__(self, vid, vtype, rng):
        self.id = vid
        self.vtype = vtype
        self.rng = rng
        self.seg: RoadSegment | None = None
        self.t0 = 0.0
        self.off0 = 0.0
        self.speed = 0.0
        self.active = True
        self.route: tuple[NodeId, ...] | None = None
        self.cyclic = False
        self.cursor: int | None = 0  # route hop being driven; None in trace replay
        self.buffer: dict[int, _Packet] = {}
        self.seen: set[int] = set()  # epidemic summary vector, ids ever held
        self.odometer = 0.0  # at t0
        self.odo_last_gen = 0.0
        self.t_last_gen = 0.0
        self.gen_epoch = 0
        self.spans = None  # trace mode: list of (t0, t1, seg, off0, speed)
        self.span_idx = 0

    def offset(self, t: float) -> float:
        off = self.off0 + self.speed * (t - self.t0)
        return min(off, self.seg.length)

    def position(self, t, graph) -> tuple[float, float]:
        ax, ay = graph.position(self.seg.frm)
        bx, by = graph.position(self.seg.to)
        f = self.offset(t) / self.seg.length
        return (ax + (bx - ax) * f, ay + (by - ay) * f)

    def odometer_at(self, t: float) -> float:
        return self.odometer + self.speed * (t - self.t0)

    def at_intersection(self, t, dwell) -> NodeId | None:
        """The segment tail while within the dwell disk just after departing it."""
        if self.offset(t) <= min(dwell, self.seg.length / 2.0):
            return self.seg.frm
        return None

    def moving_onto(self, seg_key) -> bool:
        """Currently driving that directed segment (radio range bounds how
        far along it a contact can actually be)."""
        return self.seg is not None and (self.seg.frm, self.seg.to) == seg_key

    def future_stops(self) -> list[NodeId]:
        """Intersections this bus will reach, in order, from its current hop."""
        route, r = self.route, self.cursor
        n = len(route)
        if self.cyclic:
            return [route[(r + k) % n] for k in range(1, n + 1)]
        return list(route[r + 1 :])

    def will_visit_after(self, x: NodeId, j: NodeId) -> bool:
        """Whether this bus, currently near x, later reaches j."""
        if self.cursor is None:  # trace replay: consult the line pattern
            if self.cyclic:
                return x in self.route and j in self.route
            try:
                a = self.route.index(x)
            except ValueError:
                return False
            return j in self.route[a + 1 :]
        stops = self.future_stops()
        if self.seg is not None and self.seg.frm == x:
            return j in stops
        try:
            a = stops.index(x)
        except ValueError:
            return False
        return j in stops[a + 1 :]


class World:
    def __init__(self, scenario: Scenario, protocol: str, routing_table: Policy | None,
                 seed: int | None = None):
        protocol = protocol.lower()
        if protocol not in PROTOCOLS:
            raise SimulationError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
        if protocol.startswith("ovdf") and routing_table is None:
            raise SimulationError(f"protocol {protocol} requires a routing table")
        self.sc = scenario
        self.graph = scenario.graph
        self.protocol = protocol
        self.table = routing_table
        self.seed = scenario.seed if seed is None else seed
        if self.seed is None:
            raise SimulationError("a seed is required")
        self.dwell = scenario.dwell_radius
        self.budget_per_tick = max(1, int(round(scenario.transfer_budget * scenario.beacon_period)))
        self.ap_list = sorted(self.graph.ap_ids, key=repr)
        if not self.ap_list:
            raise SimulationError("scenario has no AP intersections")
        self.ap_xy = np.array([self.graph.position(i) for i in self.ap_list])
        self.events: list = []
        self.eseq = itertools.count()
        self.result = SimResult(
            protocol=protocol,
            seed=self.seed,
            deadline=scenario.deadline,
            sim_duration=scenario.sim_duration,
            content_hash=scenario.content_hash,
        )
        self.pid = itertools.count()
        self.delivered_ids: set[int] = set()  # AP-side ack ledger (epidemic purge)
        self.single_copy = protocol != "epidemic"
        self.vehicles: list[Vehicle] = []
        if scenario.mobility == "synthetic":
            self._init_synthetic()
        elif scenario.mobility == "trace":
            self._init_trace()
        else:
            raise SimulationError(f"unknown mobility mode {scenario.mobility!r}")

    # -- setup -----------------------------------------------------------------

    def _vehicle_rng(self, vid: int):
        return np.random.default_rng([self.seed, vid])

    def _init_synthetic(self):
        sc = self.sc
        if not self.graph.segments:
            raise SimulationError("graph has no segments to drive on")
        segs = [self.graph.segments[k] for k in sorted(self.graph.segments, key=repr)]
        vid = 0
        for _ in range(sc.type0_count()):
            v = Vehicle(vid, 0, self._vehicle_rng(vid))
            seg = segs[int(v.rng.integers(len(segs)))]
            self._enter_segment(v, seg, 0.0, float(v.rng.uniform(0.0, seg.length)))
            self.vehicles.append(v)
            vid += 1
        lines = {line.vtype: line for line in self.graph.bus_lines}
        for vtype in sorted(sc.bus_counts):
            line = lines.get(vtype)
            if line is None:
                raise SimulationError(f"scenario requests buses of unknown line {vtype}")
            count = sc.bus_counts[vtype]
            hops = len(line.route) - (0 if line.cyclic else 1)
            for b in range(count):
                v = Vehicle(vid, vtype, self._vehicle_rng(vid))
                v.route, v.cyclic = line.route, line.cyclic
                v.cursor = (b * hops) // count
                self._enter_segment(v, self._route_segment(v, v.cursor), 0.0, 0.0)
                self.vehicles.append(v)
                vid += 1
        for v in self.vehicles:
            self._schedule_generation(v, 0.0)

    def _init_trace(self):
        sc = self.sc
        if not sc.trace_records:
            raise SimulationError("trace mobility needs trace_records")
        t_max = max(r.t for r in sc.trace_records)
        if t_max < sc.sim_duration:
            raise SimulationError(
                f"trace covers {t_max:.0f} s but the simulation needs {sc.sim_duration:.0f} s"
            )
        index = _SegmentIndex(self.graph)
        per_vehicle: dict[str, list[TraceRecord]] = {}
        for r in sc.trace_records:
            per_vehicle.setdefault(r.vehicle_id, []).append(r)
        lines = {line.vtype: line for line in self.graph.bus_lines}
        vid = 0
        for key in sorted(per_vehicle):
            recs = per_vehicle[key]
            spans = _trace_spans(self.graph, index, recs, self.sc)
            if not spans:
                continue
            v = Vehicle(vid, recs[0].vtype, self._vehicle_rng(vid))
            v.spans = spans
            v.active = False
            v.cursor = None
            line = lines.get(v.vtype)
            if line is not None:
                v.route, v.cyclic = line.route, line.cyclic
            self.vehicles.append(v)
            self._push(spans[0][0], ARRIVAL, vid)
            vid += 1
        if not self.vehicles:
            raise SimulationError("no trace vehicle could be matched to the graph")

    def _route_segment(self, v: Vehicle, hop: int) -> RoadSegment:
        route = v.route
        frm = route[hop % len(route)]
        to = route[(hop + 1) % len(route)]
        return self.graph.segments[(frm, to)]

    def _segment_speed(self, seg: RoadSegment, vtype: int) -> float:
        st = self.sc.stats.segment((seg.frm, seg.to))
        if vtype > 0:
            return st.bus_speeds.get(vtype, st.speed)
        return st.speed

    def _enter_segment(self, v: Vehicle, seg: RoadSegment, t: float, off: float = 0.0):
        v.odometer = v.odometer_at(t) if v.seg is not None else 0.0
        v.seg = seg
        v.t0 = t
        v.off0 = off
        v.speed = self._segment_speed(seg, v.vtype)
        self._push(t + (seg.length - off) / v.speed, ARRIVAL, v.id)

    # -- events ------------------------------------------------------------------

    def _push(self, t, kind, entity):
        heapq.heappush(self.events, (t, kind, entity, next(self.eseq)))

    def _schedule_generation(self, v: Vehicle, now: float):
        """Queue the earliest distance/time rule firing from the current state."""
        v.gen_epoch += 1
        t_time = v.t_last_gen + self.sc.gen_interval
        t_dist = math.inf
        if v.speed > 0 and v.seg is not None:
            needed = self.sc.gen_distance - (v.odometer_at(now) - v.odo_last_gen)
            t_dist = now + max(needed, 0.0) / v.speed
        t_fire = min(t_time, t_dist)
        if t_fire <= self.sc.sim_duration:
            heapq.heappush(self.events, (t_fire, GENERATION, v.id, next(self.eseq), v.gen_epoch))

    def run(self) -> SimResult:
        sc = self.sc
        n_ticks = int(math.floor(sc.sim_duration / sc.beacon_period))
        for k in range(n_ticks + 1):
            self._push(k * sc.beacon_period, BEACON, -1)
        while self.events:
            item = heapq.heappop(self.events)
            t, kind, entity = item[0], item[1], item[2]
            if t > sc.sim_duration:
                break
            if kind == ARRIVAL:
                self._handle_arrival(t, self.vehicles[entity])
            elif kind == GENERATION:
                v = self.vehicles[entity]
                if item[4] == v.gen_epoch and v.active:
                    self._generate(v, t)
                    self._schedule_generation(v, t)
            elif kind == BEACON:
                self._beacon(t)
        return self.result

    def _handle_arrival(self, t: float, v: Vehicle):
        if v.spans is not None:
            self._advance_trace_vehicle(t, v)
            return
        reached = v.seg.to
        for p in v.buffer.values():
            if p.lock_target == reached:
                p.lock_target = None
        if v.route is not None:
            self._advance_bus(t, v)
        else:
            self._advance_type0(t, v, reached)
        # Reaching an intersection generates unconditionally (rule 3).
        self._generate(v, t)
        self._schedule_generation(v, t)

    def _advance_bus(self, t, v):
        hops = len(v.route) - (0 if v.cyclic else 1)
        v.cursor += 1
        if v.cursor >= hops:
            # Cyclic lines loop; a finished acyclic line re-enters at its
            # start (a fresh run), keeping the in-area population constant.
            v.cursor = 0
            if not v.cyclic:
                for p in v.buffer.values():
                    p.lock_target = None
        self._enter_segment(v, self._route_segment(v, v.cursor), t)

    def _advance_type0(self, t, v, reached):
        choices = self.graph.neighbors(reached)
        if not choices:
            raise SimulationError(f"vehicle {v.id} reached dead-end intersection {reached!r}")
        ist = self.sc.stats.intersections.get(reached)
        weights = None
        if ist is not None:
            raw = [ist.turn_fractions.get(j, 0.0) for j in choices]
            total = sum(raw)
            if total > 0:
                weights = [x / total for x in raw]
        if weights is None:
            weights = [1.0 / len(choices)] * len(choices)
        j = choices[int(v.rng.choice(len(choices), p=weights))]
        self._enter_segment(v, self.graph.segments[(reached, j)], t)

    def _advance_trace_vehicle(self, t, v):
        spans = v.spans
        while v.span_idx < len(spans) and spans[v.span_idx][1] <= t:
            v.span_idx += 1
        if v.span_idx >= len(spans):
            v.active = False
            return
        t0, t1, seg, off0, speed = spans[v.span_idx]
        if t < t0:
            v.active = False
            self._push(t0, ARRIVAL, v.id)
            return
        was_active = v.active
        crossing = was_active and v.seg is not None and seg.frm == v.seg.to and off0 == 0.0
        if was_active and v.seg is not None:
            v.odometer = v.odometer_at(t)
        v.active = True
        v.seg, v.t0, v.off0, v.speed = seg, t0, off0, speed
        for p in v.buffer.values():
            if p.lock_target == seg.frm:
                p.lock_target = None
        self._push(t1, ARRIVAL, v.id)
        if not was_active:
            v.t_last_gen = t
            v.odo_last_gen = v.odometer_at(t)
        if crossing:
            self._generate(v, t)
        self._schedule_generation(v, t)

    # -- packets -----------------------------------------------------------------

    def _generate(self, v: Vehicle, t: float):
        pos = v.position(t, self.graph)
        record = PacketRecord(next(self.pid), pos[0], pos[1], t)
        self.result.packets.append(record)
        self.result.generated += 1
        v.t_last_gen = t
        v.odo_last_gen = v.odometer_at(t)
        if len(v.buffer) >= self.sc.buffer_capacity:
            if self.single_copy:
                record.dropped = True  # refuse generation beyond capacity
                return
            probe = _Packet(record.id, t, pos)
            if not self._evict_for(v, probe):
                record.dropped = True
                return
        packet = _Packet(record.id, t, pos)
        v.buffer[packet.id] = packet
        v.seen.add(packet.id)
        # A fresh packet inside AP radio range is delivered on the spot.
        if self._nearest_ap_distance(pos) <= self.sc.radio_range:
            self._deliver(v, packet, t)

    def _evict_for(self, v: Vehicle, incoming: _Packet) -> bool:
        """Epidemic drop-oldest: admit the incoming copy only over an older one."""
        oldest = min(v.buffer.values(), key=lambda p: (p.created_at, p.id))
        if (oldest.created_at, oldest.id) < (incoming.created_at, incoming.id):
            del v.buffer[oldest.id]
            return True
        return False

    def _nearest_ap_distance(self, pos) -> float:
        d = self.ap_xy - np.array(pos)
        return float(np.sqrt((d * d).sum(axis=1)).min())

    def _nearest_ap_key(self, pos):
        """(distance, ap id) of the nearest AP; equidistant APs tie on id."""
        d = self.ap_xy - np.array(pos)
        dist = np.sqrt((d * d).sum(axis=1))
        best = min(range(len(self.ap_list)), key=lambda k: (dist[k], repr(self.ap_list[k])))
        return float(dist[best]), self.ap_list[best]

    def _deliver(self, v: Vehicle, packet: _Packet, t: float):
        record = self.result.packets[packet.id]
        if record.delivered_at is None:
            record.delivered_at = t + self.sc.hop_delay
            record.hops = packet.hops + 1
        self.delivered_ids.add(packet.id)
        del v.buffer[packet.id]

    # -- beacon tick ---------------------------------------------------------------

    def _beacon(self, t: float):
        active = [v for v in self.vehicles if v.active]
        if not active:
            return
        n = len(active)
        xs = np.empty(n + len(self.ap_list))
        ys = np.empty(n + len(self.ap_list))
        for k, v in enumerate(active):
            xs[k], ys[k] = v.position(t, self.graph)
        xs[n:] = self.ap_xy[:, 0]
        ys[n:] = self.ap_xy[:, 1]
        pairs = kernels.contact_pairs(xs, ys, self.sc.radio_range)
        contacts: dict[int, list[Vehicle]] = {v.id: [] for v in active}
        ap_contacts: dict[int, list[int]] = {v.id: [] for v in active}
        degree = [0] * (n + len(self.ap_list))
        for a, b in pairs:
            degree[a] += 1
            degree[b] += 1
            if b < n:
                contacts[active[a].id].append(active[b])
                contacts[active[b].id].append(active[a])
            elif a < n:
                ap_contacts[active[a].id].append(b - n)
        # Airtime sharing: a node's per-tick packet budget is split across
        # its radio neighborhood, and a transfer draws from both endpoints'
        # pools. This is what makes flooding congest at high density.
        pool = {
            v.id: max(1, self.budget_per_tick // (1 + degree[k]))
            for k, v in enumerate(active)
        }
        ap_pool = {
            k: max(1, self.budget_per_tick // (1 + degree[n + k]))
            for k in range(len(self.ap_list))
        }

        # Phase 1: deliveries. Any holder in AP range flushes, oldest first.
        for v in active:
            aps = ap_contacts[v.id]
            if not aps or not v.buffer:
                continue
            for packet in sorted(v.buffer.values(), key=lambda p: (p.created_at, p.id)):
                if pool[v.id] <= 0:
                    break
                if packet.received_tick == t:
                    continue
                slot = next((k for k in aps if ap_pool[k] > 0), None)
                if slot is None:
                    break
                ap_pool[slot] -= 1
                pool[v.id] -= 1
                self.result.transfers += 1
                self._deliver(v, packet, t)
            if not self.single_copy:
                # Delivery ack flush: drop copies the APs already collected.
                for pid in [p for p in v.buffer if p in self.delivered_ids]:
                    del v.buffer[pid]

        # Phase 2: forwarding decisions, holders in id order.
        if self.protocol == "epidemic":
            for a, b in pairs:
                if b >= n:
                    continue
                self._epidemic_exchange(t, active[a], active[b], pool)
                self._epidemic_exchange(t, active[b], active[a], pool)
        else:
            for v in active:
                if v.buffer:
                    self._forward_tick(t, v, contacts[v.id], pool)

    # -- single-copy forwarding ------------------------------------------------------

    def _forward_tick(self, t, v, neighbors, pool):
        packets = [
            p for p in v.buffer.values() if p.lock_target is None and p.received_tick < t
        ]
        if not packets:
            return
        # The intersection rule applies around the junction: through the
        # dwell disk after departing it, and on approach once the junction
        # area is within radio reach.
        x = v.at_intersection(t, self.dwell)
        if x is None and v.seg is not None:
            off = v.offset(t)
            approach = min(self.sc.radio_range / 2.0, v.seg.length / 2.0)
            if off >= v.seg.length - approach:
                x = v.seg.to
        ovdf = self.protocol in ("ovdf-p", "ovdf-u")
        if x is not None and x not in self.graph.ap_ids:
            if ovdf:
                self._ovdf_at_intersection(t, v, x, neighbors, packets, pool)
            else:
                self._gpsr_at_intersection(t, v, x, neighbors, packets, pool)
        elif ovdf:
            self._ovdf_on_edge(t, v, neighbors, packets, pool)
        elif self.sc.gpsr_midedge:
            self._gpsr_on_edge(t, v, neighbors, packets, pool)

    def _bus_available_at(self, t, u: Vehicle, x, j, vtype) -> bool:
        """A type-vtype bus on a segment touching x that will pass j.

        Radio contact (checked by the caller's neighbor set) bounds how far
        from x the bus can really be.
        """
        if u.vtype != vtype or u.route is None or u.seg is None:
            return False
        if x not in (u.seg.frm, u.seg.to):
            return False
        return u.will_visit_after(x, j)

    def _scan_priorities(self, t, v, x, neighbors, edges):
        """First edge of the priority list with an available way onto it.

        Returns (edge, target) where target None means the holder itself
        moves onto the edge (keep / bus self-carry). The holder is preferred
        over contacts; among contacts the lowest id wins.
        """
        for edge in edges:
            if edge.vtype == 0:
                if v.moving_onto((x, edge.to)):
                    return edge, None
                best = None
                for u in neighbors:
                    if u.moving_onto((x, edge.to)):
                        if best is None or u.id < best.id:
                            best = u
                if best is not None:
                    return edge, best
            else:
                if self._bus_available_at(t, v, x, edge.to, edge.vtype):
                    return edge, None  # the holder is the bus: carry
                best = None
                for u in neighbors:
                    if self._bus_available_at(t, u, x, edge.to, edge.vtype):
                        if best is None or u.id < best.id:
                            best = u
                if best is not None:
                    return edge, best
        return None, None

    def _ovdf_at_intersection(self, t, v, x, neighbors, packets, pool):
        decision = self.table.get(x)
        if decision is None:
            return
        edge, target = self._scan_priorities(t, v, x, neighbors, decision.prioritized())
        if edge is None:
            return
        if target is None:
            if edge.vtype > 0:
                for p in packets:
                    p.lock_target = edge.to  # self-carry over the shortcut
            return
        lock = edge.to if edge.vtype > 0 else None
        self._transfer(t, v, target, packets, pool, lock)

    def _ovdf_on_edge(self, t, v, neighbors, packets, pool):
        best = None
        my_off = v.offset(t)
        key = (v.seg.frm, v.seg.to)
        for u in neighbors:
            if u.seg is not None and (u.seg.frm, u.seg.to) == key:
                off = u.offset(t)
                if off > my_off and (best is None or (-off, u.id) < best[0]):
                    best = ((-off, u.id), u)
        if best is not None:
            self._transfer(t, v, best[1], packets, pool, None)

    def _gpsr_at_intersection(self, t, v, x, neighbors, packets, pool):
        ranked = sorted(
            self.graph.neighbors(x),
            key=lambda j: (self._nearest_ap_key(self.graph.position(j)), repr(j)),
        )
        edges = [self.graph.edge(x, j, 0) for j in ranked]
        edge, target = self._scan_priorities(t, v, x, neighbors, edges)
        if edge is None or target is None:
            return
        self._transfer(t, v, target, packets, pool, None)

    def _gpsr_on_edge(self, t, v, neighbors, packets, pool):
        my_dist = self._nearest_ap_distance(v.position(t, self.graph))
        best = None
        for u in neighbors:
            dist = self._nearest_ap_distance(u.position(t, self.graph))
            if dist < my_dist and (best is None or (dist, u.id) < best[0]):
                best = ((dist, u.id), u)
        if best is not None:
            self._transfer(t, v, best[1], packets, pool, None)

    def _transfer(self, t, sender, receiver, packets, pool, lock):
        for packet in sorted(packets, key=lambda p: (p.created_at, p.id)):
            if pool[sender.id] <= 0 or pool[receiver.id] <= 0:
                break
            if len(receiver.buffer) >= self.sc.buffer_capacity:
                break
            pool[sender.id] -= 1
            pool[receiver.id] -= 1
            del sender.buffer[packet.id]
            packet.hops += 1
            packet.received_tick = t
            packet.lock_target = lock
            receiver.buffer[packet.id] = packet
            self.result.transfers += 1

    # -- epidemic ----------------------------------------------------------------

    def _epidemic_exchange(self, t, src, dst, pool):
        missing = [
            p
            for pid, p in src.buffer.items()
            if pid not in dst.seen and pid not in self.delivered_ids and p.received_tick < t
        ]
        for packet in sorted(missing, key=lambda p: (p.created_at, p.id)):
            if pool[src.id] <= 0 or pool[dst.id] <= 0:
                break
            copy = _Packet(packet.id, packet.created_at, packet.origin)
            copy.hops = packet.hops + 1
            copy.received_tick = t
            if len(dst.buffer) >= self.sc.buffer_capacity:
                if not self._evict_for(dst, copy):
                    continue
            pool[src.id] -= 1
            pool[dst.id] -= 1
            dst.buffer[copy.id] = copy
            dst.seen.add(copy.id)
            self.result.transfers += 1


def _trace_spans(graph, index, recs, sc):
    """Snap one vehicle's records into drivable (t0, t1, segment, off0, speed) spans."""
    snapped = []
    for r in recs:
        hit = snap(r, graph, sc.dwell_radius, index)
        snapped.append((r.t, hit[0], hit[1]) if hit else None)
    spans = []
    for s1, s2 in zip(snapped, snapped[1:]):
        if s1 is None or s2 is None:
            continue
        (t1, road1, off1), (t2, road2, off2) = s1, s2
        if t2 <= t1:
            continue
        if {road1.frm, road1.to} == {road2.frm, road2.to}:
            off2_local = off2 if road2 == road1 else road1.length - off2
            oriented = _oriented(graph, road1, off1, off2_local)
            if oriented is None:
                continue
            seg, a, b = oriented
            spans.append((t1, t2, seg, a, (b - a) / (t2 - t1)))
            continue
        shared = {road1.frm, road1.to} & {road2.frm, road2.to}
        if len(shared) != 1:
            continue
        x = shared.pop()
        in_seg = road1 if road1.to == x else graph.segments.get((road1.to, road1.frm))
        out_seg = road2 if road2.frm == x else graph.segments.get((road2.to, road2.frm))
        if in_seg is None or out_seg is None or in_seg.to != x or out_seg.frm != x:
            continue
        d_in = in_seg.length - (off1 if road1.to == x else road1.length - off1)
        d_out = off2 if road2.frm == x else road2.length - off2
        if d_in + d_out <= 0:
            continue
        speed = (d_in + d_out) / (t2 - t1)
        t_x = t1 + d_in / speed
        if d_in > 0:
            spans.append((t1, t_x, in_seg, in_seg.length - d_in, speed))
        if d_out > 0:
            spans.append((t_x, t2, out_seg, 0.0, speed))
    return spans


def run(scenario: Scenario, protocol: str, routing_table: Policy | None = None,
        seed: int | None = None) -> SimResult:
    """Simulate one (scenario, protocol, seed) run and return its raw result."""
    return World(scenario, protocol, routing_table, seed).run()


def scenario_hash(graph: AugmentedGraph, stats: TrafficStats) -> str:
    """Content fingerprint binding metrics files to their scenario inputs."""
    blob = json.dumps(
        {"graph": graph_to_dict(graph), "stats": stats_to_dict(stats)},
        sort_keys=True,
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


_SCENARIO_FIELDS = [
    ("n_vehicles", "n_vehicles"),
    ("bus_counts", "bus_counts"),
    ("radio_range_m", "radio_range"),
    ("beacon_period_s", "beacon_period"),
    ("hop_delay_s", "hop_delay"),
    ("packet_size_b", "packet_size"),
    ("deadline_s", "deadline"),
    ("sim_duration_s", "sim_duration"),
    ("seed", "seed"),
    ("buffer_capacity", "buffer_capacity"),
    ("transfer_budget_pps", "transfer_budget"),
    ("dwell_radius_m", "dwell_radius"),
    ("gen_distance_m", "gen_distance"),
    ("gen_interval_s", "gen_interval"),
    ("gpsr_midedge", "gpsr_midedge"),
]


def save_scenario(scenario: Scenario, path, graph_path, stats_path, trace_path=None) -> None:
    """Write the scenario file, referencing graph/stats (and trace) files."""
    data = {
        "graph": str(graph_path),
        "stats": str(stats_path),
        "mobility": scenario.mobility,
        "content_hash": scenario.content_hash,
    }
    if trace_path is not None:
        data["trace"] = str(trace_path)
    for key, attr in _SCENARIO_FIELDS:
        data[key] = getattr(scenario, attr)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)
        fh.write("\n")


def load_scenario(path) -> Scenario:
    """Load a scenario file; relative graph/stats/trace paths resolve next to it."""
    path = Path(path)
    with open(path) as fh:
        data = json.load(fh)
    base = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    graph = load_graph(resolve(data["graph"]))
    stats = load_stats(resolve(data["stats"]), graph)
    fingerprint = scenario_hash(graph, stats)
    stored = data.get("content_hash", "")
    if stored and stored != fingerprint:
        raise SimulationError(
            f"scenario hash mismatch: file says {stored}, graph+stats give {fingerprint}"
        )
    scenario = Scenario(
        graph=graph,
        stats=stats,
        mobility=data.get("mobility", "synthetic"),
        content_hash=fingerprint,
    )
    for key, attr in _SCENARIO_FIELDS:
        if key in data and data[key] is not None:
            value = data[key]
            if attr == "bus_counts":
                value = {int(k): int(v) for k, v in value.items()}
            setattr(scenario, attr, value)
    if "trace" in data:
        scenario.trace_records = load_traces(resolve(data["trace"]), xy=True)
    return scenario


def simulate_mobility(scenario: Scenario, sample_period: float = 10.0,
                      seed: int | None = None) -> list[TraceRecord]:
    """Run only the mobility model and emit position records on a fixed cadence.

    This is how synthetic scenarios produce the calibration traces that
    estimate_from_traces turns into solver statistics.
    """
    world = World(scenario, "gpsr", None, seed)
    records = []
    t = 0.0
    while t <= scenario.sim_duration:
        while world.events and world.events[0][0] <= t:
            item = heapq.heappop(world.events)
            if item[1] == ARRIVAL:
                world._handle_arrival(item[0], world.vehicles[item[2]])
        for v in world.vehicles:
            if v.active:
                x, y = v.position(t, world.graph)
                records.append(TraceRecord(f"v{v.id:04d}", v.vtype, t, x, y))
        t += sample_period
    return records
