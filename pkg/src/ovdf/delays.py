"""Expected packet delay on every edge of the augmented graph.

Road segment edges mix two transport modes: multi-hop wireless relay when
other vehicles are within radio range on the segment, and physical carry by
the holder otherwise. Bus shortcut edges are pure carry at the bus speed
over the member segments, including single-segment shortcuts (the parallel
type 0 edge already represents the relay option on that road).
"""

from __future__ import annotations

import math

from .roadgraph import AugmentedEdge, AugmentedGraph

EdgeKey = tuple  # (frm, to, vtype)


class DelayError(ValueError):
    """Delay model input outside its domain."""


def v2v_delay(length: float, speed: float, density: float, radio_range: float, hop_delay: float) -> float:
    """Expected delay on a single road segment.

    With probability 1 - exp(-radio_range * density) a relay chain exists and
    the packet crosses at one wireless hop per radio_range of road; otherwise
    the holder carries it at the average vehicle speed.
    """
    if not length > 0:
        raise DelayError(f"length must be > 0, got {length}")
    if not speed > 0:
        raise DelayError(f"speed must be > 0, got {speed}")
    if density < 0:
        raise DelayError(f"density must be >= 0, got {density}")
    if not radio_range > 0:
        raise DelayError(f"radio_range must be > 0, got {radio_range}")
    if not hop_delay > 0:
        raise DelayError(f"hop_delay must be > 0, got {hop_delay}")
    carry = math.exp(-radio_range * density)
    return (1.0 - carry) * (length * hop_delay / radio_range) + carry * (length / speed)


def bus_delay(edge: AugmentedEdge, stats) -> float:
    """Carry delay of a bus shortcut: sum of segment lengths over bus speeds."""
    if edge.vtype <= 0:
        raise DelayError(f"bus_delay needs a bus edge, got vtype {edge.vtype}")
    if not edge.segments:
        raise DelayError("bus edge has no member segments")
    total = 0.0
    for seg in edge.segments:
        seg_stats = stats.segment((seg.frm, seg.to))
        speed = seg_stats.bus_speeds.get(edge.vtype)
        if speed is None:
            raise DelayError(
                f"no type-{edge.vtype} bus speed on segment {seg.frm!r}->{seg.to!r}"
            )
        total += seg.length / speed
    return total


def edge_delays(graph: AugmentedGraph, stats) -> dict[EdgeKey, float]:
    """Expected delay for every edge, keyed by (frm, to, vtype)."""
    out: dict[EdgeKey, float] = {}
    for edge in graph.edges:
        if edge.vtype == 0:
            seg = edge.segments[0]
            seg_stats = stats.segment((seg.frm, seg.to))
            out[edge.key] = v2v_delay(
                seg.length, seg_stats.speed, seg_stats.density, stats.radio_range, stats.hop_delay
            )
        else:
            out[edge.key] = bus_delay(edge, stats)
    return out
