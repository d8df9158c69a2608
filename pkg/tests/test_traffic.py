"""Traffic statistics: validation, snapping, and trace estimation against a
hand-built counting oracle."""

import math

import numpy as np
import pytest

from ovdf.roadgraph import BusLine, Intersection, augment, build_graph
from ovdf.traffic import (
    EstimationConfig,
    IntersectionStats,
    SegmentStats,
    StatsError,
    TraceRecord,
    TrafficStats,
    apply_defaults,
    estimate_from_traces,
    load_stats,
    load_traces,
    project_lat_lon,
    save_stats,
    save_traces,
    snap,
    stats_from_dict,
    stats_to_dict,
)

from test_roadgraph import sample_city


def cross_graph(with_bus=True):
    """A four-way intersection m with arms w,e,n,s, 400 m each."""
    nodes = [
        Intersection("m", 0.0, 0.0),
        Intersection("w", -400.0, 0.0),
        Intersection("e", 400.0, 0.0, True),
        Intersection("n", 0.0, 400.0),
        Intersection("s", 0.0, -400.0, True),
    ]
    arms = [("w", "m"), ("m", "e"), ("n", "m"), ("m", "s")]
    segs = []
    for a, b in arms:
        segs += [(a, b, 400.0), (b, a, 400.0)]
    g = build_graph(nodes, segs)
    if with_bus:
        g = augment(g, [BusLine(1, ("w", "m", "e"))])
    return g


class TestIntersectionStatsValidation:
    def test_accepts_normalized(self):
        IntersectionStats({"a": 0.6, "b": 0.4}, {}, {}, {}).validate("i")
        IntersectionStats({"a": 0.5, "b": 0.3}, {}, {1: 0.2}, {}).validate("i")

    def test_rejects_unnormalized(self):
        with pytest.raises(StatsError, match=r"'i'.*sum to 1.2"):
            IntersectionStats({"a": 0.6, "b": 0.6}, {}, {}, {}).validate("i")

    def test_rejects_out_of_range(self):
        with pytest.raises(StatsError, match="outside"):
            IntersectionStats({"a": 1.0}, {"a": 1.5}, {}, {}).validate("i")


class TestStatsFiles:
    def make_stats(self):
        g = sample_city()
        intersections = {
            i: IntersectionStats(
                {j: 1.0 / len(g.neighbors(i)) for j in g.neighbors(i)},
                {j: 0.2 for j in g.neighbors(i)},
            )
            for i in g.non_ap_ids()
        }
        segments = {k: SegmentStats(0.003, 9.5, {}) for k in g.segments}
        return g, TrafficStats(intersections=intersections, segments=segments)

    def test_round_trip(self, tmp_path):
        g, stats = self.make_stats()
        path = tmp_path / "stats.json"
        save_stats(stats, path)
        again = load_stats(path, g)
        assert stats_to_dict(again) == stats_to_dict(stats)

    def test_load_rejects_normalization_violation(self, tmp_path):
        g, stats = self.make_stats()
        bad = dict(stats.intersections)
        bad["i1"] = IntersectionStats({"i2": 0.6, "i4": 0.6}, {}, {}, {})
        path = tmp_path / "stats.json"
        save_stats(TrafficStats(bad, stats.segments), path)
        with pytest.raises(StatsError, match="'i1'"):
            load_stats(path)

    def test_coverage_requires_all_segments(self):
        g, stats = self.make_stats()
        del stats.segments[("i1", "i2")]
        with pytest.raises(StatsError, match="segment 'i1'->'i2'"):
            stats.validate(g)

    def test_coverage_rejects_non_neighbor_fractions(self):
        g, stats = self.make_stats()
        stats.intersections["i1"] = IntersectionStats({"i9": 1.0}, {}, {}, {})
        with pytest.raises(StatsError, match="non-neighbors"):
            stats.validate(g)


class TestSnap:
    def test_point_on_midline(self):
        g = cross_graph(with_bus=False)
        seg, off = snap(TraceRecord("v", 0, 0.0, -100.0, 0.0), g)
        # Both directions tie; ('m','w') sorts before ('w','m').
        assert (seg.frm, seg.to) == ("m", "w")
        assert off == pytest.approx(100.0)

    def test_far_point_is_none(self):
        g = cross_graph(with_bus=False)
        assert snap(TraceRecord("v", 0, 0.0, 600.0, 500.0), g) is None

    def test_equidistant_tie_breaks_on_ids(self):
        # Two parallel roads 60 m apart; the midpoint ties at 30 m each.
        nodes = [
            Intersection("a", 0.0, 0.0), Intersection("b", 100.0, 0.0),
            Intersection("c", 0.0, 60.0), Intersection("d", 100.0, 60.0),
        ]
        g = build_graph(nodes, [("a", "b", 100.0), ("c", "d", 100.0)])
        seg, _ = snap(TraceRecord("v", 0, 0.0, 50.0, 30.0), g, threshold=40.0)
        assert (seg.frm, seg.to) == ("a", "b")


def crossing_records(vid, vtype, out_arm, t0):
    """Two samples straddling m: 100 m before on w->m, 100 m after on m->out."""
    enter = (-100.0, 0.0)
    leave = {"e": (100.0, 0.0), "n": (0.0, 100.0), "s": (0.0, -100.0)}[out_arm]
    return [
        TraceRecord(vid, vtype, t0, *enter),
        TraceRecord(vid, vtype, t0 + 20.0, *leave),
    ]


class TestEstimation:
    """100 crossings of m: 60 type-0 to e, 20 type-0 to n, 20 buses to e."""

    def build(self, graph=None):
        records = []
        k = 0
        for count, vtype, arm in ((60, 0, "e"), (20, 0, "n"), (20, 1, "e")):
            for _ in range(count):
                records.extend(crossing_records(f"v{k:03d}", vtype, arm, 10.0 * k))
                k += 1
        graph = graph or cross_graph()
        return records, graph, estimate_from_traces(records, graph)

    def test_fraction_counting(self):
        _, _, stats = self.build()
        ist = stats.intersection("m")
        assert ist.turn_fractions == pytest.approx({"e": 0.6, "n": 0.2})
        assert ist.bus_fractions == pytest.approx({1: 0.2})
        total = sum(ist.turn_fractions.values()) + sum(ist.bus_fractions.values())
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_contact_probability_formula(self):
        records, _, stats = self.build()
        span = max(r.t for r in records) - min(r.t for r in records)
        ist = stats.intersection("m")
        assert ist.contact_probs["e"] == pytest.approx(1.0 - math.exp(-60 / span * 30.0))
        assert ist.contact_probs["s"] == 0.0
        assert ist.bus_contact_probs[1] == pytest.approx(1.0 - math.exp(-20 / span * 30.0))

    def test_density_and_speed(self):
        records, _, stats = self.build()
        span = max(r.t for r in records) - min(r.t for r in records)
        seg = stats.segment(("w", "m"))
        # Every crossing spends 10 s on the inbound arm (100 m at 10 m/s).
        assert seg.speed == pytest.approx(10.0)
        assert seg.density == pytest.approx(100 * 10.0 / span / 400.0)
        assert stats.segment(("m", "e")).bus_speeds[1] == pytest.approx(10.0)

    def test_untraversed_segment_defaults(self):
        _, _, stats = self.build()
        seg = stats.segment(("s", "m"))
        assert seg.density == 0.0
        assert seg.speed == EstimationConfig().default_speed

    def test_terminal_bus_arrivals_count_as_plain(self):
        # Same trace on a graph whose bus line ends at m: no shortcut out of
        # m, so the 20 bus crossings count as plain vehicles heading e.
        g = cross_graph(with_bus=False)
        g = augment(g, [BusLine(1, ("w", "m"))])
        _, _, stats = self.build(graph=g)
        ist = stats.intersection("m")
        assert ist.bus_fractions == {}
        assert ist.turn_fractions == pytest.approx({"e": 0.8, "n": 0.2})

    def test_deterministic(self):
        r1, g, s1 = self.build()
        s2 = estimate_from_traces(r1, g)
        assert stats_to_dict(s1) == stats_to_dict(s2)

    def test_missing_marks_zero_arrival_intersections(self):
        g = cross_graph()
        records = crossing_records("v0", 0, "e", 0.0)
        stats = estimate_from_traces(records, g)
        assert "n" in stats.missing and "w" in stats.missing
        filled = apply_defaults(stats, g)
        assert filled.missing == frozenset()
        filled.validate(g)
        assert filled.intersection("n").turn_fractions == pytest.approx({"m": 1.0})

    def test_poisson_contact_model_monte_carlo(self):
        # P(at least one arrival in the window) for rate 0.05/s, window 30 s:
        # analytic 1 - e^-1.5 = 0.7768698..., agreeing with simulated Poisson
        # arrival counts.
        lam, tau = 0.05, 30.0
        analytic = 1.0 - math.exp(-lam * tau)
        assert analytic == pytest.approx(0.7769, abs=5e-5)
        rng = np.random.default_rng(42)
        hits = (rng.poisson(lam * tau, 200_000) > 0).mean()
        assert hits == pytest.approx(analytic, abs=5e-3)

    def test_rejects_decreasing_timestamps(self):
        g = cross_graph()
        records = [
            TraceRecord("v", 0, 10.0, -100.0, 0.0),
            TraceRecord("v", 0, 5.0, 100.0, 0.0),
        ]
        with pytest.raises(StatsError, match="non-decreasing"):
            estimate_from_traces(records, g)


class TestTraceFiles:
    def test_xy_round_trip(self, tmp_path):
        records = [TraceRecord("a", 0, 0.0, 1.5, 2.5), TraceRecord("b", 1, 3.0, -4.0, 0.25)]
        path = tmp_path / "t.csv"
        save_traces(records, path)
        assert load_traces(path, xy=True) == records

    def test_latlon_projection(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text(
            "vehicle_id,vtype,timestamp,lat,lon\n"
            "a,0,0.0,31.0,121.0\n"
            "a,0,30.0,31.001,121.0\n"
        )
        records = load_traces(path, origin=(31.0, 121.0))
        assert records[0].x == pytest.approx(0.0)
        assert records[1].y == pytest.approx(111.19, abs=0.1)  # one millidegree of latitude

    def test_rejects_unknown_vtype_with_line_number(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("vehicle_id,vtype,timestamp,x,y\na,0,0.0,0,0\na,7,1.0,0,0\n")
        with pytest.raises(StatsError, match=r"t\.csv:3.*type 7"):
            load_traces(path, xy=True, valid_types={0, 1})

    def test_rejects_wrong_header(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("x,y\n")
        with pytest.raises(StatsError, match="expected header"):
            load_traces(path, xy=True)


def test_projection_accuracy_city_scale():
    # 15 km east at Shanghai latitude: equirectangular vs haversine < 0.1%.
    origin = (31.2, 121.4)
    lat, lon = 31.2, 121.4 + 15.0 / (111.19 * math.cos(math.radians(31.2)))
    x, y = project_lat_lon(lat, lon, origin)
    assert x == pytest.approx(15000.0, rel=1e-3)
    assert abs(y) < 1.0
