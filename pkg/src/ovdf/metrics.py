"""Aggregation of simulation results into the evaluation views: grid-square
coverage, delivery ratio versus distance to the nearest AP, seed-sweep
summaries and cross-protocol comparisons, plus the CSV formats they travel
in.

Delivery ratio always means: delivered within the deadline, out of the
packets whose deadline window closed inside the run (dropped packets stay
in the denominator; packets created in the last `deadline` seconds are
excluded everywhere, uniformly across protocols).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .sim import PacketRecord, SimResult


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    origin_x: float
    origin_y: float
    nx: int
    ny: int
    side: float = 500.0
    min_generated: int = 1  # validity threshold, calibrated per dataset

    @classmethod
    def cover(cls, xs, ys, side: float = 500.0, min_generated: int = 1) -> "GridSpec":
        """Smallest aligned grid covering the given points."""
        x0 = math.floor(min(xs) / side) * side
        y0 = math.floor(min(ys) / side) * side
        nx = max(1, math.ceil((max(xs) - x0) / side + 1e-9))
        ny = max(1, math.ceil((max(ys) - y0) / side + 1e-9))
        return cls(x0, y0, nx, ny, side, min_generated)


def _delivered_in_deadline(p: PacketRecord, deadline: float) -> bool:
    return p.delivered_at is not None and p.delivered_at - p.created_at <= deadline


def coverage_grid(result: SimResult, grid: GridSpec) -> list[dict]:
    """Per-square generated/delivered counts and ratios.

    Squares below the validity threshold keep their counts but are flagged
    invalid and carry no ratio. Packet origins must lie inside the grid.
    """
    gen = np.zeros((grid.nx, grid.ny), dtype=int)
    ok = np.zeros((grid.nx, grid.ny), dtype=int)
    for p in result.counted():
        ix = int((p.origin_x - grid.origin_x) // grid.side)
        iy = int((p.origin_y - grid.origin_y) // grid.side)
        if ix == grid.nx and p.origin_x == grid.origin_x + grid.nx * grid.side:
            ix -= 1  # right-boundary points belong to the last square
        if iy == grid.ny and p.origin_y == grid.origin_y + grid.ny * grid.side:
            iy -= 1
        if not (0 <= ix < grid.nx and 0 <= iy < grid.ny):
            raise MetricsError(
                f"packet {p.id} origin ({p.origin_x:.1f}, {p.origin_y:.1f}) outside the grid"
            )
        gen[ix, iy] += 1
        if _delivered_in_deadline(p, result.deadline):
            ok[ix, iy] += 1
    rows = []
    for ix in range(grid.nx):
        for iy in range(grid.ny):
            g, d = int(gen[ix, iy]), int(ok[ix, iy])
            valid = g >= grid.min_generated
            rows.append(
                {
                    "square_x": ix,
                    "square_y": iy,
                    "generated": g,
                    "delivered": d,
                    "ratio": (d / g) if valid else None,
                    "valid": valid,
                }
            )
    return rows


def calibrate_valid_threshold(generated_counts, coverage: float = 0.9) -> int:
    """Largest per-square packet count threshold whose qualifying squares
    still carry at least `coverage` of all generated packets."""
    counts = sorted((int(c) for c in generated_counts), reverse=True)
    total = sum(counts)
    if total == 0:
        return 1
    best = 1
    for t in sorted(set(counts)):
        covered = sum(c for c in counts if c >= t)
        if covered >= coverage * total:
            best = t
        else:
            break
    return max(best, 1)


def ratio_by_distance(result: SimResult, ap_positions, bin_width: float = 200.0) -> list[dict]:
    """Delivery ratio binned by origin distance to the nearest AP.

    Every packet lands in exactly one bin; empty bins are omitted.
    """
    if bin_width <= 0:
        raise MetricsError("bin_width must be positive")
    aps = np.asarray(ap_positions, dtype=float).reshape(-1, 2)
    if len(aps) == 0:
        raise MetricsError("no AP positions given")
    bins: dict[int, list[int]] = {}
    for p in result.counted():
        d = aps - np.array([p.origin_x, p.origin_y])
        dist = float(np.sqrt((d * d).sum(axis=1)).min())
        b = int(dist // bin_width)
        cell = bins.setdefault(b, [0, 0])
        cell[0] += 1
        if _delivered_in_deadline(p, result.deadline):
            cell[1] += 1
    return [
        {
            "bin_lo_m": b * bin_width,
            "bin_hi_m": (b + 1) * bin_width,
            "generated": g,
            "delivered": d,
            "ratio": d / g,
        }
        for b, (g, d) in sorted(bins.items())
    ]


def summarize(result: SimResult) -> dict:
    counted = result.counted()
    delays = sorted(
        p.delivered_at - p.created_at for p in counted if p.delivered_at is not None
    )
    quantile = lambda f: delays[min(len(delays) - 1, int(f * len(delays)))] if delays else None
    return {
        "protocol": result.protocol,
        "seed": result.seed,
        "generated": len(counted),
        "delivered": len(delays),
        "delivered_in_deadline": sum(
            1 for p in counted if _delivered_in_deadline(p, result.deadline)
        ),
        "delivery_ratio": result.delivery_ratio(),
        "mean_delay_s": (sum(delays) / len(delays)) if delays else None,
        "p50_delay_s": quantile(0.5),
        "p90_delay_s": quantile(0.9),
        "transfers": result.transfers,
    }


def compare(metric_sets: dict[str, list[SimResult]], baseline: str | None = None) -> list[dict]:
    """Seed-sweep means and relative gains against a baseline protocol.

    All runs must come from the same scenario (matching content hashes).
    The baseline defaults to 'gpsr' when present, else the first label.
    """
    if not metric_sets:
        raise MetricsError("nothing to compare")
    hashes = {r.content_hash for rs in metric_sets.values() for r in rs}
    if len(hashes) > 1:
        raise MetricsError(f"metric sets come from different scenarios: {sorted(hashes)}")
    labels = list(metric_sets)
    if baseline is None:
        baseline = "gpsr" if "gpsr" in labels else labels[0]
    if baseline not in metric_sets:
        raise MetricsError(f"baseline {baseline!r} not among {labels}")
    base_ratios = [r.delivery_ratio() for r in metric_sets[baseline]]
    base_mean = sum(base_ratios) / len(base_ratios)
    rows = []
    for label in labels:
        ratios = [r.delivery_ratio() for r in metric_sets[label]]
        mean = sum(ratios) / len(ratios)
        sd = float(np.std(ratios, ddof=1)) if len(ratios) > 1 else 0.0
        rows.append(
            {
                "protocol": label,
                "runs": len(ratios),
                "mean_ratio": mean,
                "sd_ratio": sd,
                "gain_vs_baseline": (mean - base_mean) / base_mean if base_mean > 0 else None,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# CSV formats


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


PACKET_FIELDS = [
    "protocol", "seed", "scenario_hash", "deadline_s", "duration_s",
    "packet_id", "origin_x", "origin_y", "created_at", "delivered_at", "hops", "dropped",
]


def write_packets_csv(result: SimResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PACKET_FIELDS)
        for p in result.packets:
            writer.writerow(
                [
                    result.protocol,
                    result.seed,
                    result.content_hash,
                    _fmt(result.deadline),
                    _fmt(result.sim_duration),
                    p.id,
                    _fmt(p.origin_x),
                    _fmt(p.origin_y),
                    _fmt(p.created_at),
                    _fmt(p.delivered_at),
                    p.hops,
                    _fmt(p.dropped),
                ]
            )


def read_packets_csv(path) -> SimResult:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PACKET_FIELDS:
            raise MetricsError(f"{path}: not a packet metrics file")
        result = None
        for row in reader:
            if result is None:
                result = SimResult(
                    protocol=row[0],
                    seed=int(row[1]),
                    deadline=float(row[3]),
                    sim_duration=float(row[4]),
                    content_hash=row[2],
                )
            result.packets.append(
                PacketRecord(
                    id=int(row[5]),
                    origin_x=float(row[6]),
                    origin_y=float(row[7]),
                    created_at=float(row[8]),
                    delivered_at=float(row[9]) if row[9] else None,
                    hops=int(row[10]),
                    dropped=row[11] == "1",
                )
            )
    if result is None:
        raise MetricsError(f"{path}: no packet rows")
    result.generated = len(result.packets)
    return result


def write_rows_csv(rows: list[dict], fields: list[str], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row.get(f)) for f in fields])


COVERAGE_FIELDS = ["square_x", "square_y", "generated", "delivered", "ratio", "valid"]
DISTANCE_FIELDS = ["bin_lo_m", "bin_hi_m", "generated", "delivered", "ratio"]
SUMMARY_FIELDS = [
    "protocol", "seed", "generated", "delivered", "delivered_in_deadline",
    "delivery_ratio", "mean_delay_s", "p50_delay_s", "p90_delay_s", "transfers",
]
COMPARE_FIELDS = ["protocol", "runs", "mean_ratio", "sd_ratio", "gain_vs_baseline"]
