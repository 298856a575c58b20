"""Run reports: per-flow records, per-path throughput series, router
counters, destination half-open accounting, and CSV export.

CSV files are byte-stable for a given report: fixed column order, fixed
float formatting, rows in deterministic order.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .nettopo import FlowKeyMode
from .simcore import NS_PER_MS, to_sec
from .tcpmodel import FlowRecord

THROUGHPUT_BUCKET_NS = 100 * NS_PER_MS


@dataclass
class HalfOpenInterval:
    """One server-side connection's stay in the SYN-received state."""

    flow_port: int
    entered_at: int
    left_at: Optional[int] = None
    became_established: bool = False


@dataclass
class RunReport:
    scenario: str
    policy: str
    seed: int
    k: int
    flow_key_mode: FlowKeyMode
    duration_ns: int = 0
    flow_records: list[FlowRecord] = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    link_stats: list[dict] = field(default_factory=list)
    # (path, bucket index) -> delivered payload bits
    throughput_bits: dict = field(default_factory=dict)
    half_open: list[HalfOpenInterval] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    events_scheduled: int = 0
    events_fired: int = 0
    events_cancelled: int = 0
    events_pending: int = 0

    def foreground_records(self) -> list[FlowRecord]:
        return [r for r in self.flow_records if not r.is_background]

    def completed_fcts_ns(self, keep: Optional[Callable[[FlowRecord], bool]] = None) -> list[int]:
        out = []
        for r in self.foreground_records():
            if r.fct_ns is None:
                continue
            if keep is not None and not keep(r):
                continue
            out.append(r.fct_ns)
        return out

    def throughput_series(self, path: int) -> list[tuple[float, float]]:
        """(bucket start seconds, delivered bits/s) for one path."""
        series = []
        buckets = sorted(b for (p, b) in self.throughput_bits if p == path)
        for b in buckets:
            bits = self.throughput_bits[(path, b)]
            series.append((b * THROUGHPUT_BUCKET_NS / 1e9, bits * 1e9 / THROUGHPUT_BUCKET_NS))
        return series

    def half_open_series(self, bucket_ns: int = THROUGHPUT_BUCKET_NS) -> list[tuple[float, int]]:
        """Sampled count of destination connections sitting in SYN-received."""
        edges: list[tuple[int, int]] = []
        for iv in self.half_open:
            edges.append((iv.entered_at, 1))
            edges.append((iv.left_at if iv.left_at is not None else self.duration_ns, -1))
        edges.sort()
        series = []
        level = 0
        i = 0
        t = 0
        while t <= self.duration_ns:
            while i < len(edges) and edges[i][0] <= t:
                level += edges[i][1]
                i += 1
            series.append((to_sec(t), level))
            t += bucket_ns
        return series


def mean_fct(report: RunReport, keep: Optional[Callable[[FlowRecord], bool]] = None) -> float:
    """Arithmetic mean FCT in seconds over completed foreground flows."""
    fcts = report.completed_fcts_ns(keep)
    if not fcts:
        raise ValueError(f"{report.scenario}/{report.policy}: no completed flows match")
    return to_sec(sum(fcts)) / len(fcts)


def fct_percentile(report: RunReport, q: float) -> float:
    fcts = sorted(report.completed_fcts_ns())
    if not fcts:
        raise ValueError("no completed flows")
    rank = max(0, min(len(fcts) - 1, math.ceil(q * len(fcts)) - 1))
    return to_sec(fcts[rank])


def fct_stddev(report: RunReport) -> float:
    fcts = [to_sec(v) for v in report.completed_fcts_ns()]
    if len(fcts) < 2:
        return 0.0
    m = sum(fcts) / len(fcts)
    return math.sqrt(sum((x - m) ** 2 for x in fcts) / (len(fcts) - 1))


@dataclass(frozen=True)
class OverheadReport:
    """Destination half-open overhead: measured extra SYN-received time per
    flow relative to the mean destination-side FCT, next to the handshake
    round-trip predictor RTT / FCT_D."""

    measured_ratio: float
    predicted_ratio: float
    mean_extra_half_open_s: float
    mean_handshake_rtt_s: float
    mean_fct_dest_s: float


def destination_overhead(report: RunReport) -> OverheadReport:
    if report.policy != "2syn":
        raise ValueError("destination overhead is defined for SYN-race runs only")
    records = [r for r in report.foreground_records() if r.completed]
    if not records:
        raise ValueError("no completed flows")
    if report.k == 1:
        return OverheadReport(0.0, 0.0, 0.0, 0.0, _mean_fct_dest(records))

    loser_time_ns = 0
    for iv in report.half_open:
        if not iv.became_established and iv.left_at is not None:
            loser_time_ns += iv.left_at - iv.entered_at
    mean_extra = to_sec(loser_time_ns) / len(records)

    rtts = [
        r.established_at - r.syn_sent_at
        for r in records
        if r.established_at is not None and r.syn_sent_at is not None
    ]
    mean_rtt = to_sec(sum(rtts)) / len(rtts) if rtts else 0.0
    mean_fct_d = _mean_fct_dest(records)
    return OverheadReport(
        measured_ratio=mean_extra / mean_fct_d if mean_fct_d else 0.0,
        predicted_ratio=mean_rtt / mean_fct_d if mean_fct_d else 0.0,
        mean_extra_half_open_s=mean_extra,
        mean_handshake_rtt_s=mean_rtt,
        mean_fct_dest_s=mean_fct_d,
    )


def _mean_fct_dest(records: Iterable[FlowRecord]) -> float:
    vals = [r.fct_dest_ns for r in records if r.fct_dest_ns is not None]
    if not vals:
        return 0.0
    return to_sec(sum(vals)) / len(vals)


def verify_run(report: RunReport) -> list[str]:
    """Cross-cutting invariant checks; returns human-readable violations."""
    problems = list(report.violations)

    for stats in report.link_stats:
        if (
            stats["packets_in"]
            != stats["packets_delivered"] + stats["packets_dropped"] + stats["packets_in_flight"]
        ):
            problems.append(f"link {stats['link']}: packet conservation broken: {stats}")

    c = report.counters
    accounted = (
        report.events_fired + report.events_cancelled + report.events_pending
    )
    if report.events_scheduled != accounted:
        problems.append(
            f"event accounting: scheduled={report.events_scheduled} != fired+cancelled+pending={accounted}"
        )

    completed = [r for r in report.foreground_records() if r.completed]
    for r in completed:
        if r.synacks_seen != 1:
            problems.append(
                f"flow {r.flow_id}: source saw {r.synacks_seen} SYN-ACKs (expected exactly 1)"
            )
        if r.chosen_path is None:
            problems.append(f"flow {r.flow_id}: completed without a recorded path")

    total_drops = sum(s["packets_dropped"] for s in report.link_stats)
    if report.policy == "2syn" and total_drops == 0 and completed:
        expected_rst = (report.k - 1) * c.get("flows_established", 0)
        if c.get("rst_sent", 0) != expected_rst:
            problems.append(
                f"loss-free run: rst_sent={c.get('rst_sent')} != (k-1)*established={expected_rst}"
            )
    return problems


# -- CSV export ---------------------------------------------------------------


def _fmt_s(ns: Optional[int]) -> str:
    return "" if ns is None else f"{ns / 1e9:.9f}"


def export_csv(report: RunReport, out_dir: str) -> None:
    """Write flows.csv, throughput.csv and counters.csv under `out_dir`."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        _write_flows(report, os.path.join(out_dir, "flows.csv"))
        _write_throughput(report, os.path.join(out_dir, "throughput.csv"))
        _write_counters(report, os.path.join(out_dir, "counters.csv"))
    except OSError as exc:
        raise OSError(f"cannot write report under {out_dir!r}: {exc}") from exc


def _write_flows(report: RunReport, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["flow_key", "policy", "chosen_path", "start", "fct", "bytes", "retrans"])
        for r in sorted(report.foreground_records(), key=lambda r: r.flow_id):
            key = r.flow_key
            key_str = f"{key.src_host}:{key.src_port}>{key.dst_host}:{key.dst_port}"
            w.writerow(
                [
                    key_str,
                    report.policy,
                    r.chosen_path if r.chosen_path is not None else "",
                    _fmt_s(r.syn_sent_at),
                    _fmt_s(r.fct_ns),
                    r.bytes,
                    r.retransmissions,
                ]
            )


def _write_throughput(report: RunReport, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "path", "bits_per_s"])
        for p in range(1, report.k + 1):
            for t, bps in report.throughput_series(p):
                w.writerow([f"{t:.1f}", p, f"{bps:.1f}"])


def _write_counters(report: RunReport, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "value"])
        for name in sorted(report.counters):
            w.writerow([name, report.counters[name]])
