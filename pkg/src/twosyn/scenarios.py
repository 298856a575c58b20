"""Experiment scenarios: per-path link parameters, workloads, scheduled
mid-run changes, and the built-in suite used by the lab harness.

Scenarios are declarative and cheap to construct; expanding a workload into
its flow schedule is deterministic given (scenario, seed). Scenario files use
a flat INI format with [paths], [workload], [events] and [policy] sections;
the loader rejects unknown sections and keys.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, replace
from typing import Optional, Union

from .nettopo import FlowKeyMode
from .simcore import RngStreams, msec, sec

KB = 1_000
MB = 1_000_000
MBPS = 1_000_000

DOWNLOAD = "download"
UPLOAD = "upload"
SEQUENTIAL = "sequential"
CONCURRENT = "concurrent"

FLOW_PORT_BASE = 5000
BACKGROUND_PORT_BASE = 18000

# Web-search file mix: (probability, lower bound, upper bound); sizes are
# drawn log-uniformly inside each class.
WEB_SEARCH_CLASSES = (
    (0.62, 10 * KB, 100 * KB),
    (0.18, 100 * KB, 1 * MB),
    (0.20, 1 * MB, 30 * MB),
)


class ScenarioError(ValueError):
    """A scenario failed validation; the message names the offending field."""


@dataclass(frozen=True)
class PathConfig:
    """One WAN path: forward capacity, full round-trip propagation delay, and
    an optional distinct reverse capacity (asymmetric access links)."""

    capacity_bps: int
    rtt_ns: int
    capacity_rev_bps: Optional[int] = None

    @property
    def rev_bps(self) -> int:
        return self.capacity_rev_bps if self.capacity_rev_bps is not None else self.capacity_bps


@dataclass(frozen=True)
class RepeatedFile:
    size_bytes: int
    count: int
    direction: str = DOWNLOAD
    pacing: str = SEQUENTIAL


@dataclass(frozen=True)
class WebSearchMix:
    count: int
    direction: str = DOWNLOAD
    pacing: str = SEQUENTIAL


@dataclass(frozen=True)
class BackgroundFlows:
    """Long-lived greedy TCP cross-traffic pinned to one path, rate-capped at
    the source, flowing in the same direction as the foreground data."""

    path: int
    n_flows: int
    per_flow_cap_bps: int
    autostart: bool = True


Workload = Union[RepeatedFile, WebSearchMix]


@dataclass(frozen=True)
class AtTime:
    at_ns: int


@dataclass(frozen=True)
class AfterFractionOfFlows:
    fraction: float


@dataclass(frozen=True)
class CapacityChange:
    path: int
    direction: str  # "fwd" | "rev" | "both"
    capacity_bps: int


@dataclass(frozen=True)
class BackgroundToggle:
    start: bool


@dataclass(frozen=True)
class ScheduledChange:
    trigger: Union[AtTime, AfterFractionOfFlows]
    action: Union[CapacityChange, BackgroundToggle]


@dataclass(frozen=True)
class FlowSpec:
    """One foreground transfer in global start order."""

    index: int
    pair: int
    size_bytes: int
    direction: str
    server_port: int


@dataclass(frozen=True)
class Scenario:
    name: str
    k: int
    paths: tuple[PathConfig, ...]
    workload: Workload
    seed: int = 0
    pairs: int = 1
    background: Optional[BackgroundFlows] = None
    events: tuple[ScheduledChange, ...] = ()
    policy: str = "2syn"
    flow_key_mode: FlowKeyMode = FlowKeyMode.FIVE_TUPLE
    epsilon: float = 0.1
    ucb_c: float = 1.0
    route_update_delay_ns: int = 0
    warmup_ns: int = 0
    compare_policies: tuple[str, ...] = ("static1", "static2", "random", "2syn")

    def validate(self) -> None:
        if self.k < 1:
            raise ScenarioError("k: need at least one path")
        if len(self.paths) != self.k:
            raise ScenarioError(f"paths: expected {self.k} entries, got {len(self.paths)}")
        for i, p in enumerate(self.paths, start=1):
            if p.capacity_bps <= 0 or p.rev_bps <= 0:
                raise ScenarioError(f"paths.path{i}.capacity: must be positive")
            if p.rtt_ns <= 0:
                raise ScenarioError(f"paths.path{i}.rtt: must be positive")
        if self.pairs < 1:
            raise ScenarioError("pairs: must be >= 1")
        w = self.workload
        if w.count < 1:
            raise ScenarioError("workload.count: must be >= 1")
        if w.direction not in (DOWNLOAD, UPLOAD):
            raise ScenarioError(f"workload.direction: unknown {w.direction!r}")
        if w.pacing not in (SEQUENTIAL, CONCURRENT):
            raise ScenarioError(f"workload.pacing: unknown {w.pacing!r}")
        if isinstance(w, RepeatedFile) and w.size_bytes < 0:
            raise ScenarioError("workload.size_bytes: must be >= 0")
        if self.background is not None:
            bg = self.background
            if not 1 <= bg.path <= self.k:
                raise ScenarioError(f"background.path: {bg.path} out of range 1..{self.k}")
            if bg.n_flows < 1 or bg.per_flow_cap_bps <= 0:
                raise ScenarioError("background: flows and rate must be positive")
        last_at = -1
        for n, ev in enumerate(self.events, start=1):
            trig = ev.trigger
            if isinstance(trig, AfterFractionOfFlows):
                if not 0.0 < trig.fraction < 1.0:
                    raise ScenarioError(f"events.{n}.trigger: fraction must be in (0,1)")
            else:
                if trig.at_ns <= last_at:
                    raise ScenarioError(f"events.{n}.trigger: times must be strictly increasing")
                last_at = trig.at_ns
            act = ev.action
            if isinstance(act, CapacityChange):
                if not 1 <= act.path <= self.k:
                    raise ScenarioError(f"events.{n}.action: path {act.path} out of range")
                if act.direction not in ("fwd", "rev", "both"):
                    raise ScenarioError(f"events.{n}.action: bad direction {act.direction!r}")
                if act.capacity_bps <= 0:
                    raise ScenarioError(f"events.{n}.action: capacity must be positive")
            elif isinstance(act, BackgroundToggle) and self.background is None:
                raise ScenarioError(f"events.{n}.action: no background traffic configured")

    @property
    def max_rtt_ns(self) -> int:
        return max(p.rtt_ns for p in self.paths)

    @property
    def total_flows(self) -> int:
        return self.workload.count * self.pairs

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed)


def _web_search_size(rng) -> int:
    u = rng.random()
    acc = 0.0
    for prob, lo, hi in WEB_SEARCH_CLASSES:
        acc += prob
        if u < acc or (prob, lo, hi) == WEB_SEARCH_CLASSES[-1]:
            return round(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    raise AssertionError("unreachable")


def expand_workload(scenario: Scenario, streams: RngStreams) -> list[FlowSpec]:
    """Materialize the flow schedule: pairs are interleaved round-robin in a
    single global order, so every flow of index n starts after flow n-1."""
    w = scenario.workload
    rng = streams.stream("workload")
    flows = []
    index = 0
    for _rep in range(w.count):
        for pair in range(scenario.pairs):
            if isinstance(w, RepeatedFile):
                size = w.size_bytes
            else:
                size = _web_search_size(rng)
            flows.append(
                FlowSpec(index, pair, size, w.direction, FLOW_PORT_BASE + index)
            )
            index += 1
    return flows


def fraction_threshold(fraction: float, total: int) -> int:
    """Number of completed flows after which an AfterFractionOfFlows fires."""
    return max(1, math.ceil(fraction * total - 1e-9))


def builtin_suite(seed: int = 0) -> list[Scenario]:
    """The lab experiment set: delay and queueing comparisons, the
    bandwidth-drop resilience run, the two bandit comparisons, and a
    synthetic (non-faithful) stand-in for the LTE-vs-DSL field test."""
    mab_compare = ("static1", "static2", "random", "2syn", "egreedy", "ucb", "thompson")
    scenarios = [
        Scenario(
            name="prop-delay",
            k=2,
            paths=(
                PathConfig(300 * MBPS, msec(120)),
                PathConfig(300 * MBPS, msec(80)),
            ),
            workload=RepeatedFile(1 * MB, 20),
            seed=seed,
        ),
        Scenario(
            name="queueing",
            k=2,
            paths=(
                PathConfig(300 * MBPS, msec(120)),
                PathConfig(300 * MBPS, msec(120)),
            ),
            workload=RepeatedFile(1 * MB, 20),
            background=BackgroundFlows(path=1, n_flows=5, per_flow_cap_bps=100 * MBPS),
            warmup_ns=sec(1.0),
            seed=seed,
        ),
        Scenario(
            name="bw-drop",
            k=2,
            paths=(
                PathConfig(100 * MBPS, msec(40)),
                PathConfig(300 * MBPS, msec(40)),
            ),
            workload=RepeatedFile(100 * MB, 20),
            events=(
                ScheduledChange(
                    AfterFractionOfFlows(0.4), CapacityChange(2, "both", 30 * MBPS)
                ),
            ),
            seed=seed,
        ),
        Scenario(
            name="mab-fixed",
            k=2,
            paths=(
                PathConfig(200 * MBPS, msec(40)),
                PathConfig(300 * MBPS, msec(40)),
            ),
            workload=RepeatedFile(10 * MB, 50),
            pairs=5,
            compare_policies=mab_compare,
            seed=seed,
        ),
        Scenario(
            name="mab-drop",
            k=2,
            paths=(
                PathConfig(200 * MBPS, msec(40)),
                PathConfig(300 * MBPS, msec(40)),
            ),
            workload=RepeatedFile(200 * MB, 20),
            events=(
                ScheduledChange(
                    AfterFractionOfFlows(0.4), CapacityChange(2, "both", 100 * MBPS)
                ),
            ),
            compare_policies=mab_compare,
            seed=seed,
        ),
        # Synthetic stand-in for the wireless-vs-wired field runs: an
        # asymmetric throttled wired path against a slower high-RTT path,
        # with congestion switched on mid-run. Not calibrated to any
        # real measurement.
        Scenario(
            name="lte-vs-dsl-sim",
            k=2,
            paths=(
                PathConfig(8 * MBPS, msec(60), capacity_rev_bps=30 * MBPS),
                PathConfig(10 * MBPS, msec(40), capacity_rev_bps=100 * MBPS),
            ),
            workload=WebSearchMix(20),
            background=BackgroundFlows(
                path=2, n_flows=4, per_flow_cap_bps=40 * MBPS, autostart=False
            ),
            events=(
                ScheduledChange(AfterFractionOfFlows(0.4), BackgroundToggle(start=True)),
            ),
            seed=seed,
        ),
    ]
    for s in scenarios:
        s.validate()
    return scenarios


def builtin_scenario(name: str, seed: int = 0) -> Scenario:
    for s in builtin_suite(seed):
        if s.name == name:
            return s
    known = ", ".join(s.name for s in builtin_suite(0))
    raise ScenarioError(f"unknown scenario {name!r} (built-ins: {known})")


# -- scenario files ----------------------------------------------------------

_PATH_KEYS = {"capacity_mbps", "rtt_ms", "capacity_rev_mbps"}
_WORKLOAD_KEYS = {"kind", "size_bytes", "count", "direction", "pacing", "pairs"}
_BACKGROUND_KEYS = {"path", "flows", "rate_mbps", "autostart"}
_POLICY_KEYS = {
    "kind",
    "flow_key",
    "epsilon",
    "ucb_c",
    "route_update_delay_ms",
    "compare",
    "warmup_s",
}


def _parse_positive(section: str, key: str, raw: str, cast) -> float:
    try:
        value = cast(raw)
    except ValueError:
        raise ScenarioError(f"{section}.{key}: cannot parse {raw!r}") from None
    return value


def load_scenario_file(path: str, name: Optional[str] = None) -> Scenario:
    """Parse a scenario file; raises ScenarioError naming the bad field."""
    parser = configparser.ConfigParser(interpolation=None)
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)

    known_sections = {"paths", "workload", "events", "policy"}
    for section in parser.sections():
        if section not in known_sections:
            raise ScenarioError(f"unknown section [{section}]")
    for required in ("paths", "workload"):
        if required not in parser:
            raise ScenarioError(f"missing section [{required}]")

    paths_raw = parser["paths"]
    try:
        k = int(paths_raw.get("count", ""))
    except ValueError:
        raise ScenarioError("paths.count: required integer") from None
    per_path: dict[int, dict[str, str]] = {i: {} for i in range(1, k + 1)}
    for key, raw in paths_raw.items():
        if key == "count":
            continue
        prefix, _, attr = key.partition(".")
        if not prefix.startswith("path") or attr not in _PATH_KEYS:
            raise ScenarioError(f"paths.{key}: unknown key")
        try:
            idx = int(prefix[len("path"):])
        except ValueError:
            raise ScenarioError(f"paths.{key}: bad path name") from None
        if idx not in per_path:
            raise ScenarioError(f"paths.{key}: path index out of range 1..{k}")
        per_path[idx][attr] = raw
    paths = []
    for i in range(1, k + 1):
        attrs = per_path[i]
        if "capacity_mbps" not in attrs or "rtt_ms" not in attrs:
            raise ScenarioError(f"paths.path{i}: needs capacity_mbps and rtt_ms")
        cap = _parse_positive("paths", f"path{i}.capacity_mbps", attrs["capacity_mbps"], float)
        rtt = _parse_positive("paths", f"path{i}.rtt_ms", attrs["rtt_ms"], float)
        rev = None
        if "capacity_rev_mbps" in attrs:
            rev = round(
                _parse_positive("paths", f"path{i}.capacity_rev_mbps", attrs["capacity_rev_mbps"], float)
                * MBPS
            )
        paths.append(PathConfig(round(cap * MBPS), msec(rtt), rev))

    w_raw = dict(parser["workload"])
    background = None
    bg_attrs = {}
    for key in list(w_raw):
        if key.startswith("background."):
            attr = key[len("background."):]
            if attr not in _BACKGROUND_KEYS:
                raise ScenarioError(f"workload.{key}: unknown key")
            bg_attrs[attr] = w_raw.pop(key)
    for key in w_raw:
        if key not in _WORKLOAD_KEYS:
            raise ScenarioError(f"workload.{key}: unknown key")
    kind = w_raw.get("kind", "repeated_file")
    count = int(_parse_positive("workload", "count", w_raw.get("count", "1"), int))
    direction = w_raw.get("direction", DOWNLOAD)
    pacing = w_raw.get("pacing", SEQUENTIAL)
    pairs = int(_parse_positive("workload", "pairs", w_raw.get("pairs", "1"), int))
    if kind == "repeated_file":
        if "size_bytes" not in w_raw:
            raise ScenarioError("workload.size_bytes: required for repeated_file")
        size = int(_parse_positive("workload", "size_bytes", w_raw["size_bytes"], int))
        workload: Workload = RepeatedFile(size, count, direction, pacing)
    elif kind == "web_search":
        workload = WebSearchMix(count, direction, pacing)
    else:
        raise ScenarioError(f"workload.kind: unknown {kind!r}")
    if bg_attrs:
        for req in ("path", "flows", "rate_mbps"):
            if req not in bg_attrs:
                raise ScenarioError(f"workload.background.{req}: required")
        background = BackgroundFlows(
            int(bg_attrs["path"]),
            int(bg_attrs["flows"]),
            round(float(bg_attrs["rate_mbps"]) * MBPS),
            autostart=bg_attrs.get("autostart", "true").lower() in ("1", "true", "yes"),
        )

    events: list[ScheduledChange] = []
    if "events" in parser:
        grouped: dict[str, dict[str, str]] = {}
        for key, raw in parser["events"].items():
            prefix, _, attr = key.partition(".")
            if attr not in ("trigger", "action"):
                raise ScenarioError(f"events.{key}: unknown key")
            grouped.setdefault(prefix, {})[attr] = raw
        for prefix in sorted(grouped):
            spec = grouped[prefix]
            if "trigger" not in spec or "action" not in spec:
                raise ScenarioError(f"events.{prefix}: needs both trigger and action")
            events.append(
                ScheduledChange(_parse_trigger(prefix, spec["trigger"]),
                                _parse_action(prefix, spec["action"]))
            )

    policy = "2syn"
    flow_key_mode = FlowKeyMode.FIVE_TUPLE
    epsilon, ucb_c = 0.1, 1.0
    route_delay = 0
    warmup = sec(1.0) if (background is not None and background.autostart) else 0
    compare: Optional[tuple[str, ...]] = None
    if "policy" in parser:
        p_raw = parser["policy"]
        for key in p_raw:
            if key not in _POLICY_KEYS:
                raise ScenarioError(f"policy.{key}: unknown key")
        policy = p_raw.get("kind", policy)
        mode_raw = p_raw.get("flow_key", "5tuple")
        try:
            flow_key_mode = FlowKeyMode(mode_raw)
        except ValueError:
            raise ScenarioError(f"policy.flow_key: unknown {mode_raw!r}") from None
        epsilon = float(p_raw.get("epsilon", epsilon))
        ucb_c = float(p_raw.get("ucb_c", ucb_c))
        route_delay = msec(float(p_raw.get("route_update_delay_ms", 0)))
        if "warmup_s" in p_raw:
            warmup = sec(float(p_raw["warmup_s"]))
        if "compare" in p_raw:
            compare = tuple(x.strip() for x in p_raw["compare"].split(",") if x.strip())

    scenario = Scenario(
        name=name or os.path.splitext(os.path.basename(path))[0],
        k=k,
        paths=tuple(paths),
        workload=workload,
        pairs=pairs,
        background=background,
        events=tuple(events),
        policy=policy,
        flow_key_mode=flow_key_mode,
        epsilon=epsilon,
        ucb_c=ucb_c,
        route_update_delay_ns=route_delay,
        warmup_ns=warmup,
        compare_policies=compare
        or ("static1", "static2", "random", "2syn"),
    )
    scenario.validate()
    return scenario


def _parse_trigger(prefix: str, raw: str):
    kind, _, value = raw.partition(":")
    if kind == "at" and value:
        return AtTime(sec(float(value)))
    if kind == "after_fraction" and value:
        return AfterFractionOfFlows(float(value))
    raise ScenarioError(f"events.{prefix}.trigger: expected at:<s> or after_fraction:<f>")


def _parse_action(prefix: str, raw: str):
    parts = raw.split(":")
    if parts[0] == "capacity" and len(parts) == 4:
        return CapacityChange(int(parts[1]), parts[2], round(float(parts[3]) * MBPS))
    if parts[0] == "background" and len(parts) == 2 and parts[1] in ("start", "stop"):
        return BackgroundToggle(parts[1] == "start")
    raise ScenarioError(
        f"events.{prefix}.action: expected capacity:<path>:<dir>:<mbps> or background:start|stop"
    )
