"""Glue that turns a declarative scenario into a live simulation run.

Topology (one run): per-pair client hosts sit behind the multihoming router
on a fast LAN; k WAN paths (forward/reverse link pairs with drop-tail buffers
sized RTT * bandwidth) lead to the per-pair server hosts. Background
cross-traffic endpoints attach directly to a WAN path so they share its
queues without passing through the router.

Foreground flows start strictly in schedule order; flow n+1 begins one clock
tick after flow n finishes. Mid-run scheduled changes (capacity drops,
background start/stop) fire either at an absolute time or right after a
given fraction of flows has completed.
"""

from __future__ import annotations

from typing import Optional

from .metrics import (
    THROUGHPUT_BUCKET_NS,
    HalfOpenInterval,
    RunReport,
)
from .nettopo import ACK, SYN, Address, FlowKey, FlowKeyMode, Link, Packet
from .policies import PathPolicy, make_policy
from .router2syn import MultihomingRouter
from .scenarios import (
    AfterFractionOfFlows,
    AtTime,
    BackgroundToggle,
    CapacityChange,
    DOWNLOAD,
    SEQUENTIAL,
    UPLOAD,
    BACKGROUND_PORT_BASE,
    FlowSpec,
    Scenario,
    expand_workload,
    fraction_threshold,
)
from .simcore import RngStreams, Scheduler, msec, sec, to_sec, usec
from .tcpmodel import FlowRecord, TcpEndpoint

ROUTER_HOST = 0
CLIENT_HOST_BASE = 1
SERVER_HOST_BASE = 101
BG_SOURCE_HOST_BASE = 201
BG_SINK_HOST_BASE = 301

LAN_CAPACITY_BPS = 1_000_000_000
LAN_DELAY_NS = usec(100)

CLIENT_PORT_BASE = 40000
BG_CLIENT_PORT_BASE = 52000

BG_FLOW_BYTES = 1 << 42  # effectively endless

DEFAULT_MAX_SIM_NS = sec(100_000)


class ServerHost:
    """A destination host: spawns one listener endpoint per incoming SYN and
    records every connection's stay in the SYN-received state."""

    def __init__(self, sched: Scheduler, host_id: int, emit, half_open_log: list) -> None:
        self.sched = sched
        self.host_id = host_id
        self.emit = emit
        self.half_open_log = half_open_log
        self.serve: dict[int, tuple[int, bool]] = {}  # port -> (bytes, server closes first)
        self.conns: dict[tuple[Address, int], TcpEndpoint] = {}
        self.established_by_port: dict[int, TcpEndpoint] = {}
        self.stray_segments = 0
        self._intervals: dict[int, HalfOpenInterval] = {}

    def register(self, port: int, serve_bytes: int, server_closes_first: bool) -> None:
        self.serve[port] = (serve_bytes, server_closes_first)

    def on_packet(self, pkt: Packet) -> None:
        conn = (pkt.src, pkt.dst.port)
        ep = self.conns.get(conn)
        if ep is None:
            if pkt.flags & SYN and not pkt.flags & ACK and pkt.dst.port in self.serve:
                self._spawn(pkt, conn)
            else:
                self.stray_segments += 1
            return
        ep.on_segment(pkt)

    def _spawn(self, pkt: Packet, conn: tuple[Address, int]) -> None:
        serve_bytes, closes_first = self.serve[pkt.dst.port]
        local = Address(self.host_id, 0, pkt.dst.port)
        ep = TcpEndpoint(
            self.sched,
            local,
            pkt.src,
            self.emit,
            bytes_to_send=serve_bytes,
            closes_first=closes_first,
            flow_key=pkt.flow_key,
            on_established=self._on_established,
            on_abort=self._on_gone,
            on_complete=self._on_gone,
            name=f"srv[{self.host_id}:{pkt.dst.port}]",
        )
        self.conns[conn] = ep
        iv = HalfOpenInterval(flow_port=pkt.dst.port, entered_at=self.sched.now)
        self._intervals[id(ep)] = iv
        self.half_open_log.append(iv)
        ep.accept_syn(pkt)

    def _on_established(self, ep: TcpEndpoint) -> None:
        iv = self._intervals.pop(id(ep), None)
        if iv is not None:
            iv.left_at = self.sched.now
            iv.became_established = True
        self.established_by_port[ep.local.port] = ep

    def _on_gone(self, ep: TcpEndpoint) -> None:
        iv = self._intervals.pop(id(ep), None)
        if iv is not None:
            iv.left_at = self.sched.now


class ClientHost:
    """A branch-side host: one endpoint per local port."""

    def __init__(self, host_id: int) -> None:
        self.host_id = host_id
        self.conns: dict[int, TcpEndpoint] = {}
        self._next_port = CLIENT_PORT_BASE
        self.stray_segments = 0

    def alloc_port(self) -> int:
        port = self._next_port
        self._next_port += 1
        return port

    def on_packet(self, pkt: Packet) -> None:
        ep = self.conns.get(pkt.dst.port)
        if ep is None:
            self.stray_segments += 1
            return
        ep.on_segment(pkt)


class Network:
    """Links plus per-end delivery demux tables."""

    def __init__(self, sched: Scheduler, scenario: Scenario) -> None:
        self.sched = sched
        self.k = scenario.k
        self.lan_up = Link(sched, "lan-up", LAN_CAPACITY_BPS, LAN_DELAY_NS, self._to_router_lan)
        self.lan_down = Link(sched, "lan-down", LAN_CAPACITY_BPS, LAN_DELAY_NS, self._to_branch)
        self.wan_fwd: dict[int, Link] = {}
        self.wan_rev: dict[int, Link] = {}
        for i, p in enumerate(scenario.paths, start=1):
            half = p.rtt_ns // 2
            self.wan_fwd[i] = Link(
                sched,
                f"wan{i}-fwd",
                p.capacity_bps,
                half,
                self._make_wan_side_deliver(i),
                sizing_rtt_ns=p.rtt_ns,
            )
            self.wan_rev[i] = Link(
                sched,
                f"wan{i}-rev",
                p.rev_bps,
                p.rtt_ns - half,
                self._make_router_side_deliver(i),
                sizing_rtt_ns=p.rtt_ns,
            )
        self.router: Optional[MultihomingRouter] = None
        self.branch_side: dict[int, object] = {}
        self.wan_side: dict[int, object] = {}
        self.router_side: dict[int, object] = {}
        self.undeliverable = 0

    def _to_router_lan(self, pkt: Packet) -> None:
        self.router.on_lan_packet(pkt)

    def _to_branch(self, pkt: Packet) -> None:
        host = self.branch_side.get(pkt.dst.host)
        if host is None:
            self.undeliverable += 1
            return
        host.on_packet(pkt)

    def _make_wan_side_deliver(self, path: int):
        def deliver(pkt: Packet) -> None:
            host = self.wan_side.get(pkt.dst.host)
            if host is None:
                self.undeliverable += 1
                return
            host.on_packet(pkt)

        return deliver

    def _make_router_side_deliver(self, path: int):
        def deliver(pkt: Packet) -> None:
            if pkt.dst.host == ROUTER_HOST:
                self.router.on_wan_packet(path, pkt)
                return
            host = self.router_side.get(pkt.dst.host)
            if host is None:
                self.undeliverable += 1
                return
            host.on_packet(pkt)

        return deliver

    # Emit closures handed to hosts and the router.

    def branch_emit(self, pkt: Packet) -> None:
        self.lan_up.transmit(pkt, self.sched.now)

    def router_emit_wan(self, path: int, pkt: Packet) -> None:
        self.wan_fwd[path].transmit(pkt, self.sched.now)

    def router_emit_lan(self, pkt: Packet) -> None:
        self.lan_down.transmit(pkt, self.sched.now)

    def server_emit(self, pkt: Packet) -> None:
        # Servers route toward the router interface named in the destination.
        self.wan_rev[pkt.dst.iface].transmit(pkt, self.sched.now)

    def make_path_emit(self, path: int, toward_router_side: bool):
        link = self.wan_rev[path] if toward_router_side else self.wan_fwd[path]

        def emit(pkt: Packet) -> None:
            link.transmit(pkt, self.sched.now)

        return emit

    def all_links(self) -> list[Link]:
        return [self.lan_up, self.lan_down] + [
            self.wan_fwd[i] for i in sorted(self.wan_fwd)
        ] + [self.wan_rev[i] for i in sorted(self.wan_rev)]


class _BackgroundFlow:
    def __init__(self, client: TcpEndpoint, record: FlowRecord) -> None:
        self.client = client
        self.record = record


class WorkloadDriver:
    """Starts foreground flows in order, applies scheduled changes, and stops
    the run once the last flow (plus a short drain grace) is done."""

    def __init__(
        self,
        sched: Scheduler,
        scenario: Scenario,
        network: Network,
        router: MultihomingRouter,
        policy: PathPolicy,
        flows: list[FlowSpec],
        client_hosts: dict[int, ClientHost],
        server_hosts: dict[int, ServerHost],
        streams: RngStreams,
        records: list[FlowRecord],
    ) -> None:
        self.sched = sched
        self.scenario = scenario
        self.network = network
        self.router = router
        self.policy = policy
        self.flows = flows
        self.client_hosts = client_hosts
        self.server_hosts = server_hosts
        self.streams = streams
        self.records = records
        self.next_index = 0
        self.finished_count = 0
        self.audit_problems: list[str] = []
        self._active_by_conn: dict[tuple[Address, Address], FlowRecord] = {}
        self._record_by_ep: dict[int, tuple[FlowRecord, TcpEndpoint, FlowSpec]] = {}
        self._finished_flows: list[tuple[FlowRecord, TcpEndpoint, FlowSpec]] = []
        self._fraction_triggers: list[tuple[int, CapacityChange | BackgroundToggle]] = []
        self._bg_flows: list[_BackgroundFlow] = []
        self._bg_generation = 0
        total = len(flows)
        for ev in scenario.events:
            if isinstance(ev.trigger, AfterFractionOfFlows):
                self._fraction_triggers.append(
                    (fraction_threshold(ev.trigger.fraction, total), ev.action)
                )
            else:
                self.sched.schedule(ev.trigger.at_ns, self._apply_action, ev.action)

    # -- lifecycle -------------------------------------------------------

    def start(self) -> None:
        bg = self.scenario.background
        if bg is not None and bg.autostart:
            self._start_background()
        t0 = self.scenario.warmup_ns
        if self.scenario.workload.pacing == SEQUENTIAL:
            self.sched.schedule(t0, self._start_next, None)
        else:
            for offset in range(len(self.flows)):
                self.sched.schedule(t0 + offset, self._start_next, None)

    def _start_next(self, _arg) -> None:
        if self.next_index >= len(self.flows):
            return
        spec = self.flows[self.next_index]
        self.next_index += 1
        self._start_flow(spec)

    def _start_flow(self, spec: FlowSpec) -> None:
        client_host = self.client_hosts[spec.pair]
        server_host = self.server_hosts[spec.pair]
        local = Address(client_host.host_id, 0, client_host.alloc_port())
        remote = Address(server_host.host_id, 0, spec.server_port)
        key = FlowKey.for_connection(self.scenario.flow_key_mode, local, remote)
        upload = spec.direction == UPLOAD
        record = FlowRecord(
            flow_key=key,
            flow_id=spec.index,
            direction=spec.direction,
            bytes=spec.size_bytes,
            pair=spec.pair,
            server_port=spec.server_port,
        )
        self.records.append(record)
        ep = TcpEndpoint(
            self.sched,
            local,
            remote,
            self.network.branch_emit,
            bytes_to_send=spec.size_bytes if upload else 0,
            closes_first=upload,
            flow_key=key,
            on_established=self._on_client_established,
            on_complete=self._on_client_complete,
            on_abort=self._on_client_abort,
            name=f"flow{spec.index}",
        )
        client_host.conns[local.port] = ep
        self._active_by_conn[(local, remote)] = record
        self._record_by_ep[id(ep)] = (record, ep, spec)
        record.syn_sent_at = self.sched.now
        ep.open()

    def on_path_chosen(self, key: FlowKey, conn, path: int) -> None:
        record = self._active_by_conn.get(conn)
        if record is not None and record.chosen_path is None:
            record.chosen_path = path

    def _on_client_established(self, ep: TcpEndpoint) -> None:
        entry = self._record_by_ep.get(id(ep))
        if entry is None:
            return
        record, _, _ = entry
        record.established_at = ep.established_at
        if record.chosen_path is None:
            record.chosen_path = self.router.route_of(record.flow_key)

    def _on_client_complete(self, ep: TcpEndpoint) -> None:
        entry = self._record_by_ep.pop(id(ep), None)
        if entry is None:
            return
        record, client, spec = entry
        record.completed_at = ep.completed_at
        record.fct_ns = ep.completed_at - record.syn_sent_at
        record.synacks_seen = client.synacks_in_synsent
        # Destination-side figures are filled in by finalize(): in uploads the
        # server finishes only after the source's final ACK arrives.
        self._finished_flows.append((record, client, spec))
        self._active_by_conn.pop((client.local, client.remote), None)
        if record.chosen_path is not None:
            self.policy.record_outcome(
                (client.local.host, client.remote.host),
                record.chosen_path,
                to_sec(record.fct_ns),
            )
        self._finish_one()

    def _on_client_abort(self, ep: TcpEndpoint) -> None:
        entry = self._record_by_ep.pop(id(ep), None)
        if entry is None:
            return
        record, client, _ = entry
        record.aborted = True
        self._active_by_conn.pop((client.local, client.remote), None)
        self._finish_one()

    def finalize(self) -> None:
        """Fill destination-side figures once the run has drained."""
        for record, client, spec in self._finished_flows:
            server_ep = self.server_hosts[spec.pair].established_by_port.get(spec.server_port)
            retrans = client.retransmissions
            if server_ep is not None:
                retrans += server_ep.retransmissions
                if server_ep.syn_received_at is not None and server_ep.completed_at is not None:
                    record.fct_dest_ns = server_ep.completed_at - server_ep.syn_received_at
            record.retransmissions = retrans
            receiver = server_ep if spec.direction == UPLOAD else client
            if receiver is not None and receiver.rcv_nxt - 1 != spec.size_bytes:
                self.audit_problems.append(
                    f"flow {spec.index}: receiver saw {receiver.rcv_nxt - 1} bytes, "
                    f"expected {spec.size_bytes}"
                )

    def _finish_one(self) -> None:
        self.finished_count += 1
        for threshold, action in self._fraction_triggers:
            if threshold == self.finished_count:
                self._apply_action(action)
        if self.finished_count >= len(self.flows):
            grace = 2 * self.scenario.max_rtt_ns + msec(50)
            self.sched.schedule(self.sched.now + grace, lambda _: self.sched.stop(), None)
        elif self.scenario.workload.pacing == SEQUENTIAL:
            self.sched.schedule(self.sched.now + 1, self._start_next, None)

    # -- scheduled changes ---------------------------------------------------

    def _apply_action(self, action) -> None:
        now = self.sched.now
        if isinstance(action, CapacityChange):
            if action.direction in ("fwd", "both"):
                self.network.wan_fwd[action.path].set_capacity(action.capacity_bps, now)
            if action.direction in ("rev", "both"):
                self.network.wan_rev[action.path].set_capacity(action.capacity_bps, now)
        elif isinstance(action, BackgroundToggle):
            if action.start:
                self._start_background()
            else:
                self._stop_background()

    # -- background traffic ----------------------------------------------------

    def _start_background(self) -> None:
        bg = self.scenario.background
        if bg is None or self._bg_flows:
            return
        rng = self.streams.stream("arrival")
        data_toward_router_side = self.scenario.workload.direction == DOWNLOAD
        generation = self._bg_generation
        self._bg_generation += 1
        for j in range(bg.n_flows):
            src_host_id = BG_SOURCE_HOST_BASE + j
            sink_host_id = BG_SINK_HOST_BASE + j
            port = BACKGROUND_PORT_BASE + j
            sink_emit = self.network.make_path_emit(bg.path, not data_toward_router_side)
            src_emit = self.network.make_path_emit(bg.path, data_toward_router_side)
            sink = ServerHost(self.sched, sink_host_id, sink_emit, half_open_log=[])
            sink.register(port, 0, False)
            if data_toward_router_side:
                self.network.router_side[sink_host_id] = sink
                self.network.wan_side[src_host_id] = _BgClientShim()
            else:
                self.network.wan_side[sink_host_id] = sink
                self.network.router_side[src_host_id] = _BgClientShim()
            local = Address(src_host_id, 0, BG_CLIENT_PORT_BASE + generation)
            remote = Address(sink_host_id, 0, port)
            key = FlowKey.for_connection(self.scenario.flow_key_mode, local, remote)
            record = FlowRecord(
                flow_key=key,
                flow_id=-(generation * 1000 + j + 1),
                direction="background",
                bytes=BG_FLOW_BYTES,
                is_background=True,
                server_port=port,
            )
            self.records.append(record)
            ep = TcpEndpoint(
                self.sched,
                local,
                remote,
                src_emit,
                bytes_to_send=BG_FLOW_BYTES,
                closes_first=True,
                flow_key=key,
                rate_cap_bps=bg.per_flow_cap_bps,
                name=f"bg{j}",
            )
            shim_table = (
                self.network.wan_side if data_toward_router_side else self.network.router_side
            )
            shim_table[src_host_id].endpoint = ep
            self._bg_flows.append(_BackgroundFlow(ep, record))
            start_at = self.sched.now + rng.randrange(0, msec(100))
            self.sched.schedule(start_at, self._open_bg, ep)

    def _open_bg(self, ep: TcpEndpoint) -> None:
        ep.open()

    def _stop_background(self) -> None:
        for bg in self._bg_flows:
            bg.client.abort()
        self._bg_flows.clear()


class _BgClientShim:
    """Delivery adapter: hands packets for a background source host to its
    single endpoint."""

    def __init__(self) -> None:
        self.endpoint: Optional[TcpEndpoint] = None

    def on_packet(self, pkt: Packet) -> None:
        if self.endpoint is not None:
            self.endpoint.on_segment(pkt)


def run_scenario(
    scenario: Scenario,
    policy_name: Optional[str] = None,
    seed: Optional[int] = None,
    *,
    flow_key_mode: Optional[FlowKeyMode] = None,
    route_update_delay_ns: Optional[int] = None,
    max_sim_ns: int = DEFAULT_MAX_SIM_NS,
) -> RunReport:
    """Execute one (scenario, policy, seed) run and gather its report."""
    scenario.validate()
    policy_name = policy_name or scenario.policy
    seed = scenario.seed if seed is None else seed
    mode = flow_key_mode or scenario.flow_key_mode
    route_delay = (
        scenario.route_update_delay_ns if route_update_delay_ns is None else route_update_delay_ns
    )

    sched = Scheduler()
    streams = RngStreams(seed)
    policy = make_policy(
        policy_name, scenario.k, streams, epsilon=scenario.epsilon, ucb_c=scenario.ucb_c
    )
    network = Network(sched, scenario)

    records: list[FlowRecord] = []
    half_open_log: list[HalfOpenInterval] = []

    client_hosts: dict[int, ClientHost] = {}
    server_hosts: dict[int, ServerHost] = {}
    for pair in range(scenario.pairs):
        client = ClientHost(CLIENT_HOST_BASE + pair)
        server = ServerHost(
            sched, SERVER_HOST_BASE + pair, network.server_emit, half_open_log
        )
        client_hosts[pair] = client
        server_hosts[pair] = server
        network.branch_side[client.host_id] = client
        network.wan_side[server.host_id] = server

    flows = expand_workload(scenario, streams)
    for spec in flows:
        serve_bytes = spec.size_bytes if spec.direction == DOWNLOAD else 0
        server_hosts[spec.pair].register(
            spec.server_port, serve_bytes, spec.direction == DOWNLOAD
        )

    driver_box: list[WorkloadDriver] = []

    def on_path_chosen(key, conn, path):
        driver_box[0].on_path_chosen(key, conn, path)

    router = MultihomingRouter(
        sched,
        scenario.k,
        ROUTER_HOST,
        network.router_emit_wan,
        network.router_emit_lan,
        baseline_select=None if policy.uses_race else policy.select_path,
        flow_key_mode=mode,
        route_update_delay_ns=route_delay,
        nat_linger_ns=2 * scenario.max_rtt_ns,
        on_path_chosen=on_path_chosen,
    )
    network.router = router

    throughput: dict[tuple[int, int], int] = {}

    def make_tap(path: int):
        def tap(now: int, pkt: Packet) -> None:
            if pkt.payload_len:
                bucket = now // THROUGHPUT_BUCKET_NS
                slot = (path, bucket)
                throughput[slot] = throughput.get(slot, 0) + pkt.payload_len * 8

        return tap

    for i in range(1, scenario.k + 1):
        network.wan_fwd[i].deliver_tap = make_tap(i)
        network.wan_rev[i].deliver_tap = make_tap(i)

    driver = WorkloadDriver(
        sched,
        scenario,
        network,
        router,
        policy,
        flows,
        client_hosts,
        server_hosts,
        streams,
        records,
    )
    driver_box.append(driver)
    driver.start()
    sched.run_until(max_sim_ns)
    driver.finalize()

    report = RunReport(
        scenario=scenario.name,
        policy=policy.label(),
        seed=seed,
        k=scenario.k,
        flow_key_mode=mode,
        duration_ns=sched.now,
        flow_records=records,
        counters=dict(router.counters),
        link_stats=[link.stats() for link in network.all_links()],
        throughput_bits=throughput,
        half_open=half_open_log,
        violations=list(router.violations) + list(driver.audit_problems),
        events_scheduled=sched.scheduled_count,
        events_fired=sched.fired_count,
        events_cancelled=sched.cancelled_count,
        events_pending=sched.pending_count(),
    )
    return report
