"""The multihoming edge router.

For every new TCP flow arriving from the branch side, the router either asks
a baseline policy for a WAN path, or (in SYN-race mode) duplicates the SYN
across all k WAN links with per-link source NAT, commits to the link whose
SYN-ACK returns first, resets the server on the k-1 losing links, and pins
the flow to the winning link in its Active-Flow and routing tables until the
flow finishes (FIN handshake observed, RST, or idle timeout).

Only flag-bearing packets (SYN / SYN-ACK / FIN / RST) change router state;
everything else is rewritten and forwarded along the recorded path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .nettopo import ACK, FIN, RST, SYN, Address, FlowKey, FlowKeyMode, Packet
from .simcore import Scheduler, sec

ConnKey = tuple[Address, Address]  # (branch-side source, destination)

DEFAULT_HANDSHAKE_TIMEOUT_NS = sec(3.0)
DEFAULT_IDLE_TIMEOUT_NS = sec(30.0)
NAT_PORT_RANGE = (20000, 65000)


@dataclass
class NatBinding:
    """Translation between a branch-side connection endpoint and the WAN-side
    address of one router interface.

    `cancelled` marks a losing race path (its traffic is absorbed here);
    `lingering` marks a torn-down flow whose stragglers still translate until
    the binding is reaped."""

    inner: Address
    outer: Address
    peer: Address
    path: int
    flow_key: FlowKey
    cancelled: bool = False
    lingering: bool = False

    @property
    def dead(self) -> bool:
        return self.cancelled or self.lingering


@dataclass
class PendingHandshake:
    """A SYN race in flight: one binding per path, no winner yet."""

    flow_key: FlowKey
    conn: ConnKey
    original_syn: Packet
    bindings: list[NatBinding]
    syn_received_at: int
    winner: Optional[int] = None
    timeout_handle: int = -1
    parked_syns: list[Packet] = field(default_factory=list)
    # SYN-ACKs that arrived in the current tick; resolved at tick end so a
    # same-tick race deterministically goes to the lowest path index.
    candidates: Optional[list[tuple[int, Packet]]] = None


@dataclass
class ConnTrack:
    binding: NatBinding
    # FIN bookkeeping: a flow is complete once both sides' FINs were seen and
    # each has been covered by a cumulative ACK from the other side.
    fin_lan_seq: Optional[int] = None
    fin_wan_seq: Optional[int] = None
    lan_fin_acked: bool = False
    wan_fin_acked: bool = False

    def teardown_ready(self) -> bool:
        return (
            self.fin_lan_seq is not None
            and self.fin_wan_seq is not None
            and self.lan_fin_acked
            and self.wan_fin_acked
        )


@dataclass
class AfEntry:
    path: int
    installed_at: int
    conns: dict[ConnKey, ConnTrack] = field(default_factory=dict)
    last_activity: int = 0
    idle_handle: int = -1


class MultihomingRouter:
    """Router state machine; owned and driven by a single simulation run.

    `baseline_select` picks a path for each new flow; when it is None the
    router runs the duplicated-SYN race instead. Packets are emitted through
    the injected emit_wan / emit_lan callables.
    """

    def __init__(
        self,
        sched: Scheduler,
        k: int,
        host_id: int,
        emit_wan: Callable[[int, Packet], None],
        emit_lan: Callable[[Packet], None],
        *,
        baseline_select: Optional[Callable[[tuple[int, int]], int]] = None,
        flow_key_mode: FlowKeyMode = FlowKeyMode.FIVE_TUPLE,
        route_update_delay_ns: int = 0,
        handshake_timeout_ns: int = DEFAULT_HANDSHAKE_TIMEOUT_NS,
        idle_timeout_ns: int = DEFAULT_IDLE_TIMEOUT_NS,
        nat_linger_ns: int = sec(1.0),
        on_path_chosen: Optional[Callable[[FlowKey, ConnKey, int], None]] = None,
        on_flow_end: Optional[Callable[[FlowKey, ConnKey, str], None]] = None,
    ) -> None:
        if k < 1:
            raise ValueError("router needs at least one WAN path")
        self.sched = sched
        self.k = k
        self.host_id = host_id
        self.emit_wan = emit_wan
        self.emit_lan = emit_lan
        self.baseline_select = baseline_select
        self.flow_key_mode = flow_key_mode
        self.route_update_delay_ns = route_update_delay_ns
        self.handshake_timeout_ns = handshake_timeout_ns
        self.idle_timeout_ns = idle_timeout_ns
        self.nat_linger_ns = nat_linger_ns
        self.on_path_chosen = on_path_chosen
        self.on_flow_end = on_flow_end

        self.pending: dict[FlowKey, PendingHandshake] = {}
        self.af_table: dict[FlowKey, AfEntry] = {}
        self.route_table: dict[FlowKey, int] = {}
        self.default_route = 1

        self._conn_bindings: dict[ConnKey, NatBinding] = {}
        self._wan_bindings: dict[tuple[int, int, Address], NatBinding] = {}
        self._ports_in_use: dict[int, set[int]] = {i: set() for i in range(1, k + 1)}
        self._port_cursor: dict[int, int] = {i: NAT_PORT_RANGE[0] for i in range(1, k + 1)}

        self.counters = {
            "flows_seen": 0,
            "flows_established": 0,
            "syn_duplicated": 0,
            "rst_sent": 0,
            "late_synack_dropped": 0,
            "cancelled_path_dropped": 0,
            "stray_dropped": 0,
            "handshake_timeouts": 0,
            "idle_timeouts": 0,
            "nat_exhaustions": 0,
            "anomalies_default_routed": 0,
            "teardowns": 0,
        }
        self.violations: list[str] = []

    # -- NAT plumbing ----------------------------------------------------

    def _alloc_binding(self, inner: Address, peer: Address, path: int, key: FlowKey):
        used = self._ports_in_use[path]
        lo, hi = NAT_PORT_RANGE
        span = hi - lo
        cursor = self._port_cursor[path]
        for _ in range(span):
            port = cursor
            cursor += 1
            if cursor >= hi:
                cursor = lo
            if port not in used:
                used.add(port)
                self._port_cursor[path] = cursor
                outer = Address(self.host_id, path, port)
                binding = NatBinding(inner, outer, peer, path, key)
                self._wan_bindings[(path, port, peer)] = binding
                self._conn_bindings_register(binding)
                return binding
        self.counters["nat_exhaustions"] += 1
        return None

    def _conn_bindings_register(self, binding: NatBinding) -> None:
        self._conn_bindings[(binding.inner, binding.peer)] = binding

    def _cancel_binding(self, binding: NatBinding) -> None:
        """Race loser: absorb its leftovers here until the linger expires."""
        binding.cancelled = True
        conn = (binding.inner, binding.peer)
        if self._conn_bindings.get(conn) is binding:
            del self._conn_bindings[conn]
        self.sched.schedule(self.sched.now + self.nat_linger_ns, self._reap_binding, binding)

    def _linger_binding(self, binding: NatBinding) -> None:
        """Torn-down flow: keep translating stragglers until the linger expires."""
        binding.lingering = True
        self.sched.schedule(self.sched.now + self.nat_linger_ns, self._reap_binding, binding)

    def _reap_binding(self, binding: NatBinding) -> None:
        self._wan_bindings.pop((binding.path, binding.outer.port, binding.peer), None)
        self._ports_in_use[binding.path].discard(binding.outer.port)
        conn = (binding.inner, binding.peer)
        if self._conn_bindings.get(conn) is binding:
            del self._conn_bindings[conn]

    def _release_binding_now(self, binding: NatBinding) -> None:
        binding.cancelled = True
        self._reap_binding(binding)

    # -- branch-side (LAN) input ------------------------------------------

    def on_lan_packet(self, pkt: Packet) -> None:
        now = self.sched.now
        key = FlowKey.for_connection(self.flow_key_mode, pkt.src, pkt.dst)
        conn: ConnKey = (pkt.src, pkt.dst)
        flags = pkt.flags

        if flags & SYN and not flags & ACK:
            self._on_lan_syn(pkt, key, conn, now)
            return

        binding = self._conn_bindings.get(conn)
        if binding is not None:
            if binding.lingering:
                # Straggler of a completed flow: still translate and forward.
                self._forward_to_wan(binding, pkt)
                return
            entry = self.af_table.get(key)
            if entry is not None:
                entry.last_activity = now
                track = entry.conns.get(conn)
                if track is not None:
                    if flags & RST:
                        self._forward_to_wan(binding, pkt)
                        self._teardown_conn(key, conn, "rst")
                        return
                    if flags & FIN:
                        track.fin_lan_seq = pkt.seq + pkt.payload_len
                    if (
                        flags & ACK
                        and track.fin_wan_seq is not None
                        and pkt.ack > track.fin_wan_seq
                    ):
                        track.wan_fin_acked = True
                    self._forward_to_wan(binding, pkt)
                    if track.teardown_ready():
                        self._teardown_conn(key, conn, "fin_ack_complete")
                    return
            self._forward_to_wan(binding, pkt)
            return

        pend = self.pending.get(key)
        if pend is not None and pend.conn == conn:
            if flags & RST:
                # Source gave up mid-race: cancel every path.
                self._cancel_race(pend, emit_rsts=True)
                return
            # No other branch-side packet can legally arrive while the
            # handshake races; fall through to the anomaly path.

        self.counters["anomalies_default_routed"] += 1
        self.emit_wan(self.default_route, pkt)

    def _on_lan_syn(self, pkt: Packet, key: FlowKey, conn: ConnKey, now: int) -> None:
        entry = self.af_table.get(key)
        if entry is not None:
            track = entry.conns.get(conn)
            if track is not None:
                # Retransmitted SYN of a connection we already routed.
                self._forward_to_wan(track.binding, pkt)
                return
            # New connection sharing an installed route (IP-pair mode).
            binding = self._alloc_binding(pkt.src, pkt.dst, entry.path, key)
            if binding is None:
                return
            entry.conns[conn] = ConnTrack(binding)
            entry.last_activity = now
            self._forward_to_wan(binding, pkt)
            if self.on_path_chosen is not None:
                self.on_path_chosen(key, conn, entry.path)
            return

        pend = self.pending.get(key)
        if pend is not None:
            if pend.conn == conn:
                # Source retransmitted its SYN: re-race on the same bindings.
                self.counters["syn_duplicated"] += self.k - 1
                for binding in pend.bindings:
                    self._forward_to_wan(binding, pkt)
            else:
                # Second connection of the same pair while the race is still
                # open (IP-pair mode): park it until the winner is known.
                pend.parked_syns.append(pkt)
            return

        self.counters["flows_seen"] += 1
        if self.baseline_select is not None:
            path = self.baseline_select((pkt.src.host, pkt.dst.host))
            if not 1 <= path <= self.k:
                raise ValueError(f"policy selected invalid path {path}")
            binding = self._alloc_binding(pkt.src, pkt.dst, path, key)
            if binding is None:
                return
            self._install(key, path, conn, binding, now)
            self._forward_to_wan(binding, pkt, delay=self.route_update_delay_ns)
            return

        # SYN race: duplicate the SYN across every WAN link.
        bindings = []
        for path in range(1, self.k + 1):
            binding = self._alloc_binding(pkt.src, pkt.dst, path, key)
            if binding is None:
                for b in bindings:
                    self._release_binding_now(b)
                return
            bindings.append(binding)
        pend = PendingHandshake(key, conn, pkt, bindings, now)
        pend.timeout_handle = self.sched.schedule(
            now + self.handshake_timeout_ns, self._on_handshake_timeout, key
        )
        self.pending[key] = pend
        self.counters["syn_duplicated"] += self.k - 1
        for binding in bindings:
            self._forward_to_wan(binding, pkt)

    # -- WAN-side input ----------------------------------------------------

    def on_wan_packet(self, path: int, pkt: Packet) -> None:
        now = self.sched.now
        binding = self._wan_bindings.get((path, pkt.dst.port, pkt.src))
        if binding is None:
            self.counters["stray_dropped"] += 1
            return
        flags = pkt.flags

        if binding.cancelled:
            if flags & SYN and flags & ACK:
                self.counters["late_synack_dropped"] += 1
            else:
                self.counters["cancelled_path_dropped"] += 1
            return
        if binding.lingering:
            self._forward_to_lan(binding, pkt)
            return

        key = binding.flow_key
        conn = (binding.inner, binding.peer)

        if flags & SYN and flags & ACK:
            pend = self.pending.get(key)
            if pend is not None and pend.winner is None:
                if pend.candidates is None:
                    pend.candidates = [(path, pkt)]
                    self.sched.schedule(now, self._resolve_race, key)
                else:
                    pend.candidates.append((path, pkt))
                return
            # Established flow: a retransmitted SYN-ACK on the winner path.
            self._forward_to_lan(binding, pkt)
            return

        entry = self.af_table.get(key)
        if entry is None or conn not in entry.conns:
            self.counters["stray_dropped"] += 1
            return
        entry.last_activity = now
        track = entry.conns[conn]
        if flags & RST:
            self._forward_to_lan(binding, pkt)
            self._teardown_conn(key, conn, "rst")
            return
        if flags & FIN:
            track.fin_wan_seq = pkt.seq + pkt.payload_len
        if flags & ACK and track.fin_lan_seq is not None and pkt.ack > track.fin_lan_seq:
            track.lan_fin_acked = True
        self._forward_to_lan(binding, pkt)
        if track.teardown_ready():
            self._teardown_conn(key, conn, "fin_ack_complete")

    def _resolve_race(self, key: FlowKey) -> None:
        pend = self.pending.get(key)
        if pend is None or pend.winner is not None or not pend.candidates:
            return
        winner_path, winner_synack = min(pend.candidates, key=lambda c: c[0])
        self.counters["late_synack_dropped"] += len(pend.candidates) - 1
        pend.candidates = None
        self._choose_winner(pend, winner_path, winner_synack, self.sched.now)

    def _choose_winner(self, pend: PendingHandshake, path: int, synack: Packet, now: int) -> None:
        pend.winner = path
        self.sched.cancel(pend.timeout_handle)
        del self.pending[pend.flow_key]
        winner_binding = None
        for binding in pend.bindings:
            if binding.path == path:
                winner_binding = binding
                continue
            # Cancel the losing path: reset the destination, then keep the
            # dead binding around so the raced SYN-ACK is absorbed here.
            rst = Packet(
                pend.flow_key, RST, 0, 0, 0, binding.outer, binding.peer, now
            )
            self.emit_wan(binding.path, rst)
            self.counters["rst_sent"] += 1
            self._cancel_binding(binding)
        self._install(pend.flow_key, path, pend.conn, winner_binding, now)
        self._forward_to_lan(winner_binding, synack, delay=self.route_update_delay_ns)
        for parked in pend.parked_syns:
            self._on_lan_syn(
                parked,
                pend.flow_key,
                (parked.src, parked.dst),
                now,
            )

    # -- table management ----------------------------------------------------

    def _install(self, key: FlowKey, path: int, conn: ConnKey, binding: NatBinding, now: int) -> None:
        # The race registered one binding per path under the same branch-side
        # connection; make sure the winner owns the LAN-side lookup.
        self._conn_bindings_register(binding)
        entry = AfEntry(path, now, {conn: ConnTrack(binding)}, last_activity=now)
        entry.idle_handle = self.sched.schedule(
            now + self.idle_timeout_ns, self._on_idle_check, key
        )
        self.af_table[key] = entry
        self.route_table[key] = path
        self.counters["flows_established"] += 1
        self._check_tables()
        if self.on_path_chosen is not None:
            self.on_path_chosen(key, conn, path)

    def _teardown_conn(self, key: FlowKey, conn: ConnKey, cause: str) -> None:
        entry = self.af_table.get(key)
        if entry is None:
            return
        track = entry.conns.pop(conn, None)
        if track is not None:
            self._linger_binding(track.binding)
        self.counters["teardowns"] += 1
        if not entry.conns:
            del self.af_table[key]
            del self.route_table[key]
            self.sched.cancel(entry.idle_handle)
            self._check_tables()
            if self.on_flow_end is not None:
                self.on_flow_end(key, conn, cause)

    def _on_idle_check(self, key: FlowKey) -> None:
        entry = self.af_table.get(key)
        if entry is None:
            return
        now = self.sched.now
        deadline = entry.last_activity + self.idle_timeout_ns
        if now < deadline:
            entry.idle_handle = self.sched.schedule(deadline, self._on_idle_check, key)
            return
        self.counters["idle_timeouts"] += 1
        for conn in list(entry.conns):
            self._teardown_conn(key, conn, "idle_timeout")

    def _on_handshake_timeout(self, key: FlowKey) -> None:
        pend = self.pending.get(key)
        if pend is None or pend.winner is not None:
            return
        self.counters["handshake_timeouts"] += 1
        self._cancel_race(pend, emit_rsts=False)

    def _cancel_race(self, pend: PendingHandshake, emit_rsts: bool) -> None:
        del self.pending[pend.flow_key]
        self.sched.cancel(pend.timeout_handle)
        for binding in pend.bindings:
            if emit_rsts:
                rst = Packet(
                    pend.flow_key, RST, 0, 0, 0, binding.outer, binding.peer, self.sched.now
                )
                self.emit_wan(binding.path, rst)
                self.counters["rst_sent"] += 1
            self._release_binding_now(binding)

    def _check_tables(self) -> None:
        if set(self.af_table) != set(self.route_table):
            self.violations.append(
                f"t={self.sched.now}: AF table keys diverge from route table keys"
            )

    # -- forwarding -----------------------------------------------------------

    def _forward_to_wan(self, binding: NatBinding, pkt: Packet, delay: int = 0) -> None:
        out = pkt.rewritten(src=binding.outer, flow_key=binding.flow_key)
        if delay > 0:
            self.sched.schedule(self.sched.now + delay, self._emit_wan_later, (binding.path, out))
        else:
            self.emit_wan(binding.path, out)

    def _emit_wan_later(self, arg: tuple[int, Packet]) -> None:
        self.emit_wan(arg[0], arg[1])

    def _forward_to_lan(self, binding: NatBinding, pkt: Packet, delay: int = 0) -> None:
        out = pkt.rewritten(dst=binding.inner, flow_key=binding.flow_key)
        if delay > 0:
            self.sched.schedule(self.sched.now + delay, self.emit_lan, out)
        else:
            self.emit_lan(out)

    def route_of(self, key: FlowKey) -> Optional[int]:
        return self.route_table.get(key)
