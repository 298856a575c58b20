"""Simplified TCP New Reno endpoints.

A TcpEndpoint plays either side of a connection: the initiator sends the SYN,
the listener answers with SYN-ACK (and retransmits it on timeout until the
handshake completes). Data transfer uses cumulative ACKs (no SACK, no delayed
ACK), slow start / congestion avoidance, triple-duplicate-ACK fast retransmit
with New Reno partial-ACK recovery, and an RFC 6298-style retransmission
timer. Only the first partial ACK of a recovery episode rewinds that timer
(the "impatient" variant), so heavy burst loss falls back to a go-back-N
timeout instead of plugging one hole per round trip. On timeout the sender
resends from the last cumulative ACK.

Sequence numbers are byte offsets from zero; the FIN occupies one virtual
byte at the end of the stream. The side that produced the data closes first;
the other side answers the FIN with its own FIN+ACK.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from .nettopo import ACK, FIN, RST, SYN, TCP_HEADER_BYTES, Address, FlowKey, Packet
from .simcore import Scheduler, msec, sec

DEFAULT_MSS = 1448
DEFAULT_INITIAL_WINDOW_SEGMENTS = 10
DEFAULT_RECEIVE_WINDOW = 64 * 1024 * 1024
DEFAULT_INITIAL_RTO_NS = sec(1.0)
DEFAULT_MIN_RTO_NS = msec(200)
DEFAULT_MAX_RTO_NS = sec(60.0)

PACE_BURST_SEGMENTS = 4
MAX_HANDSHAKE_RETRIES = 8
_BITS_PER_NS_SCALE = 8 * 1_000_000_000


class TcpState(Enum):
    CLOSED = "closed"
    SYN_SENT = "syn_sent"
    SYN_RCVD = "syn_rcvd"
    ESTABLISHED = "established"
    DONE = "done"
    ABORTED = "aborted"


@dataclass
class FlowRecord:
    """Per-flow outcome as seen by the flow source."""

    flow_key: FlowKey
    flow_id: int
    direction: str
    bytes: int
    chosen_path: Optional[int] = None
    syn_sent_at: Optional[int] = None
    established_at: Optional[int] = None
    completed_at: Optional[int] = None
    fct_ns: Optional[int] = None
    fct_dest_ns: Optional[int] = None
    retransmissions: int = 0
    aborted: bool = False
    is_background: bool = False
    pair: int = 0
    server_port: int = 0
    synacks_seen: int = 0

    @property
    def completed(self) -> bool:
        return self.fct_ns is not None


class TcpEndpoint:
    """One side of a connection.

    `send` injects a packet into the network at the current clock; the owner
    delivers incoming segments through on_segment(). `closes_first` marks the
    side whose FIN starts the teardown (the data producer).
    """

    __slots__ = (
        "sched",
        "local",
        "remote",
        "send",
        "flow_key",
        "name",
        "on_established",
        "on_complete",
        "on_abort",
        "state",
        "mss",
        "receive_window",
        "rate_cap_bps",
        "bytes_to_send",
        "snd_una",
        "snd_nxt",
        "cwnd",
        "ssthresh",
        "dupacks",
        "in_recovery",
        "recover",
        "_recovery_rto_reset_done",
        "closes_first",
        "fin_sent",
        "_pace_tokens",
        "_pace_bucket",
        "_pace_last_refill",
        "_pace_residual",
        "_pace_timer_pending",
        "rcv_nxt",
        "_ooo",
        "_peer_fin_seq",
        "peer_fin_received",
        "rto",
        "min_rto",
        "max_rto",
        "srtt",
        "rttvar",
        "base_rtt",
        "_rto_deadline",
        "_rto_timer_handle",
        "_rto_timer_at",
        "_timing",
        "_high_water",
        "syn_sent_at",
        "syn_received_at",
        "established_at",
        "completed_at",
        "retransmissions",
        "timeouts",
        "synacks_in_synsent",
        "segments_received",
        "malformed_dropped",
    )

    def __init__(
        self,
        sched: Scheduler,
        local: Address,
        remote: Address,
        send: Callable[[Packet], None],
        *,
        bytes_to_send: int = 0,
        closes_first: bool = False,
        flow_key: Optional[FlowKey] = None,
        on_established: Optional[Callable[["TcpEndpoint"], None]] = None,
        on_complete: Optional[Callable[["TcpEndpoint"], None]] = None,
        on_abort: Optional[Callable[["TcpEndpoint"], None]] = None,
        mss: int = DEFAULT_MSS,
        initial_window_segments: int = DEFAULT_INITIAL_WINDOW_SEGMENTS,
        receive_window: int = DEFAULT_RECEIVE_WINDOW,
        initial_rto_ns: int = DEFAULT_INITIAL_RTO_NS,
        min_rto_ns: int = DEFAULT_MIN_RTO_NS,
        max_rto_ns: int = DEFAULT_MAX_RTO_NS,
        rate_cap_bps: Optional[int] = None,
        name: str = "",
    ) -> None:
        self.sched = sched
        self.local = local
        self.remote = remote
        self.send = send
        self.flow_key = flow_key
        self.name = name or f"ep[{local.host}:{local.port}]"
        self.on_established = on_established
        self.on_complete = on_complete
        self.on_abort = on_abort

        self.state = TcpState.CLOSED
        self.mss = mss
        self.receive_window = receive_window
        self.rate_cap_bps = rate_cap_bps

        # Sender side.
        self.bytes_to_send = bytes_to_send
        self.snd_una = 0
        self.snd_nxt = 0
        self.cwnd = initial_window_segments * mss
        self.ssthresh = receive_window
        self.dupacks = 0
        self.in_recovery = False
        self.recover = -1
        self._recovery_rto_reset_done = False
        self.closes_first = closes_first
        self.fin_sent = False

        # Source pacing (rate-capped background senders only).
        self._pace_bucket = PACE_BURST_SEGMENTS * (mss + TCP_HEADER_BYTES)
        self._pace_tokens = self._pace_bucket
        self._pace_last_refill = 0
        self._pace_residual = 0
        self._pace_timer_pending = False

        # Receiver side.
        self.rcv_nxt = 0
        self._ooo: list[tuple[int, int]] = []
        self._peer_fin_seq: Optional[int] = None
        self.peer_fin_received = False

        # RTO machinery (RFC 6298 arithmetic on integer nanoseconds).
        self.rto = initial_rto_ns
        self.min_rto = min_rto_ns
        self.max_rto = max_rto_ns
        self.srtt: Optional[int] = None
        self.rttvar = 0
        self.base_rtt: Optional[int] = None
        self._rto_deadline: Optional[int] = None
        self._rto_timer_handle: Optional[int] = None
        self._rto_timer_at = 0
        self._timing: Optional[tuple[int, int]] = None  # (seq end, sent at)
        self._high_water = 0  # highest sequence ever transmitted

        # Bookkeeping.
        self.syn_sent_at: Optional[int] = None
        self.syn_received_at: Optional[int] = None
        self.established_at: Optional[int] = None
        self.completed_at: Optional[int] = None
        self.retransmissions = 0
        self.timeouts = 0
        self.synacks_in_synsent = 0
        self.segments_received = 0
        self.malformed_dropped = 0

    # -- helpers -------------------------------------------------------

    def _mk(self, flags: int, seq: int, payload_len: int) -> Packet:
        return Packet(
            self.flow_key,
            flags,
            seq,
            self.rcv_nxt,
            payload_len,
            self.local,
            self.remote,
            self.sched.now,
        )

    @property
    def stream_end(self) -> int:
        return self.bytes_to_send

    @property
    def fin_acked(self) -> bool:
        return self.fin_sent and self.snd_una >= self.bytes_to_send + 1

    @property
    def all_data_acked(self) -> bool:
        return self.snd_una >= self.bytes_to_send

    @property
    def in_flight(self) -> int:
        return self.snd_nxt - self.snd_una

    def _finished(self) -> bool:
        return self.state is TcpState.DONE or self.state is TcpState.ABORTED

    # -- connection management ----------------------------------------

    def open(self) -> None:
        """Initiate the connection: emit a SYN and arm its retransmit timer."""
        if self.state is not TcpState.CLOSED:
            raise RuntimeError(f"{self.name}: open() on non-closed endpoint")
        self.state = TcpState.SYN_SENT
        self.syn_sent_at = self.sched.now
        self.send(self._mk(SYN, 0, 0))
        self._arm_rto(self.sched.now + self.rto)

    def accept_syn(self, pkt: Packet) -> None:
        """Listener side: answer an incoming SYN with SYN-ACK."""
        if self.state is not TcpState.CLOSED:
            raise RuntimeError(f"{self.name}: accept_syn() on non-closed endpoint")
        self.state = TcpState.SYN_RCVD
        self.syn_received_at = self.sched.now
        self._timing = (0, self.sched.now)  # SYN-ACK -> handshake ACK sample
        self.send(self._mk(SYN | ACK, 0, 0))
        self._arm_rto(self.sched.now + self.rto)

    def abort(self) -> None:
        if self._finished():
            return
        self.state = TcpState.ABORTED
        self._rto_deadline = None
        if self.on_abort is not None:
            self.on_abort(self)

    def _establish(self) -> None:
        self.state = TcpState.ESTABLISHED
        self.established_at = self.sched.now
        if self.on_established is not None:
            self.on_established(self)
        self._try_send()

    def _complete_if_done(self) -> None:
        if (
            self.peer_fin_received
            and self.fin_sent
            and self.snd_una >= self.bytes_to_send + 1
            and self.state is TcpState.ESTABLISHED
        ):
            self.state = TcpState.DONE
            self.completed_at = self.sched.now
            self._rto_deadline = None
            if self.on_complete is not None:
                self.on_complete(self)

    # -- segment input -------------------------------------------------

    def on_segment(self, pkt: Packet) -> None:
        self.segments_received += 1
        flags = pkt.flags
        if self.state is TcpState.ESTABLISHED:
            if not flags & (SYN | RST):
                if flags & ACK:
                    self._process_ack(pkt)
                if pkt.payload_len:
                    self._process_data(pkt)
                elif flags & FIN:
                    self._process_fin(pkt)
                if self.fin_sent:
                    self._complete_if_done()
                return
            if flags & RST:
                self.abort()
                return
            # Duplicate handshake segment: re-ACK so a listener stuck in
            # SYN-received (its first ACK was lost) can move on.
            self.send(self._mk(ACK, self.snd_nxt, 0))
            return
        self._slow_path(pkt, flags)

    def _slow_path(self, pkt: Packet, flags: int) -> None:
        now = self.sched.now
        if flags & RST:
            if self.state in (TcpState.SYN_SENT, TcpState.SYN_RCVD):
                self.abort()
            return
        if self._finished():
            # TIME_WAIT courtesy: re-ACK a retransmitted FIN so the peer can finish.
            if flags & FIN and self.state is TcpState.DONE:
                self.send(self._mk(ACK, self.snd_nxt, 0))
            return

        if self.state is TcpState.SYN_SENT:
            if flags & SYN and flags & ACK:
                self.synacks_in_synsent += 1
                if self.timeouts == 0 and self.syn_sent_at is not None:
                    self._rtt_sample(now - self.syn_sent_at)
                self.send(self._mk(ACK, 0, 0))
                self._rto_deadline = None
                self._establish()
            else:
                self.malformed_dropped += 1
            return

        if self.state is TcpState.SYN_RCVD:
            if flags & SYN and not flags & ACK:
                self.send(self._mk(SYN | ACK, 0, 0))  # duplicate SYN: re-answer
                return
            if flags & ACK:
                if self._timing is not None:
                    self._rtt_sample(now - self._timing[1])
                    self._timing = None
                self._rto_deadline = None
                self._establish()
                if pkt.payload_len:
                    self._process_data(pkt)
                elif flags & FIN:
                    self._process_fin(pkt)
                return
            self.malformed_dropped += 1
            return

        self.malformed_dropped += 1

    # -- ACK clock and congestion control -------------------------------

    def _process_ack(self, pkt: Packet) -> None:
        ack = pkt.ack
        now = self.sched.now
        mss = self.mss
        if ack > self.snd_nxt:
            # The ACK covers data past our send pointer: a timeout rewound
            # snd_nxt and the receiver had the rest buffered. Skip ahead so
            # go-back-N never resends ranges the peer already holds.
            self.snd_nxt = ack
        if ack > self.snd_una:
            newly = ack - self.snd_una
            self.snd_una = ack
            if self._timing is not None and ack >= self._timing[0]:
                self._rtt_sample(now - self._timing[1])
                self._timing = None
            if self.in_recovery:
                if ack >= self.recover:
                    inflight = self.snd_nxt - ack
                    self.cwnd = min(self.ssthresh, inflight + mss)
                    self.in_recovery = False
                    self.dupacks = 0
                    self._restart_rto(now)
                else:
                    # New Reno partial ACK: plug the next hole right away.
                    self._retransmit_head()
                    self.cwnd = max(self.cwnd - newly + mss, mss)
                    if not self._recovery_rto_reset_done:
                        # Impatient variant: only the first partial ACK
                        # rewinds the timer, so a long loss burst falls back
                        # to the (much faster) go-back-N timeout path.
                        self._restart_rto(now)
                        self._recovery_rto_reset_done = True
            else:
                self.dupacks = 0
                if self.cwnd < self.ssthresh:
                    self.cwnd += mss
                else:
                    self.cwnd += (mss * mss) // self.cwnd or 1
                if self.cwnd > self.receive_window:
                    self.cwnd = self.receive_window
                if self.snd_nxt > ack or (self.fin_sent and not self.fin_acked):
                    self._restart_rto(now)
                else:
                    self._rto_deadline = None
            self._try_send()
            return

        if (
            ack == self.snd_una
            and pkt.payload_len == 0
            and not pkt.flags & (FIN | SYN)
            and self.snd_nxt > self.snd_una
        ):
            if self.in_recovery:
                self.cwnd += mss
                self._try_send()
            else:
                self.dupacks += 1
                if self.dupacks == 3 and self.snd_una >= self.recover:
                    self._enter_fast_recovery(now)

    def _enter_fast_recovery(self, now: int) -> None:
        mss = self.mss
        self.ssthresh = max(self.in_flight // 2, 2 * mss)
        self.recover = self.snd_nxt
        self.in_recovery = True
        self._recovery_rto_reset_done = False
        self._retransmit_head()
        self.cwnd = self.ssthresh + 3 * mss
        self._restart_rto(now)

    def _retransmit_head(self) -> None:
        """Resend the segment at snd_una (data, or the FIN if data is done)."""
        self.retransmissions += 1
        self._timing = None  # Karn: no RTT samples across retransmits
        if self.fin_sent and self.snd_una >= self.bytes_to_send:
            self.send(self._mk(FIN | ACK, self.bytes_to_send, 0))
        else:
            length = min(self.mss, self.bytes_to_send - self.snd_una)
            self.send(self._mk(ACK, self.snd_una, length))

    def _rtt_sample(self, m: int) -> None:
        if m <= 0:
            m = 1
        if self.srtt is None:
            self.srtt = m
            self.rttvar = m // 2
        else:
            diff = self.srtt - m
            if diff < 0:
                diff = -diff
            self.rttvar = (3 * self.rttvar + diff) // 4
            self.srtt = (7 * self.srtt + m) // 8
        rto = self.srtt + max(4 * self.rttvar, 1)
        self.rto = min(max(rto, self.min_rto), self.max_rto)

    # -- receive path ----------------------------------------------------

    def _process_data(self, pkt: Packet) -> None:
        seq = pkt.seq
        end = seq + pkt.payload_len
        if end <= self.rcv_nxt:
            pass  # stale duplicate
        elif seq <= self.rcv_nxt:
            self.rcv_nxt = end
            if self._ooo:
                self._drain_ooo()
            elif self._peer_fin_seq == end:
                self.rcv_nxt = end + 1
                self.peer_fin_received = True
                self._peer_fin_seq = None
        else:
            self._stash_ooo(seq, end)
        if pkt.flags & FIN:
            self._note_fin(end)
        if not self._after_receive():
            self.send(self._mk(ACK, self.snd_nxt, 0))

    def _process_fin(self, pkt: Packet) -> None:
        self._note_fin(pkt.seq)
        if not self._after_receive():
            self.send(self._mk(ACK, self.snd_nxt, 0))

    def _note_fin(self, fin_seq: int) -> None:
        if self.peer_fin_received:
            return
        if fin_seq == self.rcv_nxt:
            self.rcv_nxt += 1
            self.peer_fin_received = True
        elif fin_seq > self.rcv_nxt:
            self._peer_fin_seq = fin_seq  # data still missing in front of it

    def _after_receive(self) -> bool:
        """Give the sender a chance to emit (data or our FIN) before pure-ACKing.

        Returns True when _try_send emitted at least one segment, which
        already carries the cumulative ACK.
        """
        before = self.snd_nxt
        self._try_send()
        return self.snd_nxt != before

    def _drain_ooo(self) -> None:
        ooo = self._ooo
        i = 0
        n = len(ooo)
        rcv = self.rcv_nxt
        while i < n and ooo[i][0] <= rcv:
            if ooo[i][1] > rcv:
                rcv = ooo[i][1]
            i += 1
        if i:
            del ooo[:i]
            self.rcv_nxt = rcv
        if self._peer_fin_seq is not None and self._peer_fin_seq == self.rcv_nxt:
            self.rcv_nxt += 1
            self.peer_fin_received = True
            self._peer_fin_seq = None

    def _stash_ooo(self, s: int, e: int) -> None:
        # Ranges are disjoint and sorted; arrivals usually extend the tail.
        ooo = self._ooo
        if not ooo or s > ooo[-1][1]:
            ooo.append((s, e))
            return
        if s == ooo[-1][1]:
            ooo[-1] = (ooo[-1][0], max(e, ooo[-1][1]))
            return
        merged = []
        for a, b in ooo:
            if b < s or e < a:
                merged.append((a, b))
            else:
                s, e = min(s, a), max(e, b)
        merged.append((s, e))
        merged.sort()
        self._ooo = merged

    # -- transmit path ---------------------------------------------------

    def _try_send(self) -> None:
        if self.state is not TcpState.ESTABLISHED:
            return
        now = self.sched.now
        cwnd = self.cwnd
        limit = cwnd if cwnd < self.receive_window else self.receive_window
        end = self.bytes_to_send
        mss = self.mss
        while True:
            snd_nxt = self.snd_nxt
            if snd_nxt < end:
                seg = end - snd_nxt
                if seg > mss:
                    seg = mss
                if snd_nxt - self.snd_una + seg > limit:
                    break
                if self.rate_cap_bps is not None and not self._pace_ok(now, seg):
                    break
                self.send(self._mk(ACK, snd_nxt, seg))
                sent_end = snd_nxt + seg
                if sent_end > self._high_water:
                    self._high_water = sent_end
                    if self._timing is None:
                        self._timing = (sent_end, now)
                else:
                    self.retransmissions += 1  # go-back-N resend (Karn: never timed)
                self.snd_nxt = sent_end
            elif self.fin_sent and snd_nxt == end:
                if snd_nxt - self.snd_una + 1 > limit:
                    break
                self.send(self._mk(FIN | ACK, end, 0))
                if end + 1 > self._high_water:
                    self._high_water = end + 1
                else:
                    self.retransmissions += 1
                self.snd_nxt = snd_nxt + 1
            elif (
                not self.fin_sent
                and self.snd_una >= end
                and (self.closes_first or self.peer_fin_received)
            ):
                self.fin_sent = True
            else:
                break
        if self._rto_deadline is None and self.snd_nxt > self.snd_una:
            self._restart_rto(now)

    def _pace_ok(self, now: int, seg: int) -> bool:
        tokens = self._pace_tokens
        if now > self._pace_last_refill:
            raw = (now - self._pace_last_refill) * self.rate_cap_bps + self._pace_residual
            add, self._pace_residual = divmod(raw, _BITS_PER_NS_SCALE)
            tokens += add
            if tokens > self._pace_bucket:
                tokens = self._pace_bucket
                self._pace_residual = 0
            self._pace_last_refill = now
        wire = seg + TCP_HEADER_BYTES
        if tokens >= wire:
            self._pace_tokens = tokens - wire
            return True
        self._pace_tokens = tokens
        if not self._pace_timer_pending:
            need = self._pace_bucket - tokens
            dt = (need * _BITS_PER_NS_SCALE + self.rate_cap_bps - 1) // self.rate_cap_bps
            self._pace_timer_pending = True
            self.sched.schedule(now + dt, self._on_pace_timer, None)
        return False

    def _on_pace_timer(self, _arg) -> None:
        self._pace_timer_pending = False
        if not self._finished():
            self._try_send()

    # -- retransmission timer ---------------------------------------------

    def _arm_rto(self, deadline: int) -> None:
        self._rto_deadline = deadline
        if self._rto_timer_handle is None:
            self._rto_timer_at = deadline
            self._rto_timer_handle = self.sched.schedule(deadline, self._on_rto_timer, None)
        elif deadline < self._rto_timer_at:
            # The deadline moved earlier (RTO shrank); the pending event would
            # fire late, so replace it.
            self.sched.cancel(self._rto_timer_handle)
            self._rto_timer_at = deadline
            self._rto_timer_handle = self.sched.schedule(deadline, self._on_rto_timer, None)

    def _restart_rto(self, now: int) -> None:
        self._arm_rto(now + self.rto)

    def _on_rto_timer(self, _arg) -> None:
        self._rto_timer_handle = None
        if self._finished() or self._rto_deadline is None:
            return
        now = self.sched.now
        if now < self._rto_deadline:
            # Lazily re-armed: the deadline moved later while the event was
            # in flight.
            self._rto_timer_at = self._rto_deadline
            self._rto_timer_handle = self.sched.schedule(
                self._rto_deadline, self._on_rto_timer, None
            )
            return
        self._rto_deadline = None
        state = self.state
        if state is TcpState.SYN_SENT:
            if self.timeouts >= MAX_HANDSHAKE_RETRIES:
                self.abort()
                return
            self.timeouts += 1
            self.retransmissions += 1
            self.send(self._mk(SYN, 0, 0))
            self.rto = min(self.rto * 2, self.max_rto)
            self._arm_rto(now + self.rto)
            return
        if state is TcpState.SYN_RCVD:
            if self.timeouts >= MAX_HANDSHAKE_RETRIES:
                self.abort()
                return
            self.timeouts += 1
            self.retransmissions += 1
            self.send(self._mk(SYN | ACK, 0, 0))
            self.rto = min(self.rto * 2, self.max_rto)
            self._arm_rto(now + self.rto)
            return
        if state is TcpState.ESTABLISHED and (
            self.snd_nxt > self.snd_una or (self.fin_sent and not self.fin_acked)
        ):
            self.timeouts += 1
            mss = self.mss
            self.ssthresh = max(self.in_flight // 2, 2 * mss)
            self.cwnd = mss
            self.recover = self.snd_nxt
            self.in_recovery = False
            self.dupacks = 0
            self._timing = None
            self.snd_nxt = self.snd_una  # go-back-N from the last cumulative ACK
            self.rto = min(self.rto * 2, self.max_rto)
            self._arm_rto(now + self.rto)
            self._try_send()
