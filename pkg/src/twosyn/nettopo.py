"""Network model: transport addresses, flow keys, TCP-ish packets, and
store-and-forward links with drop-tail FIFO queues sized to RTT * bandwidth.
"""

from __future__ import annotations

from collections import deque
from enum import Enum
from typing import Callable, NamedTuple, Optional

from .simcore import Scheduler

TCP_HEADER_BYTES = 40

# Packet flag bits.
SYN = 0x1
ACK = 0x2
FIN = 0x4
RST = 0x8

_FLAG_NAMES = ((SYN, "SYN"), (ACK, "ACK"), (FIN, "FIN"), (RST, "RST"))


def flag_names(flags: int) -> str:
    return "|".join(name for bit, name in _FLAG_NAMES if flags & bit) or "-"


class Address(NamedTuple):
    """A transport endpoint: (host, interface, port).

    The multihoming router exposes one interface per WAN path (1..k); plain
    hosts use interface 0.
    """

    host: int
    iface: int
    port: int


class FlowKeyMode(Enum):
    FIVE_TUPLE = "5tuple"
    IP_PAIR = "ippair"


class FlowKey(NamedTuple):
    """Flow identity for routing decisions.

    In IP_PAIR mode the ports are normalized to zero so every connection
    between the same two hosts collapses onto one key.
    """

    mode: FlowKeyMode
    src_host: int
    dst_host: int
    src_port: int
    dst_port: int
    protocol: str = "tcp"

    @classmethod
    def for_connection(
        cls, mode: FlowKeyMode, src: Address, dst: Address
    ) -> "FlowKey":
        if mode is FlowKeyMode.IP_PAIR:
            return cls(mode, src.host, dst.host, 0, 0)
        return cls(mode, src.host, dst.host, src.port, dst.port)


class Packet:
    """A simulated TCP segment.

    seq/ack are cumulative byte offsets within the flow (no ISN); wire size is
    payload plus a fixed 40-byte TCP/IP header.
    """

    __slots__ = ("flow_key", "flags", "seq", "ack", "payload_len", "src", "dst", "created_at")

    def __init__(
        self,
        flow_key: Optional[FlowKey],
        flags: int,
        seq: int,
        ack: int,
        payload_len: int,
        src: Address,
        dst: Address,
        created_at: int,
    ) -> None:
        if flags & SYN and flags & FIN:
            raise ValueError("SYN and FIN may not co-occur")
        if flags & (SYN | RST) and payload_len != 0:
            raise ValueError("SYN/RST packets carry no payload")
        self.flow_key = flow_key
        self.flags = flags
        self.seq = seq
        self.ack = ack
        self.payload_len = payload_len
        self.src = src
        self.dst = dst
        self.created_at = created_at

    @property
    def wire_size(self) -> int:
        return self.payload_len + TCP_HEADER_BYTES

    def rewritten(self, src: Address = None, dst: Address = None, flow_key=None) -> "Packet":
        """Copy with rewritten addressing (NAT); protocol fields untouched."""
        pkt = Packet.__new__(Packet)
        pkt.flow_key = self.flow_key if flow_key is None else flow_key
        pkt.flags = self.flags
        pkt.seq = self.seq
        pkt.ack = self.ack
        pkt.payload_len = self.payload_len
        pkt.src = self.src if src is None else src
        pkt.dst = self.dst if dst is None else dst
        pkt.created_at = self.created_at
        return pkt

    def __repr__(self) -> str:
        return (
            f"Packet({flag_names(self.flags)} seq={self.seq} ack={self.ack} "
            f"len={self.payload_len} {self.src}->{self.dst})"
        )


class Link:
    """Point-to-point link: fixed propagation delay, finite capacity, and a
    drop-tail FIFO whose occupancy counts bytes not yet serialized.

    Delivery events are scheduled at enqueue time from the serialization
    chain (`tx_free_at`); a capacity change re-paces packets whose
    serialization has not started yet, but never drops already-queued bytes.
    """

    __slots__ = (
        "name",
        "sched",
        "capacity_bps",
        "prop_delay_ns",
        "buffer_limit",
        "sizing_rtt_ns",
        "deliver",
        "tx_free_at",
        "queued_bytes",
        "_in_queue",
        "packets_in",
        "packets_delivered",
        "packets_dropped",
        "bytes_delivered",
        "deliver_tap",
    )

    def __init__(
        self,
        sched: Scheduler,
        name: str,
        capacity_bps: int,
        prop_delay_ns: int,
        deliver: Callable[[Packet], None],
        buffer_limit: Optional[int] = None,
        sizing_rtt_ns: Optional[int] = None,
    ) -> None:
        if capacity_bps <= 0:
            raise ValueError("link capacity must be positive")
        self.name = name
        self.sched = sched
        self.capacity_bps = capacity_bps
        self.prop_delay_ns = prop_delay_ns
        self.deliver = deliver
        self.sizing_rtt_ns = sizing_rtt_ns
        if buffer_limit is None and sizing_rtt_ns is not None:
            buffer_limit = self._bdp_bytes(capacity_bps)
        self.buffer_limit = buffer_limit
        self.tx_free_at = 0
        self.queued_bytes = 0
        # entries: [serialization start, serialization end, size, event handle, packet]
        self._in_queue: deque[list] = deque()
        self.packets_in = 0
        self.packets_delivered = 0
        self.packets_dropped = 0
        self.bytes_delivered = 0
        self.deliver_tap: Optional[Callable[[int, Packet], None]] = None

    def _bdp_bytes(self, capacity_bps: int) -> int:
        return (self.sizing_rtt_ns * capacity_bps) // (8 * 1_000_000_000)

    def serialization_ns(self, size_bytes: int) -> int:
        return (size_bytes * 8 * 1_000_000_000) // self.capacity_bps

    def _reap_serialized(self, now: int) -> None:
        q = self._in_queue
        while q and q[0][1] <= now:
            self.queued_bytes -= q[0][2]
            q.popleft()

    def transmit(self, pkt: Packet, now: int) -> bool:
        """Enqueue `pkt`; False means the drop-tail buffer rejected it."""
        size = pkt.wire_size
        self.packets_in += 1
        self._reap_serialized(now)
        if self.buffer_limit is not None and self.queued_bytes + size > self.buffer_limit:
            self.packets_dropped += 1
            return False
        start = self.tx_free_at if self.tx_free_at > now else now
        end = start + self.serialization_ns(size)
        self.tx_free_at = end
        self.queued_bytes += size
        handle = self.sched.schedule(end + self.prop_delay_ns, self._arrive, pkt)
        self._in_queue.append([start, end, size, handle, pkt])
        return True

    def _arrive(self, pkt: Packet) -> None:
        self.packets_delivered += 1
        self.bytes_delivered += pkt.wire_size
        if self.deliver_tap is not None:
            self.deliver_tap(self.sched.now, pkt)
        self.deliver(pkt)

    def set_capacity(self, capacity_bps: int, now: int) -> None:
        """Change capacity from `now` on.

        The packet currently being serialized finishes at the old rate;
        queued-but-unserialized packets are re-paced at the new rate. The
        buffer limit is recomputed from the sizing RTT, and any excess queued
        bytes simply drain (no retroactive drops).
        """
        if capacity_bps <= 0:
            raise ValueError("link capacity must be positive")
        self._reap_serialized(now)
        self.capacity_bps = capacity_bps
        if self.sizing_rtt_ns is not None:
            self.buffer_limit = self._bdp_bytes(capacity_bps)
        chain_end = now
        for entry in self._in_queue:
            start, end, size, handle, pkt = entry
            if start <= now:
                chain_end = end  # in service: old rate applies
                continue
            new_start = chain_end if chain_end > now else now
            new_end = new_start + self.serialization_ns(size)
            self.sched.cancel(handle)
            entry[0] = new_start
            entry[1] = new_end
            entry[3] = self.sched.schedule(new_end + self.prop_delay_ns, self._arrive, pkt)
            chain_end = new_end
        self.tx_free_at = chain_end

    @property
    def packets_in_flight(self) -> int:
        """Accepted packets not yet delivered (queued or propagating)."""
        return self.packets_in - self.packets_delivered - self.packets_dropped

    def stats(self) -> dict:
        return {
            "link": self.name,
            "packets_in": self.packets_in,
            "packets_delivered": self.packets_delivered,
            "packets_dropped": self.packets_dropped,
            "packets_in_flight": self.packets_in_flight,
            "bytes_delivered": self.bytes_delivered,
        }
