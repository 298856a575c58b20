"""New Reno endpoint behavior against hand-traced and closed-form oracles.

The harness wires two endpoints through a fixed-delay pipe with a
programmable drop pattern, so every timeline below can be traced by hand.
"""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twosyn.nettopo import ACK, FIN, SYN, Address, Packet, RST
from twosyn.simcore import Scheduler, msec, sec
from twosyn.tcpmodel import DEFAULT_MSS, TcpEndpoint, TcpState

CLIENT = Address(1, 0, 40000)
SERVER = Address(2, 0, 5000)

ONE_WAY_NS = msec(10)  # pipe delay; handshake RTT sample = 20 ms


class Pipe:
    """Zero-capacity two-sided pipe with per-transmission drop control.

    `drop` is a predicate over (global transmission index, packet); dropped
    packets vanish. Endpoints are created lazily so tests can pick sizes and
    directions per case.
    """

    def __init__(self, client_bytes=0, server_bytes=0, delay_ns=ONE_WAY_NS, drop=None):
        self.sched = Scheduler()
        self.delay_ns = delay_ns
        self.drop = drop or (lambda i, pkt: False)
        self.sent = 0
        self.dropped = []
        self.client = TcpEndpoint(
            self.sched,
            CLIENT,
            SERVER,
            self._send_from_client,
            bytes_to_send=client_bytes,
            closes_first=client_bytes > 0 or server_bytes == 0,
            name="client",
        )
        self.server = TcpEndpoint(
            self.sched,
            SERVER,
            CLIENT,
            self._send_from_server,
            bytes_to_send=server_bytes,
            closes_first=server_bytes > 0,
            name="server",
        )
        self._server_saw_syn = False

    def _send_from_client(self, pkt):
        self._transmit(pkt, self._deliver_to_server)

    def _send_from_server(self, pkt):
        self._transmit(pkt, self._deliver_to_client)

    def _transmit(self, pkt, deliver):
        idx = self.sent
        self.sent += 1
        if self.drop(idx, pkt):
            self.dropped.append((idx, pkt))
            return
        self.sched.schedule(self.sched.now + self.delay_ns, deliver, pkt)

    def _deliver_to_server(self, pkt):
        if pkt.flags & SYN and not pkt.flags & ACK and not self._server_saw_syn:
            self._server_saw_syn = True
            self.server.accept_syn(pkt)
            return
        self.server.on_segment(pkt)

    def _deliver_to_client(self, pkt):
        self.client.on_segment(pkt)

    def run(self, until=sec(300)):
        self.client.open()
        self.sched.run_until(until)
        return self


class TestHandshake:
    def test_open_emits_syn_and_enters_syn_sent(self):
        p = Pipe(client_bytes=1_000_000)
        p.client.open()
        assert p.client.state is TcpState.SYN_SENT
        assert p.sent == 1

    def test_reopening_is_an_error(self):
        p = Pipe()
        p.client.open()
        with pytest.raises(RuntimeError):
            p.client.open()

    def test_synack_establishes_and_first_window_flows(self):
        p = Pipe(client_bytes=100_000).run(until=msec(25))
        # at t=20ms the client is established and has sent its initial window
        assert p.client.state is TcpState.ESTABLISHED
        assert p.client.established_at == 2 * ONE_WAY_NS
        assert p.client.snd_nxt == 10 * DEFAULT_MSS

    def test_syn_loss_retransmits_after_initial_rto(self):
        # hand trace: SYN dropped at t=0, timer fires at exactly 1 s,
        # retransmitted SYN completes the handshake at 1 s + RTT.
        p = Pipe(client_bytes=DEFAULT_MSS, drop=lambda i, pkt: i == 0)
        p.run()
        assert p.client.timeouts >= 1
        assert p.client.established_at == sec(1) + 2 * ONE_WAY_NS

    def test_synack_loss_recovers_via_server_retransmit(self):
        p = Pipe(client_bytes=DEFAULT_MSS, drop=lambda i, pkt: bool(pkt.flags & SYN and pkt.flags & ACK and i < 2))
        p.run()
        assert p.client.completed_at is not None
        assert p.server.timeouts >= 1

    def test_zero_byte_transfer_fins_immediately_after_establishment(self):
        p = Pipe(client_bytes=0, server_bytes=0).run()
        assert p.client.completed_at is not None
        # SYN at 0, SYN-ACK at 10, establish at 20 and FIN rides out at 20;
        # FIN+ACK back at 40 completes the source.
        assert p.client.fin_sent
        assert p.client.completed_at == 4 * ONE_WAY_NS

    def test_rst_aborts(self):
        p = Pipe(client_bytes=1000)
        p.client.open()
        p.sched.run_until(msec(50))
        p.client.on_segment(Packet(None, RST, 0, 0, 0, SERVER, CLIENT, p.sched.now))
        assert p.client.state is TcpState.ABORTED


def slow_start_rounds_oracle(total_bytes, mss=DEFAULT_MSS, iw=10):
    """Independent enumeration of slow-start rounds: round j ships iw*2^j
    segments; count rounds until the transfer is covered."""
    segs = math.ceil(total_bytes / mss)
    rounds, shipped = 0, 0
    while shipped < segs:
        shipped += iw * (2**rounds)
        rounds += 1
    return rounds


def slow_start_fct_oracle(total_bytes, rtt_ns, mss=DEFAULT_MSS, iw=10):
    """Handshake (1 RTT) + data rounds + FIN teardown (1.5 RTT)."""
    return round((1 + slow_start_rounds_oracle(total_bytes, mss, iw) + 1.5) * rtt_ns)


class TestSlowStartOracle:
    def test_round_count_matches_closed_form_for_1mb(self):
        # closed form: ceil(log2(ceil(bytes / (10 MSS)) + 1))
        rounds = slow_start_rounds_oracle(1_000_000)
        closed = math.ceil(math.log2(math.ceil(1_000_000 / (10 * DEFAULT_MSS)) + 1))
        assert rounds == closed == 7

    @pytest.mark.parametrize("size", [50_000, 300_000, 1_000_000])
    def test_lossless_fct_matches_analytic_model_within_one_rtt(self, size):
        p = Pipe(server_bytes=size).run()
        assert p.client.completed_at is not None
        rtt = 2 * ONE_WAY_NS
        oracle = slow_start_fct_oracle(size, rtt)
        assert abs(p.client.completed_at - oracle) < rtt
        assert p.client.retransmissions == 0
        assert p.server.retransmissions == 0

    def test_no_loss_means_no_retransmissions(self):
        p = Pipe(client_bytes=500_000).run()
        assert p.client.retransmissions == 0
        assert p.client.timeouts == 0

    def test_cwnd_never_exceeds_receive_window(self):
        p = Pipe(client_bytes=2_000_000).run()
        assert p.client.cwnd <= p.client.receive_window


class TestLossRecovery:
    def test_single_data_drop_with_no_dupacks_recovers_by_rto(self):
        # one-segment transfer; the lone data packet (4th transmission:
        # SYN, SYN-ACK, ACK, data) is dropped, so no duplicate ACKs can
        # arrive and only the timer can recover.
        # Hand trace: establish at 20 ms (srtt=20 ms, rto floors at 200 ms),
        # data sent at 20 ms and dropped, timer fires at 220 ms, the resend
        # is ACKed at 240 ms, FIN at 240, FIN+ACK completes at 260 ms.
        p = Pipe(client_bytes=DEFAULT_MSS, drop=lambda i, pkt: i == 3)
        p.run()
        assert p.client.timeouts == 1
        assert p.client.completed_at == msec(260)

    def test_rto_backoff_doubles(self):
        # SYN dropped three times: retries at 1 s, 3 s, 7 s.
        p = Pipe(client_bytes=DEFAULT_MSS, drop=lambda i, pkt: bool(pkt.flags & SYN and not pkt.flags & ACK and i < 3))
        p.run()
        assert p.client.established_at == sec(7) + 2 * ONE_WAY_NS
        assert p.client.timeouts >= 3

    def test_triple_dupack_triggers_fast_retransmit(self):
        # drop exactly one mid-window data segment; later segments produce
        # duplicate ACKs and recovery happens without any timeout.
        dropped = []

        def drop(i, pkt):
            if pkt.payload_len and pkt.seq == 5 * DEFAULT_MSS and not dropped:
                dropped.append(i)
                return True
            return False

        p = Pipe(client_bytes=30 * DEFAULT_MSS, drop=drop)
        p.run()
        assert p.client.completed_at is not None
        assert p.client.timeouts == 0
        assert p.client.retransmissions == 1

    def test_reliability_under_bursty_loss(self):
        # drop a whole contiguous burst; go-back-N timeout recovery must
        # still deliver every byte exactly once to the application stream.
        def drop(i, pkt):
            return bool(pkt.payload_len) and 10 <= i < 25

        p = Pipe(client_bytes=60 * DEFAULT_MSS, drop=drop)
        p.run()
        assert p.client.completed_at is not None
        assert p.server.rcv_nxt - 1 == 60 * DEFAULT_MSS


@settings(max_examples=20, deadline=None)
@given(st.sets(st.integers(min_value=0, max_value=80), max_size=25))
def test_every_byte_eventually_acked_under_any_finite_loss(drop_set):
    size = 25 * DEFAULT_MSS
    p = Pipe(client_bytes=size, drop=lambda i, pkt: i in drop_set)
    p.run(until=sec(600))
    assert p.client.completed_at is not None
    assert p.server.rcv_nxt - 1 == size
    assert p.client.fin_acked and p.client.peer_fin_received


@pytest.mark.parametrize("direction", ["upload", "download"])
def test_fct_strictly_increases_with_propagation_delay(direction):
    fcts = []
    for delay in (msec(5), msec(10), msec(20), msec(40)):
        kwargs = {"client_bytes": 200_000} if direction == "upload" else {"server_bytes": 200_000}
        p = Pipe(delay_ns=delay, **kwargs).run()
        fcts.append(p.client.completed_at)
    assert fcts == sorted(fcts)
    assert len(set(fcts)) == len(fcts)
