"""Managed service flows between NbR devices.

Every IP transaction handed to the NbR layer becomes a named service
transaction on the long-lived flow to its peer device. The flow's send
buffer is shared round-robin among active transactions, one MTU-sized
segment per turn, under a static segment window.
"""

from __future__ import annotations

import itertools
import math
import struct
from collections import deque
from dataclasses import dataclass, field

from .names import StructuredName
from .nbr import ConnHandle, NbrLayer, Packet
from .topology import PathCache, TopologyError

DEFAULT_MTU = 1500
DEFAULT_WINDOW = 64

_SEG = struct.Struct(">cIIIH")  # kind, txn id, seq, total segments, data length
_DATA, _ACK = b"D", b"A"


@dataclass(frozen=True)
class Segment:
    txn_id: int
    seq: int
    total: int
    nbytes: int

    @property
    def last(self) -> bool:
        return self.seq == self.total - 1


@dataclass
class NamedServiceTransaction:
    txn_id: int
    size: int
    ip_ref: object = None
    segments: deque = field(default_factory=deque)
    total: int = 0
    sent: int = 0
    acked: int = 0
    submitted_at: float = 0.0
    completed_at: float | None = None

    @property
    def done(self) -> bool:
        return self.acked == self.total


def segment_sizes(nbytes: int, mtu: int) -> list[int]:
    if nbytes <= 0:
        return [0]
    n = math.ceil(nbytes / mtu)
    return [mtu] * (n - 1) + [nbytes - mtu * (n - 1)]


class ManagedServiceFlow:
    """Send side of one device-pair flow; transport-agnostic.

    :meth:`tick` hands out the segments that may go on the wire now;
    :meth:`ack` frees a window slot.
    """

    def __init__(self, local: str, peer: str, window: int = DEFAULT_WINDOW, mtu: int = DEFAULT_MTU):
        if window < 1 or mtu < 1:
            raise ValueError("window and mtu must be positive")
        self.local = local
        self.peer = peer
        self.window = window
        self.mtu = mtu
        self.in_flight = 0
        self.transactions: dict[int, NamedServiceTransaction] = {}
        self._active: deque[int] = deque()
        self._ids = itertools.count(1)
        self.wire_order: list[Segment] = []
        self.closed = False

    def submit(self, nbytes: int, ip_ref=None, now: float = 0.0) -> NamedServiceTransaction:
        if self.closed:
            raise RuntimeError("flow is closed")
        sizes = segment_sizes(nbytes, self.mtu)
        txn = NamedServiceTransaction(next(self._ids), nbytes, ip_ref, total=len(sizes), submitted_at=now)
        txn.segments.extend(Segment(txn.txn_id, i, len(sizes), s) for i, s in enumerate(sizes))
        self.transactions[txn.txn_id] = txn
        self._active.append(txn.txn_id)
        return txn

    def tick(self, now: float = 0.0) -> list[Segment]:
        out = []
        while self.in_flight < self.window and self._active:
            tid = self._active.popleft()
            txn = self.transactions[tid]
            seg = txn.segments.popleft()
            txn.sent += 1
            if txn.segments:
                self._active.append(tid)
            self.in_flight += 1
            out.append(seg)
        self.wire_order.extend(out)
        return out

    def ack(self, seg: Segment, now: float = 0.0) -> None:
        txn = self.transactions[seg.txn_id]
        txn.acked += 1
        self.in_flight -= 1
        if txn.done:
            txn.completed_at = now

    @property
    def queued(self) -> int:
        return sum(len(t.segments) for t in self.transactions.values())


def encode_segment(kind: bytes, seg: Segment) -> bytes:
    head = _SEG.pack(kind, seg.txn_id, seg.seq, seg.total, seg.nbytes if kind == _DATA else 0)
    return head + (bytes(seg.nbytes) if kind == _DATA else b"")


def decode_segment(payload: bytes) -> tuple[bytes, Segment]:
    kind, tid, seq, total, nbytes = _SEG.unpack_from(payload)
    if kind == _DATA and len(payload) - _SEG.size != nbytes:
        raise ValueError("segment length mismatch")
    return kind, Segment(tid, seq, total, nbytes)


def flow_name(host_id: str) -> StructuredName:
    return StructuredName(("nbr-flow", host_id))


@dataclass
class _Reassembly:
    expected: int = 0
    buffered: dict = field(default_factory=dict)
    delivered_bytes: int = 0
    complete: bool = False


class FlowManager:
    """Flow endpoint on one simulated device.

    Peers address each other through per-device flow names; the return
    conn of every data segment carries its ack back without resolver
    involvement.
    """

    def __init__(self, nbr: NbrLayer, window: int = DEFAULT_WINDOW, mtu: int = DEFAULT_MTU):
        self.nbr = nbr
        self.sim = nbr.sim
        self.window = window
        self.mtu = mtu
        self.flows: dict[str, ManagedServiceFlow] = {}
        self._conns: dict[str, ConnHandle] = {}
        self._tick_pending: set[str] = set()
        self.received: dict[tuple[str, int], _Reassembly] = {}
        self.delivery_log: list[tuple[float, str, int, int]] = []
        self._paths = PathCache(nbr.network.topology, nbr.network.assignment)
        nbr.subscribe(flow_name(nbr.host_id), self._on_packet)

    def open_flow(self, peer: FlowManager) -> ManagedServiceFlow:
        """Reuse the flow to ``peer`` or create it."""
        key = peer.nbr.host_id
        flow = self.flows.get(key)
        if flow is not None and not flow.closed:
            return flow
        try:
            path = self._paths.path(self.nbr.attachment, peer.nbr.attachment)
        except TopologyError as exc:
            raise ConnectionError(f"peer {key} unreachable: {exc}") from None
        flow = ManagedServiceFlow(self.nbr.host_id, key, self.window, self.mtu)
        self.flows[key] = flow
        self._conns[key] = ConnHandle.to(path.path_id, peer.nbr.mac, flow_name(key).name_id)
        return flow

    def close_flow(self, peer: FlowManager) -> None:
        flow = self.flows.pop(peer.nbr.host_id, None)
        if flow is not None:
            flow.closed = True

    def submit(self, peer: FlowManager, nbytes: int, ip_ref=None) -> NamedServiceTransaction:
        flow = self.open_flow(peer)
        txn = flow.submit(nbytes, ip_ref, self.sim.now)
        self._schedule_tick(flow.peer)
        return txn

    def _schedule_tick(self, peer_id: str) -> None:
        if peer_id not in self._tick_pending:
            self._tick_pending.add(peer_id)
            self.sim.schedule(0.0, self._tick, peer_id)

    def _tick(self, peer_id: str) -> None:
        self._tick_pending.discard(peer_id)
        flow = self.flows.get(peer_id)
        if flow is None:
            return
        conn = self._conns[peer_id]
        for seg in flow.tick(self.sim.now):
            self.nbr.send_on(conn, encode_segment(_DATA, seg))

    def _on_packet(self, conn: ConnHandle, payload: bytes, packet: Packet) -> None:
        kind, seg = decode_segment(payload)
        sender = self._sender_of(packet)
        if kind == _ACK:
            flow = self.flows.get(sender)
            if flow is None:
                return
            flow.ack(seg, self.sim.now)
            self._schedule_tick(sender)
            return
        state = self.received.setdefault((sender, seg.txn_id), _Reassembly())
        state.buffered[seg.seq] = seg
        while state.expected in state.buffered:
            s = state.buffered.pop(state.expected)
            state.delivered_bytes += s.nbytes
            self.delivery_log.append((self.sim.now, sender, s.txn_id, s.seq))
            state.expected += 1
            state.complete = s.last
        ack_conn = ConnHandle.to(conn.path_id, conn.dst_mac, flow_name(sender).name_id)
        self.nbr.send_on(ack_conn, encode_segment(_ACK, seg))

    def _sender_of(self, packet: Packet) -> str:
        ep = self.nbr.network.endpoints.get(packet.src_mac)
        return ep.name if ep is not None else packet.src_mac.hex()
