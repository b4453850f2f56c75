"""Name-based routing layer on end devices: the pub/sub send/receive API.

Packet layout on the wire::

    src MAC (6) | dst MAC (6) | pathID (32) | NAME_ID (32) | payload

All fields big-endian; the pathID bit order is the one in ``pathcore``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Callable

from . import pathcore
from .names import MULTICAST, NAME_ID_BYTES, StructuredName, as_name
from .pathcore import PathId, ZERO_PATH
from .resolver import (
    LOCALIZED,
    NON_LOCALIZED,
    CacheEntry,
    DiscoveryCache,
    DiscoveryResult,
    NrService,
    PathUpdate,
)
from .simnet import BROADCAST_MAC, Endpoint, Network
from .topology import PathCache

log = logging.getLogger(__name__)

REMOTE = "remote"
LINK_LOCAL = "link_local"
ADHOC_MULTICAST = "adhoc_multicast"

HEADER_BYTES = 6 + 6 + pathcore.PATH_BYTES + NAME_ID_BYTES
NO_NAME = bytes(NAME_ID_BYTES)


class PacketError(ValueError):
    pass


@dataclass(frozen=True)
class ConnHandle:
    path_id: PathId
    dst_mac: bytes
    kind: str = REMOTE
    name_id: bytes = NO_NAME

    def __post_init__(self):
        if self.kind == LINK_LOCAL and not self.path_id.is_zero:
            raise ValueError("link-local conn must carry the all-zero path")
        if self.kind == ADHOC_MULTICAST and self.dst_mac != BROADCAST_MAC:
            raise ValueError("ad-hoc multicast conn must use the broadcast MAC")

    @classmethod
    def to(cls, path_id: PathId, mac: bytes, name_id: bytes = NO_NAME) -> ConnHandle:
        kind = LINK_LOCAL if path_id.is_zero else REMOTE
        return cls(path_id, mac, kind, name_id)

    @classmethod
    def adhoc(cls, conns, name_id: bytes | None = None) -> ConnHandle:
        conns = list(conns)
        path = pathcore.combine(c.path_id for c in conns)
        return cls(path, BROADCAST_MAC, ADHOC_MULTICAST, name_id if name_id is not None else conns[0].name_id)

    @property
    def handle(self) -> bytes:
        """Numeric handle: the path bytes, or a digest of the local MAC."""
        if self.kind == LINK_LOCAL:
            return hashlib.sha256(self.dst_mac).digest()
        return self.path_id.to_bytes()


@dataclass(frozen=True)
class Packet:
    src_mac: bytes
    dst_mac: bytes
    path_id: PathId
    name_id: bytes
    payload: bytes = b""
    # simulator metadata, not part of the serialized frame
    packet_id: int = 0
    checksum: int | None = None
    name: str | None = None

    @property
    def size(self) -> int:
        return HEADER_BYTES + len(self.payload)

    def to_bytes(self) -> bytes:
        if len(self.src_mac) != 6 or len(self.dst_mac) != 6:
            raise PacketError("MAC addresses are 6 bytes")
        if len(self.name_id) != NAME_ID_BYTES:
            raise PacketError("NAME_ID is 32 bytes")
        return self.src_mac + self.dst_mac + self.path_id.to_bytes() + self.name_id + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> Packet:
        if len(data) < HEADER_BYTES:
            raise PacketError(f"frame shorter than the {HEADER_BYTES}-byte header")
        return cls(
            src_mac=data[0:6],
            dst_mac=data[6:12],
            path_id=PathId.from_bytes(data[12:44]),
            name_id=data[44:76],
            payload=data[76:],
        )


class PendingRequestTable:
    """request id -> conn handle of the outgoing request, per endpoint."""

    def __init__(self):
        self._entries: dict[bytes, ConnHandle] = {}

    def add(self, request_id: bytes, conn: ConnHandle) -> None:
        self._entries[request_id] = conn

    def take(self, request_id: bytes) -> ConnHandle | None:
        return self._entries.pop(request_id, None)

    def __contains__(self, request_id) -> bool:
        return request_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)


@dataclass
class SendRecord:
    """Bookkeeping for one ``send(name, payload)`` call."""

    name: StructuredName
    requested_at: float
    sent_at: float | None = None
    conn: ConnHandle | None = None
    packet_id: int | None = None
    on_sent: Callable | None = None

    @property
    def setup_ms(self) -> float | None:
        return None if self.sent_at is None else self.sent_at - self.requested_at


@dataclass
class _Subscription:
    name: StructuredName
    handler: Callable


class NbrLayer:
    """NbR stack of one simulated device.

    ``send_initial``/``send_on`` and the receive callbacks map onto the
    four API calls ``send(name)``, ``send(conn)``, ``receive(name)`` and
    ``receive(conn)``. Blocking receives become callbacks of the form
    ``handler(conn, payload, packet)``.
    """

    def __init__(
        self,
        network: Network,
        endpoint: Endpoint,
        nr: NrService,
        cache_mode: str = NON_LOCALIZED,
        local_compute_ms: float = 0.5,
        response_filter: Callable | None = None,
    ):
        self.network = network
        self.sim = network.sim
        self.endpoint = endpoint
        self.nr = nr
        paths = PathCache(network.topology, network.assignment) if cache_mode == LOCALIZED else None
        self.cache = DiscoveryCache(cache_mode, paths)
        self.local_compute_ms = local_compute_ms
        self.response_filter = response_filter
        self.pending = PendingRequestTable()
        self.subscriptions: dict[bytes, _Subscription] = {}
        self.conn_handler: Callable | None = None
        self.filtered = 0
        self._inflight: dict[str, list[Callable]] = {}
        endpoint.handler = self._on_packet
        nr.attach_listener(endpoint.name, self._on_update)

    @property
    def host_id(self) -> str:
        return self.endpoint.name

    @property
    def mac(self) -> bytes:
        return self.endpoint.mac

    @property
    def attachment(self) -> str:
        return self.endpoint.node

    # -- sending -----------------------------------------------------------

    def send_initial(self, name, payload: bytes, on_sent: Callable | None = None) -> SendRecord:
        """``conn = send(name, payload)``; the conn appears in the record once sent."""
        name = as_name(name)
        rec = SendRecord(name, self.sim.now, on_sent=on_sent)
        entry = self.cache.get(name)
        if entry is not None and not entry.stale:
            self._emit(rec, entry, payload)
        elif entry is not None and self.cache.mode == LOCALIZED and entry.records:
            self.sim.schedule(self.local_compute_ms, self._local_recompute, rec, entry, payload)
        else:
            self._lookup(name, lambda e: self._emit(rec, e, payload))
        return rec

    def _local_recompute(self, rec, entry, payload):
        self.cache.recompute(entry, self.attachment)
        self._emit(rec, entry, payload)

    def _lookup(self, name: StructuredName, then: Callable) -> None:
        waiters = self._inflight.get(name.text)
        if waiters is not None:
            waiters.append(then)
            return
        self._inflight[name.text] = [then]
        self.nr.discover(name, self.host_id, self.attachment, lambda ans: self._discovered(name, ans))

    def _discovered(self, name: StructuredName, answer) -> None:
        waiters = self._inflight.pop(name.text, [])
        if isinstance(answer, Exception):
            raise answer
        entry = self.cache.store(name, answer)
        for fn in waiters:
            fn(entry)

    def conn_for(self, entry: CacheEntry) -> ConnHandle:
        nid = entry.name.name_id
        if entry.name.service_class == MULTICAST:
            if not entry.results:
                return ConnHandle(ZERO_PATH, BROADCAST_MAC, ADHOC_MULTICAST, nid)
            return ConnHandle.adhoc([ConnHandle.to(r.path_id, r.dst_mac) for r in entry.results], nid)
        res: DiscoveryResult = entry.results[0]
        return ConnHandle.to(res.path_id, res.dst_mac, nid)

    def _emit(self, rec: SendRecord, entry: CacheEntry, payload: bytes) -> None:
        conn = self.conn_for(entry)
        pkt = self.send_on(conn, payload, name=entry.name.text)
        rec.conn = conn
        rec.sent_at = self.sim.now
        rec.packet_id = pkt.packet_id
        if rec.on_sent is not None:
            rec.on_sent(rec)

    def send_on(self, conn: ConnHandle, payload: bytes, name: str | None = None) -> Packet:
        """``send(conn, payload)``: no resolver interaction."""
        pkt = Packet(
            src_mac=self.mac,
            dst_mac=conn.dst_mac,
            path_id=conn.path_id,
            name_id=conn.name_id,
            payload=payload,
            packet_id=self.network.next_packet_id(),
            checksum=pathcore.checksum(conn.path_id),
            name=name,
        )
        self.network.inject(self.endpoint, pkt)
        return pkt

    # -- receiving ---------------------------------------------------------

    def subscribe(self, name, handler: Callable) -> None:
        """``receive(name, &payload)``: registers the name with the NR."""
        name = as_name(name)
        self.subscriptions[name.name_id] = _Subscription(name, handler)
        self.nr.register(name, self.host_id, self.mac, self.attachment)

    def unsubscribe(self, name) -> None:
        name = as_name(name)
        self.subscriptions.pop(name.name_id, None)
        self.nr.deregister(name, self.host_id)

    def on_conn(self, handler: Callable) -> None:
        """``receive(conn, &payload)`` for every conn of this device."""
        self.conn_handler = handler

    def move_to(self, node: str) -> None:
        self.network.move(self.endpoint, node)
        for sub in self.subscriptions.values():
            self.nr.move(sub.name, self.host_id, node)

    def _on_packet(self, packet: Packet, now: float) -> None:
        sub = self.subscriptions.get(packet.name_id)
        reverse = ConnHandle.to(packet.path_id, packet.src_mac, packet.name_id)
        if sub is not None:
            sub.handler(reverse, packet.payload, packet)
            return
        conn = reverse
        if self.response_filter is not None:
            stored = self.response_filter(packet, self.pending)
            if stored is None and packet.dst_mac == BROADCAST_MAC:
                self.filtered += 1
                self.network.trace.log(now, f"dev:{self.host_id}", packet.packet_id, packet.size, "filtered")
                return
            conn = stored or reverse
        if self.conn_handler is not None:
            self.conn_handler(conn, packet.payload, packet)

    def _on_update(self, update: PathUpdate) -> None:
        self.cache.handle_path_update(update)
