"""HTTP over NbR: request coalescing and ad-hoc multicast responses.

Requests to the same resource (same request id) that arrive within a
service's catchment interval form one group. The group is answered with
a single response whose conn is the OR of all members' return paths,
sent to the broadcast MAC with the request id in the payload so that
clients can match it against their pending table.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable
from urllib.parse import urlsplit

from .names import StructuredName, as_name
from .nbr import ConnHandle, NbrLayer, Packet, PendingRequestTable

log = logging.getLogger(__name__)

REQUEST_ID_BYTES = 32
_REQ = b"Q"
_RESP = b"R"


@dataclass(frozen=True)
class HttpRequest:
    """Opaque request record; no wire-level HTTP is modeled."""

    method: str
    uri: str
    headers: tuple[tuple[str, str], ...] = ()
    body_size: int = 0

    @classmethod
    def get(cls, uri: str, **headers) -> HttpRequest:
        return cls("GET", uri, tuple((k.replace("_", "-"), v) for k, v in headers.items()))

    @property
    def service(self) -> StructuredName:
        return StructuredName((_host(self.uri),))

    def encode(self) -> bytes:
        doc = {"m": self.method, "u": self.uri, "h": [list(h) for h in self.headers], "b": self.body_size}
        return _REQ + json.dumps(doc, sort_keys=True).encode()

    @classmethod
    def decode(cls, payload: bytes) -> HttpRequest:
        if payload[:1] != _REQ:
            raise ValueError("not an encoded request")
        doc = json.loads(payload[1:])
        return cls(doc["m"], doc["u"], tuple(tuple(h) for h in doc["h"]), doc["b"])


def _host(uri: str) -> str:
    return (urlsplit(uri if "//" in uri else "//" + uri).hostname or "").lower()


def canonical_uri(uri: str) -> str:
    parts = urlsplit(uri if "//" in uri else "//" + uri)
    path = parts.path or "/"
    query = f"?{parts.query}" if parts.query else ""
    return f"{_host(uri)}{path}{query}"


def derive_request_id(request: HttpRequest, designated: tuple[str, ...] = ()) -> bytes:
    """Digest of method, canonical URI and the designated header subset.

    Headers outside ``designated`` (matched case-insensitively) never
    influence the id, nor does header order.
    """
    wanted = {h.lower() for h in designated}
    picked = sorted((k.lower(), v) for k, v in request.headers if k.lower() in wanted)
    doc = json.dumps([request.method.upper(), canonical_uri(request.uri), picked])
    return hashlib.sha256(doc.encode()).digest()


def encode_response(request_id: bytes, body: bytes) -> bytes:
    return _RESP + request_id + body


def decode_response(payload: bytes) -> tuple[bytes, bytes]:
    if payload[:1] != _RESP or len(payload) < 1 + REQUEST_ID_BYTES:
        raise ValueError("not an encoded response")
    return payload[1:1 + REQUEST_ID_BYTES], payload[1 + REQUEST_ID_BYTES:]


def extract_request_id(payload: bytes) -> bytes | None:
    try:
        return decode_response(payload)[0]
    except ValueError:
        return None


@dataclass(frozen=True)
class ServicePolicy:
    catchment_interval_s: float = 0.5
    suppression: bool = False
    designated_headers: tuple[str, ...] = ()

    def __post_init__(self):
        if self.catchment_interval_s < 0:
            raise ValueError("catchment interval must be >= 0")

    @property
    def catchment_ms(self) -> float:
        return self.catchment_interval_s * 1000.0


def parse_policies(text: str) -> dict[str, ServicePolicy]:
    """Lines of ``name catchment_interval_s on|off``; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("on", "off"):
            raise ValueError(f"policy line {lineno}: expected 'name interval_s on|off'")
        try:
            interval = float(parts[1])
        except ValueError:
            raise ValueError(f"policy line {lineno}: bad interval {parts[1]!r}") from None
        out[parts[0]] = ServicePolicy(interval, parts[2] == "on")
    return out


def load_policies(path) -> dict[str, ServicePolicy]:
    return parse_policies(Path(path).read_text())


@dataclass
class CoalescingGroup:
    request_id: bytes
    window_open: float
    catchment_ms: float
    members: list[ConnHandle] = field(default_factory=list)
    arrivals: list[float] = field(default_factory=list)
    request: HttpRequest | None = None
    response: bytes | None = None
    origin_pending: bool = False
    closed: bool = False

    @property
    def window_close(self) -> float:
        return self.window_open + self.catchment_ms


@dataclass(frozen=True)
class Admission:
    group: CoalescingGroup
    joined: bool
    upstream: bool


def admit_request(table: dict, request_id: bytes, conn: ConnHandle, now: float,
                  policy: ServicePolicy) -> Admission:
    """Join the open group for ``request_id`` or open a new one.

    ``upstream`` says whether this request is forwarded to the origin:
    always for the first request of a group, for joiners only without
    suppression. ``now`` and the group times are in milliseconds. A zero
    catchment interval never coalesces.
    """
    group = table.get(request_id)
    if group is not None and not group.closed and group.catchment_ms > 0 and now <= group.window_close:
        group.members.append(conn)
        group.arrivals.append(now)
        return Admission(group, True, not policy.suppression)
    group = CoalescingGroup(request_id, now, policy.catchment_ms, [conn], [now])
    table[request_id] = group
    return Admission(group, False, True)


def respond_group(group: CoalescingGroup, body: bytes) -> tuple[ConnHandle, bytes]:
    """Close the group; returns the conn to send on and the payload."""
    if not group.members:
        raise ValueError("cannot respond to an empty group")
    group.closed = True
    payload = encode_response(group.request_id, body)
    if len(group.members) == 1:
        return group.members[0], payload
    return ConnHandle.adhoc(group.members), payload


def client_filter(packet: Packet, pending: PendingRequestTable) -> ConnHandle | None:
    """Stored conn if the embedded request id is pending (consuming it), else None."""
    rid = extract_request_id(packet.payload)
    if rid is None:
        return None
    return pending.take(rid)


class Origin:
    """Application logic behind a serving endpoint."""

    def __init__(self, delay_ms: float = 0.0, body: Callable[[HttpRequest], bytes] | None = None):
        self.delay_ms = delay_ms
        self.body = body or (lambda req: f"content of {req.uri}".encode())
        self.requests_received = 0
        self.invocations = 0


class HttpServer:
    """Serving endpoint (flat stack server or service proxy)."""

    def __init__(self, nbr: NbrLayer, service, policy: ServicePolicy | None = None,
                 origin: Origin | None = None):
        self.nbr = nbr
        self.sim = nbr.sim
        self.service = as_name(service)
        self.policy = policy or ServicePolicy()
        self.origin = origin or Origin()
        self.groups: dict[bytes, CoalescingGroup] = {}
        self.closed_groups: list[CoalescingGroup] = []
        self.requests = 0
        nbr.subscribe(self.service, self._on_request)

    def _log(self, kind, packet_id=0, nbytes=0):
        self.nbr.network.trace.log(self.sim.now, f"srv:{self.nbr.host_id}", packet_id, nbytes, kind)

    def _on_request(self, conn: ConnHandle, payload: bytes, packet: Packet) -> None:
        req = HttpRequest.decode(payload)
        rid = derive_request_id(req, self.policy.designated_headers)
        self.requests += 1
        adm = admit_request(self.groups, rid, conn, self.sim.now, self.policy)
        if not adm.joined:
            adm.group.request = req
            self.sim.schedule_at(adm.group.window_close, self._maybe_release, adm.group)
        if adm.upstream:
            self._upstream(adm.group, req, packet.packet_id)

    def _upstream(self, group, req, packet_id):
        self.origin.requests_received += 1
        self._log("upstream_request", packet_id)
        if group.response is None and not group.origin_pending:
            # one application invocation per group; later upstream copies reuse it
            group.origin_pending = True
            self.origin.invocations += 1
            self.sim.schedule(self.origin.delay_ms, self._origin_ready, group, req)

    def _origin_ready(self, group, req):
        group.response = self.origin.body(req)
        self._maybe_release(group)

    def _maybe_release(self, group: CoalescingGroup) -> None:
        if group.closed or group.response is None or self.sim.now < group.window_close:
            return
        conn, payload = respond_group(group, group.response)
        if self.groups.get(group.request_id) is group:
            del self.groups[group.request_id]
        self.closed_groups.append(group)
        pkt = self.nbr.send_on(conn, payload, name=self.service.text)
        kind = "response_multicast" if len(group.members) > 1 else "response_unicast"
        self._log(kind, pkt.packet_id, pkt.size)


@dataclass
class ResponseRecord:
    request_id: bytes
    received_at: float
    body: bytes
    conn: ConnHandle


class HttpClient:
    def __init__(self, nbr: NbrLayer):
        self.nbr = nbr
        self.sim = nbr.sim
        nbr.response_filter = client_filter
        nbr.on_conn(self._on_response)
        self.sent: dict[bytes, float] = {}
        self.responses: list[ResponseRecord] = []

    def request(self, req: HttpRequest, designated: tuple[str, ...] = ()) -> bytes:
        rid = derive_request_id(req, designated)
        self.sent[rid] = self.sim.now
        self.nbr.send_initial(req.service, req.encode(),
                              on_sent=lambda rec: self.nbr.pending.add(rid, rec.conn))
        return rid

    def _on_response(self, conn: ConnHandle, payload: bytes, packet: Packet) -> None:
        rid = extract_request_id(payload)
        if rid is None:
            return
        _, body = decode_response(payload)
        self.responses.append(ResponseRecord(rid, self.sim.now, body, conn))
