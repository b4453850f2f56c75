"""Deterministic discrete-event engine and the forwarding network it hosts.

Time is in milliseconds (float). Events at equal times run in the order
they were scheduled. Every stochastic draw goes through ``Simulator.rng``
in scheduling order, so ``(seed, scenario)`` fixes the trace.
"""

from __future__ import annotations

import csv
import heapq
import io
import itertools
import random
from dataclasses import dataclass, field
from typing import Callable

from . import pathcore
from .topology import LinkBitAssignment, Topology, assign_bits

BROADCAST_MAC = b"\xff" * 6


class SimulationError(RuntimeError):
    pass


class Simulator:
    def __init__(self, seed: int = 0, start: float = 0.0):
        self.now = start
        self.rng = random.Random(seed)
        self.seed = seed
        self._queue: list = []
        self._seq = itertools.count()
        self.trace = TraceLog()
        self.executed = 0

    def schedule_at(self, time: float, fn: Callable, *args) -> None:
        if time < self.now:
            raise SimulationError(f"event scheduled in the past ({time} < {self.now})")
        heapq.heappush(self._queue, (time, next(self._seq), fn, args))

    def schedule(self, delay: float, fn: Callable, *args) -> None:
        self.schedule_at(self.now + delay, fn, *args)

    def run(self, until: float | None = None) -> float:
        while self._queue:
            time, _, fn, args = self._queue[0]
            if until is not None and time > until:
                self.now = until
                break
            heapq.heappop(self._queue)
            self.now = time
            self.executed += 1
            fn(*args)
        return self.now

    @property
    def pending(self) -> int:
        return len(self._queue)


@dataclass(frozen=True)
class LinkModel:
    """One-way propagation delay with uniform jitter of +-jitter*delay."""

    delay_ms: float
    jitter: float = 0.10

    def sample(self, rng: random.Random) -> float:
        if self.jitter == 0 or self.delay_ms == 0:
            return self.delay_ms
        spread = self.jitter * self.delay_ms
        return self.delay_ms + rng.uniform(-spread, spread)

    @property
    def bounds(self) -> tuple[float, float]:
        return (self.delay_ms * (1 - self.jitter), self.delay_ms * (1 + self.jitter))


@dataclass(frozen=True, slots=True)
class TraceRecord:
    time_ms: float
    link: str
    packet_id: int
    bytes: int
    event_kind: str


TRACE_COLUMNS = ("time_ms", "link", "packet_id", "bytes", "event_kind")


class TraceLog:
    """Append-only record of transmissions, deliveries and drops."""

    def __init__(self):
        self.records: list[TraceRecord] = []

    def log(self, time_ms, link, packet_id, nbytes, kind):
        self.records.append(TraceRecord(time_ms, link, packet_id, nbytes, kind))

    def of_kind(self, *kinds: str) -> list[TraceRecord]:
        return [r for r in self.records if r.event_kind in kinds]

    def count(self, kind: str) -> int:
        return sum(1 for r in self.records if r.event_kind == kind)

    def to_csv(self, fh=None) -> str:
        buf = fh or io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.records:
            w.writerow((repr(r.time_ms), r.link, r.packet_id, r.bytes, r.event_kind))
        return buf.getvalue() if fh is None else ""


@dataclass(eq=False)
class Endpoint:
    """A device attached to one L2 forwarder by an access link."""

    name: str
    mac: bytes
    node: str | None = None
    access: LinkModel | None = None
    handler: Callable | None = None

    def deliver(self, packet, now: float) -> None:
        if self.handler is not None:
            self.handler(packet, now)


def mac_from_index(i: int) -> bytes:
    """Locally administered unicast MAC 02:00:xx:xx:xx:xx."""
    return (0x020000000000 | i).to_bytes(6, "big")


def mac_str(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)


@dataclass
class Forwarder:
    node: str
    port_bits: dict[str, int]
    role: str
    devices: dict[bytes, Endpoint] = field(default_factory=dict)


class Network:
    """Forwarders of a topology plus attached endpoints on one simulator.

    A packet entering from an access port is checked against its pathID
    checksum, then sent out every transport port whose bit is set.
    Local delivery happens when the destination MAC is attached here, or
    to every local device except the sender when it is broadcast.
    """

    def __init__(
        self,
        topology: Topology,
        sim: Simulator,
        assignment: LinkBitAssignment | None = None,
        access_delay_ms: float = 2.0,
        jitter: float = 0.10,
        max_hops: int | None = None,
        check_ingress: bool = True,
    ):
        self.topology = topology
        self.sim = sim
        self.assignment = assignment or assign_bits(topology)
        self.access_delay_ms = access_delay_ms
        self.jitter = jitter
        self.max_hops = max_hops if max_hops is not None else len(topology.links) + 1
        self.check_ingress = check_ingress
        self.forwarders = {
            n: Forwarder(n, dict(self.assignment.port_bits(n)), topology.roles[n])
            for n in topology.nodes
        }
        self.link_models = {
            ln.key: LinkModel(ln.delay_ms, jitter) for ln in topology.links
        }
        self.endpoints: dict[bytes, Endpoint] = {}
        self._packet_ids = itertools.count(1)
        # per packet id: node -> number of receptions
        self.node_receptions: dict[int, dict[str, int]] = {}

    @property
    def trace(self) -> TraceLog:
        return self.sim.trace

    def attach(self, ep: Endpoint, node: str, access_delay_ms: float | None = None) -> Endpoint:
        if node not in self.forwarders:
            raise KeyError(f"unknown forwarder {node!r}")
        if ep.mac in self.endpoints and self.endpoints[ep.mac] is not ep:
            raise ValueError(f"duplicate MAC {mac_str(ep.mac)}")
        delay = self.access_delay_ms if access_delay_ms is None else access_delay_ms
        ep.node = node
        ep.access = LinkModel(delay, self.jitter)
        self.endpoints[ep.mac] = ep
        self.forwarders[node].devices[ep.mac] = ep
        return ep

    def move(self, ep: Endpoint, node: str) -> None:
        if ep.node is not None:
            self.forwarders[ep.node].devices.pop(ep.mac, None)
        delay = ep.access.delay_ms if ep.access else None
        self.attach(ep, node, delay)

    def next_packet_id(self) -> int:
        return next(self._packet_ids)

    def inject(self, ep: Endpoint, packet) -> None:
        """Endpoint sends ``packet`` over its access link."""
        if ep.node is None:
            raise SimulationError(f"endpoint {ep.name} is not attached")
        now = self.sim.now
        self.trace.log(now, f"acc:{ep.name}", packet.packet_id, packet.size, "tx")
        delay = ep.access.sample(self.sim.rng)
        self.sim.schedule(delay, self._at_forwarder, ep.node, packet, ep.mac, 0)

    def _at_forwarder(self, node: str, packet, arrival, hops: int) -> None:
        now = self.sim.now
        fwd = self.forwarders[node]
        recv = self.node_receptions.setdefault(packet.packet_id, {})
        recv[node] = recv.get(node, 0) + 1
        from_access = isinstance(arrival, bytes)
        if from_access and self.check_ingress and packet.checksum is not None:
            if not pathcore.verify(packet.path_id, packet.checksum):
                self.trace.log(now, f"fwd:{node}", packet.packet_id, packet.size, "drop_checksum")
                return
        if hops > self.max_hops:
            self.trace.log(now, f"fwd:{node}", packet.packet_id, packet.size, "drop_ttl")
            return
        out_ports = pathcore.forward_decision(packet.path_id, fwd.port_bits, arrival)
        for port in sorted(out_ports, key=lambda p: fwd.port_bits[p]):
            self._transmit(node, port, packet, hops + 1)
        local = []
        if packet.dst_mac == BROADCAST_MAC:
            local = [d for m, d in fwd.devices.items() if m != arrival]
        else:
            dev = fwd.devices.get(packet.dst_mac)
            if dev is not None and dev.mac != arrival:
                local = [dev]
        for dev in sorted(local, key=lambda d: d.mac):
            self.trace.log(now, f"acc:{dev.name}", packet.packet_id, packet.size, "tx")
            self.sim.schedule(dev.access.sample(self.sim.rng), self._at_device, dev, packet)
        if not out_ports and not local:
            self.trace.log(now, f"fwd:{node}", packet.packet_id, packet.size, "drop")

    def _transmit(self, node: str, port: str, packet, hops: int) -> None:
        ln = self.topology.link(node, port)
        self.trace.log(self.sim.now, ln.name, packet.packet_id, packet.size, "tx")
        delay = self.link_models[ln.key].sample(self.sim.rng)
        self.sim.schedule(delay, self._at_forwarder, port, packet, node, hops)

    def _at_device(self, dev: Endpoint, packet) -> None:
        # the device may have moved while the packet was on the access link
        if dev.node is None or self.forwarders[dev.node].devices.get(dev.mac) is not dev:
            self.trace.log(self.sim.now, f"dev:{dev.name}", packet.packet_id, packet.size, "drop")
            return
        self.trace.log(self.sim.now, f"dev:{dev.name}", packet.packet_id, packet.size, "deliver")
        dev.deliver(packet, self.sim.now)

    def core_transmissions(self, packet_id: int | None = None) -> list[TraceRecord]:
        return [
            r for r in self.trace.records
            if r.event_kind == "tx" and not r.link.startswith("acc:")
            and (packet_id is None or r.packet_id == packet_id)
        ]
