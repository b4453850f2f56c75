"""Name Resolver: registration, discovery, path updates, endpoint caches.

:class:`Resolver` holds the name table and answers synchronously.
:class:`NrService` puts it on the simulator: lookups cost one NR
round trip plus processing time, updates cost one one-way trip.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable

from .names import ANYCAST, MULTICAST, StructuredName, as_name
from .pathcore import PathId, combine
from .simnet import LinkModel, Simulator
from .topology import PathCache, Topology

log = logging.getLogger(__name__)

NON_LOCALIZED = "non_localized"
LOCALIZED = "localized"
PRECOMPUTED = "precomputed"
CACHE_MODES = (NON_LOCALIZED, LOCALIZED, PRECOMPUTED)


class ResolverError(LookupError):
    pass


class NameNotFound(ResolverError):
    pass


class UnknownAttachment(ResolverError):
    pass


class NoSuchRecord(ResolverError):
    pass


@dataclass(frozen=True)
class NameRecord:
    name: StructuredName
    host_id: str
    mac: bytes
    attachment: str
    registered_at: float = 0.0


@dataclass(frozen=True)
class DiscoveryResult:
    path_id: PathId
    dst_mac: bytes
    host_id: str
    attachment: str
    hops: int = 0


@dataclass(frozen=True)
class PathUpdate:
    """NR notification that a cached name changed.

    ``records`` is the current registration set (what a localized
    endpoint needs to recompute); ``results`` is the NR's own recomputed
    answer for this requester. Both are empty when the name vanished.
    """

    name: StructuredName
    requester: str
    records: tuple[NameRecord, ...]
    results: tuple[DiscoveryResult, ...]


class Resolver:
    def __init__(self, topology: Topology, paths: PathCache | None = None,
                 internet_proxy: NameRecord | None = None):
        self.topology = topology
        self.paths = paths or PathCache(topology)
        self.internet_proxy = internet_proxy
        self._records: dict[str, dict[str, NameRecord]] = {}
        self._classes: dict[str, str] = {}
        # name text -> requester id -> requester attachment
        self._requesters: dict[str, dict[str, str]] = {}
        self.lookups = 0

    def _check_attachment(self, node):
        if not self.topology.has_node(node):
            raise UnknownAttachment(f"unknown forwarder {node!r}")

    def records(self, name) -> list[NameRecord]:
        name = as_name(name)
        return sorted(self._records.get(name.text, {}).values(), key=lambda r: r.host_id)

    def register(self, name, host_id: str, mac: bytes, attachment: str, now: float = 0.0) -> list[PathUpdate]:
        """Store a registration; returns the path updates it triggers."""
        name = as_name(name)
        self._check_attachment(attachment)
        self._records.setdefault(name.text, {})[host_id] = NameRecord(name, host_id, mac, attachment, now)
        self._classes[name.text] = name.service_class
        return self._updates_for(name)

    def deregister(self, name, host_id: str) -> list[PathUpdate]:
        name = as_name(name)
        recs = self._records.get(name.text, {})
        if host_id not in recs:
            raise NoSuchRecord(f"{host_id} has no registration for {name}")
        del recs[host_id]
        if not recs:
            del self._records[name.text]
        return self._updates_for(name)

    def move(self, name, host_id: str, new_attachment: str, mac: bytes | None = None,
             now: float = 0.0) -> list[PathUpdate]:
        name = as_name(name)
        self._check_attachment(new_attachment)
        recs = self._records.get(name.text, {})
        if host_id not in recs:
            raise NoSuchRecord(f"{host_id} has no registration for {name}")
        old = recs[host_id]
        recs[host_id] = NameRecord(old.name, host_id, mac or old.mac, new_attachment, now)
        return self._updates_for(name)

    def _result(self, rec: NameRecord, requester_attachment: str) -> DiscoveryResult:
        p = self.paths.path(requester_attachment, rec.attachment)
        return DiscoveryResult(p.path_id, rec.mac, rec.host_id, rec.attachment, p.hops)

    def _select(self, name: StructuredName, requester_attachment: str) -> list[DiscoveryResult]:
        recs = self.records(name)
        if not recs:
            if self.internet_proxy is None:
                raise NameNotFound(str(name))
            return [self._result(self.internet_proxy, requester_attachment)]
        results = [self._result(r, requester_attachment) for r in recs]
        if self._classes.get(name.text, name.service_class) == MULTICAST:
            return results
        return [min(results, key=lambda r: (r.hops, r.host_id))]

    def discover(self, name, requester_attachment: str, requester: str | None = None):
        """Anycast names give one result, multicast names a list of all."""
        name = as_name(name)
        self._check_attachment(requester_attachment)
        self.lookups += 1
        results = self._select(name, requester_attachment)
        if requester is not None:
            self._requesters.setdefault(name.text, {})[requester] = requester_attachment
        if self._classes.get(name.text, name.service_class) == MULTICAST:
            return results
        return results[0]

    def requesters(self, name) -> dict[str, str]:
        return dict(self._requesters.get(as_name(name).text, {}))

    def _updates_for(self, name: StructuredName) -> list[PathUpdate]:
        out = []
        recs = tuple(self.records(name))
        for requester, attachment in sorted(self._requesters.get(name.text, {}).items()):
            try:
                results = tuple(self._select(name, attachment))
            except NameNotFound:
                results = ()
            out.append(PathUpdate(name, requester, recs, results))
        return out

    def dump_csv(self, fh=None) -> str:
        buf = fh or io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("name", "host_id", "attachment", "stale"))
        for text in sorted(self._records):
            for rec in self.records(StructuredName.parse(text)):
                w.writerow((text, rec.host_id, rec.attachment, 0))
        return buf.getvalue() if fh is None else ""


@dataclass
class CacheEntry:
    name: StructuredName
    results: tuple[DiscoveryResult, ...]
    stale: bool = False
    records: tuple[NameRecord, ...] = ()


class DiscoveryCache:
    """Per-endpoint name-to-forwarding cache kept fresh by path updates.

    ``non_localized``: an update only flags the entry stale; the next use
    pays a full discovery. ``localized``: the next use recomputes the path
    locally from the update's records. ``precomputed``: the NR's
    recomputed answer is installed as soon as the update arrives.
    """

    def __init__(self, mode: str = NON_LOCALIZED, paths: PathCache | None = None):
        if mode not in CACHE_MODES:
            raise ValueError(f"unknown cache mode {mode!r}")
        if mode == LOCALIZED and paths is None:
            raise ValueError("localized mode needs a local topology copy")
        self.mode = mode
        self.paths = paths
        self.entries: dict[str, CacheEntry] = {}

    def get(self, name) -> CacheEntry | None:
        return self.entries.get(as_name(name).text)

    def store(self, name, results) -> CacheEntry:
        name = as_name(name)
        if isinstance(results, DiscoveryResult):
            results = (results,)
        entry = CacheEntry(name, tuple(results))
        self.entries[name.text] = entry
        return entry

    def handle_path_update(self, update: PathUpdate) -> CacheEntry | None:
        entry = self.entries.get(update.name.text)
        if entry is None:
            return None
        if self.mode == PRECOMPUTED and update.results:
            entry.results = update.results
            entry.stale = False
        else:
            entry.stale = True
            entry.records = update.records
        return entry

    def recompute(self, entry: CacheEntry, attachment: str) -> CacheEntry:
        """Localized path computation from the records an update carried."""
        if not entry.records:
            raise NameNotFound(str(entry.name))
        results = []
        for rec in entry.records:
            p = self.paths.path(attachment, rec.attachment)
            results.append(DiscoveryResult(p.path_id, rec.mac, rec.host_id, rec.attachment, p.hops))
        if entry.name.service_class == ANYCAST:
            results = [min(results, key=lambda r: (r.hops, r.host_id))]
        entry.results = tuple(results)
        entry.stale = False
        return entry

    def dump_csv(self, fh=None) -> str:
        buf = fh or io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("name", "host_id", "attachment", "stale"))
        for text in sorted(self.entries):
            e = self.entries[text]
            for r in e.results:
                w.writerow((text, r.host_id, r.attachment, int(e.stale)))
        return buf.getvalue() if fh is None else ""


def combined_path(results) -> PathId:
    return combine(r.path_id for r in results)


@dataclass
class NrService:
    """The resolver placed on the simulator behind a control channel.

    ``rtt_ms`` is the endpoint-to-NR round trip, split evenly into two
    one-way legs that are jittered independently.
    """

    sim: Simulator
    resolver: Resolver
    rtt_ms: float = 9.0
    processing_ms: float = 1.0
    jitter: float = 0.10
    listeners: dict[str, Callable[[PathUpdate], None]] = field(default_factory=dict)

    def __post_init__(self):
        self.leg = LinkModel(self.rtt_ms / 2, self.jitter)
        self.lookups = 0
        self.updates_sent = 0

    def attach_listener(self, requester: str, fn: Callable[[PathUpdate], None]) -> None:
        self.listeners[requester] = fn

    def discover(self, name, requester: str, attachment: str, callback: Callable) -> None:
        """Schedule a lookup; ``callback(result_or_exception)`` on return."""
        self.sim.schedule(self.leg.sample(self.sim.rng), self._at_nr, as_name(name), requester, attachment, callback)

    def _at_nr(self, name, requester, attachment, callback):
        self.sim.schedule(self.processing_ms, self._answer, name, requester, attachment, callback)

    def _answer(self, name, requester, attachment, callback):
        self.lookups += 1
        self.sim.trace.log(self.sim.now, "nr", 0, 0, "nr_lookup")
        try:
            answer = self.resolver.discover(name, attachment, requester)
        except NameNotFound as exc:
            answer = exc
        self.sim.schedule(self.leg.sample(self.sim.rng), callback, answer)

    def register(self, name, host_id, mac, attachment):
        self._dispatch(self.resolver.register(name, host_id, mac, attachment, self.sim.now))

    def deregister(self, name, host_id):
        self._dispatch(self.resolver.deregister(name, host_id))

    def move(self, name, host_id, new_attachment, mac=None):
        self._dispatch(self.resolver.move(name, host_id, new_attachment, mac, self.sim.now))

    def _dispatch(self, updates):
        for upd in updates:
            fn = self.listeners.get(upd.requester)
            if fn is None:
                continue
            self.updates_sent += 1
            self.sim.trace.log(self.sim.now, "nr", 0, 0, "path_update")
            self.sim.schedule(self.leg.sample(self.sim.rng), fn, upd)
