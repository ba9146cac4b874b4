"""Identity management: issuance, resolution, caching and migration.

The cloud registry is the single authority for user identities.  Every
community node keeps a local cache of identities it has seen; lookups
resolve through three stages, cheapest first:

  1. intra-zone: the origin node's cache, then caches of zone mates that
     are reachable without leaving the zone (no cloud traffic),
  2. inter-zone: the cloud directory (one round trip, result cached),
  3. external: numbers that belong to no member route out through the
     egress gateway.

Invalidation is lazy: migration updates the cloud binding immediately and
stale cache entries are dropped the next time their node syncs.

A resolver ring distributes directory load across several cloud servers:
an identity x is served by the member m minimizing (H(x) - H(m)) mod 2^32,
with ties broken by the smaller member id.  The hash is seedable and
non-cryptographic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import (
    BackhaulDown,
    CloudUnreachable,
    DuplicateName,
    EmptyRing,
    ExternalAllocFailed,
    NameNotFound,
    UnknownIdentity,
)
from .topology import Topology

_FNV_OFFSET = 2166136261
_FNV_PRIME = 16777619
_MASK = 0xFFFFFFFF


def hash32(value: str | bytes, seed: int = 0) -> int:
    """Seedable 32-bit FNV-1a with an avalanche finisher."""
    data = value.encode() if isinstance(value, str) else value
    h = (_FNV_OFFSET ^ (seed & _MASK)) & _MASK
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    # Final mix spreads sequential inputs across the whole range.
    h ^= h >> 16
    h = (h * 0x85EBCA6B) & _MASK
    h ^= h >> 13
    h = (h * 0xC2B2AE35) & _MASK
    h ^= h >> 16
    return h


@dataclass(frozen=True)
class UserIdentity:
    imsi: str
    kind: str  # "local" or "global"
    number: str
    chosen_name: str | None = None
    external_number: str | None = None

    def names(self) -> list[str]:
        out = [self.imsi, self.number]
        if self.chosen_name:
            out.append(self.chosen_name)
        if self.external_number:
            out.append(self.external_number)
        return out


@dataclass
class NetworkAddress:
    zone: str
    node: int
    local_addr: str


@dataclass(frozen=True)
class ApplicationIdentity:
    app_type: str
    key: str
    owners: tuple[str, ...]

    def __post_init__(self):
        if not self.owners:
            raise ValueError("application identity needs at least one owner")


@dataclass
class CacheEntry:
    identity: UserIdentity
    address: NetworkAddress
    registered_at: float
    active: bool = True


class IdentityCache:
    """Per-node identity cache, indexed by every name an identity answers to."""

    def __init__(self):
        self._by_imsi: dict[str, CacheEntry] = {}
        self._names: dict[str, str] = {}

    def put(self, entry: CacheEntry) -> None:
        self._by_imsi[entry.identity.imsi] = entry
        for name in entry.identity.names():
            self._names[name] = entry.identity.imsi

    def get(self, name: str) -> CacheEntry | None:
        imsi = self._names.get(name)
        return self._by_imsi.get(imsi) if imsi else None

    def drop(self, imsi: str) -> None:
        entry = self._by_imsi.pop(imsi, None)
        if entry:
            for name in entry.identity.names():
                self._names.pop(name, None)

    def entries(self) -> list[CacheEntry]:
        return list(self._by_imsi.values())


@dataclass(frozen=True)
class ResolverRing:
    members: tuple[int, ...]
    seed: int = 0


def resolver_for(ring: ResolverRing, value: UserIdentity | str) -> int:
    """Ring member responsible for value; see the module docstring."""
    if not ring.members:
        raise EmptyRing("resolver ring has no members")
    key = value.imsi if isinstance(value, UserIdentity) else str(value)
    hx = hash32(key, ring.seed)
    best = None
    best_key = None
    for member in ring.members:
        dist = (hx - hash32(str(member), ring.seed)) & _MASK
        cand = (dist, member)
        if best_key is None or cand < best_key:
            best_key = cand
            best = member
    return best


class EgressAllocator:
    """Pool of external numbers handed to global identities."""

    def __init__(self, pool: list[str] | int = 32):
        if isinstance(pool, int):
            pool = [f"+1555{2000000 + i:07d}" for i in range(pool)]
        self._free = list(pool)
        self.assigned: dict[str, str] = {}

    def allocate(self, imsi: str) -> str:
        if not self._free:
            raise ExternalAllocFailed("external number pool exhausted")
        number = self._free.pop(0)
        self.assigned[imsi] = number
        return number


@dataclass
class LookupResult:
    identity: UserIdentity | None
    address: NetworkAddress | None
    stage: str  # "intra_zone", "inter_zone" or "external"
    external: str | None = None
    rtt_s: float = 0.0


class CloudRegistry:
    """Authoritative identity directory living on the cloud controller."""

    def __init__(self, zones_prefix: dict[str, str], egress: EgressAllocator):
        self._prefixes = dict(zones_prefix)
        self._egress = egress
        self.identities: dict[str, UserIdentity] = {}
        self.bindings: dict[str, NetworkAddress] = {}
        self._names: dict[str, str] = {}
        self._next_number = 1
        self._addr_seq: dict[int, int] = {}

    def _address(self, zone: str, node: int) -> NetworkAddress:
        seq = self._addr_seq.get(node, 0) + 1
        self._addr_seq[node] = seq
        prefix = self._prefixes[zone]
        return NetworkAddress(zone=zone, node=node, local_addr=f"{prefix}.{node}.{seq}")

    def issue(
        self,
        imsi: str,
        kind: str,
        zone: str,
        node: int,
        chosen_name: str | None = None,
    ) -> tuple[UserIdentity, NetworkAddress, bool]:
        """Issue (or re-home) an identity.  Returns (identity, address, created)."""
        existing = self.identities.get(imsi)
        if existing is not None:
            binding = self.bindings[imsi]
            if binding.node != node:
                self.bindings[imsi] = self._address(zone, node)
            return existing, self.bindings[imsi], False
        if chosen_name is not None:
            owner = self._names.get(chosen_name)
            if owner is not None and owner != imsi:
                raise DuplicateName(f"name {chosen_name!r} is already registered")
        external = None
        if kind == "global":
            external = self._egress.allocate(imsi)
        number = f"{5000000 + self._next_number}"
        self._next_number += 1
        identity = UserIdentity(
            imsi=imsi,
            kind=kind,
            number=number,
            chosen_name=chosen_name,
            external_number=external,
        )
        self.identities[imsi] = identity
        for name in identity.names():
            self._names[name] = imsi
        self.bindings[imsi] = self._address(zone, node)
        return identity, self.bindings[imsi], True

    def find(self, name: str) -> tuple[UserIdentity, NetworkAddress] | None:
        imsi = self._names.get(name)
        if imsi is None:
            return None
        return self.identities[imsi], self.bindings[imsi]

    def rebind(self, imsi: str, zone: str, node: int) -> NetworkAddress:
        if imsi not in self.identities:
            raise UnknownIdentity(f"no identity for imsi {imsi}")
        self.bindings[imsi] = self._address(zone, node)
        return self.bindings[imsi]

    # ------------------------------------------------------ dump / load

    def dump(self) -> str:
        """Structured text snapshot; load() restores an equal registry."""
        lines = [f"nextnum|{self._next_number}"]
        for node, seq in sorted(self._addr_seq.items()):
            lines.append(f"addrseq|{node}|{seq}")
        for imsi in sorted(self.identities):
            ident = self.identities[imsi]
            lines.append(
                "identity|%s|%s|%s|%s|%s"
                % (
                    ident.imsi,
                    ident.kind,
                    ident.number,
                    ident.chosen_name or "-",
                    ident.external_number or "-",
                )
            )
            addr = self.bindings[imsi]
            lines.append(f"binding|{imsi}|{addr.zone}|{addr.node}|{addr.local_addr}")
        return "\n".join(lines) + "\n"

    def load(self, text: str) -> None:
        for line in text.splitlines():
            if not line.strip():
                continue
            parts = line.split("|")
            tag = parts[0]
            if tag == "nextnum":
                self._next_number = int(parts[1])
            elif tag == "addrseq":
                self._addr_seq[int(parts[1])] = int(parts[2])
            elif tag == "identity":
                imsi, kind, number, name, ext = parts[1:6]
                ident = UserIdentity(
                    imsi=imsi,
                    kind=kind,
                    number=number,
                    chosen_name=None if name == "-" else name,
                    external_number=None if ext == "-" else ext,
                )
                self.identities[imsi] = ident
                for n in ident.names():
                    self._names[n] = imsi
            elif tag == "binding":
                imsi, zone, node, local = parts[1:5]
                self.bindings[imsi] = NetworkAddress(
                    zone=zone, node=int(node), local_addr=local
                )


def _looks_external(name: str) -> bool:
    digits = name[1:] if name.startswith("+") else name
    return digits.isdigit() and len(digits) >= 7


@dataclass
class _Pending:
    node: int
    imsi: str
    kind: str
    chosen_name: str | None


class IdentityService:
    """Node-facing identity operations wired to a topology.

    ``counters`` tracks cloud-bound message counts so tests can assert
    which operations stay local.
    """

    def __init__(
        self,
        topology: Topology,
        *,
        egress: EgressAllocator | None = None,
        clock=None,
    ):
        self.topology = topology
        self.egress = egress or EgressAllocator()
        prefixes = {z.zone_id: z.prefix for z in topology.zones.values()}
        self.registry = CloudRegistry(prefixes, self.egress)
        self.clock = clock or (lambda: 0.0)
        self.counters = {"cloud_messages": 0, "handovers": 0, "external_routes": 0}
        self.pending: list[_Pending] = []
        self.caches: dict[int, IdentityCache] = {}
        for node in topology.nodes.values():
            if node.node_id != topology.cloud_id:
                cache = IdentityCache()
                self.caches[node.node_id] = cache
                node.local_cache = cache

    # ------------------------------------------------------------ helpers

    def _cloud_up(self, node_id: int) -> bool:
        return self.topology.reachable(node_id, self.topology.cloud_id)

    def _cloud_rtt(self, node_id: int) -> float:
        path = self.topology.path(node_id, self.topology.cloud_id)
        if path is None:
            return 0.0
        _, latency = self.topology.path_metrics(path)
        return 2.0 * latency

    # ---------------------------------------------------------- issuance

    def issue_identity(
        self,
        node_id: int,
        imsi: str,
        kind: str = "local",
        chosen_name: str | None = None,
    ) -> UserIdentity:
        """Register imsi at node_id.  While the backhaul is down the request
        is queued and BackhaulDown raised; flush_pending completes it later."""
        if not imsi or not imsi.isdigit():
            raise UnknownIdentity(f"imsi must be a digit string, got {imsi!r}")
        if chosen_name is not None and (not chosen_name or " " in chosen_name):
            raise DuplicateName(f"invalid chosen name {chosen_name!r}")
        if kind not in ("local", "global"):
            raise UnknownIdentity(f"unknown identity kind {kind!r}")
        if not self._cloud_up(node_id):
            self.pending.append(_Pending(node_id, imsi, kind, chosen_name))
            raise BackhaulDown(
                f"cloud unreachable from node {node_id}; issuance queued"
            )
        return self._issue_now(node_id, imsi, kind, chosen_name)

    def _issue_now(self, node_id, imsi, kind, chosen_name) -> UserIdentity:
        zone = self.topology.nodes[node_id].zone
        identity, address, _created = self.registry.issue(
            imsi, kind, zone, node_id, chosen_name
        )
        self.counters["cloud_messages"] += 1
        self.caches[node_id].put(
            CacheEntry(identity=identity, address=address, registered_at=self.clock())
        )
        return identity

    def flush_pending(self) -> int:
        """Complete queued issuance requests whose backhaul came back."""
        done = 0
        remaining = []
        for req in self.pending:
            if self._cloud_up(req.node):
                self._issue_now(req.node, req.imsi, req.kind, req.chosen_name)
                done += 1
            else:
                remaining.append(req)
        self.pending = remaining
        return done

    # ------------------------------------------------------------ lookup

    def lookup(self, origin_node: int, name: str) -> LookupResult:
        zone = self.topology.nodes[origin_node].zone
        # Stage 1: caches inside the zone, origin first, without touching
        # the backhaul.  Only zone mates reachable through live in-zone
        # links count.
        candidates = [origin_node]
        if zone is not None:
            for nid in self.topology.zones[zone].node_ids:
                if nid != origin_node and self.topology.reachable(
                    origin_node, nid, within_zone=zone
                ):
                    candidates.append(nid)
        for nid in candidates:
            entry = self.caches[nid].get(name)
            if entry is not None and entry.active:
                return LookupResult(
                    identity=entry.identity,
                    address=entry.address,
                    stage="intra_zone",
                )
        # Stage 2: cloud directory.
        if not self._cloud_up(origin_node):
            raise CloudUnreachable(f"node {origin_node} cannot reach the directory")
        self.counters["cloud_messages"] += 1
        rtt = self._cloud_rtt(origin_node)
        found = self.registry.find(name)
        if found is not None:
            identity, address = found
            self.caches[origin_node].put(
                CacheEntry(
                    identity=identity, address=address, registered_at=self.clock()
                )
            )
            return LookupResult(
                identity=identity, address=address, stage="inter_zone", rtt_s=rtt
            )
        # Stage 3: egress for numbers that belong to no member.
        if _looks_external(name):
            self.counters["external_routes"] += 1
            return LookupResult(
                identity=None,
                address=None,
                stage="external",
                external=name,
                rtt_s=rtt,
            )
        raise NameNotFound(f"{name!r} matched no cache, directory entry or egress rule")

    # --------------------------------------------------------- migration

    def migrate_user(self, imsi: str, new_node: int) -> NetworkAddress:
        """Re-home an identity.  Same-zone moves are handled as a local
        handover (no cloud round trip); cross-zone moves need the cloud."""
        if imsi not in self.registry.identities:
            raise UnknownIdentity(f"no identity for imsi {imsi}")
        old = self.registry.bindings[imsi]
        new_zone = self.topology.nodes[new_node].zone
        if new_zone is None:
            raise UnknownIdentity(f"node {new_node} is not a community node")
        if new_zone == old.zone:
            self.counters["handovers"] += 1
        else:
            if not self._cloud_up(new_node):
                raise CloudUnreachable(
                    f"cross-zone migration needs the cloud; node {new_node} is cut off"
                )
            self.counters["cloud_messages"] += 1
        address = self.registry.rebind(imsi, new_zone, new_node)
        identity = self.registry.identities[imsi]
        self.caches[new_node].put(
            CacheEntry(identity=identity, address=address, registered_at=self.clock())
        )
        # Old-node caches are left stale on purpose; sync_node drops them.
        return address

    # -------------------------------------------------------------- sync

    def sync_node(self, node_id: int) -> int:
        """Piggybacked cache refresh: drop entries whose binding moved.

        Returns the number of entries dropped.  Costs one cloud message
        when the backhaul is up and there was anything to reconcile.
        """
        if not self._cloud_up(node_id):
            return 0
        self.flush_pending()
        cache = self.caches[node_id]
        dropped = 0
        for entry in cache.entries():
            current = self.registry.bindings.get(entry.identity.imsi)
            if current is None or current.local_addr != entry.address.local_addr:
                cache.drop(entry.identity.imsi)
                dropped += 1
        if dropped:
            self.counters["cloud_messages"] += 1
        return dropped
