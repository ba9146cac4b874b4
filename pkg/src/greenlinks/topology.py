"""Network world model: nodes, zones, links and bonded backhauls.

The graph is built once from a scenario mapping and is immutable afterwards
except for link state, which failure injection toggles at runtime.  A
monotonically increasing ``epoch`` counter marks every state change so
callers can cache path computations per epoch.

Levels follow the deployment shape: one cloud controller, level-2 community
nodes with their own backhaul, and level-3 pico nodes that hang off a
level-2 parent.  Zones group the nodes that one operator runs; each zone
has a gateway node and a private address prefix.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .errors import (
    DanglingLinkEndpoint,
    DuplicateNodeId,
    MissingGateway,
    OverlappingPrefix,
    ScenarioError,
    UnknownLink,
)


class Role(str, Enum):
    CLOUD = "cloud"
    LEVEL2 = "level2"
    LEVEL3 = "level3"


class LinkState(str, Enum):
    UP = "up"
    DOWN = "down"


class BondMode(str, Enum):
    ACTIVE_BACKUP = "active_backup"
    LOAD_BALANCE = "load_balance"


# (bandwidth kbps, one-way latency ms) for the profiles used in experiments.
LINK_PROFILES = {
    "edge": (200.0, 300.0),
    "hsdpa": (2000.0, 100.0),
    "ethernet": (100000.0, 5.0),
}

# Decimal convention: 1 kbps = 125 bytes/second, 1 MB = 1_000_000 bytes.
BYTES_PER_KBPS = 125.0


@dataclass
class Node:
    node_id: int
    role: Role
    zone: str | None = None
    tx_power_dbm: float = 30.0
    # Attached by the identity layer at runtime; the graph itself does not
    # depend on it.
    local_cache: object | None = None


@dataclass(frozen=True)
class Zone:
    zone_id: str
    node_ids: tuple[int, ...]
    gateway: int
    prefix: str


@dataclass
class Link:
    link_id: str
    a: int
    b: int
    bandwidth_kbps: float
    latency_ms: float
    state: LinkState = LinkState.UP
    profile: str = "custom"

    def other(self, node_id: int) -> int:
        return self.b if node_id == self.a else self.a

    @property
    def up(self) -> bool:
        return self.state is LinkState.UP


@dataclass
class BondedBackhaul:
    members: list[Link]
    mode: BondMode = BondMode.ACTIVE_BACKUP


def effective_bandwidth(bond: BondedBackhaul, flows: int) -> list[float]:
    """Per-flow kbps allocation across the bond's live members.

    active_backup sends every flow over the first live member and shares
    its capacity fairly.  load_balance assigns flows to live members
    round-robin; a flow never splits across links, so its share is capped
    by the fair share of the one link it landed on.
    """
    if flows <= 0:
        return []
    live = [m for m in bond.members if m.up]
    if not live:
        return [0.0] * flows
    if bond.mode is BondMode.ACTIVE_BACKUP:
        share = live[0].bandwidth_kbps / flows
        return [share] * flows
    assignment = [live[i % len(live)] for i in range(flows)]
    per_link = {id(m): 0 for m in live}
    for link in assignment:
        per_link[id(link)] += 1
    return [link.bandwidth_kbps / per_link[id(link)] for link in assignment]


class Topology:
    """Validated graph with reachability and path-metric queries."""

    def __init__(
        self,
        nodes: dict[int, Node],
        zones: dict[str, Zone],
        links: dict[str, Link],
        bonds: list[BondedBackhaul],
    ):
        self.nodes = nodes
        self.zones = zones
        self.links = links
        self.bonds = bonds
        self.cloud_id = next(
            n.node_id for n in nodes.values() if n.role is Role.CLOUD
        )
        self.epoch = 0
        self._adj: dict[int, list[Link]] = {nid: [] for nid in nodes}
        for link in links.values():
            self._adj[link.a].append(link)
            self._adj[link.b].append(link)

    # ------------------------------------------------------------ queries

    def zone_of(self, node_id: int) -> Zone | None:
        zid = self.nodes[node_id].zone
        return self.zones[zid] if zid is not None else None

    def set_link_state(self, link_id: str, state: LinkState | str) -> None:
        link = self.links.get(link_id)
        if link is None:
            raise UnknownLink(f"no link with id {link_id!r}")
        state = LinkState(state)
        if link.state is not state:
            link.state = state
            self.epoch += 1

    def reachable(self, a: int, b: int, *, within_zone: str | None = None) -> bool:
        return self.path(a, b, within_zone=within_zone) is not None

    def path(
        self, a: int, b: int, *, within_zone: str | None = None
    ) -> list[Link] | None:
        """Shortest-hop path over live links, or None.

        ``within_zone`` restricts the search to that zone's members, which
        models resolution that must not leave the operator's island.
        """
        if a == b:
            return []
        allowed = None
        if within_zone is not None:
            allowed = set(self.zones[within_zone].node_ids)
            if a not in allowed or b not in allowed:
                return None
        seen = {a}
        frontier: deque[tuple[int, list[Link]]] = deque([(a, [])])
        while frontier:
            node, trail = frontier.popleft()
            for link in self._adj[node]:
                if not link.up:
                    continue
                nxt = link.other(node)
                if nxt in seen:
                    continue
                if allowed is not None and nxt not in allowed:
                    continue
                hop = trail + [link]
                if nxt == b:
                    return hop
                seen.add(nxt)
                frontier.append((nxt, hop))
        return None

    def path_metrics(self, path: list[Link]) -> tuple[float, float]:
        """(bottleneck kbps, total one-way latency seconds) of a path."""
        if not path:
            return (float("inf"), 0.0)
        bw = min(link.bandwidth_kbps for link in path)
        latency = sum(link.latency_ms for link in path) / 1000.0
        return (bw, latency)

    def components(self) -> dict[int, int]:
        """Connected-component label per node over live links."""
        label: dict[int, int] = {}
        mark = 0
        for start in self.nodes:
            if start in label:
                continue
            label[start] = mark
            frontier = deque([start])
            while frontier:
                node = frontier.popleft()
                for link in self._adj[node]:
                    if not link.up:
                        continue
                    nxt = link.other(node)
                    if nxt not in label:
                        label[nxt] = mark
                        frontier.append(nxt)
            mark += 1
        return label


# -------------------------------------------------------------- building


def _prefixes_overlap(p: str, q: str) -> bool:
    pa, qa = p.split("."), q.split(".")
    shorter, longer = (pa, qa) if len(pa) <= len(qa) else (qa, pa)
    return longer[: len(shorter)] == shorter


def build_topology(config: dict) -> Topology:
    """Validate a scenario mapping and build the world graph.

    Rules enforced here: unique node ids, exactly one cloud node, every
    non-cloud node in exactly one zone, each zone's gateway a member,
    disjoint zone prefixes, link endpoints that exist, and level-3 nodes
    attached through some level-2 parent.
    """
    raw_nodes = config.get("nodes", [])
    if not raw_nodes:
        raise ScenarioError("scenario defines no nodes")

    nodes: dict[int, Node] = {}
    for entry in raw_nodes:
        nid = entry["id"]
        if nid in nodes:
            raise DuplicateNodeId(f"node id {nid} appears twice")
        try:
            role = Role(entry["role"])
        except ValueError:
            raise ScenarioError(f"node {nid}: unknown role {entry['role']!r}")
        nodes[nid] = Node(
            node_id=nid,
            role=role,
            tx_power_dbm=float(entry.get("tx_power_dbm", 30.0)),
        )

    clouds = [n for n in nodes.values() if n.role is Role.CLOUD]
    if len(clouds) != 1:
        raise ScenarioError(
            f"scenario must define exactly one cloud node, found {len(clouds)}"
        )

    zones: dict[str, Zone] = {}
    for entry in config.get("zones", []):
        zid = entry["id"]
        if zid in zones:
            raise ScenarioError(f"zone id {zid!r} appears twice")
        members = tuple(entry["nodes"])
        gateway = entry.get("gateway")
        if gateway is None or gateway not in members:
            raise MissingGateway(f"zone {zid!r} has no gateway among its nodes")
        for nid in members:
            if nid not in nodes:
                raise ScenarioError(f"zone {zid!r} lists unknown node {nid}")
            if nodes[nid].role is Role.CLOUD:
                raise ScenarioError(f"cloud node {nid} cannot belong to a zone")
            if nodes[nid].zone is not None:
                raise ScenarioError(f"node {nid} belongs to more than one zone")
            nodes[nid].zone = zid
        prefix = str(entry["prefix"])
        for other in zones.values():
            if _prefixes_overlap(prefix, other.prefix):
                raise OverlappingPrefix(
                    f"zone {zid!r} prefix {prefix} overlaps {other.zone_id!r}"
                )
        zones[zid] = Zone(zone_id=zid, node_ids=members, gateway=gateway, prefix=prefix)

    for node in nodes.values():
        if node.role is not Role.CLOUD and node.zone is None:
            raise ScenarioError(f"node {node.node_id} belongs to no zone")

    links: dict[str, Link] = {}
    for i, entry in enumerate(config.get("links", [])):
        link_id = str(entry.get("id", f"l{i}"))
        if link_id in links:
            raise ScenarioError(f"link id {link_id!r} appears twice")
        a, b = entry["a"], entry["b"]
        if a not in nodes or b not in nodes:
            raise DanglingLinkEndpoint(f"link {link_id!r} references a missing node")
        if a == b:
            raise ScenarioError(f"link {link_id!r} is a self-loop")
        profile = entry.get("profile")
        if profile is not None:
            if profile not in LINK_PROFILES:
                raise ScenarioError(f"link {link_id!r}: unknown profile {profile!r}")
            bw, lat = LINK_PROFILES[profile]
        else:
            bw, lat = None, None
            profile = "custom"
        bw = float(entry.get("bandwidth_kbps", bw if bw is not None else 0.0))
        lat = float(entry.get("latency_ms", lat if lat is not None else 0.0))
        if bw <= 0:
            raise ScenarioError(f"link {link_id!r} needs positive bandwidth")
        if lat < 0:
            raise ScenarioError(f"link {link_id!r} has negative latency")
        links[link_id] = Link(
            link_id=link_id,
            a=a,
            b=b,
            bandwidth_kbps=bw,
            latency_ms=lat,
            state=LinkState(entry.get("state", "up")),
            profile=profile,
        )

    level2_ids = {n.node_id for n in nodes.values() if n.role is Role.LEVEL2}
    for node in nodes.values():
        if node.role is not Role.LEVEL3:
            continue
        parents = [
            l
            for l in links.values()
            if node.node_id in (l.a, l.b) and l.other(node.node_id) in level2_ids
        ]
        if not parents:
            raise ScenarioError(
                f"level3 node {node.node_id} has no link to a level2 parent"
            )

    bonds: list[BondedBackhaul] = []
    for entry in config.get("bonded", []):
        member_ids = entry.get("members", [])
        if not member_ids:
            raise ScenarioError("bonded backhaul needs at least one member link")
        members = []
        for lid in member_ids:
            if lid not in links:
                raise ScenarioError(f"bonded backhaul references unknown link {lid!r}")
            members.append(links[lid])
        try:
            mode = BondMode(entry.get("mode", "active_backup"))
        except ValueError:
            raise ScenarioError(f"unknown bond mode {entry['mode']!r}")
        bonds.append(BondedBackhaul(members=members, mode=mode))

    return Topology(nodes, zones, links, bonds)
