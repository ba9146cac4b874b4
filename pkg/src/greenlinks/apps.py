"""Edge applications riding the sync primitives.

Each app maps onto exactly one primitive per user action, so its
tolerance to backhaul loss is the primitive's:

* marketplace SELL  -> slowput   (works offline, receipt arrives later)
* marketplace BUY   -> fastget   (needs the backhaul; fails honestly)
* marketplace SEARCH-> fastsearch
* voice record      -> slowput; playback of a message recorded on the
  same node within the session window is served from the local spool
  with zero cloud traffic, otherwise search + fetch (two round trips)
* farm-boundary upload -> slowput (no download path at the edge)
* user-to-user text -> store_and_forward

The SMS grammar is the whole UI: ``SELL <item> <qty> <price>``,
``BUY <listing id>``, ``SEARCH <item>``.  Search results are folded into
140-byte SMS chunks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import (
    InvalidListing,
    InvalidTrace,
    ListingNotFound,
    NoMessages,
    ScenarioError,
    SoldOut,
    UnknownIdentity,
)
from .sync import LocalServer

SMS_LIMIT = 140


# ------------------------------------------------------------- sms grammar


def parse_command(text: str) -> dict:
    """Parse one marketplace SMS.  Raises ScenarioError on bad grammar."""
    parts = text.strip().split()
    if not parts:
        raise ScenarioError("empty command")
    op = parts[0].upper()
    if op == "SELL":
        if len(parts) != 4:
            raise ScenarioError("usage: SELL <item> <qty> <price>")
        item, qty, price = parts[1], parts[2], parts[3]
        try:
            qty = int(qty)
            price = float(price)
        except ValueError:
            raise ScenarioError("SELL qty must be an integer and price a number")
        return {"op": "sell", "item": item, "qty": qty, "price": price}
    if op == "BUY":
        if len(parts) != 2:
            raise ScenarioError("usage: BUY <listing_id>")
        return {"op": "buy", "listing_id": parts[1]}
    if op == "SEARCH":
        if len(parts) != 2:
            raise ScenarioError("usage: SEARCH <item>")
        return {"op": "search", "item": parts[1]}
    raise ScenarioError(f"unknown command {parts[0]!r}")


def chunk_sms(text: str, limit: int = SMS_LIMIT) -> list[str]:
    """Split result text into SMS-sized chunks on line boundaries where
    possible, hard-wrapping lines longer than one SMS."""
    chunks: list[str] = []
    current = ""
    for line in text.splitlines():
        while len(line) > limit:
            if current:
                chunks.append(current)
                current = ""
            chunks.append(line[:limit])
            line = line[limit:]
        candidate = line if not current else current + "\n" + line
        if len(candidate) <= limit:
            current = candidate
        else:
            chunks.append(current)
            current = line
    if current:
        chunks.append(current)
    return chunks


# ------------------------------------------------------------ marketplace


@dataclass(frozen=True)
class Listing:
    listing_id: str
    item: str
    qty: int
    price: float
    seller: str
    seller_number: str


def market_handler(store, app_type, key, payload, request_id, at):
    """Cloud-side marketplace logic, run under the key's write lock."""
    body = json.loads(payload.decode())
    op = body["op"]
    if op == "sell":
        return store._upsert(app_type, key, payload, request_id, at)
    if op == "buy":
        rec = store.get(app_type, body["listing_id"])
        if rec is None:
            raise ListingNotFound(f"no listing {body['listing_id']!r}")
        listing = json.loads(rec.payload.decode())
        if listing.get("qty", 0) <= 0:
            raise SoldOut(f"listing {body['listing_id']!r} is sold out")
        bought = listing["qty"]
        listing["qty"] = 0
        listing["sold_to"] = body["buyer"]
        listing["sold_at"] = at
        store._upsert(
            app_type,
            body["listing_id"],
            json.dumps(listing, sort_keys=True).encode(),
            request_id,
            at,
        )
        return {
            "ok": True,
            "listing_id": body["listing_id"],
            "item": listing["item"],
            "qty": bought,
            "price": listing["price"],
            "seller": listing["seller"],
            "seller_number": listing["seller_number"],
        }
    raise ScenarioError(f"unknown market op {op!r}")


def voice_handler(store, app_type, key, payload, request_id, at):
    body = json.loads(payload.decode())
    if body["op"] == "record":
        return store._upsert(app_type, key, payload, request_id, at)
    if body["op"] == "fetch":
        rec = store.get(app_type, body["key"])
        if rec is None:
            raise NoMessages(f"no voice message under {body['key']!r}")
        return json.loads(rec.payload.decode())
    raise ScenarioError(f"unknown voice op {body['op']!r}")


class Marketplace:
    """Node-local face of the SMS marketplace."""

    def __init__(self, local: LocalServer, identity_service):
        self.local = local
        self.identity = identity_service
        self._seq = 0
        local.store.handlers.setdefault("market", market_handler)

    def _registered(self, imsi: str):
        entry = self.identity.caches[self.local.node_id].get(imsi)
        if entry is None or not entry.active:
            raise UnknownIdentity(
                f"imsi {imsi} is not registered on node {self.local.node_id}"
            )
        return entry

    def sell(self, seller: str, item: str, qty: int, price: float):
        """Queue a listing; the ack is immediate, the receipt lazy."""
        if not item or any(c.isspace() for c in item):
            raise InvalidListing(f"item must be a single token, got {item!r}")
        if qty <= 0:
            raise InvalidListing("quantity must be positive")
        if price <= 0:
            raise InvalidListing("price must be positive")
        entry = self._registered(seller)
        self._seq += 1
        listing_id = f"L{self.local.node_id}-{self._seq}"
        listing = Listing(
            listing_id=listing_id,
            item=item,
            qty=qty,
            price=price,
            seller=seller,
            seller_number=entry.identity.number,
        )
        payload = json.dumps(
            {
                "op": "sell",
                "listing_id": listing_id,
                "item": item,
                "qty": qty,
                "price": price,
                "seller": seller,
                "seller_number": entry.identity.number,
            },
            sort_keys=True,
        ).encode()
        ack = self.local.slowput(seller, "market", payload, key=listing_id)
        return listing, ack

    def buy(self, buyer: str, listing_id: str):
        """Whole-listing purchase over fastget; the response carries the
        seller's contact so the deal closes over voice or SMS."""
        self._registered(buyer)
        payload = json.dumps(
            {"op": "buy", "listing_id": listing_id, "buyer": buyer}, sort_keys=True
        ).encode()
        response = self.local.fastget(buyer, "market", listing_id, payload)
        return response.value, response.at

    def search(self, imsi: str, item: str):
        """Live catalog query; results fold into SMS chunks."""
        self._registered(imsi)

        def match(key, rec):
            body = json.loads(rec.payload.decode())
            return body.get("item") == item and body.get("qty", 0) > 0

        response = self.local.fastsearch(imsi, "market", match)
        listings = []
        for key, rec in response.value:
            body = json.loads(rec.payload.decode())
            listings.append(
                Listing(
                    listing_id=body["listing_id"],
                    item=body["item"],
                    qty=body["qty"],
                    price=body["price"],
                    seller=body["seller"],
                    seller_number=body["seller_number"],
                )
            )
        lines = [
            f"{l.listing_id} {l.item} {l.qty}@{l.price:g} {l.seller_number}"
            for l in listings
        ]
        chunks = chunk_sms("\n".join(lines)) if lines else []
        return listings, chunks, response.at


# ------------------------------------------------------------------ voice


@dataclass
class Playback:
    source: str  # "local" or "cloud"
    author: str
    language: str
    recorded_at: float
    audio: bytes
    at: float


class VoiceBoard:
    """Community voice messages with a short-lived local session spool."""

    def __init__(self, local: LocalServer, session_window_s: float = 600.0):
        self.local = local
        self.window = session_window_s
        self._session: list[dict] = []
        self._seq = 0
        local.store.handlers.setdefault("voice", voice_handler)

    def record_message(self, author: str, audio: bytes, language: str = "tw"):
        if not audio:
            raise InvalidTrace("empty recording")
        now = self.local.clock()
        self._seq += 1
        msg_id = f"v{self.local.node_id}-{self._seq}"
        body = {
            "op": "record",
            "key": msg_id,
            "author": author,
            "language": language,
            "recorded_at": now,
            "audio": audio.decode("latin1"),
        }
        ack = self.local.slowput(
            author, "voice", json.dumps(body, sort_keys=True).encode(), key=msg_id
        )
        self._session.append(body)
        return msg_id, ack

    def fetch_latest(self, listener: str) -> Playback:
        """Newest message.  Same-node recordings inside the session window
        play from the local spool with zero cloud traffic; otherwise one
        search plus one fetch against the cloud."""
        now = self.local.clock()
        self._session = [
            m for m in self._session if now - m["recorded_at"] <= self.window
        ]
        if self._session:
            latest = max(self._session, key=lambda m: m["recorded_at"])
            return Playback(
                source="local",
                author=latest["author"],
                language=latest["language"],
                recorded_at=latest["recorded_at"],
                audio=latest["audio"].encode("latin1"),
                at=now,
            )
        found = self.local.fastsearch(listener, "voice", lambda k, r: True)
        if not found.value:
            raise NoMessages("nobody has recorded anything yet")
        newest_key, newest = max(
            found.value,
            key=lambda kv: json.loads(kv[1].payload.decode())["recorded_at"],
        )
        fetch = self.local.fastget(
            listener,
            "voice",
            newest_key,
            json.dumps({"op": "fetch", "key": newest_key}).encode(),
        )
        body = fetch.value
        return Playback(
            source="cloud",
            author=body["author"],
            language=body["language"],
            recorded_at=body["recorded_at"],
            audio=body["audio"].encode("latin1"),
            at=fetch.at,
        )


# ------------------------------------------------------------------- farm


def farm_payload(waypoints: list[tuple[float, float]]) -> bytes:
    lines = [f"{lat:.6f},{lon:.6f}" for lat, lon in waypoints]
    return ("\n".join(lines) + "\n").encode()


class FarmMapper:
    """Upload-only GPS boundary traces for land records."""

    def __init__(self, local: LocalServer):
        self.local = local
        self._seq = 0

    def upload_farm(self, surveyor: str, waypoints, meta: str = ""):
        if len(waypoints) < 3:
            raise InvalidTrace("a boundary needs at least three waypoints")
        for point in waypoints:
            if len(point) != 2:
                raise InvalidTrace(f"bad waypoint {point!r}")
        self._seq += 1
        farm_id = f"F{self.local.node_id}-{self._seq}"
        ack = self.local.slowput(
            surveyor, "farm", farm_payload(waypoints), key=farm_id
        )
        return farm_id, ack


# --------------------------------------------------------------- workload


WORKLOAD_DEFAULTS = {
    "sellers": 4,
    "buyers": 3,
    "sell_period_s": 10.0,
    "buy_period_s": 10.0,
    "until_s": 600.0,
    "file_bytes": 1000000,
    "file_count": 0,
    "file_period_s": 30.0,
    "items": ["maize", "cassava", "yam", "rice"],
    "node": None,
}


class Workload:
    """Scripted marketplace load for latency experiments.

    Registers sellers and buyers on one community node, then schedules
    periodic SELLs (slowput, sms-class), BUYs (fastget) and optional
    file-class slowputs that share the same lazy queue.
    """

    def __init__(self, sim, config: dict | None = None):
        self.sim = sim
        cfg = dict(WORKLOAD_DEFAULTS)
        cfg.update(config or {})
        self.cfg = cfg
        node = cfg["node"]
        if node is None:
            node = min(
                n for n in sim.topology.nodes if n != sim.topology.cloud_id
            )
        self.node = node
        self.local = sim.local(node)
        self.market = Marketplace(self.local, sim.identity)
        self.sellers = []
        self.buyers = []
        self.listings: list[str] = []
        self.buy_errors = 0
        engine = sim.engine
        engine.on("wl_sell", self._on_sell)
        engine.on("wl_buy", self._on_buy)
        engine.on("wl_file", self._on_file)

    def schedule(self) -> None:
        cfg = self.cfg
        for i in range(cfg["sellers"]):
            imsi = f"23320000000{i:04d}"
            self.sim.identity.issue_identity(self.node, imsi)
            self.sellers.append(imsi)
        for i in range(cfg["buyers"]):
            imsi = f"23321000000{i:04d}"
            self.sim.identity.issue_identity(self.node, imsi)
            self.buyers.append(imsi)
        engine = self.sim.engine
        until = cfg["until_s"]
        for i, seller in enumerate(self.sellers):
            t = cfg["sell_period_s"] * i / max(1, len(self.sellers))
            while t < until:
                engine.schedule(t, "wl_sell", seller=seller)
                t += cfg["sell_period_s"]
        for i, buyer in enumerate(self.buyers):
            t = cfg["buy_period_s"] * (0.5 + i) / max(1, len(self.buyers))
            while t < until:
                engine.schedule(t, "wl_buy", buyer=buyer)
                t += cfg["buy_period_s"]
        for k in range(cfg["file_count"]):
            engine.schedule(k * cfg["file_period_s"], "wl_file", index=k)

    # ------------------------------------------------------------ events

    def _on_sell(self, seller: str) -> None:
        rng = self.sim.engine.rng
        item = self.cfg["items"][rng.randrange(len(self.cfg["items"]))]
        qty = rng.randrange(1, 50)
        price = round(rng.uniform(0.5, 20.0), 2)
        listing, _ack = self.market.sell(seller, item, qty, price)
        self.listings.append(listing.listing_id)
        self.sim.poke(self.node)

    def _on_buy(self, buyer: str) -> None:
        from .errors import GreenLinksError

        rng = self.sim.engine.rng
        if not self.listings:
            return
        listing_id = self.listings[rng.randrange(len(self.listings))]
        try:
            self.market.buy(buyer, listing_id)
        except GreenLinksError:
            self.buy_errors += 1

    def _on_file(self, index: int) -> None:
        stamp = b"file:%d|" % index
        payload = stamp + b"\xa5" * (max(1, self.cfg["file_bytes"]) - len(stamp))
        self.local.slowput(
            f"23320000000{index % max(1, self.cfg['sellers']):04d}",
            "file",
            payload,
            key=f"file-{index}",
        )
        self.sim.poke(self.node)
