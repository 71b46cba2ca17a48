"""The four oracle flows between off-chain components and the ledger.

* push-in:  off-chain component signs and submits a transaction.
* pull-out: off-chain component reads contract state, no transaction.
* push-out: contract events fanned out to subscribed components.
* pull-in:  contract asks a component for data (evidence) and the reply
            is submitted back on-chain.

Deliveries are queued and only handed to components from
:meth:`OracleBus.deliver`, which the simulation loop calls; handlers
never re-enter the bus.  Oracles are trusted couriers: no dishonesty is
modelled here.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass
from typing import Any, Protocol

from .codec import canonical_json, from_hex, to_hex
from .de_app import Event, Evidence, encode_args
from .identity import KeyPair
from .ledger import Ledger, Receipt, Transaction, open_account_tx

log = logging.getLogger(__name__)

PUSH_IN = "PushIn"
PUSH_OUT = "PushOut"
PULL_IN = "PullIn"
PULL_OUT = "PullOut"
DE_APP = "de_app"
ORACLE_ID = "oracle"
DEFAULT_TIMEOUT_TICKS = 10


class BusReentryError(RuntimeError):
    pass


@dataclass(frozen=True)
class OracleMessage:
    kind: str
    origin: str
    target: str
    correlation_id: int
    payload: bytes
    event_type: str = ""

    def event(self) -> dict:
        return json.loads(self.payload)


@dataclass(frozen=True)
class Subscription:
    subscriber: str
    event_type: str
    resource_id: bytes | None = None
    address: bytes | None = None

    def matches(self, event: Event) -> bool:
        return (
            event.type == self.event_type
            and (self.resource_id is None or event.resource_id == self.resource_id)
            and (self.address is None or event.address == self.address)
        )


@dataclass(frozen=True)
class TraceLine:
    tick: int
    kind: str
    origin: str
    target: str
    correlation_id: int
    event_type: str

    def __str__(self) -> str:
        return f"{self.tick} {self.kind} {self.origin}→{self.target} {self.correlation_id} {self.event_type}"


@dataclass
class PendingPull:
    correlation_id: int
    monitor_id: int
    holder: bytes
    target: str
    issued_tick: int


@dataclass(frozen=True)
class PullTimeout:
    correlation_id: int
    monitor_id: int
    holder: bytes


class Component(Protocol):
    def on_push_out(self, msg: OracleMessage) -> None: ...

    def on_pull_in(self, msg: OracleMessage) -> Evidence | None: ...


class OracleBus:
    """In-process transport; FIFO in enqueue order, hence FIFO per pair."""

    def __init__(self, ledger: Ledger, timeout_ticks: int = DEFAULT_TIMEOUT_TICKS, oracle_key: KeyPair | None = None):
        self.ledger = ledger
        self.timeout_ticks = timeout_ticks
        self.oracle_key = oracle_key
        self.tick = 0
        self.now = 0
        self.trace: list[TraceLine] = []
        self.subscriptions: list[Subscription] = []
        self.timeouts: list[PullTimeout] = []
        self.pending_pulls: dict[int, PendingPull] = {}
        self._components: dict[str, Component] = {}
        self._keys: dict[str, KeyPair] = {}
        self._responders: dict[bytes, str] = {}
        self._queue: deque[OracleMessage] = deque()
        self._next_corr = 1
        self._busy = False

    # --- wiring ---------------------------------------------------------------

    def attach(self, component_id: str, component: Component, key: KeyPair | None = None, responder: bool = False) -> None:
        """Register a component; ``responder`` makes it answer pull-in requests for its key's address."""
        self._components[component_id] = component
        if key is not None:
            self._keys[component_id] = key
            if responder:
                self._responders[key.address] = component_id

    def detach(self, component_id: str) -> None:
        self._components.pop(component_id, None)

    def subscribe(self, sub: Subscription) -> None:
        if sub not in self.subscriptions:
            self.subscriptions.append(sub)

    @property
    def idle(self) -> bool:
        return not self._queue

    def _corr(self) -> int:
        c = self._next_corr
        self._next_corr += 1
        return c

    def _record(self, kind: str, origin: str, target: str, corr: int, event_type: str) -> None:
        self.trace.append(TraceLine(self.tick, kind, origin, target, corr, event_type))

    # --- off-chain initiated --------------------------------------------------

    def push_in(self, origin: str, method: str, payload: bytes, key: KeyPair) -> Receipt:
        """Sign and submit ``method(payload)`` for ``origin``; returns the receipt."""
        self._record(PUSH_IN, origin, DE_APP, self._corr(), method)
        return self._submit(key, method, payload)

    def pull_out(self, origin: str, query: bytes) -> Any:
        """Read committed contract state; never creates a transaction."""
        name = json.loads(query).get("query", "?")
        self._record(PULL_OUT, origin, DE_APP, self._corr(), name)
        return self.ledger.read_state(query)

    def open_account(self, key: KeyPair) -> Receipt:
        """Market registration; outside the six workflows, so untraced."""
        return self.ledger.submit_tx(open_account_tx(key))

    def _submit(self, key: KeyPair, method: str, payload: bytes) -> Receipt:
        tx = Transaction.create(key, self.ledger.next_nonce(key.address), method, payload)
        receipt = self.ledger.submit_tx(tx)
        if not receipt.accepted:
            log.info("%s from %s: %s", method, key.hex_address, receipt)
        return receipt

    # --- on-chain initiated ---------------------------------------------------

    def dispatch_push_out(self) -> int:
        """Drain the ledger event queue into component deliveries.

        EvidenceRequested events go through the pull-in half; everything
        else is fanned out to matching subscriptions in registration order.
        """
        if self._busy:
            raise BusReentryError("dispatch called from inside a handler")
        queued = 0
        for _height, event in self.ledger.take_events():
            if event.type == "EvidenceRequested":
                queued += self._queue_pull_in(event)
                continue
            payload = canonical_json(event.to_json())
            seen: set[str] = set()
            for sub in self.subscriptions:
                if sub.subscriber in seen or not sub.matches(event):
                    continue
                seen.add(sub.subscriber)
                self._queue.append(OracleMessage(PUSH_OUT, DE_APP, sub.subscriber, self._corr(), payload, event.type))
                queued += 1
            if not seen:
                log.debug("no subscriber for %s", event.describe())
        return queued

    def _queue_pull_in(self, event: Event) -> int:
        target = self._responders.get(event.address)
        corr = self._corr()
        mid = int(event.data["monitor_id"])
        self.pending_pulls[corr] = PendingPull(corr, mid, event.address, target or "", self.tick)
        if target is None:
            log.warning("no pull-in responder for %s", to_hex(event.address))
            return 0
        self._queue.append(
            OracleMessage(PULL_IN, DE_APP, target, corr, canonical_json(event.to_json()), event.type)
        )
        return 1

    def deliver(self) -> int:
        """Hand every queued message to its target component."""
        if self._busy:
            raise BusReentryError("deliver called from inside a handler")
        delivered = 0
        while self._queue:
            msg = self._queue.popleft()
            component = self._components.get(msg.target)
            if component is None:
                log.warning("UndeliverableEvent %s to %s", msg.event_type, msg.target)
                continue
            self._record(msg.kind, msg.origin, msg.target, msg.correlation_id, msg.event_type)
            delivered += 1
            self._busy = True
            try:
                if msg.kind == PUSH_OUT:
                    component.on_push_out(msg)
                    continue
                reply = component.on_pull_in(msg)
            finally:
                self._busy = False
            if reply is not None:
                self._answer_pull(msg, reply)
        return delivered

    def _answer_pull(self, msg: OracleMessage, evidence: Evidence) -> None:
        pull = self.pending_pulls.pop(msg.correlation_id, None)
        if pull is None:
            log.warning("reply for unknown pull %d", msg.correlation_id)
            return
        payload = encode_args(monitor_id=pull.monitor_id, evidence=evidence.to_json())
        receipt = self._submit(self._keys[msg.target], "submit_evidence", payload)
        if not receipt.accepted:
            # the holder stays pending on chain and will time out
            self.pending_pulls[msg.correlation_id] = pull

    def advance_tick(self, now: int | None = None) -> list[PullTimeout]:
        """Advance the bus clock one tick and expire overdue pull-ins."""
        self.tick += 1
        if now is not None:
            self.now = now
        expired = []
        for corr in sorted(self.pending_pulls):
            pull = self.pending_pulls[corr]
            if self.tick - pull.issued_tick > self.timeout_ticks:
                expired.append(PullTimeout(corr, pull.monitor_id, pull.holder))
        for t in expired:
            del self.pending_pulls[t.correlation_id]
            self.timeouts.append(t)
            self._report_timeout(t)
        return expired

    def _report_timeout(self, t: PullTimeout) -> None:
        if self.oracle_key is None:
            log.error("pull-in %d timed out but the bus has no oracle key", t.correlation_id)
            return
        if self.ledger.public_key(self.oracle_key.address) is None:
            self.open_account(self.oracle_key)
        payload = encode_args(monitor_id=t.monitor_id, holder=to_hex(t.holder))
        self.push_in(ORACLE_ID, "report_timeout", payload, self.oracle_key)


def parse_event(msg: OracleMessage) -> tuple[str, bytes | None, bytes | None, dict]:
    d = msg.event()
    rid = from_hex(d["resource_id"]) if d.get("resource_id") else None
    addr = from_hex(d["address"]) if d.get("address") else None
    return d["type"], rid, addr, d["data"]
