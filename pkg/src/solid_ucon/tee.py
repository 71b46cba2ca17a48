"""Consumer-side trusted execution environment, simulated in software.

The TEE keeps acquired copies in its trusted storage, gates every local
use on the copy's current policy, deletes copies when their retention
runs out, reacts to pushed policy updates, and answers evidence requests
with signed reports.  Isolation is assumed, not enforced.

Time is always passed in (``now``); there are no wall-clock reads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

from .codec import frame, from_hex, to_hex
from .de_app import AccessCertificate, Evidence, ResourceInfo, encode_args, encode_query
from .identity import KeyPair, content_hash
from .oracle import OracleBus, OracleMessage, Subscription, parse_event
from .pod import AccessDenied, AccessRequest, PodManager
from .policy import PurposeTaxonomy, UnknownPurpose, UsagePolicy, check_purpose, expiry_at, parse_policy

__all__ = [
    "TEE",
    "Evidence",
    "TrustedStorageEntry",
    "UsageLogEntry",
    "NoEntry",
    "NoCertificate",
    "UnknownResourceAtTEE",
    "ClockRegression",
]

log = logging.getLogger(__name__)

HONEST = "honest"
IGNORE_UPDATES = "ignore-updates"
BYPASS = "bypass"
SILENT = "silent"
MODES = (HONEST, IGNORE_UPDATES, BYPASS, SILENT)


class TEEError(Exception):
    pass


class NoEntry(TEEError):
    pass


class NoCertificate(TEEError):
    pass


class UnknownResourceAtTEE(TEEError):
    pass


class ClockRegression(TEEError):
    pass


@dataclass
class TrustedStorageEntry:
    resource_id: bytes
    content: bytes
    policy: UsagePolicy
    acquired_at: int
    purposes: frozenset[str]
    deleted: bool = False
    deletion_reason: str | None = None  # Expired | PolicyTightened | Revoked

    @property
    def deadline(self) -> int | None:
        return expiry_at(self.policy, self.acquired_at)


@dataclass(frozen=True)
class UsageLogEntry:
    at: int
    resource_id: bytes
    action: str
    detail: str = ""

    def line(self) -> str:
        return f"{self.at} {to_hex(self.resource_id)} {self.action}({self.detail})"

    def encode(self) -> bytes:
        return frame(self.at, self.resource_id, self.action, self.detail)


def digest_slice(previous: bytes, entries: list[UsageLogEntry]) -> bytes:
    """Chained digest of a log slice; each evidence extends the previous one."""
    return content_hash(frame("usage-log", previous, len(entries), *(e.encode() for e in entries)))


class TEE:
    def __init__(
        self,
        name: str,
        key: KeyPair,
        bus: OracleBus,
        taxonomy: PurposeTaxonomy,
        resolver: Callable[[str], PodManager] | None = None,
    ):
        self.name = name
        self.key = key
        self.bus = bus
        self.taxonomy = taxonomy
        self.resolver = resolver
        self.component_id = f"tee:{name}"
        self.mode = HONEST
        self.clock = 0
        self.entries: dict[bytes, TrustedStorageEntry] = {}
        self.log: list[UsageLogEntry] = []
        self.certificates: dict[bytes, AccessCertificate] = {}
        self.index: dict[bytes, ResourceInfo] = {}
        self._violations: dict[bytes, int] = {}
        self._evidence_mark: dict[bytes, int] = {}
        self._digest: dict[bytes, bytes] = {}
        bus.attach(self.component_id, self, key, responder=True)

    @property
    def address(self) -> bytes:
        return self.key.address

    def set_mode(self, mode: str) -> None:
        if mode not in MODES:
            raise ValueError(f"unknown TEE mode {mode!r}; expected one of {MODES}")
        self.mode = mode

    def _observe(self, now: int) -> None:
        if now < self.clock:
            raise ClockRegression(f"{now} < {self.clock}")
        self.clock = now

    def _log(self, rid: bytes, action: str, detail: str = "") -> None:
        self.log.append(UsageLogEntry(self.clock, rid, action, detail))

    def _delete(self, entry: TrustedStorageEntry, reason: str) -> None:
        entry.content = b""
        entry.deleted = True
        entry.deletion_reason = reason
        self._log(entry.resource_id, "Deleted", reason)

    # --- acquisition (indexing + access) ----------------------------------------

    def pay_fee(self, resource_id: bytes) -> AccessCertificate:
        receipt = self.bus.push_in(
            self.component_id, "pay_fee", encode_args(resource_id=to_hex(resource_id)), self.key
        )
        if not receipt.accepted:
            raise NoCertificate(str(receipt))
        self.certificates[resource_id] = receipt.result
        return receipt.result

    def lookup(self, resource_id: bytes) -> ResourceInfo:
        """Fetch locator and policy from the contract via pull-out."""
        info = self.bus.pull_out(self.component_id, encode_query("get_resource_info", resource_id=to_hex(resource_id)))
        self.index[resource_id] = info
        return info

    def acquire(self, resource_id: bytes, purposes: frozenset[str] | set[str], now: int) -> TrustedStorageEntry:
        """Fetch the resource from its pod into trusted storage."""
        self._observe(now)
        purposes = frozenset(purposes)
        for p in purposes:
            if p not in self.taxonomy:
                raise UnknownPurpose(p)
        existing = self.entries.get(resource_id)
        if existing is not None:
            if existing.deleted:
                raise AccessDenied("Deleted")
            return existing
        cert = self.certificates.get(resource_id)
        if cert is None:
            raise NoCertificate(to_hex(resource_id))
        info = self.index.get(resource_id) or self.lookup(resource_id)
        manager = self.resolver(info.pod_ref)
        declared = min(purposes) if purposes else ""
        try:
            response = manager.handle_access(AccessRequest(self.address, resource_id, cert, declared))
        except AccessDenied as exc:
            self._log(resource_id, "Denied", f"{declared},{exc.reason}")
            raise
        entry = TrustedStorageEntry(resource_id, response.content, response.policy, now, purposes)
        self.entries[resource_id] = entry
        self._violations.setdefault(resource_id, 0)
        self._log(resource_id, "Acquired", f"v{response.policy.version}")
        self.bus.subscribe(Subscription(self.component_id, "PolicyUpdate", resource_id, self.address))
        return entry

    def lookup_and_acquire(self, resource_id: bytes, purposes, now: int) -> TrustedStorageEntry:
        self.lookup(resource_id)
        return self.acquire(resource_id, purposes, now)

    # --- local enforcement ----------------------------------------------------

    def use_resource(self, resource_id: bytes, purpose: str, now: int, bypass: bool = False) -> bytes:
        """Return the content if the local policy allows ``purpose`` at ``now``.

        Raises AccessDenied otherwise.  A bypassing caller (or a TEE in
        bypass mode) gets the content anyway while it still exists, and
        the access is counted as a violation.
        """
        entry = self.entries.get(resource_id)
        if entry is None:
            raise NoEntry(to_hex(resource_id))
        self._observe(now)
        bypass = bypass or self.mode == BYPASS

        if entry.deleted:
            reason = "Deleted"
        elif entry.deadline is not None and entry.deadline <= now:
            reason = "Expired"
        else:
            try:
                reason = None if check_purpose(entry.policy, self.taxonomy, purpose) else "PurposeMismatch"
            except UnknownPurpose:
                reason = "UnknownPurpose"

        if reason is None:
            self._log(resource_id, "Accessed", purpose)
            return entry.content
        if bypass and not entry.deleted:
            self._violations[resource_id] = self._violations.get(resource_id, 0) + 1
            self._log(resource_id, "Accessed", f"{purpose},bypass:{reason}")
            return entry.content
        self._log(resource_id, "Denied", f"{purpose},{reason}")
        if reason == "Expired":
            self._delete(entry, "Expired")
        raise AccessDenied(reason)

    def on_policy_update(self, resource_id: bytes, new_policy: UsagePolicy, now: int) -> list[str]:
        """Adopt a newer policy and carry out what it implies locally."""
        entry = self.entries.get(resource_id)
        if entry is None or new_policy.version <= entry.policy.version:
            return []
        self._observe(now)
        if self.mode == IGNORE_UPDATES:
            return []
        old = entry.policy
        entry.policy = new_policy
        self._log(resource_id, "PolicyUpdated", f"{old.version}->{new_policy.version}")
        actions = []
        deadline = entry.deadline
        if not entry.deleted and deadline is not None and deadline <= now:
            self._delete(entry, "PolicyTightened")
            actions.append("Deleted(PolicyTightened)")
        for p in sorted(entry.purposes):
            if not check_purpose(new_policy, self.taxonomy, p):
                actions.append(f"GrantLost({p})")
        return actions

    def tick(self, now: int) -> list[bytes]:
        """Delete every live copy whose retention deadline is at or before ``now``."""
        self._observe(now)
        gone = []
        for rid in sorted(self.entries):
            entry = self.entries[rid]
            if not entry.deleted and entry.deadline is not None and entry.deadline <= now:
                self._delete(entry, "Expired")
                gone.append(rid)
        return gone

    def next_deadline(self) -> int | None:
        live = [e.deadline for e in self.entries.values() if not e.deleted and e.deadline is not None]
        return min(live, default=None)

    # --- evidence ---------------------------------------------------------------

    def produce_evidence(self, resource_id: bytes, nonce: bytes) -> Evidence:
        entry = self.entries.get(resource_id)
        if entry is None:
            raise UnknownResourceAtTEE(to_hex(resource_id))
        mark = self._evidence_mark.get(resource_id, 0)
        mine = [i for i, e in enumerate(self.log) if e.resource_id == resource_id and i >= mark]
        digest = digest_slice(self._digest.get(resource_id, bytes(32)), [self.log[i] for i in mine])
        evidence = Evidence(
            tee=self.address,
            resource_id=resource_id,
            nonce=nonce,
            reported_policy_version=entry.policy.version,
            violation_count=self._violations.get(resource_id, 0),
            log_digest=digest,
        ).signed(self.key)
        self._digest[resource_id] = digest
        self._violations[resource_id] = 0
        self._log(resource_id, "EvidenceProduced", to_hex(nonce))
        self._evidence_mark[resource_id] = len(self.log)
        return evidence

    def export_log(self) -> str:
        return "".join(e.line() + "\n" for e in self.log)

    # --- oracle callbacks -------------------------------------------------------

    def on_push_out(self, msg: OracleMessage) -> None:
        etype, rid, _addr, data = parse_event(msg)
        if etype != "PolicyUpdate":
            log.debug("%s ignoring %s", self.component_id, etype)
            return
        policy = parse_policy(data["policy"].encode("utf-8"))
        self.on_policy_update(rid, policy, max(self.bus.now, self.clock))

    def on_pull_in(self, msg: OracleMessage) -> Evidence | None:
        if self.mode == SILENT:
            return None
        _etype, rid, _addr, data = parse_event(msg)
        try:
            return self.produce_evidence(rid, from_hex(data["nonce"]))
        except UnknownResourceAtTEE:
            log.warning("%s asked for evidence on unknown %s", self.component_id, to_hex(rid))
            return None
