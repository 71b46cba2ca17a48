"""DistExchange contract: pod registry, resource index, certificates, monitoring.

State changes happen only through :meth:`DEApp.execute`, which the ledger
calls while applying a signed transaction.  Reads go through
:meth:`DEApp.query` against committed state.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Callable

from .codec import canonical_json, frame, from_hex, to_hex
from .identity import KeyPair, Signature, content_hash, sign, verify
from .policy import PolicyError, UsagePolicy, parse_policy, serialize_policy

# Evidence may report the previous policy version for this many blocks
# after an update lands.
GRACE_BLOCKS = 1

METHODS = (
    "register_pod",
    "register_resource",
    "pay_fee",
    "record_copy_holder",
    "update_policy",
    "start_monitoring",
    "submit_evidence",
    "report_timeout",
)
QUERIES = ("get_resource_info", "get_monitor", "get_certificate", "get_pod")


class ContractError(Exception):
    """Raised inside a transaction; the ledger turns it into a rejection."""

    @property
    def name(self) -> str:
        return type(self).__name__


class BadPayload(ContractError): pass
class DuplicatePod(ContractError): pass
class InvalidPolicy(ContractError): pass
class UnknownPod(ContractError): pass
class NotPodOwner(ContractError): pass
class DuplicateResource(ContractError): pass
class UnknownResource(ContractError): pass
class SelfPurchase(ContractError): pass
class NoCertificate(ContractError): pass
class NotOwner(ContractError): pass
class BadVersion(ContractError): pass
class UnknownMonitor(ContractError): pass
class NotPending(ContractError): pass
class StaleNonce(ContractError): pass
class BadEvidenceSignature(ContractError): pass
class NotOracle(ContractError): pass


class QueryError(Exception):
    pass


class NotFound(QueryError):
    pass


# --- records ----------------------------------------------------------------


@dataclass(frozen=True)
class Event:
    type: str
    resource_id: bytes | None = None
    address: bytes | None = None
    data: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "type": self.type,
            "resource_id": to_hex(self.resource_id) if self.resource_id else None,
            "address": to_hex(self.address) if self.address else None,
            "data": self.data,
        }

    def describe(self) -> str:
        parts = [self.type]
        if self.resource_id:
            parts.append(f"resource={to_hex(self.resource_id)[:14]}")
        if self.address:
            parts.append(f"to={to_hex(self.address)}")
        return " ".join(parts)


@dataclass(frozen=True)
class AccessCertificate:
    consumer: bytes
    resource_id: bytes
    issued_at: int
    cert_sig: Signature

    @staticmethod
    def message(consumer: bytes, resource_id: bytes, issued_at: int) -> bytes:
        return frame("access-certificate", consumer, resource_id, issued_at)

    def verify(self, market_public: bytes) -> bool:
        return verify(self.cert_sig, market_public, self.message(self.consumer, self.resource_id, self.issued_at))

    def to_json(self) -> dict:
        return {
            "consumer": to_hex(self.consumer),
            "resource_id": to_hex(self.resource_id),
            "issued_at": self.issued_at,
            "signer": to_hex(self.cert_sig.signer),
            "sig": to_hex(self.cert_sig.bytes),
        }

    @classmethod
    def from_json(cls, d: dict) -> "AccessCertificate":
        return cls(
            consumer=from_hex(d["consumer"]),
            resource_id=from_hex(d["resource_id"]),
            issued_at=int(d["issued_at"]),
            cert_sig=Signature(from_hex(d["signer"]), from_hex(d["sig"])),
        )


@dataclass(frozen=True)
class Evidence:
    """Signed compliance report from a TEE for one resource copy."""

    tee: bytes
    resource_id: bytes
    nonce: bytes
    reported_policy_version: int
    violation_count: int
    log_digest: bytes
    signature: Signature | None = None

    def message(self) -> bytes:
        return frame(
            "evidence",
            self.tee,
            self.resource_id,
            self.nonce,
            self.reported_policy_version,
            self.violation_count,
            self.log_digest,
        )

    def signed(self, key: KeyPair) -> "Evidence":
        return Evidence(
            self.tee, self.resource_id, self.nonce, self.reported_policy_version,
            self.violation_count, self.log_digest, sign(key, self.message()),
        )

    def to_json(self) -> dict:
        # Insertion order is the canonical field order.
        return {
            "tee": to_hex(self.tee),
            "resource_id": to_hex(self.resource_id),
            "nonce": to_hex(self.nonce),
            "reported_policy_version": self.reported_policy_version,
            "violation_count": self.violation_count,
            "log_digest": to_hex(self.log_digest),
            "signer": to_hex(self.signature.signer) if self.signature else None,
            "sig": to_hex(self.signature.bytes) if self.signature else None,
        }

    def serialize(self) -> bytes:
        return json.dumps(self.to_json(), separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_json(cls, d: dict) -> "Evidence":
        sig = None
        if d.get("sig") is not None:
            sig = Signature(from_hex(d["signer"]), from_hex(d["sig"]))
        return cls(
            tee=from_hex(d["tee"]),
            resource_id=from_hex(d["resource_id"]),
            nonce=from_hex(d["nonce"]),
            reported_policy_version=int(d["reported_policy_version"]),
            violation_count=int(d["violation_count"]),
            log_digest=from_hex(d["log_digest"]),
            signature=sig,
        )


@dataclass
class PodRecord:
    pod_ref: str
    owner: bytes
    default_policy: UsagePolicy


@dataclass
class ResourceRecord:
    resource_id: bytes
    pod_ref: str
    owner: bytes
    policy: UsagePolicy
    copy_holders: set[bytes] = field(default_factory=set)
    policy_height: int = 0  # block height of the last policy change


@dataclass
class MonitoringRecord:
    monitor_id: int
    resource_id: bytes
    requester: bytes
    pending: set[bytes]
    nonces: dict[bytes, bytes]
    evidence: dict[bytes, Evidence] = field(default_factory=dict)
    status: str = "Open"  # Open | Complete | Violation
    violator: bytes | None = None

    def bundle(self) -> list[dict]:
        return [self.evidence[a].to_json() for a in sorted(self.evidence)]


@dataclass(frozen=True)
class ResourceInfo:
    pod_ref: str
    policy: UsagePolicy
    version: int


@dataclass
class DEAppState:
    market_public: bytes
    oracle: bytes | None = None
    pods: dict[str, PodRecord] = field(default_factory=dict)
    resources: dict[bytes, ResourceRecord] = field(default_factory=dict)
    certificates: dict[tuple[bytes, bytes], AccessCertificate] = field(default_factory=dict)
    monitors: dict[int, MonitoringRecord] = field(default_factory=dict)
    next_monitor_id: int = 1


@dataclass(frozen=True)
class ExecContext:
    sender: bytes
    height: int
    public_key: Callable[[bytes], bytes | None]


# --- payload helpers --------------------------------------------------------


def encode_args(**kwargs: Any) -> bytes:
    return canonical_json(kwargs)


def encode_query(name: str, **kwargs: Any) -> bytes:
    return canonical_json({"query": name, **kwargs})


def _policy_text(policy: UsagePolicy | None) -> str | None:
    return None if policy is None else serialize_policy(policy).decode("utf-8")


def _parse_policy_arg(text: Any) -> UsagePolicy:
    if not isinstance(text, str):
        raise InvalidPolicy("policy must be canonical text")
    try:
        return parse_policy(text.encode("utf-8"))
    except PolicyError as exc:
        raise InvalidPolicy(str(exc)) from None


def _hex_arg(args: dict, key: str) -> bytes:
    try:
        return from_hex(args[key])
    except (KeyError, ValueError, TypeError):
        raise BadPayload(f"missing or malformed {key!r}") from None


def _int_arg(args: dict, key: str) -> int:
    value = args.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise BadPayload(f"missing or malformed {key!r}")
    return value


# --- contract ---------------------------------------------------------------


class DEApp:
    """Contract code plus the market signing key it holds."""

    def __init__(self, market_key: KeyPair, oracle: bytes | None = None):
        self.market_key = market_key
        self.oracle = oracle

    def genesis_state(self) -> DEAppState:
        return DEAppState(market_public=self.market_key.public, oracle=self.oracle)

    def execute(self, state: DEAppState, ctx: ExecContext, method: str, payload: bytes):
        """Apply one call to a copy of ``state``.

        Returns ``(new_state, events, result)``; raises ContractError with
        the input state untouched.
        """
        if method not in METHODS:
            raise KeyError(method)
        try:
            args = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise BadPayload("payload is not JSON") from None
        if not isinstance(args, dict):
            raise BadPayload("payload must be an object")
        new = copy.deepcopy(state)
        events: list[Event] = []
        result = getattr(self, f"_{method}")(new, ctx, args, events)
        return new, events, result

    # each handler validates fully before mutating

    def _register_pod(self, st, ctx, args, events):
        pod_ref = args.get("pod_ref")
        if not isinstance(pod_ref, str) or not pod_ref:
            raise BadPayload("pod_ref")
        policy = _parse_policy_arg(args.get("policy"))
        if pod_ref in st.pods:
            raise DuplicatePod(pod_ref)
        st.pods[pod_ref] = PodRecord(pod_ref, ctx.sender, policy)
        events.append(Event("PodRegistered", None, ctx.sender, {"pod_ref": pod_ref}))
        return pod_ref

    def _register_resource(self, st, ctx, args, events):
        pod_ref = args.get("pod_ref")
        rid = _hex_arg(args, "resource_id")
        pod = st.pods.get(pod_ref)
        if pod is None:
            raise UnknownPod(str(pod_ref))
        if pod.owner != ctx.sender:
            raise NotPodOwner(pod_ref)
        if args.get("policy") is None:
            policy = pod.default_policy
        else:
            policy = _parse_policy_arg(args["policy"])
        if rid in st.resources:
            raise DuplicateResource(to_hex(rid))
        st.resources[rid] = ResourceRecord(rid, pod_ref, ctx.sender, policy, set(), ctx.height)
        events.append(
            Event("ResourceRegistered", rid, ctx.sender, {"pod_ref": pod_ref, "version": policy.version})
        )
        return rid

    def _pay_fee(self, st, ctx, args, events):
        rid = _hex_arg(args, "resource_id")
        res = st.resources.get(rid)
        if res is None:
            raise UnknownResource(to_hex(rid))
        if res.owner == ctx.sender:
            raise SelfPurchase(to_hex(rid))
        existing = st.certificates.get((ctx.sender, rid))
        if existing is not None:
            return existing
        msg = AccessCertificate.message(ctx.sender, rid, ctx.height)
        cert = AccessCertificate(ctx.sender, rid, ctx.height, sign(self.market_key, msg))
        st.certificates[(ctx.sender, rid)] = cert
        events.append(Event("CertificateIssued", rid, ctx.sender, {"issued_at": ctx.height}))
        return cert

    def _record_copy_holder(self, st, ctx, args, events):
        rid = _hex_arg(args, "resource_id")
        consumer = _hex_arg(args, "consumer")
        res = st.resources.get(rid)
        if res is None:
            raise UnknownResource(to_hex(rid))
        if st.pods[res.pod_ref].owner != ctx.sender:
            raise NotPodOwner(res.pod_ref)
        if (consumer, rid) not in st.certificates:
            raise NoCertificate(to_hex(consumer))
        if consumer in res.copy_holders:
            return False
        res.copy_holders.add(consumer)
        events.append(Event("CopyRecorded", rid, consumer, {}))
        return True

    def _update_policy(self, st, ctx, args, events):
        rid = _hex_arg(args, "resource_id")
        res = st.resources.get(rid)
        if res is None:
            raise UnknownResource(to_hex(rid))
        if res.owner != ctx.sender:
            raise NotOwner(to_hex(ctx.sender))
        new = _parse_policy_arg(args.get("policy"))
        if new.policy_id != res.policy.policy_id:
            raise InvalidPolicy(f"policy id {new.policy_id!r} does not match {res.policy.policy_id!r}")
        if new.version != res.policy.version + 1:
            raise BadVersion(f"expected version {res.policy.version + 1}, got {new.version}")
        res.policy = new
        res.policy_height = ctx.height
        text = _policy_text(new)
        events.append(Event("PolicyUpdated", rid, ctx.sender, {"version": new.version}))
        for holder in sorted(res.copy_holders):
            events.append(Event("PolicyUpdate", rid, holder, {"policy": text}))
        return new.version

    def _start_monitoring(self, st, ctx, args, events):
        rid = _hex_arg(args, "resource_id")
        seed = _hex_arg(args, "nonce_seed")
        res = st.resources.get(rid)
        if res is None:
            raise UnknownResource(to_hex(rid))
        if res.owner != ctx.sender:
            raise NotOwner(to_hex(ctx.sender))
        mid = st.next_monitor_id
        st.next_monitor_id += 1
        holders = sorted(res.copy_holders)
        nonces = {h: content_hash(frame("monitor-nonce", seed, mid, h))[:16] for h in holders}
        mon = MonitoringRecord(mid, rid, ctx.sender, set(holders), nonces)
        st.monitors[mid] = mon
        for h in holders:
            events.append(
                Event("EvidenceRequested", rid, h, {"monitor_id": mid, "nonce": to_hex(nonces[h])})
            )
        if not holders:
            mon.status = "Complete"
            events.append(Event("MonitorComplete", rid, ctx.sender, {"monitor_id": mid, "bundle": []}))
        return mid

    def _submit_evidence(self, st, ctx, args, events):
        mid = _int_arg(args, "monitor_id")
        mon = st.monitors.get(mid)
        if mon is None:
            raise UnknownMonitor(str(mid))
        if ctx.sender not in mon.pending:
            raise NotPending(to_hex(ctx.sender))
        try:
            ev = Evidence.from_json(args["evidence"])
        except (KeyError, ValueError, TypeError):
            raise BadPayload("evidence") from None
        if ev.resource_id != mon.resource_id or ev.nonce != mon.nonces[ctx.sender]:
            raise StaleNonce(to_hex(ev.nonce))
        public = ctx.public_key(ctx.sender)
        if ev.tee != ctx.sender or ev.signature is None or public is None:
            raise BadEvidenceSignature(to_hex(ctx.sender))
        if not verify(ev.signature, public, ev.message()):
            raise BadEvidenceSignature(to_hex(ctx.sender))

        res = st.resources[mon.resource_id]
        mon.pending.discard(ctx.sender)
        mon.evidence[ctx.sender] = ev
        if not self._compliant(ev, res, ctx.height):
            if mon.status == "Open":
                mon.status, mon.violator = "Violation", ctx.sender
            events.append(
                Event("ViolationDetected", mon.resource_id, mon.requester,
                      {"monitor_id": mid, "violator": to_hex(ctx.sender), "reason": "NonCompliantEvidence",
                       "bundle": mon.bundle()})
            )
        elif not mon.pending and mon.status == "Open":
            mon.status = "Complete"
            events.append(
                Event("MonitorComplete", mon.resource_id, mon.requester, {"monitor_id": mid, "bundle": mon.bundle()})
            )
        else:
            events.append(Event("EvidenceRecorded", mon.resource_id, ctx.sender, {"monitor_id": mid}))
        return mon.status

    @staticmethod
    def _compliant(ev: Evidence, res: ResourceRecord, height: int) -> bool:
        if ev.violation_count != 0:
            return False
        current = res.policy.version
        if ev.reported_policy_version == current:
            return True
        if ev.reported_policy_version < current:
            return height - res.policy_height <= GRACE_BLOCKS
        return False

    def _report_timeout(self, st, ctx, args, events):
        mid = _int_arg(args, "monitor_id")
        holder = _hex_arg(args, "holder")
        if st.oracle is None or ctx.sender != st.oracle:
            raise NotOracle(to_hex(ctx.sender))
        mon = st.monitors.get(mid)
        if mon is None:
            raise UnknownMonitor(str(mid))
        if holder not in mon.pending:
            raise NotPending(to_hex(holder))
        mon.pending.discard(holder)
        if mon.status == "Open":
            mon.status, mon.violator = "Violation", holder
        events.append(
            Event("ViolationDetected", mon.resource_id, mon.requester,
                  {"monitor_id": mid, "violator": to_hex(holder), "reason": "Timeout", "bundle": mon.bundle()})
        )
        return mon.status

    # --- reads ---------------------------------------------------------------

    def query(self, state: DEAppState, query: bytes) -> Any:
        try:
            q = json.loads(query.decode("utf-8"))
            name = q.pop("query")
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, AttributeError, TypeError):
            raise QueryError("malformed query") from None
        if name not in QUERIES:
            raise QueryError(f"unknown query {name!r}")
        try:
            return getattr(self, f"_q_{name}")(state, q)
        except (KeyError, ValueError, TypeError) as exc:
            raise QueryError(f"bad arguments for {name}: {exc}") from None

    def _q_get_resource_info(self, st, q):
        res = st.resources.get(from_hex(q["resource_id"]))
        if res is None:
            raise NotFound(q["resource_id"])
        return ResourceInfo(res.pod_ref, res.policy, res.policy.version)

    def _q_get_monitor(self, st, q):
        mon = st.monitors.get(int(q["monitor_id"]))
        if mon is None:
            raise NotFound(str(q["monitor_id"]))
        return copy.deepcopy(mon)

    def _q_get_certificate(self, st, q):
        cert = st.certificates.get((from_hex(q["consumer"]), from_hex(q["resource_id"])))
        if cert is None:
            raise NotFound(q["resource_id"])
        return cert

    def _q_get_pod(self, st, q):
        pod = st.pods.get(q["pod_ref"])
        if pod is None:
            raise NotFound(q["pod_ref"])
        return copy.deepcopy(pod)


def state_bytes(st: DEAppState) -> bytes:
    """Canonical serialization of contract state; hashed into state_root."""
    doc = {
        "market_public": to_hex(st.market_public),
        "oracle": to_hex(st.oracle) if st.oracle else None,
        "next_monitor_id": st.next_monitor_id,
        "pods": {
            ref: {"owner": to_hex(p.owner), "default_policy": _policy_text(p.default_policy)}
            for ref, p in st.pods.items()
        },
        "resources": {
            to_hex(rid): {
                "pod_ref": r.pod_ref,
                "owner": to_hex(r.owner),
                "policy": _policy_text(r.policy),
                "policy_height": r.policy_height,
                "copy_holders": sorted(to_hex(h) for h in r.copy_holders),
            }
            for rid, r in st.resources.items()
        },
        "certificates": {
            f"{to_hex(c)}/{to_hex(rid)}": cert.to_json() for (c, rid), cert in st.certificates.items()
        },
        "monitors": {
            str(mid): {
                "resource_id": to_hex(m.resource_id),
                "requester": to_hex(m.requester),
                "pending": sorted(to_hex(a) for a in m.pending),
                "nonces": {to_hex(a): to_hex(n) for a, n in m.nonces.items()},
                "evidence": {to_hex(a): e.to_json() for a, e in m.evidence.items()},
                "status": m.status,
                "violator": to_hex(m.violator) if m.violator else None,
            }
            for mid, m in st.monitors.items()
        },
    }
    return canonical_json(doc)
