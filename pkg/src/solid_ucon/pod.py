"""Pods and the pod manager that serves them.

The Solid HTTP stack is replaced by direct method calls carrying
:class:`AccessRequest` / :class:`AccessResponse` values; both have a
fixed-order wire form for traces and tests.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

from .codec import frame, from_hex, to_hex
from .de_app import AccessCertificate, ResourceInfo, encode_args, encode_query
from .identity import KeyPair, Signature, content_hash, sign, verify
from .oracle import OracleBus, OracleMessage, Subscription, parse_event
from .policy import UsagePolicy, parse_policy, serialize_policy

log = logging.getLogger(__name__)

OWNER = "Owner"
CERTIFIED = "Certified"
PUBLIC = "Public"

_POD_REF_RE = re.compile(r"[a-z][a-z0-9+.-]*://[^\s]+")


class PodError(Exception):
    pass


class BadPodRef(PodError):
    pass


class AuthFailed(PodError):
    pass


class NotOwner(PodError):
    pass


class UnknownResource(PodError):
    pass


class BadVersion(PodError):
    pass


class ChainRejected(PodError):
    def __init__(self, receipt):
        super().__init__(str(receipt))
        self.receipt = receipt


class AccessDenied(Exception):
    """A refused access; ``reason`` is a short machine-readable tag."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def authorize(key: KeyPair, action: str, *fields: bytes | str | int) -> Signature:
    """Owner authorization for a pod-manager action."""
    return sign(key, frame("pod-auth", action, *fields))


@dataclass(frozen=True)
class AccessRequest:
    requester: bytes
    resource_id: bytes
    certificate: AccessCertificate | None
    declared_purpose: str

    def to_wire(self) -> bytes:
        doc = {
            "requester": to_hex(self.requester),
            "resource_id": to_hex(self.resource_id),
            "certificate": self.certificate.to_json() if self.certificate else None,
            "purpose": self.declared_purpose,
        }
        return json.dumps(doc, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_wire(cls, data: bytes) -> "AccessRequest":
        d = json.loads(data)
        cert = AccessCertificate.from_json(d["certificate"]) if d["certificate"] else None
        return cls(from_hex(d["requester"]), from_hex(d["resource_id"]), cert, d["purpose"])


@dataclass(frozen=True)
class AccessResponse:
    content: bytes
    policy: UsagePolicy
    version: int

    def to_wire(self) -> bytes:
        doc = {
            "content": self.content.hex(),
            "policy": serialize_policy(self.policy).decode("utf-8"),
            "version": self.version,
        }
        return json.dumps(doc, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_wire(cls, data: bytes) -> "AccessResponse":
        d = json.loads(data)
        return cls(bytes.fromhex(d["content"]), parse_policy(d["policy"].encode("utf-8")), d["version"])


@dataclass
class PodStore:
    pod_ref: str
    owner: bytes
    default_policy: UsagePolicy
    resources: dict[bytes, bytes] = field(default_factory=dict)
    acl: dict[bytes, set[str]] = field(default_factory=dict)
    local_policies: dict[bytes, UsagePolicy | None] = field(default_factory=dict)


@dataclass(frozen=True)
class MonitorOutcome:
    monitor_id: int
    resource_id: bytes
    status: str
    violator: bytes | None
    evidence: tuple[dict, ...]


class PodManager:
    """Pod manager for one owner; may host several pods."""

    def __init__(self, name: str, key: KeyPair, bus: OracleBus, market_public: bytes):
        self.name = name
        self.key = key
        self.bus = bus
        self.market_public = market_public
        self.component_id = f"pm:{name}"
        self.pods: dict[str, PodStore] = {}
        self.bundles: dict[int, MonitorOutcome] = {}
        self.served: list[tuple[bytes, bytes, AccessCertificate | None]] = []
        bus.attach(self.component_id, self, key)
        for event_type in ("MonitorComplete", "ViolationDetected"):
            bus.subscribe(Subscription(self.component_id, event_type, None, key.address))

    def _check_owner(self, auth: Signature, action: str, *fields, error=NotOwner) -> None:
        if not verify(auth, self.key.public, frame("pod-auth", action, *fields)):
            raise error(f"{action} not authorized by pod owner")

    def _pod(self, pod_ref: str) -> PodStore:
        try:
            return self.pods[pod_ref]
        except KeyError:
            raise BadPodRef(f"{pod_ref} is not hosted here") from None

    def _push(self, method: str, **args) -> object:
        receipt = self.bus.push_in(self.component_id, method, encode_args(**args), self.key)
        if not receipt.accepted:
            raise ChainRejected(receipt)
        return receipt

    # --- workflows ------------------------------------------------------------

    def init_pod(self, pod_ref: str, default_policy: UsagePolicy) -> PodStore:
        if not isinstance(pod_ref, str) or not _POD_REF_RE.fullmatch(pod_ref):
            raise BadPodRef(repr(pod_ref))
        if pod_ref in self.pods:
            raise BadPodRef(f"{pod_ref} already initialised")
        self._push("register_pod", pod_ref=pod_ref, policy=serialize_policy(default_policy).decode("utf-8"))
        store = PodStore(pod_ref, self.key.address, default_policy)
        self.pods[pod_ref] = store
        return store

    def put_resource(self, pod_ref: str, owner_auth: Signature, content: bytes) -> bytes:
        pod = self._pod(pod_ref)
        rid = content_hash(content)
        self._check_owner(owner_auth, "put_resource", rid, error=AuthFailed)
        if rid not in pod.resources:
            pod.resources[rid] = bytes(content)
            pod.acl[rid] = {OWNER}
            pod.local_policies[rid] = None
        return rid

    def publish_resource(
        self, pod_ref: str, owner_auth: Signature, resource_id: bytes, policy: UsagePolicy | None = None
    ) -> None:
        pod = self._pod(pod_ref)
        self._check_owner(owner_auth, "publish_resource", resource_id)
        if resource_id not in pod.resources:
            raise UnknownResource(to_hex(resource_id))
        text = None if policy is None else serialize_policy(policy).decode("utf-8")
        self._push("register_resource", pod_ref=pod_ref, resource_id=to_hex(resource_id), policy=text)
        pod.local_policies[resource_id] = policy or pod.default_policy
        pod.acl[resource_id].add(CERTIFIED)

    def handle_access(self, req: AccessRequest) -> AccessResponse:
        """Serve a resource to a certified requester and report the copy on chain."""
        pod = next((p for p in self.pods.values() if req.resource_id in p.resources), None)
        if pod is None:
            raise AccessDenied("UnknownResource")
        rid = req.resource_id
        acl = pod.acl[rid]
        if req.requester == pod.owner and OWNER in acl:
            klass = OWNER
        elif PUBLIC in acl:
            klass = PUBLIC
        else:
            if CERTIFIED not in acl:
                raise AccessDenied("AclDenied")
            cert = req.certificate
            if cert is None:
                raise AccessDenied("NoCertificate")
            if cert.consumer != req.requester or cert.resource_id != rid or not cert.verify(self.market_public):
                raise AccessDenied("BadCertificate")
            klass = CERTIFIED
        policy = pod.local_policies[rid] or pod.default_policy
        response = AccessResponse(pod.resources[rid], policy, policy.version)
        self.served.append((req.requester, rid, req.certificate))
        if klass == CERTIFIED:
            receipt = self.bus.push_in(
                self.component_id,
                "record_copy_holder",
                encode_args(resource_id=to_hex(rid), consumer=to_hex(req.requester)),
                self.key,
            )
            if not receipt.accepted:
                log.warning("copy of %s served but not recorded: %s", to_hex(rid), receipt)
        return response

    def update_policy(self, pod_ref: str, owner_auth: Signature, resource_id: bytes, new_policy: UsagePolicy) -> None:
        """Update locally first, then on chain; roll back if the chain refuses."""
        pod = self._pod(pod_ref)
        self._check_owner(owner_auth, "update_policy", resource_id, serialize_policy(new_policy))
        current = pod.local_policies.get(resource_id)
        if current is None:
            raise UnknownResource(to_hex(resource_id))
        if new_policy.version != current.version + 1:
            raise BadVersion(f"expected version {current.version + 1}, got {new_policy.version}")
        pod.local_policies[resource_id] = new_policy
        try:
            self._push("update_policy", resource_id=to_hex(resource_id), policy=serialize_policy(new_policy).decode("utf-8"))
        except ChainRejected:
            pod.local_policies[resource_id] = current
            self._resync(pod, resource_id)
            raise

    def _resync(self, pod: PodStore, resource_id: bytes) -> None:
        # a competing update may have landed; adopt the chain's view
        info: ResourceInfo = self.bus.pull_out(self.component_id, encode_query("get_resource_info", resource_id=to_hex(resource_id)))
        if info.version != pod.local_policies[resource_id].version:
            pod.local_policies[resource_id] = info.policy

    def request_monitoring(self, pod_ref: str, owner_auth: Signature, resource_id: bytes, nonce_seed: bytes) -> int:
        pod = self._pod(pod_ref)
        self._check_owner(owner_auth, "request_monitoring", resource_id)
        if pod.local_policies.get(resource_id) is None:
            raise UnknownResource(to_hex(resource_id))
        receipt = self._push("start_monitoring", resource_id=to_hex(resource_id), nonce_seed=to_hex(nonce_seed))
        return receipt.result

    # --- oracle callbacks -----------------------------------------------------

    def on_push_out(self, msg: OracleMessage) -> None:
        etype, rid, _addr, data = parse_event(msg)
        mid = int(data["monitor_id"])
        violator = from_hex(data["violator"]) if data.get("violator") else None
        status = "Complete" if etype == "MonitorComplete" else "Violation"
        earlier = self.bundles.get(mid)
        if earlier is not None and earlier.violator is not None:
            violator = earlier.violator
        self.bundles[mid] = MonitorOutcome(mid, rid, status, violator, tuple(data.get("bundle", ())))

    def on_pull_in(self, msg: OracleMessage) -> None:
        log.warning("%s received unexpected pull-in %s", self.component_id, msg.event_type)
        return None
