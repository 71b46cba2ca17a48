"""Usage policies: obligations, purpose taxonomy, canonical encoding.

Everything here is a pure function over immutable values.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Union

SECONDS_PER_DAY = 86_400
ONE_WEEK = 7 * SECONDS_PER_DAY
# Months are fixed at 30 days; no calendar arithmetic anywhere.
ONE_MONTH = 30 * SECONDS_PER_DAY

_PURPOSE_RE = re.compile(r"[a-z0-9-]+")


class PolicyError(Exception):
    pass


class ValidationError(PolicyError):
    pass


class ParseError(PolicyError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class UnknownPurpose(PolicyError):
    pass


class VersionError(PolicyError):
    pass


class TaxonomyError(PolicyError):
    pass


def validate_purpose(token: str) -> str:
    if not isinstance(token, str) or not _PURPOSE_RE.fullmatch(token):
        raise ValidationError(f"invalid purpose token {token!r}")
    return token


# --- taxonomy ---------------------------------------------------------------


@dataclass(frozen=True)
class PurposeTaxonomy:
    """Rooted forest of purposes plus out-of-tree alias edges.

    ``parents`` maps child -> parent.  ``aliases`` maps a node to extra
    purposes it also satisfies.  The union of both edge sets must be
    acyclic, which keeps subsumption a partial order.
    """

    nodes: frozenset[str]
    parents: dict[str, str] = field(default_factory=dict)
    aliases: dict[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for n in self.nodes:
            validate_purpose(n)
        for child, parent in self.parents.items():
            if child not in self.nodes or parent not in self.nodes:
                raise TaxonomyError(f"edge {parent}->{child} references unknown node")
        for child, targets in self.aliases.items():
            if child not in self.nodes or not targets <= self.nodes:
                raise TaxonomyError(f"alias on {child} references unknown node")
        self._check_acyclic()

    @classmethod
    def from_edges(
        cls,
        edges: Iterable[tuple[str, str]],
        aliases: Iterable[tuple[str, str]] = (),
        nodes: Iterable[str] = (),
    ) -> "PurposeTaxonomy":
        all_nodes = set(nodes)
        parents: dict[str, str] = {}
        for parent, child in edges:
            all_nodes.update((parent, child))
            if child in parents and parents[child] != parent:
                raise TaxonomyError(f"{child} has two parents: {parents[child]}, {parent}")
            parents[child] = parent
        alias_map: dict[str, set[str]] = {}
        for child, target in aliases:
            all_nodes.update((child, target))
            alias_map.setdefault(child, set()).add(target)
        return cls(
            nodes=frozenset(all_nodes),
            parents=parents,
            aliases={k: frozenset(v) for k, v in alias_map.items()},
        )

    def _successors(self, node: str) -> list[str]:
        out = sorted(self.aliases.get(node, ()))
        if node in self.parents:
            out.insert(0, self.parents[node])
        return out

    def _check_acyclic(self) -> None:
        white, grey, black = 0, 1, 2
        color = dict.fromkeys(self.nodes, white)
        for start in sorted(self.nodes):
            if color[start] != white:
                continue
            stack = [(start, iter(self._successors(start)))]
            color[start] = grey
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    color[node] = black
                    stack.pop()
                elif color[nxt] == grey:
                    raise TaxonomyError(f"cycle through {nxt}")
                elif color[nxt] == white:
                    color[nxt] = grey
                    stack.append((nxt, iter(self._successors(nxt))))

    @cached_property
    def _satisfied(self) -> dict[str, frozenset[str]]:
        memo: dict[str, frozenset[str]] = {}

        def walk(node: str) -> frozenset[str]:
            if node not in memo:
                acc = {node}
                for s in self._successors(node):
                    acc |= walk(s)
                memo[node] = frozenset(acc)
            return memo[node]

        for n in self.nodes:
            walk(n)
        return memo

    def satisfied_by(self, purpose: str) -> frozenset[str]:
        """All purposes that ``purpose`` counts as (itself included)."""
        if purpose not in self.nodes:
            raise UnknownPurpose(purpose)
        return self._satisfied[purpose]

    def subsumes(self, general: str, specific: str) -> bool:
        """True iff ``specific`` equals or descends from ``general``."""
        return general in self.satisfied_by(specific)

    def __contains__(self, purpose: object) -> bool:
        return purpose in self.nodes


def parse_taxonomy(text: str) -> PurposeTaxonomy:
    """Read ``parent child`` / ``alias child satisfies`` / ``node`` lines."""
    edges, aliases, nodes = [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) == 1:
            nodes.append(parts[0])
        elif len(parts) == 2:
            edges.append((parts[0], parts[1]))
        elif len(parts) == 3 and parts[0] == "alias":
            aliases.append((parts[1], parts[2]))
        else:
            raise TaxonomyError(f"line {lineno}: cannot parse {raw!r}")
    try:
        return PurposeTaxonomy.from_edges(edges, aliases, nodes)
    except ValidationError as exc:
        raise TaxonomyError(str(exc)) from exc


def load_taxonomy(path: str | Path | None = None) -> PurposeTaxonomy:
    """Load a taxonomy file; ``None`` or ``"default"`` gives the shipped one."""
    if path is None or str(path) == "default":
        text = resources.files("solid_ucon").joinpath("data/taxonomy.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return parse_taxonomy(text)


def default_taxonomy() -> PurposeTaxonomy:
    return load_taxonomy(None)


# --- obligations and policies -----------------------------------------------


@dataclass(frozen=True)
class TemporalRetention:
    max_storage_duration: int

    def __post_init__(self) -> None:
        d = self.max_storage_duration
        if isinstance(d, bool) or not isinstance(d, int) or d <= 0:
            raise ValidationError(f"retention duration must be a positive int, got {d!r}")

    def payload(self) -> dict:
        return {"max_storage_duration": self.max_storage_duration}


@dataclass(frozen=True)
class PurposeRestriction:
    allowed: frozenset[str]

    def __post_init__(self) -> None:
        if isinstance(self.allowed, str):
            raise ValidationError("allowed must be a collection of purposes, not a string")
        object.__setattr__(self, "allowed", frozenset(self.allowed))
        if not self.allowed:
            raise ValidationError("purpose restriction needs at least one allowed purpose")
        for p in self.allowed:
            validate_purpose(p)

    def payload(self) -> dict:
        return {"allowed": sorted(self.allowed)}


Obligation = Union[TemporalRetention, PurposeRestriction]
_VARIANTS = {"TemporalRetention": TemporalRetention, "PurposeRestriction": PurposeRestriction}


def _obligation_key(ob: Obligation) -> tuple[str, str]:
    return type(ob).__name__, json.dumps(ob.payload(), separators=(",", ":"))


@dataclass(frozen=True)
class UsagePolicy:
    policy_id: str
    version: int
    obligations: tuple[Obligation, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.policy_id, str) or not self.policy_id:
            raise ValidationError("policy_id must be a non-empty string")
        if isinstance(self.version, bool) or not isinstance(self.version, int) or self.version < 1:
            raise ValidationError(f"version must be a positive int, got {self.version!r}")
        for ob in self.obligations:
            if not isinstance(ob, (TemporalRetention, PurposeRestriction)):
                raise ValidationError(f"not an obligation: {ob!r}")
        obs = tuple(sorted(self.obligations, key=_obligation_key))
        seen: set[str] = set()
        for ob in obs:
            name = type(ob).__name__
            if name in seen:
                raise ValidationError(f"more than one {name} obligation")
            seen.add(name)
        object.__setattr__(self, "obligations", obs)

    def find(self, variant: type) -> Obligation | None:
        for ob in self.obligations:
            if isinstance(ob, variant):
                return ob
        return None

    @property
    def retention(self) -> TemporalRetention | None:
        return self.find(TemporalRetention)

    @property
    def purposes(self) -> PurposeRestriction | None:
        return self.find(PurposeRestriction)

    def bumped(self, *obligations: Obligation) -> "UsagePolicy":
        """Successor version with a replaced obligation list."""
        return UsagePolicy(self.policy_id, self.version + 1, tuple(obligations))


def check_purpose(policy: UsagePolicy, taxonomy: PurposeTaxonomy, declared: str) -> bool:
    """Allow (True) iff ``declared`` is subsumed by some allowed purpose."""
    satisfied = taxonomy.satisfied_by(declared)
    restriction = policy.purposes
    if restriction is None:
        return True
    return not satisfied.isdisjoint(restriction.allowed)


def expiry_at(policy: UsagePolicy, acquired_at: int) -> int | None:
    if acquired_at < 0:
        raise ValueError("acquired_at must be non-negative")
    retention = policy.retention
    if retention is None:
        return None
    return acquired_at + retention.max_storage_duration


# --- canonical encoding -----------------------------------------------------


def serialize_policy(policy: UsagePolicy) -> bytes:
    record = {
        "policy_id": policy.policy_id,
        "version": policy.version,
        "obligations": [{"type": type(ob).__name__, **ob.payload()} for ob in policy.obligations],
    }
    return json.dumps(record, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _no_duplicates(pairs: list) -> dict:
    keys = [k for k, _ in pairs]
    if len(set(keys)) != len(keys):
        raise ValueError(f"duplicate key in {keys}")
    return dict(pairs)


def parse_policy(data: bytes) -> UsagePolicy:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("invalid UTF-8", exc.start) from None
    try:
        record = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.pos) from None
    except ValueError as exc:
        raise ParseError(str(exc), 0) from None

    def where(key: str) -> int:
        pos = text.find(f'"{key}"')
        return pos if pos >= 0 else len(text)

    if not isinstance(record, dict):
        raise ParseError("policy record must be an object", 0)
    expected = ("policy_id", "version", "obligations")
    for key in expected:
        if key not in record:
            raise ParseError(f"missing field {key!r}", len(text))
    extra = set(record) - set(expected)
    if extra:
        raise ParseError(f"unexpected field(s) {sorted(extra)}", where(sorted(extra)[0]))
    if not isinstance(record["obligations"], list):
        raise ParseError("obligations must be a list", where("obligations"))

    obligations = []
    for item in record["obligations"]:
        if not isinstance(item, dict) or item.get("type") not in _VARIANTS:
            raise ParseError(f"unknown obligation {item!r}", where("obligations"))
        body = {k: v for k, v in item.items() if k != "type"}
        cls = _VARIANTS[item["type"]]
        try:
            obligations.append(cls(**body))
        except TypeError as exc:
            raise ParseError(f"bad {item['type']} fields: {exc}", where("obligations")) from None
    return UsagePolicy(record["policy_id"], record["version"], tuple(obligations))


# --- diffs ------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyChange:
    kind: str  # Added | Removed | Tightened | Relaxed
    variant: str
    old: Obligation | None
    new: Obligation | None


def _covers(wide: frozenset[str], narrow: frozenset[str], taxonomy: PurposeTaxonomy | None) -> bool:
    if taxonomy is None:
        return wide >= narrow
    return all(any(taxonomy.subsumes(w, n) for w in wide) for n in narrow)


def diff_policy(
    old: UsagePolicy, new: UsagePolicy, taxonomy: PurposeTaxonomy | None = None
) -> list[PolicyChange]:
    """Classify obligation changes between two versions of one policy.

    Purpose sets are compared by plain set inclusion unless a taxonomy is
    given, in which case coverage is judged by subsumption.
    """
    if old.policy_id != new.policy_id:
        raise VersionError(f"policy ids differ: {old.policy_id} vs {new.policy_id}")
    if new.version <= old.version:
        raise VersionError(f"version must increase: {old.version} -> {new.version}")

    changes = []
    for name, variant in sorted(_VARIANTS.items(), key=lambda kv: kv[0]):
        a, b = old.find(variant), new.find(variant)
        if a == b:
            continue
        if a is None:
            changes.append(PolicyChange("Added", name, None, b))
        elif b is None:
            changes.append(PolicyChange("Removed", name, a, None))
        elif variant is TemporalRetention:
            kind = "Tightened" if b.max_storage_duration < a.max_storage_duration else "Relaxed"
            changes.append(PolicyChange(kind, name, a, b))
        else:
            grows = _covers(b.allowed, a.allowed, taxonomy)
            shrinks = _covers(a.allowed, b.allowed, taxonomy)
            if grows and shrinks:
                continue
            changes.append(PolicyChange("Relaxed" if grows else "Tightened", name, a, b))
    return changes
