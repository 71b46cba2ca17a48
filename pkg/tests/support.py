"""Shared builders for the test-suite (imported by test modules)."""

from __future__ import annotations

import random
from dataclasses import replace

from solid_ucon.codec import to_hex
from solid_ucon.de_app import encode_args
from solid_ucon.harness import Simulation
from solid_ucon.identity import KeyPair, generate_keypair
from solid_ucon.ledger import Block, Genesis, Ledger, Receipt, Transaction, open_account_tx
from solid_ucon.oracle import OracleBus
from solid_ucon.pod import AccessDenied
from solid_ucon.policy import (
    PurposeRestriction,
    PurposeTaxonomy,
    TemporalRetention,
    UsagePolicy,
    default_taxonomy,
    serialize_policy,
)
from solid_ucon.tee import TEE, TrustedStorageEntry


def key(name: str) -> KeyPair:
    return generate_keypair(name.encode().ljust(32, b"."))


MARKET_SEED = b"m" * 32
ORACLE = key("oracle")


class Market:
    """A bare ledger plus named accounts; every call is its own block by default."""

    def __init__(self, *names: str, oracle: KeyPair | None = ORACLE):
        self.ledger = Ledger(Genesis(MARKET_SEED, oracle.address if oracle else None))
        self.keys = {n: key(n) for n in names}
        for k in self.keys.values():
            assert self.ledger.submit_tx(open_account_tx(k)).accepted
        self.ledger.seal_block()

    def open(self, k: KeyPair) -> None:
        assert self.ledger.submit_tx(open_account_tx(k)).accepted

    def tx(self, who: str | KeyPair, method: str, **args) -> Transaction:
        k = self.keys[who] if isinstance(who, str) else who
        return Transaction.create(k, self.ledger.next_nonce(k.address), method, encode_args(**args))

    def call(self, who: str | KeyPair, method: str, seal: bool = True, **args) -> Receipt:
        receipt = self.ledger.submit_tx(self.tx(who, method, **args))
        if seal:
            self.ledger.seal_block()
        return receipt

    def addr(self, name: str) -> bytes:
        return self.keys[name].address


def policy_text(policy_id: str, version: int = 1, *obligations) -> str:
    return serialize_policy(UsagePolicy(policy_id, version, tuple(obligations))).decode()


def market_with_resource(*consumers: str) -> tuple[Market, bytes]:
    """Owner ``alice`` with one published resource; each consumer holds a certificate and a recorded copy."""
    m = Market("alice", *consumers)
    assert m.call("alice", "register_pod", pod_ref="pod://alice", policy=policy_text("pod://alice#default")).accepted
    rid = bytes(range(32))
    pol = policy_text("pod://alice/r", 1, TemporalRetention(30 * 86400))
    assert m.call("alice", "register_resource", pod_ref="pod://alice", resource_id=to_hex(rid), policy=pol).accepted
    for c in consumers:
        assert m.call(c, "pay_fee", resource_id=to_hex(rid)).accepted
        assert m.call("alice", "record_copy_holder", resource_id=to_hex(rid), consumer=to_hex(m.addr(c))).accepted
    return m, rid


def build_chain(n_blocks: int = 50) -> Ledger:
    """A committed chain with ``n_blocks`` blocks above genesis, most carrying transactions."""
    m, rid = market_with_resource("bob", "carol")
    version = 1
    while m.ledger.head.height < n_blocks:
        version += 1
        days = 30 - (version % 20)
        pol = policy_text("pod://alice/r", version, TemporalRetention(days * 86400), PurposeRestriction(frozenset({"medical"})))
        assert m.call("alice", "update_policy", resource_id=to_hex(rid), policy=pol).accepted
    assert m.ledger.head.height == n_blocks
    return m.ledger


# --- chain mutation ------------------------------------------------------------


def _int_bytes(v: int) -> bytes:
    return v.to_bytes(8, "big")


def chain_fields(blocks: list[Block]) -> list[tuple[int, int | None, str, bytes]]:
    """Every mutable byte-field of the chain as (block index, tx index or None, field name, bytes)."""
    out = []
    for bi, b in enumerate(blocks):
        out += [
            (bi, None, "height", _int_bytes(b.height)),
            (bi, None, "parent_hash", b.parent_hash),
            (bi, None, "state_root", b.state_root),
            (bi, None, "block_hash", b.block_hash),
        ]
        for ti, t in enumerate(b.txs):
            out += [
                (bi, ti, "nonce", _int_bytes(t.nonce)),
                (bi, ti, "sender", t.sender),
                (bi, ti, "method", t.method.encode()),
                (bi, ti, "payload", t.payload),
                (bi, ti, "sig_signer", t.signature.signer),
                (bi, ti, "sig_bytes", t.signature.bytes),
            ]
    return out


def _set(obj, name: str, raw: bytes):
    if name in ("height", "nonce"):
        return replace(obj, **{name: int.from_bytes(raw, "big")})
    if name == "method":
        return replace(obj, method=raw.decode("latin-1"))
    if name == "sig_signer":
        return replace(obj, signature=replace(obj.signature, signer=raw))
    if name == "sig_bytes":
        return replace(obj, signature=replace(obj.signature, bytes=raw))
    return replace(obj, **{name: raw})


def mutate_one_byte(blocks: list[Block], rng: random.Random) -> tuple[list[Block], int, str]:
    """Flip one byte (xor with a non-zero mask) at a uniformly chosen chain byte position."""
    fields = chain_fields(blocks)
    total = sum(len(f[3]) for f in fields)
    pos = rng.randrange(total)
    for bi, ti, name, raw in fields:
        if pos < len(raw):
            break
        pos -= len(raw)
    mutated = bytearray(raw)
    mutated[pos] ^= rng.randrange(1, 256)
    out = list(blocks)
    if ti is None:
        out[bi] = _set(blocks[bi], name, bytes(mutated))
    else:
        txs = list(blocks[bi].txs)
        txs[ti] = _set(txs[ti], name, bytes(mutated))
        out[bi] = replace(blocks[bi], txs=tuple(txs))
    return out, bi, name


# --- simulation builders ---------------------------------------------------------


def sim_with_holders(k: int, seed: int = 7) -> tuple[Simulation, str, list[str]]:
    """Owner ``owner`` publishes ``data``; ``k`` consumers pay, look up and acquire it."""
    sim = Simulation(seed)
    sim.create_actor("owner")
    sim.init_pod("owner", "pod://owner")
    sim.put_resource("owner", "data", b"owner data")
    sim.publish("data", (TemporalRetention(30 * 86400),))
    sim.settle()
    names = [f"c{i}" for i in range(k)]
    for n in names:
        sim.create_actor(n)
        _, rid = sim.resource("data")
        tee = sim.actors[n].tee
        tee.pay_fee(rid)
        sim.settle()
        tee.lookup(rid)
        tee.acquire(rid, {"web-analytics"}, sim.clock)
        sim.settle()
    return sim, "data", names


# --- randomized expiry schedules -------------------------------------------------


def _bare_tee_factory():
    bus = OracleBus(Ledger(Genesis(MARKET_SEED)))
    tax = default_taxonomy()
    k = key("schedule-tee")
    return lambda: TEE("sched", k, bus, tax)


_FACTORY = []

PURPOSES = ("web-analytics", "medical-research", "marketing", "education")


def random_schedule(rng: random.Random, length: int = 12) -> dict:
    """Acquisition policy plus a list of (op, at, arg) with non-decreasing timestamps."""
    day = 86400
    t = rng.randrange(0, 3 * day)
    start = t
    retention = rng.choice([None, rng.randrange(1, 40 * day)])
    allowed = rng.choice([None, frozenset(rng.sample(PURPOSES, rng.randrange(1, 3)))])
    ops = []
    for _ in range(length):
        t += rng.choice([0, 0, rng.randrange(1, day), rng.randrange(1, 10 * day)])
        kind = rng.choice(["use", "use", "tick", "update"])
        if kind == "use":
            ops.append(("use", t, rng.choice(PURPOSES)))
        elif kind == "tick":
            ops.append(("tick", t, None))
        else:
            ops.append(("update", t, rng.choice([None, rng.randrange(1, 40 * day)])))
    return {"start": start, "retention": retention, "allowed": allowed, "ops": ops}


def run_schedule(schedule: dict) -> list[str]:
    """Replay one schedule against a fresh honest TEE; returns safety violations found."""
    if not _FACTORY:
        _FACTORY.append(_bare_tee_factory())
    tee = _FACTORY[0]()
    rid = b"\x42" * 32

    def policy(version, retention):
        obs = []
        if retention is not None:
            obs.append(TemporalRetention(retention))
        if schedule["allowed"] is not None:
            obs.append(PurposeRestriction(schedule["allowed"]))
        return UsagePolicy("sched", version, tuple(obs))

    start = schedule["start"]
    tee.clock = start
    tee.entries[rid] = TrustedStorageEntry(rid, b"secret", policy(1, schedule["retention"]), start, frozenset())
    # independent model of the live deadline
    deadline = None if schedule["retention"] is None else start + schedule["retention"]
    version = 1
    ever_deleted = False
    problems = []
    for op, at, arg in schedule["ops"]:
        if op == "tick":
            tee.tick(at)
        elif op == "update":
            version += 1
            tee.on_policy_update(rid, policy(version, arg), at)
            deadline = None if arg is None else start + arg
        else:
            try:
                content = tee.use_resource(rid, arg, at)
            except AccessDenied:
                content = None
            if content is not None:
                if deadline is not None and at >= deadline:
                    problems.append(f"content at {at} >= deadline {deadline}")
                if ever_deleted:
                    problems.append(f"content at {at} after deletion")
        ever_deleted = ever_deleted or tee.entries[rid].deleted
    return problems


# --- policies and taxonomies --------------------------------------------------------


def closure_oracle(tax: PurposeTaxonomy) -> dict[str, set[str]]:
    """Independent reflexive-transitive closure by fixpoint iteration."""
    up = {n: {n} for n in tax.nodes}
    for c, p in tax.parents.items():
        up[c].add(p)
    for c, ts in tax.aliases.items():
        up[c] |= set(ts)
    changed = True
    while changed:
        changed = False
        for n in up:
            extra = set().union(*(up[m] for m in up[n])) - up[n]
            if extra:
                up[n] |= extra
                changed = True
    return up


_TOKEN_CHARS = "abcdefghijklmnopqrstuvwxyz0123456789-"


def random_policy(rng: random.Random) -> UsagePolicy:
    obs = []
    if rng.random() < 0.6:
        obs.append(TemporalRetention(rng.randrange(1, 10**10)))
    if rng.random() < 0.6:
        tokens = {"".join(rng.choices(_TOKEN_CHARS, k=rng.randrange(1, 12))) for _ in range(rng.randrange(1, 5))}
        obs.append(PurposeRestriction(frozenset(tokens)))
    rng.shuffle(obs)
    pid = "".join(chr(rng.choice([rng.randrange(32, 127), rng.randrange(160, 0x3000)])) for _ in range(rng.randrange(1, 30)))
    return UsagePolicy(pid, rng.randrange(1, 10**12), tuple(obs))


def random_taxonomy(rng: random.Random, max_nodes: int = 50) -> PurposeTaxonomy:
    """Forest whose tree and alias edges all point to lower indices, hence acyclic."""
    n = rng.randrange(1, max_nodes + 1)
    nodes = [f"n{i}" for i in range(n)]
    edges = [(nodes[p], nodes[i]) for i in range(1, n) if (p := rng.randrange(-1, i)) >= 0]
    aliases = []
    for _ in range(rng.randrange(0, n // 3 + 1) if n > 1 else 0):
        i = rng.randrange(1, n)
        aliases.append((nodes[i], nodes[rng.randrange(i)]))
    return PurposeTaxonomy.from_edges(edges, aliases, nodes)
