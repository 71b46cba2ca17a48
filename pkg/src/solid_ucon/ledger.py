"""Single-sequencer hash-chained ledger running the DE App contract.

There is no consensus: blocks are sealed on demand by whoever owns the
``Ledger`` (the simulation loop).  Transactions are executed tentatively
on submission so the caller gets a receipt at once; the block that
includes them is cut by :meth:`Ledger.seal_block`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Any

from .codec import frame, to_hex
from .de_app import (
    METHODS,
    ContractError,
    DEApp,
    DEAppState,
    Event,
    ExecContext,
    state_bytes,
)
from .identity import KeyPair, Signature, address_of, content_hash, generate_keypair, sign, verify

log = logging.getLogger(__name__)

ZERO_HASH = bytes(32)
OPEN_ACCOUNT = "open_account"


@dataclass(frozen=True)
class Transaction:
    nonce: int
    sender: bytes
    method: str
    payload: bytes
    signature: Signature

    @staticmethod
    def signing_message(nonce: int, sender: bytes, method: str, payload: bytes) -> bytes:
        return frame("tx", nonce, sender, method, payload)

    @classmethod
    def create(cls, key: KeyPair, nonce: int, method: str, payload: bytes) -> "Transaction":
        msg = cls.signing_message(nonce, key.address, method, payload)
        return cls(nonce, key.address, method, payload, sign(key, msg))

    def encode(self) -> bytes:
        return frame(self.nonce, self.sender, self.method, self.payload, self.signature.signer, self.signature.bytes)

    def signature_ok(self, public: bytes) -> bool:
        return verify(self.signature, public, self.signing_message(self.nonce, self.sender, self.method, self.payload))


def open_account_tx(key: KeyPair) -> Transaction:
    """Self-certifying account registration (payload = raw public key)."""
    return Transaction.create(key, 1, OPEN_ACCOUNT, key.public)


@dataclass(frozen=True)
class Block:
    height: int
    parent_hash: bytes
    txs: tuple[Transaction, ...]
    state_root: bytes
    block_hash: bytes

    @staticmethod
    def compute_hash(height: int, parent_hash: bytes, txs: tuple[Transaction, ...], state_root: bytes) -> bytes:
        return content_hash(frame("block", height, parent_hash, len(txs), *(t.encode() for t in txs), state_root))

    def recompute_hash(self) -> bytes:
        return self.compute_hash(self.height, self.parent_hash, self.txs, self.state_root)


@dataclass(frozen=True)
class Account:
    public: bytes
    nonce: int


@dataclass(frozen=True)
class Receipt:
    accepted: bool
    events: tuple[Event, ...] = ()
    result: Any = None
    reason: str | None = None  # BadSignature | BadNonce | UnknownMethod | ContractError | ...
    error: str | None = None  # contract error class name

    def __str__(self) -> str:
        if self.accepted:
            return f"Accepted({', '.join(e.type for e in self.events)})"
        return f"Rejected({self.reason}{':' + self.error if self.error else ''})"


@dataclass(frozen=True)
class Genesis:
    market_seed: bytes
    oracle_address: bytes | None = None


@dataclass(frozen=True)
class ChainCheck:
    ok: bool
    height: int | None = None
    reason: str | None = None

    def __str__(self) -> str:
        return "Ok" if self.ok else f"Corrupt({self.height}, {self.reason})"


class Ledger:
    """Blocks, accounts, contract state and the outbound event queue."""

    def __init__(self, genesis: Genesis):
        self.genesis = genesis
        self.contract = DEApp(generate_keypair(genesis.market_seed), genesis.oracle_address)
        self.accounts: dict[bytes, Account] = {}
        self.state: DEAppState = self.contract.genesis_state()
        # (block height, event) pairs awaiting oracle delivery
        self.event_queue: list[tuple[int, Event]] = []
        root = content_hash(state_bytes(self.state))
        self.blocks: list[Block] = [
            Block(0, ZERO_HASH, (), root, Block.compute_hash(0, ZERO_HASH, (), root))
        ]
        self._pending: list[Transaction] = []
        self._pending_events: list[Event] = []
        self._work_state = self.state
        self._work_accounts = dict(self.accounts)

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    @property
    def market_public(self) -> bytes:
        return self.contract.market_key.public

    @property
    def has_pending(self) -> bool:
        return bool(self._pending)

    def state_hash(self) -> bytes:
        return content_hash(state_bytes(self.state))

    def public_key(self, address: bytes) -> bytes | None:
        acct = self._work_accounts.get(address)
        return acct.public if acct else None

    def next_nonce(self, address: bytes) -> int:
        acct = self._work_accounts.get(address)
        return 1 if acct is None else acct.nonce + 1

    def submit_tx(self, tx: Transaction) -> Receipt:
        if tx.method == OPEN_ACCOUNT:
            return self._open_account(tx)
        acct = self._work_accounts.get(tx.sender)
        if acct is None or not tx.signature_ok(acct.public):
            return Receipt(False, reason="BadSignature")
        if tx.nonce != acct.nonce + 1:
            return Receipt(False, reason="BadNonce")
        if tx.method not in METHODS:
            return Receipt(False, reason="UnknownMethod")
        ctx = ExecContext(tx.sender, len(self.blocks), self.public_key)
        try:
            new_state, events, result = self.contract.execute(self._work_state, ctx, tx.method, tx.payload)
        except ContractError as exc:
            log.debug("tx %s from %s rejected: %s(%s)", tx.method, to_hex(tx.sender), exc.name, exc)
            return Receipt(False, reason="ContractError", error=exc.name)
        self._work_state = new_state
        self._work_accounts[tx.sender] = replace(acct, nonce=tx.nonce)
        self._pending.append(tx)
        self._pending_events.extend(events)
        return Receipt(True, tuple(events), result)

    def _open_account(self, tx: Transaction) -> Receipt:
        public = tx.payload
        if address_of(public) != tx.sender or not tx.signature_ok(public):
            return Receipt(False, reason="BadSignature")
        if tx.sender in self._work_accounts or tx.nonce != 1:
            return Receipt(False, reason="BadNonce")
        self._work_accounts[tx.sender] = Account(public, tx.nonce)
        self._pending.append(tx)
        return Receipt(True)

    def seal_block(self) -> Block:
        height = len(self.blocks)
        txs = tuple(self._pending)
        root = content_hash(state_bytes(self._work_state))
        parent = self.head.block_hash
        block = Block(height, parent, txs, root, Block.compute_hash(height, parent, txs, root))
        self.blocks.append(block)
        self.state = self._work_state
        self.accounts = dict(self._work_accounts)
        self.event_queue.extend((height, e) for e in self._pending_events)
        self._pending = []
        self._pending_events = []
        return block

    def read_state(self, query: bytes) -> Any:
        """Pure read against the head block's committed contract state."""
        return self.contract.query(self.state, query)

    def take_events(self) -> list[tuple[int, Event]]:
        out, self.event_queue = self.event_queue, []
        return out


def verify_chain(ledger: Ledger, blocks: list[Block] | None = None) -> ChainCheck:
    """Check hashes, links and signatures, and re-execute from genesis.

    ``blocks`` defaults to ``ledger.blocks``; passing a modified copy lets
    callers check a tampered chain without touching the ledger.
    """
    blocks = ledger.blocks if blocks is None else blocks
    replay = Ledger(ledger.genesis)
    if not blocks:
        return ChainCheck(False, 0, "Empty")
    prev_hash = ZERO_HASH
    for h, block in enumerate(blocks):
        if block.recompute_hash() != block.block_hash:
            return ChainCheck(False, h, "HashMismatch")
        if block.height != h:
            return ChainCheck(False, h, "HeightMismatch")
        if block.parent_hash != prev_hash:
            return ChainCheck(False, h, "ParentMismatch")
        if h == 0:
            if block.txs or block.state_root != replay.head.state_root:
                return ChainCheck(False, 0, "BadGenesis")
        else:
            for tx in block.txs:
                public = tx.payload if tx.method == OPEN_ACCOUNT else replay.public_key(tx.sender)
                if public is None or not tx.signature_ok(public):
                    return ChainCheck(False, h, "BadSignature")
                receipt = replay.submit_tx(tx)
                if not receipt.accepted:
                    return ChainCheck(False, h, f"TxRejected:{receipt.reason}")
            if replay.seal_block().state_root != block.state_root:
                return ChainCheck(False, h, "StateRootMismatch")
        prev_hash = block.block_hash
    return ChainCheck(True)


def dump_chain(blocks: list[Block]) -> str:
    """One line per block, hex hashes; stable for golden-file comparison."""
    lines = []
    for b in blocks:
        txs = ",".join(f"{to_hex(t.sender)}#{t.nonce}:{t.method}" for t in b.txs)
        lines.append(
            f"height={b.height} parent={to_hex(b.parent_hash)} state_root={to_hex(b.state_root)} "
            f"hash={to_hex(b.block_hash)} txs=[{txs}]"
        )
    return "\n".join(lines) + "\n"
