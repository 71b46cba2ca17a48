"""Deterministic simulation driver and scenario runner.

A :class:`Simulation` owns the ledger, the oracle bus, every actor's pod
manager and TEE, the simulated clock and the single RNG all randomness
is drawn from.  Scenario files drive it step by step::

    seed 42
    taxonomy default
    0      alice CreateActor
    0      alice InitPod pod://alice
    0      alice PutResource browsing "browsing history"
    0      alice Publish browsing retention=30d
    ...
    172800 alice UpdatePolicy browsing retention=7d

Between steps the loop seals pending transactions, dispatches oracle
traffic until every queue is empty, and advances the clock, ticking each
TEE at every retention deadline that falls inside the jump.
"""

from __future__ import annotations

import random
import shlex
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .codec import to_hex
from .de_app import MonitoringRecord, encode_query
from .identity import KeyPair, content_hash, generate_keypair
from .ledger import Genesis, Ledger
from .oracle import DEFAULT_TIMEOUT_TICKS, OracleBus, TraceLine
from .pod import AccessDenied, PodManager, authorize
from .policy import (
    ONE_MONTH,
    ONE_WEEK,
    SECONDS_PER_DAY,
    Obligation,
    PolicyError,
    PurposeRestriction,
    PurposeTaxonomy,
    TemporalRetention,
    UsagePolicy,
    load_taxonomy,
    serialize_policy,
)
from .tee import MODES, TEE

ACTIONS = (
    "CreateActor",
    "InitPod",
    "PutResource",
    "Publish",
    "PayFee",
    "Lookup",
    "Acquire",
    "Use",
    "UpdatePolicy",
    "Monitor",
    "SealBlock",
    "Tick",
    "SetDishonest",
)
# (min, max) positional args; None = unbounded
_ARITY = {
    "CreateActor": (0, 0),
    "InitPod": (1, None),
    "PutResource": (2, None),
    "Publish": (1, None),
    "PayFee": (1, 1),
    "Lookup": (1, 1),
    "Acquire": (2, 2),
    "Use": (2, 2),
    "UpdatePolicy": (2, None),
    "Monitor": (1, 1),
    "SealBlock": (0, 0),
    "Tick": (0, 0),
    "SetDishonest": (1, 1),
}
GLOBAL_ACTOR = "*"

PROCESSES = {
    "InitPod": "Pod initiation",
    "Publish": "Resource initiation",
    "Lookup": "Resource indexing",
    "PayFee": "Resource access",
    "Acquire": "Resource access",
    "UpdatePolicy": "Policy modification",
    "Monitor": "Policy monitoring",
}

_UNITS = {"s": 1, "h": 3600, "d": SECONDS_PER_DAY, "w": ONE_WEEK, "mo": ONE_MONTH}
MAX_SETTLE_ROUNDS = 1000


class ScenarioError(Exception):
    def __init__(self, index: int, reason: str, report: "RunReport | None" = None):
        super().__init__(f"step {index}: {reason}")
        self.index = index
        self.reason = reason
        self.report = report


@dataclass(frozen=True)
class ScenarioStep:
    at: int
    actor: str
    action: str
    args: tuple[str, ...] = ()
    options: tuple[tuple[str, str], ...] = ()  # key=value trailing options, e.g. expect=allow

    def option(self, key: str) -> str | None:
        return dict(self.options).get(key)

    def describe(self) -> str:
        parts = [str(self.at), self.actor, self.action, *self.args]
        parts += [f"{k}={v}" for k, v in self.options]
        return " ".join(shlex.quote(p) if " " in p else p for p in parts)


@dataclass
class Scenario:
    seed: int = 0
    taxonomy_file: str = "default"
    steps: list[ScenarioStep] = field(default_factory=list)
    timeout_ticks: int = DEFAULT_TIMEOUT_TICKS
    base_dir: Path | None = None

    def taxonomy(self) -> PurposeTaxonomy:
        path = self.taxonomy_file
        if path != "default" and self.base_dir is not None and not Path(path).is_absolute():
            path = str(self.base_dir / path)
        return load_taxonomy(path)


# --- parsing ----------------------------------------------------------------


def parse_duration(text: str) -> int:
    for unit in sorted(_UNITS, key=len, reverse=True):
        if text.endswith(unit) and text[: -len(unit)].isdigit():
            return int(text[: -len(unit)]) * _UNITS[unit]
    if text.isdigit():
        return int(text)
    raise ValueError(f"bad duration {text!r}")


def parse_obligations(tokens: list[str] | tuple[str, ...]) -> tuple[Obligation, ...]:
    """``retention=30d``, ``purpose=a,b`` or ``none``."""
    obligations: list[Obligation] = []
    for tok in tokens:
        if tok == "none":
            continue
        key, sep, value = tok.partition("=")
        if not sep:
            raise ValueError(f"bad policy token {tok!r}")
        if key == "retention":
            obligations.append(TemporalRetention(parse_duration(value)))
        elif key == "purpose":
            obligations.append(PurposeRestriction(frozenset(value.split(","))))
        else:
            raise ValueError(f"unknown policy token {key!r}")
    return tuple(obligations)


def _split_options(tokens: list[str]) -> tuple[list[str], list[tuple[str, str]]]:
    args, opts = [], []
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if sep and key in ("expect",):
            opts.append((key, value))
        else:
            args.append(tok)
    return args, opts


def parse_scenario(text: str, base_dir: Path | None = None) -> Scenario:
    sc = Scenario(base_dir=base_dir)
    for lineno, raw in enumerate(text.splitlines(), 1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            tokens = shlex.split(stripped, comments=True)
        except ValueError as exc:
            raise ScenarioError(-1, f"line {lineno}: {exc}") from None
        if not tokens:
            continue
        head = tokens[0]
        if head in ("seed", "taxonomy", "timeout"):
            if len(tokens) != 2:
                raise ScenarioError(-1, f"line {lineno}: {head} takes one value")
            if head == "seed":
                sc.seed = int(tokens[1])
            elif head == "timeout":
                sc.timeout_ticks = int(tokens[1])
            else:
                sc.taxonomy_file = tokens[1]
            continue
        if len(tokens) < 3 or not head.isdigit():
            raise ScenarioError(-1, f"line {lineno}: expected '<at> <actor> <ACTION> ...'")
        args, opts = _split_options(tokens[3:])
        sc.steps.append(ScenarioStep(int(head), tokens[1], tokens[2], tuple(args), tuple(opts)))
    return sc


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text("utf-8"), base_dir=path.parent)


def bundled_scenario_path(name: str) -> Path | None:
    ref = resources.files("solid_ucon").joinpath("data", name)
    return Path(str(ref)) if ref.is_file() else None


def validate_scenario(scenario: Scenario) -> list[tuple[int, str]]:
    """Referential and temporal checks; empty list means valid."""
    errors: list[tuple[int, str]] = []
    try:
        taxonomy = scenario.taxonomy()
    except (OSError, PolicyError) as exc:
        errors.append((-1, f"taxonomy: {exc}"))
        taxonomy = None
    actors: set[str] = set()
    labels: dict[str, str] = {}
    pods: dict[str, str] = {}
    last_at = 0
    for i, step in enumerate(scenario.steps):
        if step.at < last_at:
            errors.append((i, f"timestamp {step.at} earlier than {last_at}"))
        last_at = max(last_at, step.at)
        if step.action not in ACTIONS:
            errors.append((i, f"unknown action {step.action!r}"))
            continue
        lo, hi = _ARITY[step.action]
        if len(step.args) < lo or (hi is not None and len(step.args) > hi):
            errors.append((i, f"{step.action} takes {lo}..{hi if hi is not None else 'n'} args, got {len(step.args)}"))
            continue
        if step.action == "CreateActor":
            if step.actor in actors or step.actor == GLOBAL_ACTOR:
                errors.append((i, f"actor {step.actor!r} already declared"))
            actors.add(step.actor)
            continue
        if step.actor == GLOBAL_ACTOR:
            if step.action not in ("SealBlock", "Tick"):
                errors.append((i, f"{step.action} needs a declared actor"))
            continue
        if step.actor not in actors:
            errors.append((i, f"undeclared actor {step.actor!r}"))
            continue
        if step.action == "InitPod":
            if step.actor in pods.values():
                errors.append((i, f"{step.actor} already has a pod"))
            pods[step.args[0]] = step.actor
        elif step.action == "PutResource":
            if step.actor not in pods.values():
                errors.append((i, f"{step.actor} has no pod"))
            labels[step.args[0]] = step.actor
        elif step.action == "SetDishonest":
            if step.args[0] not in MODES:
                errors.append((i, f"unknown mode {step.args[0]!r}"))
        elif step.action in ("Publish", "PayFee", "Lookup", "Acquire", "Use", "UpdatePolicy", "Monitor"):
            if step.args[0] not in labels:
                errors.append((i, f"undeclared resource {step.args[0]!r}"))
        if step.action in ("InitPod", "Publish", "UpdatePolicy"):
            try:
                obligations = parse_obligations(step.args[1:])
            except (ValueError, PolicyError) as exc:
                errors.append((i, f"policy: {exc}"))
                obligations = ()
            if taxonomy is not None:
                for ob in obligations:
                    if isinstance(ob, PurposeRestriction):
                        for p in sorted(ob.allowed - taxonomy.nodes):
                            errors.append((i, f"purpose {p!r} not in taxonomy"))
        if step.action in ("Acquire", "Use") and taxonomy is not None:
            for p in step.args[1].split(","):
                if p not in taxonomy:
                    errors.append((i, f"purpose {p!r} not in taxonomy"))
    return errors


# --- simulation -------------------------------------------------------------


@dataclass
class Actor:
    name: str
    key: KeyPair
    pm: PodManager
    tee: TEE
    pod_ref: str | None = None


@dataclass(frozen=True)
class StepRecord:
    index: int
    step: ScenarioStep
    outcome: str
    trace: tuple[TraceLine, ...]


@dataclass(frozen=True)
class Assertion:
    index: int
    description: str
    expected: str
    actual: str

    @property
    def passed(self) -> bool:
        return self.expected == self.actual or (
            self.expected == "Denied" and self.actual.startswith("Denied(")
        )


class Simulation:
    def __init__(self, seed: int = 0, taxonomy: PurposeTaxonomy | None = None, timeout_ticks: int = DEFAULT_TIMEOUT_TICKS):
        self.seed = seed
        self.rng = random.Random(seed)
        self.taxonomy = taxonomy or load_taxonomy(None)
        market_seed = self.rng.randbytes(32)
        self.oracle_key = generate_keypair(self.rng.randbytes(32))
        self.ledger = Ledger(Genesis(market_seed, self.oracle_key.address))
        self.bus = OracleBus(self.ledger, timeout_ticks, self.oracle_key)
        self.actors: dict[str, Actor] = {}
        self.managers: dict[str, PodManager] = {}
        self.resources: dict[str, tuple[str, bytes]] = {}  # label -> (owner, resource_id)
        self.clock = 0
        self.records: list[StepRecord] = []
        self.assertions: list[Assertion] = []
        self.monitor_labels: dict[int, str] = {}

    # --- plumbing ---------------------------------------------------------------

    def resolve_pod(self, pod_ref: str) -> PodManager:
        return self.managers[pod_ref]

    def actor_name(self, address: bytes | None) -> str:
        for a in self.actors.values():
            if a.key.address == address:
                return a.name
        return to_hex(address) if address else "-"

    def settle(self) -> None:
        """Seal, dispatch and deliver until nothing is left in flight."""
        for _ in range(MAX_SETTLE_ROUNDS):
            if self.ledger.has_pending:
                self.ledger.seal_block()
            self.bus.dispatch_push_out()
            self.bus.deliver()
            if not self.ledger.has_pending and not self.ledger.event_queue and self.bus.idle:
                return
        raise RuntimeError("oracle traffic did not quiesce")

    def advance_to(self, t: int) -> None:
        """Move the clock to ``t``, firing every retention deadline on the way."""
        if t < self.clock:
            raise ValueError(f"clock cannot go back from {self.clock} to {t}")
        while True:
            deadlines = [d for a in self.actors.values() if (d := a.tee.next_deadline()) is not None and d <= t]
            if not deadlines:
                break
            at = min(deadlines)
            self.bus.now = at
            for name in sorted(self.actors):
                self.actors[name].tee.tick(at)
        self.clock = self.bus.now = t
        for name in sorted(self.actors):
            self.actors[name].tee.tick(t)

    def create_actor(self, name: str) -> Actor:
        if name in self.actors:
            raise ValueError(f"actor {name} exists")
        key = generate_keypair(self.rng.randbytes(32))
        receipt = self.bus.open_account(key)
        if not receipt.accepted:
            raise RuntimeError(f"account for {name} refused: {receipt}")
        pm = PodManager(name, key, self.bus, self.ledger.market_public)
        tee = TEE(name, key, self.bus, self.taxonomy, self.resolve_pod)
        tee.clock = self.clock
        actor = Actor(name, key, pm, tee)
        self.actors[name] = actor
        return actor

    def resource(self, label: str) -> tuple[Actor, bytes]:
        owner, rid = self.resources[label]
        return self.actors[owner], rid

    # --- scripted actions -----------------------------------------------------------

    def init_pod(self, actor: str, pod_ref: str, obligations: tuple = ()) -> None:
        a = self.actors[actor]
        a.pm.init_pod(pod_ref, UsagePolicy(f"{pod_ref}#default", 1, obligations))
        a.pod_ref = pod_ref
        self.managers[pod_ref] = a.pm

    def put_resource(self, actor: str, label: str, content: bytes) -> bytes:
        a = self.actors[actor]
        rid = a.pm.put_resource(a.pod_ref, authorize(a.key, "put_resource", content_hash(content)), content)
        self.resources[label] = (actor, rid)
        return rid

    def publish(self, label: str, obligations: tuple | None = None) -> None:
        owner, rid = self.resource(label)
        policy = None if obligations is None else UsagePolicy(f"{owner.pod_ref}/{label}", 1, obligations)
        owner.pm.publish_resource(owner.pod_ref, authorize(owner.key, "publish_resource", rid), rid, policy)

    def update_policy(self, label: str, obligations: tuple) -> UsagePolicy:
        owner, rid = self.resource(label)
        current = owner.pm.pods[owner.pod_ref].local_policies[rid]
        new = current.bumped(*obligations)
        auth = authorize(owner.key, "update_policy", rid, serialize_policy(new))
        owner.pm.update_policy(owner.pod_ref, auth, rid, new)
        return new

    def monitor(self, label: str) -> int:
        owner, rid = self.resource(label)
        auth = authorize(owner.key, "request_monitoring", rid)
        mid = owner.pm.request_monitoring(owner.pod_ref, auth, rid, self.rng.randbytes(16))
        self.monitor_labels[mid] = label
        return mid

    def get_monitor(self, monitor_id: int) -> MonitoringRecord:
        return self.ledger.read_state(encode_query("get_monitor", monitor_id=monitor_id))

    def use(self, actor: str, label: str, purpose: str) -> str:
        _owner, rid = self.resource(label)
        try:
            self.actors[actor].tee.use_resource(rid, purpose, self.clock)
        except AccessDenied as exc:
            return f"Denied({exc.reason})"
        return "Allow"

    # --- step loop ----------------------------------------------------------------

    def run_step(self, index: int, step: ScenarioStep) -> StepRecord:
        start = len(self.bus.trace)
        self.bus.advance_tick(self.clock)
        self.advance_to(step.at)
        outcome = self._apply(index, step)
        self.settle()
        outcome = self._post(index, step, outcome)
        record = StepRecord(index, step, outcome, tuple(self.bus.trace[start:]))
        self.records.append(record)
        return record

    def _apply(self, index: int, step: ScenarioStep) -> str:
        act, args = step.action, step.args
        if act == "CreateActor":
            a = self.create_actor(step.actor)
            return f"address={a.key.hex_address}"
        if act == "InitPod":
            self.init_pod(step.actor, args[0], parse_obligations(args[1:]))
            return "ok"
        if act == "PutResource":
            rid = self.put_resource(step.actor, args[0], " ".join(args[1:]).encode("utf-8"))
            return f"resource={to_hex(rid)}"
        if act == "Publish":
            self.publish(args[0], parse_obligations(args[1:]) if len(args) > 1 else None)
            return "ok"
        if act == "PayFee":
            _owner, rid = self.resource(args[0])
            cert = self.actors[step.actor].tee.pay_fee(rid)
            return f"certificate@{cert.issued_at}"
        if act == "Lookup":
            _owner, rid = self.resource(args[0])
            info = self.actors[step.actor].tee.lookup(rid)
            return f"{info.pod_ref} v{info.version}"
        if act == "Acquire":
            _owner, rid = self.resource(args[0])
            entry = self.actors[step.actor].tee.acquire(rid, frozenset(args[1].split(",")), self.clock)
            return f"stored v{entry.policy.version}"
        if act == "Use":
            outcome = self.use(step.actor, args[0], args[1])
            expected = step.option("expect")
            if expected is not None:
                self.assertions.append(Assertion(index, step.describe(), _norm_expect(expected), outcome))
            return outcome
        if act == "UpdatePolicy":
            new = self.update_policy(args[0], parse_obligations(args[1:]))
            return f"v{new.version}"
        if act == "Monitor":
            return f"monitor={self.monitor(args[0])}"
        if act == "SealBlock":
            return f"height={self.ledger.seal_block().height}"
        if act == "Tick":
            return "ok"
        if act == "SetDishonest":
            self.actors[step.actor].tee.set_mode(args[0])
            return args[0]
        raise ScenarioError(index, f"unknown action {act!r}")

    def _post(self, index: int, step: ScenarioStep, outcome: str) -> str:
        if step.action != "Monitor":
            return outcome
        mid = int(outcome.split("=", 1)[1])
        mon = self.get_monitor(mid)
        status = mon.status if mon.violator is None else f"Violation:{self.actor_name(mon.violator)}"
        expected = step.option("expect")
        if expected is not None:
            self.assertions.append(Assertion(index, step.describe(), expected, status))
        return f"{outcome} {status}"

    # --- reporting ------------------------------------------------------------------

    def report(self, error: str | None = None) -> "RunReport":
        monitors = []
        for mid in sorted(self.ledger.state.monitors):
            m = self.ledger.state.monitors[mid]
            monitors.append(
                f"monitor={mid} resource={self.monitor_labels.get(mid, to_hex(m.resource_id))} "
                f"requester={self.actor_name(m.requester)} status={m.status} "
                f"violator={self.actor_name(m.violator) if m.violator else '-'} "
                f"evidence={','.join(self.actor_name(a) for a in sorted(m.evidence)) or '-'} "
                f"pending={','.join(self.actor_name(a) for a in sorted(m.pending)) or '-'}"
            )
        return RunReport(
            seed=self.seed,
            final_head_hash=self.ledger.head.block_hash,
            height=self.ledger.head.height,
            state_root=self.ledger.head.state_root,
            steps=tuple(self.records),
            trace=tuple(self.bus.trace),
            usage_logs={n: self.actors[n].tee.export_log() for n in sorted(self.actors)},
            monitors=tuple(monitors),
            assertions=tuple(self.assertions),
            error=error,
        )


def _norm_expect(text: str) -> str:
    low = text.lower()
    if low == "allow":
        return "Allow"
    if low == "deny":
        return "Denied"
    if low.startswith("deny:"):
        return f"Denied({text.split(':', 1)[1]})"
    return text


@dataclass(frozen=True)
class RunReport:
    seed: int
    final_head_hash: bytes
    height: int
    state_root: bytes
    steps: tuple[StepRecord, ...]
    trace: tuple[TraceLine, ...]
    usage_logs: dict[str, str]
    monitors: tuple[str, ...]
    assertions: tuple[Assertion, ...]
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and all(a.passed for a in self.assertions)

    def trace_text(self) -> str:
        return "".join(f"{line}\n" for line in self.trace)

    def render(self) -> str:
        out = [
            f"seed: {self.seed}",
            f"final_head_hash: {to_hex(self.final_head_hash)}",
            f"height: {self.height}",
            f"state_root: {to_hex(self.state_root)}",
            f"status: {'ok' if self.ok else 'FAILED'}",
        ]
        if self.error:
            out.append(f"error: {self.error}")
        out.append("[steps]")
        out += [f"{r.index} {r.step.describe()} -> {r.outcome}" for r in self.steps]
        out.append("[trace]")
        out += [str(t) for t in self.trace]
        out.append("[monitors]")
        out += list(self.monitors)
        out.append("[usage_logs]")
        for name, text in self.usage_logs.items():
            out.append(f"== {name}")
            out += text.splitlines()
        out.append("[assertions]")
        out += [
            f"step={a.index} expect={a.expected} actual={a.actual} {'PASS' if a.passed else 'FAIL'}"
            for a in self.assertions
        ]
        return "\n".join(out) + "\n"


def workflow_lines(report: RunReport, process: str) -> list[str]:
    """Trace lines emitted by the steps that belong to one named workflow."""
    return [str(line) for rec in report.steps if PROCESSES.get(rec.step.action) == process for line in rec.trace]


def run_scenario(scenario: Scenario, seed: int | None = None) -> RunReport:
    """Validate and execute ``scenario``; raises ScenarioError with a partial report on failure."""
    issues = validate_scenario(scenario)
    if issues:
        index, reason = issues[0]
        raise ScenarioError(index, reason)
    sim = Simulation(scenario.seed if seed is None else seed, scenario.taxonomy(), scenario.timeout_ticks)
    for i, step in enumerate(scenario.steps):
        try:
            sim.run_step(i, step)
        except ScenarioError:
            raise
        except Exception as exc:  # any component failure aborts the run
            reason = f"{step.action}: {type(exc).__name__}: {exc}"
            raise ScenarioError(i, reason, sim.report(error=f"step {i}: {reason}")) from exc
    return sim.report()
