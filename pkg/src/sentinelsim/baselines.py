"""Baseline guards for comparison: a contract-global counter guard applied as
a per-function modifier, and a balance-delta guard that checks conservation of
(actual balance - ledger total) around each guarded function. Both live inside
the contract they protect and know nothing about other contracts.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .behaviors import Behavior, BehaviorSpec, Ctx
from .mcvm import CallFrame, Revert, VM
from .sentinel import derive_slot

NOT_ENTERED, ENTERED = 1, 2

COUNTER_STATUS_LABEL = "guard.counter.status"
COUNTER_STATUS_SLOT = derive_slot(COUNTER_STATUS_LABEL)
COUNTER_STATUS_VAR = "reentrancy_status"

REENTRANT_CALL_ERROR = "reentrant call"
BALANCE_INVARIANT_ERROR = "balance invariant violated"


class GuardKind(Enum):
    COUNTER_GUARD = "counter"
    BALANCE_DELTA_GUARD = "balance-delta"


@dataclass(frozen=True)
class GuardAttachment:
    kind: GuardKind
    functions: frozenset[str]
    ledger_var: str | None = None  # required for the balance-delta guard


def _extend_spec(
    inner: BehaviorSpec,
    extra_slots: dict[str, int],
    guarded: frozenset[str],
    extra_reads: set[str],
    extra_writes: set[str],
) -> BehaviorSpec:
    reads = {fn: set(vs) for fn, vs in inner.reads.items()}
    writes = {fn: set(vs) for fn, vs in inner.writes.items()}
    for fn in guarded:
        reads.setdefault(fn, set()).update(extra_reads)
        writes.setdefault(fn, set()).update(extra_writes)
    spec = BehaviorSpec(
        functions=inner.functions,
        reads=reads,
        writes=writes,
        slot_of={**inner.slot_of, **extra_slots},
        catch_all=inner.catch_all,
    )
    # share the entry registry so slots resolve across wrapper and inner
    spec._entries = inner._entries
    return spec


class CounterGuard(Behavior):
    """One status word per contract; every guarded function requires it to be
    NOT_ENTERED, flips it, and restores it on exit. Unguarded functions bypass
    the guard entirely. The status slot sits at a hashed location so it cannot
    collide with contract variables."""

    def __init__(self, inner: Behavior, guarded: frozenset[str] | set[str]):
        self.inner = inner
        self.guarded = frozenset(guarded)
        self.spec = _extend_spec(
            inner.spec,
            {COUNTER_STATUS_VAR: COUNTER_STATUS_SLOT},
            self.guarded,
            {COUNTER_STATUS_VAR},
            {COUNTER_STATUS_VAR},
        )

    def run(self, vm: VM, frame: CallFrame) -> tuple:
        fn = frame.function or "receive"
        if fn not in self.guarded:
            return self.inner.run(vm, frame)
        ctx = Ctx(vm, frame, self.spec)
        ctx.require(ctx.read(COUNTER_STATUS_VAR) != ENTERED, REENTRANT_CALL_ERROR)
        ctx.write(COUNTER_STATUS_VAR, ENTERED)
        out = self.inner.run(vm, frame)
        ctx.write(COUNTER_STATUS_VAR, NOT_ENTERED)
        return out


class BalanceDeltaGuard(Behavior):
    """Checks that (actual balance - sum of ledger entries) is unchanged
    across each guarded function, net of the incoming call value. The
    perceived total is the sum over the contract's declared ledger variable;
    claims tracked anywhere else are invisible to it."""

    def __init__(
        self, inner: Behavior, guarded: frozenset[str] | set[str], ledger_var: str
    ):
        if ledger_var not in inner.spec.slot_of:
            raise ValueError(f"inner behavior declares no ledger variable {ledger_var!r}")
        self.inner = inner
        self.guarded = frozenset(guarded)
        self.ledger_var = ledger_var
        self.spec = _extend_spec(
            inner.spec, {}, self.guarded, {ledger_var}, set()
        )

    def _perceived(self, ctx: Ctx) -> int:
        total = 0
        for slot in self.inner.spec.entry_slots(self.ledger_var):
            total += ctx.vm.storage_read(ctx.frame, slot)
        return ctx.balance() - total

    def run(self, vm: VM, frame: CallFrame) -> tuple:
        fn = frame.function or "receive"
        if fn not in self.guarded:
            return self.inner.run(vm, frame)
        ctx = Ctx(vm, frame, self.spec)
        before = self._perceived(ctx) - frame.value
        out = self.inner.run(vm, frame)
        after = self._perceived(ctx)
        ctx.require(after == before, BALANCE_INVARIANT_ERROR)
        return out


def attach_guard(inner: Behavior, attachment: GuardAttachment) -> Behavior:
    if not attachment.functions:
        return inner
    if attachment.kind is GuardKind.COUNTER_GUARD:
        return CounterGuard(inner, attachment.functions)
    if attachment.ledger_var is None:
        raise ValueError("balance-delta guard needs a ledger variable")
    return BalanceDeltaGuard(inner, attachment.functions, attachment.ledger_var)


def init_counter_status(storage: dict[int, int]) -> None:
    """Constructor-time write putting the status slot at NOT_ENTERED."""
    storage[COUNTER_STATUS_SLOT] = NOT_ENTERED
