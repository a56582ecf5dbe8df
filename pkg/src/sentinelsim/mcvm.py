"""Deterministic message-call virtual machine.

Contracts are modeled as behaviors bound to accounts; the VM provides the
call semantics (regular / delegate / static), 32-byte-slot storage, gas
metering with warm/cold access pricing, transaction-level rollback, and a
complete ordered trace of everything that happened.

Execution model:

* A transaction opens a root frame on the target account and dispatches to
  the behavior bound to the frame's code address.
* Behaviors invoke VM primitives (`storage_read`, `storage_write`,
  `do_call`, `emit_log`) through the frame they were given.
* Every state mutation is journaled; a reverting frame rolls back exactly
  its own subtree, and a reverting transaction restores the input world
  bit for bit. The trace is never rolled back: it records what happened
  up to the revert.
* Logical time is one tick per trace event, reset at transaction start.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable

from ._keccak import keccak256

WORD_MOD = 1 << 256
ETH = 10**18

MAX_CALL_DEPTH = 64
DEFAULT_GAS_LIMIT = 30_000_000

PROBE_FUNCTION = "__probe"


def u256(value: int) -> int:
    """Truncate to an unsigned 256-bit word."""
    return value % WORD_MOD


class Address:
    """A 20-byte account identifier. The zero address means "none"."""

    __slots__ = ("raw",)

    def __init__(self, raw: bytes):
        if len(raw) != 20:
            raise ValueError(f"address must be 20 bytes, got {len(raw)}")
        object.__setattr__(self, "raw", raw)

    @classmethod
    def of(cls, name: str) -> "Address":
        """Deterministic address derived from a human-readable name."""
        return cls(keccak256(name.encode())[-20:])

    @classmethod
    def from_hex(cls, text: str) -> "Address":
        return cls(bytes.fromhex(text.removeprefix("0x")))

    @classmethod
    def from_word(cls, value: int) -> "Address":
        return cls(u256(value).to_bytes(32, "big")[-20:])

    @property
    def hex(self) -> str:
        return "0x" + self.raw.hex()

    @property
    def word(self) -> int:
        return int.from_bytes(self.raw, "big")

    def __setattr__(self, *_: Any) -> None:
        raise AttributeError("Address is immutable")

    def __eq__(self, other: Any) -> bool:
        return isinstance(other, Address) and self.raw == other.raw

    def __lt__(self, other: "Address") -> bool:
        return self.raw < other.raw

    def __hash__(self) -> int:
        return hash(self.raw)

    def __repr__(self) -> str:
        return f"Address({self.hex})"

    def __str__(self) -> str:
        return self.hex


ZERO_ADDRESS = Address(bytes(20))


def as_address(value: "Address | str | int") -> Address:
    if isinstance(value, Address):
        return value
    if isinstance(value, str):
        return Address.from_hex(value)
    return Address.from_word(value)


class CallKind(Enum):
    REGULAR_CALL = "regular"
    DELEGATE_CALL = "delegate"
    STATIC_CALL = "static"


class FrameStatus(Enum):
    OPEN = "open"
    SUCCESS = "success"
    REVERTED = "reverted"


class Revert(Exception):
    """Raised by behaviors or VM primitives to abort the current frame."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class OutOfGas(Exception):
    pass


@dataclass
class GasSchedule:
    """Gas cost model, EVM-mainnet-inspired. No refund accounting."""

    sload_cold: int = 2100
    sload_warm: int = 100
    sstore_zero_to_nonzero: int = 20000
    sstore_nonzero_to_nonzero: int = 2900  # also covers ->zero and same-value
    sstore_cold_surcharge: int = 2100
    account_access_cold: int = 2600
    account_access_warm: int = 100
    value_transfer_surcharge: int = 9000
    log_base: int = 375
    log_per_topic: int = 375
    probe_gas_cap: int = 1000


@dataclass
class Account:
    balance: int = 0
    storage: dict[int, int] = field(default_factory=dict)
    behavior: Any = None
    nonce: int = 0

    def clone(self) -> "Account":
        # behavior is shared code, not state
        return Account(self.balance, dict(self.storage), self.behavior, self.nonce)

    def state_equal(self, other: "Account") -> bool:
        return (
            self.balance == other.balance
            and self.storage == other.storage
            and self.nonce == other.nonce
        )


class WorldState:
    """All accounts. Mutated in place by the VM, rolled back via journal."""

    def __init__(self) -> None:
        self.accounts: dict[Address, Account] = {}

    def create_account(
        self, address: Address, balance: int = 0, behavior: Any = None
    ) -> Account:
        if address in self.accounts:
            raise ValueError(f"account {address} already exists")
        account = Account(balance=balance, behavior=behavior)
        self.accounts[address] = account
        return account

    def get(self, address: Address) -> Account | None:
        return self.accounts.get(address)

    def __contains__(self, address: Address) -> bool:
        return address in self.accounts

    def balance_of(self, address: Address) -> int:
        account = self.accounts.get(address)
        return account.balance if account else 0

    def total_value(self) -> int:
        return sum(a.balance for a in self.accounts.values())

    def clone(self) -> "WorldState":
        other = WorldState()
        other.accounts = {addr: acct.clone() for addr, acct in self.accounts.items()}
        return other

    def state_equal(self, other: "WorldState") -> bool:
        if set(self.accounts) != set(other.accounts):
            return False
        return all(
            acct.state_equal(other.accounts[addr])
            for addr, acct in self.accounts.items()
        )


# ---------------------------------------------------------------------------
# Trace events
# ---------------------------------------------------------------------------


@dataclass
class FrameEnter:
    time: int
    frame_id: int
    call: str
    caller: str
    code: str
    context: str
    function: str
    value: int
    static: bool
    gas_limit: int
    depth: int
    args: tuple = ()
    kind: str = "enter"


@dataclass
class FrameExit:
    time: int
    frame_id: int
    status: str
    gas_used: int
    reason: str | None
    kind: str = "exit"


@dataclass
class StorageReadEvent:
    time: int
    frame_id: int
    context: str
    slot: int
    value: int
    kind: str = "sread"


@dataclass
class StorageWriteEvent:
    time: int
    frame_id: int
    context: str
    slot: int
    old: int
    new: int
    kind: str = "swrite"


@dataclass
class ValueTransferEvent:
    time: int
    frame_id: int
    source: str
    target: str
    amount: int
    kind: str = "transfer"


@dataclass
class LogEvent:
    time: int
    frame_id: int
    topics: int
    kind: str = "log"


TraceEvent = (
    FrameEnter
    | FrameExit
    | StorageReadEvent
    | StorageWriteEvent
    | ValueTransferEvent
    | LogEvent
)


@dataclass
class FrameView:
    """A frame reconstructed from its enter/exit events."""

    frame_id: int
    call: str
    caller: str
    code: str
    context: str
    function: str
    value: int
    static: bool
    depth: int
    enter_time: int
    exit_time: int | None = None
    status: str = "open"
    reason: str | None = None
    gas_used: int = 0
    parent: int | None = None
    args: tuple = ()

    @property
    def succeeded(self) -> bool:
        return self.status == "success"


class ExecutionTrace:
    """Ordered event log of one transaction."""

    def __init__(self) -> None:
        self.events: list[TraceEvent] = []
        self._clock = 0

    def tick(self) -> int:
        t = self._clock
        self._clock += 1
        return t

    def append(self, event: TraceEvent) -> None:
        self.events.append(event)

    def frames(self) -> dict[int, FrameView]:
        """Reconstruct frames, with parents derived from bracket nesting."""
        views: dict[int, FrameView] = {}
        stack: list[int] = []
        for ev in self.events:
            if isinstance(ev, FrameEnter):
                views[ev.frame_id] = FrameView(
                    frame_id=ev.frame_id,
                    call=ev.call,
                    caller=ev.caller,
                    code=ev.code,
                    context=ev.context,
                    function=ev.function,
                    value=ev.value,
                    static=ev.static,
                    depth=ev.depth,
                    enter_time=ev.time,
                    parent=stack[-1] if stack else None,
                    args=ev.args,
                )
                stack.append(ev.frame_id)
            elif isinstance(ev, FrameExit):
                view = views[ev.frame_id]
                view.exit_time = ev.time
                view.status = ev.status
                view.reason = ev.reason
                view.gas_used = ev.gas_used
                if stack and stack[-1] == ev.frame_id:
                    stack.pop()
        return views

    def revert_reasons(self) -> list[str]:
        return [
            ev.reason
            for ev in self.events
            if isinstance(ev, FrameExit) and ev.reason is not None
        ]

    # -- export / import ---------------------------------------------------

    def export_jsonl(self) -> str:
        lines = []
        for ev in self.events:
            record = {"t": ev.time, "kind": ev.kind, "frame": ev.frame_id}
            if isinstance(ev, FrameEnter):
                record.update(
                    call=ev.call,
                    caller=ev.caller,
                    code=ev.code,
                    ctx=ev.context,
                    fn=ev.function,
                    value=ev.value,
                    static=ev.static,
                    gas_limit=ev.gas_limit,
                    depth=ev.depth,
                    args=list(ev.args),
                )
            elif isinstance(ev, FrameExit):
                record.update(status=ev.status, gas_used=ev.gas_used, reason=ev.reason)
            elif isinstance(ev, StorageReadEvent):
                record.update(ctx=ev.context, slot=hex(ev.slot), value=hex(ev.value))
            elif isinstance(ev, StorageWriteEvent):
                record.update(
                    ctx=ev.context, slot=hex(ev.slot), old=hex(ev.old), new=hex(ev.new)
                )
            elif isinstance(ev, ValueTransferEvent):
                record.update(src=ev.source, dst=ev.target, amount=ev.amount)
            elif isinstance(ev, LogEvent):
                record.update(topics=ev.topics)
            lines.append(json.dumps(record, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def parse_jsonl(cls, text: str) -> "ExecutionTrace":
        trace = cls()
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                kind = rec["kind"]
                if kind == "enter":
                    ev: TraceEvent = FrameEnter(
                        time=rec["t"],
                        frame_id=rec["frame"],
                        call=rec["call"],
                        caller=rec["caller"],
                        code=rec["code"],
                        context=rec["ctx"],
                        function=rec["fn"],
                        value=rec["value"],
                        static=rec["static"],
                        gas_limit=rec["gas_limit"],
                        depth=rec["depth"],
                        args=tuple(rec.get("args", ())),
                    )
                elif kind == "exit":
                    ev = FrameExit(
                        time=rec["t"],
                        frame_id=rec["frame"],
                        status=rec["status"],
                        gas_used=rec["gas_used"],
                        reason=rec["reason"],
                    )
                elif kind == "sread":
                    ev = StorageReadEvent(
                        time=rec["t"],
                        frame_id=rec["frame"],
                        context=rec["ctx"],
                        slot=int(rec["slot"], 16),
                        value=int(rec["value"], 16),
                    )
                elif kind == "swrite":
                    ev = StorageWriteEvent(
                        time=rec["t"],
                        frame_id=rec["frame"],
                        context=rec["ctx"],
                        slot=int(rec["slot"], 16),
                        old=int(rec["old"], 16),
                        new=int(rec["new"], 16),
                    )
                elif kind == "transfer":
                    ev = ValueTransferEvent(
                        time=rec["t"],
                        frame_id=rec["frame"],
                        source=rec["src"],
                        target=rec["dst"],
                        amount=rec["amount"],
                    )
                elif kind == "log":
                    ev = LogEvent(time=rec["t"], frame_id=rec["frame"], topics=rec["topics"])
                else:
                    raise KeyError(kind)
            except (KeyError, ValueError, TypeError) as exc:
                raise TraceFormatError(f"line {line_no}: {exc}") from exc
            trace.events.append(ev)
            trace._clock = max(trace._clock, ev.time + 1)
        return trace


class TraceFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Frames and results
# ---------------------------------------------------------------------------


@dataclass
class CallFrame:
    frame_id: int
    kind: CallKind
    caller: Address
    code_address: Address
    storage_context: Address
    value: int
    function: str
    args: tuple
    static_flag: bool
    gas_limit: int
    depth: int
    gas_used: int = 0
    enter_time: int = 0
    exit_time: int | None = None
    status: FrameStatus = FrameStatus.OPEN
    return_data: tuple = ()
    revert_reason: str | None = None

    @property
    def remaining_gas(self) -> int:
        return self.gas_limit - self.gas_used

    @property
    def open(self) -> bool:
        return self.status is FrameStatus.OPEN


@dataclass
class ExecResult:
    success: bool
    return_data: tuple = ()
    revert_reason: str | None = None
    gas_used: int = 0


class VM:
    """Single-threaded executor. Owns its world exclusively for the duration
    of each `execute_transaction` call; instances over disjoint worlds may
    run in parallel."""

    def __init__(self, schedule: GasSchedule | None = None):
        self.schedule = schedule or GasSchedule()
        self._world: WorldState | None = None
        self._trace: ExecutionTrace | None = None
        self._journal: list[tuple] = []
        self._warm_accounts: set[Address] = set()
        self._warm_slots: set[tuple[Address, int]] = set()
        self._next_frame_id = 0
        self._depth = 0

    # -- transaction entry ---------------------------------------------------

    def execute_transaction(
        self,
        world: WorldState,
        origin: Address,
        target: Address,
        function: str = "",
        args: tuple = (),
        value: int = 0,
        gas_limit: int = DEFAULT_GAS_LIMIT,
    ) -> tuple[WorldState, ExecutionTrace, ExecResult]:
        if gas_limit <= 0:
            raise ValueError("gas_limit must be positive")
        self._world = world
        self._trace = ExecutionTrace()
        self._journal = []
        # origin and target are pre-warmed, as in live access-list pricing
        self._warm_accounts = {origin, target}
        self._warm_slots = set()
        self._next_frame_id = 0
        self._depth = 0

        frame = self._open_frame(
            kind=CallKind.REGULAR_CALL,
            caller=origin,
            code_address=target,
            storage_context=target,
            value=value,
            function=function,
            args=args,
            static_flag=False,
            gas_limit=gas_limit,
        )
        checkpoint = len(self._journal)
        try:
            origin_account = world.get(origin)
            if origin_account is None or target not in world:
                raise Revert("no such account")
            if origin_account.balance < value:
                raise Revert("insufficient funds")
            self._bump_nonce(origin)
            if value:
                self._move_value(frame, origin, target, value)
            data = self._dispatch(frame)
            self._close_frame(frame, FrameStatus.SUCCESS, return_data=data)
            result = ExecResult(True, data, None, frame.gas_used)
        except (Revert, OutOfGas) as exc:
            self._rollback(checkpoint)
            reason = exc.reason if isinstance(exc, Revert) else "out of gas"
            if isinstance(exc, OutOfGas):
                frame.gas_used = frame.gas_limit
            self._close_frame(frame, FrameStatus.REVERTED, reason=reason)
            result = ExecResult(False, (), reason, frame.gas_used)
        trace = self._trace
        self._world = None
        self._trace = None
        return world, trace, result

    # -- primitives ----------------------------------------------------------

    def charge(self, frame: CallFrame, amount: int) -> None:
        frame.gas_used += amount
        if frame.gas_used > frame.gas_limit:
            raise OutOfGas()

    def storage_read(self, frame: CallFrame, slot: int) -> int:
        assert frame.open, "frame is closed"
        key = (frame.storage_context, slot)
        if key in self._warm_slots:
            self.charge(frame, self.schedule.sload_warm)
        else:
            self._warm_slots.add(key)
            self.charge(frame, self.schedule.sload_cold)
        account = self._account(frame.storage_context)
        value = account.storage.get(slot, 0)
        self._trace.append(
            StorageReadEvent(
                self._trace.tick(), frame.frame_id, frame.storage_context.hex, slot, value
            )
        )
        return value

    def storage_write(self, frame: CallFrame, slot: int, value: int) -> None:
        assert frame.open, "frame is closed"
        if frame.static_flag:
            raise Revert("static violation")
        value = u256(value)
        key = (frame.storage_context, slot)
        cost = 0
        if key not in self._warm_slots:
            self._warm_slots.add(key)
            cost += self.schedule.sstore_cold_surcharge
        account = self._account(frame.storage_context)
        old = account.storage.get(slot, 0)
        if old == 0 and value != 0:
            cost += self.schedule.sstore_zero_to_nonzero
        else:
            cost += self.schedule.sstore_nonzero_to_nonzero
        self.charge(frame, cost)
        self._journal.append(("storage", frame.storage_context, slot, old))
        if value == 0:
            account.storage.pop(slot, None)
        else:
            account.storage[slot] = value
        self._trace.append(
            StorageWriteEvent(
                self._trace.tick(),
                frame.frame_id,
                frame.storage_context.hex,
                slot,
                old,
                value,
            )
        )

    def emit_log(self, frame: CallFrame, topics: int = 0) -> None:
        assert frame.open, "frame is closed"
        if frame.static_flag:
            raise Revert("static violation")
        self.charge(frame, self.schedule.log_base + self.schedule.log_per_topic * topics)
        self._trace.append(LogEvent(self._trace.tick(), frame.frame_id, topics))

    def balance_of(self, address: Address) -> int:
        return self._world.balance_of(address)

    def do_call(
        self,
        parent: CallFrame,
        kind: CallKind,
        target: Address,
        function: str = "",
        args: tuple = (),
        value: int = 0,
        gas: int | None = None,
    ) -> ExecResult:
        assert parent.open, "parent frame is closed"
        if kind is not CallKind.REGULAR_CALL and value:
            raise ValueError(f"{kind.value} call cannot carry value")

        # account access is charged to the caller before anything else
        if target in self._warm_accounts:
            self.charge(parent, self.schedule.account_access_warm)
        else:
            self._warm_accounts.add(target)
            self.charge(parent, self.schedule.account_access_cold)
        if value:
            self.charge(parent, self.schedule.value_transfer_surcharge)

        remaining = parent.remaining_gas
        child_gas = remaining if gas is None else min(gas, remaining)

        static = parent.static_flag or kind is CallKind.STATIC_CALL
        if kind is CallKind.DELEGATE_CALL:
            caller, context, child_value = parent.caller, parent.storage_context, parent.value
        else:
            caller, context, child_value = parent.storage_context, target, value

        frame = self._open_frame(
            kind=kind,
            caller=caller,
            code_address=target,
            storage_context=context,
            value=child_value if kind is not CallKind.STATIC_CALL else 0,
            function=function,
            args=args,
            static_flag=static,
            gas_limit=child_gas,
        )
        checkpoint = len(self._journal)
        try:
            if frame.depth > MAX_CALL_DEPTH:
                raise Revert("call depth exceeded")
            if static and value:
                raise Revert("static violation")
            if kind is CallKind.REGULAR_CALL and value:
                source = parent.storage_context
                if self._world.balance_of(source) < value:
                    raise Revert("insufficient funds")
                self._move_value(frame, source, target, value)
            data = self._dispatch(frame)
            self._close_frame(frame, FrameStatus.SUCCESS, return_data=data)
            parent.gas_used += frame.gas_used
            if parent.gas_used > parent.gas_limit:
                raise OutOfGas()
            return ExecResult(True, data, None, frame.gas_used)
        except (Revert, OutOfGas) as exc:
            self._rollback(checkpoint)
            reason = exc.reason if isinstance(exc, Revert) else "out of gas"
            if isinstance(exc, OutOfGas):
                frame.gas_used = frame.gas_limit
            self._close_frame(frame, FrameStatus.REVERTED, reason=reason)
            parent.gas_used += frame.gas_used
            if parent.gas_used > parent.gas_limit:
                raise OutOfGas() from None
            return ExecResult(False, (), reason, frame.gas_used)

    def static_probe(self, parent: CallFrame) -> bool:
        """Detect a static context by attempting a log in a capped sub-frame.

        Returns True iff the attempt reverted. The caller pays the full gas
        cap on detection (worst case) and exactly the log cost otherwise.
        """
        cap = min(self.schedule.probe_gas_cap, parent.remaining_gas)
        frame = self._open_frame(
            kind=CallKind.REGULAR_CALL,
            caller=parent.storage_context,
            code_address=parent.code_address,
            storage_context=parent.storage_context,
            value=0,
            function=PROBE_FUNCTION,
            args=(),
            static_flag=parent.static_flag,
            gas_limit=cap,
        )
        try:
            self.emit_log(frame)
            self._close_frame(frame, FrameStatus.SUCCESS)
            self.charge(parent, frame.gas_used)
            return False
        except (Revert, OutOfGas):
            frame.gas_used = cap
            self._close_frame(frame, FrameStatus.REVERTED, reason="static violation")
            self.charge(parent, cap)
            return True

    # -- internals -----------------------------------------------------------

    def _account(self, address: Address) -> Account:
        account = self._world.get(address)
        if account is None:
            self._journal.append(("created", address))
            account = self._world.create_account(address)
        return account

    def _bump_nonce(self, address: Address) -> None:
        account = self._account(address)
        self._journal.append(("nonce", address, account.nonce))
        account.nonce += 1

    def _move_value(
        self, frame: CallFrame, source: Address, target: Address, amount: int
    ) -> None:
        src = self._account(source)
        dst = self._account(target)
        self._journal.append(("balance", source, src.balance))
        self._journal.append(("balance", target, dst.balance))
        src.balance -= amount
        dst.balance += amount
        self._trace.append(
            ValueTransferEvent(
                self._trace.tick(), frame.frame_id, source.hex, target.hex, amount
            )
        )

    def _rollback(self, checkpoint: int) -> None:
        while len(self._journal) > checkpoint:
            entry = self._journal.pop()
            tag = entry[0]
            if tag == "storage":
                _, address, slot, old = entry
                storage = self._world.accounts[address].storage
                if old == 0:
                    storage.pop(slot, None)
                else:
                    storage[slot] = old
            elif tag == "balance":
                _, address, old = entry
                self._world.accounts[address].balance = old
            elif tag == "nonce":
                _, address, old = entry
                self._world.accounts[address].nonce = old
            elif tag == "created":
                del self._world.accounts[entry[1]]

    def _open_frame(self, **kwargs: Any) -> CallFrame:
        frame = CallFrame(
            frame_id=self._next_frame_id, depth=self._depth, **kwargs
        )
        self._next_frame_id += 1
        self._depth += 1
        frame.enter_time = self._trace.tick()
        self._trace.append(
            FrameEnter(
                time=frame.enter_time,
                frame_id=frame.frame_id,
                call=frame.kind.value,
                caller=frame.caller.hex,
                code=frame.code_address.hex,
                context=frame.storage_context.hex,
                function=frame.function,
                value=frame.value,
                static=frame.static_flag,
                gas_limit=frame.gas_limit,
                depth=frame.depth,
                args=_json_safe_args(frame.args),
            )
        )
        return frame

    def _close_frame(
        self,
        frame: CallFrame,
        status: FrameStatus,
        return_data: tuple = (),
        reason: str | None = None,
    ) -> None:
        frame.status = status
        frame.return_data = return_data
        frame.revert_reason = reason
        frame.exit_time = self._trace.tick()
        self._depth -= 1
        self._trace.append(
            FrameExit(
                time=frame.exit_time,
                frame_id=frame.frame_id,
                status=status.value,
                gas_used=frame.gas_used,
                reason=reason,
            )
        )

    def _dispatch(self, frame: CallFrame) -> tuple:
        code_account = self._account(frame.code_address)
        behavior = code_account.behavior
        if behavior is None:
            return ()
        data = behavior.run(self, frame)
        return tuple(data) if data is not None else ()


def _json_safe_args(args: Iterable) -> tuple:
    out = []
    for a in args:
        if isinstance(a, Address):
            out.append(a.hex)
        else:
            out.append(a)
    return tuple(out)
