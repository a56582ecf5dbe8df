"""Contract behaviors: the interface the VM dispatches into, plus a template
library of victims, attackers, tokens, vaults, and pools covering the four
reentrancy families (single-function, cross-function, cross-contract, and
read-only). Each behavior declares per-function storage read/write sets that
the trace oracle checks against actual execution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from ._keccak import keccak256
from .mcvm import (
    ETH,
    Address,
    CallFrame,
    CallKind,
    ExecResult,
    PROBE_FUNCTION,
    Revert,
    VM,
    as_address,
    u256,
)


def mapping_slot(key: int, base_slot: int) -> int:
    """Storage slot of a mapping entry: keccak(key32 . base32), Solidity-style."""
    packed = u256(key).to_bytes(32, "big") + u256(base_slot).to_bytes(32, "big")
    return int.from_bytes(keccak256(packed), "big")


class BehaviorSpec:
    """Declared functions and per-function storage read/write sets.

    `slot_of` maps variable names to base slots. Mapping entries get derived
    slots, registered here as they are touched so that traces can be resolved
    back to variable names.
    """

    def __init__(
        self,
        functions: set[str],
        reads: dict[str, set[str]] | None = None,
        writes: dict[str, set[str]] | None = None,
        slot_of: dict[str, int] | None = None,
        catch_all: bool = False,
    ):
        self.functions = set(functions)
        self.reads = {fn: set(vs) for fn, vs in (reads or {}).items()}
        self.writes = {fn: set(vs) for fn, vs in (writes or {}).items()}
        self.slot_of = dict(slot_of or {})
        self.catch_all = catch_all
        self._entries: dict[int, tuple[str, int]] = {}
        self._base_of = {slot: var for var, slot in self.slot_of.items()}

    def slot_for(self, var: str, key: int | None = None) -> int:
        base = self.slot_of[var]
        if key is None:
            return base
        slot = mapping_slot(key, base)
        self._entries[slot] = (var, key)
        return slot

    def var_of(self, slot: int) -> str | None:
        if slot in self._base_of:
            return self._base_of[slot]
        entry = self._entries.get(slot)
        return entry[0] if entry else None

    def entry_slots(self, var: str) -> list[int]:
        """All derived slots registered so far for a mapping variable."""
        return [slot for slot, (v, _) in self._entries.items() if v == var]

    def reads_of(self, fn: str) -> set[str]:
        return self.reads.get(fn, self.reads.get("*", set()))

    def writes_of(self, fn: str) -> set[str]:
        return self.writes.get(fn, self.writes.get("*", set()))


class Ctx:
    """Execution sugar for one frame: message fields, named-variable storage
    access, and calls with Solidity-style success/propagation semantics."""

    def __init__(self, vm: VM, frame: CallFrame, spec: BehaviorSpec):
        self.vm = vm
        self.frame = frame
        self.spec = spec

    @property
    def sender(self) -> Address:
        return self.frame.caller

    @property
    def value(self) -> int:
        return self.frame.value

    @property
    def self_address(self) -> Address:
        return self.frame.storage_context

    def read(self, var: str, key: int | Address | None = None) -> int:
        return self.vm.storage_read(self.frame, self._slot(var, key))

    def write(self, var: str, value: int, key: int | Address | None = None) -> None:
        self.vm.storage_write(self.frame, self._slot(var, key), value)

    def _slot(self, var: str, key: int | Address | None) -> int:
        if isinstance(key, Address):
            key = key.word
        return self.spec.slot_for(var, key)

    def balance(self, address: Address | None = None) -> int:
        return self.vm.balance_of(address if address is not None else self.self_address)

    def require(self, condition: bool, reason: str) -> None:
        if not condition:
            raise Revert(reason)

    def revert(self, reason: str) -> None:
        raise Revert(reason)

    def log(self, topics: int = 0) -> None:
        self.vm.emit_log(self.frame, topics)

    def call(
        self,
        target: Address,
        function: str = "",
        args: tuple = (),
        value: int = 0,
        gas: int | None = None,
    ) -> ExecResult:
        return self.vm.do_call(
            self.frame, CallKind.REGULAR_CALL, target, function, args, value, gas
        )

    def static_call(
        self, target: Address, function: str, args: tuple = ()
    ) -> ExecResult:
        return self.vm.do_call(self.frame, CallKind.STATIC_CALL, target, function, args)

    def delegate_call(
        self, target: Address, function: str, args: tuple = (), gas: int | None = None
    ) -> ExecResult:
        return self.vm.do_call(
            self.frame, CallKind.DELEGATE_CALL, target, function, args, 0, gas
        )

    def must(self, result: ExecResult) -> tuple:
        """Propagate a failed call verbatim, like a Solidity high-level call."""
        if not result.success:
            raise Revert(result.revert_reason or "call failed")
        return result.return_data

    def transfer(self, target: Address, amount: int) -> ExecResult:
        return self.call(target, "", (), amount)


class Behavior:
    """Base contract behavior: dispatches frame.function to fn_<name> methods.

    An empty function name dispatches to fn_receive. Unknown functions revert
    unless the spec is marked catch_all, in which case `fallback` handles them.
    """

    spec: BehaviorSpec

    def run(self, vm: VM, frame: CallFrame) -> tuple:
        ctx = Ctx(vm, frame, self.spec)
        name = frame.function or "receive"
        handler: Callable[[Ctx], tuple | None] | None = getattr(
            self, "fn_" + name, None
        )
        if handler is None:
            if self.spec.catch_all:
                return self.fallback(ctx) or ()
            raise Revert("no such function")
        return handler(ctx) or ()

    def fallback(self, ctx: Ctx) -> tuple:
        raise Revert("no such function")


@dataclass
class BehaviorTemplate:
    """Named, parameterized recipe producing role -> Behavior instances."""

    name: str
    params: dict
    builder: Callable[[dict], dict[str, Behavior]]

    def build(self) -> dict[str, Behavior]:
        return self.builder(dict(self.params))


# ---------------------------------------------------------------------------
# Victim: deposit/withdraw bank (single-function family)
# ---------------------------------------------------------------------------


class Bank(Behavior):
    """Ledger bank. With deferred state update the ledger is zeroed after the
    outgoing send (the classic vulnerable ordering); the safe variant zeroes
    before sending (checks-effects-interactions)."""

    def __init__(self, defer_state_update: bool = True):
        self.defer_state_update = defer_state_update
        self.spec = BehaviorSpec(
            functions={"deposit", "withdraw", "balance_of"},
            reads={"withdraw": {"ledger"}, "balance_of": {"ledger"}, "deposit": {"ledger"}},
            writes={"deposit": {"ledger"}, "withdraw": {"ledger"}},
            slot_of={"ledger": 0},
        )

    def fn_deposit(self, ctx: Ctx) -> tuple:
        ctx.require(ctx.value > 0, "Please deposit some ETH")
        ctx.write("ledger", ctx.read("ledger", ctx.sender) + ctx.value, ctx.sender)
        return ()

    def fn_withdraw(self, ctx: Ctx) -> tuple:
        bal = ctx.read("ledger", ctx.sender)
        ctx.require(bal > 0, "the user did not deposit that amount in this contract")
        if self.defer_state_update:
            sent = ctx.transfer(ctx.sender, bal)
            ctx.require(sent.success, "Failed to send Ether")
            ctx.write("ledger", 0, ctx.sender)
        else:
            ctx.write("ledger", 0, ctx.sender)
            sent = ctx.transfer(ctx.sender, bal)
            ctx.require(sent.success, "Failed to send Ether")
        return ()

    def fn_balance_of(self, ctx: Ctx) -> tuple:
        return (ctx.read("ledger", as_address(ctx.frame.args[0])),)


class DrainAttacker(Behavior):
    """Deposits a stake, withdraws, and re-enters withdraw from receive()
    while the victim still holds more than the threshold."""

    def __init__(self, victim: Address, threshold: int):
        self.victim = victim
        self.threshold = threshold
        self.spec = BehaviorSpec(functions={"attack", "receive"})

    def fn_attack(self, ctx: Ctx) -> tuple:
        ctx.require(ctx.value > 0, "Send the required attack amount")
        ctx.must(ctx.call(self.victim, "deposit", (), ctx.value))
        ctx.must(ctx.call(self.victim, "withdraw"))
        return ()

    def fn_receive(self, ctx: Ctx) -> tuple:
        if ctx.balance(self.victim) > self.threshold:
            ctx.must(ctx.call(self.victim, "withdraw"))
        return ()


# ---------------------------------------------------------------------------
# Cross-function: ledger shuffle through transfer()
# ---------------------------------------------------------------------------


class SharedLedgerBank(Bank):
    """Bank plus an internal transfer() sharing the ledger with withdraw()."""

    def __init__(self):
        super().__init__(defer_state_update=True)
        self.spec = BehaviorSpec(
            functions={"deposit", "withdraw", "transfer", "balance_of"},
            reads={
                "deposit": {"ledger"},
                "withdraw": {"ledger"},
                "transfer": {"ledger"},
                "balance_of": {"ledger"},
            },
            writes={"deposit": {"ledger"}, "withdraw": {"ledger"}, "transfer": {"ledger"}},
            slot_of={"ledger": 0},
        )

    def fn_transfer(self, ctx: Ctx) -> tuple:
        to = as_address(ctx.frame.args[0])
        amount = ctx.frame.args[1]
        if amount == 0:
            return ()
        have = ctx.read("ledger", ctx.sender)
        ctx.require(have >= amount, "insufficient ledger balance")
        ctx.write("ledger", have - amount, ctx.sender)
        ctx.write("ledger", ctx.read("ledger", to) + amount, to)
        return ()


class ShuffleAttacker(Behavior):
    """During the withdraw payout, moves the still-credited ledger balance to
    an accomplice, who cashes out in a later transaction."""

    def __init__(self, victim: Address, accomplice: Address, stake: int):
        self.victim = victim
        self.accomplice = accomplice
        self.stake = stake
        self.spec = BehaviorSpec(functions={"attack", "receive"})

    def fn_attack(self, ctx: Ctx) -> tuple:
        ctx.require(ctx.value > 0, "Send the required attack amount")
        ctx.must(ctx.call(self.victim, "deposit", (), ctx.value))
        ctx.must(ctx.call(self.victim, "withdraw"))
        return ()

    def fn_receive(self, ctx: Ctx) -> tuple:
        if ctx.sender == self.victim:
            ctx.must(ctx.call(self.victim, "transfer", (self.accomplice, self.stake)))
        return ()


class Accomplice(Behavior):
    """Receives shuffled credit and ETH; a plain cash-out endpoint."""

    def __init__(self):
        self.spec = BehaviorSpec(functions={"receive", "on_shares_burned"})

    def fn_receive(self, ctx: Ctx) -> tuple:
        return ()

    def fn_on_shares_burned(self, ctx: Ctx) -> tuple:
        return ()


# ---------------------------------------------------------------------------
# Cross-function: stale aggregate feeding a bonus claim
# ---------------------------------------------------------------------------


class BonusVault(Behavior):
    """Ledger-correct withdrawals, but the total_shares aggregate is updated
    after the payout call, and snapshot_bonus() prices bonuses off it. The
    per-entry ledger stays consistent at every step, so only the aggregate is
    exploitable."""

    def __init__(self, bonus_rate_bps: int):
        self.bonus_rate_bps = bonus_rate_bps
        self.spec = BehaviorSpec(
            functions={
                "deposit",
                "withdraw",
                "snapshot_bonus",
                "claim_bonus",
                "balance_of",
                "total_shares",
            },
            reads={
                "deposit": {"ledger", "total_shares"},
                "withdraw": {"ledger", "total_shares"},
                "snapshot_bonus": {"total_shares", "bonus"},
                "claim_bonus": {"bonus", "ledger"},
                "balance_of": {"ledger"},
                "total_shares": {"total_shares"},
            },
            writes={
                "deposit": {"ledger", "total_shares"},
                "withdraw": {"ledger", "total_shares"},
                "snapshot_bonus": {"bonus"},
                "claim_bonus": {"bonus", "ledger"},
            },
            slot_of={"ledger": 0, "total_shares": 1, "bonus": 2},
        )

    def fn_deposit(self, ctx: Ctx) -> tuple:
        ctx.require(ctx.value > 0, "Please deposit some ETH")
        ctx.write("ledger", ctx.read("ledger", ctx.sender) + ctx.value, ctx.sender)
        ctx.write("total_shares", ctx.read("total_shares") + ctx.value)
        return ()

    def fn_withdraw(self, ctx: Ctx) -> tuple:
        bal = ctx.read("ledger", ctx.sender)
        ctx.require(bal > 0, "the user did not deposit that amount in this contract")
        ctx.write("ledger", 0, ctx.sender)
        sent = ctx.transfer(ctx.sender, bal)
        ctx.require(sent.success, "Failed to send Ether")
        # aggregate settles only after the external interaction
        ctx.write("total_shares", ctx.read("total_shares") - bal)
        return ()

    def fn_snapshot_bonus(self, ctx: Ctx) -> tuple:
        total = ctx.read("total_shares")
        earned = total * self.bonus_rate_bps // 10_000
        ctx.write("bonus", ctx.read("bonus", ctx.sender) + earned, ctx.sender)
        return (earned,)

    def fn_claim_bonus(self, ctx: Ctx) -> tuple:
        amount = ctx.read("bonus", ctx.sender)
        if amount == 0:
            return (0,)
        ctx.write("bonus", 0, ctx.sender)
        ctx.write("ledger", ctx.read("ledger", ctx.sender) + amount, ctx.sender)
        return (amount,)

    def fn_balance_of(self, ctx: Ctx) -> tuple:
        return (ctx.read("ledger", as_address(ctx.frame.args[0])),)

    def fn_total_shares(self, ctx: Ctx) -> tuple:
        return (ctx.read("total_shares"),)


class BonusAttacker(Behavior):
    """Re-enters snapshot_bonus() while withdraw() has paid out but not yet
    settled the aggregate, locking in an inflated bonus."""

    def __init__(self, victim: Address):
        self.victim = victim
        self.spec = BehaviorSpec(functions={"attack", "receive"})

    def fn_attack(self, ctx: Ctx) -> tuple:
        ctx.require(ctx.value > 0, "Send the required attack amount")
        ctx.must(ctx.call(self.victim, "deposit", (), ctx.value))
        ctx.must(ctx.call(self.victim, "withdraw"))
        return ()

    def fn_receive(self, ctx: Ctx) -> tuple:
        if ctx.sender == self.victim:
            ctx.must(ctx.call(self.victim, "snapshot_bonus"))
        return ()


# ---------------------------------------------------------------------------
# Read-only family: vault totals read statically by a reward pool
# ---------------------------------------------------------------------------


class AssetVault(Behavior):
    """Holds deposits and a total_assets aggregate that is decremented only
    after the payout send, leaving a stale window visible to view calls."""

    def __init__(self):
        self.spec = BehaviorSpec(
            functions={"deposit", "withdraw", "total_assets", "balance_of"},
            reads={
                "deposit": {"ledger", "total_assets"},
                "withdraw": {"ledger", "total_assets"},
                "total_assets": {"total_assets"},
                "balance_of": {"ledger"},
            },
            writes={
                "deposit": {"ledger", "total_assets"},
                "withdraw": {"ledger", "total_assets"},
            },
            slot_of={"ledger": 0, "total_assets": 1},
        )

    def fn_deposit(self, ctx: Ctx) -> tuple:
        ctx.require(ctx.value > 0, "Please deposit some ETH")
        ctx.write("ledger", ctx.read("ledger", ctx.sender) + ctx.value, ctx.sender)
        ctx.write("total_assets", ctx.read("total_assets") + ctx.value)
        return ()

    def fn_withdraw(self, ctx: Ctx) -> tuple:
        bal = ctx.read("ledger", ctx.sender)
        ctx.require(bal > 0, "the user did not deposit that amount in this contract")
        sent = ctx.transfer(ctx.sender, bal)
        ctx.require(sent.success, "Failed to send Ether")
        ctx.write("ledger", 0, ctx.sender)
        ctx.write("total_assets", ctx.read("total_assets") - bal)
        return ()

    def fn_total_assets(self, ctx: Ctx) -> tuple:
        return (ctx.read("total_assets"),)

    def fn_balance_of(self, ctx: Ctx) -> tuple:
        return (ctx.read("ledger", as_address(ctx.frame.args[0])),)


class RewardPool(Behavior):
    """Prices rewards off the vault's total_assets view, queried statically.
    Rewards accrue as claims and pay out from the pool's own funds."""

    def __init__(self, vault: Address, reward_rate_bps: int):
        self.vault = vault
        self.reward_rate_bps = reward_rate_bps
        self.spec = BehaviorSpec(
            functions={"get_reward", "claim_reward"},
            reads={"get_reward": {"rewards"}, "claim_reward": {"rewards"}},
            writes={"get_reward": {"rewards"}, "claim_reward": {"rewards"}},
            slot_of={"rewards": 0},
        )

    def fn_get_reward(self, ctx: Ctx) -> tuple:
        total = ctx.must(ctx.static_call(self.vault, "total_assets"))[0]
        earned = total * self.reward_rate_bps // 10_000
        ctx.write("rewards", ctx.read("rewards", ctx.sender) + earned, ctx.sender)
        return (earned,)

    def fn_claim_reward(self, ctx: Ctx) -> tuple:
        amount = ctx.read("rewards", ctx.sender)
        if amount == 0:
            return (0,)
        ctx.write("rewards", 0, ctx.sender)
        sent = ctx.transfer(ctx.sender, amount)
        ctx.require(sent.success, "Failed to send Ether")
        return (amount,)


class StaleReadAttacker(Behavior):
    """Harvests pool rewards mid-withdraw, while the vault total is stale."""

    def __init__(self, victim: Address, pool: Address):
        self.victim = victim
        self.pool = pool
        self.spec = BehaviorSpec(functions={"attack", "receive"})

    def fn_attack(self, ctx: Ctx) -> tuple:
        ctx.require(ctx.value > 0, "Send the required attack amount")
        ctx.must(ctx.call(self.victim, "deposit", (), ctx.value))
        ctx.must(ctx.call(self.victim, "withdraw"))
        return ()

    def fn_receive(self, ctx: Ctx) -> tuple:
        if ctx.sender == self.victim:
            ctx.must(ctx.call(self.pool, "get_reward"))
        return ()


# ---------------------------------------------------------------------------
# Cross-contract: vault redeeming through a share token with a burn hook
# ---------------------------------------------------------------------------


class ShareVault(Behavior):
    """Pays redemptions against a separate share token. Trusts the amount the
    token reports. The canonical ordering burns first and pays after; the
    pay_before_burn variant reads the balance, pays, then burns, which is the
    other plausible step order between the two contracts."""

    def __init__(self, token: Address, pay_before_burn: bool = False):
        self.token = token
        self.pay_before_burn = pay_before_burn
        self.spec = BehaviorSpec(functions={"withdraw"})

    def fn_withdraw(self, ctx: Ctx) -> tuple:
        if self.pay_before_burn:
            amount = ctx.must(ctx.call(self.token, "shares_of", (ctx.sender,)))[0]
            ctx.require(amount > 0, "no shares")
            sent = ctx.transfer(ctx.sender, amount)
            ctx.require(sent.success, "Failed to send Ether")
            ctx.must(ctx.call(self.token, "burn_all", (ctx.sender,)))
            return (amount,)
        burned = ctx.must(ctx.call(self.token, "burn_all", (ctx.sender,)))[0]
        ctx.require(burned > 0, "no shares")
        sent = ctx.transfer(ctx.sender, burned)
        ctx.require(sent.success, "Failed to send Ether")
        return (burned,)


class ShareToken(Behavior):
    """Share ledger with a holder hook fired on burn. The hook runs between
    the balance read and the zeroing write, so a holder can still move shares
    while the burn is in flight."""

    def __init__(self, minter: Address):
        self.minter = minter
        self.spec = BehaviorSpec(
            functions={"mint", "burn_all", "transfer_shares", "shares_of"},
            reads={
                "mint": {"shares"},
                "burn_all": {"shares"},
                "transfer_shares": {"shares"},
                "shares_of": {"shares"},
            },
            writes={
                "mint": {"shares"},
                "burn_all": {"shares"},
                "transfer_shares": {"shares"},
            },
            slot_of={"shares": 0},
        )

    def fn_mint(self, ctx: Ctx) -> tuple:
        ctx.require(ctx.sender == self.minter, "not minter")
        to = as_address(ctx.frame.args[0])
        amount = ctx.frame.args[1]
        ctx.write("shares", ctx.read("shares", to) + amount, to)
        return ()

    def fn_burn_all(self, ctx: Ctx) -> tuple:
        holder = as_address(ctx.frame.args[0])
        amount = ctx.read("shares", holder)
        if amount == 0:
            return (0,)
        ctx.must(ctx.call(holder, "on_shares_burned"))
        ctx.write("shares", 0, holder)
        return (amount,)

    def fn_transfer_shares(self, ctx: Ctx) -> tuple:
        to = as_address(ctx.frame.args[0])
        amount = ctx.frame.args[1]
        have = ctx.read("shares", ctx.sender)
        ctx.require(have >= amount, "insufficient shares")
        ctx.write("shares", have - amount, ctx.sender)
        ctx.write("shares", ctx.read("shares", to) + amount, to)
        return ()

    def fn_shares_of(self, ctx: Ctx) -> tuple:
        return (ctx.read("shares", as_address(ctx.frame.args[0])),)


class BurnHookAttacker(Behavior):
    """From the burn hook, moves the not-yet-burned shares to an accomplice;
    the vault still pays the cached amount and the accomplice redeems again."""

    def __init__(self, vault: Address, token: Address, accomplice: Address, stake: int):
        self.vault = vault
        self.token = token
        self.accomplice = accomplice
        self.stake = stake
        self.spec = BehaviorSpec(functions={"attack", "receive", "on_shares_burned"})

    def fn_attack(self, ctx: Ctx) -> tuple:
        ctx.must(ctx.call(self.vault, "withdraw"))
        return ()

    def fn_on_shares_burned(self, ctx: Ctx) -> tuple:
        ctx.must(ctx.call(self.token, "transfer_shares", (self.accomplice, self.stake)))
        return ()

    def fn_receive(self, ctx: Ctx) -> tuple:
        return ()


# ---------------------------------------------------------------------------
# Template registry
# ---------------------------------------------------------------------------


def make_victim_bank(params: dict | None = None) -> BehaviorTemplate:
    params = {"defer_state_update": True, **(params or {})}
    return BehaviorTemplate(
        "victim_bank",
        params,
        lambda p: {"main": Bank(defer_state_update=p["defer_state_update"])},
    )


def make_attacker_sfr(params: dict) -> BehaviorTemplate:
    return BehaviorTemplate(
        "attacker_sfr",
        params,
        lambda p: {"main": DrainAttacker(as_address(p["victim"]), p["threshold"])},
    )


def make_cfr_pair(params: dict) -> BehaviorTemplate:
    return BehaviorTemplate(
        "cfr_pair",
        params,
        lambda p: {
            "victim": SharedLedgerBank(),
            "attacker": ShuffleAttacker(
                as_address(p["victim"]), as_address(p["accomplice"]), p["stake"]
            ),
            "accomplice": Accomplice(),
        },
    )


def make_bonus_pair(params: dict) -> BehaviorTemplate:
    return BehaviorTemplate(
        "bonus_pair",
        params,
        lambda p: {
            "victim": BonusVault(bonus_rate_bps=p["bonus_rate_bps"]),
            "attacker": BonusAttacker(as_address(p["victim"])),
        },
    )


def make_ror_pair(params: dict) -> BehaviorTemplate:
    return BehaviorTemplate(
        "ror_pair",
        params,
        lambda p: {
            "victim": AssetVault(),
            "pool": RewardPool(as_address(p["victim"]), p["reward_rate_bps"]),
            "attacker": StaleReadAttacker(as_address(p["victim"]), as_address(p["pool"])),
        },
    )


def make_ccr_pair(params: dict) -> BehaviorTemplate:
    return BehaviorTemplate(
        "ccr_pair",
        params,
        lambda p: {
            "vault": ShareVault(
                as_address(p["token"]), pay_before_burn=p.get("pay_before_burn", False)
            ),
            "token": ShareToken(as_address(p["minter"])),
            "attacker": BurnHookAttacker(
                as_address(p["vault"]),
                as_address(p["token"]),
                as_address(p["accomplice"]),
                p["stake"],
            ),
            "accomplice": Accomplice(),
        },
    )


TEMPLATES: dict[str, Callable[[dict], BehaviorTemplate]] = {
    "victim_bank": lambda p: make_victim_bank(p),
    "attacker_sfr": make_attacker_sfr,
    "cfr_pair": make_cfr_pair,
    "bonus_pair": make_bonus_pair,
    "ror_pair": make_ror_pair,
    "ccr_pair": make_ccr_pair,
}
