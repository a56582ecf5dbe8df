"""Proxy-based reentrancy guard: a catch-all proxy that intercepts every call
to an implementation contract, runs a dual-mode guard before forwarding via
delegatecall, and cleans up afterwards; plus the external lock registry that
coordinates the high-security mode across all proxies of a domain.

Storage layout: the proxy keeps its configuration in dedicated slots derived
by hashing descriptive labels, far away from the sequential slots an
implementation allocates, so the two can never collide.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from ._keccak import keccak256
from .behaviors import Behavior, BehaviorSpec, Ctx
from .mcvm import (
    Address,
    CallFrame,
    PROBE_FUNCTION,
    Revert,
    VM,
    WorldState,
    as_address,
)

OPTIMIZED_MODE_ERROR = "Reentrancy Error (Optimized Mode)"
HIGH_SECURITY_MODE_ERROR = "Reentrancy Error (High-Security Mode)"
STATIC_MODE_ERROR = "Reentrancy Error (Static Mode)"

# Nonzero encodings keep the lock slots away from the costly zero<->nonzero
# SSTORE transitions. The static flag carries the mode in its "allowed" value
# so the static path can decide on a single load whether the registry must
# also be consulted.
UNLOCKED, LOCKED = 1, 2
STATIC_ALLOWED, STATIC_DISALLOWED, STATIC_ALLOWED_VIA_REGISTRY = 1, 2, 3
MODE_OPTIMIZED_WORD, MODE_HIGH_SECURITY_WORD = 1, 2

LOCK_EVENT_TOPICS = 1  # lock-activated log entries carry one topic


class GuardMode(Enum):
    OPTIMIZED = "optimized"
    HIGH_SECURITY = "high-security"

    @property
    def word(self) -> int:
        return MODE_OPTIMIZED_WORD if self is GuardMode.OPTIMIZED else MODE_HIGH_SECURITY_WORD

    @classmethod
    def from_word(cls, word: int) -> "GuardMode":
        return cls.HIGH_SECURITY if word == MODE_HIGH_SECURITY_WORD else cls.OPTIMIZED


def derive_slot(label: str) -> int:
    """Slot key for a descriptive label: its Keccak-256 digest as a word."""
    if not label:
        raise ValueError("label must be non-empty")
    return int.from_bytes(keccak256(label.encode("ascii")), "big")


PROXY_SLOT_LABELS = {
    "implementation": "sentinel.proxy.implementation",
    "mode": "sentinel.proxy.mode",
    "lock_status": "sentinel.proxy.lockStatus",
    "static_call_allowed": "sentinel.proxy.staticCallAllowed",
    "lock_registry": "sentinel.proxy.lockRegistry",
    "domain_id": "sentinel.proxy.domainId",
    "admin": "sentinel.proxy.admin",
}


@dataclass(frozen=True)
class ProxyConfig:
    """The dedicated slot keys, one per configuration variable."""

    implementation_slot: int = derive_slot(PROXY_SLOT_LABELS["implementation"])
    mode_slot: int = derive_slot(PROXY_SLOT_LABELS["mode"])
    lock_status_slot: int = derive_slot(PROXY_SLOT_LABELS["lock_status"])
    static_call_allowed_slot: int = derive_slot(PROXY_SLOT_LABELS["static_call_allowed"])
    lock_registry_slot: int = derive_slot(PROXY_SLOT_LABELS["lock_registry"])
    domain_id_slot: int = derive_slot(PROXY_SLOT_LABELS["domain_id"])
    admin_slot: int = derive_slot(PROXY_SLOT_LABELS["admin"])


PROXY_CONFIG = ProxyConfig()

_PROXY_VARS = {name: derive_slot(label) for name, label in PROXY_SLOT_LABELS.items()}


def _proxy_spec() -> BehaviorSpec:
    guard_vars = set(_PROXY_VARS)
    return BehaviorSpec(
        functions={"upgradeTo", "setMode", PROBE_FUNCTION},
        reads={"*": guard_vars},
        writes={"*": guard_vars},
        slot_of=dict(_PROXY_VARS),
        catch_all=True,
    )


class SentinelProxy(Behavior):
    """Universal interception in front of one implementation account.

    Every incoming call is classified by a static-context probe, gated by the
    guard selected in the mode slot (or by the static-allowed flag for static
    calls), forwarded to the implementation via delegatecall in the proxy's
    own storage context, and followed by lock cleanup before the result is
    propagated.
    """

    def __init__(self) -> None:
        self.spec = _proxy_spec()

    def run(self, vm: VM, frame: CallFrame) -> tuple:
        ctx = Ctx(vm, frame, self.spec)
        fn = frame.function
        if fn == PROBE_FUNCTION:
            ctx.log()
            return ()
        if fn == "upgradeTo":
            return self._admin_upgrade(ctx)
        if fn == "setMode":
            return self._admin_set_mode(ctx)
        return self._fallback(ctx)

    # -- main execution flow -------------------------------------------------

    def _fallback(self, ctx: Ctx) -> tuple:
        is_static = ctx.vm.static_probe(ctx.frame)
        mode: GuardMode | None = None
        if not is_static:
            mode = GuardMode.from_word(ctx.read("mode"))
            if mode is GuardMode.HIGH_SECURITY:
                self._high_security_guard(ctx)
            else:
                self._optimized_guard(ctx)
        else:
            flag = ctx.read("static_call_allowed")
            if flag == STATIC_DISALLOWED:
                ctx.revert(STATIC_MODE_ERROR)
            if flag == STATIC_ALLOWED_VIA_REGISTRY:
                self._require_registry_static_allowed(ctx)

        impl_word = ctx.read("implementation")
        ctx.require(impl_word != 0, "not initialized")
        result = ctx.delegate_call(
            Address.from_word(impl_word), ctx.frame.function, ctx.frame.args
        )

        if not is_static:
            self._post_cleanup(ctx, mode)

        if result.success:
            return result.return_data
        raise Revert(result.revert_reason or "delegatecall failed")

    def _optimized_guard(self, ctx: Ctx) -> None:
        ctx.require(ctx.read("lock_status") == UNLOCKED, OPTIMIZED_MODE_ERROR)
        ctx.write("lock_status", LOCKED)
        # static calls stay rejected while the lock is held
        ctx.write("static_call_allowed", STATIC_DISALLOWED)

    def _high_security_guard(self, ctx: Ctx) -> None:
        domain = ctx.read("domain_id")
        registry_word = ctx.read("lock_registry")
        ctx.require(registry_word != 0, "registry unset")
        registry = Address.from_word(registry_word)
        locked = ctx.must(ctx.call(registry, "is_locked", (domain,)))[0]
        ctx.require(not locked, HIGH_SECURITY_MODE_ERROR)
        ctx.must(ctx.call(registry, "lock", (domain,)))
        ctx.write("static_call_allowed", STATIC_DISALLOWED)
        ctx.log(topics=LOCK_EVENT_TOPICS)

    def _require_registry_static_allowed(self, ctx: Ctx) -> None:
        domain = ctx.read("domain_id")
        registry_word = ctx.read("lock_registry")
        ctx.require(registry_word != 0, "registry unset")
        allowed = ctx.must(
            ctx.static_call(Address.from_word(registry_word), "is_static_allowed", (domain,))
        )[0]
        ctx.require(bool(allowed), STATIC_MODE_ERROR)

    def _post_cleanup(self, ctx: Ctx, mode: GuardMode) -> None:
        if mode is GuardMode.HIGH_SECURITY:
            domain = ctx.read("domain_id")
            registry = Address.from_word(ctx.read("lock_registry"))
            ctx.must(ctx.call(registry, "unlock", (domain,)))
            ctx.write("static_call_allowed", STATIC_ALLOWED_VIA_REGISTRY)
        else:
            ctx.write("lock_status", UNLOCKED)
            ctx.write("static_call_allowed", STATIC_ALLOWED)

    # -- admin ---------------------------------------------------------------

    def _require_admin(self, ctx: Ctx) -> None:
        ctx.require(ctx.sender.word == ctx.read("admin"), "not admin")

    def _admin_upgrade(self, ctx: Ctx) -> tuple:
        self._require_admin(ctx)
        ctx.write("implementation", as_address(ctx.frame.args[0]).word)
        return ()

    def _admin_set_mode(self, ctx: Ctx) -> tuple:
        self._require_admin(ctx)
        mode = GuardMode(ctx.frame.args[0])
        ctx.write("mode", mode.word)
        ctx.write(
            "static_call_allowed",
            STATIC_ALLOWED_VIA_REGISTRY
            if mode is GuardMode.HIGH_SECURITY
            else STATIC_ALLOWED,
        )
        return ()


# ---------------------------------------------------------------------------
# Lock registry
# ---------------------------------------------------------------------------

REGISTRY_VARS = {"locked": 0, "locker": 1, "static_allowed": 2}


def _registry_spec() -> BehaviorSpec:
    return BehaviorSpec(
        functions={"register", "lock", "unlock", "is_locked", "is_static_allowed"},
        reads={
            "register": {"locked"},
            "lock": {"locked", "locker", "static_allowed"},
            "unlock": {"locker", "locked", "static_allowed"},
            "is_locked": {"locked"},
            "is_static_allowed": {"static_allowed"},
        },
        writes={
            "register": {"locked", "static_allowed"},
            "lock": {"locked", "locker", "static_allowed"},
            "unlock": {"locked", "locker", "static_allowed"},
        },
        slot_of=dict(REGISTRY_VARS),
    )


class LockRegistry(Behavior):
    """Global per-domain mutex table. Each registered domain holds a locked
    flag, the locker address, and a static-allowed flag; one held lock covers
    every contract of the domain. Anyone may lock a free domain; only the
    recorded locker may unlock."""

    def __init__(self) -> None:
        self.spec = _registry_spec()

    def fn_register(self, ctx: Ctx) -> tuple:
        domain = ctx.frame.args[0]
        if ctx.read("locked", domain) == 0:
            ctx.write("locked", UNLOCKED, domain)
            ctx.write("static_allowed", STATIC_ALLOWED, domain)
        return ()

    def fn_lock(self, ctx: Ctx) -> tuple:
        domain = ctx.frame.args[0]
        ctx.require(ctx.read("locked", domain) != LOCKED, "domain locked")
        ctx.write("locked", LOCKED, domain)
        ctx.write("locker", ctx.sender.word, domain)
        ctx.write("static_allowed", STATIC_DISALLOWED, domain)
        return ()

    def fn_unlock(self, ctx: Ctx) -> tuple:
        domain = ctx.frame.args[0]
        ctx.require(ctx.read("locker", domain) == ctx.sender.word, "not locker")
        ctx.write("locked", UNLOCKED, domain)
        ctx.write("locker", 0, domain)
        ctx.write("static_allowed", STATIC_ALLOWED, domain)
        return ()

    def fn_is_locked(self, ctx: Ctx) -> tuple:
        return (1 if ctx.read("locked", ctx.frame.args[0]) == LOCKED else 0,)

    def fn_is_static_allowed(self, ctx: Ctx) -> tuple:
        return (1 if ctx.read("static_allowed", ctx.frame.args[0]) != STATIC_DISALLOWED else 0,)


# ---------------------------------------------------------------------------
# Deployment helpers
# ---------------------------------------------------------------------------


def domain_id(label: str) -> int:
    """32-byte domain identifier from a descriptive label."""
    return int.from_bytes(keccak256(label.encode()), "big")


def deploy_registry(world: WorldState, address: Address) -> Address:
    world.create_account(address, behavior=LockRegistry())
    return address


def register_domain(world: WorldState, registry: Address, domain: int) -> None:
    """Pre-initialize a domain's registry entries (construction-time write)."""
    spec = world.get(registry).behavior.spec
    storage = world.get(registry).storage
    storage[spec.slot_for("locked", domain)] = UNLOCKED
    storage[spec.slot_for("static_allowed", domain)] = STATIC_ALLOWED


def init_proxy(
    world: WorldState,
    proxy: Address,
    implementation: Address,
    admin: Address,
    mode: GuardMode = GuardMode.OPTIMIZED,
    registry: Address | None = None,
    domain: int | None = None,
    balance: int = 0,
) -> Address:
    """Create and configure a proxy account (constructor-time storage writes)."""
    account = world.create_account(proxy, balance=balance, behavior=SentinelProxy())
    cfg = PROXY_CONFIG
    account.storage[cfg.implementation_slot] = implementation.word
    account.storage[cfg.mode_slot] = mode.word
    account.storage[cfg.lock_status_slot] = UNLOCKED
    account.storage[cfg.static_call_allowed_slot] = (
        STATIC_ALLOWED_VIA_REGISTRY if mode is GuardMode.HIGH_SECURITY else STATIC_ALLOWED
    )
    account.storage[cfg.admin_slot] = admin.word
    if registry is not None:
        account.storage[cfg.lock_registry_slot] = registry.word
    if domain is not None:
        account.storage[cfg.domain_id_slot] = domain
    return proxy
