"""Two-world processor model: NS bit, exception levels, banked registers.

The secure monitor owns SMC and interrupt dispatch tables.  Every world
transition goes through it, so it is the only code that touches the
banked register files.
"""

import collections
import dataclasses
import enum
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from tzperiph import errors

log = logging.getLogger(__name__)

REGFILE_SIZE = 256


class World(enum.Enum):
    NORMAL = "Normal"
    SECURE = "Secure"

    def __str__(self):
        return self.value

    @property
    def other(self) -> "World":
        return World.SECURE if self is World.NORMAL else World.NORMAL


class ExceptionLevel(enum.IntEnum):
    EL0 = 0
    EL1 = 1
    EL2 = 2
    EL3 = 3


class IrqKind(enum.Enum):
    IRQ = "IRQ"
    FIQ = "FIQ"


@dataclasses.dataclass
class ProcessorContext:
    """Architectural state of one core.

    ``regs`` is the live register file of the active world; ``banked`` holds
    the saved file of the inactive world only.
    """

    ns_bit: int = 1
    el: ExceptionLevel = ExceptionLevel.EL1
    regs: bytearray = dataclasses.field(
        default_factory=lambda: bytearray(REGFILE_SIZE), repr=False)
    banked: Dict[World, bytes] = dataclasses.field(
        default_factory=lambda: {World.SECURE: bytes(REGFILE_SIZE)},
        repr=False)
    pending_irq: collections.deque = dataclasses.field(
        default_factory=collections.deque)
    monitor_depth: int = 0

    @property
    def world(self) -> World:
        return World.SECURE if self.ns_bit == 0 else World.NORMAL

    @classmethod
    def booted(cls) -> "ProcessorContext":
        """Context as left by the boot flow: REE kernel, (Normal, EL1)."""
        return cls()

    @classmethod
    def secure_el1(cls) -> "ProcessorContext":
        return cls(ns_bit=0, banked={World.NORMAL: bytes(REGFILE_SIZE)})

    @classmethod
    def firmware(cls) -> "ProcessorContext":
        """Context of boot firmware running in the monitor (Secure, EL3)."""
        return cls(ns_bit=0, el=ExceptionLevel.EL3, monitor_depth=1,
                   banked={World.NORMAL: bytes(REGFILE_SIZE)})


def current_mode(ctx: ProcessorContext) -> Tuple[World, ExceptionLevel]:
    return ctx.world, ctx.el


def audit(ctx: ProcessorContext) -> None:
    """Check the structural invariants of ``ctx``; raise on violation."""
    if ctx.ns_bit not in (0, 1):
        raise errors.InvariantViolation(f"NS bit {ctx.ns_bit!r}")
    if (ctx.monitor_depth > 0) != (ctx.el == ExceptionLevel.EL3):
        raise errors.InvariantViolation(
            f"monitor_depth={ctx.monitor_depth} at {ctx.el.name}")
    if ctx.el == ExceptionLevel.EL3 and ctx.ns_bit != 0:
        raise errors.InvariantViolation("EL3 executing with NS=1")
    if len(ctx.regs) != REGFILE_SIZE:
        raise errors.InvariantViolation("register file resized")
    if ctx.monitor_depth == 0 and ctx.world in ctx.banked:
        raise errors.InvariantViolation("active world still banked")


SmcHandler = Callable[[ProcessorContext, List[int]], Sequence[int]]
IrqHandler = Callable[[ProcessorContext, int], None]


@dataclasses.dataclass
class _Route:
    world: World
    handler: Callable


class SecureMonitor:
    """EL3 dispatcher for secure monitor calls and cross-world interrupts.

    ``counters`` is any object with a ``world_switches`` attribute (the
    fabric's WorkCounters); each NS-bit flip increments it.
    """

    def __init__(self, counters=None, hypervisor: bool = False):
        self.counters = counters
        self.hypervisor = hypervisor
        self.hyp_forwards = 0
        self.trampoline_hook: Optional[Callable[[ProcessorContext], None]] = None
        self._smc: Dict[int, _Route] = {}
        self._irq: Dict[int, _Route] = {}

    def register_smc(self, call_id: int, handler: SmcHandler,
                     world: World = World.SECURE) -> None:
        self._smc[call_id] = _Route(world, handler)

    def register_irq(self, irq_id: int, handler: IrqHandler,
                     world: World = World.SECURE) -> None:
        self._irq[irq_id] = _Route(world, handler)

    def unregister_irq(self, irq_id: int) -> None:
        self._irq.pop(irq_id, None)

    # world transitions

    def _enter_monitor(self, ctx: ProcessorContext):
        saved = (ctx.world, ctx.el)
        ctx.banked[ctx.world] = bytes(ctx.regs)
        ctx.ns_bit = 0
        ctx.el = ExceptionLevel.EL3
        ctx.monitor_depth += 1
        if self.trampoline_hook is not None:
            self.trampoline_hook(ctx)
        return saved

    def _exit_monitor(self, ctx: ProcessorContext, world: World,
                      el: ExceptionLevel) -> None:
        ctx.regs = bytearray(ctx.banked.pop(world))
        ctx.ns_bit = 0 if world is World.SECURE else 1
        ctx.el = el
        ctx.monitor_depth -= 1

    def _switch(self, ctx: ProcessorContext, target: World,
                el: ExceptionLevel = ExceptionLevel.EL1):
        """Trap into EL3 and resume in ``target`` at ``el``."""
        origin_world, origin_el = self._enter_monitor(ctx)
        self._exit_monitor(ctx, target, el)
        if target is not origin_world and self.counters is not None:
            self.counters.world_switches += 1
        return origin_world, origin_el

    def _dispatch(self, ctx: ProcessorContext, route: _Route, call):
        if route.world is ctx.world:
            saved_el = ctx.el
            ctx.el = ExceptionLevel.EL1
            try:
                return call()
            finally:
                ctx.el = saved_el
        origin_world, origin_el = self._switch(ctx, route.world)
        try:
            return call()
        finally:
            self._switch(ctx, origin_world, origin_el)

    # public operations

    def smc_switch(self, ctx: ProcessorContext, call_id: int,
                   args: Sequence[int]) -> Tuple[ProcessorContext, List[int]]:
        """Issue an SMC from ``ctx``; run the registered handler in its world.

        The handler executes at EL1 of the target world and the caller is
        resumed in its own world with the handler's result words.
        """
        if ctx.el == ExceptionLevel.EL0:
            raise errors.PrivilegeViolation("SMC is not available at EL0")
        if ctx.el == ExceptionLevel.EL3:
            raise errors.PrivilegeViolation("SMC issued from monitor mode")
        route = self._smc.get(call_id)
        if route is None:
            raise errors.UnknownSmcId(f"unregistered SMC id {call_id:#x}")
        if self.hypervisor and ctx.world is World.NORMAL:
            # trapped by EL2 and forwarded unchanged
            self.hyp_forwards += 1
        words = list(args)
        result = self._dispatch(ctx, route, lambda: route.handler(ctx, words))
        audit(ctx)
        return ctx, [int(w) for w in (result or ())]

    def deliver_interrupt(self, ctx: ProcessorContext, irq_id: int,
                          kind: IrqKind = IrqKind.IRQ) -> ProcessorContext:
        route = self._irq.get(irq_id)
        if route is None:
            raise errors.UnknownIrq(f"no handler for interrupt {irq_id}")
        ctx.pending_irq.append(irq_id)
        log.debug("%s %d -> %s handler (from %s)", kind.value, irq_id,
                  route.world, ctx.world)

        def run():
            ctx.pending_irq.remove(irq_id)
            route.handler(ctx, irq_id)

        self._dispatch(ctx, route, run)
        audit(ctx)
        return ctx
