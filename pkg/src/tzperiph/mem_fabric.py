"""Physical memory fabric.

Flat sparse memory guarded by TZASC-style region policies, 32-bit MMIO
register banks, a tick-driven DMA engine and the work counters that stand
in for cycle measurements.
"""

import dataclasses
import enum
import itertools
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from tzperiph import errors
from tzperiph.soc_state import ExceptionLevel, ProcessorContext, World

log = logging.getLogger(__name__)

PAGE_SIZE = 4096
ADDR_LIMIT = 1 << 64
REG_WIDTH = 4
DMA_BYTES_PER_TICK = 64

_WIDTH_MASKS = {8: 0xFF, 16: 0xFFFF, 32: 0xFFFFFFFF}


class AccessKind(enum.Enum):
    READ = "Read"
    WRITE = "Write"

    def __str__(self):
        return self.value


@dataclasses.dataclass(frozen=True)
class RegionPolicy:
    base: int
    size: int
    secure_only: bool

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("region size must be positive")
        if self.base < 0 or self.base + self.size > ADDR_LIMIT:
            raise ValueError("region wraps the address space")

    @property
    def end(self) -> int:
        return self.base + self.size

    def overlaps(self, addr: int, length: int) -> bool:
        return addr < self.end and self.base < addr + length

    def contains(self, addr: int, length: int) -> bool:
        return self.base <= addr and addr + length <= self.end


@dataclasses.dataclass
class WorkCounters:
    access_checks: int = 0
    bytes_copied: int = 0
    world_switches: int = 0
    secure_syscalls: int = 0
    el_transitions: int = 0
    access_denials: int = 0

    def copy(self) -> "WorkCounters":
        return dataclasses.replace(self)

    def __sub__(self, other: "WorkCounters") -> "WorkCounters":
        return WorkCounters(**{
            f.name: getattr(self, f.name) - getattr(other, f.name)
            for f in dataclasses.fields(self)})

    @property
    def work_units(self) -> int:
        """Scalar cost: checks + copied bytes + switches + syscalls + EL hops."""
        return (self.access_checks + self.bytes_copied + self.world_switches
                + self.secure_syscalls + self.el_transitions)

    def as_dict(self) -> Dict[str, int]:
        return dataclasses.asdict(self)


def access_allowed(policies: Sequence[RegionPolicy], world: World,
                   addr: int, length: int) -> bool:
    """Pure TZASC decision for ``[addr, addr+length)``."""
    if world is World.SECURE:
        return True
    return not any(p.secure_only and p.overlaps(addr, length)
                   for p in policies)


ReadHook = Callable[[ProcessorContext], int]
WriteHook = Callable[[ProcessorContext, int], None]


class MmioBank:
    """A window of 32-bit device registers."""

    def __init__(self, base: int, size: int, name: str = ""):
        if base % REG_WIDTH or size % REG_WIDTH or size <= 0:
            raise errors.AlignmentError("bank must be word aligned")
        self.base = base
        self.size = size
        self.name = name
        self.registers = [0] * (size // REG_WIDTH)
        self.read_hooks: Dict[int, ReadHook] = {}
        self.write_hooks: Dict[int, WriteHook] = {}

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.size

    def peek(self, offset: int) -> int:
        return self.registers[offset // REG_WIDTH]

    def poke(self, offset: int, value: int) -> None:
        self.registers[offset // REG_WIDTH] = value & 0xFFFFFFFF

    def load(self, ctx: ProcessorContext, offset: int) -> int:
        hook = self.read_hooks.get(offset)
        if hook is not None:
            self.poke(offset, hook(ctx))
        return self.peek(offset)

    def store(self, ctx: ProcessorContext, offset: int, value: int) -> None:
        self.poke(offset, value)
        hook = self.write_hooks.get(offset)
        if hook is not None:
            hook(ctx, value & 0xFFFFFFFF)


class MmioMapping:
    """Handle returned by :meth:`MemoryFabric.map_mmio`.

    Accessors take register offsets and run in the mapping owner's context.
    """

    def __init__(self, fabric: "MemoryFabric", ctx: ProcessorContext,
                 base: int, size: int, handle_id: int):
        self.fabric = fabric
        self.ctx = ctx
        self.base = base
        self.size = size
        self.id = handle_id
        self.released = False

    def _addr(self, offset: int) -> int:
        if self.released:
            raise errors.UseAfterCleanup(f"mapping {self.id} released")
        if not 0 <= offset < self.size:
            raise errors.UnmappedAddress(f"offset {offset:#x} outside mapping")
        return self.base + offset

    def read8(self, offset):
        return self.fabric.ioread8(self.ctx, self._addr(offset))

    def read16(self, offset):
        return self.fabric.ioread16(self.ctx, self._addr(offset))

    def read32(self, offset):
        return self.fabric.ioread32(self.ctx, self._addr(offset))

    def write8(self, offset, value):
        self.fabric.iowrite8(self.ctx, self._addr(offset), value)

    def write16(self, offset, value):
        self.fabric.iowrite16(self.ctx, self._addr(offset), value)

    def write32(self, offset, value):
        self.fabric.iowrite32(self.ctx, self._addr(offset), value)


class DmaState(enum.IntEnum):
    PROGRAMMED = 0
    RUNNING = 1
    COMPLETE = 2


@dataclasses.dataclass
class DmaTransfer:
    id: int
    source: str
    dst_base: int
    len: int
    completion_irq: int
    state: DmaState = DmaState.PROGRAMMED
    transferred: int = 0

    def _advance(self, state: DmaState) -> None:
        if state < self.state:
            raise errors.InvariantViolation("DMA state moved backwards")
        self.state = state


AccessObserver = Callable[[World, int, int, AccessKind, bool], None]


class MemoryFabric:
    """Owner of physical memory, region policies, MMIO banks and DMA.

    ``irq_sink`` is called with the completion interrupt id when a DMA
    transfer finishes; the platform wires it to the monitor as an FIQ.
    """

    def __init__(self):
        self.policies: Dict[int, RegionPolicy] = {}
        self.banks: List[MmioBank] = []
        self.devices: Dict[str, object] = {}
        self.counters = WorkCounters()
        self.irq_sink: Optional[Callable[[int], None]] = None
        self.observers: List[AccessObserver] = []
        self._pages: Dict[int, bytearray] = {}
        self._mappings: Dict[int, MmioMapping] = {}
        self._transfers: List[DmaTransfer] = []
        self._ids = itertools.count(1)

    # region policies

    def _register(self, ctx, base, size, secure_only) -> int:
        if ctx.world is not World.SECURE or ctx.el != ExceptionLevel.EL3:
            raise errors.PrivilegeViolation(
                "region policies are programmed by EL3 firmware only")
        policy = RegionPolicy(base, size, secure_only)
        for other in self.policies.values():
            if other.overlaps(base, size):
                raise errors.OverlapError(
                    f"[{base:#x}, {base + size:#x}) overlaps "
                    f"[{other.base:#x}, {other.end:#x})")
        policy_id = next(self._ids)
        self.policies[policy_id] = policy
        log.debug("TZASC policy %d: %#x+%#x secure_only=%s", policy_id, base,
                  size, secure_only)
        return policy_id

    def configure_secure_region(self, ctx: ProcessorContext, base: int,
                                size: int) -> int:
        return self._register(ctx, base, size, True)

    def configure_open_region(self, ctx: ProcessorContext, base: int,
                              size: int) -> int:
        return self._register(ctx, base, size, False)

    def policy_for(self, addr: int, length: int = 1) -> Optional[RegionPolicy]:
        """The single policy containing the whole range, if any."""
        for policy in self.policies.values():
            if policy.contains(addr, length):
                return policy
        return None

    def secure_policies(self) -> List[RegionPolicy]:
        return [p for p in self.policies.values() if p.secure_only]

    def check_access(self, world: World, addr: int, length: int,
                     kind: AccessKind) -> bool:
        if length <= 0:
            raise ValueError("access length must be positive")
        self.counters.access_checks += 1
        allowed = access_allowed(list(self.policies.values()), world, addr,
                                 length)
        if not allowed:
            self.counters.access_denials += 1
        for observer in self.observers:
            observer(world, addr, length, kind, allowed)
        return allowed

    def _require(self, world, addr, length, kind) -> None:
        if not self.check_access(world, addr, length, kind):
            raise errors.AccessDenied(world, addr, length, kind)

    def _enforce(self, world, addr, length, kind) -> None:
        # hardware filtering of plain loads/stores; not a counted check
        if length and not access_allowed(list(self.policies.values()), world,
                                         addr, length):
            raise errors.AccessDenied(world, addr, length, kind)

    # physical memory

    def load(self, addr: int, length: int) -> bytes:
        """Unchecked physical read (bus-master view)."""
        out = bytearray()
        while length > 0:
            page, off = divmod(addr, PAGE_SIZE)
            n = min(length, PAGE_SIZE - off)
            data = self._pages.get(page)
            out += data[off:off + n] if data is not None else bytes(n)
            addr += n
            length -= n
        return bytes(out)

    def store(self, addr: int, data: bytes) -> None:
        """Unchecked physical write (bus-master view)."""
        view = memoryview(bytes(data))
        while view:
            page, off = divmod(addr, PAGE_SIZE)
            n = min(len(view), PAGE_SIZE - off)
            buf = self._pages.get(page)
            if buf is None:
                buf = self._pages[page] = bytearray(PAGE_SIZE)
            buf[off:off + n] = view[:n]
            addr += n
            view = view[n:]

    def read(self, ctx: ProcessorContext, addr: int, length: int) -> bytes:
        self._enforce(ctx.world, addr, length, AccessKind.READ)
        return self.load(addr, length)

    def write(self, ctx: ProcessorContext, addr: int, data: bytes) -> None:
        self._enforce(ctx.world, addr, len(data), AccessKind.WRITE)
        self.store(addr, data)

    def memcpy(self, ctx: ProcessorContext, dst: int, src: int,
               length: int) -> None:
        """Kernel memcpy in ``ctx``'s world; counts copied bytes only."""
        self._enforce(ctx.world, src, length, AccessKind.READ)
        self._enforce(ctx.world, dst, length, AccessKind.WRITE)
        self.store(dst, self.load(src, length))
        self.counters.bytes_copied += length

    def copy_to_user(self, ctx: ProcessorContext, user_dst: int, src: int,
                     length: int, user_range: Tuple[int, int]) -> None:
        """Linux-style kernel to user copy: one access_ok check, one copy."""
        lo, hi = user_range
        ok = self.check_access(ctx.world, user_dst, max(length, 1),
                               AccessKind.WRITE)
        if not ok or user_dst < lo or user_dst + length > hi:
            raise errors.AccessDenied(ctx.world, user_dst, length,
                                      AccessKind.WRITE)
        self.memcpy(ctx, user_dst, src, length)

    def dump(self, addr: int, length: int) -> str:
        """Hex dump, 16 bytes per line."""
        lines = []
        data = self.load(addr, length)
        for i in range(0, len(data), 16):
            lines.append(f"{addr + i:#010x}: {data[i:i + 16].hex(' ')}")
        return "\n".join(lines)

    def find_outside_secure(self, needle: bytes) -> List[int]:
        """Addresses where ``needle`` occurs in memory not protected as secure."""
        if not needle:
            raise ValueError("empty needle")
        secure = self.secure_policies()
        hits = []
        for page in sorted(self._pages):
            base = page * PAGE_SIZE
            if any(p.contains(base, PAGE_SIZE) for p in secure):
                continue
            # include a tail so matches spanning pages are seen
            chunk = self.load(base, PAGE_SIZE + len(needle) - 1)
            start = chunk.find(needle)
            while start != -1 and start < PAGE_SIZE:
                addr = base + start
                if access_allowed(secure, World.NORMAL, addr, len(needle)):
                    hits.append(addr)
                start = chunk.find(needle, start + 1)
        return hits

    # MMIO

    def add_bank(self, bank: MmioBank) -> MmioBank:
        for other in self.banks:
            if other.base < bank.base + bank.size and bank.base < other.base + other.size:
                raise errors.OverlapError(f"bank {bank.name} overlaps {other.name}")
        self.banks.append(bank)
        return bank

    def bank_at(self, addr: int) -> Optional[MmioBank]:
        for bank in self.banks:
            if bank.contains(addr):
                return bank
        return None

    def _resolve(self, ctx, addr, kind) -> MmioBank:
        if addr % REG_WIDTH:
            raise errors.AlignmentError(f"unaligned MMIO access at {addr:#x}")
        bank = self.bank_at(addr)
        if bank is None:
            raise errors.UnmappedAddress(f"no register at {addr:#x}")
        self._require(ctx.world, addr, REG_WIDTH, kind)
        return bank

    def _ioread(self, ctx, addr, width) -> int:
        bank = self._resolve(ctx, addr, AccessKind.READ)
        return bank.load(ctx, addr - bank.base) & _WIDTH_MASKS[width]

    def _iowrite(self, ctx, addr, value, width) -> None:
        bank = self._resolve(ctx, addr, AccessKind.WRITE)
        bank.store(ctx, addr - bank.base, value & _WIDTH_MASKS[width])

    def ioread8(self, ctx, addr):
        return self._ioread(ctx, addr, 8)

    def ioread16(self, ctx, addr):
        return self._ioread(ctx, addr, 16)

    def ioread32(self, ctx, addr):
        return self._ioread(ctx, addr, 32)

    def iowrite8(self, ctx, addr, value):
        self._iowrite(ctx, addr, value, 8)

    def iowrite16(self, ctx, addr, value):
        self._iowrite(ctx, addr, value, 16)

    def iowrite32(self, ctx, addr, value):
        self._iowrite(ctx, addr, value, 32)

    def map_mmio(self, ctx: ProcessorContext, base: int,
                 size: int) -> MmioMapping:
        if ctx.world is not World.SECURE or ctx.el != ExceptionLevel.EL1:
            raise errors.PrivilegeViolation(
                "map_mmio is a secure kernel (S-EL1) service")
        bank = self.bank_at(base)
        if bank is None or base + size > bank.base + bank.size:
            raise errors.UnmappedAddress(
                f"no register bank covers [{base:#x}, {base + size:#x})")
        if self.policy_for(base, size) is None:
            raise errors.UnmappedAddress(
                f"[{base:#x}, {base + size:#x}) not covered by a region policy")
        mapping = MmioMapping(self, ctx, base, size, next(self._ids))
        self._mappings[mapping.id] = mapping
        return mapping

    def unmap(self, mapping: MmioMapping) -> None:
        if self._mappings.pop(mapping.id, None) is not None:
            mapping.released = True

    @property
    def mapping_count(self) -> int:
        return len(self._mappings)

    # devices and DMA

    def attach_device(self, device) -> None:
        self.devices[device.device_id] = device
        device.fabric = self

    def device_is_secure(self, device) -> bool:
        window = getattr(device, "bank", None)
        if window is None:
            return False
        policy = self.policy_for(window.base, window.size)
        return bool(policy and policy.secure_only)

    def dma_program(self, ctx: ProcessorContext, source_device: str,
                    dst_base: int, length: int,
                    completion_irq: int) -> DmaTransfer:
        device = self.devices.get(source_device)
        if device is None:
            raise errors.UnknownDevice(source_device)
        transfer = DmaTransfer(next(self._ids), source_device, dst_base,
                               length, completion_irq)
        if length == 0:
            transfer._advance(DmaState.COMPLETE)
            return transfer
        self._require(ctx.world, dst_base, length, AccessKind.WRITE)
        policy = self.policy_for(dst_base, length)
        if policy is None or (self.device_is_secure(device)
                              and not policy.secure_only):
            # a secure peripheral may only master into secure memory
            raise errors.AccessDenied(ctx.world, dst_base, length,
                                      AccessKind.WRITE)
        self._transfers.append(transfer)
        return transfer

    def tick(self, count: int = 1) -> None:
        """Advance devices one step and move up to 64 bytes per transfer."""
        for _ in range(count):
            for device in self.devices.values():
                device.tick()
            for transfer in list(self._transfers):
                self._dma_step(transfer)

    def _dma_step(self, transfer: DmaTransfer) -> None:
        device = self.devices[transfer.source]
        want = min(DMA_BYTES_PER_TICK, transfer.len - transfer.transferred)
        chunk = device.dma_take(want)[:want]
        if chunk:
            transfer._advance(DmaState.RUNNING)
            self.store(transfer.dst_base + transfer.transferred, chunk)
            transfer.transferred += len(chunk)
        if transfer.transferred == transfer.len:
            transfer._advance(DmaState.COMPLETE)
            self._transfers.remove(transfer)
            device.dma_done(transfer)
            if self.irq_sink is not None:
                self.irq_sink(transfer.completion_irq)

    @property
    def active_transfers(self) -> List[DmaTransfer]:
        return list(self._transfers)

    # counters

    def counters_snapshot(self) -> WorkCounters:
        return self.counters.copy()

    def counters_reset(self) -> None:
        # zeroed in place: the monitor holds a reference to the same object
        for field in dataclasses.fields(self.counters):
            setattr(self.counters, field.name, 0)
