"""The partitioned I2S driver and TCB accounting.

The trusted half runs at S-EL1, owns the secure MMIO window and the capture
buffer, and services the DMA completion FIQ.  The untrusted half runs in the
normal world and only touches the clock/power window.
"""

import csv
import dataclasses
import decimal
import io
import logging
import struct
from typing import Dict, List, Optional, Sequence, Tuple

from tzperiph import errors, i2s_dev
from tzperiph.devtree import DeviceNode
from tzperiph.i2s_dev import Power
from tzperiph.mem_fabric import MmioMapping
from tzperiph.platform import DRIVER_BUF, I2S_PM_BASE, Soc
from tzperiph.soc_state import ProcessorContext, World

log = logging.getLogger(__name__)

# consecutive empty polls before a capture gives up
POLL_BUDGET = 16


@dataclasses.dataclass(frozen=True)
class SecureBuffer:
    """Bytes captured into secure memory at ``addr``."""

    addr: int
    data: bytes

    def __len__(self):
        return len(self.data)

    def __bytes__(self):
        return self.data


class TrustedDriver:

    def __init__(self, soc: Soc, node: DeviceNode, mapping: MmioMapping,
                 boot_token, capture_buffer: Tuple[int, int]):
        self.soc = soc
        self.node = node
        self.mapping = mapping
        self.config = soc.i2s.config
        self.boot_token = boot_token
        self.capture_buffer = capture_buffer
        self.irq_count = 0
        self.released = False
        self._dma_pending = False

    # lifecycle

    def _live(self) -> None:
        if self.released:
            raise errors.UseAfterCleanup("trusted driver was cleaned up")

    def _reset_device(self, ctx) -> None:
        m = self.mapping
        m.write32(i2s_dev.CTRL, 0)
        while m.read32(i2s_dev.STATUS) & i2s_dev.STATUS_OCCUPANCY:
            m.read32(i2s_dev.DATA)
        m.write32(i2s_dev.IRQ_ACK,
                  i2s_dev.STATUS_OVERRUN | i2s_dev.STATUS_DMA_DONE)

    def _on_dma_complete(self, ctx: ProcessorContext, irq_id: int) -> None:
        self.irq_count += 1
        self._dma_pending = False

    def cleanup(self) -> None:
        if self.released:
            return
        self.soc.monitor.unregister_irq(self.soc.i2s.completion_irq)
        self.soc.fabric.unmap(self.mapping)
        self.released = True

    # capture

    def _give_up(self, ctx) -> None:
        clk = self.soc.fabric.ioread32(ctx, I2S_PM_BASE + i2s_dev.PM_CLK_EN)
        power = self.soc.fabric.ioread32(ctx, I2S_PM_BASE + i2s_dev.PM_POWER)
        if clk & 1 and power == Power.FULL:
            raise errors.SourceExhausted("microphone stopped producing frames")
        raise errors.CaptureTimeout("I2S clock gated or powered down")

    def _check_len(self, n_frames: int) -> int:
        nbytes = 4 * n_frames
        if n_frames < 0 or nbytes > self.capture_buffer[1]:
            raise ValueError(f"cannot capture {n_frames} frames")
        return nbytes

    def capture_mmio(self, n_frames: int) -> SecureBuffer:
        """Poll STATUS and pop DATA once per frame."""
        return self.soc.run_secure(lambda ctx: self._capture_mmio(ctx, n_frames))

    def _capture_mmio(self, ctx, n_frames: int) -> SecureBuffer:
        self._live()
        nbytes = self._check_len(n_frames)
        base = self.capture_buffer[0]
        if n_frames == 0:
            return SecureBuffer(base, b"")
        m, fabric = self.mapping, self.soc.fabric
        m.write32(i2s_dev.CTRL, i2s_dev.CTRL_ENABLE)
        try:
            got, idle = 0, 0
            while got < n_frames:
                status = m.read32(i2s_dev.STATUS)
                if status & i2s_dev.STATUS_OVERRUN:
                    raise errors.Overrun("I2S FIFO overrun latched")
                if status & i2s_dev.STATUS_OCCUPANCY:
                    word = m.read32(i2s_dev.DATA)
                    fabric.write(ctx, base + 4 * got, struct.pack("<I", word))
                    got += 1
                    idle = 0
                    continue
                idle += 1
                if idle > POLL_BUDGET:
                    self._give_up(ctx)
                fabric.tick()
        finally:
            m.write32(i2s_dev.CTRL, 0)
        return SecureBuffer(base, fabric.read(ctx, base, nbytes))

    def capture_dma(self, n_frames: int,
                    dst: Optional[int] = None) -> SecureBuffer:
        """Program one DMA transfer and block until its completion FIQ."""
        return self.soc.run_secure(
            lambda ctx: self._capture_dma(ctx, n_frames, dst))

    def _capture_dma(self, ctx, n_frames, dst) -> SecureBuffer:
        self._live()
        nbytes = self._check_len(n_frames)
        base = self.capture_buffer[0] if dst is None else dst
        if n_frames == 0:
            return SecureBuffer(base, b"")
        m, fabric = self.mapping, self.soc.fabric
        status = m.read32(i2s_dev.STATUS)
        if status & i2s_dev.STATUS_OVERRUN:
            raise errors.Overrun("I2S FIFO overrun latched")
        m.write32(i2s_dev.DMA_ADDR, base)
        m.write32(i2s_dev.DMA_LEN, nbytes)
        self._dma_pending = True
        try:
            m.write32(i2s_dev.CTRL, i2s_dev.CTRL_ENABLE | i2s_dev.CTRL_DMA
                      | i2s_dev.CTRL_IRQ)
        except errors.AccessDenied as exc:
            self._dma_pending = False
            m.write32(i2s_dev.CTRL, 0)
            raise errors.DmaFault(str(exc)) from exc
        try:
            idle, produced = 0, self.soc.i2s.frames_produced
            while self._dma_pending:
                fabric.tick()
                if self.soc.i2s.frames_produced != produced:
                    produced, idle = self.soc.i2s.frames_produced, 0
                    continue
                idle += 1
                if idle > POLL_BUDGET:
                    self._give_up(ctx)
        finally:
            m.write32(i2s_dev.CTRL, 0)
        m.write32(i2s_dev.IRQ_ACK, i2s_dev.STATUS_DMA_DONE)
        return SecureBuffer(base, fabric.read(ctx, base, nbytes))


def trusted_init(soc: Soc, node: DeviceNode, boot_token,
                 capture_buffer: Tuple[int, int] = DRIVER_BUF) -> TrustedDriver:
    """Map the node's window at S-EL1 and reset the device.

    ``boot_token`` must be the successful BootReport produced for this SoC.
    """
    if (boot_token is None or not getattr(boot_token, "ok", False)
            or boot_token.fabric is not soc.fabric):
        raise errors.BootRequired("trusted driver needs a verified boot")
    if not node.reg:
        raise errors.RegionNotSecure(f"{node.name} has no register window")
    base, size = node.reg[0]
    fabric = soc.fabric
    for what, (lo, n) in (("register window", (base, size)),
                          ("capture buffer", capture_buffer)):
        policy = fabric.policy_for(lo, n)
        if policy is None or not policy.secure_only:
            raise errors.RegionNotSecure(
                f"{node.name}: {what} [{lo:#x}, {lo + n:#x}) is not secure")

    def init(ctx):
        mapping = fabric.map_mmio(ctx, base, size)
        drv = TrustedDriver(soc, node, mapping, boot_token, capture_buffer)
        soc.monitor.register_irq(soc.i2s.completion_irq, drv._on_dma_complete,
                                 World.SECURE)
        drv._reset_device(ctx)
        return drv

    return soc.run_secure(init)


class UntrustedDriver:
    """Normal-world half: clock gate and power level only."""

    def __init__(self, soc: Soc, pm_base: int = I2S_PM_BASE):
        self.soc = soc
        self.clock_regs = pm_base
        self.power_state = Power(soc.i2s.power)
        self.released = False

    def _write(self, offset: int, value: int) -> None:
        if self.released:
            return
        ctx = self.soc.cpu
        if ctx.world is not World.NORMAL:
            raise errors.PrivilegeViolation("untrusted driver runs in Normal world")
        self.soc.fabric.iowrite32(ctx, self.clock_regs + offset, value)

    def clock_enable(self) -> None:
        self._write(i2s_dev.PM_CLK_EN, 1)

    def clock_disable(self) -> None:
        self._write(i2s_dev.PM_CLK_EN, 0)

    def power_set(self, level: Power) -> None:
        level = Power(level)
        self._write(i2s_dev.PM_POWER, int(level))
        self.power_state = level

    def cleanup(self) -> None:
        if not self.released:
            self.clock_disable()
            self.released = True


# TCB accounting

@dataclasses.dataclass
class LocRow:
    component: str
    trusted_loc: int
    untrusted_loc: int


def read_loc_csv(text: str) -> List[LocRow]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != [
            "component", "trusted_loc", "untrusted_loc"]:
        raise ValueError("expected header component,trusted_loc,untrusted_loc")
    rows = []
    for line in reader:
        try:
            row = LocRow(line["component"].strip(), int(line["trusted_loc"]),
                         int(line["untrusted_loc"]))
        except (TypeError, ValueError, AttributeError):
            raise ValueError(f"bad row {line!r}") from None
        if row.trusted_loc < 0 or row.untrusted_loc < 0:
            raise ValueError(f"negative count in {row.component}")
        rows.append(row)
    return rows


def _pct(part: int, total: int) -> float:
    value = decimal.Decimal(100 * part) / decimal.Decimal(total)
    return float(value.quantize(decimal.Decimal("0.01"),
                                rounding=decimal.ROUND_HALF_UP))


def tcb_report(table: Sequence[LocRow]) -> Dict:
    """Share of total LOC per component and side, rounded half-up to 0.01."""
    total = sum(r.trusted_loc + r.untrusted_loc for r in table)
    if total == 0:
        raise errors.EmptyTable("LOC table has no lines of code")
    trusted = sum(r.trusted_loc for r in table)
    untrusted = total - trusted
    return {
        "rows": [{"component": r.component,
                  "trusted_pct": _pct(r.trusted_loc, total),
                  "untrusted_pct": _pct(r.untrusted_loc, total)}
                 for r in table],
        "total": {"trusted_pct": _pct(trusted, total),
                  "untrusted_pct": _pct(untrusted, total)},
        "total_loc": total,
    }
