"""SoC assembly: physical layout, fixtures and the secure-call trampoline."""

import importlib.resources
import logging
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

from tzperiph import boot, devtree, errors
from tzperiph.i2s_dev import I2sConfig, I2sDevice
from tzperiph.mem_fabric import MemoryFabric, MmioBank
from tzperiph.soc_state import (IrqKind, ProcessorContext, SecureMonitor,
                                World)

log = logging.getLogger(__name__)

T = TypeVar("T")

I2S_BASE, I2S_SIZE = 0x2901000, 0x100
I2S_PM_BASE, I2S_PM_SIZE = 0x2902000, 0x100
I2S_DMA_IRQ = 42
FUSE_BASE, FUSE_SIZE = 0x3820000, 0x100

# static alternative to the device tree lookup
STATIC_SECURE_WINDOWS = ((I2S_BASE, I2S_SIZE),)

TEE_RAM = (0x80000000, 0x01000000)
DRIVER_BUF = (0x80400000, 0x00100000)
PTA_STAGING = (0x80600000, 0x00100000)
TA_MEMORY = (0x80800000, 0x00100000)

NORMAL_RAM = (0x40000000, 0x10000000)
KERNEL_BUF = (0x40000000, 0x00100000)
USER_MEMORY = (0x48000000, 0x00100000)
SUPPLICANT_SHM = (0x4C000000, 0x00100000)

SMC_CALL_WITH_ARG = 0x32000004

DEFAULT_HUK = bytes.fromhex("000102030405060708090a0b0c0d0e0f")


def fixture_text(name: str) -> str:
    return importlib.resources.files("tzperiph.data").joinpath(name).read_text()


def fixture_dts() -> str:
    return fixture_text("tegra194_i2s.dts")


class Soc:
    """One core, the memory fabric, the I2S microphone and a fuse block.

    ``cpu`` starts in (Normal, EL1).  Secure-world services are entered with
    :meth:`run_secure`, which issues a real SMC through the monitor.
    """

    def __init__(self, i2s_config: I2sConfig = I2sConfig(),
                 huk: bytes = DEFAULT_HUK, hypervisor: bool = False):
        self.fabric = MemoryFabric()
        self.monitor = SecureMonitor(self.fabric.counters, hypervisor)
        self.cpu = ProcessorContext.booted()
        self.i2s = I2sDevice(I2S_BASE, i2s_config, completion_irq=I2S_DMA_IRQ,
                             pm_base=I2S_PM_BASE)
        self.fabric.add_bank(self.i2s.bank)
        self.fabric.add_bank(self.i2s.pm_bank)
        self.fabric.attach_device(self.i2s)
        self.fuses = MmioBank(FUSE_BASE, FUSE_SIZE, "fuses")
        for i in range(0, len(huk), 4):
            self.fuses.poke(i, int.from_bytes(huk[i:i + 4], "little"))
        self.huk_len = len(huk)
        self.fabric.add_bank(self.fuses)
        self.fabric.irq_sink = self._raise_fiq
        self.fabric.configure_open_region(ProcessorContext.firmware(),
                                          *NORMAL_RAM)
        self.boot_report: Optional[boot.BootReport] = None
        self._secure_calls: List[Callable] = []
        self.monitor.register_smc(SMC_CALL_WITH_ARG, self._smc_entry)

    def _raise_fiq(self, irq_id: int) -> None:
        self.monitor.deliver_interrupt(self.cpu, irq_id, IrqKind.FIQ)

    def _smc_entry(self, ctx: ProcessorContext, args: List[int]):
        fn = self._secure_calls[args[0]]
        self._result = fn(ctx)
        return [0]

    def run_secure(self, fn: Callable[[ProcessorContext], T]) -> T:
        """Run ``fn(ctx)`` at S-EL1, entering via SMC if currently Normal."""
        if self.cpu.world is World.SECURE:
            return fn(self.cpu)
        self._secure_calls.append(fn)
        try:
            self.monitor.smc_switch(self.cpu, SMC_CALL_WITH_ARG,
                                    [len(self._secure_calls) - 1])
            return self._result
        finally:
            self._secure_calls.pop()
            self._result = None

    def boot(self, images: Sequence[boot.StageImage],
             root_public_key: bytes) -> boot.BootReport:
        self.boot_report = boot.boot_chain(
            images, root_public_key, self.fabric,
            carveouts=[TEE_RAM, (FUSE_BASE, FUSE_SIZE)])
        return self.boot_report

    def i2s_node(self) -> devtree.DeviceNode:
        if self.boot_report is None or not self.boot_report.ok:
            raise errors.BootRequired("no verified device tree")
        nodes = devtree.find_by_compatible(self.boot_report.device_nodes,
                                           "tegra194-i2s")
        if not nodes:
            raise errors.UnknownDevice("no I2S node in the device tree")
        return nodes[0]


def booted_soc(i2s_config: I2sConfig = I2sConfig(), seed: bytes = b"tzperiph",
               dts_text: Optional[str] = None) -> Tuple[Soc, boot.BootReport]:
    """A SoC that has run the fixture boot chain."""
    soc = Soc(i2s_config)
    images, root = boot.build_chain(dts_text or fixture_dts(), seed)
    report = soc.boot(images, root)
    return soc, report
