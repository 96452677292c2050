"""Benchmark scenarios: MMIO parity, copy-path cost, crypto-mode timing.

The simulator has no cycle model, so the mmio and copy scenarios report
work counters; only the crypto scenario measures wall-clock time.
"""

import dataclasses
import os
import statistics
import time
from typing import Dict, List, Optional, Sequence

from tzperiph import aes_modes, boot, tee_rt
from tzperiph.mem_fabric import MemoryFabric, MmioBank, WorkCounters
from tzperiph.platform import (DRIVER_BUF, KERNEL_BUF, USER_MEMORY, Soc,
                               fixture_dts)
from tzperiph.soc_state import ProcessorContext

DEFAULT_ITERS = 100
COPY_SIZES = (64, 256, 1024, 4096, 16384, 65536)
CRYPTO_SIZE = 64 * 1024

SECURE_SCRATCH = 0x2910000
NORMAL_SCRATCH = 0x2911000
SCRATCH_SIZE = 0x100

BENCH_PTA_UUID = tee_rt.uuid_mod.UUID("0c3b5e1d-7d9a-4a43-9b10-62656e636801")
CMD_COPY_OUT = 1


@dataclasses.dataclass
class BenchReport:
    scenario: str
    iterations: int
    work: Dict[str, WorkCounters] = dataclasses.field(default_factory=dict)
    wall_ns: Optional[Dict[str, float]] = None
    derived_ratios: Dict[str, float] = dataclasses.field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {
            "scenario": self.scenario,
            "iterations": self.iterations,
            "work": {k: dict(v.as_dict(), work_units=v.work_units)
                     for k, v in self.work.items()},
            "derived_ratios": dict(self.derived_ratios),
        }
        if self.wall_ns is not None:
            out["wall_ns"] = dict(self.wall_ns)
        return out


def mmio_sequence(iters: int) -> List[tuple]:
    """A fixed read/write pattern over the first 16 registers."""
    ops = []
    for i in range(iters):
        off = 4 * (i % 16)
        ops.append(("w", off, (i * 0x9E3779B1) & 0xFFFFFFFF))
        ops.append(("r", off, None))
    return ops


def _run_mmio(fabric, ctx, base, ops) -> WorkCounters:
    before = fabric.counters_snapshot()
    for kind, off, value in ops:
        if kind == "w":
            fabric.iowrite32(ctx, base + off, value)
        else:
            fabric.ioread32(ctx, base + off)
    return fabric.counters_snapshot() - before


def bench_mmio(iters: int = DEFAULT_ITERS) -> BenchReport:
    """Same sequence: trusted driver on a secure bank, REE driver on an open one."""
    if iters < 1:
        raise ValueError("iters must be at least 1")
    fabric = MemoryFabric()
    firmware = ProcessorContext.firmware()
    fabric.add_bank(MmioBank(SECURE_SCRATCH, SCRATCH_SIZE, "scratch-s"))
    fabric.add_bank(MmioBank(NORMAL_SCRATCH, SCRATCH_SIZE, "scratch-ns"))
    fabric.configure_secure_region(firmware, SECURE_SCRATCH, SCRATCH_SIZE)
    fabric.configure_open_region(firmware, NORMAL_SCRATCH, SCRATCH_SIZE)
    ops = mmio_sequence(iters)
    secure = _run_mmio(fabric, ProcessorContext.secure_el1(), SECURE_SCRATCH,
                       ops)
    normal = _run_mmio(fabric, ProcessorContext.booted(), NORMAL_SCRATCH, ops)
    ratio = (secure.work_units / normal.work_units) if normal.work_units else 1.0
    return BenchReport("mmio", iters, {"secure": secure, "normal": normal},
                       derived_ratios={"secure_over_normal": ratio})


def _copy_pta(soc: Soc) -> tee_rt.Pta:
    fabric = soc.fabric

    def copy_out(ctx, staged):
        n, out = staged[0].a, staged[1]
        fabric.memcpy(ctx, out.addr, DRIVER_BUF[0], n)
        out.size = n

    return tee_rt.Pta(BENCH_PTA_UUID, "bench-copy", {CMD_COPY_OUT: copy_out})


def copy_costs(sizes: Sequence[int] = COPY_SIZES) -> Dict[int, Dict[str, WorkCounters]]:
    """Per size: plain kernel memcpy, kernel-to-user copy, TA invoke path."""
    soc = Soc()
    images, root = boot.build_chain(fixture_dts())
    if not soc.boot(images, root).ok:
        raise RuntimeError("fixture boot failed")
    fabric = soc.fabric
    runtime = tee_rt.TeeRuntime(soc)
    runtime.register_pta(_copy_pta(soc))
    session = runtime.open_session(BENCH_PTA_UUID)
    kernel = ProcessorContext.booted()
    user_range = (USER_MEMORY[0], USER_MEMORY[0] + USER_MEMORY[1])
    out = {}
    for size in sizes:
        src = KERNEL_BUF[0]
        fabric.store(src, os.urandom(size))
        fabric.store(DRIVER_BUF[0], os.urandom(size))

        before = fabric.counters_snapshot()
        fabric.memcpy(kernel, src + KERNEL_BUF[1] // 2, src, size)
        plain = fabric.counters_snapshot() - before

        before = fabric.counters_snapshot()
        fabric.copy_to_user(kernel, USER_MEMORY[0], src, size, user_range)
        to_user = fabric.counters_snapshot() - before

        runtime.ta_reset_heap()
        buf = runtime.ta_alloc(size)
        before = fabric.counters_snapshot()
        runtime.invoke_command(session, CMD_COPY_OUT, [
            tee_rt.Value(size),
            tee_rt.MemRef(buf, size, tee_rt.Direction.OUT)])
        invoke = fabric.counters_snapshot() - before
        out[size] = {"memcpy": plain, "copy_to_user": to_user,
                     "invoke": invoke}
    return out


def bench_copy(iters: int = 1, size: int = 4096) -> BenchReport:
    costs = copy_costs([size])[size]
    return BenchReport(
        "copy", iters, costs,
        derived_ratios={
            "invoke_over_copy_to_user":
                costs["invoke"].work_units / costs["copy_to_user"].work_units,
            "copy_to_user_over_memcpy":
                costs["copy_to_user"].work_units / costs["memcpy"].work_units,
        })


CRYPTO_MODES = ("ecb", "cbc", "ctr", "gcm")


def _crypto_ops(key: bytes, nonce: bytes):
    return {
        "ecb": (lambda d: aes_modes.ecb_encrypt(key, d),
                lambda c: aes_modes.ecb_decrypt(key, c)),
        "cbc": (lambda d: aes_modes.cbc_encrypt(key, nonce, d),
                lambda c: aes_modes.cbc_decrypt(key, nonce, c)),
        "ctr": (lambda d: aes_modes.ctr_xcrypt(key, nonce, d),
                lambda c: aes_modes.ctr_xcrypt(key, nonce, c)),
        "gcm": (lambda d: aes_modes.gcm_encrypt(key, nonce, d),
                lambda c: aes_modes.gcm_decrypt(key, nonce, c[0], c[1])),
    }


def crypto_timings(iters: int = DEFAULT_ITERS, size: int = CRYPTO_SIZE,
                   modes: Sequence[str] = CRYPTO_MODES) -> Dict[str, float]:
    """Mean nanoseconds per encrypt and decrypt for each mode.

    The same key and nonce are reused on purpose; this measures cost only.
    """
    key, nonce = os.urandom(16), os.urandom(16)
    data = os.urandom(size)
    ops = _crypto_ops(key, nonce)
    samples: Dict[str, List[int]] = {}
    for _ in range(iters):
        # interleave modes so drift affects all of them alike
        for mode in modes:
            enc, dec = ops[mode]
            t0 = time.perf_counter_ns()
            ct = enc(data)
            t1 = time.perf_counter_ns()
            dec(ct)
            t2 = time.perf_counter_ns()
            samples.setdefault(f"{mode}_encrypt", []).append(t1 - t0)
            samples.setdefault(f"{mode}_decrypt", []).append(t2 - t1)
    return {k: statistics.fmean(v) for k, v in samples.items()}


def bench_crypto(iters: int = DEFAULT_ITERS,
                 size: int = CRYPTO_SIZE) -> BenchReport:
    if iters < 1:
        raise ValueError("iters must be at least 1")
    wall = crypto_timings(iters, size)
    ratios = {
        "gcm_over_ctr_encrypt": wall["gcm_encrypt"] / wall["ctr_encrypt"],
        "gcm_over_ctr_decrypt": wall["gcm_decrypt"] / wall["ctr_decrypt"],
    }
    return BenchReport("crypto", iters, {}, wall, ratios)


SCENARIOS = {
    "mmio": bench_mmio,
    "copy": bench_copy,
    "crypto": bench_crypto,
}
