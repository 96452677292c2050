"""Bit-level I2S slave microphone behind a 32-bit register window.

The SoC is the bus master: it drives the bit clock (BCLK) and the
left-right clock (LRCLK, 0 = left, 1 = right).  On every rising BCLK edge
the microphone shifts out one bit of the current channel's sample, MSB
first; the receiver assembles ``bits_per_sample`` bits into a word and
pushes it, right-aligned and zero-extended, to the FIFO or DMA staging.

Register map (offsets from the window base)::

    0x00 CTRL      bit0 enable, bit1 dma_enable, bit2 irq_enable
    0x04 STATUS    bits 0-7 FIFO occupancy, bit29 dma done, bit31 overrun
    0x08 DATA      pop-on-read FIFO head (0 when empty)
    0x0C DMA_ADDR  destination physical address
    0x10 DMA_LEN   transfer length in bytes
    0x14 IRQ_ACK   write 1s to clear bit31 (overrun) / bit29 (dma done)

A second, non-secure window carries clock and power control::

    0x00 CLK_EN    bit0 bit-clock gate
    0x04 POWER     0 off, 1 low, 2 full
"""

import collections
import dataclasses
import enum
import pathlib
import struct
from typing import Deque, Iterable, List, Optional, Sequence, Tuple

from tzperiph import errors
from tzperiph.mem_fabric import MmioBank

CTRL = 0x00
STATUS = 0x04
DATA = 0x08
DMA_ADDR = 0x0C
DMA_LEN = 0x10
IRQ_ACK = 0x14

CTRL_ENABLE = 1 << 0
CTRL_DMA = 1 << 1
CTRL_IRQ = 1 << 2

STATUS_OCCUPANCY = 0xFF
STATUS_DMA_DONE = 1 << 29
STATUS_OVERRUN = 1 << 31

PM_CLK_EN = 0x00
PM_POWER = 0x04

FIFO_CAPACITY = 64
WINDOW_SIZE = 0x100


class Channels(enum.Enum):
    MONO_LEFT = "mono_left"
    STEREO = "stereo"


class Power(enum.IntEnum):
    OFF = 0
    LOW = 1
    FULL = 2


@dataclasses.dataclass(frozen=True)
class I2sConfig:
    sample_rate: int = 16000
    bits_per_sample: int = 16
    channels: Channels = Channels.MONO_LEFT

    def __post_init__(self):
        if self.bits_per_sample not in (16, 32):
            raise ValueError("bits_per_sample must be 16 or 32")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


@dataclasses.dataclass
class ClockState:
    lrclk: int = 0
    bclk: int = 0
    bit_index: int = 0


class I2sDevice:
    """I2S microphone plus the SoC-side receiver and its registers.

    ``half_cycles_per_tick`` is how far one fabric tick advances BCLK; the
    default covers one channel slot.
    """

    def __init__(self, base: int, config: I2sConfig = I2sConfig(),
                 device_id: str = "i2s0", completion_irq: int = 42,
                 pm_base: Optional[int] = None,
                 half_cycles_per_tick: Optional[int] = None):
        self.device_id = device_id
        self.config = config
        self.completion_irq = completion_irq
        self.fabric = None
        self.half_cycles_per_tick = (half_cycles_per_tick
                                     or 2 * config.bits_per_sample)
        self.bank = MmioBank(base, WINDOW_SIZE, device_id)
        self.bank.read_hooks[STATUS] = self._read_status
        self.bank.read_hooks[DATA] = self._read_data
        self.bank.write_hooks[CTRL] = self._write_ctrl
        self.bank.write_hooks[IRQ_ACK] = self._write_irq_ack
        self.pm_bank = None
        if pm_base is not None:
            self.pm_bank = MmioBank(pm_base, WINDOW_SIZE, device_id + "-pm")
            self.pm_bank.poke(PM_CLK_EN, 1)
            self.pm_bank.poke(PM_POWER, Power.FULL)
            self.pm_bank.write_hooks[PM_CLK_EN] = self._write_clk_en
            self.pm_bank.write_hooks[PM_POWER] = self._write_power
        self.clock_enabled = True
        self.power = Power.FULL
        self._source: Deque[Tuple[int, int]] = collections.deque()
        self.reset()

    def reset(self) -> None:
        """Return the data path to its power-on state; the source is kept."""
        self.clock = ClockState()
        self.fifo: Deque[int] = collections.deque()
        self.dma_staging = bytearray()
        self.overrun = False
        self.dma_done_flag = False
        self.frames_produced = 0
        self.channel_log: List[int] = []
        self.sdata = 0
        self._shift: Optional[int] = None
        self._rx = 0
        self.bank.poke(CTRL, 0)

    # source

    @property
    def enabled(self) -> bool:
        return bool(self.bank.peek(CTRL) & CTRL_ENABLE)

    @property
    def dma_mode(self) -> bool:
        return bool(self.bank.peek(CTRL) & CTRL_DMA)

    @property
    def running(self) -> bool:
        return (self.enabled and self.clock_enabled
                and self.power == Power.FULL)

    @property
    def pending_frames(self) -> int:
        return len(self._source)

    @property
    def occupancy(self) -> int:
        return len(self.fifo)

    def attach_source(self, pcm: Sequence[int]) -> None:
        """Queue samples as the microphone's output stream.

        Mono samples all go to the left channel; stereo input is taken as
        interleaved L, R, L, R, ...
        """
        if self.enabled:
            raise errors.DeviceBusy("cannot attach a source while enabled")
        mask = (1 << self.config.bits_per_sample) - 1
        stereo = self.config.channels is Channels.STEREO
        for k, sample in enumerate(pcm):
            channel = k % 2 if stereo else 0
            self._source.append((channel, int(sample) & mask))

    # clocking

    def step_clock(self) -> None:
        """Advance BCLK by one half-cycle."""
        if not self.running:
            return
        clk = self.clock
        clk.bclk ^= 1
        if not clk.bclk:
            return
        bits = self.config.bits_per_sample
        if clk.bit_index == 0:
            if self._source and self._source[0][0] == clk.lrclk:
                self._shift = self._source.popleft()[1]
            else:
                self._shift = None
            self._rx = 0
        if self._shift is not None:
            self.sdata = (self._shift >> (bits - 1 - clk.bit_index)) & 1
            self._rx = (self._rx << 1) | self.sdata
        else:
            self.sdata = 0
        clk.bit_index += 1
        if clk.bit_index == bits:
            if self._shift is not None:
                self._push(self._rx, clk.lrclk)
                self._shift = None
            clk.bit_index = 0
            clk.lrclk ^= 1

    def _push(self, word: int, channel: int) -> None:
        self.frames_produced += 1
        self.channel_log.append(channel)
        if self.dma_mode:
            self.dma_staging += struct.pack("<I", word)
        elif len(self.fifo) >= FIFO_CAPACITY:
            self.overrun = True
        else:
            self.fifo.append(word)

    def _mid_slot(self) -> bool:
        return self._shift is not None

    def run_until_frames(self, n: int) -> None:
        target = self.frames_produced + n
        while self.frames_produced < target:
            if not self._source and not self._mid_slot():
                raise errors.SourceExhausted(
                    f"source ran dry after {n - (target - self.frames_produced)}"
                    f" of {n} frames")
            if not self.running:
                raise errors.CaptureTimeout("device is disabled or gated")
            self.step_clock()

    def tick(self) -> None:
        for _ in range(self.half_cycles_per_tick):
            self.step_clock()

    # DMA side

    def dma_take(self, max_bytes: int) -> bytes:
        chunk = bytes(self.dma_staging[:max_bytes])
        del self.dma_staging[:max_bytes]
        return chunk

    def dma_done(self, transfer) -> None:
        self.dma_done_flag = True
        self.bank.poke(CTRL, self.bank.peek(CTRL) & ~CTRL_DMA)

    # register hooks

    def _status_word(self) -> int:
        value = min(len(self.fifo), STATUS_OCCUPANCY)
        if self.dma_done_flag:
            value |= STATUS_DMA_DONE
        if self.overrun:
            value |= STATUS_OVERRUN
        return value

    def _read_status(self, ctx) -> int:
        return self._status_word()

    def _read_data(self, ctx) -> int:
        return self.fifo.popleft() if self.fifo else 0

    def _write_ctrl(self, ctx, value: int) -> None:
        if value & CTRL_DMA and value & CTRL_ENABLE:
            self.dma_done_flag = False
            if self.fabric is None:
                raise errors.DmaFault("device is not attached to a fabric")
            self.fabric.dma_program(ctx, self.device_id,
                                    self.bank.peek(DMA_ADDR),
                                    self.bank.peek(DMA_LEN),
                                    self.completion_irq)

    def _write_irq_ack(self, ctx, value: int) -> None:
        if value & STATUS_OVERRUN:
            self.overrun = False
        if value & STATUS_DMA_DONE:
            self.dma_done_flag = False
        self.bank.poke(IRQ_ACK, 0)

    def _write_clk_en(self, ctx, value: int) -> None:
        self.clock_enabled = bool(value & 1)

    def _write_power(self, ctx, value: int) -> None:
        self.power = Power(min(value, Power.FULL))


def samples_to_words(pcm: Iterable[int], bits_per_sample: int = 16) -> bytes:
    """Expected capture bytes: each sample right-aligned in a LE 32-bit word."""
    mask = (1 << bits_per_sample) - 1
    return b"".join(struct.pack("<I", int(s) & mask) for s in pcm)


def write_pcm(path, samples: Sequence[int], sample_rate: int = 16000,
              channels: int = 1) -> None:
    """Write signed 16-bit LE ``.pcm`` plus its ``.meta`` sidecar."""
    path = pathlib.Path(path)
    path.write_bytes(struct.pack(f"<{len(samples)}h", *samples))
    meta_path(path).write_text(f"rate={sample_rate},channels={channels}\n")


def read_pcm(path) -> Tuple[List[int], I2sConfig]:
    path = pathlib.Path(path)
    raw = path.read_bytes()
    if len(raw) % 2:
        raise ValueError(f"{path}: odd byte count for 16-bit samples")
    samples = list(struct.unpack(f"<{len(raw) // 2}h", raw))
    fields = {}
    sidecar = meta_path(path)
    if sidecar.exists():
        for item in sidecar.read_text().strip().split(","):
            key, _, value = item.partition("=")
            fields[key.strip()] = value.strip()
    channels = (Channels.STEREO if int(fields.get("channels", 1)) == 2
                else Channels.MONO_LEFT)
    config = I2sConfig(int(fields.get("rate", 16000)), 16, channels)
    return samples, config


def meta_path(path) -> pathlib.Path:
    path = pathlib.Path(path)
    return path.with_name(path.name + ".meta")


def words_to_samples(data: bytes, bits_per_sample: int = 16) -> List[int]:
    """Inverse of :func:`samples_to_words`, sign-extending each sample."""
    if len(data) % 4:
        raise ValueError("capture length is not a whole number of words")
    sign = 1 << (bits_per_sample - 1)
    mask = (1 << bits_per_sample) - 1
    return [((w & mask) ^ sign) - sign
            for (w,) in struct.iter_unpack("<I", data)]
