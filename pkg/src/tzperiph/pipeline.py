"""End-to-end recording: capture in the TEE, obfuscate, hand off to the REE.

The TA opens a session to the I2S PTA, captures into its own memory,
derives its key from the HUK and gives only the obfuscated payload to the
supplicant.
"""

import csv
import io
import logging
import os
import random
from typing import List, Optional, Sequence, Tuple

from tzperiph import drivers, i2s_dev, tee_rt
from tzperiph.platform import Soc, fixture_text
from tzperiph.tee_rt import Direction, MemRef, Mode, ObfuscationPolicy, Value

log = logging.getLogger(__name__)

Label = Tuple[str, int, int]

POLICY_NAMES = {
    "ecb": Mode.AesEcb,
    "cbc": Mode.AesCbc,
    "ctr": Mode.AesCtr,
    "gcm": Mode.AesGcm,
    "filter": Mode.Filter,
    "convert": Mode.Convert,
}


def policy_from_name(name: str, key_context: str = "obfuscation") -> ObfuscationPolicy:
    try:
        mode = POLICY_NAMES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown policy {name!r}") from None
    return ObfuscationPolicy(mode, key_context)


def fixture_pcm(n_frames: int, seed: int = 0) -> List[int]:
    """Deterministic signed 16-bit samples."""
    rng = random.Random(seed)
    return [rng.randint(-32768, 32767) for _ in range(n_frames)]


def read_labels(text: str) -> List[Label]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append((r["label"].strip(), int(r["start_frame"]), int(r["frames"])))
    return rows


def fixture_labels() -> List[Label]:
    return read_labels(fixture_text("fixture_labels.csv"))


def tile_labels(labels: Sequence[Label], n_frames: int) -> List[Label]:
    """Repeat a label pattern until it covers ``n_frames``, clipping the end."""
    if not labels:
        return []
    period = max(start + n for _, start, n in labels)
    out = []
    offset = 0
    while offset < n_frames:
        for label, start, n in labels:
            lo = offset + start
            if lo >= n_frames:
                break
            out.append((label, lo, min(n, n_frames - lo)))
        offset += period
    return out


def segment(captured: bytes, labels: Sequence[Label]) -> List[Tuple[str, bytes]]:
    return [(label, captured[4 * start:4 * (start + n)])
            for label, start, n in labels]


class Recorder:
    """The recording TA plus both driver halves on a booted SoC."""

    def __init__(self, soc: Soc, boot_report, policy: ObfuscationPolicy,
                 supplicant, path: str = "mmio",
                 rng: Optional[random.Random] = None):
        if path not in ("mmio", "dma"):
            raise ValueError(f"unknown capture path {path!r}")
        self.soc = soc
        self.policy = policy
        self.supplicant = supplicant
        self.path = path
        self.rng = rng
        self.ree_driver = drivers.UntrustedDriver(soc)
        self.ree_driver.clock_enable()
        self.ree_driver.power_set(i2s_dev.Power.FULL)
        self.driver = drivers.trusted_init(soc, soc.i2s_node(), boot_report)
        self.runtime = tee_rt.TeeRuntime(soc)
        self.runtime.register_pta(tee_rt.i2s_pta(self.driver))
        self.session = self.runtime.open_session(tee_rt.I2S_PTA_UUID)
        self._key_addr = 0
        self.last_capture_addr = None

    def _nonce(self) -> bytes:
        if self.rng is not None:
            return self.rng.getrandbits(128).to_bytes(16, "big")
        return os.urandom(16)

    def _key(self) -> bytes:
        key = self.soc.run_secure(
            lambda ctx: self.runtime.derive_key(ctx, self.policy.key_context))
        # the TA keeps its key in private memory
        self.runtime.ta_write(self._key_addr, key)
        return key

    def capture(self, n_frames: int) -> bytes:
        """Capture into TA memory; return the bytes as the TA sees them."""
        self.runtime.ta_reset_heap()
        self._key_addr = self.runtime.ta_alloc(tee_rt.KEY_SIZE)
        addr = self.runtime.ta_alloc(max(4 * n_frames, 1))
        cmd = (tee_rt.CMD_CAPTURE_MMIO if self.path == "mmio"
               else tee_rt.CMD_CAPTURE_DMA)
        self.runtime.invoke_command(self.session, cmd, [
            Value(n_frames), MemRef(addr, 4 * n_frames, Direction.OUT)])
        self.last_capture_addr = addr
        return self.runtime.ta_read(addr, 4 * n_frames)

    def record(self, n_frames: int, labels: Optional[Sequence[Label]] = None,
               nonce: Optional[bytes] = None) -> tee_rt.ObfuscatedPayload:
        captured = self.capture(n_frames)
        if self.policy.mode.is_crypto:
            key = self._key()
            if nonce is None and self.policy.mode is not Mode.AesEcb:
                nonce = self._nonce()
            payload = tee_rt.obfuscate(self.policy, captured, key, nonce)
        else:
            if labels is None:
                labels = tile_labels(fixture_labels(), n_frames)
            payload = tee_rt.obfuscate(self.policy, segment(captured, labels))
        self.supplicant.handoff(payload.encode())
        log.info("recorded %d frames via %s as %s (%d bytes)", n_frames,
                 self.path, self.policy.mode.name, len(payload.body))
        return payload

    def key(self) -> bytes:
        """The TA's key, for tests that need to check payloads."""
        return self.soc.run_secure(
            lambda ctx: self.runtime.derive_key(ctx, self.policy.key_context))

    def close(self) -> None:
        self.runtime.close_session(self.session)
        self.driver.cleanup()
        self.ree_driver.cleanup()
