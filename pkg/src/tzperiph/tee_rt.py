"""Trusted-application runtime.

Sessions to pseudo-TAs, the checked four-step invocation from S-EL0 into
the secure kernel, HUK-based key derivation, obfuscation policies and
sealed storage.
"""

import dataclasses
import enum
import hashlib
import hmac
import itertools
import logging
import os
import pathlib
import struct
import threading
import uuid as uuid_mod
from typing import (Callable, Dict, Iterable, List, Mapping, Optional,
                    Sequence, Tuple, Union)

from tzperiph import aes_modes, errors
from tzperiph.mem_fabric import AccessKind
from tzperiph.platform import FUSE_BASE, PTA_STAGING, TA_MEMORY, Soc
from tzperiph.soc_state import ExceptionLevel, ProcessorContext, World

log = logging.getLogger(__name__)

MAX_PARAMS = 4
VALUE_SIZE = 16
KEY_SIZE = 16
NONCE_SIZE = 16
TAG_SIZE = 16
SEAL_MAGIC = b"FSEAL"

I2S_PTA_UUID = uuid_mod.UUID("6a1d1a6e-2f1c-4b4e-9c5e-49325350a7a1")
CMD_NOP = 0
CMD_CAPTURE_MMIO = 1
CMD_CAPTURE_DMA = 2


class Direction(enum.Enum):
    IN = "in"
    OUT = "out"
    INOUT = "inout"

    @property
    def reads(self) -> bool:
        return self is not Direction.OUT

    @property
    def writes(self) -> bool:
        return self is not Direction.IN


@dataclasses.dataclass
class Value:
    a: int = 0
    b: int = 0
    direction: Direction = Direction.IN


@dataclasses.dataclass
class MemRef:
    """A buffer in the TA's address space."""

    base: int
    size: int
    direction: Direction = Direction.INOUT


Param = Union[Value, MemRef]


@dataclasses.dataclass
class Staged:
    """A parameter as seen by the PTA, after staging into kernel memory."""

    param: Param
    addr: int = 0
    size: int = 0
    a: int = 0
    b: int = 0

    @property
    def is_memref(self) -> bool:
        return isinstance(self.param, MemRef)


class SessionState(enum.Enum):
    OPEN = "Open"
    CLOSED = "Closed"


PtaHandler = Callable[[ProcessorContext, List[Staged]], None]


@dataclasses.dataclass
class Pta:
    uuid: uuid_mod.UUID
    name: str
    commands: Dict[int, PtaHandler]


@dataclasses.dataclass
class Session:
    uuid: uuid_mod.UUID
    pta: Pta
    id: int
    state: SessionState = SessionState.OPEN


class TeeRuntime:
    """TEE OS services for one trusted application on ``soc``.

    The TA owns ``TA_MEMORY``; parameters must lie inside it.  A single lock
    serialises dispatch into drivers.
    """

    def __init__(self, soc: Soc, ta_memory: Tuple[int, int] = TA_MEMORY,
                 staging: Tuple[int, int] = PTA_STAGING):
        self.soc = soc
        self.fabric = soc.fabric
        self.ta_memory = ta_memory
        self.staging = staging
        self.ptas: Dict[uuid_mod.UUID, Pta] = {}
        self._session_ids = itertools.count(1)
        self._ta_brk = ta_memory[0]
        self._dispatch_lock = threading.Lock()

    def register_pta(self, pta: Pta) -> None:
        self.ptas[pta.uuid] = pta

    # TA memory

    def ta_alloc(self, size: int) -> int:
        addr = (self._ta_brk + 15) & ~15
        if addr + size > self.ta_memory[0] + self.ta_memory[1]:
            raise MemoryError("TA heap exhausted")
        self._ta_brk = addr + size
        return addr

    def ta_reset_heap(self) -> None:
        self._ta_brk = self.ta_memory[0]

    def ta_write(self, addr: int, data: bytes) -> None:
        self.soc.run_secure(lambda ctx: self.fabric.write(ctx, addr, data))

    def ta_read(self, addr: int, size: int) -> bytes:
        return self.soc.run_secure(lambda ctx: self.fabric.read(ctx, addr, size))

    def _in_ta_memory(self, base: int, size: int) -> bool:
        lo, n = self.ta_memory
        return lo <= base and base + size <= lo + n

    # sessions

    def open_session(self, uuid) -> Session:
        uuid = uuid_mod.UUID(bytes=uuid) if isinstance(uuid, bytes) else uuid
        pta = self.ptas.get(uuid)
        if pta is None:
            raise errors.UnknownUuid(str(uuid))
        self.fabric.counters.secure_syscalls += 1
        return Session(uuid, pta, next(self._session_ids))

    def close_session(self, session: Session) -> None:
        session.state = SessionState.CLOSED

    def invoke_command(self, session: Session, cmd_id: int,
                       params: Sequence[Param] = ()) -> List[Param]:
        """Invoke ``cmd_id`` on the session's PTA from the TA.

        The four steps run in order: check every memref against TA memory,
        stage all parameters into kernel memory, dispatch, copy results
        back into out-direction memrefs.
        """
        if session.state is not SessionState.OPEN:
            raise errors.SessionClosed(f"session {session.id} is closed")
        if len(params) > MAX_PARAMS:
            raise errors.BadParamRange(f"at most {MAX_PARAMS} parameters")
        return self.soc.run_secure(
            lambda ctx: self._invoke(ctx, session, cmd_id, list(params)))

    def _invoke(self, ctx, session, cmd_id, params) -> List[Param]:
        fabric = self.fabric
        saved_el = ctx.el
        ctx.el = ExceptionLevel.EL0
        try:
            # (1) access rights of every TA buffer
            for i, p in enumerate(params):
                if not isinstance(p, MemRef):
                    continue
                kind = AccessKind.WRITE if p.direction.writes else AccessKind.READ
                allowed = fabric.check_access(World.SECURE, p.base,
                                              max(p.size, 1), kind)
                if not (allowed and p.size >= 0
                        and self._in_ta_memory(p.base, p.size)):
                    raise errors.BadParamRange(
                        f"param {i}: [{p.base:#x}, +{p.size:#x}) outside TA memory")

            ctx.el = ExceptionLevel.EL1
            fabric.counters.el_transitions += 1

            # (2) stage parameters into secure kernel memory; out-only
            # buffers get space but no copy
            need = sum((p.size + 15) & ~15 for p in params
                       if isinstance(p, MemRef))
            if need > self.staging[1]:
                raise errors.BadParamRange("parameters exceed staging area")
            staged = []
            cursor = self.staging[0]
            for p in params:
                if isinstance(p, MemRef):
                    s = Staged(p, cursor, p.size)
                    if p.size and p.direction.reads:
                        fabric.memcpy(ctx, cursor, p.base, p.size)
                    cursor += (p.size + 15) & ~15
                else:
                    s = Staged(p, a=p.a, b=p.b)
                    fabric.counters.bytes_copied += VALUE_SIZE
                staged.append(s)

            # (3) system call into the PTA / driver routine
            fabric.counters.secure_syscalls += 1
            handler = session.pta.commands.get(cmd_id)
            if handler is None:
                raise errors.UnknownCommand(f"{session.pta.name}: {cmd_id}")
            with self._dispatch_lock:
                handler(ctx, staged)

            # (4) results back into the TA's buffers
            out: List[Param] = []
            for s in staged:
                p = s.param
                if isinstance(p, MemRef):
                    if p.direction.writes and s.size:
                        fabric.memcpy(ctx, p.base, s.addr, min(s.size, p.size))
                    out.append(MemRef(p.base, min(s.size, p.size), p.direction))
                else:
                    if p.direction.writes:
                        fabric.counters.bytes_copied += VALUE_SIZE
                    out.append(Value(s.a, s.b, p.direction))
            return out
        finally:
            ctx.el = saved_el

    # keys and storage

    def derive_key(self, ctx: ProcessorContext, context: str,
                   world: Optional[World] = None) -> bytes:
        """First 16 bytes of HMAC-SHA-256(HUK, world tag || context).

        The HUK is read from the secure fuse block, so ``ctx`` must be in the
        secure world.  ``world`` selects the derivation tag (the NS bit value
        of the requesting world) and defaults to ``ctx``'s own world.
        """
        try:
            huk = b"".join(
                struct.pack("<I", self.fabric.ioread32(ctx, FUSE_BASE + i))
                for i in range(0, self.soc.huk_len, 4))
        except errors.AccessDenied:
            raise errors.HukUnavailable(
                "hardware unique key is readable from the secure world only"
            ) from None
        world = ctx.world if world is None else world
        tag = bytes([0 if world is World.SECURE else 1])
        return hmac.new(huk, tag + context.encode("utf-8"),
                        hashlib.sha256).digest()[:KEY_SIZE]

    def seal(self, blob: bytes, context: str) -> bytes:
        def run(ctx):
            key = self.derive_key(ctx, context, World.SECURE)
            nonce = os.urandom(NONCE_SIZE)
            ct, tag = aes_modes.gcm_encrypt(key, nonce, blob,
                                            context.encode("utf-8"))
            ctx_bytes = context.encode("utf-8")
            if len(ctx_bytes) > 255:
                raise ValueError("context longer than 255 bytes")
            return (SEAL_MAGIC + bytes([len(ctx_bytes)]) + ctx_bytes + nonce
                    + tag + ct)
        return self.soc.run_secure(run)

    def unseal(self, sealed: bytes, context: str) -> bytes:
        if not sealed.startswith(SEAL_MAGIC) or len(sealed) < 6:
            raise ValueError("not a sealed blob")
        n = sealed[5]
        pos = 6 + n
        if len(sealed) < pos + NONCE_SIZE + TAG_SIZE:
            raise ValueError("truncated sealed blob")
        nonce = sealed[pos:pos + NONCE_SIZE]
        tag = sealed[pos + NONCE_SIZE:pos + NONCE_SIZE + TAG_SIZE]
        ct = sealed[pos + NONCE_SIZE + TAG_SIZE:]

        def run(ctx):
            key = self.derive_key(ctx, context, World.SECURE)
            return aes_modes.gcm_decrypt(key, nonce, ct, tag,
                                         context.encode("utf-8"))
        return self.soc.run_secure(run)

    def seal_to_file(self, path, blob: bytes, context: str) -> None:
        pathlib.Path(path).write_bytes(self.seal(blob, context))

    def unseal_file(self, path, context: str) -> bytes:
        return self.unseal(pathlib.Path(path).read_bytes(), context)


def i2s_pta(driver) -> Pta:
    """PTA exposing the trusted I2S driver to TAs.

    Capture commands take ``Value(a=n_frames)`` and an out memref of at
    least ``4 * n_frames`` bytes.
    """
    fabric = driver.soc.fabric

    def nop(ctx, staged):
        pass

    def capture(path):
        def run(ctx, staged):
            if (len(staged) != 2 or staged[0].is_memref
                    or not staged[1].is_memref):
                raise errors.BadParamRange("expected (Value, MemRef)")
            n_frames, out = staged[0].a, staged[1]
            if 4 * n_frames > out.param.size:
                raise errors.BadParamRange("output buffer too small")
            buf = (driver.capture_mmio(n_frames) if path == "mmio"
                   else driver.capture_dma(n_frames))
            if len(buf):
                fabric.memcpy(ctx, out.addr, buf.addr, len(buf))
            out.size = len(buf)
        return run

    return Pta(I2S_PTA_UUID, "i2s", {
        CMD_NOP: nop,
        CMD_CAPTURE_MMIO: capture("mmio"),
        CMD_CAPTURE_DMA: capture("dma"),
    })


# obfuscation

class Mode(enum.IntEnum):
    AesEcb = 1
    AesCbc = 2
    AesCtr = 3
    AesGcm = 4
    Filter = 5
    Convert = 6

    @property
    def is_crypto(self) -> bool:
        return self <= Mode.AesGcm


DEFAULT_COMMANDS = {
    "lights_on": 0x0101,
    "lights_off": 0x0102,
    "lock_door": 0x0201,
    "unlock_door": 0x0202,
    "volume_up": 0x0301,
    "volume_down": 0x0302,
}


@dataclasses.dataclass(frozen=True)
class ObfuscationPolicy:
    mode: Mode
    key_context: str = "obfuscation"
    grammar: frozenset = frozenset(DEFAULT_COMMANDS)
    command_map: Mapping[str, int] = dataclasses.field(
        default_factory=lambda: dict(DEFAULT_COMMANDS))

    def __post_init__(self):
        if not self.mode.is_crypto and not self.grammar:
            raise ValueError(f"{self.mode.name} needs a grammar")


_PAYLOAD_HEADER = 1 + NONCE_SIZE + TAG_SIZE


@dataclasses.dataclass(frozen=True)
class ObfuscatedPayload:
    mode: Mode
    nonce: bytes
    auth_tag: bytes
    body: bytes

    def encode(self) -> bytes:
        return bytes([self.mode]) + self.nonce + self.auth_tag + self.body

    @classmethod
    def decode(cls, blob: bytes) -> "ObfuscatedPayload":
        if len(blob) < _PAYLOAD_HEADER:
            raise ValueError("payload shorter than its header")
        try:
            mode = Mode(blob[0])
        except ValueError:
            raise ValueError(f"unknown mode tag {blob[0]}") from None
        return cls(mode, blob[1:1 + NONCE_SIZE],
                   blob[1 + NONCE_SIZE:_PAYLOAD_HEADER], blob[_PAYLOAD_HEADER:])


_ZERO = bytes(16)
_gcm_nonces = set()
_gcm_nonce_lock = threading.Lock()

Segment = Tuple[str, bytes]


def filter(segments: Iterable[Segment], grammar: Iterable[str]) -> bytes:
    """Keep only segments whose label is in ``grammar``."""
    keep = set(grammar)
    return b"".join(data for label, data in segments if label in keep)


def convert(segments: Iterable[Segment],
            command_map: Mapping[str, int]) -> List[int]:
    """Map recognised labels to command ids; everything else is dropped."""
    return [command_map[label] for label, _ in segments if label in command_map]


def encode_commands(commands: Sequence[int]) -> bytes:
    return struct.pack(f">{len(commands)}H", *commands)


def decode_commands(body: bytes) -> List[int]:
    return list(struct.unpack(f">{len(body) // 2}H", body))


def obfuscate(policy: ObfuscationPolicy, data, key: Optional[bytes] = None,
              nonce: Optional[bytes] = None) -> ObfuscatedPayload:
    """Apply ``policy`` to ``data``.

    Crypto modes take plaintext bytes; Filter and Convert take a list of
    ``(label, bytes)`` segments.
    """
    mode = policy.mode
    if mode is Mode.Filter:
        return ObfuscatedPayload(mode, _ZERO, _ZERO,
                                 filter(data, policy.grammar))
    if mode is Mode.Convert:
        table = {k: v for k, v in policy.command_map.items()
                 if k in policy.grammar}
        return ObfuscatedPayload(mode, _ZERO, _ZERO,
                                 encode_commands(convert(data, table)))
    if key is None or len(key) != KEY_SIZE:
        raise ValueError("crypto modes need a 16-byte key")
    plaintext = bytes(data)
    if mode is Mode.AesEcb:
        return ObfuscatedPayload(mode, _ZERO, _ZERO,
                                 aes_modes.ecb_encrypt(key, plaintext))
    if nonce is None or len(nonce) != NONCE_SIZE:
        raise ValueError(f"{mode.name} needs a 16-byte nonce")
    if mode is Mode.AesCbc:
        body = aes_modes.cbc_encrypt(key, nonce, plaintext)
        return ObfuscatedPayload(mode, bytes(nonce), _ZERO, body)
    if mode is Mode.AesCtr:
        body = aes_modes.ctr_xcrypt(key, nonce, plaintext)
        return ObfuscatedPayload(mode, bytes(nonce), _ZERO, body)
    fingerprint = hashlib.sha256(bytes(key) + bytes(nonce)).digest()
    with _gcm_nonce_lock:
        if fingerprint in _gcm_nonces:
            raise errors.BadNonceReuse("GCM nonce already used with this key")
        _gcm_nonces.add(fingerprint)
    body, tag = aes_modes.gcm_encrypt(key, nonce, plaintext)
    return ObfuscatedPayload(mode, bytes(nonce), tag, body)


def deobfuscate(payload: ObfuscatedPayload, key: bytes) -> bytes:
    mode = payload.mode
    if not mode.is_crypto:
        raise ValueError(f"{mode.name} payloads cannot be reversed")
    if mode is Mode.AesEcb:
        return aes_modes.ecb_decrypt(key, payload.body)
    if mode is Mode.AesCbc:
        return aes_modes.cbc_decrypt(key, payload.nonce, payload.body)
    if mode is Mode.AesCtr:
        return aes_modes.ctr_xcrypt(key, payload.nonce, payload.body)
    return aes_modes.gcm_decrypt(key, payload.nonce, payload.body,
                                 payload.auth_tag)
