"""Trusted board boot: a signed, staged chain of trust.

Images are signed with Ed25519 over the SHA-256 digest of their payload.
Every stage after the boot ROM, except the last, carries the public key of
the stage that follows it as the first 32 bytes of its payload; the boot
ROM holds the root key that verifies the first bootloader.
"""

import dataclasses
import enum
import hashlib
import logging
import struct
from typing import Iterable, List, Optional, Sequence, Tuple

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import ed25519
from cryptography.hazmat.primitives import serialization

from tzperiph import devtree, errors
from tzperiph.soc_state import ProcessorContext

log = logging.getLogger(__name__)

KEY_SIZE = 32
SIGNATURE_SIZE = 64
IMAGE_MAGIC = b"FIMG"
_HEADER = struct.Struct(">4sBB")


class Stage(enum.IntEnum):
    BootRom = 0
    Bootloader = 1
    TrustedFirmware = 2
    TeeOs = 3
    DeviceTree = 4
    TrustedApp = 5

    @property
    def carries_next_key(self) -> bool:
        return Stage.Bootloader <= self < Stage.TrustedApp


@dataclasses.dataclass
class StageImage:
    stage: Stage
    payload: bytes
    signature: bytes = bytes(SIGNATURE_SIZE)
    signer_key_id: str = ""

    @property
    def next_key(self) -> Optional[bytes]:
        if not self.stage.carries_next_key:
            return None
        return self.payload[:KEY_SIZE]

    @property
    def body(self) -> bytes:
        return (self.payload[KEY_SIZE:] if self.stage.carries_next_key
                else self.payload)

    def encode(self) -> bytes:
        key_id = self.signer_key_id.encode()
        if len(key_id) > 255:
            raise errors.ImageFormatError("key id longer than 255 bytes")
        if len(self.signature) != SIGNATURE_SIZE:
            raise errors.ImageFormatError("signature must be 64 bytes")
        return (_HEADER.pack(IMAGE_MAGIC, int(self.stage), len(key_id))
                + key_id + struct.pack(">I", len(self.payload))
                + self.payload + self.signature)

    @classmethod
    def decode(cls, blob: bytes) -> "StageImage":
        if len(blob) < _HEADER.size:
            raise errors.ImageFormatError("truncated image header")
        magic, stage, key_len = _HEADER.unpack_from(blob)
        if magic != IMAGE_MAGIC:
            raise errors.ImageFormatError(f"bad magic {magic!r}")
        try:
            stage = Stage(stage)
        except ValueError:
            raise errors.ImageFormatError(f"unknown stage {stage}") from None
        pos = _HEADER.size
        key_id = blob[pos:pos + key_len]
        pos += key_len
        if len(blob) < pos + 4:
            raise errors.ImageFormatError("truncated payload length")
        (length,) = struct.unpack_from(">I", blob, pos)
        pos += 4
        if len(blob) != pos + length + SIGNATURE_SIZE:
            raise errors.ImageFormatError("image length does not match header")
        payload = blob[pos:pos + length]
        return cls(stage, payload, blob[pos + length:], key_id.decode())


def _private_key(private_key: bytes) -> ed25519.Ed25519PrivateKey:
    if not isinstance(private_key, (bytes, bytearray)) or len(private_key) != KEY_SIZE:
        raise errors.MalformedKey("private key must be a 32-byte Ed25519 seed")
    return ed25519.Ed25519PrivateKey.from_private_bytes(bytes(private_key))


def public_key_of(private_key: bytes) -> bytes:
    return _private_key(private_key).public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def key_id(public_key: bytes) -> str:
    return hashlib.sha256(public_key).hexdigest()[:16]


def sign_image(payload: bytes, private_key: bytes) -> bytes:
    digest = hashlib.sha256(payload).digest()
    return _private_key(private_key).sign(digest)


def verify_stage(image: StageImage, public_key: bytes) -> None:
    """Raise :class:`IntegrityError` unless ``image`` is signed by ``public_key``."""
    digest = hashlib.sha256(image.payload).digest()
    name = image.stage.name
    if len(public_key) != KEY_SIZE:
        raise errors.IntegrityError(name, "public key is not 32 bytes")
    try:
        key = ed25519.Ed25519PublicKey.from_public_bytes(bytes(public_key))
        key.verify(bytes(image.signature), digest)
    except (InvalidSignature, ValueError):
        raise errors.IntegrityError(
            name, f"signature does not verify over sha256={digest.hex()} "
                  f"(signer {image.signer_key_id or '?'})") from None


@dataclasses.dataclass
class BootReport:
    verified: List[str] = dataclasses.field(default_factory=list)
    failed_stage: Optional[str] = None
    configured_regions: List[Tuple[int, int]] = dataclasses.field(
        default_factory=list)
    detail: str = ""
    device_nodes: List[devtree.DeviceNode] = dataclasses.field(
        default_factory=list, repr=False)
    fabric: object = dataclasses.field(default=None, repr=False,
                                       compare=False)

    @property
    def ok(self) -> bool:
        return self.failed_stage is None and len(self.verified) == len(Stage)

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "verified": list(self.verified),
            "failed_stage": self.failed_stage,
            "configured_regions": [[b, s] for b, s in self.configured_regions],
            "detail": self.detail,
        }


def boot_chain(stages: Sequence[StageImage], root_public_key: bytes, fabric,
               carveouts: Iterable[Tuple[int, int]] = ()) -> BootReport:
    """Verify ``stages`` in order and program the TZASC on success.

    ``carveouts`` are extra secure ranges owned by the firmware itself (the
    TEE's own RAM); they are programmed but not listed in the report, which
    only names the peripheral windows taken from the verified device tree.
    """
    report = BootReport()
    order = list(Stage)
    got = [img.stage for img in stages]
    if got != order:
        # nothing is trusted when the chain itself is malformed
        bad = next(i for i, want in enumerate(order)
                   if i >= len(got) or got[i] != want)
        report.failed_stage = order[bad].name
        report.detail = f"stages out of canonical order: {[s.name for s in got]}"
        return report

    report.verified.append(Stage.BootRom.name)
    key = bytes(root_public_key)
    nodes = []
    for image in stages[1:]:
        try:
            verify_stage(image, key)
            if image.stage is Stage.DeviceTree:
                nodes = devtree.parse(image.body.decode("utf-8"))
        except (errors.IntegrityError, errors.DtsSyntaxError,
                errors.DuplicateNodeName, UnicodeDecodeError) as exc:
            report.failed_stage = image.stage.name
            report.detail = str(exc)
            log.info("boot halted at %s: %s", image.stage.name, exc)
            return report
        report.verified.append(image.stage.name)
        if image.next_key is not None:
            key = image.next_key

    firmware = ProcessorContext.firmware()
    for base, size in carveouts:
        fabric.configure_secure_region(firmware, base, size)
    for base, size in devtree.secure_regions(nodes):
        fabric.configure_secure_region(firmware, base, size)
        report.configured_regions.append((base, size))
    report.device_nodes = nodes
    report.fabric = fabric
    return report


def derive_stage_keys(seed: bytes) -> List[bytes]:
    """Deterministic private keys: index 0 is the root key, i signs stage i."""
    return [hashlib.sha256(seed + b"/key/" + bytes([i])).digest()
            for i in range(len(Stage))]


def build_chain(dts_text: str, seed: bytes = b"tzperiph",
                payload_size: int = 1024) -> Tuple[List[StageImage], bytes]:
    """Produce a signed fixture chain; returns (images, root public key).

    Non-root payloads are padded to ``payload_size`` bytes: filler bytes for
    code stages and trailing newlines for the device tree.
    """
    keys = derive_stage_keys(seed)
    images = [StageImage(Stage.BootRom,
                         _filler(seed, Stage.BootRom, payload_size))]
    for stage in order_after_rom():
        prefix = (public_key_of(keys[stage + 1]) if stage.carries_next_key
                  else b"")
        if stage is Stage.DeviceTree:
            body = dts_text.encode("utf-8")
            pad = payload_size - len(prefix) - len(body)
            body += b"\n" * max(pad, 0)
        else:
            body = _filler(seed, stage, max(payload_size - len(prefix), 0))
        payload = prefix + body
        # stage i is signed by the key announced in stage i-1
        signer = keys[0] if stage is Stage.Bootloader else keys[stage]
        images.append(StageImage(stage, payload, sign_image(payload, signer),
                                 key_id(public_key_of(signer))))
    return images, public_key_of(keys[0])


def order_after_rom() -> List[Stage]:
    return [s for s in Stage if s is not Stage.BootRom]


def _filler(seed: bytes, stage: Stage, size: int) -> bytes:
    out = bytearray()
    counter = 0
    while len(out) < size:
        out += hashlib.sha256(seed + bytes([stage, counter & 0xFF])
                              + counter.to_bytes(4, "big")).digest()
        counter += 1
    return bytes(out[:size])
