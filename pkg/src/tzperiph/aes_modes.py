"""AES modes of operation (ECB, CBC, CTR, GCM) over a raw block cipher.

Only the AES block transform comes from ``cryptography``; chaining,
counters, padding and GHASH are implemented here.  GCM accepts IVs of any
length: 96-bit IVs use the direct ``IV || 0^31 || 1`` counter block, any
other length derives it with GHASH.
"""

import functools
import hmac
from typing import List, Tuple

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from tzperiph.errors import TagMismatch

BLOCK = 16
_R = 0xE1 << 120
_MASK128 = (1 << 128) - 1


def _xor(a: bytes, b: bytes) -> bytes:
    n = len(a)
    return (int.from_bytes(a, "big") ^ int.from_bytes(b[:n], "big")).to_bytes(
        n, "big")


def _check_key(key: bytes) -> bytes:
    if len(key) not in (16, 24, 32):
        raise ValueError("AES key must be 16, 24 or 32 bytes")
    return bytes(key)


def _block_encrypt(key: bytes, data: bytes) -> bytes:
    enc = Cipher(algorithms.AES(_check_key(key)), modes.ECB()).encryptor()
    return enc.update(data) + enc.finalize()


def _block_decrypt(key: bytes, data: bytes) -> bytes:
    dec = Cipher(algorithms.AES(_check_key(key)), modes.ECB()).decryptor()
    return dec.update(data) + dec.finalize()


def pad(data: bytes) -> bytes:
    n = BLOCK - len(data) % BLOCK
    return data + bytes([n]) * n


def unpad(data: bytes) -> bytes:
    if not data or len(data) % BLOCK:
        raise ValueError("padded data is not a whole number of blocks")
    n = data[-1]
    if not 1 <= n <= BLOCK or data[-n:] != bytes([n]) * n:
        raise ValueError("bad padding")
    return data[:-n]


def ecb_encrypt(key: bytes, plaintext: bytes) -> bytes:
    return _block_encrypt(key, pad(plaintext))


def ecb_decrypt(key: bytes, ciphertext: bytes) -> bytes:
    return unpad(_block_decrypt(key, ciphertext))


def cbc_encrypt(key: bytes, iv: bytes, plaintext: bytes) -> bytes:
    if len(iv) != BLOCK:
        raise ValueError("CBC IV must be 16 bytes")
    enc = Cipher(algorithms.AES(_check_key(key)), modes.ECB()).encryptor()
    data = pad(plaintext)
    out = bytearray()
    prev = int.from_bytes(iv, "big")
    for i in range(0, len(data), BLOCK):
        block = (int.from_bytes(data[i:i + BLOCK], "big") ^ prev).to_bytes(
            BLOCK, "big")
        cipher_block = enc.update(block)
        out += cipher_block
        prev = int.from_bytes(cipher_block, "big")
    return bytes(out)


def cbc_decrypt(key: bytes, iv: bytes, ciphertext: bytes) -> bytes:
    if len(iv) != BLOCK or len(ciphertext) % BLOCK:
        raise ValueError("bad CBC IV or ciphertext length")
    decrypted = _block_decrypt(key, ciphertext)
    chain = bytes(iv) + ciphertext[:-BLOCK]
    return unpad(_xor(decrypted, chain))


def _counter_blocks(start: int, count: int, inc32: bool) -> bytes:
    if inc32:
        high, low = start >> 32 << 32, start & 0xFFFFFFFF
        return b"".join((high | ((low + i) & 0xFFFFFFFF)).to_bytes(BLOCK, "big")
                        for i in range(count))
    return b"".join(((start + i) & _MASK128).to_bytes(BLOCK, "big")
                    for i in range(count))


def _keystream_xor(key: bytes, counter: int, data: bytes,
                   inc32: bool = False) -> bytes:
    if not data:
        return b""
    nblocks = -(-len(data) // BLOCK)
    stream = _block_encrypt(key, _counter_blocks(counter, nblocks, inc32))
    return _xor(data, stream)


def ctr_xcrypt(key: bytes, nonce: bytes, data: bytes) -> bytes:
    """CTR with a full 128-bit big-endian counter starting at ``nonce``."""
    if len(nonce) != BLOCK:
        raise ValueError("CTR initial counter block must be 16 bytes")
    return _keystream_xor(key, int.from_bytes(nonce, "big"), data)


# GHASH

def _mulx_table(h: int) -> List[int]:
    """``h * x**k`` for k = 0..127 in GCM's reflected bit order."""
    out = []
    v = h
    for _ in range(128):
        out.append(v)
        v = (v >> 1) ^ _R if v & 1 else v >> 1
    return out


@functools.lru_cache(maxsize=32)
def _byte_tables(h: int) -> Tuple[Tuple[int, ...], ...]:
    """Per byte position i, the products ``H * (b placed at byte i)``."""
    powers = _mulx_table(h)
    tables = []
    for i in range(BLOCK):
        table = [0] * 256
        for j in range(8):
            table[0x80 >> j] = powers[8 * i + j]
        for b in range(1, 256):
            low = b & -b
            if b != low:
                table[b] = table[b ^ low] ^ table[low]
        tables.append(tuple(table))
    return tuple(tables)


def gf_mult(x: int, y: int) -> int:
    """Bitwise GF(2^128) multiply (slow reference, used for table checks)."""
    z, v = 0, y
    for i in range(127, -1, -1):
        if (x >> i) & 1:
            z ^= v
        v = (v >> 1) ^ _R if v & 1 else v >> 1
    return z


def ghash(h: bytes, data: bytes) -> bytes:
    """GHASH over ``data``, which is zero-padded to whole blocks."""
    tables = _byte_tables(int.from_bytes(h, "big"))
    if len(data) % BLOCK:
        data = data + bytes(BLOCK - len(data) % BLOCK)
    y = 0
    for i in range(0, len(data), BLOCK):
        x = (y ^ int.from_bytes(data[i:i + BLOCK], "big")).to_bytes(BLOCK, "big")
        y = 0
        for pos, byte in enumerate(x):
            if byte:
                y ^= tables[pos][byte]
    return y.to_bytes(BLOCK, "big")


def _gcm_setup(key: bytes, iv: bytes) -> Tuple[bytes, int]:
    if not iv:
        raise ValueError("GCM IV must not be empty")
    h = _block_encrypt(key, bytes(BLOCK))
    if len(iv) == 12:
        j0 = int.from_bytes(iv + b"\x00\x00\x00\x01", "big")
    else:
        lengths = (8 * len(iv)).to_bytes(16, "big")
        j0 = int.from_bytes(ghash(h, _padded(iv) + lengths), "big")
    return h, j0


def _padded(data: bytes) -> bytes:
    rem = len(data) % BLOCK
    return data + bytes(BLOCK - rem) if rem else data


def _gcm_tag(key, h, j0, aad, ciphertext) -> bytes:
    lengths = ((8 * len(aad)).to_bytes(8, "big")
               + (8 * len(ciphertext)).to_bytes(8, "big"))
    s = ghash(h, _padded(aad) + _padded(ciphertext) + lengths)
    return _xor(s, _block_encrypt(key, j0.to_bytes(BLOCK, "big")))


def _inc32(j0: int) -> int:
    return (j0 >> 32 << 32) | ((j0 + 1) & 0xFFFFFFFF)


def gcm_encrypt(key: bytes, iv: bytes, plaintext: bytes,
                aad: bytes = b"") -> Tuple[bytes, bytes]:
    """Return ``(ciphertext, 16-byte tag)``."""
    h, j0 = _gcm_setup(key, iv)
    ciphertext = _keystream_xor(key, _inc32(j0), plaintext, inc32=True)
    return ciphertext, _gcm_tag(key, h, j0, aad, ciphertext)


def gcm_decrypt(key: bytes, iv: bytes, ciphertext: bytes, tag: bytes,
                aad: bytes = b"") -> bytes:
    """Verify ``tag`` then decrypt; nothing is released on mismatch."""
    h, j0 = _gcm_setup(key, iv)
    expected = _gcm_tag(key, h, j0, aad, ciphertext)
    if not hmac.compare_digest(expected, bytes(tag)):
        raise TagMismatch("GCM authentication tag mismatch")
    return _keystream_xor(key, _inc32(j0), ciphertext, inc32=True)
