"""Independent reference implementations used as test oracles.

Nothing here imports the package under test.
"""

import hashlib
from fractions import Fraction


# HMAC-SHA-256 built from the hash alone

def hmac_sha256(key: bytes, msg: bytes) -> bytes:
    block = 64
    if len(key) > block:
        key = hashlib.sha256(key).digest()
    key = key.ljust(block, b"\x00")
    inner = hashlib.sha256(bytes(k ^ 0x36 for k in key) + msg).digest()
    return hashlib.sha256(bytes(k ^ 0x5C for k in key) + inner).digest()


def derive_key_ref(huk: bytes, secure: bool, context: str) -> bytes:
    tag = b"\x00" if secure else b"\x01"
    return hmac_sha256(huk, tag + context.encode())[:16]


# Ed25519 straight from the curve equations

_P = 2 ** 255 - 19
_L = 2 ** 252 + 27742317777372353535851937790883648493
_D = -121665 * pow(121666, _P - 2, _P) % _P
_I = pow(2, (_P - 1) // 4, _P)


def _xrecover(y):
    xx = (y * y - 1) * pow(_D * y * y + 1, _P - 2, _P)
    x = pow(xx, (_P + 3) // 8, _P)
    if (x * x - xx) % _P:
        x = x * _I % _P
    if x % 2:
        x = _P - x
    return x


_BY = 4 * pow(5, _P - 2, _P) % _P
_B = (_xrecover(_BY), _BY)


def _add(a, b):
    (x1, y1), (x2, y2) = a, b
    t = _D * x1 * x2 * y1 * y2
    x3 = (x1 * y2 + x2 * y1) * pow(1 + t, _P - 2, _P)
    y3 = (y1 * y2 + x1 * x2) * pow(1 - t, _P - 2, _P)
    return x3 % _P, y3 % _P


def _mul(point, e):
    acc = (0, 1)
    while e:
        if e & 1:
            acc = _add(acc, point)
        point = _add(point, point)
        e >>= 1
    return acc


def _enc(point):
    x, y = point
    return (y | ((x & 1) << 255)).to_bytes(32, "little")


def _h(m):
    return int.from_bytes(hashlib.sha512(m).digest(), "little")


def _secret(sk: bytes):
    h = hashlib.sha512(sk).digest()
    a = int.from_bytes(h[:32], "little")
    a &= (1 << 254) - 8
    a |= 1 << 254
    return a, h[32:]


def ed25519_public(sk: bytes) -> bytes:
    a, _ = _secret(sk)
    return _enc(_mul(_B, a))


def ed25519_sign(sk: bytes, msg: bytes) -> bytes:
    a, prefix = _secret(sk)
    pk = _enc(_mul(_B, a))
    r = _h(prefix + msg) % _L
    big_r = _enc(_mul(_B, r))
    s = (r + _h(big_r + pk + msg) * a) % _L
    return big_r + s.to_bytes(32, "little")


# I2S: serialise samples to a bit list, then regroup

def i2s_bits(samples, bits):
    """MSB-first bit stream of the left slots of a mono capture."""
    out = []
    for s in samples:
        word = s & ((1 << bits) - 1)
        out.extend((word >> (bits - 1 - i)) & 1 for i in range(bits))
        out.extend([0] * bits)  # idle right slot
    return out


def i2s_capture_ref(samples, bits=16) -> bytes:
    stream = i2s_bits(samples, bits)
    words = []
    for slot in range(0, len(stream), 2 * bits):
        w = 0
        for b in stream[slot:slot + bits]:
            w = w * 2 + b
        words.append(w)
    return b"".join(w.to_bytes(4, "little") for w in words)


# TZASC by enumeration

def normal_access_denied(addr, length, base, size):
    """True iff any byte of the access falls in the secure range."""
    secure = set(range(base, base + size))
    return any(a in secure for a in range(addr, addr + length))


# Percentages by exact rational arithmetic

def pct_ref(part, total):
    q = Fraction(100 * part, total)
    # half-up at two decimals
    scaled = q * 100
    whole = scaled.numerator // scaled.denominator
    if scaled - whole >= Fraction(1, 2):
        whole += 1
    return whole / 100


def lcs_brute(a: bytes, b: bytes) -> int:
    best = 0
    for i in range(len(a)):
        for j in range(len(b)):
            k = 0
            while i + k < len(a) and j + k < len(b) and a[i + k] == b[j + k]:
                k += 1
            best = max(best, k)
    return best
