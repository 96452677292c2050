import os

import pytest
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from hypothesis import given, strategies as st

from tzperiph import aes_modes, errors

H = bytes.fromhex

# NIST GCM test cases 1-6 (AES-128)
K3 = "feffe9928665731c6d6a8f9467308308"
P3 = ("d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72"
      "1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b391aafd255")
P4 = P3[:120]
A4 = "feedfacedeadbeeffeedfacedeadbeefabaddad2"
GCM_VECTORS = [
    ("00" * 16, "00" * 12, "", "", "", "58e2fccefa7e3061367f1d57a4e7455a"),
    ("00" * 16, "00" * 12, "00" * 16, "", "0388dace60b6a392f328c2b971b2fe78",
     "ab6e47d42cec13bdf53a67b21257bddf"),
    (K3, "cafebabefacedbaddecaf888", P3, "",
     "42831ec2217774244b7221b784d0d49ce3aa212f2c02a4e035c17e2329aca12e"
     "21d514b25466931c7d8f6a5aac84aa051ba30b396a0aac973d58e091473f5985",
     "4d5c2af327cd64a62cf35abd2ba6fab4"),
    (K3, "cafebabefacedbaddecaf888", P4, A4,
     "42831ec2217774244b7221b784d0d49ce3aa212f2c02a4e035c17e2329aca12e"
     "21d514b25466931c7d8f6a5aac84aa051ba30b396a0aac973d58e091",
     "5bc94fbc3221a5db94fae95ae7121a47"),
    (K3, "cafebabefacedbad", P4, A4,
     "61353b4c2806934a777ff51fa22a4755699b2a714fcdc6f83766e5f97b6c7423"
     "73806900e49f24b22b097544d4896b424989b5e1ebac0f07c23f4598",
     "3612d2e79e3b0785561be14aaca2fccb"),
    (K3, "9313225df88406e555909c5aff5269aa6a7a9538534f7da1e4c303d2a318a728"
         "c3c0c95156809539fcf0e2429a6b525416aedbf5a0de6a57a637b39b", P4, A4,
     "8ce24998625615b603a033aca13fb894be9112a5c3a211a8ba262a3cca7e2ca7"
     "01e4a9a4fba43c90ccdcb281d48c7c6fd62875d2aca417034c34aee5",
     "619cc5aefffe0bfa462af43c1699d050"),
]

# 128-bit IV, pinned from OpenSSL's AES-GCM
GCM128_KEY = bytes(range(16))
GCM128_IV = bytes(range(16, 32))
GCM128_PT = bytes(range(32, 64))
GCM128_CT = H("e5bfd595599702affe31e9a98d0201f8c5cc12ac593391cf91bfbdad7f7e4ddf")
GCM128_TAG = H("3fd958f0e3832fe2a020cab24a5b7c82")
GCM128_EMPTY_TAG = H("48e8c88eadb042bfce785187d01fbdd4")

# SP 800-38A, AES-128
SP_KEY = H("2b7e151628aed2a6abf7158809cf4f3c")
SP_PT = H("6bc1bee22e409f96e93d7e117393172aae2d8a571e03ac9c9eb76fac45af8e51"
          "30c81c46a35ce411e5fbc1191a0a52eff69f2445df4f9b17ad2b417be66c3710")
SP_ECB = H("3ad77bb40d7a3660a89ecaf32466ef97f5d3d58503b9699de785895a96fdbaaf"
           "43b1cd7f598ece23881b00e3ed0306887b0c785e27e8ad3f8223207104725dd4")
SP_CBC_IV = H("000102030405060708090a0b0c0d0e0f")
SP_CBC = H("7649abac8119b246cee98e9b12e9197d5086cb9b507219ee95db113a917678b2"
           "73bed6b8e3c1743b7116e69e222295163ff1caa1681fac09120eca307586e1a7")
SP_CTR_IV = H("f0f1f2f3f4f5f6f7f8f9fafbfcfdfeff")
SP_CTR = H("874d6191b620e3261bef6864990db6ce9806f66b7970fdff8617187bb9fffdff"
           "5ae4df3edbd5d35e5b4f09020db03eab1e031dda2fbe03d1792170a0f3009cee")


def openssl(mode, key, data, encrypt=True):
    c = Cipher(algorithms.AES(key), mode)
    op = c.encryptor() if encrypt else c.decryptor()
    return op.update(data) + op.finalize()


@pytest.mark.parametrize("k, iv, p, a, c, t", GCM_VECTORS)
def test_gcm_vectors(k, iv, p, a, c, t):
    ct, tag = aes_modes.gcm_encrypt(H(k), H(iv), H(p), H(a))
    assert (ct, tag) == (H(c), H(t))
    assert aes_modes.gcm_decrypt(H(k), H(iv), ct, tag, H(a)) == H(p)
    # the vectors themselves check out against OpenSSL
    assert AESGCM(H(k)).encrypt(H(iv), H(p), H(a) or None) == H(c) + H(t)


def test_gcm_128_bit_iv_pinned():
    assert aes_modes.gcm_encrypt(GCM128_KEY, GCM128_IV, GCM128_PT) == (
        GCM128_CT, GCM128_TAG)
    assert aes_modes.gcm_encrypt(GCM128_KEY, GCM128_IV, b"") == (
        b"", GCM128_EMPTY_TAG)
    assert aes_modes.gcm_decrypt(GCM128_KEY, GCM128_IV, b"",
                                 GCM128_EMPTY_TAG) == b""


@given(st.binary(max_size=200), st.binary(max_size=40),
       st.integers(1, 64))
def test_gcm_matches_openssl(data, aad, iv_len):
    key, iv = os.urandom(16), os.urandom(iv_len)
    if iv_len < 8:
        iv = iv.ljust(8, b"\0")
    ct, tag = aes_modes.gcm_encrypt(key, iv, data, aad)
    assert ct + tag == AESGCM(key).encrypt(iv, data, aad or None)


def test_gcm_rejects_tamper():
    ct, tag = aes_modes.gcm_encrypt(GCM128_KEY, GCM128_IV, GCM128_PT, b"h")
    with pytest.raises(errors.TagMismatch):
        aes_modes.gcm_decrypt(GCM128_KEY, GCM128_IV, ct, tag, b"x")
    with pytest.raises(errors.TagMismatch):
        aes_modes.gcm_decrypt(GCM128_KEY, GCM128_IV, ct[:-1], tag, b"h")


def test_gcm_empty_iv():
    with pytest.raises(ValueError):
        aes_modes.gcm_encrypt(GCM128_KEY, b"", b"x")


@given(st.integers(0, 2 ** 128 - 1), st.integers(0, 2 ** 128 - 1))
def test_ghash_tables_match_bitwise_multiply(x, h):
    hb = h.to_bytes(16, "big")
    assert aes_modes.ghash(hb, x.to_bytes(16, "big")) == \
        aes_modes.gf_mult(x, h).to_bytes(16, "big")


def test_sp800_38a_ecb():
    assert aes_modes.ecb_encrypt(SP_KEY, SP_PT)[:64] == SP_ECB
    assert openssl(modes.ECB(), SP_KEY, SP_PT) == SP_ECB


def test_sp800_38a_cbc():
    assert aes_modes.cbc_encrypt(SP_KEY, SP_CBC_IV, SP_PT)[:64] == SP_CBC
    assert openssl(modes.CBC(SP_CBC_IV), SP_KEY, SP_PT) == SP_CBC


def test_sp800_38a_ctr():
    assert aes_modes.ctr_xcrypt(SP_KEY, SP_CTR_IV, SP_PT) == SP_CTR
    assert openssl(modes.CTR(SP_CTR_IV), SP_KEY, SP_PT) == SP_CTR


def test_ctr_counter_wraps_128_bits():
    iv = b"\xff" * 16
    data = os.urandom(48)
    assert aes_modes.ctr_xcrypt(SP_KEY, iv, data) == \
        openssl(modes.CTR(iv), SP_KEY, data)


def test_padding_full_block():
    assert aes_modes.pad(b"") == b"\x10" * 16
    assert aes_modes.pad(b"a" * 16)[16:] == b"\x10" * 16
    assert aes_modes.pad(b"abc")[-1] == 13
    with pytest.raises(ValueError):
        aes_modes.unpad(b"a" * 15 + b"\x00")
    with pytest.raises(ValueError):
        aes_modes.unpad(b"a" * 14 + b"\x01\x02")


def test_ecb_identical_blocks():
    ct = aes_modes.ecb_encrypt(SP_KEY, b"A" * 32)
    assert ct[:16] == ct[16:32]


@given(st.binary(max_size=300))
def test_round_trips_match_openssl(data):
    key, iv = os.urandom(16), os.urandom(16)
    padded = aes_modes.pad(data)
    ecb = aes_modes.ecb_encrypt(key, data)
    assert ecb == openssl(modes.ECB(), key, padded)
    assert aes_modes.ecb_decrypt(key, ecb) == data
    cbc = aes_modes.cbc_encrypt(key, iv, data)
    assert cbc == openssl(modes.CBC(iv), key, padded)
    assert aes_modes.cbc_decrypt(key, iv, cbc) == data
    ctr = aes_modes.ctr_xcrypt(key, iv, data)
    assert ctr == openssl(modes.CTR(iv), key, data)
    assert aes_modes.ctr_xcrypt(key, iv, ctr) == data


def test_key_sizes():
    for n in (16, 24, 32):
        key = os.urandom(n)
        ct, tag = aes_modes.gcm_encrypt(key, b"\0" * 12, b"abc")
        assert ct + tag == AESGCM(key).encrypt(b"\0" * 12, b"abc", None)
    with pytest.raises(ValueError):
        aes_modes.ecb_encrypt(b"short", b"")
