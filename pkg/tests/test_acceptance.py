"""Acceptance suite: one test per criterion, summarised at the end of the run."""

import io
import json
import os
import random
import time
from contextlib import redirect_stdout

import pytest

from helpers import send_and_wait_close
from oracles import i2s_capture_ref, normal_access_denied
from tzperiph import (aes_modes, bench, boot, cli, drivers, errors, i2s_dev,
                      pipeline, platform, relay_cloud, tee_rt)
from tzperiph.boot import Stage, StageImage
from tzperiph.mem_fabric import AccessKind, MemoryFabric
from tzperiph.relay_cloud import FrameType, WireFrame
from tzperiph.soc_state import World
from tzperiph.tee_rt import Direction, MemRef, Mode, ObfuscationPolicy, Value

SECURE_REGION = (0x2901000, 0x100)


def report(criterion, ok, detail=""):
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())


def test_criterion_01_isolation_boundary_sweep(booted):
    soc, _ = booted
    base, size = SECURE_REGION
    t0 = time.perf_counter()
    wrong = 0
    for addr in range(base - 8, base + size + 8):
        for kind in (AccessKind.READ, AccessKind.WRITE):
            denied = not soc.fabric.check_access(World.NORMAL, addr, 1, kind)
            wrong += denied != normal_access_denied(addr, 1, base, size)
            wrong += not soc.fabric.check_access(World.SECURE, addr, 1, kind)
    elapsed = time.perf_counter() - t0
    report(1, wrong == 0 and elapsed < 1, f"{wrong} misclassified, {elapsed:.3f}s")
    assert wrong == 0
    assert elapsed < 1


def test_criterion_02_boot_tamper_detection():
    images, root = boot.build_chain(platform.fixture_dts(), payload_size=1024)
    t0 = time.perf_counter()
    cases = missed = 0
    for stage in list(Stage)[1:]:
        img = images[stage]
        assert len(img.payload) >= 1024
        for pos in range(1024):
            payload = bytearray(img.payload)
            payload[pos] ^= 0xFF
            chain = list(images)
            chain[stage] = StageImage(img.stage, bytes(payload),
                                      img.signature, img.signer_key_id)
            result = boot.boot_chain(chain, root, MemoryFabric())
            cases += 1
            missed += result.failed_stage != stage.name
    elapsed = time.perf_counter() - t0
    report(2, missed == 0 and elapsed < 60,
           f"{cases - missed}/{cases} detected, {elapsed:.1f}s")
    assert cases == 5 * 1024
    assert missed == 0
    assert elapsed < 60


def test_criterion_03_boot_configures_i2s_window(tmp_path):
    dts = tmp_path / "board.dts"
    dts.write_text(platform.fixture_dts())
    with redirect_stdout(io.StringIO()):
        assert cli.main(["mkimages", "--dts", str(dts), "--out",
                         str(tmp_path / "images")]) == 0
    out = io.StringIO()
    with redirect_stdout(out):
        code = cli.main(["--json", "boot", "--dts", str(dts), "--images",
                         str(tmp_path / "images"), "--state",
                         str(tmp_path / "state.json")])
    regions = [tuple(r) for r in json.loads(out.getvalue())["configured_regions"]]
    report(3, code == 0 and regions == [SECURE_REGION], str(regions))
    assert code == 0
    assert regions == [(0x2901000, 0x100)]


def capture(samples, path):
    soc, rep = platform.booted_soc()
    soc.i2s.attach_source(samples)
    drv = drivers.trusted_init(soc, soc.i2s_node(), rep)
    return bytes(getattr(drv, f"capture_{path}")(len(samples)))


def test_criterion_04_bit_exact_capture():
    rng = random.Random(404)
    bad = 0
    for _ in range(100):
        n = rng.randint(0, 1024)
        samples = [rng.randint(-32768, 32767) for _ in range(n)]
        mmio = capture(samples, "mmio")
        dma = capture(samples, "dma")
        bad += mmio != i2s_capture_ref(samples)
        bad += i2s_dev.words_to_samples(mmio) != samples
        bad += dma != mmio
    report(4, bad == 0, f"{bad} mismatches over 100 fixtures")
    assert bad == 0


def device_state(soc):
    dev = soc.i2s
    return (dev.bank.registers[:], list(dev.fifo), dev.frames_produced,
            dev.pending_frames)


def test_criterion_05_four_step_invocation(runtime_with_driver):
    soc, _, rt = runtime_with_driver
    fabric = soc.fabric
    session = rt.open_session(tee_rt.I2S_PTA_UUID)
    rng = random.Random(505)
    soc.i2s.attach_source([rng.randint(-32768, 32767) for _ in range(4000)])
    ta_base, ta_size = platform.TA_MEMORY
    invalid = valid = 0
    for i in range(40):
        n = rng.randint(1, 64)
        size = 4 * n + 4 * rng.randint(0, 8)
        direction = rng.choice([Direction.OUT, Direction.INOUT])
        if i % 2:
            addr = rng.choice([
                platform.KERNEL_BUF[0] + 16 * rng.randint(0, 100),
                ta_base + ta_size - size // 2,
                ta_base - size // 2,
                platform.DRIVER_BUF[0]])
            before = fabric.counters_snapshot()
            state = device_state(soc)
            with pytest.raises(errors.BadParamRange):
                rt.invoke_command(session, tee_rt.CMD_CAPTURE_MMIO,
                                  [Value(n), MemRef(addr, size, direction)])
            delta = fabric.counters_snapshot() - before
            assert delta.secure_syscalls == 0
            assert delta.bytes_copied == 0
            assert device_state(soc) == state
            invalid += 1
        else:
            rt.ta_reset_heap()
            addr = rt.ta_alloc(size)
            before = fabric.counters_snapshot()
            result = rt.invoke_command(session, tee_rt.CMD_CAPTURE_MMIO,
                                       [Value(n), MemRef(addr, size, direction)])
            delta = fabric.counters_snapshot() - before
            in_bytes = tee_rt.VALUE_SIZE + (size if direction.reads else 0)
            # the out payload is the size the PTA reports back
            out_bytes = result[1].size
            assert out_bytes == 4 * n
            assert delta.secure_syscalls == 1
            assert delta.bytes_copied >= in_bytes + out_bytes
            valid += 1
    report(5, True, f"{invalid} rejected, {valid} valid invocations")
    assert invalid >= 10 and valid >= 10


def test_criterion_06_mmio_work_parity():
    reports = [bench.bench_mmio(iters) for iters in (1, 17, 100, 1000)]
    ok = all(r.work["secure"] == r.work["normal"] for r in reports)
    report(6, ok)
    for r in reports:
        assert r.work["secure"] == r.work["normal"]
        assert r.work["secure"].access_checks == 2 * r.iterations


def test_criterion_07_copy_path_asymmetry():
    sizes = [64 << k for k in range(11)]
    assert sizes[-1] == 64 * 1024
    costs = bench.copy_costs(sizes)
    ok = all(c["invoke"].work_units > c["copy_to_user"].work_units
             > c["memcpy"].work_units for c in costs.values())
    report(7, ok, " ".join(
        f"{n}:{c['invoke'].work_units}>{c['copy_to_user'].work_units}"
        f">{c['memcpy'].work_units}" for n, c in costs.items()))
    for n, c in costs.items():
        assert c["invoke"].work_units > c["copy_to_user"].work_units, n
        assert c["copy_to_user"].work_units > c["memcpy"].work_units, n


def test_criterion_08_gcm_not_faster_than_ctr():
    t0 = time.perf_counter()
    result = bench.bench_crypto(100, 64 * 1024)
    elapsed = time.perf_counter() - t0
    wall = result.wall_ns
    ok = (wall["gcm_encrypt"] >= wall["ctr_encrypt"]
          and wall["gcm_decrypt"] >= wall["ctr_decrypt"] and elapsed < 30)
    ratios = result.derived_ratios
    report(8, ok, f"gcm/ctr enc {ratios['gcm_over_ctr_encrypt']:.2f}x "
           f"dec {ratios['gcm_over_ctr_decrypt']:.2f}x, {elapsed:.1f}s")
    assert wall["gcm_encrypt"] >= wall["ctr_encrypt"]
    assert wall["gcm_decrypt"] >= wall["ctr_decrypt"]
    assert elapsed < 30


# NIST GCM test case 4 and an OpenSSL-derived 128-bit IV case
GCM_PINNED = [
    ("feffe9928665731c6d6a8f9467308308", "cafebabefacedbaddecaf888",
     "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72"
     "1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b39",
     "feedfacedeadbeeffeedfacedeadbeefabaddad2",
     "42831ec2217774244b7221b784d0d49ce3aa212f2c02a4e035c17e2329aca12e"
     "21d514b25466931c7d8f6a5aac84aa051ba30b396a0aac973d58e091",
     "5bc94fbc3221a5db94fae95ae7121a47"),
    (bytes(range(16)).hex(), bytes(range(16, 32)).hex(),
     bytes(range(32, 64)).hex(), "",
     "e5bfd595599702affe31e9a98d0201f8c5cc12ac593391cf91bfbdad7f7e4ddf",
     "3fd958f0e3832fe2a020cab24a5b7c82"),
]


def test_criterion_09_aead_integrity():
    key = os.urandom(16)
    policy = ObfuscationPolicy(Mode.AesGcm)
    payload = tee_rt.obfuscate(policy, os.urandom(32), key, os.urandom(16))
    flips = rejected = 0
    for field in ("body", "auth_tag", "nonce"):
        raw = getattr(payload, field)
        for bit in range(8 * len(raw)):
            flipped = bytearray(raw)
            flipped[bit // 8] ^= 1 << (bit % 8)
            fields = {"mode": payload.mode, "nonce": payload.nonce,
                      "auth_tag": payload.auth_tag, "body": payload.body}
            fields[field] = bytes(flipped)
            flips += 1
            try:
                tee_rt.deobfuscate(tee_rt.ObfuscatedPayload(**fields), key)
            except errors.TagMismatch:
                rejected += 1

    rng = random.Random(909)
    trips = bad_trips = 0
    for mode in (Mode.AesEcb, Mode.AesCbc, Mode.AesCtr, Mode.AesGcm):
        policy = ObfuscationPolicy(mode)
        for _ in range(1000):
            data = rng.randbytes(rng.randint(0, 300))
            key = rng.randbytes(16)
            nonce = None if mode is Mode.AesEcb else rng.randbytes(16)
            sent = tee_rt.obfuscate(policy, data, key, nonce)
            got = tee_rt.deobfuscate(
                tee_rt.ObfuscatedPayload.decode(sent.encode()), key)
            trips += 1
            bad_trips += got != data

    vectors_ok = all(
        aes_modes.gcm_encrypt(bytes.fromhex(k), bytes.fromhex(iv),
                              bytes.fromhex(p), bytes.fromhex(a))
        == (bytes.fromhex(c), bytes.fromhex(t))
        for k, iv, p, a, c, t in GCM_PINNED)
    report(9, rejected == flips and not bad_trips and vectors_ok,
           f"{rejected}/{flips} flips rejected, {trips - bad_trips}/{trips} "
           f"round trips, pinned vectors {'match' if vectors_ok else 'differ'}")
    assert flips == 8 * (32 + 16 + 16)
    assert rejected == flips
    assert trips == 4000 and bad_trips == 0
    assert vectors_ok


def recorder(policy, samples, endpoint):
    soc, rep = platform.booted_soc()
    soc.i2s.attach_source(samples)
    sup = relay_cloud.Supplicant(soc, platform.SUPPLICANT_SHM, endpoint)
    return pipeline.Recorder(soc, rep, pipeline.policy_from_name(policy), sup,
                             "dma"), sup


def test_criterion_10_no_plaintext_leak(tmp_path):
    rng = random.Random(1010)
    plaintexts = []
    with relay_cloud.cloud_serve(0, tmp_path / "gcm") as svc:
        samples = [rng.randint(-32768, 32767) for _ in range(100 * 256)]
        rec, sup = recorder("gcm", samples, svc.endpoint)
        for _ in range(100):
            rec.record(256)
            plaintexts.append(rec.runtime.ta_read(rec.last_capture_addr, 1024))
            sup.drain()
        bodies = svc.store.bodies()
    assert len(bodies) == 100
    assert b"".join(plaintexts) == i2s_dev.samples_to_words(samples)
    gcm_worst = max(relay_cloud.leak_scan_bodies(bodies, b"".join(plaintexts)))
    own = max(relay_cloud.longest_common_run(b, p)
              for b, p in zip(bodies, plaintexts))
    assert relay_cloud.leak_scan(tmp_path / "gcm", plaintexts[0]) < 16

    labels = pipeline.fixture_labels()
    grammar = tee_rt.DEFAULT_COMMANDS.keys()
    window_hits = {}
    for policy in ("filter", "convert"):
        store = tmp_path / policy
        raw = []
        with relay_cloud.cloud_serve(0, store) as svc:
            samples = [rng.randint(-32768, 32767) for _ in range(20 * 64)]
            rec, sup = recorder(policy, samples, svc.endpoint)
            for _ in range(20):
                rec.record(64)
                captured = rec.runtime.ta_read(rec.last_capture_addr, 256)
                for label, chunk in pipeline.segment(
                        captured, pipeline.tile_labels(labels, 64)):
                    # filter forwards recognised commands by design
                    if policy == "convert" or label not in grammar:
                        raw.append(chunk)
                sup.drain()
        # any shared run of 8 or more bytes is an 8-byte window hit
        window_hits[policy] = max(
            relay_cloud.leak_scan(store, chunk, window=8) for chunk in raw)
    ok = gcm_worst < 16 and own < 16 and not any(window_hits.values())
    report(10, ok, f"gcm longest run {gcm_worst}, 8-byte window hits "
           f"{window_hits}")
    assert gcm_worst < 16 and own < 16
    assert window_hits == {"filter": 0, "convert": 0}


def test_criterion_11_tcb_totals():
    out = io.StringIO()
    with redirect_stdout(out):
        code = cli.main(["--json", "tcb"])
    total = json.loads(out.getvalue())["total"]
    ok = (code == 0 and abs(total["trusted_pct"] - 66.82) <= 0.01
          and abs(total["untrusted_pct"] - 33.18) <= 0.01)
    report(11, ok, f"{total['trusted_pct']} / {total['untrusted_pct']}")
    assert code == 0
    assert abs(total["trusted_pct"] - 66.82) <= 0.01
    assert abs(total["untrusted_pct"] - 33.18) <= 0.01


def test_criterion_12_wire_protocol(tmp_path):
    rng = random.Random(1212)
    mismatches = 0
    for _ in range(10_000):
        frame = WireFrame(rng.choice(list(FrameType)),
                          rng.randbytes(rng.choice([0, 1, 16, rng.randint(0, 600)])))
        blob = frame.encode()
        mismatches += WireFrame.decode(blob) != frame
        mismatches += WireFrame.decode(blob).encode() != blob

    good = WireFrame(FrameType.PAYLOAD, b"must not persist").encode()
    malformed = [b"XTRS" + good[4:], good[:4] + b"\x02" + good[5:],
                 good[:4] + b"\x00" + good[5:]]
    decode_rejects = 0
    for blob in malformed:
        try:
            WireFrame.decode(blob)
        except errors.FrameError:
            decode_rejects += 1
    with relay_cloud.cloud_serve(0, tmp_path / "store") as svc:
        for blob in malformed:
            assert send_and_wait_close(svc.port, blob) == b""
        persisted = svc.store.entries()
    files = sorted(p.name for p in (tmp_path / "store").iterdir())
    ok = not mismatches and decode_rejects == len(malformed) and not persisted
    report(12, ok, f"{mismatches} round-trip mismatches, "
           f"{decode_rejects}/{len(malformed)} malformed rejected, "
           f"{len(persisted)} persisted")
    assert mismatches == 0
    assert decode_rejects == len(malformed)
    assert persisted == [] and files == []
