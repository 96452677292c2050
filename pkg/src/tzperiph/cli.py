"""Command-line front end.

Exit codes: 0 success, 1 a pipeline stage failed, 2 bad input or I/O error.
"""

import argparse
import json
import logging
import pathlib
import random
import sys
import time
from typing import List, Optional, Sequence

from tzperiph import (bench, boot, drivers, errors, i2s_dev, pipeline,
                      relay_cloud)
from tzperiph.platform import SUPPLICANT_SHM, Soc, fixture_text

log = logging.getLogger("tzperiph")

ROOT_KEY_FILE = "rotpk.bin"
DEFAULT_STATE = ".tzperiph-state.json"

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad input files or arguments (exit 2)."""


def _emit(args, data: dict, text: str) -> None:
    if args.json:
        print(json.dumps(data, sort_keys=True))
    else:
        print(text)


def seed_bytes(seed: int) -> bytes:
    return f"tzperiph-{seed}".encode()


def image_name(stage: boot.Stage) -> str:
    return f"{int(stage)}_{stage.name}.fimg"


# images

def write_images(images: Sequence[boot.StageImage], root_pub: bytes,
                 out_dir) -> None:
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for img in images:
        (out / image_name(img.stage)).write_bytes(img.encode())
    (out / ROOT_KEY_FILE).write_bytes(root_pub)


def load_images(images_dir):
    """Read the image set; a file that does not decode names its stage."""
    root = pathlib.Path(images_dir)
    if not root.is_dir():
        raise UsageError(f"{root}: not a directory")
    try:
        root_pub = (root / ROOT_KEY_FILE).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read root key: {exc}") from exc
    images = []
    for stage in boot.Stage:
        path = root / image_name(stage)
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise UsageError(f"cannot read {path}: {exc}") from exc
        try:
            images.append(boot.StageImage.decode(blob))
        except errors.ImageFormatError as exc:
            return None, root_pub, (stage.name, f"{path.name}: {exc}")
    return images, root_pub, None


def run_boot(dts_path, images_dir, soc: Optional[Soc] = None):
    """Boot ``soc`` from an image directory; returns (soc, BootReport).

    The device tree file must match the body carried by the signed
    DeviceTree image.
    """
    try:
        dts_text = pathlib.Path(dts_path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read {dts_path}: {exc}") from exc
    images, root_pub, bad = load_images(images_dir)
    soc = soc or Soc()
    if bad is not None:
        return soc, boot.BootReport(failed_stage=bad[0], detail=bad[1])
    report = soc.boot(images, root_pub)
    if report.ok:
        carried = images[boot.Stage.DeviceTree].body.decode().rstrip("\n")
        if carried != dts_text.rstrip("\n"):
            report = boot.BootReport(
                verified=report.verified[:boot.Stage.DeviceTree],
                failed_stage=boot.Stage.DeviceTree.name,
                detail=f"{dts_path} differs from the signed device tree")
            soc = Soc()
    return soc, report


def cmd_mkimages(args) -> int:
    try:
        dts_text = pathlib.Path(args.dts).read_text()
    except OSError as exc:
        raise UsageError(str(exc)) from exc
    images, root = boot.build_chain(dts_text, seed_bytes(args.seed),
                                    args.payload_size)
    write_images(images, root, args.out)
    _emit(args, {"ok": True, "out": str(args.out),
                 "stages": [i.stage.name for i in images]},
          f"wrote {len(images)} images to {args.out}")
    return EXIT_OK


def cmd_boot(args) -> int:
    soc, report = run_boot(args.dts, args.images)
    data = report.as_dict()
    if report.ok:
        state = {"dts": str(pathlib.Path(args.dts).resolve()),
                 "images": str(pathlib.Path(args.images).resolve()),
                 "configured_regions": data["configured_regions"]}
        pathlib.Path(args.state).write_text(json.dumps(state, indent=2))
        text = "boot ok; secure regions: " + ", ".join(
            f"({b:#x}, {s:#x})" for b, s in report.configured_regions)
    else:
        text = f"boot failed at {report.failed_stage}: {report.detail}"
    _emit(args, data, text)
    return EXIT_OK if report.ok else EXIT_FAIL


def _read_state(path):
    try:
        return json.loads(pathlib.Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"no usable boot state at {path}: {exc}") from exc


def cmd_record(args) -> int:
    state = _read_state(args.state)
    if args.pcm:
        try:
            samples, config = i2s_dev.read_pcm(args.pcm)
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
    else:
        samples, config = pipeline.fixture_pcm(args.frames, args.seed), None
    labels = None
    if args.labels:
        try:
            labels = pipeline.tile_labels(
                pipeline.read_labels(pathlib.Path(args.labels).read_text()),
                args.frames)
        except (OSError, KeyError, ValueError) as exc:
            raise UsageError(f"bad labels file: {exc}") from exc

    stage = "boot"
    try:
        soc, report = run_boot(state["dts"], state["images"],
                               Soc(config) if config else None)
        if not report.ok:
            raise errors.IntegrityError(report.failed_stage, report.detail)
        stage = "init"
        soc.i2s.attach_source(samples)
        supplicant = relay_cloud.Supplicant(soc, SUPPLICANT_SHM, args.cloud)
        recorder = pipeline.Recorder(
            soc, report, pipeline.policy_from_name(args.policy), supplicant,
            args.path, random.Random(args.seed))
        stage = "capture"
        payload = recorder.record(args.frames, labels)
        recorder.close()
        result = {"ok": True, "frames": args.frames, "path": args.path,
                  "policy": args.policy, "mode": payload.mode.name,
                  "payload_bytes": len(payload.encode())}
        if args.out:
            stage = "output"
            pathlib.Path(args.out).write_bytes(payload.encode())
            result["out"] = str(args.out)
        if args.cloud:
            stage = "relay"
            result["acked"] = supplicant.drain()
    except (errors.TzError, OSError) as exc:
        _emit(args, {"ok": False, "stage": stage, "error": str(exc)},
              f"record failed at {stage}: {exc}")
        return EXIT_FAIL
    _emit(args, result, f"recorded {args.frames} frames "
          f"({result['payload_bytes']} payload bytes)")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.iters < 1:
        raise UsageError("--iters must be at least 1")
    if args.scenario == "crypto":
        report = bench.bench_crypto(args.iters, args.size or bench.CRYPTO_SIZE)
    elif args.scenario == "copy":
        report = bench.bench_copy(args.iters, args.size or 4096)
    else:
        report = bench.bench_mmio(args.iters)
    data = report.as_dict()
    lines = [f"scenario {report.scenario}, {report.iterations} iterations"]
    for name, counters in report.work.items():
        lines.append(f"  {name:<14} work_units={counters.work_units} "
                     + " ".join(f"{k}={v}" for k, v in counters.as_dict().items()))
    for name, ns in (report.wall_ns or {}).items():
        lines.append(f"  {name:<14} {ns / 1e6:9.3f} ms")
    for name, ratio in report.derived_ratios.items():
        lines.append(f"  {name} = {ratio:.3f}")
    _emit(args, data, "\n".join(lines))
    return EXIT_OK


def cmd_tcb(args) -> int:
    try:
        text = (pathlib.Path(args.csv).read_text() if args.csv
                else fixture_text("i2s_driver_loc.csv"))
        report = drivers.tcb_report(drivers.read_loc_csv(text))
    except (OSError, ValueError, errors.EmptyTable) as exc:
        raise UsageError(f"cannot build TCB table: {exc}") from exc
    lines = [f"{'component':<18}{'trusted %':>10}{'untrusted %':>13}"]
    for row in report["rows"]:
        lines.append(f"{row['component']:<18}{row['trusted_pct']:>10.2f}"
                     f"{row['untrusted_pct']:>13.2f}")
    total = report["total"]
    lines.append(f"{'Total':<18}{total['trusted_pct']:>10.2f}"
                 f"{total['untrusted_pct']:>13.2f}")
    _emit(args, report, "\n".join(lines))
    return EXIT_OK


def cmd_serve(args) -> int:
    try:
        service = relay_cloud.cloud_serve(args.port, args.store, args.host)
    except errors.BindError as exc:
        raise UsageError(str(exc)) from exc
    print(f"listening on {args.host}:{service.port}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tzperiph",
        description="Simulated TrustZone-protected I2S peripheral.")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for keys, fixtures and nonces")
    parser.add_argument("--json", action="store_true",
                        help="print a JSON report instead of text")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mkimages", help="build a signed fixture image set")
    p.add_argument("--dts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--payload-size", type=int, default=1024)
    p.set_defaults(func=cmd_mkimages)

    p = sub.add_parser("boot", help="verify the boot chain")
    p.add_argument("--dts", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--state", default=DEFAULT_STATE)
    p.set_defaults(func=cmd_boot)

    p = sub.add_parser("record", help="capture, obfuscate and hand off")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--path", choices=("mmio", "dma"), default="mmio")
    p.add_argument("--policy", choices=sorted(pipeline.POLICY_NAMES),
                   default="gcm")
    dest = p.add_mutually_exclusive_group(required=True)
    dest.add_argument("--out")
    dest.add_argument("--cloud", metavar="HOST:PORT")
    p.add_argument("--pcm", help="16-bit PCM input (default: seeded fixture)")
    p.add_argument("--labels", help="CSV label,start_frame,frames")
    p.add_argument("--state", default=DEFAULT_STATE)
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("bench", help="run a benchmark scenario")
    p.add_argument("scenario", choices=sorted(bench.SCENARIOS))
    p.add_argument("--iters", type=int, default=bench.DEFAULT_ITERS)
    p.add_argument("--size", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("tcb", help="TCB share per driver component")
    p.add_argument("csv", nargs="?", help="LOC table (default: bundled)")
    p.set_defaults(func=cmd_tcb)

    p = sub.add_parser("serve", help="run the mock cloud service")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--store", required=True)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "frames", 1) < 0:
        parser.error("--frames must be non-negative")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tzperiph: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
