"""Normal-world supplicant relay, a mock untrusted cloud, and a leak scanner.

Frames on the wire::

    "FTRS" | version u8 (1) | ftype u8 | reserved u16 (0) | length u32 BE | body

The cloud answers every valid frame with an ack whose body is the received
body length as u32 BE.
"""

import csv
import dataclasses
import enum
import logging
import pathlib
import queue
import socket
import socketserver
import struct
import threading
from typing import Iterable, List, Optional, Tuple, Union

from tzperiph import errors

log = logging.getLogger(__name__)

MAGIC = b"FTRS"
VERSION = 1
HEADER = struct.Struct(">4sBBHI")
MAX_BODY = 16 * 1024 * 1024
DEFAULT_TIMEOUT = 5.0
INDEX_FILE = "index.csv"


class FrameType(enum.IntEnum):
    HELLO = 0
    PAYLOAD = 1
    ACK = 2


@dataclasses.dataclass(frozen=True)
class WireFrame:
    ftype: FrameType
    body: bytes = b""
    version: int = VERSION

    def encode(self) -> bytes:
        if len(self.body) > MAX_BODY:
            raise errors.FrameError("frame body too large")
        return HEADER.pack(MAGIC, self.version, int(self.ftype), 0,
                           len(self.body)) + bytes(self.body)

    @staticmethod
    def parse_header(header: bytes) -> Tuple[FrameType, int]:
        """Validate a 12-byte header; return (ftype, body length)."""
        if len(header) != HEADER.size:
            raise errors.FrameError("truncated header")
        magic, version, ftype, reserved, length = HEADER.unpack(header)
        if magic != MAGIC:
            raise errors.FrameError(f"bad magic {magic!r}")
        if version != VERSION:
            raise errors.FrameError(f"unsupported version {version}")
        if reserved != 0:
            raise errors.FrameError("reserved bits set")
        try:
            ftype = FrameType(ftype)
        except ValueError:
            raise errors.FrameError(f"unknown frame type {ftype}") from None
        if length > MAX_BODY:
            raise errors.FrameError(f"body length {length} too large")
        return ftype, length

    @classmethod
    def decode(cls, data: bytes) -> "WireFrame":
        ftype, length = cls.parse_header(bytes(data[:HEADER.size]))
        body = bytes(data[HEADER.size:])
        if len(body) != length:
            raise errors.FrameError(
                f"length field {length} but {len(body)} body bytes")
        return cls(ftype, body)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise EOFError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> WireFrame:
    ftype, length = WireFrame.parse_header(_recv_exact(sock, HEADER.size))
    return WireFrame(ftype, _recv_exact(sock, length))


def ack_for(body: bytes) -> WireFrame:
    return WireFrame(FrameType.ACK, struct.pack(">I", len(body)))


# cloud side

class CloudStore:
    """Directory of received bodies named by arrival index, plus index.csv."""

    def __init__(self, root):
        self.root = pathlib.Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._next = len(self.entries())

    def entries(self) -> List[Tuple[int, int, int]]:
        index = self.root / INDEX_FILE
        if not index.exists():
            return []
        with index.open(newline="") as fh:
            return [(int(r["index"]), int(r["ftype"]), int(r["length"]))
                    for r in csv.DictReader(fh)]

    def append(self, ftype: FrameType, body: bytes) -> int:
        with self._lock:
            idx = self._next
            (self.root / str(idx)).write_bytes(body)
            index = self.root / INDEX_FILE
            new = not index.exists()
            with index.open("a", newline="") as fh:
                writer = csv.writer(fh)
                if new:
                    writer.writerow(["index", "ftype", "length"])
                writer.writerow([idx, int(ftype), len(body)])
            self._next += 1
            return idx

    def bodies(self) -> List[bytes]:
        return [(self.root / str(i)).read_bytes() for i, _, _ in self.entries()]


class _CloudHandler(socketserver.BaseRequestHandler):

    def handle(self):
        store: CloudStore = self.server.store
        sock = self.request
        while True:
            try:
                frame = read_frame(sock)
            except EOFError:
                return
            except errors.FrameError as exc:
                log.warning("dropping connection from %s: %s",
                            self.client_address, exc)
                return
            if frame.ftype is FrameType.PAYLOAD:
                store.append(frame.ftype, frame.body)
            elif frame.ftype is FrameType.ACK:
                log.warning("unexpected ack from client; closing")
                return
            sock.sendall(ack_for(frame.body).encode())


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class CloudService:
    """Handle to a running mock cloud; use as a context manager or stop()."""

    def __init__(self, server: _Server, thread: threading.Thread):
        self._server = server
        self._thread = thread
        self.store: CloudStore = server.store

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def endpoint(self) -> str:
        return f"127.0.0.1:{self.port}"

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def cloud_serve(port: int, store_dir, host: str = "127.0.0.1") -> CloudService:
    """Start the mock cloud on ``host:port`` (0 picks a free port)."""
    try:
        server = _Server((host, port), _CloudHandler)
    except OSError as exc:
        raise errors.BindError(f"cannot bind {host}:{port}: {exc}") from exc
    server.store = CloudStore(store_dir)
    thread = threading.Thread(target=server.serve_forever,
                              name=f"cloud:{server.server_address[1]}",
                              daemon=True)
    thread.start()
    return CloudService(server, thread)


# relay side

def parse_endpoint(endpoint: Union[str, Tuple[str, int]]) -> Tuple[str, int]:
    if isinstance(endpoint, tuple):
        return endpoint
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


def _send_once(body: bytes, addr: Tuple[str, int], timeout: float) -> int:
    try:
        sock = socket.create_connection(addr, timeout=timeout)
    except socket.timeout as exc:
        raise errors.RelayTimeout(f"connect to {addr} timed out") from exc
    except OSError as exc:
        raise errors.ConnectError(f"cannot reach {addr}: {exc}") from exc
    with sock:
        try:
            sock.sendall(WireFrame(FrameType.PAYLOAD, body).encode())
            ack = read_frame(sock)
        except socket.timeout as exc:
            raise errors.RelayTimeout(f"no ack from {addr}") from exc
        except (EOFError, OSError) as exc:
            raise errors.ConnectError(f"connection to {addr} lost: {exc}") from exc
    if ack.ftype is not FrameType.ACK or len(ack.body) != 4:
        raise errors.AckMismatch(f"expected ack, got {ack.ftype.name}")
    (echoed,) = struct.unpack(">I", ack.body)
    if echoed != len(body):
        raise errors.AckMismatch(f"ack length {echoed} != sent {len(body)}")
    return echoed


def supplicant_relay(payload, endpoint, timeout: float = DEFAULT_TIMEOUT,
                     retries: int = 1) -> int:
    """Send one payload as a type-1 frame; return the acked length.

    ``payload`` is an ObfuscatedPayload or raw bytes.  Connection failures
    and timeouts are retried ``retries`` times; ack mismatches are not.
    """
    body = payload.encode() if hasattr(payload, "encode") else bytes(payload)
    addr = parse_endpoint(endpoint)
    for attempt in range(retries + 1):
        try:
            return _send_once(body, addr, timeout)
        except (errors.ConnectError, errors.RelayTimeout) as exc:
            if attempt == retries:
                raise
            log.info("relay attempt %d failed: %s; retrying", attempt + 1, exc)


class Supplicant:
    """Normal-world daemon receiving TA payloads through an in-process queue.

    Each handed-off payload is placed in the shared-memory window before it
    is queued, as the REE sees it.  ``seen`` records every byte string that
    crossed the TA boundary.
    """

    def __init__(self, soc=None, shm: Optional[Tuple[int, int]] = None,
                 endpoint=None, timeout: float = DEFAULT_TIMEOUT):
        self.soc = soc
        self.shm = shm
        self.endpoint = endpoint
        self.timeout = timeout
        self.queue: "queue.Queue[bytes]" = queue.Queue()
        self.seen: List[bytes] = []

    def handoff(self, blob: bytes) -> None:
        blob = bytes(blob)
        if self.soc is not None and self.shm is not None:
            if len(blob) > self.shm[1]:
                raise ValueError("payload larger than shared memory")
            self.soc.fabric.write(self.soc.cpu, self.shm[0], blob)
        self.seen.append(blob)
        self.queue.put(blob)

    def drain(self) -> List[int]:
        """Relay every queued payload; return the acked lengths."""
        acks = []
        while True:
            try:
                blob = self.queue.get_nowait()
            except queue.Empty:
                return acks
            if self.endpoint is None:
                raise errors.ConnectError("supplicant has no endpoint")
            acks.append(supplicant_relay(blob, self.endpoint, self.timeout))


# leak scanning

class SuffixAutomaton:
    """Suffix automaton of a byte string, for longest-common-substring queries."""

    def __init__(self, data: bytes):
        self.link = [-1]
        self.length = [0]
        self.next: List[dict] = [{}]
        last = 0
        for b in data:
            cur = len(self.length)
            self.length.append(self.length[last] + 1)
            self.link.append(-1)
            self.next.append({})
            p = last
            while p != -1 and b not in self.next[p]:
                self.next[p][b] = cur
                p = self.link[p]
            if p == -1:
                self.link[cur] = 0
            else:
                q = self.next[p][b]
                if self.length[p] + 1 == self.length[q]:
                    self.link[cur] = q
                else:
                    clone = len(self.length)
                    self.length.append(self.length[p] + 1)
                    self.link.append(self.link[q])
                    self.next.append(dict(self.next[q]))
                    while p != -1 and self.next[p].get(b) == q:
                        self.next[p][b] = clone
                        p = self.link[p]
                    self.link[q] = clone
                    self.link[cur] = clone
            last = cur

    def longest_common(self, other: bytes) -> int:
        state, run, best = 0, 0, 0
        nxt, link, length = self.next, self.link, self.length
        for b in other:
            while state and b not in nxt[state]:
                state = link[state]
                run = length[state]
            if b in nxt[state]:
                state = nxt[state][b]
                run += 1
            else:
                run = 0
            if run > best:
                best = run
        return best


def longest_common_run(a: bytes, b: bytes) -> int:
    return SuffixAutomaton(a).longest_common(b) if a and b else 0


def leak_scan_bodies(bodies: Iterable[bytes], plaintext: bytes,
                     window: int = 1) -> List[int]:
    """Per-body longest run shared with ``plaintext``; runs shorter than
    ``window`` are reported as 0."""
    if window < 1:
        raise ValueError("window must be at least 1")
    if not plaintext:
        return [0 for _ in bodies]
    sam = SuffixAutomaton(plaintext)
    out = []
    for body in bodies:
        run = sam.longest_common(body)
        out.append(run if run >= window else 0)
    return out


def leak_scan(store_dir, plaintext: bytes, window: int = 1) -> int:
    """Longest byte run shared between ``plaintext`` and any stored body."""
    root = pathlib.Path(store_dir)
    bodies = CloudStore(root).bodies() if root.exists() else []
    return max(leak_scan_bodies(bodies, plaintext, window), default=0)
