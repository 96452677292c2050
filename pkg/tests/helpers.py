"""Shared test helpers: schema validation and CLI subprocess runs."""

import importlib.resources
import json
import socket
import subprocess
import sys

import jsonschema


def load_schema(name):
    text = importlib.resources.files("tzperiph.schemas").joinpath(
        f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(data, name):
    jsonschema.Draft202012Validator(load_schema(name)).validate(data)


def run_cli(*args, timeout=120):
    """Run the CLI in a fresh interpreter; returns (code, parsed json or text, stderr)."""
    proc = subprocess.run([sys.executable, "-m", "tzperiph", *map(str, args)],
                          capture_output=True, text=True, timeout=timeout)
    out = proc.stdout
    if "--json" in args and out.strip():
        out = json.loads(out)
    return proc.returncode, out, proc.stderr


def send_and_wait_close(port, data):
    """Send raw bytes, then return whatever arrives before the server closes."""
    with socket.create_connection(("127.0.0.1", port), timeout=2) as s:
        try:
            s.sendall(data)
            s.shutdown(socket.SHUT_WR)
            return s.recv(64)
        except (ConnectionResetError, BrokenPipeError, OSError):
            # the server may drop the connection before we finish
            return b""
