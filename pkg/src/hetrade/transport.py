"""Blocking envelope transports for the two-process mode.

Directory mode writes ``<name>.bin`` and then a ``<name>.ready`` sentinel;
the peer polls for sentinels it has not consumed yet. Socket mode frames each
envelope with an 8-byte little-endian length. The exchange strictly
alternates, so at most one unread message is ever pending.
"""

from __future__ import annotations

import os
import socket
import struct
import time
from pathlib import Path
from typing import Optional

DEFAULT_TIMEOUT = 30.0
_LEN = struct.Struct("<Q")


class TransportError(Exception):
    pass


def _keep_copy(record_dir: Optional[Path], name: str, data: bytes) -> None:
    if record_dir is not None:
        (record_dir / f"{name}.bin").write_bytes(data)


class DirTransport:
    def __init__(self, directory, timeout: float = DEFAULT_TIMEOUT, poll: float = 0.02):
        self.dir = Path(directory)
        self.timeout = timeout
        self.poll = poll
        self.seen: set[str] = set()
        self.sent: list[bytes] = []
        self.record_dir: Optional[Path] = None
        if not self.dir.is_dir():
            raise TransportError(f"{self.dir} is not a directory")

    def has_messages(self) -> bool:
        return any(self.dir.glob("msg-*"))

    def send(self, name: str, data: bytes) -> None:
        tmp = self.dir / f".{name}.tmp"
        tmp.write_bytes(data)
        os.replace(tmp, self.dir / f"{name}.bin")
        (self.dir / f"{name}.ready").touch()
        self.seen.add(name)
        self.sent.append(data)
        _keep_copy(self.record_dir, name, data)

    def recv(self) -> tuple[str, bytes]:
        deadline = time.monotonic() + self.timeout
        while True:
            fresh = sorted(p.stem for p in self.dir.glob("msg-*.ready") if p.stem not in self.seen)
            if fresh:
                name = fresh[0]
                self.seen.add(name)
                return name, (self.dir / f"{name}.bin").read_bytes()
            if time.monotonic() > deadline:
                raise TransportError(f"timed out after {self.timeout:g}s waiting in {self.dir}")
            time.sleep(self.poll)

    def close(self) -> None:
        pass


class SocketTransport:
    def __init__(self, sock: socket.socket, timeout: float = DEFAULT_TIMEOUT):
        self.sock = sock
        self.sock.settimeout(timeout)
        self.sent: list[bytes] = []
        self.record_dir: Optional[Path] = None

    @classmethod
    def listen(cls, host: str, port: int, timeout: float = DEFAULT_TIMEOUT, ready_file: Optional[Path] = None) -> "SocketTransport":
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            srv.bind((host, port))
            srv.listen(1)
            srv.settimeout(timeout)
            if ready_file is not None:
                Path(ready_file).write_text(str(srv.getsockname()[1]))
            conn, _ = srv.accept()
        except OSError as exc:
            raise TransportError(f"listen on {host}:{port} failed: {exc}") from exc
        finally:
            srv.close()
        return cls(conn, timeout)

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = DEFAULT_TIMEOUT) -> "SocketTransport":
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=timeout)
                return cls(sock, timeout)
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise TransportError(f"connect to {host}:{port} failed: {exc}") from exc
                time.sleep(0.05)

    def send(self, name: str, data: bytes) -> None:
        try:
            self.sock.sendall(_LEN.pack(len(data)) + data)
        except OSError as exc:
            raise TransportError(f"send of {name} failed: {exc}") from exc
        self.sent.append(data)
        _keep_copy(self.record_dir, name, data)

    def _exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(min(n - len(buf), 1 << 20))
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not chunk:
                raise TransportError("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def recv(self) -> tuple[str, bytes]:
        (n,) = _LEN.unpack(self._exact(_LEN.size))
        return "socket", self._exact(n)

    def close(self) -> None:
        self.sock.close()


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        host, port = "127.0.0.1", addr
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ValueError(f"bad address {addr!r}, expected HOST:PORT") from None
