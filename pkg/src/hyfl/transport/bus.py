"""Message delivery: a deterministic in-process bus and a TCP transport
sharing one interface and one transcript format."""

from __future__ import annotations

import json
import queue
import random
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .frames import Frame, FrameError, Message, Register, decode_message, encode_message

Handler = Callable[[str, Message], None]

SERVER_ROUTED = "server"
P2P = "p2p"
ROUTE_MODES = (SERVER_ROUTED, P2P)


class TransportError(Exception):
    pass


class UnknownReceiver(TransportError):
    pass


class Stalled(TransportError):
    """No deliverable message remains but the awaited condition is still false."""


class RoundTimeout(TransportError):
    pass


@dataclass(frozen=True)
class TranscriptEntry:
    seq: int
    sender: str
    receiver: str
    frame: bytes

    @property
    def msg_type(self) -> int:
        return self.frame[4]

    def message(self) -> Message:
        return decode_message(self.frame)

    def to_json(self) -> dict:
        return {"seq": self.seq, "sender": self.sender, "receiver": self.receiver, "frame": self.frame.hex()}


@dataclass(frozen=True)
class Receipt:
    seq: int
    sender: str
    receiver: str
    size: int


class RouteConfig:
    """Routing of embedding traffic; fixed once the protocol starts."""

    def __init__(self, mode: str = SERVER_ROUTED):
        self._mode = None
        self._locked = False
        self.set(mode)

    def set(self, mode: str) -> None:
        if mode not in ROUTE_MODES:
            raise ValueError(f"unknown route mode {mode!r}")
        if self._locked and mode != self._mode:
            raise TransportError("route mode cannot change mid-run")
        self._mode = mode

    def lock(self) -> None:
        self._locked = True

    @property
    def mode(self) -> str:
        return self._mode

    def embedding_hop(self, src: str, dst: str, server: str = "server") -> str:
        """Next receiver for an embedding query/reply travelling from ``src`` to ``dst``."""
        if self._mode == P2P or src == server:
            return dst
        return server


def route_mode(mode: str) -> RouteConfig:
    return RouteConfig(mode)


class Transport:
    """Common bookkeeping: registration and the append-only transcript."""

    def __init__(self):
        self.transcript: list[TranscriptEntry] = []
        self._log_lock = threading.Lock()
        self._handlers: dict[str, Handler | None] = {}

    def _log(self, sender: str, receiver: str, frame: bytes) -> Receipt:
        with self._log_lock:
            seq = len(self.transcript)
            self.transcript.append(TranscriptEntry(seq, sender, receiver, frame))
        return Receipt(seq, sender, receiver, len(frame))

    def nodes(self) -> list[str]:
        return sorted(self._handlers)

    def dump_transcript(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in list(self.transcript):
                fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")

    def channel_sequences(self) -> dict[tuple[str, str], list[bytes]]:
        out: dict[tuple[str, str], list[bytes]] = {}
        for e in list(self.transcript):
            out.setdefault((e.sender, e.receiver), []).append(e.frame)
        return out

    def close(self) -> None:
        pass


class InProcessBus(Transport):
    """Lossless FIFO channels; a seeded scheduler picks which channel delivers next."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self._channels: dict[tuple[str, str], deque[bytes]] = {}
        self._rng = random.Random(seed)

    def register(self, node: str, handler: Handler | None = None) -> None:
        self._handlers[node] = handler

    def unregister(self, node: str) -> None:
        self._handlers.pop(node, None)
        for key in [k for k in self._channels if k[1] == node]:
            del self._channels[key]

    def send(self, sender: str, receiver: str, message: Message) -> Receipt:
        if sender not in self._handlers:
            raise UnknownReceiver(f"sender {sender!r} is not registered")
        if receiver not in self._handlers:
            raise UnknownReceiver(f"unknown receiver {receiver!r}")
        frame = encode_message(message)
        self._channels.setdefault((sender, receiver), deque()).append(frame)
        return self._log(sender, receiver, frame)

    def _ready(self, receiver: str | None = None, handled_only: bool = True) -> list[tuple[str, str]]:
        keys = []
        for k, q in self._channels.items():
            if not q:
                continue
            if receiver is not None and k[1] != receiver:
                continue
            if handled_only and self._handlers.get(k[1]) is None:
                continue
            keys.append(k)
        return sorted(keys)

    def recv(self, node: str) -> tuple[str, Message]:
        ready = self._ready(node, handled_only=False)
        if not ready:
            raise Stalled(f"no message pending for {node!r}")
        key = self._rng.choice(ready)
        return key[0], decode_message(self._channels[key].popleft())

    def step(self) -> bool:
        ready = self._ready()
        if not ready:
            return False
        key = self._rng.choice(ready)
        frame = self._channels[key].popleft()
        self._handlers[key[1]](key[0], decode_message(frame))
        return True

    def run_until(self, done: Callable[[], bool], timeout: float | None = None, what: str = "condition") -> None:
        while not done():
            if not self.step():
                raise Stalled(f"protocol stalled waiting for {what}")


class TcpTransport(Transport):
    """One localhost listener per node, one persistent connection per channel.

    Each connection opens with a ``Register`` hello naming the sender; that hello
    is transport plumbing and stays out of the transcript. Every node has a
    single worker thread, so handlers see one message at a time.
    """

    def __init__(self, host: str = "127.0.0.1"):
        super().__init__()
        self.host = host
        self.addresses: dict[str, tuple[str, int]] = {}
        self._listeners: dict[str, socket.socket] = {}
        self._inboxes: dict[str, queue.Queue] = {}
        self._conns: dict[tuple[str, str], socket.socket] = {}
        self._conn_lock = threading.Lock()
        self._send_locks: dict[tuple[str, str], threading.Lock] = {}
        self._threads: list[threading.Thread] = []
        self._errors: list[BaseException] = []
        self._closing = threading.Event()

    def register(self, node: str, handler: Handler | None = None, port: int = 0) -> None:
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((self.host, port))
        srv.listen()
        self._listeners[node] = srv
        self.addresses[node] = srv.getsockname()
        self._handlers[node] = handler
        self._inboxes[node] = queue.Queue()
        self._spawn(self._accept_loop, node, srv)
        if handler is not None:
            self._spawn(self._worker, node, handler)

    def unregister(self, node: str) -> None:
        self._handlers.pop(node, None)
        self.addresses.pop(node, None)
        srv = self._listeners.pop(node, None)
        if srv is not None:
            srv.close()

    def _spawn(self, fn, *args) -> None:
        t = threading.Thread(target=fn, args=args, daemon=True)
        t.start()
        self._threads.append(t)

    def _accept_loop(self, node: str, srv: socket.socket) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            self._spawn(self._reader, node, conn)

    def _reader(self, node: str, conn: socket.socket) -> None:
        buf = bytearray()
        sender = None
        try:
            while True:
                chunk = conn.recv(1 << 16)
                if not chunk:
                    return
                buf += chunk
                while True:
                    frame, used = Frame.decode_prefix(bytes(buf))
                    if frame is None:
                        break
                    del buf[:used]
                    msg = decode_message(frame)
                    if sender is None:
                        if not isinstance(msg, Register):
                            raise FrameError("connection must open with a Register hello")
                        sender = msg.node
                        continue
                    self._inboxes[node].put((sender, msg))
        except (OSError, FrameError) as exc:
            if not self._closing.is_set():
                self._errors.append(exc)
        finally:
            conn.close()

    def _worker(self, node: str, handler: Handler) -> None:
        inbox = self._inboxes[node]
        while not self._closing.is_set():
            try:
                sender, msg = inbox.get(timeout=0.05)
            except queue.Empty:
                continue
            try:
                handler(sender, msg)
            except BaseException as exc:  # surfaced to the orchestrator in run_until
                self._errors.append(exc)

    def _connection(self, sender: str, receiver: str) -> tuple[socket.socket, threading.Lock]:
        key = (sender, receiver)
        with self._conn_lock:
            if key not in self._conns:
                if receiver not in self.addresses:
                    raise UnknownReceiver(f"unknown receiver {receiver!r}")
                s = socket.create_connection(self.addresses[receiver])
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                s.sendall(encode_message(Register(sender, "channel")))
                self._conns[key] = s
                self._send_locks[key] = threading.Lock()
            return self._conns[key], self._send_locks[key]

    def send(self, sender: str, receiver: str, message: Message) -> Receipt:
        if receiver not in self._handlers:
            raise UnknownReceiver(f"unknown receiver {receiver!r}")
        frame = encode_message(message)
        sock, lock = self._connection(sender, receiver)
        with lock:
            receipt = self._log(sender, receiver, frame)
            try:
                sock.sendall(frame)
            except OSError as exc:
                raise TransportError(f"connection {sender}->{receiver} dropped") from exc
        return receipt

    def recv(self, node: str, timeout: float = 5.0) -> tuple[str, Message]:
        try:
            sender, msg = self._inboxes[node].get(timeout=timeout)
        except queue.Empty as exc:
            raise RoundTimeout(f"no message for {node!r} within {timeout}s") from exc
        return sender, msg

    def run_until(self, done: Callable[[], bool], timeout: float | None = 60.0, what: str = "condition") -> None:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if self._errors:
                raise self._errors[0]
            if done():
                return
            if deadline is not None and time.monotonic() > deadline:
                raise RoundTimeout(f"timed out waiting for {what}")
            time.sleep(0.002)

    def close(self) -> None:
        self._closing.set()
        for s in list(self._listeners.values()):
            s.close()
        with self._conn_lock:
            for s in self._conns.values():
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                s.close()
            self._conns.clear()
