"""LAN distribution of the live packet stream to many listeners.

Stream port: every encoded packet is sent as ``[uint16 big-endian length][packet]``.
Control port: one text command per line, one reply line per command::

    SET VOLUME 0.5   -> OK
    SET CUTOFF 1000  -> OK
    SET CUTOFF 500   -> ERR cutoff must be one of (100, 1000)
    GET STATUS       -> STATUS volume=0.5 cutoff=1000 listeners=2 packets=120 streaming=1
"""
from __future__ import annotations

import enum
import itertools
import logging
import queue
import socket
import struct
import threading
import time
from collections.abc import Callable, Iterable, Iterator
from dataclasses import dataclass, field

import numpy as np

from . import transport
from .chain import AudioBuffer, ChainConfig, TransmitChain, dequantize_dac, CUTOFF_CHOICES
from .exceptions import ControlError, DecodeError, ProtocolError, ServiceError
from .transport import Packet

log = logging.getLogger(__name__)

LENGTH = struct.Struct(">H")
QUEUE_LIMIT = 256
DEFAULT_BLOCK = 240  # 60 ms at 4 kHz, five full packets


class CommandKind(enum.Enum):
    SET_VOLUME = "SET_VOLUME"
    SET_CUTOFF = "SET_CUTOFF"
    GET_STATUS = "GET_STATUS"


@dataclass(frozen=True)
class ControlCommand:
    kind: CommandKind
    value: float | None = None


def parse_command(line: str) -> ControlCommand:
    parts = line.strip().upper().split()
    if parts == ["GET", "STATUS"]:
        return ControlCommand(CommandKind.GET_STATUS)
    if len(parts) == 3 and parts[0] == "SET" and parts[1] in ("VOLUME", "CUTOFF"):
        try:
            value = float(parts[2])
        except ValueError:
            raise ControlError(f"not a number: {parts[2]}") from None
        return ControlCommand(CommandKind["SET_" + parts[1]], value)
    raise ControlError(f"unknown command: {line.strip()!r}")


def apply_control(cmd: ControlCommand, cfg: ChainConfig) -> ChainConfig:
    """Return the config produced by ``cmd``; raise ControlError and leave ``cfg`` alone otherwise."""
    if cmd.kind is CommandKind.GET_STATUS:
        return cfg
    if cmd.value is None or not np.isfinite(cmd.value):
        raise ControlError("missing or non-finite value")
    if cmd.kind is CommandKind.SET_VOLUME:
        if not 0.0 <= cmd.value <= 1.0:
            raise ControlError("volume must be in [0, 1]")
        return cfg.replace(volume=float(cmd.value))
    if cmd.value not in CUTOFF_CHOICES:
        raise ControlError(f"cutoff must be one of {CUTOFF_CHOICES}")
    return cfg.replace(cutoff=int(cmd.value))


class Transmitter:
    """Transmit chain plus packetizer, reconfigured only between blocks.

    Control commands are validated on submission and queued; :meth:`process`
    applies all queued commands before touching the next block, so a block is
    always produced under one fully applied configuration.
    """

    def __init__(self, config: ChainConfig | None = None):
        self.chain = TransmitChain(config or ChainConfig())
        self.seq = 0
        self._requested = self.chain.config
        self._pending: queue.SimpleQueue[ChainConfig] = queue.SimpleQueue()
        self._lock = threading.Lock()

    @property
    def config(self) -> ChainConfig:
        return self.chain.config

    def submit(self, cmd: ControlCommand) -> ChainConfig:
        with self._lock:
            new = apply_control(cmd, self._requested)
            self._requested = new
            self._pending.put(new)
        return new

    def _apply_pending(self) -> None:
        latest = None
        while True:
            try:
                latest = self._pending.get_nowait()
            except queue.Empty:
                break
        if latest is not None and latest != self.chain.config:
            self.chain.reconfigure(latest)

    def process(self, buf: AudioBuffer) -> list[Packet]:
        self._apply_pending()
        block = self.chain.process(buf)
        packets = transport.packetize(block, self.seq, transport.cutoff_flags(self.config.cutoff))
        self.seq = (self.seq + len(packets)) % transport.SEQ_MOD
        return packets


def frame(packet: Packet) -> bytes:
    data = transport.encode_packet(packet)
    return LENGTH.pack(len(data)) + data


@dataclass(eq=False)
class SubscriberSession:
    id: int
    subscribed_at: float
    sock: socket.socket
    queue: queue.Queue = field(repr=False)
    packets_sent: int = 0
    live: bool = True
    thread: threading.Thread | None = field(default=None, repr=False)


_CLOSE = object()


class Broadcaster:
    """Fan-out of framed packets; one bounded queue and sender thread per listener.

    ``publish`` never blocks: a listener whose queue is full is disconnected.
    """

    def __init__(self, queue_limit: int = QUEUE_LIMIT):
        self.queue_limit = queue_limit
        self.sessions: list[SubscriberSession] = []
        self.evicted: list[SubscriberSession] = []
        self.published = 0
        self._ids = itertools.count(1)
        self._cond = threading.Condition()

    def add(self, sock: socket.socket) -> SubscriberSession:
        s = SubscriberSession(next(self._ids), time.monotonic(), sock, queue.Queue(self.queue_limit))
        s.thread = threading.Thread(target=self._sender, args=(s,), name=f"listener-{s.id}", daemon=True)
        with self._cond:
            self.sessions.append(s)
            self._cond.notify_all()
        s.thread.start()
        log.info("listener %d subscribed", s.id)
        return s

    @property
    def listener_count(self) -> int:
        with self._cond:
            return sum(s.live for s in self.sessions)

    def wait_for_listeners(self, n: int, timeout: float | None = None) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: sum(s.live for s in self.sessions) >= n, timeout)

    def publish(self, data: bytes) -> None:
        with self._cond:
            self.published += 1
            for s in list(self.sessions):
                if not s.live:
                    continue
                try:
                    s.queue.put_nowait(data)
                except queue.Full:
                    self._evict(s, "queue limit exceeded")

    def _evict(self, s: SubscriberSession, reason: str) -> None:
        log.warning("disconnecting listener %d: %s", s.id, reason)
        s.live = False
        self.evicted.append(s)
        _hard_close(s.sock)

    def _sender(self, s: SubscriberSession) -> None:
        try:
            while s.live:
                item = s.queue.get()
                if item is _CLOSE:
                    break
                s.sock.sendall(item)
                s.packets_sent += 1
        except OSError as exc:
            log.info("listener %d dropped: %s", s.id, exc)
        finally:
            s.live = False
            _hard_close(s.sock)
            with self._cond:
                if s in self.sessions:
                    self.sessions.remove(s)
                self._cond.notify_all()

    def close(self, timeout: float = 5.0) -> None:
        """End of stream: let each live listener drain its queue, then hang up."""
        with self._cond:
            sessions = list(self.sessions)
        for s in sessions:
            if not s.live:
                continue
            try:
                s.queue.put(_CLOSE, timeout=timeout)
            except queue.Full:
                with self._cond:
                    self._evict(s, "could not drain at end of stream")
        for s in sessions:
            if s.thread is not None:
                s.thread.join(timeout)


def _hard_close(sock: socket.socket) -> None:
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    sock.close()


def iter_blocks(buf: AudioBuffer, block_size: int = DEFAULT_BLOCK) -> Iterator[AudioBuffer]:
    for i in range(0, len(buf), block_size):
        yield buf.with_samples(buf.samples[i : i + block_size])


def _bind(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
        sock.listen(16)
    except OSError as exc:
        sock.close()
        raise ServiceError(f"cannot bind {host}:{port}: {exc}") from exc
    sock.settimeout(0.2)
    return sock


class StethoscopeServer:
    """Runs the transmitter over an audio source and broadcasts its packets.

    ``speed`` paces blocks at that multiple of real time (``None`` = no pacing).
    ``wait_for_listeners`` holds streaming until that many listeners connect.
    """

    def __init__(
        self,
        source: Iterable[AudioBuffer],
        config: ChainConfig | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
        control_port: int = 0,
        queue_limit: int = QUEUE_LIMIT,
        speed: float | None = 1.0,
        wait_for_listeners: int = 0,
        wait_timeout: float | None = None,
        send_buffer: int | None = None,
    ):
        self.source = source
        self.transmitter = Transmitter(config)
        self.broadcaster = Broadcaster(queue_limit)
        self.host, self.port, self.control_port = host, port, control_port
        self.speed = speed
        self.wait_for_listeners = wait_for_listeners
        self.wait_timeout = wait_timeout
        self.send_buffer = send_buffer
        self.streaming = False
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._stream_sock = self._control_sock = None

    @property
    def stream_address(self) -> tuple[str, int]:
        return self._stream_sock.getsockname()

    @property
    def control_address(self) -> tuple[str, int]:
        return self._control_sock.getsockname()

    def start(self) -> StethoscopeServer:
        self._stream_sock = _bind(self.host, self.port)
        try:
            self._control_sock = _bind(self.host, self.control_port)
        except ServiceError:
            self._stream_sock.close()
            raise
        for target, name in ((self._accept_listeners, "accept-stream"), (self._accept_control, "accept-control")):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def _accept_loop(self, sock, handle) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.settimeout(None)
            handle(conn)

    def _accept_listeners(self) -> None:
        def handle(conn):
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            if self.send_buffer:
                conn.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, self.send_buffer)
            self.broadcaster.add(conn)

        self._accept_loop(self._stream_sock, handle)

    def _accept_control(self) -> None:
        def handle(conn):
            threading.Thread(target=self._control_session, args=(conn,), daemon=True).start()

        self._accept_loop(self._control_sock, handle)

    def status(self) -> str:
        cfg = self.transmitter.config
        return (
            f"STATUS volume={cfg.volume:g} cutoff={cfg.cutoff} listeners={self.broadcaster.listener_count} "
            f"packets={self.broadcaster.published} streaming={int(self.streaming)}"
        )

    def handle_command(self, line: str) -> str:
        try:
            cmd = parse_command(line)
            if cmd.kind is CommandKind.GET_STATUS:
                return self.status()
            self.transmitter.submit(cmd)
            return "OK"
        except ControlError as exc:
            return f"ERR {exc}"

    def _control_session(self, conn: socket.socket) -> None:
        with conn, conn.makefile("rwb") as fh:
            try:
                for raw in fh:
                    line = raw.decode("utf-8", "replace").strip()
                    if not line:
                        continue
                    fh.write((self.handle_command(line) + "\n").encode())
                    fh.flush()
            except OSError:
                pass

    def run(self) -> None:
        """Stream the whole source, then close every listener cleanly."""
        if self.wait_for_listeners:
            self.broadcaster.wait_for_listeners(self.wait_for_listeners, self.wait_timeout)
        self.streaming = True
        t0 = time.monotonic()
        elapsed = 0.0
        try:
            for buf in self.source:
                if self._stop.is_set():
                    break
                for p in self.transmitter.process(buf):
                    self.broadcaster.publish(frame(p))
                elapsed += buf.duration
                if self.speed:
                    delay = t0 + elapsed / self.speed - time.monotonic()
                    if delay > 0:
                        time.sleep(delay)
        finally:
            self.streaming = False
            self.broadcaster.close()

    def shutdown(self) -> None:
        self._stop.set()
        for sock in (self._stream_sock, self._control_sock):
            if sock is not None:
                sock.close()
        for t in self._threads:
            t.join(1.0)

    def serve(self) -> None:
        self.start()
        try:
            self.run()
        finally:
            self.shutdown()


def serve(bind_address, source, control_port: int, **kwargs) -> StethoscopeServer:
    """Bind, stream ``source`` to all listeners, and shut down when it ends."""
    host, port = bind_address
    server = StethoscopeServer(source, host=host, port=port, control_port=control_port, **kwargs)
    server.serve()
    return server


@dataclass
class ListenResult:
    status: str  # "eos", "reset" or "protocol_error"
    packets: int
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "eos"


def _recv_exact(sock: socket.socket, n: int, at_boundary: bool) -> bytes | None:
    chunks = bytearray()
    while len(chunks) < n:
        part = sock.recv(n - len(chunks))
        if not part:
            if at_boundary and not chunks:
                return None
            raise ProtocolError("connection closed mid-frame")
        chunks += part
    return bytes(chunks)


def read_frames(sock: socket.socket) -> Iterator[Packet]:
    """Yield decoded packets until the peer closes at a frame boundary."""
    while True:
        head = _recv_exact(sock, LENGTH.size, at_boundary=True)
        if head is None:
            return
        (n,) = LENGTH.unpack(head)
        if not transport.HEADER_SIZE < n <= transport.MAX_PACKET_SIZE:
            raise ProtocolError(f"frame length {n} outside ({transport.HEADER_SIZE}, {transport.MAX_PACKET_SIZE}]")
        body = _recv_exact(sock, n, at_boundary=False)
        try:
            yield transport.decode_packet(body)
        except DecodeError as exc:
            raise ProtocolError(f"undecodable packet: {exc}") from exc


def listen_client(
    server_address,
    sink: Callable[[Packet], object],
    timeout: float | None = 30.0,
    recv_buffer: int | None = None,
) -> ListenResult:
    """Receive the broadcast, passing each decoded packet to ``sink`` in arrival order.

    Raises :class:`ServiceError` if the server cannot be reached. Once
    connected, every outcome is reported in the returned :class:`ListenResult`
    and ``sink.close()`` (if present) is always called.
    """
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    if recv_buffer:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, recv_buffer)
    sock.settimeout(timeout)
    try:
        sock.connect(tuple(server_address))
    except OSError as exc:
        sock.close()
        raise ServiceError(f"cannot connect to {server_address[0]}:{server_address[1]}: {exc}") from exc
    count = 0
    try:
        for packet in read_frames(sock):
            sink(packet)
            count += 1
        return ListenResult("eos", count)
    except ProtocolError as exc:
        return ListenResult("protocol_error", count, str(exc))
    except OSError as exc:
        return ListenResult("reset", count, str(exc))
    finally:
        sock.close()
        close = getattr(sink, "close", None)
        if callable(close):
            close()


class RecordingSink:
    """Collects received packets and renders them as one reassembled signal."""

    def __init__(self, sample_rate: int = 4000, full_scale: float = 2.5):
        self.sample_rate = sample_rate
        self.full_scale = full_scale
        self.packets: list[Packet] = []
        self.closed = False

    def __call__(self, packet: Packet) -> None:
        self.packets.append(packet)

    def close(self) -> None:
        self.closed = True

    def to_buffer(self, concealment="zero_fill") -> AudioBuffer:
        # TCP delivery is reliable, so every packet is treated as on time
        jb = transport.JitterBuffer(self.sample_rate)
        for p in self.packets:
            jb.push(p, arrival_time=0.0)
        block = jb.drain(concealment)
        return dequantize_dac(block, self.full_scale)


def send_control(address, line: str, timeout: float = 5.0) -> str:
    """Send one control command and return the reply line."""
    try:
        with socket.create_connection(tuple(address), timeout=timeout) as sock:
            sock.sendall(line.strip().encode() + b"\n")
            with sock.makefile("rb") as fh:
                reply = fh.readline()
    except OSError as exc:
        raise ServiceError(f"control connection to {address[0]}:{address[1]} failed: {exc}") from exc
    if not reply:
        raise ServiceError("control connection closed without a reply")
    return reply.decode().strip()
