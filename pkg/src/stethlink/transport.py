"""Packetization, wire codec, lossy link model and receive-side jitter buffer.

Wire format (big-endian)::

    0      version (0x01)
    1      flags   bit0 = cutoff (0: 100 Hz, 1: 1000 Hz), bit1 = odd-count padding
    2..3   seq     uint16, wrapping
    4..7   timestamp  uint32 sample index of the first code, wrapping
    8      N       code count, 1..48
    9..    ceil(N*12/8) bytes; each code pair (s0, s1) packs into
           s0[11:4] | s0[3:0] s1[11:8] | s1[7:0]; odd N leaves a zero low nibble.
"""
from __future__ import annotations

import dataclasses
import enum
import math
import random
import struct
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from .chain import ADC_MAX_CODE, ADC_MID_CODE, SampleBlock
from .exceptions import (
    EncodeError,
    LengthMismatchError,
    TruncatedError,
    ValidationError,
    VersionError,
    DecodeError,
)

VERSION = 1
HEADER = struct.Struct(">BBHIB")
HEADER_SIZE = HEADER.size  # 9
MAX_CODES = 48
MAX_PAYLOAD = 102
MAX_PACKET_SIZE = HEADER_SIZE + (MAX_CODES * 12 + 7) // 8  # 81

FLAG_CUTOFF_1000 = 0x01
FLAG_ODD_PAD = 0x02

SEQ_MOD = 1 << 16
TS_MOD = 1 << 32


def cutoff_flags(cutoff: int) -> int:
    return FLAG_CUTOFF_1000 if cutoff == 1000 else 0


@dataclass(frozen=True, eq=False)
class Packet:
    seq: int
    timestamp: int
    codes: tuple[int, ...]
    flags: int = 0
    version: int = VERSION

    def __post_init__(self):
        codes = tuple(int(c) for c in self.codes)
        if not 1 <= len(codes) <= MAX_CODES:
            raise ValidationError(f"packet must carry 1..{MAX_CODES} codes, got {len(codes)}")
        if any(c < 0 or c > ADC_MAX_CODE for c in codes):
            raise ValidationError("codes must lie in [0, 4095]")
        if not 0 <= self.seq < SEQ_MOD or not 0 <= self.timestamp < TS_MOD:
            raise ValidationError("seq/timestamp out of range")
        # the padding bit is a property of the code count, never caller-chosen
        flags = (int(self.flags) & ~FLAG_ODD_PAD & 0xFF) | (FLAG_ODD_PAD if len(codes) % 2 else 0)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "flags", flags)

    def __eq__(self, other):
        if not isinstance(other, Packet):
            return NotImplemented
        return dataclasses.astuple(self) == dataclasses.astuple(other)

    def __hash__(self):
        return hash(dataclasses.astuple(self))

    @property
    def cutoff(self) -> int:
        return 1000 if self.flags & FLAG_CUTOFF_1000 else 100


def packetize(block: SampleBlock, seq_start: int = 0, flags: int = 0) -> list[Packet]:
    """Split a block greedily into packets of up to 48 codes."""
    codes = np.asarray(block.codes)
    packets = []
    for i, off in enumerate(range(0, codes.size, MAX_CODES)):
        packets.append(
            Packet(
                seq=(seq_start + i) % SEQ_MOD,
                timestamp=(block.start_timestamp + off) % TS_MOD,
                codes=tuple(codes[off : off + MAX_CODES].tolist()),
                flags=flags,
            )
        )
    return packets


def payload_size(n_codes: int) -> int:
    return (n_codes * 12 + 7) // 8


def encode_packet(p: Packet) -> bytes:
    n = len(p.codes)
    if n > MAX_CODES or payload_size(n) + HEADER_SIZE > MAX_PAYLOAD:
        raise EncodeError(f"packet with {n} codes exceeds the frame budget")
    out = bytearray(HEADER.pack(p.version, p.flags, p.seq, p.timestamp, n))
    codes = p.codes
    for i in range(0, n - 1, 2):
        s0, s1 = codes[i], codes[i + 1]
        out += bytes((s0 >> 4, ((s0 & 0xF) << 4) | (s1 >> 8), s1 & 0xFF))
    if n % 2:
        s0 = codes[-1]
        out += bytes((s0 >> 4, (s0 & 0xF) << 4))
    return bytes(out)


def decode_packet(data: bytes) -> Packet:
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise TruncatedError(f"need {HEADER_SIZE} header bytes, got {len(data)}")
    version, flags, seq, timestamp, n = HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionError(f"unsupported packet version {version}")
    if not 1 <= n <= MAX_CODES:
        raise LengthMismatchError(f"code count {n} outside 1..{MAX_CODES}")
    expected = HEADER_SIZE + payload_size(n)
    if len(data) < expected:
        raise TruncatedError(f"packet truncated: {len(data)} of {expected} bytes")
    if len(data) > expected:
        raise LengthMismatchError(f"packet has {len(data) - expected} trailing bytes")
    if bool(flags & FLAG_ODD_PAD) != bool(n % 2):
        raise LengthMismatchError("padding flag disagrees with code count")
    body = data[HEADER_SIZE:]
    codes = []
    for i in range(0, len(body) - 2, 3):
        b0, b1, b2 = body[i], body[i + 1], body[i + 2]
        codes.append((b0 << 4) | (b1 >> 4))
        codes.append(((b1 & 0xF) << 8) | b2)
    if n % 2:
        b0, b1 = body[-2], body[-1]
        if b1 & 0xF:
            raise DecodeError("non-zero padding nibble")
        codes.append((b0 << 4) | (b1 >> 4))
    return Packet(seq=seq, timestamp=timestamp, codes=tuple(codes), flags=flags, version=version)


@dataclass(frozen=True)
class LinkParams:
    bitrate: float = 250_000.0
    loss_prob: float = 0.0
    jitter_max: float = 0.020
    overhead_bytes: int = 25
    seed: int = 0

    def __post_init__(self):
        if not self.bitrate > 0:
            raise ValidationError("bitrate must be positive")
        if not 0.0 <= self.loss_prob < 1.0:
            raise ValidationError("loss_prob must be in [0, 1)")
        if self.jitter_max < 0:
            raise ValidationError("jitter_max must be non-negative")
        if self.overhead_bytes < 0:
            raise ValidationError("overhead_bytes must be non-negative")

    def serialization_delay(self, encoded_len: int) -> float:
        return (encoded_len + self.overhead_bytes) * 8 / self.bitrate


@dataclass(frozen=True)
class DeliveredPacket:
    packet: Packet
    send_time: float
    arrival_time: float
    dropped: bool = False
    tx_start: float = 0.0
    tx_end: float = 0.0


def send_schedule(packets: Sequence[Packet], sample_rate: int, start_time: float = 0.0) -> list[float]:
    """Time each packet is ready to send: when its last sample has been captured."""
    times = []
    origin = None
    for p in packets:
        if origin is None:
            origin = p.timestamp
        offset = (p.timestamp - origin) % TS_MOD
        times.append(start_time + (offset + len(p.codes)) / sample_rate)
    return times


def link_transmit(
    packets: Sequence[Packet], send_times: Sequence[float], params: LinkParams
) -> list[DeliveredPacket]:
    """Half-duplex FIFO channel with Bernoulli loss and uniform jitter.

    For each packet, in order, the seeded RNG draws one loss variate then one
    jitter variate, so the outcome sequence depends only on the inputs and
    ``params.seed``. Dropped packets still occupy the channel.
    """
    if len(packets) != len(send_times):
        raise ValidationError("packets and send_times differ in length")
    rng = random.Random(params.seed)
    busy_until = -math.inf
    last_send = -math.inf
    out = []
    for p, t in zip(packets, send_times):
        if t < last_send:
            raise ValidationError("send_times must be nondecreasing")
        last_send = t
        start = max(t, busy_until)
        end = start + params.serialization_delay(len(encode_packet(p)))
        busy_until = end
        dropped = rng.random() < params.loss_prob
        jitter = rng.uniform(0.0, params.jitter_max)
        out.append(DeliveredPacket(p, t, end + jitter, dropped, start, end))
    return out


def utilization(delivered: Sequence[DeliveredPacket]) -> float:
    """Fraction of the transmission span during which the channel was busy."""
    if not delivered:
        return 0.0
    busy = sum(d.tx_end - d.tx_start for d in delivered)
    span = max(d.tx_end for d in delivered) - min(d.send_time for d in delivered)
    return busy / span if span > 0 else 0.0


class Concealment(str, enum.Enum):
    ZERO_FILL = "zero_fill"
    REPEAT_LAST = "repeat_last"


@dataclass
class ReassemblyStats:
    received: int = 0
    played: int = 0
    late: int = 0
    duplicates: int = 0
    concealed_samples: int = 0


@dataclass
class ReassemblyResult:
    block: SampleBlock
    stats: ReassemblyStats
    latencies: list[float] = dataclasses.field(default_factory=list)


class JitterBuffer:
    """Timestamp-ordered playout buffer.

    The first packet to arrive anchors the playout clock: a sample with
    (unwrapped) index ``T`` is due at ``a0 + depth + (T - T0) / sample_rate``.
    A packet arriving after its first sample is due is late and discarded.
    """

    def __init__(self, sample_rate: int, depth: float = 0.100, origin: int | None = None):
        if not depth > 0:
            raise ValidationError("depth must be positive")
        self.sample_rate = sample_rate
        self.depth = depth
        self.origin = origin
        self.stats = ReassemblyStats()
        self.latencies: list[float] = []
        self._anchor: tuple[float, int] | None = None
        self._packets: dict[int, Packet] = {}

    def unwrap(self, timestamp: int) -> int:
        """Map a wrapping 32-bit timestamp to an index near ``origin``."""
        delta = (timestamp - self.origin) % TS_MOD
        if delta >= TS_MOD // 2:
            delta -= TS_MOD
        return self.origin + delta

    def due_time(self, index: int) -> float:
        a0, t0 = self._anchor
        return a0 + self.depth + (index - t0) / self.sample_rate

    def push(self, packet: Packet, arrival_time: float, send_time: float | None = None) -> bool:
        """Offer a packet; returns False when it is late or a duplicate."""
        self.stats.received += 1
        if self.origin is None:
            self.origin = packet.timestamp
        index = self.unwrap(packet.timestamp)
        if self._anchor is None:
            self._anchor = (arrival_time, index)
        if arrival_time > self.due_time(index):
            self.stats.late += 1
            return False
        if index in self._packets:
            self.stats.duplicates += 1
            return False
        self._packets[index] = packet
        if send_time is not None:
            self.latencies.append(arrival_time - send_time)
        return True

    def drain(
        self,
        concealment: Concealment | str = Concealment.ZERO_FILL,
        start: int | None = None,
        total: int | None = None,
    ) -> SampleBlock:
        """Release buffered packets in timestamp order, concealing gaps.

        Without ``start``/``total`` the output spans the first to the last
        buffered sample; otherwise it spans ``[start, start + total)`` in
        unwrapped sample indices, concealing missing edges as well.
        """
        concealment = Concealment(concealment)
        if not self._packets and (start is None or total is None):
            return SampleBlock(np.zeros(0, dtype=np.int64), 0, self.sample_rate)
        indices = sorted(self._packets)
        lo = indices[0] if start is None else start
        hi = (indices[-1] + len(self._packets[indices[-1]].codes)) if total is None else lo + total
        out = np.full(hi - lo, ADC_MID_CODE, dtype=np.int64)
        covered = np.zeros(hi - lo, dtype=bool)
        for idx in indices:
            codes = np.asarray(self._packets[idx].codes)
            a, b = max(idx, lo), min(idx + codes.size, hi)
            if a >= b:
                continue
            out[a - lo : b - lo] = codes[a - idx : b - idx]
            covered[a - lo : b - lo] = True
            self.stats.played += 1
        self.stats.concealed_samples += int((~covered).sum())
        if concealment is Concealment.REPEAT_LAST:
            _repeat_fill(out, covered, self._packets, indices, lo)
        self._packets.clear()
        return SampleBlock(out, lo % TS_MOD, self.sample_rate)


def _repeat_fill(out, covered, packets, indices, lo):
    """Fill each uncovered run by tiling the codes of the packet before it."""
    n = out.size
    i = 0
    pkt_starts = np.array(indices) - lo
    while i < n:
        if covered[i]:
            i += 1
            continue
        j = i
        while j < n and not covered[j]:
            j += 1
        k = np.searchsorted(pkt_starts, i, side="right") - 1
        if k >= 0:
            prev = np.asarray(packets[indices[k]].codes)
            out[i:j] = np.resize(prev, j - i)
        i = j


def reassemble(
    delivered: Iterable[DeliveredPacket],
    sample_rate: int,
    depth: float = 0.100,
    concealment: Concealment | str = Concealment.ZERO_FILL,
    start: int | None = None,
    total: int | None = None,
) -> ReassemblyResult:
    """Feed channel outcomes to a jitter buffer in arrival order and play out."""
    jb = JitterBuffer(sample_rate, depth, origin=start)
    arrived = sorted((d for d in delivered if not d.dropped), key=lambda d: d.arrival_time)
    for d in arrived:
        jb.push(d.packet, d.arrival_time, d.send_time)
    block = jb.drain(concealment, start, total)
    return ReassemblyResult(block, jb.stats, jb.latencies)
