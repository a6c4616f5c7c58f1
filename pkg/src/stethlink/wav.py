"""Canonical mono 16-bit PCM WAV storage for auscultation recordings.

Volts map to PCM as ``round(v / full_scale * 32768)`` clamped to
``[-32768, 32767]``, so ``-full_scale`` is -32768, ``+full_scale`` saturates at
32767 and 0 V stays exactly 0.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .chain import AudioBuffer
from .exceptions import (
    MalformedWavError,
    UnsupportedBitDepthError,
    UnsupportedChannelsError,
    UnsupportedFormatError,
    ValidationError,
)

WAVE_FORMAT_PCM = 0x0001
BITS = 16
PCM_SCALE = 32768.0

_FMT = struct.Struct("<HHIIHH")


def volts_to_pcm(samples: np.ndarray, full_scale: float) -> np.ndarray:
    scaled = np.floor(np.asarray(samples, dtype=np.float64) / full_scale * PCM_SCALE + 0.5)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def pcm_to_volts(pcm: np.ndarray, full_scale: float) -> np.ndarray:
    return pcm.astype(np.float64) / PCM_SCALE * full_scale


def encode_wav(buf: AudioBuffer, full_scale: float = 2.5) -> bytes:
    if not isinstance(buf, AudioBuffer):
        raise ValidationError("expected AudioBuffer")
    if not full_scale > 0:
        raise ValidationError("full_scale must be positive")
    data = volts_to_pcm(buf.samples, full_scale).tobytes()
    block_align = BITS // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack("<I", 16)
    header += _FMT.pack(WAVE_FORMAT_PCM, 1, buf.sample_rate, buf.sample_rate * block_align, block_align, BITS)
    header += b"data" + struct.pack("<I", len(data))
    return header + data


def write_wav(path, buf: AudioBuffer, full_scale: float = 2.5) -> None:
    blob = encode_wav(buf, full_scale)
    with open(path, "wb") as fh:
        fh.write(blob)


def decode_wav(blob: bytes, full_scale: float = 2.5) -> AudioBuffer:
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise MalformedWavError("not a RIFF/WAVE file")
    riff_size = struct.unpack_from("<I", blob, 4)[0]
    if riff_size + 8 > len(blob):
        raise MalformedWavError(f"RIFF size {riff_size} exceeds file length {len(blob)}")
    end = riff_size + 8
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= end:
        cid = blob[pos : pos + 4]
        size = struct.unpack_from("<I", blob, pos + 4)[0]
        body_start = pos + 8
        if body_start + size > end:
            raise MalformedWavError(f"chunk {cid!r} overruns the file")
        body = blob[body_start : body_start + size]
        if cid == b"fmt ":
            if size < 16:
                raise MalformedWavError("fmt chunk too short")
            fmt = _FMT.unpack_from(body)
        elif cid == b"data":
            data = body
        pos = body_start + size + (size & 1)
    if fmt is None:
        raise MalformedWavError("missing fmt chunk")
    if data is None:
        raise MalformedWavError("missing data chunk")
    tag, channels, rate, byte_rate, block_align, bits = fmt
    if tag != WAVE_FORMAT_PCM:
        raise UnsupportedFormatError(f"format tag 0x{tag:04x} is not PCM")
    if channels != 1:
        raise UnsupportedChannelsError(f"{channels} channels; only mono is supported")
    if bits != BITS:
        raise UnsupportedBitDepthError(f"{bits}-bit samples; only 16-bit is supported")
    if block_align != 2 or byte_rate != rate * 2 or rate <= 0:
        raise MalformedWavError("inconsistent fmt chunk")
    if len(data) % 2:
        raise MalformedWavError("data chunk holds a partial sample")
    pcm = np.frombuffer(data, dtype="<i2")
    return AudioBuffer(rate, pcm_to_volts(pcm, full_scale))


def read_wav(path, full_scale: float = 2.5) -> AudioBuffer:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        return decode_wav(fh.read(), full_scale)
