"""WAV decoding, peak normalization and fixed-length segmentation."""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.io import wavfile

from bofbench.errors import EmptyAudioError, UnreadableAudioError, UnsupportedEncodingError

logger = logging.getLogger(__name__)

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE

_SUPPORTED = {
    (WAVE_FORMAT_PCM, 8),
    (WAVE_FORMAT_PCM, 16),
    (WAVE_FORMAT_PCM, 24),
    (WAVE_FORMAT_PCM, 32),
    (WAVE_FORMAT_IEEE_FLOAT, 32),
}


@dataclass(frozen=True, eq=False)
class SampleBuffer:
    samples: np.ndarray
    sample_rate: int
    source_id: str
    segment_index: int | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


class WavInfo(NamedTuple):
    sample_rate: int
    channels: int
    bits_per_sample: int
    format_tag: int
    n_frames: int


def probe(path) -> WavInfo:
    """Read the RIFF header of a WAV file without decoding samples."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise UnreadableAudioError(f"{path}: {exc.strerror or exc}") from exc
    with fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
            raise UnreadableAudioError(f"{path}: not a RIFF/WAVE file")
        fmt = None
        data_bytes = None
        while True:
            chunk = fh.read(8)
            if len(chunk) < 8:
                break
            cid, size = struct.unpack("<4sI", chunk)
            if cid == b"fmt ":
                body = fh.read(size)
                if len(body) < 16:
                    raise UnreadableAudioError(f"{path}: truncated fmt chunk")
                tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", body[:16])
                if tag == WAVE_FORMAT_EXTENSIBLE and len(body) >= 26:
                    tag = struct.unpack("<H", body[24:26])[0]
                fmt = (tag, channels, rate, block_align, bits)
                if size & 1:
                    fh.seek(1, os.SEEK_CUR)
            elif cid == b"data":
                data_bytes = size
                break
            else:
                fh.seek(size + (size & 1), os.SEEK_CUR)
    if fmt is None or data_bytes is None:
        raise UnreadableAudioError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, block_align, bits = fmt
    if (tag, bits) not in _SUPPORTED:
        raise UnsupportedEncodingError(f"{path}: format tag {tag:#06x} with {bits} bits per sample")
    if channels not in (1, 2):
        raise UnsupportedEncodingError(f"{path}: {channels} channels (only mono and stereo are supported)")
    if rate <= 0:
        raise UnreadableAudioError(f"{path}: invalid sample rate {rate}")
    n_frames = data_bytes // block_align if block_align else 0
    return WavInfo(rate, channels, bits, tag, n_frames)


def _to_float(data: np.ndarray, bits: int) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.float32:
        return data.astype(np.float64)
    raise UnsupportedEncodingError(f"sample dtype {data.dtype} ({bits} bits)")


def decode(path, source_id: str | None = None) -> SampleBuffer:
    """Decode a PCM WAV file into a mono float buffer in [-1, 1].

    Stereo is mixed down by averaging the two channels.
    """
    info = probe(path)
    if info.n_frames == 0:
        raise EmptyAudioError(f"{path}: zero-length audio")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise UnsupportedEncodingError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise UnreadableAudioError(f"{path}: {exc}") from exc
    samples = _to_float(data, info.bits_per_sample)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise EmptyAudioError(f"{path}: zero-length audio")
    if not np.all(np.isfinite(samples)):
        raise UnsupportedEncodingError(f"{path}: non-finite float samples")
    return SampleBuffer(samples, int(rate), source_id if source_id is not None else str(path))


def encode(path, buf: SampleBuffer, bits: int = 16) -> None:
    """Write a buffer as mono PCM (16-bit) or IEEE float (32-bit) WAV."""
    x = np.clip(buf.samples, -1.0, 1.0)
    if bits == 16:
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    elif bits == 32:
        data = x.astype("<f4")
    else:
        raise ValueError(f"unsupported bit depth for writing: {bits}")
    wavfile.write(path, buf.sample_rate, data)


def normalize(buf: SampleBuffer) -> SampleBuffer:
    """Peak-normalize so that max |sample| == 1.  All-zero input is returned as is."""
    peak = float(np.max(np.abs(buf.samples)))
    if peak == 0.0:
        return buf
    return replace(buf, samples=buf.samples / peak)


def unit_length(sample_rate: int, unit_seconds: float) -> int:
    if unit_seconds <= 0:
        raise ValueError(f"unit_seconds must be positive, got {unit_seconds}")
    n = int(round(unit_seconds * sample_rate))
    if n < 1:
        raise ValueError(f"unit of {unit_seconds} s is shorter than one sample at {sample_rate} Hz")
    return n


def segment_bounds(n_samples: int, sample_rate: int, unit_seconds: float) -> list[tuple[int, int]]:
    """(start, stop) sample ranges of the units ``segment`` would produce."""
    unit = unit_length(sample_rate, unit_seconds)
    n_full, rem = divmod(n_samples, unit)
    bounds = [(i * unit, (i + 1) * unit) for i in range(n_full)]
    # a trailing remainder of at least half a unit survives as a shorter unit
    if rem > 0 and 2 * rem >= unit:
        bounds.append((n_full * unit, n_samples))
    return bounds


def segment(buf: SampleBuffer, unit_seconds: float) -> list[SampleBuffer]:
    bounds = segment_bounds(len(buf), buf.sample_rate, unit_seconds)
    if not bounds:
        logger.warning(
            "%s: %.1f s recording yields no %.1f s unit", buf.source_id, buf.duration, unit_seconds
        )
    return [
        SampleBuffer(buf.samples[a:b], buf.sample_rate, buf.source_id, segment_index=i)
        for i, (a, b) in enumerate(bounds)
    ]
