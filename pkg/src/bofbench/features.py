"""MFCC time series from sample buffers.

Frames of 2048 samples with a 1024-sample hop are Hann-weighted, turned into
magnitude spectra, pooled by a 40-band mel filterbank (linear below 1 kHz,
logarithmic above, unit-area triangles), log-compressed with a floor and
decorrelated with an orthonormal DCT-II.
"""

from __future__ import annotations

import functools
import io
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct, rfft
from scipy.signal import get_window

from bofbench.audio_io import SampleBuffer
from bofbench.errors import DataError

WINDOW = 2048
HOP = 1024
N_MFCC = 20
N_FILTERS = 40
FMIN = 20.0
LOG_FLOOR = 1e-10

_F_SP = 200.0 / 3.0
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0

_BLOCK = 1024


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    frames: np.ndarray
    source_id: str = ""
    segment_index: int | None = None

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64, ndmin=2)
        if frames.ndim != 2:
            raise ValueError(f"frames must be 2-D, got shape {frames.shape}")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def d(self) -> int:
        return self.frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def __len__(self):
        return self.n_frames

    def to_bytes(self) -> bytes:
        """Header (d, N_T as little-endian uint64) then row-major little-endian float64."""
        return struct.pack("<QQ", self.d, self.n_frames) + self.frames.astype("<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, raw: bytes, source_id: str = "", segment_index: int | None = None) -> FeatureSequence:
        if len(raw) < 16:
            raise DataError("feature file truncated: missing header")
        d, n = struct.unpack("<QQ", raw[:16])
        body = raw[16:]
        if len(body) != 8 * d * n:
            raise DataError(f"feature file size mismatch: header says {n}x{d}, payload has {len(body)} bytes")
        frames = np.frombuffer(body, dtype="<f8").reshape(n, d).astype(np.float64)
        return cls(frames, source_id, segment_index)

    def to_csv(self) -> str:
        out = io.StringIO()
        np.savetxt(out, self.frames, delimiter=",", fmt="%.17g")
        return out.getvalue()


def frame_count(sample_count: int, window: int = WINDOW, hop: int = HOP) -> int:
    if sample_count < window:
        raise ValueError(f"{sample_count} samples is shorter than one {window}-sample window")
    return (sample_count - window) // hop + 1


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    lin = f / _F_SP
    with np.errstate(divide="ignore"):
        log = _MIN_LOG_MEL + np.log(np.maximum(f, 1e-300) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(f >= _MIN_LOG_HZ, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    return np.where(
        m >= _MIN_LOG_MEL, _MIN_LOG_HZ * np.exp(_LOGSTEP * (m - _MIN_LOG_MEL)), _F_SP * m
    )


@functools.lru_cache(maxsize=16)
def mel_filterbank(
    sample_rate: int, n_fft: int = WINDOW, n_filters: int = N_FILTERS, fmin: float = FMIN, fmax: float | None = None
) -> np.ndarray:
    """(n_filters, n_fft // 2 + 1) triangular weights, each triangle of unit area in Hz."""
    if fmax is None:
        fmax = sample_rate / 2.0
    if not 0 <= fmin < fmax:
        raise ValueError(f"invalid filterbank range [{fmin}, {fmax}]")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_filters + 2))
    freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= 2.0 / (hi - lo)
    weights.setflags(write=False)
    return weights


@functools.lru_cache(maxsize=4)
def _hann(n: int) -> np.ndarray:
    w = get_window("hann", n, fftbins=True)
    w.setflags(write=False)
    return w


def log_mel_energies(samples: np.ndarray, sample_rate: int) -> np.ndarray:
    n = frame_count(len(samples))
    fb = mel_filterbank(sample_rate)
    win = _hann(WINDOW)
    frames = sliding_window_view(samples, WINDOW)[::HOP][:n]
    out = np.empty((n, fb.shape[0]))
    for start in range(0, n, _BLOCK):
        block = frames[start : start + _BLOCK] * win
        mag = np.abs(rfft(block, n=WINDOW, axis=1))
        out[start : start + _BLOCK] = mag @ fb.T
    return np.log(np.maximum(out, LOG_FLOOR))


def mfcc(buf: SampleBuffer, include_c0: bool = True, n_coeffs: int = N_MFCC) -> FeatureSequence:
    """MFCC frames for ``buf``; ``include_c0=False`` drops the energy-like coefficient 0."""
    if len(buf) < WINDOW:
        raise DataError(f"{buf.source_id}: {len(buf)} samples is shorter than one {WINDOW}-sample window")
    logmel = log_mel_energies(buf.samples, buf.sample_rate)
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :n_coeffs]
    if not include_c0:
        ceps = ceps[:, 1:]
    return FeatureSequence(ceps, buf.source_id, buf.segment_index)
