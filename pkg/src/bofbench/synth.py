"""Synthetic soundscape datasets: stationary noise shaped by smooth spectral envelopes.

Each class owns a log-magnitude envelope over log-frequency,
``separation * sum_j A_cj cos(j pi u)``; every recording adds its own
``jitter * sum_j B_rj cos(j pi u)``.  Recordings longer than one unit are
cut into units by the segmented policy, so units of one recording share the
recording's envelope exactly while independent recordings do not.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import irfft, rfft

from bofbench.audio_io import SampleBuffer, encode
from bofbench.dataset import ManifestEntry, UnitPolicy, write_manifest

N_SHAPE_TERMS = 6
F_LOW = 50.0


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 4
    items_per_class: int = 8
    seconds: float = 60.0
    sample_rate: int = 16000
    separation: float = 1.0
    jitter: float = 0.0
    units_per_recording: int = 1
    seed: int = 0

    @property
    def policy(self) -> UnitPolicy:
        return UnitPolicy("segmented", self.seconds)


def envelope(freqs: np.ndarray, coeffs: np.ndarray, sample_rate: int) -> np.ndarray:
    """Linear magnitude response exp(sum_j c_j cos(j pi u)), u = normalized log frequency."""
    f = np.clip(freqs, F_LOW, sample_rate / 2)
    u = np.log(f / F_LOW) / np.log(sample_rate / 2 / F_LOW)
    j = np.arange(1, len(coeffs) + 1)
    return np.exp(np.cos(np.pi * u[:, None] * j[None, :]) @ coeffs)


def shaped_noise(n_samples: int, sample_rate: int, coeffs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(n_samples)
    spec = rfft(white) * envelope(np.fft.rfftfreq(n_samples, 1.0 / sample_rate), coeffs, sample_rate)
    x = irfft(spec, n=n_samples)
    return 0.25 * x / np.max(np.abs(x))


def make_dataset(root, spec: SynthSpec, name: str = "synthetic") -> Path:
    """Write WAV files and a recording-level manifest under ``root``; return the manifest path.

    Load the manifest with ``spec.policy`` to obtain one item per unit.
    """
    if spec.items_per_class % spec.units_per_recording:
        raise ValueError("items_per_class must be a multiple of units_per_recording")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    class_coeffs = rng.standard_normal((spec.n_classes, N_SHAPE_TERMS))
    n_rec = spec.items_per_class // spec.units_per_recording
    n_samples = int(round(spec.seconds * spec.sample_rate)) * spec.units_per_recording
    entries = []
    for c in range(spec.n_classes):
        label = f"class{c}"
        for r in range(n_rec):
            coeffs = spec.separation * class_coeffs[c] + spec.jitter * rng.standard_normal(N_SHAPE_TERMS)
            x = shaped_noise(n_samples, spec.sample_rate, coeffs, rng)
            rec_id = f"{label}_rec{r:02d}"
            path = root / f"{rec_id}.wav"
            encode(path, SampleBuffer(x, spec.sample_rate, rec_id))
            entries.append(ManifestEntry(rec_id, path, label, rec_id, rec_id))
    manifest = root / f"{name}.csv"
    write_manifest(manifest, entries)
    return manifest
