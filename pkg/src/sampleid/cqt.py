"""Constant-Q magnitude spectrograms computed octave by octave.

Each octave uses the same 12 complex kernels (Hann-windowed exponentials,
Q = 1 / (2**(1/12) - 1)).  The signal is halved in rate between octaves, so
the kernels stay short and the frame hop halves with the rate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import firwin, resample_poly

from .audio import AudioClip, SAMPLE_RATE

BINS_PER_OCTAVE = 12
N_OCTAVES = 7
N_BINS = BINS_PER_OCTAVE * N_OCTAVES
FMIN = 32.70319566257483  # C1
HOP = 512
Q = 1.0 / (2.0 ** (1.0 / BINS_PER_OCTAVE) - 1.0)

LOG_FLOOR = 1e-5
DB_RANGE = 100.0


class CQTError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Spectrogram:
    values: np.ndarray  # (T, F), float32
    bins_per_octave: int = BINS_PER_OCTAVE
    hop: int = HOP
    f_min: float = FMIN
    sample_rate: int = SAMPLE_RATE

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


def bin_frequencies() -> np.ndarray:
    return FMIN * 2.0 ** (np.arange(N_BINS) / BINS_PER_OCTAVE)


def frequency_to_bin(freq: float) -> int:
    return int(round(BINS_PER_OCTAVE * np.log2(freq / FMIN)))


@lru_cache(maxsize=8)
def _octave_kernels(sample_rate: int):
    """Kernel matrix for the top octave at ``sample_rate``; reused for every octave."""
    top = N_BINS - BINS_PER_OCTAVE
    freqs = FMIN * 2.0 ** ((top + np.arange(BINS_PER_OCTAVE)) / BINS_PER_OCTAVE)
    lengths = np.ceil(Q * sample_rate / freqs).astype(int)
    width = int(lengths.max())
    width += width % 2 == 0  # odd so kernels centre on a sample
    kernels = np.zeros((width, BINS_PER_OCTAVE), dtype=np.complex128)
    centre = width // 2
    for i, (f, n) in enumerate(zip(freqs, lengths)):
        n_idx = np.arange(n) - (n - 1) / 2.0
        w = np.hanning(n + 2)[1:-1]
        k = w * np.exp(2j * np.pi * f * n_idx / sample_rate)
        # unit magnitude for a unit-amplitude sinusoid at the bin centre
        k *= 2.0 / w.sum()
        start = centre - (n - 1) // 2
        kernels[start : start + n, i] = np.conj(k)
    return kernels, width


@lru_cache(maxsize=1)
def _halfband() -> np.ndarray:
    # bins of interest sit below 0.18 of the rate, so a short filter is enough
    return firwin(31, 0.5, window=("kaiser", 8.0))


def _reflect(x: np.ndarray, left: int, right: int) -> np.ndarray:
    """Reflection padding (edge sample not repeated); pads may exceed the signal length."""
    return np.pad(x, (left, right), mode="reflect")


def min_length(sample_rate: int = SAMPLE_RATE) -> int:
    """Length in samples of the longest (lowest) analysis kernel."""
    _, width = _octave_kernels(sample_rate)
    return width * 2 ** (N_OCTAVES - 1)


def cqt(clip: AudioClip) -> Spectrogram:
    return Spectrogram(cqt_array(clip.samples, clip.sample_rate), sample_rate=clip.sample_rate)


def cqt_array(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Magnitude CQT, shape ``(ceil(len / HOP), 84)``, float32."""
    if HOP % 2 ** (N_OCTAVES - 1):
        raise CQTError("hop must be divisible by 2**(octaves-1)")
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < min_length(sample_rate):
        raise CQTError(
            f"clip of {len(x)} samples is shorter than the longest kernel ({min_length(sample_rate)})"
        )
    n_frames = -(-len(x) // HOP)
    kernels, width = _octave_kernels(sample_rate)
    half = width // 2
    # one reflection pad up front, wide enough for the lowest kernel plus the
    # decimation filters' edge transients; a multiple of 2**(octaves-1) keeps frames aligned
    step = 2 ** (N_OCTAVES - 1)
    pad = -(-(half * step + 64 * step) // step) * step
    tail = pad + n_frames * HOP - len(x)
    x = _reflect(x, pad, tail)
    out = np.empty((n_frames, N_BINS), dtype=np.float32)
    hop, offset = HOP, pad
    for octave in range(N_OCTAVES):
        hi = N_BINS - octave * BINS_PER_OCTAVE
        frames = sliding_window_view(x[offset - half :], width)[::hop][:n_frames]
        out[:, hi - BINS_PER_OCTAVE : hi] = np.abs(frames @ kernels)
        if octave < N_OCTAVES - 1:
            x = resample_poly(x, 1, 2, window=_halfband())
            hop //= 2
            offset //= 2
    return out


def log_compress_normalize(spec: Spectrogram) -> Spectrogram:
    return Spectrogram(
        log_normalize_array(spec.values),
        spec.bins_per_octave,
        spec.hop,
        spec.f_min,
        spec.sample_rate,
    )


def log_normalize_array(values: np.ndarray) -> np.ndarray:
    """dB relative to the clip maximum, clamped to [-100, 0] and mapped to [0, 1].

    A clip whose maximum sits at the floor (silence) maps to all zeros.
    """
    v = np.asarray(values, dtype=np.float64)
    peak = float(v.max()) if v.size else 0.0
    if peak <= LOG_FLOOR:
        return np.zeros(v.shape, dtype=np.float32)
    db = 20.0 * np.log10(np.maximum(v, LOG_FLOOR) / peak)
    return ((np.clip(db, -DB_RANGE, 0.0) + DB_RANGE) / DB_RANGE).astype(np.float32)


def clip_features(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """The model input for one clip: normalised log-CQT, shape (T, F)."""
    return log_normalize_array(cqt_array(samples, sample_rate))


_DUMP_MAGIC = b"SIDSPEC1"


def dump_spectrogram(path, spec: Spectrogram) -> None:
    """Flat binary dump: magic, T, F (uint32), f_min (float64), hop (uint32), row-major float32."""
    t, f = spec.values.shape
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack("<IIdI", t, f, spec.f_min, spec.hop))
        fh.write(np.ascontiguousarray(spec.values, dtype="<f4").tobytes())


def read_spectrogram_dump(path) -> Spectrogram:
    with open(path, "rb") as fh:
        if fh.read(len(_DUMP_MAGIC)) != _DUMP_MAGIC:
            raise ValueError(f"{path}: not a spectrogram dump")
        t, f, f_min, hop = struct.unpack("<IIdI", fh.read(20))
        values = np.frombuffer(fh.read(4 * t * f), dtype="<f4")
    if values.size != t * f:
        raise ValueError(f"{path}: truncated spectrogram dump")
    return Spectrogram(values.reshape(t, f).astype(np.float32), hop=hop, f_min=f_min)
