"""Mono audio buffers and the primitive operations every other module builds on."""

from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import gcd

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, resample_poly

SAMPLE_RATE = 22050
EXCERPT_SECONDS = 30.0

# Zero crossings of the sinc kernel on each side, per polyphase branch.
# 32 per side gives 64 taps per output phase.
SINC_ZERO_CROSSINGS = 32
KAISER_BETA = 9.0


class AudioError(Exception):
    """Base class for audio I/O and validation failures."""


class MalformedWavError(AudioError):
    pass


class UnsupportedEncodingError(AudioError):
    pass


class RejectedTrackError(AudioError):
    """Raised when a recording is too short to yield an excerpt."""


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain NaN or Inf")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def segment(self, start: int, stop: int) -> "AudioClip":
        return AudioClip(self.samples[start:stop], self.sample_rate)


def silence(seconds: float, sample_rate: int = SAMPLE_RATE) -> AudioClip:
    return AudioClip(np.zeros(int(round(seconds * sample_rate)), np.float32), sample_rate)


def load_wav(path, target_rate: int | None = SAMPLE_RATE) -> AudioClip:
    """Read a PCM or float WAV file as a mono clip in [-1, 1].

    Multi-channel files are downmixed by the arithmetic channel mean.  When
    ``target_rate`` is given the clip is resampled to it.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        msg = str(exc)
        if "format" in msg.lower() or "unsupported" in msg.lower() or "bit depth" in msg.lower():
            raise UnsupportedEncodingError(f"{path}: {msg}") from exc
        raise MalformedWavError(f"{path}: {msg}") from exc
    except (EOFError, OSError) as exc:
        raise MalformedWavError(f"{path}: {exc}") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise UnsupportedEncodingError(f"{path}: sample type {data.dtype} not supported")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise MalformedWavError(f"{path}: non-finite samples")
    clip = AudioClip(samples, rate)
    if target_rate is not None:
        clip = resample(clip, target_rate)
    return clip


def save_wav(path, clip: AudioClip) -> None:
    """Write a clip as 32-bit float WAV."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))


@lru_cache(maxsize=64)
def _sinc_kernel(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    numtaps = 2 * SINC_ZERO_CROSSINGS * max_rate + 1
    # cutoff just under the lower Nyquist so the transition band stays out of the passband's alias image
    return firwin(numtaps, 0.94 / max_rate, window=("kaiser", KAISER_BETA))


def _resample_rational(x: np.ndarray, up: int, down: int) -> np.ndarray:
    if up == down:
        return np.asarray(x, dtype=np.float64)
    return resample_poly(np.asarray(x, dtype=np.float64), up, down, window=_sinc_kernel(up, down))


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited resampling with a Kaiser-windowed sinc (64 taps per phase, beta 9).

    Stopband attenuation is roughly 90 dB.  Returns the input object untouched
    when the rate already matches.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == clip.sample_rate:
        return clip
    g = gcd(target_rate, clip.sample_rate)
    up, down = target_rate // g, clip.sample_rate // g
    if max(up, down) > 4096:
        frac = Fraction(target_rate, clip.sample_rate).limit_denominator(1024)
        up, down = frac.numerator, frac.denominator
    y = _resample_rational(clip.samples, up, down)
    n_out = int(round(len(clip) * target_rate / clip.sample_rate))
    return AudioClip(_fit_length(y, n_out), target_rate)


def resample_by_ratio(x: np.ndarray, ratio: float, max_denominator: int = 256) -> np.ndarray:
    """Resample a raw signal so its length scales by ``ratio``.

    The ratio is approximated by a fraction with bounded denominator, then the
    output is fitted to exactly ``round(len(x) * ratio)`` samples.
    """
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    frac = Fraction(ratio).limit_denominator(max_denominator)
    up, down = frac.numerator, frac.denominator
    y = _resample_rational(x, up, down)
    return _fit_length(y, int(round(len(x) * ratio)))


def _fit_length(y: np.ndarray, n: int) -> np.ndarray:
    if len(y) >= n:
        return y[:n]
    return np.concatenate([y, np.zeros(n - len(y), dtype=y.dtype)])


def trim_excerpt(clip: AudioClip, seconds: float = EXCERPT_SECONDS) -> AudioClip:
    """Cut the fixed-length excerpt: from 0:30 for recordings over a minute, else from 0:00."""
    sr = clip.sample_rate
    n = int(round(seconds * sr))
    if len(clip) < n:
        raise RejectedTrackError(
            f"recording lasts {clip.duration:.2f} s, shorter than {seconds:g} s"
        )
    start = int(round(30.0 * sr)) if clip.duration > 60.0 else 0
    return clip.segment(start, start + n)


def mix(clips) -> AudioClip:
    """Sum clips sample-wise.  Shorter clips are zero-padded at the tail; no normalisation."""
    clips = list(clips)
    if not clips:
        raise ValueError("mix() needs at least one clip")
    rate = clips[0].sample_rate
    if any(c.sample_rate != rate for c in clips):
        raise ValueError("mix() requires a common sample rate")
    n = max(len(c) for c in clips)
    out = np.zeros(n, dtype=np.float64)
    for c in clips:
        out[: len(c)] += c.samples
    return AudioClip(out, rate)


def mirror_pad(clip: AudioClip, target_duration: float) -> AudioClip:
    """Extend the tail by reflection (edge sample excluded) up to ``target_duration`` seconds."""
    return AudioClip(
        mirror_pad_array(clip.samples, int(round(target_duration * clip.sample_rate))),
        clip.sample_rate,
    )


def mirror_pad_array(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) == 0:
        raise ValueError("cannot mirror-pad an empty clip")
    if n <= len(x):
        return np.asarray(x)[:n] if n < len(x) else np.asarray(x)
    if len(x) == 1:
        return np.full(n, x[0], dtype=np.asarray(x).dtype)
    # the reflection of x[0..L-1] without repeated edges has period 2(L-1)
    period = np.concatenate([x, x[-2:0:-1]])
    reps = -(-n // len(period))
    return np.tile(period, reps)[:n]


def rms_power_db(clip_or_samples) -> float:
    """Mean power in dB; ``-inf`` for an all-zero input."""
    x = clip_or_samples.samples if isinstance(clip_or_samples, AudioClip) else clip_or_samples
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return float("-inf")
    power = float(np.mean(x * x))
    if power <= 0.0:
        return float("-inf")
    return 10.0 * np.log10(power)
