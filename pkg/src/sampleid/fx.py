"""Audio effects for the "sample" and "mixture" transformation stages.

Plans are drawn per dataset configuration (A, B, C) and applied in a fixed
order: EQ, dynamics, gain, filters, bitcrush, delay, distortion, reverb for
stem plans; pitch, time, frame operations for mixture plans.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import fftconvolve, lfilter, sosfilt

from .audio import AudioClip, load_wav, resample_by_ratio

STEM_KINDS = (
    "band_eq",
    "compressor",
    "gain",
    "lowpass",
    "highpass",
    "bitcrush",
    "delay",
    "distortion",
    "conv_reverb",
)
MIXTURE_KINDS = (
    "pitch_shift",
    "microtone_shift",
    "time_stretch",
    "frame_silence",
    "frame_duplicate",
    "frame_remove",
    "frame_reverse",
)
KINDS = STEM_KINDS + MIXTURE_KINDS
FRAME_KINDS = ("frame_silence", "frame_duplicate", "frame_remove", "frame_reverse")

# eligible kinds and allowed effect counts per configuration
STEM_TABLE = {
    "A": ((), (0,)),
    "B": (("band_eq", "compressor", "gain"), (0, 1)),
    "C": (STEM_KINDS, (0, 1, 2, 3)),
}
MIXTURE_TABLE = {
    "A": (("pitch_shift",), (0, 1)),
    "B": (("pitch_shift", "time_stretch", "frame_silence", "frame_duplicate", "frame_remove"), (0, 1)),
    "C": (
        ("microtone_shift", "time_stretch", "frame_silence", "frame_duplicate", "frame_remove", "frame_reverse"),
        (0, 1, 2, 3),
    ),
}

N_IMPULSE_RESPONSES = 14
FRAME_ACTIVATION = 0.10
MIN_EQ_Q = 0.05
DELAY_TAIL_DB = -60.0

STFT_SIZE = 2048
STFT_HOP = 512


class EffectParamError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    label: str = "B"
    stems_mode: str = "up_to_N_minus_1"

    def __post_init__(self):
        if self.label not in STEM_TABLE:
            raise ValueError(f"unknown configuration {self.label!r}")
        if self.stems_mode not in ("up_to_N_minus_1", "up_to_N"):
            raise ValueError(f"unknown stems mode {self.stems_mode!r}")


@dataclass
class EffectInstance:
    kind: str
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params}


@dataclass
class FxPlan:
    stage: str
    effects: list
    seed: int

    def to_dict(self) -> dict:
        return {"stage": self.stage, "seed": self.seed, "effects": [e.to_dict() for e in self.effects]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, record: dict) -> "FxPlan":
        return cls(
            record["stage"],
            [EffectInstance(e["kind"], e["params"]) for e in record["effects"]],
            int(record["seed"]),
        )

    @property
    def kinds(self) -> list:
        return [e.kind for e in self.effects]


# ----------------------------------------------------------------------------
# plan sampling


def _draw_params(kind: str, rng: np.random.Generator) -> dict:
    if kind == "band_eq":
        n = int(rng.integers(1, 9))
        return {
            "bands": [
                [float(rng.uniform(-20, 10)), float(rng.uniform(50, 11025)), float(rng.uniform(0, 1))]
                for _ in range(n)
            ]
        }
    if kind == "compressor":
        return {
            "threshold_db": float(rng.uniform(-30, 0)),
            "ratio": float(rng.choice([2, 4, 8, 20])),
            "attack_ms": float(rng.uniform(1, 100)),
            "release_ms": float(rng.uniform(50, 1000)),
        }
    if kind == "gain":
        return {"gain_db": float(rng.uniform(-10, 10))}
    if kind == "lowpass":
        return {"cutoff_hz": float(rng.uniform(5512, 11025))}
    if kind == "highpass":
        return {"cutoff_hz": float(rng.uniform(32, 1024))}
    if kind == "bitcrush":
        return {"bitrate": float(rng.uniform(2, 10))}
    if kind == "delay":
        return {
            "time_ms": float(rng.uniform(10, 1000)),
            "feedback_pct": float(rng.uniform(0, 90)),
            "mix_pct": float(rng.uniform(10, 100)),
        }
    if kind == "distortion":
        return {"drive_db": float(rng.uniform(1, 30))}
    if kind == "conv_reverb":
        return {"ir_index": int(rng.integers(1, N_IMPULSE_RESPONSES + 1)), "mix_pct": float(rng.uniform(10, 100))}
    if kind == "pitch_shift":
        return {"semitones": float(rng.choice([-3, -2, -1, 1, 2, 3]))}
    if kind == "microtone_shift":
        semitones = float(rng.integers(-7, 8))
        if rng.random() < 0.10:
            semitones += float(rng.uniform(-0.5, 0.5))
        return {"semitones": semitones}
    if kind == "time_stretch":
        return {"factor_pct": float(rng.uniform(70, 150))}
    if kind in FRAME_KINDS:
        return {"fps": float(rng.uniform(0.5, 5.0)), "probability": FRAME_ACTIVATION}
    raise EffectParamError(f"unknown effect kind {kind!r}")


def _seed_from(rng) -> int:
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(rng.integers(0, 2**63 - 1))


def _sample_plan(stage: str, table: dict, order: tuple, config: DatasetConfig, rng) -> FxPlan:
    seed = _seed_from(rng)
    sub = np.random.default_rng(seed)
    eligible, counts = table[config.label]
    count = int(sub.choice(counts))
    chosen = sub.choice(len(eligible), size=count, replace=False) if count else []
    kinds = sorted((eligible[i] for i in chosen), key=order.index)
    return FxPlan(stage, [EffectInstance(k, _draw_params(k, sub)) for k in kinds], seed)


def sample_stem_plan(config: DatasetConfig, rng) -> FxPlan:
    """Draw a stem-stage plan.  ``rng`` is a Generator (a child seed is drawn from it) or an int seed."""
    return _sample_plan("stem", STEM_TABLE, STEM_KINDS, config, rng)


def sample_mixture_plan(config: DatasetConfig, rng) -> FxPlan:
    return _sample_plan("mixture", MIXTURE_TABLE, MIXTURE_KINDS, config, rng)


# ----------------------------------------------------------------------------
# phase vocoder


def stft(x: np.ndarray, n_fft: int = STFT_SIZE, hop: int = STFT_HOP) -> np.ndarray:
    """Centred STFT with a periodic Hann window, shape (frames, n_fft // 2 + 1)."""
    window = np.hanning(n_fft + 1)[:-1]
    pad = n_fft // 2
    xp = np.pad(np.asarray(x, dtype=np.float64), (pad, pad + n_fft), mode="constant")
    n_frames = 1 + len(x) // hop
    frames = sliding_window_view(xp, n_fft)[::hop][:n_frames]
    return np.fft.rfft(frames * window, axis=1)


def istft(spec: np.ndarray, length: int, n_fft: int = STFT_SIZE, hop: int = STFT_HOP) -> np.ndarray:
    window = np.hanning(n_fft + 1)[:-1]
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * window
    n_frames = len(frames)
    n = n_fft + hop * (n_frames - 1)
    out = np.zeros(n + n_fft)
    norm = np.zeros(n + n_fft)
    w2 = window * window
    # frames j, j + r, j + 2r, ... (r = n_fft / hop) tile the output without overlap
    r = n_fft // hop
    for j in range(min(r, n_frames)):
        group = frames[j::r]
        start = j * hop
        out[start : start + group.size] += group.ravel()
        norm[start : start + group.size] += np.tile(w2, len(group))
    out, norm = out[:n], norm[:n]
    out /= np.where(norm > 1e-8, norm, 1.0)
    out = out[n_fft // 2 :]
    if len(out) >= length:
        return out[:length]
    return np.concatenate([out, np.zeros(length - len(out))])


def stretch_array(x: np.ndarray, ratio: float) -> np.ndarray:
    """Phase-vocoder stretch so the output lasts ``ratio`` times the input; pitch preserved."""
    x = np.asarray(x, dtype=np.float64)
    target = int(round(len(x) * ratio))
    if ratio == 1.0:
        return x.copy()
    if len(x) == 0 or target == 0:
        return np.zeros(target)
    spec = stft(x).astype(np.complex64)
    n_frames, n_bins = spec.shape
    spec = np.vstack([spec, np.zeros((1, n_bins), dtype=spec.dtype)])
    steps = np.arange(0, n_frames, 1.0 / ratio)
    idx = np.floor(steps).astype(int)
    frac = (steps - idx).astype(np.float32)[:, None]
    mag = np.abs(spec)
    mags = (1.0 - frac) * mag[idx] + frac * mag[idx + 1]
    expected = (2.0 * np.pi * STFT_HOP * np.arange(n_bins) / STFT_SIZE).astype(np.float32)
    angles = np.angle(spec)
    dphi = angles[idx + 1] - angles[idx] - expected
    dphi -= np.float32(2.0 * np.pi) * np.round(dphi / np.float32(2.0 * np.pi))
    dphi += expected
    phase = np.empty_like(dphi)
    phase[0] = angles[0]
    np.cumsum(dphi[:-1], axis=0, out=phase[1:])
    phase[1:] += angles[0]
    out = np.empty(phase.shape, dtype=np.complex64)
    out.real = mags * np.cos(phase)
    out.imag = mags * np.sin(phase)
    return istft(out, target)


def pitch_shift_array(x: np.ndarray, semitones: float) -> np.ndarray:
    """Duration-preserving pitch shift: stretch by 2**(s/12), then resample back."""
    x = np.asarray(x, dtype=np.float64)
    if semitones == 0:
        return x.copy()
    ratio = 2.0 ** (semitones / 12.0)
    y = stretch_array(x, ratio)
    y = resample_by_ratio(y, 1.0 / ratio)
    if len(y) >= len(x):
        return y[: len(x)]
    return np.concatenate([y, np.zeros(len(x) - len(y))])


# ----------------------------------------------------------------------------
# stem-stage DSP


@numba.njit(cache=True)
def _peak_envelope(x, attack, release):
    env = np.empty_like(x)
    e = 0.0
    for n in range(x.shape[0]):
        v = abs(x[n])
        c = attack if v > e else release
        e = c * e + (1.0 - c) * v
        env[n] = e
    return env


def compress_array(x, sr, threshold_db, ratio, attack_ms, release_ms):
    """Feed-forward hard-knee compressor on a one-pole peak envelope.  No make-up gain."""
    attack = np.exp(-1.0 / (attack_ms * 1e-3 * sr))
    release = np.exp(-1.0 / (release_ms * 1e-3 * sr))
    env = _peak_envelope(np.asarray(x, dtype=np.float64), attack, release)
    level = 20.0 * np.log10(np.maximum(env, 1e-10))
    gain_db = np.minimum(0.0, (threshold_db - level) * (1.0 - 1.0 / ratio))
    return x * 10.0 ** (gain_db / 20.0)


def peaking_sos(gain_db, freq, q, sr) -> np.ndarray:
    a = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * min(freq, 0.49 * sr) / sr
    alpha = np.sin(w0) / (2.0 * max(q, MIN_EQ_Q))
    cw = np.cos(w0)
    b = np.array([1 + alpha * a, -2 * cw, 1 - alpha * a])
    den = np.array([1 + alpha / a, -2 * cw, 1 - alpha / a])
    return np.concatenate([b / den[0], den / den[0]])


def first_order(kind, cutoff, sr):
    k = np.tan(np.pi * min(cutoff, 0.49 * sr) / sr)
    a = [1.0, (k - 1.0) / (k + 1.0)]
    if kind == "lowpass":
        b = [k / (1.0 + k), k / (1.0 + k)]
    else:
        b = [1.0 / (1.0 + k), -1.0 / (1.0 + k)]
    return b, a


def bitcrush_array(x, bitrate):
    levels = max(2, int(round(2.0 ** bitrate)))
    q = np.round((np.clip(x, -1.0, 1.0) + 1.0) * 0.5 * (levels - 1))
    return q / (levels - 1) * 2.0 - 1.0


def delay_array(x, sr, time_ms, feedback_pct, mix_pct):
    d = max(1, int(round(time_ms * 1e-3 * sr)))
    fb = feedback_pct / 100.0
    wet_frac = mix_pct / 100.0
    if fb > 0:
        echoes = 1 + int(np.ceil(DELAY_TAIL_DB / 20.0 / np.log10(fb)))
    else:
        echoes = 1
    xp = np.concatenate([np.asarray(x, dtype=np.float64), np.zeros(echoes * d)])
    line = np.zeros_like(xp)
    for start in range(d, len(xp), d):
        stop = min(start + d, len(xp))
        line[start:stop] = xp[start - d : stop - d] + fb * line[start - d : stop - d]
    return (1.0 - wet_frac) * xp + wet_frac * line


def distortion_array(x, drive_db):
    g = 10.0 ** (drive_db / 20.0)
    return np.tanh(g * x) / g


# ----------------------------------------------------------------------------
# impulse responses

IR_DIR = os.path.join(os.path.dirname(__file__), "data", "irs")
IR_RT60 = (0.15, 0.232, 0.358, 0.553, 0.855, 1.32, 2.0)


def synthesize_impulse_responses(sr: int = 22050, seed: int = 20231) -> list:
    """Exponentially decaying noise tails: seven decay times, two colourings each."""
    rng = np.random.default_rng(seed)
    irs = []
    for rt60 in IR_RT60:
        for bright in (True, False):
            n = int(round(rt60 * sr))
            t = np.arange(n) / sr
            noise = rng.standard_normal(n)
            if not bright:
                noise = lfilter([0.5, 0.5], [1.0, -0.6], noise)
            ir = noise * 10.0 ** (-3.0 * t / rt60)
            ir[0] = 1.0 + abs(ir[0])
            ir /= np.sqrt(np.sum(ir * ir))
            irs.append(ir.astype(np.float32))
    return irs


def write_impulse_responses(directory: str = IR_DIR, sr: int = 22050) -> None:
    from .audio import save_wav

    os.makedirs(directory, exist_ok=True)
    manifest = {}
    for i, ir in enumerate(synthesize_impulse_responses(sr), start=1):
        name = f"ir_{i:02d}.wav"
        save_wav(os.path.join(directory, name), AudioClip(ir, sr))
        manifest[str(i)] = name
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


@lru_cache(maxsize=1)
def impulse_responses() -> dict:
    with open(os.path.join(IR_DIR, "manifest.json")) as fh:
        manifest = json.load(fh)
    return {
        int(k): np.asarray(load_wav(os.path.join(IR_DIR, v), target_rate=None).samples, dtype=np.float64)
        for k, v in manifest.items()
    }


# ----------------------------------------------------------------------------
# frame operations


def frame_op_array(x, sr, op, fps, mask=None, rng=None, probability=FRAME_ACTIVATION):
    """Chunk into frames of 1/fps seconds and apply ``op`` to the active frames.

    ``mask`` forces the activation pattern; otherwise each frame is drawn from
    ``rng`` with the given probability.
    """
    length = max(1, int(round(sr / fps)))
    frames = [x[i : i + length] for i in range(0, len(x), length)]
    if mask is None:
        mask = rng.random(len(frames)) < probability
    out = []
    for frame, active in zip(frames, mask):
        if not active:
            out.append(frame)
        elif op == "frame_silence":
            out.append(np.zeros_like(frame))
        elif op == "frame_duplicate":
            out.extend([frame, frame])
        elif op == "frame_reverse":
            out.append(frame[::-1])
        elif op != "frame_remove":
            raise EffectParamError(f"unknown frame operation {op!r}")
    if not out:
        return np.zeros(0)
    return np.concatenate(out)


# ----------------------------------------------------------------------------
# application


def _require(cond, msg):
    if not cond:
        raise EffectParamError(msg)


def _validate(effect: EffectInstance) -> None:
    p = effect.params
    vals = [v for v in p.values() if isinstance(v, (int, float))]
    _require(all(np.isfinite(v) for v in vals), f"{effect.kind}: non-finite parameter")
    k = effect.kind
    if k == "band_eq":
        _require(len(p["bands"]) >= 1, "band_eq needs at least one band")
        for g, f, q in p["bands"]:
            _require(np.isfinite(g) and f > 0 and q >= 0, f"band_eq: bad band {(g, f, q)}")
    elif k == "compressor":
        _require(p["ratio"] >= 1 and p["attack_ms"] > 0 and p["release_ms"] > 0, "compressor: bad timing/ratio")
    elif k in ("lowpass", "highpass"):
        _require(p["cutoff_hz"] > 0, f"{k}: cutoff must be positive")
    elif k == "bitcrush":
        _require(p["bitrate"] >= 1, "bitcrush: bitrate must be >= 1")
    elif k == "delay":
        _require(p["time_ms"] > 0 and 0 <= p["feedback_pct"] < 100 and 0 <= p["mix_pct"] <= 100, "delay: bad params")
    elif k == "conv_reverb":
        _require(1 <= p["ir_index"] <= N_IMPULSE_RESPONSES and 0 <= p["mix_pct"] <= 100, "conv_reverb: bad params")
    elif k in ("pitch_shift", "microtone_shift"):
        _require(abs(p["semitones"]) <= 24, f"{k}: transposition beyond two octaves")
    elif k == "time_stretch":
        _require(0 < p["factor_pct"] <= 400, "time_stretch: factor must be in (0, 400]%")
    elif k in FRAME_KINDS:
        _require(p["fps"] > 0 and 0 <= p.get("probability", FRAME_ACTIVATION) <= 1, f"{k}: bad params")
    elif k not in ("gain", "distortion"):
        raise EffectParamError(f"unknown effect kind {k!r}")


def apply_effect_array(effect: EffectInstance, x: np.ndarray, sr: int, rng=None) -> np.ndarray:
    _validate(effect)
    x = np.asarray(x, dtype=np.float64)
    p = effect.params
    k = effect.kind
    if k == "gain":
        return x * 10.0 ** (p["gain_db"] / 20.0)
    if k == "band_eq":
        sos = np.array([peaking_sos(g, f, q, sr) for g, f, q in p["bands"]])
        return sosfilt(sos, x)
    if k in ("lowpass", "highpass"):
        b, a = first_order(k, p["cutoff_hz"], sr)
        return lfilter(b, a, x)
    if k == "compressor":
        return compress_array(x, sr, p["threshold_db"], p["ratio"], p["attack_ms"], p["release_ms"])
    if k == "bitcrush":
        return bitcrush_array(x, p["bitrate"])
    if k == "delay":
        return delay_array(x, sr, p["time_ms"], p["feedback_pct"], p["mix_pct"])
    if k == "distortion":
        return distortion_array(x, p["drive_db"])
    if k == "conv_reverb":
        wet = fftconvolve(x, impulse_responses()[p["ir_index"]])[: len(x)]
        m = p["mix_pct"] / 100.0
        return (1.0 - m) * x + m * wet
    if k in ("pitch_shift", "microtone_shift"):
        return pitch_shift_array(x, p["semitones"])
    if k == "time_stretch":
        return stretch_array(x, p["factor_pct"] / 100.0)
    if rng is None:
        raise ValueError(f"{k} needs a random generator")
    return frame_op_array(x, sr, k, p["fps"], rng=rng, probability=p.get("probability", FRAME_ACTIVATION))


def apply_effect(effect: EffectInstance, clip: AudioClip, rng=None) -> AudioClip:
    if len(clip) == 0:
        raise ValueError("cannot apply an effect to an empty clip")
    return AudioClip(apply_effect_array(effect, clip.samples, clip.sample_rate, rng), clip.sample_rate)


def apply_plan_array(plan: FxPlan, x: np.ndarray, sr: int, rng=None) -> np.ndarray:
    allowed = STEM_KINDS if plan.stage == "stem" else MIXTURE_KINDS
    stray = [e.kind for e in plan.effects if e.kind not in allowed]
    if stray:
        raise EffectParamError(f"{plan.stage} plan contains {stray}")
    y = np.asarray(x, dtype=np.float64)
    for effect in plan.effects:
        y = apply_effect_array(effect, y, sr, rng)
    return y


def apply_plan(plan: FxPlan, clip: AudioClip, rng=None) -> AudioClip:
    """Apply the plan's effects in order.  Frame operations draw activations from ``rng``."""
    if not plan.effects:
        return clip
    if len(clip) == 0:
        raise ValueError("cannot apply a plan to an empty clip")
    return AudioClip(apply_plan_array(plan, clip.samples, clip.sample_rate, rng), clip.sample_rate)
