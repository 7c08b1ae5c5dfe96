"""Procedural multi-stem tracks: drums on a tempo grid, a looping chord progression, and sung-like glides.

Every random choice is drawn from the generator passed in, so a seed fixes the
whole track.  Timbres, tempo, key and melody vary per track so that tracks are
distinguishable from one another, which is what a retrieval corpus needs.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import lfilter, sosfilt, butter

from .audio import AudioClip, SAMPLE_RATE, EXCERPT_SECONDS
from .dataset import StemSet

TEMPO_RANGE = (70.0, 140.0)

# major / minor scale degrees in semitones
_SCALES = {
    "major": np.array([0, 2, 4, 5, 7, 9, 11]),
    "minor": np.array([0, 2, 3, 5, 7, 8, 10]),
}

# (F1, F2, F3) in Hz for a few vowels
_VOWELS = np.array(
    [
        [730, 1090, 2440],
        [270, 2290, 3010],
        [530, 1840, 2480],
        [570, 840, 2410],
        [300, 870, 2240],
        [660, 1720, 2410],
    ],
    dtype=float,
)


def midi_to_hz(m):
    return 440.0 * 2.0 ** ((np.asarray(m, dtype=float) - 69.0) / 12.0)


def _env_ad(n: int, attack: int, sr: int, decay_s: float) -> np.ndarray:
    t = np.arange(n) / sr
    env = np.exp(-t / decay_s)
    if attack > 0:
        env[:attack] *= np.linspace(0.0, 1.0, attack, endpoint=False)
    return env


def _bandlimited_saw(phase: np.ndarray, f_peak: float, sr: int, n_harm_max: int, rolloff: float) -> np.ndarray:
    """Additive sawtooth-like tone from a running phase (radians); harmonics stop below Nyquist."""
    n_harm = int(max(1, min(n_harm_max, (0.45 * sr) // max(f_peak, 1.0))))
    out = np.zeros_like(phase)
    for k in range(1, n_harm + 1):
        out += np.sin(k * phase) / k**rolloff
    return out


# ----------------------------------------------------------------------------
# drums


def _kick(sr, rng):
    n = int(0.35 * sr)
    t = np.arange(n) / sr
    f0 = rng.uniform(90, 150)
    f1 = rng.uniform(40, 60)
    sweep = f1 + (f0 - f1) * np.exp(-t / rng.uniform(0.02, 0.06))
    phase = 2 * np.pi * np.cumsum(sweep) / sr
    return np.sin(phase) * _env_ad(n, 20, sr, rng.uniform(0.08, 0.2))


def _snare(sr, rng):
    n = int(0.25 * sr)
    t = np.arange(n) / sr
    noise = rng.standard_normal(n)
    lo, hi = rng.uniform(800, 2000), rng.uniform(4000, 8000)
    noise = sosfilt(butter(2, [lo, hi], btype="band", fs=sr, output="sos"), noise)
    tone = np.sin(2 * np.pi * rng.uniform(160, 260) * t)
    mix_tone = rng.uniform(0.2, 0.6)
    body = (1 - mix_tone) * noise / (np.std(noise) + 1e-12) * 0.5 + mix_tone * tone
    return body * _env_ad(n, 10, sr, rng.uniform(0.05, 0.12))


def _hat(sr, rng):
    n = int(0.12 * sr)
    noise = rng.standard_normal(n)
    noise = sosfilt(butter(4, rng.uniform(5000, 8000), btype="high", fs=sr, output="sos"), noise)
    noise /= np.std(noise) + 1e-12
    return 0.3 * noise * _env_ad(n, 5, sr, rng.uniform(0.015, 0.05))


def _drums(n: int, sr: int, beat: float, rng) -> np.ndarray:
    kick, snare, hat = _kick(sr, rng), _snare(sr, rng), _hat(sr, rng)
    step = beat / 4.0  # sixteenth notes
    # base one-bar patterns of 16 steps: kick on beat 1 (and often 3), snare on beats 2 and 4, hats on eighths
    kick_base = np.zeros(16, bool)
    kick_base[0] = True
    kick_base[8] = rng.random() < 0.8
    snare_base = np.zeros(16, bool)
    snare_base[[4, 12]] = True
    hat_base = np.zeros(16, bool)
    hat_base[::2] = True
    if rng.random() < 0.3:
        hat_base[1::2] = True
    # per-bar variation (ghost kicks and snares, dropped hats, a fill every few bars) so that
    # no two bars need be identical and an excerpt can be placed in time
    p_ghost = rng.uniform(0.05, 0.25)
    fill_every = int(rng.choice([2, 4]))
    out = np.zeros(n + sr)
    total_steps = int(np.ceil(n / sr / step))
    for bar in range((total_steps + 15) // 16):
        kick_pat = kick_base | (rng.random(16) < p_ghost / 2)
        snare_pat = snare_base | (rng.random(16) < p_ghost / 3)
        hat_pat = hat_base & (rng.random(16) > p_ghost / 2)
        if bar % fill_every == fill_every - 1:
            snare_pat[12:] |= rng.random(4) < 0.7
        vel = rng.uniform(0.5, 1.0, 16)
        for j in range(16):
            s = 16 * bar + j
            if s >= total_steps:
                break
            pos = int(round(s * step * sr))
            for pat, hit, gain in ((kick_pat, kick, 1.0), (snare_pat, snare, 0.8 if snare_base[j] else 0.5), (hat_pat, hat, vel[j])):
                if pat[j]:
                    out[pos : pos + len(hit)] += gain * hit
    return out[:n]


# ----------------------------------------------------------------------------
# harmony


def _harmony(n: int, sr: int, beat: float, root: int, scale: np.ndarray, rng) -> np.ndarray:
    # an eight-chord progression, one bar per chord, with a fresh voicing and comping rhythm per bar
    degrees = rng.choice(7, size=8, replace=True)
    degrees[0] = 0 if rng.random() < 0.7 else degrees[0]
    bar = 4 * beat
    n_harm = int(rng.integers(4, 12))
    rolloff = rng.uniform(1.0, 2.0)
    seventh = rng.random() < 0.4
    out = np.zeros(n)
    n_bars = int(np.ceil(n / sr / bar))
    for c in range(n_bars):
        deg = int(degrees[c % 8])
        idx = [deg, deg + 2, deg + 4] + ([deg + 6] if seventh else [])
        inversion = int(rng.integers(len(idx)))
        notes = [root + 12 + scale[i % 7] + 12 * (i // 7) + (12 if k < inversion else 0) for k, i in enumerate(idx)]
        notes.append(root + scale[deg % 7] - 12 + 12 * (deg // 7))  # bass
        # comping: strike on each beat with probability, always on the downbeat
        hits = np.flatnonzero(np.r_[True, rng.random(7) < 0.35])  # eighth-note slots
        bar_start = c * bar
        for h_i, h in enumerate(hits):
            t0 = bar_start + h * beat / 2
            t1 = bar_start + (hits[h_i + 1] if h_i + 1 < len(hits) else 8) * beat / 2
            start = int(round(t0 * sr))
            stop = min(n, int(round(t1 * sr)))
            if start >= n:
                break
            m = stop - start
            t = np.arange(m) / sr
            env = np.minimum(1.0, t / 0.02) * np.minimum(1.0, (m - 1 - np.arange(m)) / (0.03 * sr) + 1e-9)
            env *= 0.6 + 0.4 * np.exp(-t / 0.5)
            seg = np.zeros(m)
            for k, note in enumerate(notes):
                f = float(midi_to_hz(note))
                phase = 2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)
                amp = 0.8 if k == len(notes) - 1 else 0.5
                seg += amp * _bandlimited_saw(phase, f, sr, n_harm, rolloff)
            out[start:stop] += seg * env
    return out


# ----------------------------------------------------------------------------
# vocals


def _formant_filter(x: np.ndarray, formants, sr: int, bandwidths=(80.0, 100.0, 120.0)) -> np.ndarray:
    y = np.zeros_like(x)
    for f, bw, g in zip(formants, bandwidths, (1.0, 0.6, 0.35)):
        r = np.exp(-np.pi * bw / sr)
        theta = 2 * np.pi * f / sr
        a = [1.0, -2 * r * np.cos(theta), r * r]
        b = [(1 - r * r) * np.sin(theta) / 2.0 + 1e-4]
        y += g * lfilter(b, a, x)
    return y


def _vocals(n: int, sr: int, beat: float, root: int, scale: np.ndarray, rng) -> np.ndarray:
    out = np.zeros(n)
    t_pos = rng.uniform(0.0, 2 * beat)
    n_harm = int(rng.integers(10, 25))
    vib_rate, vib_depth = rng.uniform(4.5, 6.5), rng.uniform(0.1, 0.4)
    register = root + 12 * int(rng.integers(1, 3))
    while t_pos < n / sr:
        n_notes = int(rng.integers(3, 8))
        durs = rng.choice([0.5, 1.0, 1.0, 1.5, 2.0], size=n_notes) * beat
        degrees = np.cumsum(rng.integers(-2, 3, size=n_notes)) + int(rng.integers(0, 5))
        pitches = np.array([register + 12 + scale[d % 7] + 12 * (d // 7) for d in degrees], dtype=float)
        phrase_len = float(durs.sum())
        m = int(round(phrase_len * sr))
        start = int(round(t_pos * sr))
        if start >= n:
            break
        m = min(m, n - start)
        if m < 64:
            break
        # pitch contour with short glides between notes
        edges = np.concatenate([[0.0], np.cumsum(durs)]) * sr
        idx = np.arange(m)
        note_of = np.minimum(np.searchsorted(edges, idx, side="right") - 1, n_notes - 1)
        contour = pitches[note_of]
        glide = int(0.06 * sr)
        for k in range(1, n_notes):
            e = int(edges[k])
            lo = max(0, e - glide)
            hi = min(m, e)
            if hi > lo:
                contour[lo:hi] = np.linspace(pitches[k - 1], pitches[k], hi - lo)
        t = idx / sr
        contour = contour + vib_depth * np.sin(2 * np.pi * vib_rate * t) * np.minimum(1.0, t / 0.3)
        freq = midi_to_hz(contour)
        phase = 2 * np.pi * np.cumsum(freq) / sr
        src = _bandlimited_saw(phase, float(freq.max()), sr, n_harm, 1.0)
        vowel = _VOWELS[rng.integers(len(_VOWELS))] * rng.uniform(0.9, 1.1)
        voiced = _formant_filter(src, vowel, sr)
        attack, release = int(0.04 * sr), int(0.12 * sr)
        env = np.ones(m)
        env[: min(attack, m)] = np.linspace(0, 1, min(attack, m), endpoint=False)
        r = min(release, m)
        env[m - r :] *= np.linspace(1, 0, r)
        out[start : start + m] += voiced * env
        t_pos += phrase_len + float(rng.choice([0.5, 1.0, 2.0])) * beat
    return out


def _normalise(x: np.ndarray, rms: float) -> np.ndarray:
    cur = float(np.sqrt(np.mean(x * x)))
    return x * (rms / cur) if cur > 0 else x


def synth_stem_set(rng: np.random.Generator, track_id: str = "synth_0000", seconds: float = EXCERPT_SECONDS, sr: int = SAMPLE_RATE) -> StemSet:
    """Generate one 3-stem track.  Returns a StemSet with all stems flagged active.

    The chosen tempo is recorded on the returned object as ``beat_period`` (seconds).
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    n = int(round(seconds * sr))
    bpm = rng.uniform(*TEMPO_RANGE)
    beat = 60.0 / bpm
    root = int(rng.integers(36, 48))
    scale = _SCALES["major" if rng.random() < 0.5 else "minor"]

    drums = _drums(n, sr, beat, rng)
    harmony = _harmony(n, sr, beat, root, scale, rng)
    vocals = _vocals(n, sr, beat, root, scale, rng)

    levels_db = rng.uniform(-4.0, 4.0, 3)
    stems = {}
    for (name, x), lv in zip((("vocals", vocals), ("harmony", harmony), ("drums", drums)), levels_db):
        y = _normalise(x, 0.08 * 10 ** (lv / 20.0))
        peak = np.max(np.abs(y))
        if peak > 0.99:
            y *= 0.99 / peak
        stems[name] = AudioClip(y, sr)
    s = StemSet(track_id, active={k: True for k in stems}, **stems)
    s.beat_period = beat
    return s


def synth_corpus(n_tracks: int, seed: int, prefix: str = "synth", stream: int = 0) -> list:
    """``n_tracks`` StemSets with ids ``<prefix>_0000`` ...; track ``i`` is seeded from ``(seed, stream, i)``.

    Distinct ``stream`` values give disjoint corpora under the same master seed.
    """
    out = []
    for i in range(n_tracks):
        rng = np.random.default_rng([seed, stream, i])
        out.append(synth_stem_set(rng, f"{prefix}_{i:04d}"))
    return out
