"""Spectral-landmark fingerprinting baseline with an optional re-pitching sweep.

Peaks come from a log-magnitude STFT at 11025 Hz via a per-bin threshold that
decays frame by frame and is raised around every accepted peak.  Peak pairs
are hashed as (f1, df, dt) and matched by voting on the time offset.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from .audio import AudioClip, resample
from .fx import pitch_shift_array

FP_RATE = 11025
N_FFT = 512
HOP = 256
FAN_OUT = 5
MAX_DT = 63
MAX_DF = 127
REPITCH_STEPS = tuple(np.round(np.arange(-2.5, 2.5001, 0.5), 1))

# peak picker constants, tuned once so broadband noise gives ~20 peaks per second
DECAY_DB = 1.0  # per-frame fall of the masking threshold
SPREAD_BINS = 12.0  # width of the masking skirt around an accepted peak
MAX_PEAKS_PER_FRAME = 5
SKIRT_DB = 6.0  # threshold drop at SPREAD_BINS from an accepted peak
NEIGHBOUR_FRAMES = 7  # peaks must dominate +-frames x +-bins
NEIGHBOUR_BINS = 15
FLOOR_DB = -80.0  # relative to full scale; quieter bins never make peaks

DB_MAGIC = b"SIDFPDB\x00"
DB_VERSION = 1


@dataclass(frozen=True)
class Peak:
    frame: int
    bin: int
    magnitude: float


def log_spectrogram(samples: np.ndarray) -> np.ndarray:
    """(frames, 257) magnitude in dB of a Hann-windowed 512-point STFT, hop 256."""
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < N_FFT:
        x = np.pad(x, (0, N_FFT - len(x)))
    n_frames = 1 + (len(x) - N_FFT) // HOP
    idx = np.arange(N_FFT)[None, :] + HOP * np.arange(n_frames)[:, None]
    win = np.hanning(N_FFT + 1)[:-1]
    mag = np.abs(np.fft.rfft(x[idx] * win, axis=1)) / (win.sum() / 2)
    return 20.0 * np.log10(np.maximum(mag, 1e-10))


def _prepare(clip: AudioClip) -> np.ndarray:
    return resample(clip, FP_RATE).samples.astype(np.float64)


def peaks_from_spectrogram(sgram: np.ndarray) -> list:
    n_frames, n_bins = sgram.shape
    if n_frames == 0:
        return []
    bins = np.arange(n_bins)
    # a quadratic skirt in dB around each peak masks its neighbours
    thresh = np.full(n_bins, FLOOR_DB)
    head = sgram[: min(10, n_frames)].max(axis=0)
    thresh = np.maximum(thresh, head - 6.0)
    maxima = sgram >= maximum_filter(sgram, size=(2 * NEIGHBOUR_FRAMES + 1, 2 * NEIGHBOUR_BINS + 1), mode="nearest")
    maxima[:, [0, -1]] = False
    peaks = []
    for t in range(n_frames):
        s = sgram[t]
        cand = np.nonzero(maxima[t] & (s > thresh) & (s > FLOOR_DB))[0]
        taken = 0
        for b in cand[np.argsort(-s[cand], kind="stable")]:
            if taken >= MAX_PEAKS_PER_FRAME:
                break
            if s[b] <= thresh[b]:
                continue
            peaks.append(Peak(t, int(b), float(s[b])))
            taken += 1
            thresh = np.maximum(thresh, s[b] - SKIRT_DB * ((bins - b) / SPREAD_BINS) ** 2)
        thresh = thresh - DECAY_DB
    return peaks


def extract_peaks(clip: AudioClip) -> list:
    return peaks_from_spectrogram(log_spectrogram(_prepare(clip)))


# ----------------------------------------------------------------------------
# hashes


def pack_hash(f1: int, df: int, dt: int) -> int:
    if not (0 <= f1 < 512 and -128 <= df <= 127 and 0 <= dt < 64):
        raise ValueError(f"hash fields out of range: f1={f1} df={df} dt={dt}")
    return (f1 << 14) | ((df & 0xFF) << 6) | dt


def unpack_hash(key: int):
    f1 = (key >> 14) & 0x1FF
    df = (key >> 6) & 0xFF
    if df >= 128:
        df -= 256
    return f1, df, key & 0x3F


def pair_landmarks(peaks, fan_out: int = FAN_OUT, max_dt: int = MAX_DT, max_df: int = MAX_DF) -> list:
    """``[(packed_hash, anchor_frame), ...]``: each peak with up to ``fan_out`` later peaks in its target zone."""
    ordered = sorted(peaks, key=lambda p: (p.frame, p.bin))
    out = []
    for i, a in enumerate(ordered):
        n = 0
        for b in ordered[i + 1 :]:
            dt = b.frame - a.frame
            if dt > max_dt:
                break
            if dt < 1:
                continue
            df = b.bin - a.bin
            if abs(df) > max_df:
                continue
            out.append((pack_hash(a.bin, df, dt), a.frame))
            n += 1
            if n >= fan_out:
                break
    return out


def landmarks(clip: AudioClip) -> list:
    return pair_landmarks(extract_peaks(clip))


# ----------------------------------------------------------------------------
# database


class FingerprintDB:
    """Postings sorted by (key, track, frame) in flat arrays; immutable after build."""

    def __init__(self, track_ids, keys, tracks, frames):
        self.track_ids = list(track_ids)
        order = np.lexsort((frames, tracks, keys))
        self.keys = np.asarray(keys, dtype=np.uint32)[order]
        self.tracks = np.asarray(tracks, dtype=np.int32)[order]
        self.frames = np.asarray(frames, dtype=np.int32)[order]

    @classmethod
    def build(cls, items) -> "FingerprintDB":
        """``items``: mapping or pairs of (track_id, AudioClip)."""
        items = sorted(items.items() if isinstance(items, dict) else items, key=lambda kv: kv[0])
        ids, keys, tracks, frames = [], [], [], []
        for i, (tid, clip) in enumerate(items):
            ids.append(tid)
            for k, f in landmarks(clip):
                keys.append(k)
                tracks.append(i)
                frames.append(f)
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate track ids")
        return cls(ids, keys, tracks, frames)

    def __len__(self):
        return len(self.track_ids)

    def postings(self, key: int):
        lo, hi = np.searchsorted(self.keys, [key, key + 1])
        return [(self.track_ids[t], int(f)) for t, f in zip(self.tracks[lo:hi], self.frames[lo:hi])]

    def scores(self, hashes) -> np.ndarray:
        """Per track: the largest number of hashes agreeing on one time offset."""
        out = np.zeros(len(self.track_ids), dtype=np.int64)
        if not hashes:
            return out
        q = np.array(hashes, dtype=np.int64)
        lo = np.searchsorted(self.keys, q[:, 0], side="left")
        hi = np.searchsorted(self.keys, q[:, 0], side="right")
        counts = hi - lo
        if counts.sum() == 0:
            return out
        rep = np.repeat(np.arange(len(q)), counts)
        pos = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi) if b > a])
        tr = self.tracks[pos].astype(np.int64)
        off = self.frames[pos].astype(np.int64) - q[rep, 1]
        pair = tr * (1 << 32) + (off + (1 << 31))
        uniq, n = np.unique(pair, return_counts=True)
        np.maximum.at(out, uniq >> 32, n)
        return out

    def offset_histogram(self, hashes, track_id: str) -> dict:
        t = self.track_ids.index(track_id)
        hist = {}
        for key, qf in hashes:
            lo, hi = np.searchsorted(self.keys, [key, key + 1])
            for tr, f in zip(self.tracks[lo:hi], self.frames[lo:hi]):
                if tr == t:
                    hist[int(f) - qf] = hist.get(int(f) - qf, 0) + 1
        return hist

    # file format: magic, version, n_tracks, ids, n_postings, keys/tracks/frames, sha256
    def save(self, path) -> None:
        body = DB_MAGIC + struct.pack("<II", DB_VERSION, len(self.track_ids))
        for tid in self.track_ids:
            raw = tid.encode()
            body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<Q", len(self.keys))
        body += self.keys.astype("<u4").tobytes() + self.tracks.astype("<i4").tobytes() + self.frames.astype("<i4").tobytes()
        with open(path, "wb") as fh:
            fh.write(body + hashlib.sha256(body).digest())

    @classmethod
    def load(cls, path) -> "FingerprintDB":
        with open(path, "rb") as fh:
            data = fh.read()
        if not data.startswith(DB_MAGIC) or len(data) < len(DB_MAGIC) + 40:
            raise ValueError(f"{path}: not a fingerprint database")
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise ValueError(f"{path}: checksum mismatch")
        pos = len(DB_MAGIC)
        version, n = struct.unpack_from("<II", body, pos)
        if version != DB_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        pos += 8
        ids = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            ids.append(body[pos : pos + ln].decode())
            pos += ln
        (m,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        keys = np.frombuffer(body, "<u4", m, pos)
        tracks = np.frombuffer(body, "<i4", m, pos + 4 * m)
        frames = np.frombuffer(body, "<i4", m, pos + 8 * m)
        return cls(ids, keys.copy(), tracks.copy(), frames.copy())


def _rank(db: FingerprintDB, scores: np.ndarray) -> list:
    return sorted(zip(db.track_ids, (int(s) for s in scores)), key=lambda r: (-r[1], r[0]))


def query_scores(clip: AudioClip, db: FingerprintDB, repitch: bool = False, steps=REPITCH_STEPS) -> np.ndarray:
    if len(db) == 0:
        raise ValueError("empty fingerprint database")
    x = _prepare(clip)
    if not repitch:
        return db.scores(pair_landmarks(peaks_from_spectrogram(log_spectrogram(x))))
    best = np.zeros(len(db), dtype=np.int64)
    for s in steps:
        # s = 0 leaves the audio untouched, so the sweep contains the plain score
        y = pitch_shift_array(x, float(s)) if s != 0 else x
        best = np.maximum(best, db.scores(pair_landmarks(peaks_from_spectrogram(log_spectrogram(y)))))
    return best


def match_query(clip: AudioClip, db: FingerprintDB, repitch: bool = False) -> list:
    """``[(track_id, score), ...]`` by descending vote count, ties by id."""
    return _rank(db, query_scores(clip, db, repitch))


def baseline_rankings(queries: dict, db: FingerprintDB, repitch: bool = False) -> dict:
    return {qid: match_query(clip, db, repitch) for qid, clip in sorted(queries.items())}
