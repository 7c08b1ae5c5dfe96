"""Artificial dataset: stem gating, window extraction, combination enumeration and pair rendering."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .audio import AudioClip, SAMPLE_RATE, load_wav, mirror_pad_array, mix, save_wav, trim_excerpt
from .fx import DatasetConfig, FxPlan, apply_plan_array, sample_mixture_plan, sample_stem_plan

log = logging.getLogger(__name__)

STEM_NAMES = ("vocals", "harmony", "drums")
SNR_THRESHOLD_DB = -20.0
WINDOW_SECONDS = 7.5
WINDOW_HOP_SECONDS = 2.5
CLIP_SECONDS = 5.0


class EmptyDatasetError(ValueError):
    pass


@dataclass
class StemSet:
    track_id: str
    vocals: AudioClip | None = None
    harmony: AudioClip | None = None
    drums: AudioClip | None = None
    active: dict = field(default_factory=dict)

    def stems(self) -> dict:
        return {name: getattr(self, name) for name in STEM_NAMES if getattr(self, name) is not None}

    @property
    def sample_rate(self) -> int:
        return next(iter(self.stems().values())).sample_rate

    @property
    def n_active(self) -> int:
        return sum(bool(self.active.get(name)) for name in STEM_NAMES)

    def active_names(self) -> tuple:
        return tuple(name for name in STEM_NAMES if self.active.get(name))

    def mixture(self, names=None) -> AudioClip:
        names = self.active_names() if names is None else names
        return mix([getattr(self, n) for n in names])

    def with_active(self, active: dict) -> "StemSet":
        return StemSet(self.track_id, self.vocals, self.harmony, self.drums, dict(active))


@dataclass
class WindowPair:
    track_id: str
    window_index: int
    combo: tuple
    anchor: AudioClip
    positive: AudioClip
    stem_plan: FxPlan
    mixture_plan: FxPlan
    epoch: int


@dataclass
class DatasetManifest:
    entries: list  # dicts: track_id, split, active, n_active, n_windows, combos
    config: DatasetConfig
    seed: int

    def split(self, name: str) -> list:
        return [e for e in self.entries if e["split"] == name]

    def slots(self, split: str) -> list:
        """All (track_id, window_index, combo) training slots of a split."""
        out = []
        for e in self.split(split):
            for w in range(e["n_windows"]):
                for combo in e["combos"]:
                    out.append((e["track_id"], w, tuple(combo)))
        return out

    def to_json(self) -> str:
        # plan-free: the configuration label only matters at render time
        record = {
            "seed": self.seed,
            "stems_mode": self.config.stems_mode,
            "tracks": self.entries,
        }
        return json.dumps(record, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, label: str = "B") -> "DatasetManifest":
        record = json.loads(text)
        entries = record["tracks"]
        for e in entries:
            e["combos"] = [list(c) for c in e["combos"]]
        return cls(entries, DatasetConfig(label, record["stems_mode"]), int(record["seed"]))


# ----------------------------------------------------------------------------
# gating


def snr_activity(stem: AudioClip, others, threshold_db: float = SNR_THRESHOLD_DB) -> bool:
    """Active iff 10*log10(P_stem / P_rest) >= threshold, with P_rest the power of the summed others."""
    others = list(others)
    if others and any(len(o) != len(stem) or o.sample_rate != stem.sample_rate for o in others):
        raise ValueError("snr_activity needs equal lengths and sample rates")
    p_stem = float(np.mean(np.asarray(stem.samples, dtype=np.float64) ** 2)) if len(stem) else 0.0
    if p_stem <= 0.0:
        return False
    if not others:
        return True
    rest = np.zeros(len(stem))
    for o in others:
        rest += o.samples
    p_rest = float(np.mean(rest * rest))
    if p_rest <= 0.0:
        return True
    return 10.0 * np.log10(p_stem / p_rest) >= threshold_db


def gate_track(stems: StemSet, threshold_db: float = SNR_THRESHOLD_DB) -> StemSet | None:
    """Flag each stem's activity; discard (return None) when two or more are inactive."""
    present = stems.stems()
    active = {}
    for name in STEM_NAMES:
        if name not in present:
            active[name] = False
            continue
        others = [clip for other, clip in present.items() if other != name]
        active[name] = snr_activity(present[name], others, threshold_db)
    if sum(active.values()) < 2:
        return None
    return stems.with_active(active)


# ----------------------------------------------------------------------------
# windows and combinations


def window_starts(duration_samples: int, sr: int, window: float = WINDOW_SECONDS, hop: float = WINDOW_HOP_SECONDS):
    w = int(round(window * sr))
    h = int(round(hop * sr))
    if duration_samples < w:
        return []
    return list(range(0, duration_samples - w + 1, h))


def extract_windows(stems: StemSet, window: float = WINDOW_SECONDS, hop: float = WINDOW_HOP_SECONDS) -> list:
    present = stems.stems()
    length = min(len(c) for c in present.values())
    sr = stems.sample_rate
    w = int(round(window * sr))
    if length < w:
        raise ValueError(f"stems of {length / sr:.2f} s are shorter than one {window} s window")
    out = []
    for start in window_starts(length, sr, window, hop):
        clips = {name: clip.segment(start, start + w) for name, clip in present.items()}
        out.append(StemSet(stems.track_id, active=dict(stems.active), **clips))
    return out


def enumerate_combos(active, mode: str = "up_to_N_minus_1") -> list:
    """Non-empty subsets of the active stems used as the "sample", smallest first."""
    if isinstance(active, dict):
        names = [n for n in STEM_NAMES if active.get(n)]
    else:
        names = [n for n in STEM_NAMES if n in set(active)]
    n = len(names)
    top = n if mode == "up_to_N" else n - 1
    combos = []
    for size in range(1, top + 1):
        combos.extend(itertools.combinations(names, size))
    return combos


# ----------------------------------------------------------------------------
# pairs


def pair_seed(master_seed: int, track_id: str, window_index: int, combo, epoch: int) -> int:
    key = f"{master_seed}|{track_id}|{window_index}|{'+'.join(combo)}|{epoch}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def random_crop(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """A uniformly placed crop of ``n`` samples; mirror-padded when the input is shorter."""
    if len(x) < n:
        return mirror_pad_array(x, n)
    start = int(rng.integers(0, len(x) - n + 1))
    return x[start : start + n]


def render_pair_arrays(window_stems: StemSet, combo, config: DatasetConfig, rng: np.random.Generator):
    """Anchor and positive sample arrays plus the two plans, for one window and combination."""
    present = window_stems.stems()
    sr = window_stems.sample_rate
    n_clip = int(round(CLIP_SECONDS * sr))
    active = window_stems.active_names() or tuple(present)
    if not combo or any(c not in active for c in combo):
        raise ValueError(f"combination {combo} is not a subset of the active stems {active}")
    if config.stems_mode == "up_to_N_minus_1" and len(combo) >= len(active):
        raise ValueError("up_to_N_minus_1 mode needs at least one non-sample stem")

    stem_plan = sample_stem_plan(config, rng)
    mixture_plan = sample_mixture_plan(config, rng)

    sample = np.zeros(len(present[combo[0]]))
    for name in combo:
        sample += present[name].samples
    transformed = apply_plan_array(stem_plan, sample, sr, rng)
    for name in active:
        if name not in combo:
            rest = present[name].samples
            if len(rest) > len(transformed):
                transformed = np.concatenate([transformed, np.zeros(len(rest) - len(transformed))])
            transformed[: len(rest)] += rest
    anchor = apply_plan_array(mixture_plan, transformed, sr, rng)
    if len(anchor) == 0:
        anchor = np.zeros(1)

    positive = random_crop(sample, n_clip, rng)
    anchor = random_crop(anchor, n_clip, rng)
    return anchor, positive, stem_plan, mixture_plan


def make_pair(window_stems: StemSet, combo, config: DatasetConfig, epoch: int, rng, window_index: int = 0) -> WindowPair:
    anchor, positive, stem_plan, mixture_plan = render_pair_arrays(window_stems, tuple(combo), config, rng)
    sr = window_stems.sample_rate
    return WindowPair(
        window_stems.track_id,
        window_index,
        tuple(combo),
        AudioClip(anchor, sr),
        AudioClip(positive, sr),
        stem_plan,
        mixture_plan,
        epoch,
    )


# ----------------------------------------------------------------------------
# corpus building


def split_tracks(track_ids, seed: int, val_fraction: float = 0.2) -> dict:
    """Deterministic 4:1 track-level split."""
    ids = sorted(track_ids)
    rng = np.random.default_rng(pair_seed(seed, "split", 0, (), 0))
    order = rng.permutation(len(ids))
    n_val = int(round(len(ids) * val_fraction))
    val = {ids[i] for i in order[:n_val]}
    return {t: ("val" if t in val else "train") for t in ids}


def retention_stats(n_input: int, kept: list) -> dict:
    n = len(kept)
    stats = {
        "tracks_in": n_input,
        "tracks_retained": n,
        "retained_pct": 100.0 * n / n_input if n_input else 0.0,
        "n3_pct": 100.0 * sum(s.n_active == 3 for s in kept) / n if n else 0.0,
    }
    for name in STEM_NAMES:
        stats[f"{name}_active_pct"] = 100.0 * sum(bool(s.active.get(name)) for s in kept) / n if n else 0.0
    return stats


def build_dataset(tracks, config: DatasetConfig, out: str | None = None, seed: int = 0):
    """Gate, split 4:1 by track and write the manifest.  Pairs are rendered lazily per epoch.

    Returns ``(manifest, retained_stem_sets, stats)``.
    """
    tracks = list(tracks)
    kept = [g for g in (gate_track(t) for t in tracks) if g is not None]
    if not kept:
        raise EmptyDatasetError("no track survived the activity gate")
    if len({t.track_id for t in kept}) != len(kept):
        raise ValueError("duplicate track ids")
    splits = split_tracks([t.track_id for t in kept], seed)
    entries = []
    for t in sorted(kept, key=lambda s: s.track_id):
        length = min(len(c) for c in t.stems().values())
        entries.append(
            {
                "track_id": t.track_id,
                "split": splits[t.track_id],
                "active": {n: bool(t.active.get(n)) for n in STEM_NAMES},
                "n_active": t.n_active,
                "n_windows": len(window_starts(length, t.sample_rate)),
                "combos": [list(c) for c in enumerate_combos(t.active, config.stems_mode)],
            }
        )
    manifest = DatasetManifest(entries, config, seed)
    stats = retention_stats(len(tracks), kept)
    if out is not None:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "manifest.json"), "w") as fh:
            fh.write(manifest.to_json())
        with open(os.path.join(out, "retention.json"), "w") as fh:
            json.dump(stats, fh, indent=1, sort_keys=True)
    return manifest, kept, stats


class PairRenderer:
    """Renders training pairs on demand from in-memory stems and a manifest."""

    def __init__(self, manifest: DatasetManifest, stems, config: DatasetConfig | None = None):
        self.manifest = manifest
        self.config = config or manifest.config
        by_id = {s.track_id: s for s in stems}
        self._windows = {}
        for e in manifest.entries:
            s = by_id[e["track_id"]].with_active(e["active"])
            self._windows[e["track_id"]] = extract_windows(s)

    def render(self, slot, epoch: int) -> WindowPair:
        track_id, w, combo = slot
        rng = np.random.default_rng(pair_seed(self.manifest.seed, track_id, w, combo, epoch))
        return make_pair(self._windows[track_id][w], combo, self.config, epoch, rng, w)

    def export(self, slot, epoch: int, root: str) -> tuple:
        pair = self.render(slot, epoch)
        split = next(e["split"] for e in self.manifest.entries if e["track_id"] == pair.track_id)
        base = os.path.join(root, split, pair.track_id, f"{pair.window_index}_{'+'.join(pair.combo)}_{epoch}")
        save_wav(base + "_anchor.wav", pair.anchor)
        save_wav(base + "_positive.wav", pair.positive)
        return base + "_anchor.wav", base + "_positive.wav"


# ----------------------------------------------------------------------------
# stem directory layout


def write_stem_set(root: str, stems: StemSet) -> None:
    d = os.path.join(root, stems.track_id)
    os.makedirs(d, exist_ok=True)
    for name, clip in stems.stems().items():
        save_wav(os.path.join(d, f"{name}.wav"), clip)


def load_stem_set(track_dir: str, excerpt: bool = True) -> StemSet:
    """Read ``vocals``, ``drums`` and either ``harmony`` or ``bass`` + ``other`` from a track directory."""
    track_id = os.path.basename(os.path.normpath(track_dir))

    def read(name):
        path = os.path.join(track_dir, f"{name}.wav")
        return load_wav(path, SAMPLE_RATE) if os.path.exists(path) else None

    vocals, drums, harmony = read("vocals"), read("drums"), read("harmony")
    if harmony is None:
        parts = [c for c in (read("bass"), read("other")) if c is not None]
        harmony = mix(parts) if parts else None
    clips = {"vocals": vocals, "harmony": harmony, "drums": drums}
    if excerpt:
        clips = {k: (trim_excerpt(v) if v is not None else None) for k, v in clips.items()}
    present = [c for c in clips.values() if c is not None]
    if not present:
        raise FileNotFoundError(f"{track_dir}: no stem files")
    n = max(len(c) for c in present)
    clips = {
        k: (AudioClip(np.pad(v.samples, (0, n - len(v))), v.sample_rate) if v is not None else None)
        for k, v in clips.items()
    }
    return StemSet(track_id, **clips)


def load_stem_dir(root: str, excerpt: bool = True) -> list:
    dirs = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    return [load_stem_set(os.path.join(root, d), excerpt) for d in dirs]
