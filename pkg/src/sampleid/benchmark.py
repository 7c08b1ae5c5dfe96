"""Desk-scale benchmark: synthetic training corpus, held-out queries and candidate pool.

Query ``i`` is built from held-out track ``i`` the way a training anchor is
built, but over the whole 30 s excerpt: a random stem combination is the
sample, it passes through a fresh stem-stage plan, is mixed with the
remaining stems, and the mixture passes through a fresh mixture-stage plan.
Its one relevant candidate is the clean sample (the combination's stems
summed, 30 s).  Held-out tracks beyond the query count contribute one clean
stem combination each as noise candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioClip
from .dataset import enumerate_combos
from .fx import DatasetConfig, apply_plan_array, pitch_shift_array, sample_mixture_plan, sample_stem_plan
from .retrieval import GroundTruth
from .synth import synth_corpus

TRAIN_STREAM = 0
HELDOUT_STREAM = 1
PITCH_CHOICES = (-2.0, -1.0, 1.0, 2.0)
SEGMENT_SECONDS = 5.0


@dataclass(frozen=True)
class BenchmarkSpec:
    seed: int = 0
    n_train_tracks: int = 60
    n_queries: int = 20
    n_pool: int = 60
    config: str = "B"


@dataclass
class QuerySet:
    queries: dict  # id -> AudioClip
    truth: GroundTruth
    provenance: dict  # id -> JSON-able record


def training_corpus(spec: BenchmarkSpec) -> list:
    return synth_corpus(spec.n_train_tracks, spec.seed, "track", TRAIN_STREAM)


def heldout_corpus(spec: BenchmarkSpec) -> list:
    if spec.n_pool < spec.n_queries:
        raise ValueError("the pool must hold at least one candidate per query")
    return synth_corpus(spec.n_pool, spec.seed, "held", HELDOUT_STREAM)


def _combo(track, rng):
    combos = enumerate_combos(track.active, "up_to_N_minus_1")
    return combos[int(rng.integers(len(combos)))]


def _sum(track, names) -> np.ndarray:
    return np.sum([getattr(track, n).samples.astype(np.float64) for n in names], axis=0)


def candidate_pool(heldout, spec: BenchmarkSpec) -> tuple:
    """Clean sample candidates ``{cand_id: clip}`` plus the combination each one uses."""
    pool, combos = {}, {}
    for i, track in enumerate(heldout):
        rng = np.random.default_rng([spec.seed, 2, i])
        combo = _combo(track, rng)
        cid = f"cand_{track.track_id}"
        pool[cid] = AudioClip(_sum(track, combo), track.sample_rate)
        combos[cid] = combo
    return pool, combos


def transformed_queries(heldout, spec: BenchmarkSpec) -> QuerySet:
    """Full mixtures with fresh stem- and mixture-stage plans of the benchmark configuration."""
    config = DatasetConfig(spec.config)
    _, combos = candidate_pool(heldout, spec)
    queries, truth, prov = {}, GroundTruth(), {}
    for i, track in enumerate(heldout[: spec.n_queries]):
        cid = f"cand_{track.track_id}"
        combo = combos[cid]
        rng = np.random.default_rng([spec.seed, 3, i])
        stem_plan = sample_stem_plan(config, rng)
        mixture_plan = sample_mixture_plan(config, rng)
        sr = track.sample_rate
        x = apply_plan_array(stem_plan, _sum(track, combo), sr, rng)
        rest = [n for n in track.active_names() if n not in combo]
        others = _sum(track, rest)
        mixture = np.zeros(max(len(x), len(others)))
        mixture[: len(x)] += x
        mixture[: len(others)] += others
        y = apply_plan_array(mixture_plan, mixture, sr, rng)
        qid = f"query_{track.track_id}"
        queries[qid] = AudioClip(y, sr)
        truth.relations.add((qid, cid))
        prov[qid] = {"combo": list(combo), "stem_plan": stem_plan.to_dict(), "mixture_plan": mixture_plan.to_dict()}
    return QuerySet(queries, truth, prov)


def pitched_queries(heldout, spec: BenchmarkSpec) -> QuerySet:
    """Untransformed full mixtures, pitch shifted by +-1 or +-2 semitones (inside the re-pitch sweep)."""
    _, combos = candidate_pool(heldout, spec)
    queries, truth, prov = {}, GroundTruth(), {}
    for i, track in enumerate(heldout[: spec.n_queries]):
        cid = f"cand_{track.track_id}"
        rng = np.random.default_rng([spec.seed, 4, i])
        s = float(rng.choice(PITCH_CHOICES))
        qid = f"pitched_{track.track_id}"
        queries[qid] = AudioClip(pitch_shift_array(_sum(track, track.active_names()), s), track.sample_rate)
        truth.relations.add((qid, cid))
        prov[qid] = {"combo": list(combos[cid]), "semitones": s}
    return QuerySet(queries, truth, prov)


def verbatim_queries(heldout, spec: BenchmarkSpec) -> QuerySet:
    """Each query is a relevant candidate itself."""
    pool, _ = candidate_pool(heldout, spec)
    queries, truth = {}, GroundTruth()
    for track in heldout[: spec.n_queries]:
        cid = f"cand_{track.track_id}"
        qid = f"copy_{track.track_id}"
        queries[qid] = pool[cid]
        truth.relations.add((qid, cid))
    return QuerySet(queries, truth, {})


def location_queries(heldout, spec: BenchmarkSpec) -> QuerySet:
    """A 5 s excerpt of candidate ``i`` at a seeded offset, passed through a stem-stage plan and
    implanted at a seeded position in the full mixture of a different held-out track.

    Ground-truth instances carry the excerpt's start time in the candidate.
    """
    if spec.n_pool < 2 * spec.n_queries:
        raise ValueError("location queries need a distinct host track per query")
    config = DatasetConfig(spec.config)
    pool, _ = candidate_pool(heldout, spec)
    queries, truth, prov = {}, GroundTruth(), {}
    for i, track in enumerate(heldout[: spec.n_queries]):
        cid = f"cand_{track.track_id}"
        cand = pool[cid]
        sr = cand.sample_rate
        seg_len = int(round(SEGMENT_SECONDS * sr))
        rng = np.random.default_rng([spec.seed, 5, i])
        offset = round(float(rng.uniform(0.0, cand.duration - SEGMENT_SECONDS)), 2)
        start = int(round(offset * sr))
        segment = cand.samples[start : start + seg_len].astype(np.float64)
        plan = sample_stem_plan(config, rng)
        segment = apply_plan_array(plan, segment, sr, rng)
        host_track = heldout[spec.n_queries + i]
        host = _sum(host_track, host_track.active_names())
        position = round(float(rng.uniform(0.0, len(host) / sr - len(segment) / sr)), 2)
        p = int(round(position * sr))
        y = host.copy()
        y[p : p + len(segment)] += segment[: len(y) - p]
        qid = f"implant_{track.track_id}"
        queries[qid] = AudioClip(y, sr)
        truth.relations.add((qid, cid))
        truth.instances.append((qid, cid, offset))
        prov[qid] = {"host": host_track.track_id, "position": position, "offset": offset, "stem_plan": plan.to_dict()}
    return QuerySet(queries, truth, prov)
