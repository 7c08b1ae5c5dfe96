"""Sliding-window local features, max-cosine track similarity, ranking, mAP and sample location."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .audio import AudioClip
from .cqt import clip_features
from .model import Encoder, embed_batch, model_checksum

WINDOW_SECONDS = 5.0
DEFAULT_HOP = 2.5
LOCATION_KS = (2.5, 5.0, 7.5, 10.0)

INDEX_MAGIC = b"SIDINDX\x00"
INDEX_VERSION = 1


class IndexFileError(Exception):
    pass


class IndexMismatchError(IndexFileError):
    pass


class TruthError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingSequence:
    track_id: str
    vectors: np.ndarray  # (M, d) float32, unit rows
    window_starts: np.ndarray  # (M,) seconds
    window_len: float = WINDOW_SECONDS
    hop: float = DEFAULT_HOP

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError("vectors must be (M, d)")
        ts = np.asarray(self.window_starts, dtype=np.float64)
        if ts.shape != (v.shape[0],):
            raise ValueError("one timestamp per row is required")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "window_starts", ts)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]


def window_count(duration: float, window: float = WINDOW_SECONDS, hop: float = DEFAULT_HOP) -> int:
    if duration < window:
        return 0
    return int(np.floor((duration - window) / hop + 1e-9)) + 1


def window_features(clip: AudioClip, window: float = WINDOW_SECONDS, hop: float = DEFAULT_HOP):
    """CQT features of every sliding window, plus the window start times."""
    sr = clip.sample_rate
    n_win = int(round(window * sr))
    n_hop = int(round(hop * sr))
    if len(clip) < n_win:
        raise ValueError(f"clip of {clip.duration:.2f} s is shorter than the {window} s window")
    starts = np.arange(0, len(clip) - n_win + 1, n_hop)
    feats = np.stack([clip_features(clip.samples[s : s + n_win], sr) for s in starts])
    return feats, starts / sr


def embed_track(clip: AudioClip, tower: Encoder, window: float = WINDOW_SECONDS, hop: float = DEFAULT_HOP, track_id: str = "") -> EmbeddingSequence:
    feats, starts = window_features(clip, window, hop)
    return EmbeddingSequence(track_id, embed_batch(tower, feats), starts, window, hop)


def _check_dims(X: EmbeddingSequence, Y: EmbeddingSequence):
    if X.dim != Y.dim:
        raise ValueError(f"embedding dimensions differ: {X.dim} vs {Y.dim}")


def pairwise_cosine(X: EmbeddingSequence, Y: EmbeddingSequence) -> np.ndarray:
    _check_dims(X, Y)
    # elementwise products reduced along d: every entry depends only on its two rows, so the
    # result is exactly symmetric and independent of the matrix shapes (a BLAS product is not)
    x = X.vectors.astype(np.float64)
    y = Y.vectors.astype(np.float64)
    return (x[:, None, :] * y[None, :, :]).sum(axis=-1)


def similarity(X: EmbeddingSequence, Y: EmbeddingSequence) -> float:
    """Global maximum of all pairwise cosines between the two sequences' rows."""
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("empty embedding sequence")
    return float(pairwise_cosine(X, Y).max())


def rank_candidates(query: EmbeddingSequence, pool) -> list:
    """``[(candidate_id, score), ...]`` by descending score, ties by id."""
    pool = list(pool)
    if not pool:
        raise ValueError("empty candidate pool")
    scored = [(c.track_id, similarity(query, c)) for c in pool]
    return sorted(scored, key=lambda r: (-r[1], r[0]))


def average_precision(ranked_ids, relevant) -> float:
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    hits, total = 0, 0.0
    for rank, cid in enumerate(ranked_ids, start=1):
        if cid in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def random_map_oracle(n_candidates: int, n_relevant, trials: int = 10_000, seed: int = 0) -> float:
    """Monte-Carlo expected mAP of uniformly random rankings.

    ``n_relevant`` is an int or one count per query.
    """
    counts = [n_relevant] if np.isscalar(n_relevant) else list(n_relevant)
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, n_candidates + 1)
    out = []
    for r in counts:
        rel = np.zeros(n_candidates, bool)
        rel[:r] = True
        acc = 0.0
        for _ in range(trials):
            hit = rel[rng.permutation(n_candidates)]
            acc += float(np.sum(np.cumsum(hit)[hit] / ranks[hit])) / r
        out.append(acc / trials)
    return float(np.mean(out))


# ----------------------------------------------------------------------------
# ground truth and reports


@dataclass
class GroundTruth:
    relations: set = field(default_factory=set)  # {(query_id, candidate_id)}
    instances: list = field(default_factory=list)  # [(query_id, candidate_id, candidate_timestamp)]

    def relevant(self, query_id: str) -> set:
        return {c for q, c in self.relations if q == query_id}

    def queries(self) -> list:
        return sorted({q for q, _ in self.relations})

    def validate(self):
        for q, c, _ in self.instances:
            if (q, c) not in self.relations:
                raise TruthError(f"instance ({q}, {c}) has no relation record")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "query_id", "candidate_id", "timestamp"])
        for q, c in sorted(self.relations):
            w.writerow(["relation", q, c, ""])
        for q, c, t in sorted(self.instances):
            w.writerow(["instance", q, c, repr(float(t))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GroundTruth":
        gt = cls()
        for row in csv.DictReader(io.StringIO(text)):
            if row["kind"] == "relation":
                gt.relations.add((row["query_id"], row["candidate_id"]))
            elif row["kind"] == "instance":
                gt.instances.append((row["query_id"], row["candidate_id"], float(row["timestamp"])))
            else:
                raise TruthError(f"unknown record kind {row['kind']!r}")
        gt.validate()
        return gt


@dataclass
class EvalReport:
    per_query: dict  # query_id -> AP
    rankings: dict  # query_id -> [(candidate_id, score)]
    map: float
    rank1: int
    rank5: int
    location: dict = field(default_factory=dict)  # k -> mAP
    location_instances: list = field(default_factory=list)

    def to_dict(self, extra: dict | None = None) -> dict:
        d = {
            "map": self.map,
            "rank1": self.rank1,
            "rank5": self.rank5,
            "n_queries": len(self.per_query),
            "per_query_ap": dict(sorted(self.per_query.items())),
        }
        if self.location:
            d["location_map"] = {f"{k:g}": v for k, v in sorted(self.location.items())}
            d["location_instances"] = self.location_instances
        if extra:
            d.update(extra)
        return d

    def to_json(self, extra: dict | None = None) -> str:
        return json.dumps(self.to_dict(extra), indent=1, sort_keys=True) + "\n"


def evaluate_rankings(rankings: dict, truth: GroundTruth) -> EvalReport:
    """mAP and rank-k hits from precomputed rankings (shared with the landmark baseline)."""
    per_query = {}
    r1 = r5 = 0
    for q in truth.queries():
        if q not in rankings:
            raise TruthError(f"no ranking for query {q}")
        rel = truth.relevant(q)
        ids = [c for c, _ in rankings[q]]
        missing = rel - set(ids)
        if missing:
            raise TruthError(f"relevant candidates {sorted(missing)} of {q} are not in the pool")
        per_query[q] = average_precision(ids, rel)
        r1 += ids[0] in rel
        r5 += bool(rel & set(ids[:5]))
    m = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return EvalReport(per_query, rankings, m, r1, r5)


def evaluate_retrieval(queries, pool, truth: GroundTruth) -> EvalReport:
    qmap = {q.track_id: q for q in queries}
    pool = list(pool)
    if len({c.track_id for c in pool}) != len(pool):
        raise TruthError("duplicate candidate ids in the pool")
    rankings = {q: rank_candidates(qmap[q], pool) for q in truth.queries() if q in qmap}
    return evaluate_rankings(rankings, truth)


# ----------------------------------------------------------------------------
# location


def locate_sample(query: EmbeddingSequence, candidate: EmbeddingSequence) -> list:
    """``[(candidate_window_start, score), ...]``: per candidate window, its best cosine against any query window."""
    s = pairwise_cosine(query, candidate).max(axis=0)
    order = sorted(range(len(s)), key=lambda i: (-s[i], candidate.window_starts[i]))
    return [(float(candidate.window_starts[i]), float(s[i])) for i in order]


def location_ap(ranked_timestamps, annotation: float, k: float) -> float:
    """AP over a ranked timestamp list where every timestamp within +-k of the annotation is relevant.

    Returns 0 when no timestamp is within reach of the annotation.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    ts = [t[0] if isinstance(t, tuple) else t for t in ranked_timestamps]
    hits = [abs(t - annotation) <= k + 1e-9 for t in ts]
    n_rel = sum(hits)
    if n_rel == 0:
        return 0.0
    found, total = 0, 0.0
    for rank, h in enumerate(hits, start=1):
        if h:
            found += 1
            total += found / rank
    return total / n_rel


def evaluate_location(queries, candidates, truth: GroundTruth, ks=LOCATION_KS):
    """Per-instance AP, averaged per relation, then over relations, for each k."""
    qmap = {q.track_id: q for q in queries}
    cmap = {c.track_id: c for c in candidates}
    per_relation = {k: {} for k in ks}
    rows = []
    for q, c, t in sorted(truth.instances):
        ranked = locate_sample(qmap[q], cmap[c])
        row = {"query_id": q, "candidate_id": c, "annotation": t, "top_timestamp": ranked[0][0]}
        for k in ks:
            ap = location_ap(ranked, t, k)
            per_relation[k].setdefault((q, c), []).append(ap)
            row[f"ap@{k:g}"] = ap
        rows.append(row)
    result = {k: float(np.mean([np.mean(v) for v in rel.values()])) if rel else 0.0 for k, rel in per_relation.items()}
    return result, rows


# ----------------------------------------------------------------------------
# index files


def _seq_bytes(seq: EmbeddingSequence) -> bytes:
    raw = seq.track_id.encode()
    m, d = seq.vectors.shape
    return (
        struct.pack("<H", len(raw))
        + raw
        + struct.pack("<II", m, d)
        + np.ascontiguousarray(seq.window_starts, dtype="<f8").tobytes()
        + np.ascontiguousarray(seq.vectors, dtype="<f4").tobytes()
    )


def write_index(path, sequences, model_sum: str, role: str = "query") -> None:
    """Header (magic, version, JSON: d, h, window, model checksum, tower role), records, sha256 trailer."""
    sequences = list(sequences)
    if not sequences:
        raise ValueError("nothing to index")
    d = sequences[0].dim
    hop, window = sequences[0].hop, sequences[0].window_len
    if any(s.dim != d or s.hop != hop or s.window_len != window for s in sequences):
        raise ValueError("all indexed sequences must share d, hop and window length")
    header = json.dumps(
        {"d": d, "hop": hop, "window_len": window, "model_checksum": model_sum, "tower": role, "n_tracks": len(sequences)},
        sort_keys=True,
    ).encode()
    body = INDEX_MAGIC + struct.pack("<II", INDEX_VERSION, len(header)) + header
    body += b"".join(_seq_bytes(s) for s in sequences)
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())


def build_index(path, tracks, tower: Encoder, hop: float = DEFAULT_HOP, role: str = "query") -> list:
    """Embed ``{track_id: AudioClip}`` (or (id, clip) pairs) and persist them."""
    items = tracks.items() if isinstance(tracks, dict) else tracks
    seqs = [embed_track(clip, tower, hop=hop, track_id=tid) for tid, clip in sorted(items, key=lambda kv: kv[0])]
    write_index(path, seqs, model_checksum(tower), role)
    return seqs


def open_index(path, model_sum: str | None = None, d: int | None = None, role: str | None = None):
    """Returns ``(header, sequences)``; raises on corruption or model/config mismatch."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(INDEX_MAGIC) or len(data) < len(INDEX_MAGIC) + 40:
        raise IndexFileError(f"{path}: not an index file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IndexFileError(f"{path}: checksum mismatch")
    pos = len(INDEX_MAGIC)
    version, hlen = struct.unpack_from("<II", body, pos)
    if version != INDEX_VERSION:
        raise IndexFileError(f"{path}: unsupported index version {version}")
    pos += 8
    header = json.loads(body[pos : pos + hlen])
    pos += hlen
    if d is not None and header["d"] != d:
        raise IndexMismatchError(f"index has d={header['d']}, model has d={d}")
    if model_sum is not None and header["model_checksum"] != model_sum:
        raise IndexMismatchError("index was built with a different model")
    if role is not None and header["tower"] != role:
        raise IndexMismatchError(f"index was built with the {header['tower']} tower, not {role}")
    seqs = []
    for _ in range(header["n_tracks"]):
        (ln,) = struct.unpack_from("<H", body, pos)
        pos += 2
        tid = body[pos : pos + ln].decode()
        pos += ln
        m, dd = struct.unpack_from("<II", body, pos)
        pos += 8
        ts = np.frombuffer(body, "<f8", m, pos)
        pos += 8 * m
        vec = np.frombuffer(body, "<f4", m * dd, pos).reshape(m, dd)
        pos += 4 * m * dd
        seqs.append(EmbeddingSequence(tid, vec.copy(), ts.copy(), header["window_len"], header["hop"]))
    return header, seqs


def heatmap_csv(query: EmbeddingSequence, candidate: EmbeddingSequence) -> str:
    """Full pairwise cosine matrix: rows are candidate windows, columns query windows, both labelled by start time."""
    sim = pairwise_cosine(query, candidate).T
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["candidate_t\\query_t"] + [f"{t:g}" for t in query.window_starts])
    for t, row in zip(candidate.window_starts, sim):
        w.writerow([f"{t:g}"] + [f"{v:.6f}" for v in row])
    return buf.getvalue()
