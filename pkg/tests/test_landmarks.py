from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sampleid.audio import AudioClip
from sampleid.fx import pitch_shift_array
from sampleid.landmarks import (
    FP_RATE,
    REPITCH_STEPS,
    FingerprintDB,
    Peak,
    baseline_rankings,
    extract_peaks,
    landmarks,
    match_query,
    pack_hash,
    pair_landmarks,
    query_scores,
    unpack_hash,
)
from sampleid.retrieval import GroundTruth, evaluate_rankings, random_map_oracle
from sampleid.synth import synth_corpus

SR = 22050


def noise_clip(seed, seconds=5.0, amp=0.1):
    return AudioClip(amp * np.random.default_rng(seed).standard_normal(int(seconds * SR)), SR)


@pytest.fixture(scope="module")
def music():
    tracks = synth_corpus(6, 21, "m", stream=7)
    return {t.track_id: t.mixture() for t in tracks}


@pytest.fixture(scope="module")
def music_db(music):
    return FingerprintDB.build(music)


class TestPeaks:
    def test_silence(self):
        assert extract_peaks(AudioClip(np.zeros(5 * SR), SR)) == []

    def test_tone_column(self):
        t = np.arange(5 * SR) / SR
        peaks = extract_peaks(AudioClip(0.5 * np.sin(2 * np.pi * 1000 * t), SR))
        assert peaks
        bins = Counter(p.bin for p in peaks)
        expected = round(1000 / (FP_RATE / 512))
        assert bins.most_common(1)[0][0] == expected
        assert sum(n for b, n in bins.items() if abs(b - expected) <= 1) >= 0.9 * len(peaks)

    def test_noise_density(self):
        counts = [len(extract_peaks(noise_clip(seed))) for seed in range(100)]
        assert min(counts) >= 60 and max(counts) <= 140

    def test_music_density(self, music):
        rates = [len(extract_peaks(c)) / c.duration for c in music.values()]
        assert all(8 <= r <= 40 for r in rates)

    def test_peaks_are_local_maxima(self):
        from sampleid.landmarks import _prepare, log_spectrogram, peaks_from_spectrogram

        clip = noise_clip(3)
        s = log_spectrogram(_prepare(clip))
        for p in peaks_from_spectrogram(s):
            t0, b0 = max(p.frame - 1, 0), max(p.bin - 1, 0)
            assert s[p.frame, p.bin] == s[t0 : p.frame + 2, b0 : p.bin + 2].max()


class TestHashes:
    def test_round_trip_extremes(self):
        for f1 in (0, 1, 255, 511):
            for df in (-128, -127, -1, 0, 1, 127):
                for dt in (0, 1, 63):
                    assert unpack_hash(pack_hash(f1, df, dt)) == (f1, df, dt)

    @given(st.integers(0, 511), st.integers(-128, 127), st.integers(0, 63))
    def test_round_trip(self, f1, df, dt):
        key = pack_hash(f1, df, dt)
        assert key < 1 << 23
        assert unpack_hash(key) == (f1, df, dt)

    def test_injective(self):
        keys = {pack_hash(f1, df, dt) for f1 in range(0, 512, 37) for df in range(-128, 128, 5) for dt in range(64)}
        assert len(keys) == len(range(0, 512, 37)) * len(range(-128, 128, 5)) * 64

    def test_out_of_range(self):
        for args in ((512, 0, 1), (0, 128, 1), (0, 0, 64), (-1, 0, 1)):
            with pytest.raises(ValueError):
                pack_hash(*args)

    def test_two_peaks_one_hash(self):
        out = pair_landmarks([Peak(0, 10, 0.0), Peak(5, 20, 0.0)])
        assert out == [(pack_hash(10, 10, 5), 0)]

    def test_out_of_zone(self):
        assert pair_landmarks([Peak(0, 10, 0.0), Peak(64, 10, 0.0)]) == []
        assert pair_landmarks([Peak(0, 0, 0.0), Peak(3, 200, 0.0)]) == []
        assert pair_landmarks([Peak(4, 0, 0.0), Peak(4, 9, 0.0)]) == []

    def test_lattice_multiset(self):
        """Peaks at frames 0,10,...,90 in bin 100: each pairs with up to 5 successors within 63 frames."""
        peaks = [Peak(10 * i, 100, 0.0) for i in range(10)]
        expected = Counter()
        for i in range(10):
            n = 0
            for j in range(i + 1, 10):
                dt = 10 * (j - i)
                if dt > 63 or n == 5:
                    break
                expected[(pack_hash(100, 0, dt), 10 * i)] += 1
                n += 1
        got = Counter(pair_landmarks(peaks))
        assert got == expected
        assert sum(expected.values()) == 5 * 5 + 4 + 3 + 2 + 1


class TestDatabase:
    def test_verbatim(self, music, music_db):
        tid = sorted(music)[2]
        ranked = match_query(music[tid], music_db)
        assert ranked[0][0] == tid
        assert ranked[0][1] > 10 * max(ranked[1][1], 1)

    def test_offset_zero(self, music, music_db):
        tid = sorted(music)[0]
        solo = FingerprintDB.build({tid: music[tid]})
        hist = solo.offset_histogram(landmarks(music[tid]), tid)
        near = sum(n for off, n in hist.items() if abs(off) <= 1)
        assert near / sum(hist.values()) >= 0.5
        assert max(hist, key=hist.get) == 0

    def test_order_independent(self, music):
        a = FingerprintDB.build(music)
        b = FingerprintDB.build(list(reversed(list(music.items()))))
        q = next(iter(music.values()))
        assert match_query(q, a) == match_query(q, b)
        np.testing.assert_array_equal(a.keys, b.keys)

    def test_postings_sorted(self, music_db):
        key = int(music_db.keys[len(music_db.keys) // 2])
        posts = music_db.postings(key)
        assert posts == sorted(posts)

    def test_save_load(self, music_db, tmp_path):
        music_db.save(tmp_path / "fp.db")
        back = FingerprintDB.load(tmp_path / "fp.db")
        assert back.track_ids == music_db.track_ids
        np.testing.assert_array_equal(back.keys, music_db.keys)
        data = (tmp_path / "fp.db").read_bytes()
        (tmp_path / "fp.db").write_bytes(data[:-3])
        with pytest.raises(ValueError):
            FingerprintDB.load(tmp_path / "fp.db")

    def test_empty_db(self):
        with pytest.raises(ValueError):
            query_scores(noise_clip(0), FingerprintDB([], [], [], []))

    def test_scores_match_histogram(self, music, music_db):
        q = music[sorted(music)[1]]
        hashes = landmarks(AudioClip(q.samples[5 * SR : 15 * SR], SR))
        scores = music_db.scores(hashes)
        for i, tid in enumerate(music_db.track_ids):
            hist = music_db.offset_histogram(hashes, tid)
            assert scores[i] == (max(hist.values()) if hist else 0)


class TestRepitch:
    def test_steps(self):
        assert list(REPITCH_STEPS) == [-2.5, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 2.5]

    def test_zero_step_reproduces_plain(self, music, music_db):
        q = AudioClip(music[sorted(music)[3]].samples[: 10 * SR], SR)
        np.testing.assert_array_equal(query_scores(q, music_db, repitch=True, steps=(0.0,)), query_scores(q, music_db))

    def test_shifted_query_recovers(self, music, music_db):
        """+2 semitones: plain scores sit among the decoys, the sweep lifts the true track in most cases."""
        lifted = top = 0
        for tid in sorted(music):
            q = AudioClip(pitch_shift_array(music[tid].samples[: 15 * SR], 2.0), SR)
            i = music_db.track_ids.index(tid)
            plain = query_scores(q, music_db)
            swept = query_scores(q, music_db, repitch=True)
            assert swept[i] >= plain[i]
            lifted += swept[i] > plain[i]
            top += match_query(q, music_db, repitch=True)[0][0] == tid
        assert lifted >= 5 and top >= 5

    def test_three_semitones_indistinguishable(self, music, music_db):
        tid = sorted(music)[0]
        q = AudioClip(pitch_shift_array(music[tid].samples[: 15 * SR], 3.0), SR)
        i = music_db.track_ids.index(tid)
        plain = query_scores(q, music_db)
        decoys = np.delete(plain, i)
        assert plain[i] <= decoys.max() + 3


class TestBaselineEvaluation:
    def test_verbatim_map(self, music, music_db):
        queries = {f"copy_{t}": c for t, c in music.items()}
        truth = GroundTruth({(f"copy_{t}", t) for t in music})
        assert evaluate_rankings(baseline_rankings(queries, music_db), truth).map == 1.0

    def test_unrelated_queries_near_random(self, music, music_db):
        """Noise queries share nothing with the pool: mAP stays within reach of the random oracle."""
        ids = sorted(music)
        queries = {f"n{i}": noise_clip(100 + i, 10.0) for i in range(len(ids))}
        truth = GroundTruth({(f"n{i}", ids[i]) for i in range(len(ids))})
        rep = evaluate_rankings(baseline_rankings(queries, music_db), truth)
        oracle = random_map_oracle(len(ids), 1, trials=5000)
        assert rep.map <= oracle + 0.25
