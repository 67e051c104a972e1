import hashlib
import struct

import numpy as np
import pytest
from scipy import stats

from vtransfer.data import (
    FRAME_RATE,
    Corpus,
    CorpusConfig,
    CorpusError,
    SyntheticLanguage,
    SyntheticSpeaker,
    _utterance_plan,
    make_corpus,
    read_features,
    render_utterance,
    retime,
    sample_chunk_bounds,
    sample_reference_chunk,
    write_features,
)

from .conftest import SMALL_CORPUS


def tree_digest(root) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def identity_language(d: int = 8) -> SyntheticLanguage:
    rng = np.random.default_rng(0)
    return SyntheticLanguage(0, 10, rng.normal(size=(3, d)), np.array([6.0, 4.0, 7.0]))


class TestCorpus:
    def test_same_seed_byte_identical(self, tmp_path):
        a = make_corpus(tmp_path / "a", SMALL_CORPUS)
        b = make_corpus(tmp_path / "b", SMALL_CORPUS)
        assert tree_digest(a) == tree_digest(b)

    def test_different_seed_differs(self, tmp_path):
        a = make_corpus(tmp_path / "a", SMALL_CORPUS)
        cfg = CorpusConfig(**{**SMALL_CORPUS.__dict__, "seed": SMALL_CORPUS.seed + 1})
        b = make_corpus(tmp_path / "b", cfg)
        assert tree_digest(a)["manifest.jsonl"] != tree_digest(b)["manifest.jsonl"]

    def test_counts_and_split(self, small_corpus):
        cfg = small_corpus.config
        recs = small_corpus.records
        assert len(recs) == cfg.n_speakers * cfg.utts_per_speaker
        assert {r.speaker for r in recs} == set(range(cfg.n_speakers))
        assert {r.language for r in recs} == set(range(cfg.n_languages))
        held = small_corpus.heldout_speakers
        assert len(held) >= 0.2 * cfg.n_speakers
        assert not set(held) & set(small_corpus.train_speakers)
        assert all(r.split == ("heldout" if r.speaker in held else "train") for r in recs)

    def test_records_consistent_with_features(self, small_corpus):
        for r in small_corpus.records:
            f = small_corpus.features(r)
            assert f.shape == (r.durations.sum(), small_corpus.config.n_bands) == (r.frames, f.shape[1])
            assert np.all(np.isfinite(f))
            lang = small_corpus.languages[r.language]
            assert all(lang.contains(int(t)) for t in r.tokens)

    def test_inventories_disjoint(self, small_corpus):
        ids = [set(lang.token_ids.tolist()) for lang in small_corpus.languages]
        assert sum(len(s) for s in ids) == len(set().union(*ids))

    def test_utterance_rendered_independently(self, small_corpus):
        # each utterance owns its RNG stream: re-rendering one in isolation reproduces it
        cfg = small_corpus.config
        for u, s, lang, rng in _utterance_plan(cfg):
            if u != 7:
                continue
            n = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
            tokens = rng.choice(small_corpus.languages[lang].token_ids, size=n)
            utt = render_utterance(small_corpus.speakers[s], small_corpus.languages[lang], tokens,
                                   noise_seed=rng, noise_std=cfg.noise_std)
            stored = small_corpus.features(small_corpus.records[u])
            np.testing.assert_array_equal(utt.features.astype(np.float32), stored)

    def test_band_centroid_tracks_pitch(self, paper_corpus):
        cents, pitch = [], []
        for s in range(paper_corpus.config.n_speakers):
            recs = [r for r in paper_corpus.records if r.speaker == s]
            c = []
            for r in recs:
                w = np.exp(paper_corpus.features(r))
                c.append(((w * np.arange(w.shape[1])).sum(1) / w.sum(1)).mean())
            cents.append(np.mean(c))
            pitch.append(paper_corpus.speakers[s].pitch_factor)
        assert stats.pearsonr(cents, pitch)[0] > 0.9

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CorpusError, match="manifest"):
            Corpus(tmp_path)

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(CorpusError, match=str(blocker)):
            make_corpus(blocker / "sub", SMALL_CORPUS)

    def test_config_preconditions(self):
        with pytest.raises(CorpusError):
            CorpusConfig(n_speakers=1)
        with pytest.raises(CorpusError):
            CorpusConfig(n_languages=1)


class TestRender:
    def test_identity_speaker_reproduces_templates(self):
        lang = identity_language()
        spk = SyntheticSpeaker(0, 1.0, 0.0, 0.0, 1.0)
        utt = render_utterance(spk, lang, [10, 12], noise_std=0.0)
        assert utt.durations.tolist() == [6, 7]
        np.testing.assert_array_equal(utt.features, np.repeat(lang.templates[[0, 2]], [6, 7], axis=0))
        assert utt.frame_rate == FRAME_RATE == 50

    def test_doubling_rate_halves_frames(self):
        lang = identity_language()
        tokens = [10, 11, 12] * 5
        slow = render_utterance(SyntheticSpeaker(0, 1.0, 0.0, 0.0, 0.7), lang, tokens, noise_std=0)
        fast = render_utterance(SyntheticSpeaker(0, 1.0, 0.0, 0.0, 1.4), lang, tokens, noise_std=0)
        assert abs(2 * fast.features.shape[0] - slow.features.shape[0]) <= len(tokens)

    def test_noise_seeded(self):
        lang = identity_language()
        spk = SyntheticSpeaker(0, 1.1, 0.2, -1.0, 1.0)
        a = render_utterance(spk, lang, [10, 11], noise_seed=3).features
        assert np.array_equal(a, render_utterance(spk, lang, [10, 11], noise_seed=3).features)
        clean = render_utterance(spk, lang, [10, 11], noise_std=0).features
        assert 0.03 < np.std(a - clean) < 0.07

    def test_retime_matches_faster_speaker(self):
        lang = identity_language()
        tokens = [10, 11, 12, 12]
        slow = render_utterance(SyntheticSpeaker(0, 1.0, 0.0, 0.0, 1.0), lang, tokens, noise_std=0)
        fast = render_utterance(SyntheticSpeaker(0, 1.0, 0.0, 0.0, 1.25), lang, tokens, noise_std=0)
        feats, durations = retime(slow.features, slow.durations, 1.25)
        assert durations.tolist() == fast.durations.tolist()
        np.testing.assert_array_equal(feats, fast.features)

    def test_retime_identity_and_floor(self):
        f = np.arange(10.0)[:, None]
        same, d = retime(f, [3, 7], 1.0)
        assert np.array_equal(same, f) and d.tolist() == [3, 7]
        _, d = retime(f, [1, 9], 4.0)
        assert d.tolist() == [1, 2]
        with pytest.raises(CorpusError):
            retime(f, [3, 7], 0.0)

    def test_token_outside_inventory(self):
        with pytest.raises(CorpusError, match="inventory"):
            render_utterance(SyntheticSpeaker(0, 1.0, 0.0, 0.0, 1.0), identity_language(), [10, 13])

    @pytest.mark.parametrize("field,value", [("pitch_factor", 1.5), ("spectral_tilt", -0.6),
                                             ("formant_offset", 2.5), ("rate_factor", 0.5)])
    def test_speaker_ranges(self, field, value):
        kw = {"pitch_factor": 1.0, "spectral_tilt": 0.0, "formant_offset": 0.0, "rate_factor": 1.0, field: value}
        with pytest.raises(CorpusError, match=field):
            SyntheticSpeaker(0, **kw)


class TestChunks:
    def test_length_law(self):
        rng = np.random.default_rng(0)
        lengths = np.array([sample_chunk_bounds(2000, rng)[1] for _ in range(100_000)]) / FRAME_RATE
        assert lengths.min() >= 1.0 and lengths.max() <= 15.0
        assert 7.8 <= lengths.mean() <= 8.2
        assert 2.6 <= lengths.std() <= 3.0

    def test_short_utterance_caps_length(self):
        rng = np.random.default_rng(1)
        for _ in range(2000):
            start, length = sample_chunk_bounds(150, rng)
            assert length <= 150 and 0 <= start <= 150 - length

    def test_sub_second_utterance_returned_whole(self):
        feats = np.arange(40.0).reshape(20, 2)
        chunk = sample_reference_chunk(feats, np.random.default_rng(0))
        assert np.array_equal(chunk, feats)

    def test_chunk_is_contiguous_slice(self):
        feats = np.arange(600.0)[:, None]
        chunk = sample_reference_chunk(feats, np.random.default_rng(2))
        assert np.all(np.diff(chunk[:, 0]) == 1.0)

    def test_start_independent_of_token_boundaries(self):
        # tokens of 5 frames: the phase of the chunk start inside a token is uniform
        rng = np.random.default_rng(3)
        phases = np.array([sample_chunk_bounds(3000, rng)[0] % 5 for _ in range(20_000)])
        counts = np.bincount(phases, minlength=5)
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_empty_rejected(self):
        with pytest.raises(CorpusError):
            sample_chunk_bounds(0, np.random.default_rng(0))


class TestFeatureFiles:
    def test_layout(self, tmp_path):
        f = np.array([[1.0, -2.5], [0.25, 3.0], [0.0, 1e-3]])
        write_features(tmp_path / "x.vtf", f)
        raw = (tmp_path / "x.vtf").read_bytes()
        assert raw == b"VTF1" + struct.pack("<II", 3, 2) + f.astype("<f4").tobytes()
        np.testing.assert_array_equal(read_features(tmp_path / "x.vtf"), f.astype(np.float32))

    def test_bad_magic_and_truncation(self, tmp_path):
        write_features(tmp_path / "x.vtf", np.ones((2, 2)))
        raw = (tmp_path / "x.vtf").read_bytes()
        (tmp_path / "bad.vtf").write_bytes(b"NOPE" + raw[4:])
        (tmp_path / "short.vtf").write_bytes(raw[:-1])
        with pytest.raises(CorpusError, match="magic"):
            read_features(tmp_path / "bad.vtf")
        with pytest.raises(CorpusError, match="2x2"):
            read_features(tmp_path / "short.vtf")
