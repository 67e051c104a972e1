import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vtransfer.evaluation import (
    BOTTLENECK_ORDER,
    RAW_COLUMNS,
    EvalError,
    ScoringEncoder,
    bottleneck_report,
    check_zero_shot,
    cosine,
    cross_lingual_eval,
    decode_tokens,
    edit_distance,
    load_probe,
    r_squared,
    read_raw_scores,
    report_csv,
    report_svg,
    save_probe,
    similarity_report,
    token_error_rate,
    train_probe,
    write_raw_scores,
)
from vtransfer.gradcheck import MICRO_ENCODER
from vtransfer.speaker_encoder import SpeakerEncoderConfig
from vtransfer.trainer import train

from .test_trainer import micro


@pytest.fixture(scope="module")
def probe(small_corpus):
    return train_probe(small_corpus, augment_speakers=512)


@pytest.fixture(scope="module")
def scorer(small_corpus):
    cfg = SpeakerEncoderConfig(**{**vars(MICRO_ENCODER), "input_dim": small_corpus.config.n_bands})
    return ScoringEncoder(cfg, len(small_corpus.train_speakers))


def fake_rows(kind: str, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for s in (4, 5):
        for a in range(2):
            for b in range(2):
                row = {"speaker": s, "ref_lang": a, "tgt_lang": b, "text": 0, "bottleneck": kind,
                       "cosine": float(rng.uniform(0.5, 1)), "cross_cosine": float(rng.uniform(0, 0.5)),
                       "ter": float(rng.uniform(0, 20))}
                for f in ("pitch_factor", "spectral_tilt", "formant_offset", "rate_factor"):
                    row[f"{f}_true"] = float(rng.uniform(0.8, 1.2))
                    row[f"{f}_hat"] = row[f"{f}_true"] + float(rng.normal(0, 0.05))
                rows.append(row)
    return rows


class TestMetrics:
    def test_cosine(self):
        assert cosine([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0, abs=1e-12)
        assert cosine([1.0, 0.0], [0.0, 5.0]) == 0.0

    def test_edit_distance_examples(self):
        assert edit_distance("kitten", "sitting") == 3
        assert edit_distance([], [1, 2]) == 2
        assert edit_distance([1, 2, 3], [1, 2, 3]) == 0

    @given(st.lists(st.integers(0, 3), max_size=8), st.lists(st.integers(0, 3), max_size=8))
    def test_edit_distance_bounds(self, a, b):
        d = edit_distance(a, b)
        assert d == edit_distance(b, a)
        assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))

    def test_r_squared(self):
        assert r_squared([1, 2, 3], [1, 2, 3]) == 1.0
        assert r_squared([1, 2, 3], [2, 2, 2]) == 0.0
        assert math.isnan(r_squared([1, 1], [0, 2]))


class TestProbe:
    def test_gold_is_decoded(self, probe, small_corpus):
        ters = [token_error_rate(small_corpus.features(r), r.tokens, probe, r.durations,
                                 small_corpus.languages[r.language].token_ids)
                for r in small_corpus.records]
        assert np.mean(ters) < 10.0

    def test_shuffled_frames_near_chance(self, probe, small_corpus):
        rng = np.random.default_rng(0)
        ters = []
        for r in small_corpus.records:
            f = small_corpus.features(r)
            ters.append(token_error_rate(f[rng.permutation(len(f))], r.tokens, probe, r.durations))
        assert np.mean(ters) > 50.0

    def test_allowed_tokens_restrict_output(self, probe, small_corpus):
        r = small_corpus.records[0]
        other = small_corpus.languages[1 - r.language].token_ids
        hyp = decode_tokens(small_corpus.features(r), r.durations, probe, allowed=other)
        assert set(hyp) <= set(other.tolist())

    def test_empty_expected_rejected(self, probe, small_corpus):
        f = small_corpus.features(small_corpus.records[0])
        with pytest.raises(EvalError, match="non-empty"):
            token_error_rate(f, [], probe, [len(f)])

    def test_duration_mismatch(self, probe, small_corpus):
        f = small_corpus.features(small_corpus.records[0])
        with pytest.raises(EvalError, match="frames"):
            decode_tokens(f, [len(f) + 1], probe)

    def test_round_trip(self, probe, scorer, small_corpus, tmp_path):
        save_probe(tmp_path / "p.vtck", probe, scorer)
        p2, s2 = load_probe(tmp_path / "p.vtck")
        f = small_corpus.features(small_corpus.records[1])
        np.testing.assert_allclose(p2.frame_logits(f), probe.frame_logits(f), rtol=1e-4, atol=1e-3)
        np.testing.assert_allclose(s2.embed(f), scorer.embed(f), atol=1e-5)


class TestCrossLingual:
    def test_rows_cover_every_pair(self, small_corpus, probe, scorer):
        model = train(micro(steps=2), small_corpus).model
        rows = cross_lingual_eval(model, small_corpus, probe, scorer, n_texts=2)
        n_lang = small_corpus.config.n_languages
        assert len(rows) == len(small_corpus.heldout_speakers) * n_lang * n_lang * 2
        assert all(set(r) == set(RAW_COLUMNS) for r in rows)
        assert all(math.isfinite(r[k]) for r in rows for k in ("cosine", "cross_cosine", "ter"))
        rep = similarity_report(rows)
        assert set(rep.pairs) == {(a, b) for a in range(n_lang) for b in range(n_lang)}
        assert rep.margin == pytest.approx(rep.same_mean - rep.cross_mean)

    def test_zero_shot_guard(self, small_corpus):
        check_zero_shot(small_corpus, small_corpus.train_speakers)
        with pytest.raises(EvalError, match="zero-shot"):
            check_zero_shot(small_corpus, [small_corpus.heldout_speakers[0]])


class TestReport:
    def test_four_groups_all_finite(self):
        raw = {k: fake_rows(k, i) for i, k in enumerate(BOTTLENECK_ORDER)}
        table = bottleneck_report(raw)
        assert [r["pair"] for r in table] == ["0->0", "0->1", "1->0", "1->1", "cross_lingual"]
        groups = {k.split(".")[0] for k in table[0] if "." in k}
        assert groups == set(BOTTLENECK_ORDER)
        assert all(math.isfinite(v) for r in table for k, v in r.items() if k != "pair")

    def test_regenerated_from_raw_csv(self, tmp_path):
        raw = {k: fake_rows(k, i) for i, k in enumerate(BOTTLENECK_ORDER)}
        for k, rows in raw.items():
            write_raw_scores(tmp_path / f"raw_{k}.csv", rows)
        again = {k: read_raw_scores(tmp_path / f"raw_{k}.csv") for k in BOTTLENECK_ORDER}
        assert report_csv(bottleneck_report(again)) == report_csv(bottleneck_report(raw))

    def test_svg_deterministic(self, tmp_path):
        table = bottleneck_report({k: fake_rows(k, i) for i, k in enumerate(BOTTLENECK_ORDER)})
        report_svg(table, tmp_path / "a.svg")
        report_svg(table, tmp_path / "b.svg")
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()

    def test_mixed_corpora_rejected(self):
        raw = {"vae": fake_rows("vae", 0), "shared_gst": fake_rows("shared_gst", 1)}
        with pytest.raises(EvalError, match="different corpora"):
            bottleneck_report(raw, {"vae": "aaaa", "shared_gst": "bbbb"})
