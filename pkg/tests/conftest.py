import numpy as np
import pytest

from vtransfer.data import Corpus, CorpusConfig, make_corpus
from vtransfer.model import ModelConfig
from vtransfer.speaker_encoder import SpeakerEncoderConfig

SMALL_CORPUS = CorpusConfig(seed=11, n_speakers=6, n_languages=2, utts_per_speaker=4, n_bands=12,
                            tokens_per_language=6, min_tokens=4, max_tokens=8)


def tiny_model_config(kind: str = "shared_gst", feature_dim: int = 12, vocab: int = 12) -> ModelConfig:
    enc = SpeakerEncoderConfig(input_dim=feature_dim, conv_layers=1, conv_channels=8, transformer_layers=1,
                               embed_dim=8, attention_heads=2, ffn_dim=16)
    return ModelConfig(vocab_size=vocab, feature_dim=feature_dim, text_dim=8, text_layers=1, adapter_hidden=8,
                       bottleneck=kind, bank_size=6, gst_heads=2, encoder=enc)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory) -> Corpus:
    root = tmp_path_factory.mktemp("corpus")
    make_corpus(root, SMALL_CORPUS)
    return Corpus(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def paper_corpus(tmp_path_factory) -> Corpus:
    """The full-size default corpus: 40 speakers x 3 languages, 8 held out."""
    root = tmp_path_factory.mktemp("paper_corpus")
    make_corpus(root, CorpusConfig())
    return Corpus(root)


# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
