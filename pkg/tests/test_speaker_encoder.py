import numpy as np
import pytest

from vtransfer.gradcheck import MICRO_ENCODER
from vtransfer.nn import ConfigError, NonFiniteError, ShapeError, grad_check
from vtransfer.speaker_encoder import (
    SpeakerEmbedding,
    SpeakerEncoder,
    SpeakerEncoderConfig,
    pool_and_normalize,
)


@pytest.fixture
def encoder(rng):
    return SpeakerEncoder(SpeakerEncoderConfig(input_dim=6, conv_channels=8, embed_dim=8, attention_heads=2,
                                               ffn_dim=16), rng)


def test_constant_input_deterministic(encoder):
    x = np.full((50, 6), 0.3)
    a = encoder.encode_sequence(x)
    assert a.shape == (50, 8)  # stride-1 convs keep T
    assert np.array_equal(a, encoder.encode_sequence(x))


def test_input_dim_mismatch(encoder):
    with pytest.raises(ShapeError, match="D=5"):
        encoder.encode_sequence(np.zeros((10, 5)))


def test_empty_reference(encoder):
    with pytest.raises(ShapeError):
        encoder.encode_sequence(np.zeros((0, 6)))


def test_microconfig_gradcheck(rng):
    assert grad_check(SpeakerEncoder(MICRO_ENCODER, rng), rng.normal(size=(9, 6))) < 1e-4


def test_pool_of_repeated_unit_row():
    v = np.array([[0.6, 0.0, -0.8]])
    emb = pool_and_normalize(np.repeat(v, 7, axis=0))
    np.testing.assert_allclose(emb.vectors, v, atol=1e-15)
    assert emb.pooled and emb.vectors.shape == (1, 3)


def test_pooled_embedding_unit_norm(encoder, rng):
    for _ in range(20):
        e = encoder.embed(rng.normal(size=(int(rng.integers(1, 40)), 6)) * 3)
        assert abs(np.linalg.norm(e.vectors) - 1.0) < 1e-6


def test_zero_pool_rejected():
    with pytest.raises(NonFiniteError):
        pool_and_normalize(np.array([[1.0, 2.0], [-1.0, -2.0]]))


def test_embedding_type_invariants():
    with pytest.raises(ShapeError):
        SpeakerEmbedding(np.ones((2, 3)) / np.sqrt(3), pooled=True)
    with pytest.raises(ValueError):
        SpeakerEmbedding(np.ones((1, 3)), pooled=True)
    SpeakerEmbedding(np.ones((4, 3)), pooled=False)


def test_config_validation():
    with pytest.raises(ConfigError):
        SpeakerEncoderConfig(embed_dim=10, attention_heads=4)
    with pytest.raises(ConfigError):
        SpeakerEncoderConfig(conv_layers=0)


def test_paper_scale_config_and_layer_counts(rng):
    paper = SpeakerEncoderConfig.paper_scale()
    assert (paper.input_dim, paper.conv_layers, paper.conv_width, paper.transformer_layers, paper.embed_dim) == (
        128, 5, 3, 8, 1024)
    # same depth at a width that fits in memory: T is preserved, E is the configured width
    narrow = SpeakerEncoderConfig(input_dim=128, conv_layers=5, conv_channels=16, transformer_layers=8,
                                  embed_dim=16, attention_heads=8, ffn_dim=32)
    enc = SpeakerEncoder(narrow, rng)
    assert len(enc.convs) == 5 and len(enc.layers) == 8
    assert enc.encode_sequence(rng.normal(size=(13, 128))).shape == (13, 16)


def test_delta_channels():
    from vtransfer.speaker_encoder import delta_forward

    x = np.array([[1.0, 2.0], [4.0, 2.0], [3.0, 5.0]])
    y, _ = delta_forward(x)
    np.testing.assert_array_equal(y, [[1, 2, 0, 0], [4, 2, 3, 0], [3, 5, 1, 3]])
