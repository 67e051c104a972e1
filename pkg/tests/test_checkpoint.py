import struct

import numpy as np
import pytest

from vtransfer import checkpoint
from vtransfer.checkpoint import CheckpointError
from vtransfer.model import VoiceTransferTTS
from vtransfer.nn import ShapeError

from .conftest import tiny_model_config


def handmade(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    return (b"VTCK" + struct.pack("<III", 1, 1, len(raw)) + raw + struct.pack("<I", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.astype("<f4").tobytes())


def test_layout_is_bit_exact():
    arr = np.arange(6, dtype=np.float64).reshape(2, 3) / 4
    assert checkpoint.dumps({"bank.vectors": arr}) == handmade("bank.vectors", arr)


def test_round_trip_unicode_and_scalars(tmp_path):
    tensors = {"a": np.ones((2, 2, 2)), "β.weight": np.array([1.5]), "empty": np.zeros((0, 3))}
    checkpoint.save(tmp_path / "x.vtck", tensors)
    back = checkpoint.load(tmp_path / "x.vtck")
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k].astype(np.float32))


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing"),
])
def test_corruption_detected(mutate, match):
    data = checkpoint.dumps({"w": np.ones((3, 2))})
    with pytest.raises(CheckpointError, match=match):
        checkpoint.loads(mutate(data))


def test_model_round_trip_preserves_synthesis(tmp_path):
    path = tmp_path / "m.vtck"
    checkpoint.save(path, checkpoint.state_dict(VoiceTransferTTS(tiny_model_config(), seed=3)))
    ref = np.random.default_rng(0).normal(size=(20, 12))
    outs = []
    for seed in (5, 99):  # different random init, same loaded weights
        m = VoiceTransferTTS(tiny_model_config(), seed=seed)
        checkpoint.load_into(m, checkpoint.load(path))
        outs.append(m.synthesize([1, 2, 3], ref).features)
    np.testing.assert_array_equal(*outs)


def test_load_into_strict_and_shape_errors():
    model = VoiceTransferTTS(tiny_model_config(), seed=0)
    state = checkpoint.state_dict(model)
    missing = dict(list(state.items())[1:])
    with pytest.raises(CheckpointError, match="missing"):
        checkpoint.load_into(model, missing)
    name = next(iter(state))
    with pytest.raises(ShapeError, match=name):
        checkpoint.load_into(model, state | {name: np.zeros((1, 1, 1, 1))})
