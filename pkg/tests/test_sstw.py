"""Weight-container round-trip and corruption tests."""

import struct

import numpy as np
import pytest

import sst.nn as nn
import sst.sstw as sstw
from sst.errors import ModelLoadError


def _stack(rng):
    return [
        nn.Conv2D(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), nn.SAME, "relu"),
        nn.Conv2D(rng.normal(size=(2, 2, 2, 4)), rng.normal(size=2), nn.VALID, None),
        nn.MaxPool2D(2, 2),
        nn.Flatten(),
        nn.Dense(rng.normal(size=(8, 3)), rng.normal(size=3)),
        nn.Sigmoid(),
    ]


def test_round_trip_bit_exact(rng, tmp_path):
    layers = _stack(rng)
    # make sure unrepresentable-in-text values survive
    layers[4].w[0, 0] = np.nextafter(1.0, 2.0)
    path = tmp_path / "weights.sstw"
    sstw.write_weights(path, layers)
    back = sstw.read_weights(path)
    assert len(back) == len(layers)
    for a, b in zip(layers, back):
        assert type(a) is type(b)
        for pa, pb in zip(a.params, b.params):
            assert pa.dtype == pb.dtype == np.float64
            assert np.array_equal(pa, pb)
    assert back[0].padding == nn.SAME and back[0].activation == "relu"
    assert back[1].padding == nn.VALID and back[1].activation is None
    assert (back[2].ph, back[2].pw) == (2, 2)
    # byte-level idempotence: serialize(deserialize(x)) == x
    blob = sstw.layers_to_bytes(layers)
    assert sstw.layers_to_bytes(back) == blob


def test_header_layout(rng):
    blob = sstw.layers_to_bytes(_stack(rng))
    assert blob[:4] == b"SSTW"
    version, count = struct.unpack_from("<II", blob, 4)
    assert version == 1
    assert count == 6


def test_empty_stack_round_trips():
    assert sstw.layers_from_bytes(sstw.layers_to_bytes([])) == []


def test_bad_magic_rejected():
    with pytest.raises(ModelLoadError, match="magic"):
        sstw.layers_from_bytes(b"WTSS" + b"\0" * 16)


def test_unsupported_version_rejected(rng):
    blob = bytearray(sstw.layers_to_bytes(_stack(rng)))
    blob[4:8] = struct.pack("<I", 99)
    with pytest.raises(ModelLoadError, match="version"):
        sstw.layers_from_bytes(bytes(blob))


def test_unknown_kind_tag_rejected():
    blob = b"SSTW" + struct.pack("<II", 1, 1) + struct.pack("<I", 42)
    with pytest.raises(ModelLoadError, match="kind"):
        sstw.layers_from_bytes(blob + struct.pack("<II", 0, 0))


@pytest.mark.parametrize("cut", [3, 7, 11, 40, -1])
def test_truncation_detected(rng, cut):
    blob = sstw.layers_to_bytes(_stack(rng))
    with pytest.raises(ModelLoadError, match="truncated"):
        sstw.layers_from_bytes(blob[:cut])


def test_trailing_garbage_detected(rng):
    blob = sstw.layers_to_bytes(_stack(rng))
    with pytest.raises(ModelLoadError, match="trailing"):
        sstw.layers_from_bytes(blob + b"\0")


def test_tensor_shape_mismatch_detected(rng):
    conv = nn.Conv2D(rng.normal(size=(2, 3, 3, 1)), rng.normal(size=2))
    blob = bytearray(sstw.layers_to_bytes([conv]))
    # corrupt the declared filter count but leave the tensors alone
    offset = 4 + 4 + 4 + 4 + 4  # magic, version, count, kind, nparams
    blob[offset : offset + 4] = struct.pack("<I", 3)
    with pytest.raises(ModelLoadError):
        sstw.layers_from_bytes(bytes(blob))


def test_missing_file_is_not_a_format_error(tmp_path):
    with pytest.raises(OSError):
        sstw.read_weights(tmp_path / "absent.sstw")
