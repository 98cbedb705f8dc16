import struct

import numpy as np
import pytest

from diffnam.errors import FormatError
from diffnam.formats import (FeatureMeta, read_checkpoint, read_codebook, read_features, read_jsonl,
                             tensor_from_bytes, tensor_to_bytes, write_checkpoint, write_codebook,
                             write_features, write_jsonl)
from diffnam.models import ErrorRates


def test_tensor_block_layout():
    blob = tensor_to_bytes(np.arange(6.0).reshape(2, 3))
    assert blob[:4] == b"NAMT"
    assert struct.unpack("<III", blob[4:16]) == (2, 2, 3)
    assert len(blob) == 16 + 6 * 8
    array, offset = tensor_from_bytes(blob)
    assert offset == len(blob)
    assert np.array_equal(array, np.arange(6.0).reshape(2, 3))


def test_truncated_tensor_rejected():
    blob = tensor_to_bytes(np.ones((4, 4)))
    with pytest.raises(FormatError, match="truncated"):
        tensor_from_bytes(blob[:-3])


def test_feature_file_keeps_meta(tmp_path, rng):
    frames = rng.normal(size=(7, 5))
    path = tmp_path / "x.namf"
    write_features(path, frames, FeatureMeta(sample_rate=16000, hop=640, window=800, n_mels=5))
    loaded, meta = read_features(path)
    assert np.allclose(loaded, frames, atol=1e-6)
    assert (meta.hop, meta.window, meta.n_mels) == (640, 800, 5)


def test_feature_reader_rejects_unknown_version(tmp_path):
    path = tmp_path / "x.namf"
    write_features(path, np.ones((2, 2)), FeatureMeta(n_mels=2))
    raw = bytearray(path.read_bytes())
    raw[-8:-4] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        read_features(path)


def test_feature_reader_rejects_trailing_bytes(tmp_path):
    path = tmp_path / "x.namf"
    write_features(path, np.ones((2, 2)), FeatureMeta(n_mels=2))
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_features(path)


def test_checkpoint_is_deterministic(tmp_path):
    tensors = {"b": np.ones(3), "a": np.zeros((2, 2))}
    write_checkpoint(tmp_path / "one.namc", {"kind": "x", "n": 1}, tensors)
    write_checkpoint(tmp_path / "two.namc", {"n": 1, "kind": "x"}, dict(reversed(list(tensors.items()))))
    assert (tmp_path / "one.namc").read_bytes() == (tmp_path / "two.namc").read_bytes()
    meta, loaded = read_checkpoint(tmp_path / "one.namc")
    assert meta == {"kind": "x", "n": 1}
    assert sorted(loaded) == ["a", "b"]


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.namc"
    path.write_bytes(b"XXXX" + b"\0" * 16)
    with pytest.raises(FormatError, match="magic"):
        read_checkpoint(path)


def test_codebook_header_must_match_block(tmp_path, rng):
    path = tmp_path / "units.namk"
    write_codebook(path, rng.normal(size=(4, 3)))
    assert read_codebook(path).shape == (4, 3)
    raw = bytearray(path.read_bytes())
    raw[5:9] = struct.pack("<I", 5)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_codebook(path)


def test_jsonl_records(tmp_path):
    path = tmp_path / "rates.jsonl"
    write_jsonl(path, [ErrorRates(wer=10.0, cer=5.0, n=1, utt_id="a"), ErrorRates(wer=0.0, cer=0.0, n=1)])
    records = read_jsonl(path)
    assert records[0]["utt_id"] == "a"
    assert records[1]["wer"] == 0.0
    path.write_text("{not json}\n")
    with pytest.raises(FormatError):
        read_jsonl(path)
