import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eventgpt.checkpoint import CheckpointError, file_digest, load_checkpoint, load_manifest, save_checkpoint

names = st.text(alphabet="abcdefghij._0123456789", min_size=1, max_size=12)
shapes = st.lists(st.integers(0, 5), min_size=0, max_size=3)


@settings(max_examples=200, deadline=None)
@given(spec=st.dictionaries(names, shapes, min_size=0, max_size=6), seed=st.integers(0, 2**31 - 1))
def test_round_trip_bit_exact(spec, seed, tmp_path_factory):
    rng = np.random.default_rng(seed)
    arrays = {k: (rng.standard_normal(s) * 10.0 ** rng.integers(-30, 30)).astype(np.float32) for k, s in spec.items()}
    d = tmp_path_factory.mktemp("ck")
    save_checkpoint(d, arrays)
    back = load_checkpoint(d)
    assert sorted(back) == sorted(arrays)
    for k, a in arrays.items():
        assert back[k].shape == a.shape and back[k].dtype == np.float32
        assert back[k].tobytes() == a.tobytes()


def test_special_values_survive(tmp_path):
    a = np.array([np.inf, -np.inf, -0.0, np.finfo(np.float32).tiny / 2, 3.0e38], dtype=np.float32)
    save_checkpoint(tmp_path, {"x": a})
    assert load_checkpoint(tmp_path)["x"].tobytes() == a.tobytes()


def test_layout_is_sorted_little_endian(tmp_path):
    save_checkpoint(tmp_path, {"b": np.array([2.0], np.float32), "a": np.array([1.0, 1.5], np.float32)})
    man = load_manifest(tmp_path)
    assert [e["name"] for e in man["tensors"]] == ["a", "b"]
    assert [e["offset"] for e in man["tensors"]] == [0, 8]
    raw = (tmp_path / "params.bin").read_bytes()
    assert raw == np.array([1.0, 1.5, 2.0], dtype="<f4").tobytes()


def test_digest_tracks_content(tmp_path):
    save_checkpoint(tmp_path / "a", {"w": np.zeros(3, np.float32)})
    save_checkpoint(tmp_path / "b", {"w": np.zeros(3, np.float32)})
    save_checkpoint(tmp_path / "c", {"w": np.ones(3, np.float32)})
    assert file_digest(tmp_path / "a") == file_digest(tmp_path / "b") != file_digest(tmp_path / "c")


def test_missing_and_truncated_files(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
    save_checkpoint(tmp_path, {"w": np.ones(4, np.float32)})
    (tmp_path / "params.bin").write_bytes(b"\0" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_unsupported_dtype(tmp_path):
    save_checkpoint(tmp_path, {"w": np.ones(1, np.float32)})
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["tensors"][0]["dtype"] = "float16"
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(CheckpointError, match="dtype"):
        load_checkpoint(tmp_path)
