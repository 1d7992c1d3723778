import json
import struct

import numpy as np
import pytest

from tasseg import io
from tasseg.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from tasseg.synthetic import GeneratorConfig, class_names, generate_synthetic


def test_feature_file_layout(tmp_path, rng):
    x = rng.normal(size=(7, 3)).astype(np.float32)
    path = tmp_path / "a.bin"
    io.write_features(path, x)
    raw = path.read_bytes()
    assert raw[:8] == b"TASFEAT\0"
    assert struct.unpack_from("<III", raw, 8) == (1, 7, 3)
    assert np.array_equal(io.read_features(path), x)


def test_feature_file_rejects_corruption(tmp_path):
    path = tmp_path / "a.bin"
    io.write_features(path, np.ones((4, 2)))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(io.DatasetError):
        io.read_features(path)
    path.write_bytes(b"garbage!" + bytes(12))
    with pytest.raises(io.DatasetError):
        io.read_features(path)


def test_mapping_labels_and_kv(tmp_path):
    names = class_names(4)
    io.write_mapping(tmp_path / "m.txt", names)
    assert (tmp_path / "m.txt").read_text().splitlines()[1] == f"1 {names[1]}"
    assert io.read_mapping(tmp_path / "m.txt") == names
    io.write_labels(tmp_path / "g.txt", [0, 0, 3], names)
    assert io.read_labels(tmp_path / "g.txt", names).tolist() == [0, 0, 3]
    (tmp_path / "bad.txt").write_text("nonsense\n")
    with pytest.raises(io.DatasetError):
        io.read_labels(tmp_path / "bad.txt", names)
    (tmp_path / "c.cfg").write_text("# header\na = 1\n\nb=two  # note\n")
    assert io.read_kv(tmp_path / "c.cfg") == {"a": "1", "b": "two"}
    (tmp_path / "d.cfg").write_text("no equals sign\n")
    with pytest.raises(io.DatasetError):
        io.read_kv(tmp_path / "d.cfg")


def test_config_hash_stable_and_sensitive():
    assert io.config_hash({"a": 1, "b": 2}) == io.config_hash({"b": 2, "a": 1})
    assert io.config_hash({"a": 1}) != io.config_hash({"a": 2})


def test_dataset_round_trip(tmp_path):
    vids = generate_synthetic(GeneratorConfig(num_videos=5, mean_frames=40))
    names = class_names(15)
    io.save_dataset(tmp_path, vids, names, folds=4, seed=0)
    loaded, loaded_names = io.load_dataset(tmp_path)
    assert loaded_names == names
    for a, b in zip(vids, loaded):
        assert a.id == b.id
        assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    test_ids = [i for k in range(1, 5) for i in io.read_split(tmp_path, "test", k)]
    assert sorted(test_ids) == sorted(v.id for v in vids)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["num_classes"] == 15 and len(manifest["videos"]) == 5
    with pytest.raises(io.DatasetError):
        io.load_video(tmp_path, "missing")
    with pytest.raises(io.DatasetError):
        io.read_split(tmp_path, "test", 9)


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"b": rng.normal(size=(3,)), "a.w": rng.normal(size=(2, 4, 5)), "s": np.array(2.0)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tensors, {"seed": 3, "config_hash": "abc"})
    back, meta = load_checkpoint(path)
    assert meta == {"seed": 3, "config_hash": "abc"}
    assert set(back) == set(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k].astype(np.float32))
    save_checkpoint(tmp_path / "m2.ckpt", dict(reversed(list(tensors.items()))),
                    {"config_hash": "abc", "seed": 3})
    assert path.read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_rejects_bad_files(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    save_checkpoint(path, {"a": np.ones(2)})
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
