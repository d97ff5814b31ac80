import numpy as np
import pytest

from ctrlvid import ckpt


class TestArchive:
    def test_pack_unpack_round_trip(self):
        tensors = {
            "a/weight": np.arange(12, dtype=np.float32).reshape(3, 4),
            "b/bias": np.array([1.5, -2.5], dtype=np.float64),
            "c/flag": np.array([1, 0, 1], dtype=np.uint8),
        }
        out = ckpt.unpack_tensors(ckpt.pack_tensors(tensors))
        assert set(out) == set(tensors)
        for name in tensors:
            assert out[name].dtype == tensors[name].dtype
            assert np.array_equal(out[name], tensors[name])

    def test_same_tensors_same_bytes(self):
        tensors = {"x": np.random.default_rng(0).random((5, 5))}
        assert ckpt.pack_tensors(tensors) == ckpt.pack_tensors(dict(tensors))

    def test_save_load_save_identical_bytes(self, tmp_path):
        tensors = {"w": np.random.default_rng(1).random((4, 4)).astype(np.float32)}
        p1, p2 = tmp_path / "a.ntar", tmp_path / "b.ntar"
        ckpt.save_tensors(p1, tensors)
        loaded = ckpt.load_tensors(p1)
        ckpt.save_tensors(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_hash_mismatch_refused(self, tmp_path):
        path = tmp_path / "x.ntar"
        ckpt.save_tensors(path, {"w": np.zeros(3)})
        with pytest.raises(ValueError, match="hash mismatch"):
            ckpt.load_tensors(path, expect_hash="0" * 64)

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError, match="bad magic"):
            ckpt.unpack_tensors(b"NOPE" + b"\x00" * 32)


class TestHashes:
    def test_tree_hash_covers_all_files(self, tmp_path):
        (tmp_path / "sub").mkdir()
        (tmp_path / "a.txt").write_text("hello")
        (tmp_path / "sub" / "b.txt").write_text("world")
        hashes = ckpt.tree_hash(tmp_path)
        assert set(hashes) == {"a.txt", "sub/b.txt"}

    def test_write_json_atomic_and_stable(self, tmp_path):
        path = tmp_path / "m.json"
        ckpt.write_json(path, {"b": 1, "a": [1, 2]})
        first = path.read_bytes()
        ckpt.write_json(path, {"a": [1, 2], "b": 1})
        assert path.read_bytes() == first
        assert ckpt.read_json(path) == {"a": [1, 2], "b": 1}
