import numpy as np

from mace.checkpoint import load_archive, read_manifest, save_archive


def test_round_trip_and_byte_identity(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1, 2], dtype=np.int64)}
    save_archive(tmp_path / "x.npz", arrays, {"z": 1, "a": [1, 2]})
    save_archive(tmp_path / "y.npz", arrays, {"a": [1, 2], "z": 1})
    assert (tmp_path / "x.npz").read_bytes() == (tmp_path / "y.npz").read_bytes()
    loaded, manifest = load_archive(tmp_path / "x.npz")
    assert manifest == {"z": 1, "a": [1, 2]}
    assert read_manifest(tmp_path / "x.npz") == manifest
    for k in arrays:
        np.testing.assert_array_equal(loaded[k], arrays[k])
