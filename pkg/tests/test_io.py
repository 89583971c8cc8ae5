"""Binary checkpoint and dataset formats."""

import numpy as np
import pytest

from fedmenu import io as fio
from fedmenu.network import MenuNet, NetworkConfig
from fedmenu.synthdata import DatasetSpec, generate


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "subenc1/level1_conv1/weight": rng.normal(size=(4, 1, 3, 3)),
            "subenc1/level1_conv1/bias": rng.normal(size=4),
            "decoder/final/weight": rng.normal(size=(4, 2, 1, 1)),
            "scalarish": rng.normal(size=(1,)),
        }
        path = tmp_path / "model.ckpt"
        fio.write_checkpoint(path, arrays)
        loaded = fio.read_checkpoint(path)
        assert list(loaded.keys()) == list(arrays.keys())
        for name in arrays:
            assert loaded[name].dtype == np.float64
            assert loaded[name].shape == arrays[name].shape
            assert np.array_equal(loaded[name], arrays[name])

    def test_round_trip_through_parameter_set(self, tmp_path):
        net = MenuNet(NetworkConfig(num_organs=2, levels=2, base_channels=2,
                                    agd_levels=(1,)))
        params = net.build(9)
        path = tmp_path / "net.ckpt"
        fio.write_checkpoint(path, params.to_arrays())
        restored = net.build(10)
        restored.load_arrays(fio.read_checkpoint(path))
        assert restored.checksum() == params.checksum()

    def test_extreme_values_survive(self, tmp_path):
        arrays = {"x": np.array([0.0, -0.0, 1e-308, 1e308, np.pi])}
        path = tmp_path / "x.ckpt"
        fio.write_checkpoint(path, arrays)
        got = fio.read_checkpoint(path)["x"]
        assert got.tobytes() == arrays["x"].astype("<f8").tobytes()

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(fio.FormatError):
            fio.read_checkpoint(path)

    def test_rejects_truncation(self, tmp_path):
        path = tmp_path / "model.ckpt"
        fio.write_checkpoint(path, {"a": np.ones((3, 3))})
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(fio.FormatError):
            fio.read_checkpoint(path)

    def test_rejects_unknown_version(self, tmp_path):
        path = tmp_path / "model.ckpt"
        fio.write_checkpoint(path, {"a": np.ones(2)})
        data = bytearray(path.read_bytes())
        data[4] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(fio.FormatError):
            fio.read_checkpoint(path)


class TestDataset:
    def _dataset(self):
        return generate(DatasetSpec(num_samples=5, image_size=(64, 64),
                                    labeled_set=frozenset({2}), seed=4))

    def test_round_trip_bit_exact(self, tmp_path):
        ds = self._dataset()
        path = tmp_path / "client.fmds"
        fio.write_dataset(path, ds)
        back = fio.read_dataset(path)
        assert back.num_organs == ds.num_organs
        assert back.labeled_set == ds.labeled_set
        assert back.splits == ds.splits
        for i in range(len(ds)):
            assert back.images[i].tobytes() == \
                ds.images[i].astype("<f8").tobytes()
            assert np.array_equal(back.full_labels[i], ds.full_labels[i])
            assert np.array_equal(back.visible_labels[i], ds.visible_labels[i])

    def test_double_round_trip_identical_bytes(self, tmp_path):
        ds = self._dataset()
        p1 = tmp_path / "a.fmds"
        p2 = tmp_path / "b.fmds"
        fio.write_dataset(p1, ds)
        fio.write_dataset(p2, fio.read_dataset(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.fmds"
        path.write_bytes(b"XXXX" + b"\x00" * 40)
        with pytest.raises(fio.FormatError):
            fio.read_dataset(path)

    def test_rejects_truncation(self, tmp_path):
        ds = self._dataset()
        path = tmp_path / "c.fmds"
        fio.write_dataset(path, ds)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(fio.FormatError):
            fio.read_dataset(path)
