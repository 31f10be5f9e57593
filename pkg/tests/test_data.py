import numpy as np
import pytest

from workbench import data


@pytest.mark.parametrize("kind", data.KINDS)
def test_generators_are_seeded_and_in_box(kind):
    a = data.make_dataset(kind, 300, 1)
    b = data.make_dataset(kind, 300, 1)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert a.x.min() >= 0.0 and a.x.max() <= 1.0
    assert set(np.unique(a.y)) <= set(range(a.n_classes))
    assert not np.array_equal(a.x, data.make_dataset(kind, 300, 2).x)


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown dataset"):
        data.make_dataset("moons", 10, 0)


def test_round_trip_is_bit_exact(tmp_path):
    ds = data.make_dataset("gridpatterns64", 50, 3)
    path = tmp_path / "d.wbds"
    data.save_dataset(path, ds, "ab" * 32)
    back = data.load_dataset(path)
    assert back.x.tobytes() == ds.x.tobytes()
    assert np.array_equal(back.y, ds.y)
    assert back.n_classes == 10 and back.digest == "ab" * 32


def test_header_layout(tmp_path):
    ds = data.make_dataset("gaussians2d", 7, 0)
    path = tmp_path / "d.wbds"
    data.save_dataset(path, ds, "")
    raw = path.read_bytes()
    assert raw[:4] == b"WBDS"
    assert int.from_bytes(raw[8:12], "little") == 2
    assert int.from_bytes(raw[12:16], "little") == 7
    assert int.from_bytes(raw[16:20], "little") == 2
    assert len(raw) == 84 + 8 * 7 * 2 + 4 * 7


def test_gen_rerun_identical_file(tmp_path):
    ds = data.make_dataset("gaussians2d", 1000, 1)
    data.save_dataset(tmp_path / "a", ds)
    data.save_dataset(tmp_path / "b", data.make_dataset("gaussians2d", 1000, 1))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_corrupt_files_rejected(tmp_path):
    ds = data.make_dataset("rings2d", 10, 0)
    path = tmp_path / "d.wbds"
    data.save_dataset(path, ds)
    raw = path.read_bytes()
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(ValueError, match="does not match"):
        data.load_dataset(tmp_path / "short")
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="not a workbench"):
        data.load_dataset(tmp_path / "magic")


def test_rings_not_linearly_separable():
    # least-squares linear probe on the 2-D coordinates
    ds = data.make_dataset("rings2d", 2000, 0)
    a = np.hstack([ds.x, np.ones((len(ds), 1))])
    w, *_ = np.linalg.lstsq(a, 2.0 * ds.y - 1.0, rcond=None)
    acc = np.mean((a @ w > 0) == (ds.y == 1))
    assert acc < 0.7


def test_split_and_subset():
    ds = data.make_dataset("rings2d", 20, 0)
    a, b = ds.split(15)
    assert len(a) == 15 and len(b) == 5
    assert np.array_equal(ds.subset([0, 3]).x, ds.x[[0, 3]])
