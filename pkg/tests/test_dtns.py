"""Tensor file format and checkpoint container round trips."""

import numpy as np
import pytest

from duometa import dtns


RNG = np.random.default_rng(5)


def test_roundtrip_various_ranks(tmp_path):
    for arr in [np.float64(3.25), RNG.normal(size=7), RNG.normal(size=(3, 4)),
                RNG.normal(size=(2, 3, 4, 5))]:
        path = str(tmp_path / "t.dtns")
        dtns.save_tensor(path, np.asarray(arr))
        back = dtns.load_tensor(path)
        assert back.shape == np.asarray(arr).shape
        assert np.array_equal(back, np.asarray(arr))


def test_layout_bytes():
    buf = dtns.dumps(np.array([1.0, 2.0]))
    assert buf[:4] == b"DTNS"
    assert int.from_bytes(buf[4:8], "little") == 1     # version
    assert int.from_bytes(buf[8:12], "little") == 1    # rank
    assert int.from_bytes(buf[12:20], "little") == 2   # extent
    assert np.frombuffer(buf[20:], dtype="<f8").tolist() == [1.0, 2.0]


def test_bad_magic_names_file(tmp_path):
    path = tmp_path / "bad.dtns"
    buf = bytearray(dtns.dumps(np.ones(3)))
    buf[:4] = b"XXXX"
    path.write_bytes(bytes(buf))
    with pytest.raises(dtns.FormatError, match="bad.dtns"):
        dtns.load_tensor(str(path))


def test_bad_version(tmp_path):
    path = tmp_path / "v9.dtns"
    buf = bytearray(dtns.dumps(np.ones(3)))
    buf[4] = 9
    path.write_bytes(bytes(buf))
    with pytest.raises(dtns.FormatError, match="version"):
        dtns.load_tensor(str(path))


def test_truncated_payload(tmp_path):
    path = tmp_path / "cut.dtns"
    buf = dtns.dumps(np.ones(4))
    path.write_bytes(buf[:-8])
    with pytest.raises(dtns.FormatError, match="truncated"):
        dtns.load_tensor(str(path))


def test_save_is_deterministic(tmp_path):
    arr = RNG.normal(size=(4, 4))
    p1, p2 = str(tmp_path / "a.dtns"), str(tmp_path / "b.dtns")
    dtns.save_tensor(p1, arr)
    dtns.save_tensor(p2, arr)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_roundtrip(tmp_path):
    path = str(tmp_path / "model.ckpt")
    records = [("enc.w", "extractor", RNG.normal(size=(3, 2))),
               ("cls.b", "head-init", RNG.normal(size=4))]
    dtns.save_checkpoint(path, records, meta={"t": 17, "seed": 3})
    back, meta = dtns.load_checkpoint(path)
    assert meta == {"t": 17, "seed": 3}
    assert [(n, r) for n, r, _ in back] == [(n, r) for n, r, _ in records]
    for (_, _, a), (_, _, b) in zip(records, back):
        assert np.array_equal(a, b)


def test_checkpoint_duplicate_name(tmp_path):
    with pytest.raises(ValueError):
        dtns.save_checkpoint(str(tmp_path / "x.ckpt"),
                             [("w", "head", np.ones(2)), ("w", "head", np.ones(2))])


def test_checkpoint_bytes_deterministic(tmp_path):
    records = [("a", "extractor", RNG.normal(size=(2, 2)))]
    p1, p2 = str(tmp_path / "1.ckpt"), str(tmp_path / "2.ckpt")
    dtns.save_checkpoint(p1, records, meta={"b": 1, "a": 2})
    dtns.save_checkpoint(p2, records, meta={"a": 2, "b": 1})
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_corrupt_manifest(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not json\n" + dtns.dumps(np.ones(1)))
    with pytest.raises(dtns.FormatError):
        dtns.load_checkpoint(str(path))
