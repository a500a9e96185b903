import numpy as np
import pytest

from flowseg import datamodel as dm
from flowseg.errors import CapacityError, ContractError, FormatError


def test_read_pgm_image_scaling(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    img = dm.read_pgm(path)
    assert isinstance(img, dm.Image)
    # 2x2 grids are below the 8px floor for constructed Images? read path returns as stored
    expected = np.array([[0, 255], [128, 64]], dtype=np.float64) / 255.0
    np.testing.assert_allclose(img.data, expected.astype(np.float32))


def test_read_pgm_mask_relabels_contiguously(tmp_path):
    path = tmp_path / "m.pgm"
    payload = np.array([[0, 5], [5, 9]], dtype=">u2").tobytes()
    path.write_bytes(b"P5\n2 2\n65535\n" + payload)
    msk = dm.read_pgm(path)
    assert isinstance(msk, dm.InstanceMask)
    np.testing.assert_array_equal(msk.labels, [[0, 1], [1, 2]])


def test_read_pgm_truncated_payload_reports_counts(tmp_path):
    path = tmp_path / "t.pgm"
    path.write_bytes(b"P5\n4 4\n255\n" + bytes(7))
    with pytest.raises(FormatError, match="expected 16 bytes, got 7"):
        dm.read_pgm(path)


def test_read_pgm_rejects_bad_magic_and_maxval(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    with pytest.raises(FormatError, match="byte 0"):
        dm.read_pgm(p)
    p.write_bytes(b"P5\n2 2\n4095\n" + bytes(8))
    with pytest.raises(FormatError, match="maxval"):
        dm.read_pgm(p)


def test_write_pgm_round_half_up(tmp_path):
    img = dm.Image(np.full((8, 8), 0.5, dtype=np.float32))
    path = tmp_path / "h.pgm"
    dm.write_pgm(img, path)
    raw = path.read_bytes()
    assert raw.endswith(bytes([128] * 64))


def test_mask_pgm_round_trip_identity(tmp_path):
    rng = np.random.default_rng(0)
    for trial in range(10):
        labels = rng.integers(0, 5, size=(12, 9)).astype(np.uint32)
        msk = dm.InstanceMask.from_raw(labels)
        path = tmp_path / f"m{trial}.pgm"
        dm.write_pgm(msk, path)
        back = dm.read_pgm(path)
        np.testing.assert_array_equal(back.labels, msk.labels)


def test_image_pgm_round_trip_on_quantized_values(tmp_path):
    rng = np.random.default_rng(1)
    data = rng.integers(0, 256, size=(8, 8)).astype(np.float32) / 255.0
    img = dm.Image(data)
    path = tmp_path / "q.pgm"
    dm.write_pgm(img, path)
    back = dm.read_pgm(path)
    np.testing.assert_array_equal(back.data, img.data)


def test_write_pgm_mask_capacity(tmp_path):
    msk = dm.InstanceMask.from_raw(np.arange(70000, dtype=np.uint32).reshape(200, 350))
    with pytest.raises(CapacityError):
        dm.write_pgm(msk, tmp_path / "big.pgm")


def test_write_pgm_unwritable_path():
    img = dm.Image(np.zeros((8, 8), dtype=np.float32))
    with pytest.raises(OSError):
        dm.write_pgm(img, "/nonexistent_dir_zzz/x.pgm")


def test_relabel_idempotent():
    rng = np.random.default_rng(2)
    for _ in range(20):
        raw = rng.integers(0, 7, size=(10, 10)).astype(np.uint32) * rng.integers(1, 4)
        once = dm.relabel(raw)
        np.testing.assert_array_equal(dm.relabel(once), once)


def test_mask_invariant_rejects_gaps():
    with pytest.raises(ContractError):
        dm.InstanceMask(np.array([[0, 2], [2, 2]], dtype=np.uint32))


def test_empty_checkpoint_is_twelve_bytes(tmp_path):
    path = tmp_path / "empty.madc"
    dm.write_tensors(path, {})
    assert path.stat().st_size == 12


def test_single_tensor_container_byte_accounting(tmp_path):
    # 12 header + 4 name-len + 1 name + 4 ndim + 16 dims + 16 payload = 53
    path = tmp_path / "w.madc"
    dm.write_tensors(path, {"w": np.zeros((2, 2), dtype=np.float32)})
    assert path.stat().st_size == 53


def test_container_rejects_corrupt_magic(tmp_path):
    path = tmp_path / "bad.madc"
    dm.write_tensors(path, {"w": np.zeros(3, dtype=np.float32)})
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        dm.read_tensors(path)


def test_container_rejects_bad_version(tmp_path):
    path = tmp_path / "v.madc"
    dm.write_tensors(path, {})
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        dm.read_tensors(path)


def test_tensor_round_trip_property():
    rng = np.random.default_rng(3)
    import tempfile, os

    for trial in range(15):
        tensors = {}
        for i in range(rng.integers(1, 5)):
            ndim = int(rng.integers(0, 4))
            shape = tuple(int(rng.integers(1, 5)) for _ in range(ndim))
            tensors[f"t{i}"] = rng.normal(size=shape).astype(np.float32)
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "x.madc")
            dm.write_tensors(path, tensors)
            back = dm.read_tensors(path)
        assert set(back) == set(tensors)
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k])
            assert back[k].dtype == np.float32


def test_tensors_serialized_in_name_order(tmp_path):
    path = tmp_path / "o.madc"
    dm.write_tensors(path, {"b": np.zeros(1, np.float32), "a": np.ones(1, np.float32)})
    raw = path.read_bytes()
    assert raw.index(b"a") < raw.index(b"b")


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    params = {"enc.0.conv1.w": rng.normal(size=(3, 3, 1, 4)).astype(np.float32),
              "head.b": rng.normal(size=4).astype(np.float32)}
    opt = {"enc.0.conv1.w.m": rng.normal(size=(3, 3, 1, 4)).astype(np.float32), "t": np.array([7], np.float32)}
    ck = dm.Checkpoint(params=params, opt=opt, config_digest=bytes(range(32)), epoch=12,
                       meta={"levels": 2, "base_channels": 16})
    path = tmp_path / "ck.madc"
    dm.save_checkpoint(ck, path)
    back = dm.load_checkpoint(path)
    assert back.epoch == 12
    assert back.config_digest == bytes(range(32))
    assert back.meta == {"levels": 2, "base_channels": 16}
    assert set(back.params) == set(params)
    for k in params:
        np.testing.assert_array_equal(back.params[k], params[k])
    for k in opt:
        np.testing.assert_array_equal(back.opt[k], opt[k])


def test_image_invariants():
    with pytest.raises(ContractError):
        dm.Image(np.full((4, 4), 0.5, dtype=np.float32))  # below 8px floor
    with pytest.raises(ContractError):
        dm.Image(np.full((8, 8), 1.5, dtype=np.float32))
    with pytest.raises(ContractError):
        dm.Image(np.full((8, 8), np.nan, dtype=np.float32))


def test_dataset_invariants():
    img = dm.Image(np.zeros((8, 8), dtype=np.float32))
    msk = dm.InstanceMask(np.zeros((9, 8), dtype=np.uint32))
    with pytest.raises(ContractError):
        dm.Dataset(items=[(img, msk)], name="x")
    with pytest.raises(ContractError):
        dm.Dataset(items=[], name="x")
