"""Binary checkpoint format: round trips, byte identity, and corruption handling."""

import struct

import numpy as np
import pytest

from palmsiam.model import (
    CheckpointError,
    _checkpoint_entries,
    init_params,
    load_checkpoint,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def saved(tmp_path_factory):
    params = init_params(seed=3)
    # make every entry distinctive so a swapped/garbled field cannot hide
    rng = np.random.default_rng(30)
    for _, arr in _checkpoint_entries(params):
        if arr.ndim:
            arr += rng.normal(0.0, 0.01, arr.shape).astype(np.float32)
    params.extractor.blocks[2].running_var[:] = np.abs(params.extractor.blocks[2].running_var)
    params.calib_threshold = 0.1234
    path = tmp_path_factory.mktemp("ckpt") / "model.pvsn"
    save_checkpoint(params, path)
    return params, path


def test_round_trip_restores_every_entry(saved):
    params, path = saved
    loaded = load_checkpoint(path)
    originals = dict(_checkpoint_entries(params))
    for name, arr in _checkpoint_entries(loaded):
        np.testing.assert_array_equal(arr, originals[name], err_msg=name)
    assert loaded.calib_threshold == pytest.approx(0.1234)
    assert loaded.margin == params.margin
    assert loaded.theta0.shape == () and loaded.theta1.shape == ()
    assert all(t.requires_grad for t in (loaded.theta0, loaded.theta1))


def test_save_load_save_is_byte_identical(saved, tmp_path):
    _, path = saved
    again = tmp_path / "again.pvsn"
    save_checkpoint(load_checkpoint(path), again)
    assert path.read_bytes() == again.read_bytes()


def test_header_layout(saved):
    _, path = saved
    blob = path.read_bytes()
    assert blob[:4] == b"PVSN"
    version, count = struct.unpack_from("<II", blob, 4)
    assert version == 1
    assert count == len(_checkpoint_entries(init_params(seed=0))) + 1  # + calib.threshold
    # first entry is conv1.weight with shape 64x1x3x3
    name_len = struct.unpack_from("<H", blob, 12)[0]
    name = blob[14 : 14 + name_len].decode()
    assert name == "conv1.weight"
    code, rank = struct.unpack_from("<BB", blob, 14 + name_len)
    assert code == 0 and rank == 4
    extents = struct.unpack_from("<IIII", blob, 16 + name_len)
    assert extents == (64, 1, 3, 3)


def test_checkpoint_without_calibration(tmp_path):
    params = init_params(seed=1)
    assert params.calib_threshold is None
    path = tmp_path / "no_calib.pvsn"
    save_checkpoint(params, path)
    assert load_checkpoint(path).calib_threshold is None


def test_rejects_bad_magic(tmp_path, saved):
    _, path = saved
    bad = tmp_path / "bad.pvsn"
    bad.write_bytes(b"JUNK" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(bad)


def test_rejects_unsupported_version(tmp_path, saved):
    _, path = saved
    blob = bytearray(path.read_bytes())
    struct.pack_into("<I", blob, 4, 99)
    bad = tmp_path / "v99.pvsn"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="unsupported checkpoint version 99"):
        load_checkpoint(bad)


def test_rejects_truncation_anywhere(tmp_path, saved):
    _, path = saved
    blob = path.read_bytes()
    for cut in (2, 6, 11, 13, len(blob) // 2, len(blob) - 1):
        bad = tmp_path / f"cut{cut}.pvsn"
        bad.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError, match="truncated|bad magic"):
            load_checkpoint(bad)


def test_rejects_trailing_bytes(tmp_path, saved):
    _, path = saved
    bad = tmp_path / "trail.pvsn"
    bad.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(CheckpointError, match="trailing bytes"):
        load_checkpoint(bad)


def test_rejects_missing_entry(tmp_path):
    params = init_params(seed=2)
    entries = _checkpoint_entries(params)
    buf = bytearray(b"PVSN")
    buf += struct.pack("<II", 1, len(entries) - 1)
    for name, arr in entries[:-1]:  # drop the last entry (head.margin)
        arr32 = np.asarray(arr, dtype="<f4")
        enc = name.encode()
        buf += struct.pack("<H", len(enc)) + enc
        buf += struct.pack("<BB", 0, arr32.ndim)
        for e in arr32.shape:
            buf += struct.pack("<I", e)
        buf += arr32.tobytes()
    bad = tmp_path / "missing.pvsn"
    bad.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError, match="missing checkpoint entry head.margin"):
        load_checkpoint(bad)


def _rewrite_with_entry(src_entries, mutate_name, new_name=None, new_arr=None, duplicate=False):
    buf = bytearray(b"PVSN")
    rows = []
    for name, arr in src_entries:
        if name == mutate_name:
            name = new_name if new_name is not None else name
            arr = new_arr if new_arr is not None else arr
            rows.append((name, arr))
            if duplicate:
                rows.append((name, arr))
        else:
            rows.append((name, arr))
    buf += struct.pack("<II", 1, len(rows))
    for name, arr in rows:
        arr32 = np.asarray(arr, dtype="<f4")
        enc = name.encode()
        buf += struct.pack("<H", len(enc)) + enc
        buf += struct.pack("<BB", 0, arr32.ndim)
        for e in arr32.shape:
            buf += struct.pack("<I", e)
        buf += arr32.tobytes()
    return bytes(buf)


def test_rejects_duplicate_entry(tmp_path):
    entries = _checkpoint_entries(init_params(seed=4))
    bad = tmp_path / "dup.pvsn"
    bad.write_bytes(_rewrite_with_entry(entries, "fc6.bias", duplicate=True))
    with pytest.raises(CheckpointError, match="duplicate checkpoint entry fc6.bias"):
        load_checkpoint(bad)


def test_rejects_unexpected_entry(tmp_path):
    entries = _checkpoint_entries(init_params(seed=4))
    entries = entries + [("mystery.knob", np.zeros(2, dtype=np.float32))]
    bad = tmp_path / "extra.pvsn"
    bad.write_bytes(_rewrite_with_entry(entries, mutate_name=None))
    with pytest.raises(CheckpointError, match="unexpected checkpoint entry mystery.knob"):
        load_checkpoint(bad)


def test_rejects_shape_mismatch(tmp_path):
    entries = _checkpoint_entries(init_params(seed=4))
    bad = tmp_path / "shape.pvsn"
    bad.write_bytes(
        _rewrite_with_entry(entries, "fc6.bias", new_arr=np.zeros(64, dtype=np.float32))
    )
    with pytest.raises(CheckpointError, match=r"shape mismatch for fc6.bias: expected \(128,\), got \(64,\)"):
        load_checkpoint(bad)


def test_rejects_negative_running_variance(tmp_path):
    params = init_params(seed=4)
    params.extractor.blocks[1].running_var[3] = -0.5
    bad = tmp_path / "negvar.pvsn"
    save_checkpoint(params, bad)
    with pytest.raises(CheckpointError, match="negative variance"):
        load_checkpoint(bad)


def test_rejects_unsupported_dtype_code(tmp_path, saved):
    _, path = saved
    blob = bytearray(path.read_bytes())
    # dtype code byte of the first entry sits right after its name
    name_len = struct.unpack_from("<H", blob, 12)[0]
    blob[14 + name_len] = 7
    bad = tmp_path / "dtype.pvsn"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="unsupported dtype code 7"):
        load_checkpoint(bad)


def test_checkpoint_error_is_value_error():
    assert issubclass(CheckpointError, ValueError)
