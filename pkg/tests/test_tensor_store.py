import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_tensor
from morfi.errors import ValidationError
from morfi.tensor_store import (
    HEADER_SIZE,
    MAGIC,
    ActivationTensor,
    AxisShapeMismatchError,
    BadMagicError,
    TensorFormatError,
    TokenActivationBatch,
    TruncatedPayloadError,
    VersionMismatchError,
    _decode,
    _encode,
    bos_mask,
    import_checkpoint_dir,
    load_tensor,
    masked_mean_fold,
    mean_fold,
    write_tensor,
)


def test_roundtrip_file(tmp_path, small_tensor):
    path = tmp_path / "t.bin"
    write_tensor(small_tensor, path)
    back = load_tensor(path)
    assert back.equals(small_tensor)
    assert back.data.dtype == np.float64


def test_file_layout_header(small_tensor):
    buf = _encode(small_tensor)
    assert buf[:8] == MAGIC
    version, code, T, P, F, N = struct.unpack_from("<II4Q", buf, 8)
    assert (version, code, T, P, F, N) == (1, 2, 3, 4, 5, 6)
    assert buf[48:64] == b"\0" * 16
    ids = sum(4 + len(f"id{i}") for i in range(6))
    assert len(buf) == HEADER_SIZE + 8 * (3 + 4) + ids + 3 * 4 * 5 * 6 * 8


def test_float32_roundtrip_preserves_dtype():
    t = make_tensor(dtype="float32")
    back = _decode(_encode(t))
    assert back.data.dtype == np.float32 and back.equals(t)


@settings(max_examples=40, deadline=None)
@given(
    shape=st.tuples(*(st.integers(1, 4) for _ in range(4))),
    seed=st.integers(0, 2**32 - 1),
    dtype=st.sampled_from(["float32", "float64"]),
    uid=st.text(max_size=5),
)
def test_roundtrip_property(shape, seed, dtype, uid):
    t = make_tensor(shape, seed, dtype)
    t = ActivationTensor(t.data, t.epoch_axis, t.mixture_axis, [uid + str(i) for i in range(shape[3])])
    buf = _encode(t)
    assert _decode(buf).equals(t)
    assert _encode(_decode(buf)) == buf


def test_bad_magic(small_tensor):
    buf = bytearray(_encode(small_tensor))
    buf[0] ^= 0xFF
    with pytest.raises(BadMagicError):
        _decode(bytes(buf))


def test_version_mismatch(small_tensor):
    buf = bytearray(_encode(small_tensor))
    struct.pack_into("<I", buf, 8, 2)
    with pytest.raises(VersionMismatchError):
        _decode(bytes(buf))


@pytest.mark.parametrize("cut", [10, 63, 64, 80, -1])
def test_truncation(small_tensor, cut):
    buf = _encode(small_tensor)
    with pytest.raises(TruncatedPayloadError):
        _decode(buf[:cut])


def test_trailing_bytes_are_shape_mismatch(small_tensor):
    with pytest.raises(AxisShapeMismatchError):
        _decode(_encode(small_tensor) + b"\0" * 8)


def test_reserved_bytes_must_be_zero(small_tensor):
    buf = bytearray(_encode(small_tensor))
    buf[50] = 1
    with pytest.raises(TensorFormatError):
        _decode(bytes(buf))


def test_errors_are_validation_errors():
    assert issubclass(TensorFormatError, ValidationError)


def test_constructor_validation():
    good = make_tensor()
    with pytest.raises(AxisShapeMismatchError):
        ActivationTensor(good.data, [1, 2], good.mixture_axis, good.sample_ids)
    with pytest.raises(AxisShapeMismatchError):
        ActivationTensor(good.data, [3, 2, 1], good.mixture_axis, good.sample_ids)
    with pytest.raises(ValidationError):
        ActivationTensor(good.data[0], good.epoch_axis, good.mixture_axis, good.sample_ids)
    bad = np.array(good.data)
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        ActivationTensor(bad, good.epoch_axis, good.mixture_axis, good.sample_ids)
    with pytest.raises(ValidationError):
        ActivationTensor(good.data.astype(np.int32), good.epoch_axis, good.mixture_axis, good.sample_ids)


def test_tensor_is_read_only(small_tensor):
    with pytest.raises(ValueError):
        small_tensor.data[0, 0, 0, 0] = 1.0


def test_axis_labels(small_tensor):
    assert small_tensor.axis_labels("epochs").tolist() == [5, 10, 15]
    with pytest.raises(ValidationError):
        small_tensor.axis_labels("latents")


def test_bos_mask_and_masked_mean():
    mask = bos_mask([0, 1], [3, 2], 4)
    assert mask[:, :, 0].tolist() == [[False, True, True, False], [False, False, True, False]]
    values = np.arange(2 * 4 * 2, dtype=float).reshape(2, 4, 2)
    got = masked_mean_fold(TokenActivationBatch(values, mask))
    np.testing.assert_allclose(got, [[(2 + 4) / 2, (3 + 5) / 2], [12, 13]])


def test_masked_mean_excludes_masked_positions():
    values = np.ones((1, 3, 1))
    values[0, 0, 0] = 1000.0
    got = masked_mean_fold(TokenActivationBatch(values, np.array([[False, True, True]])))
    assert got[0, 0] == 1.0


def test_masked_mean_empty_mask_names_sample():
    batch = TokenActivationBatch(np.ones((3, 2, 1)), np.array([[1, 1], [1, 0], [0, 0]], dtype=bool))
    with pytest.raises(ValidationError, match="sample 2"):
        masked_mean_fold(batch)


def test_mean_fold():
    a = np.arange(24.0).reshape(2, 3, 4)
    np.testing.assert_array_equal(mean_fold(a, 1), a.mean(axis=1))
    with pytest.raises(ValidationError):
        mean_fold(a, 3)


def test_import_checkpoint_dir(tmp_path):
    rng = np.random.default_rng(1)
    N, F = 3, 4
    expected = np.zeros((2, 3, F, N), dtype=np.float32)
    for i, e in enumerate((1, 2)):
        for j, p in enumerate((0, 50, 100)):
            mat = rng.random((N, F), dtype=np.float32)
            mat.tofile(tmp_path / f"e{e}_p{p}.bin")
            expected[i, j] = mat.T
    (tmp_path / "sample_ids.txt").write_text("a\nb\nc\n")
    t = import_checkpoint_dir(tmp_path, F)
    np.testing.assert_array_equal(t.data, expected)
    assert t.sample_ids == ("a", "b", "c")
    assert t.mixture_axis.tolist() == [0, 50, 100]


def test_import_checkpoint_dir_incomplete(tmp_path):
    np.zeros((2, 2), dtype=np.float32).tofile(tmp_path / "e1_p0.bin")
    np.zeros((2, 2), dtype=np.float32).tofile(tmp_path / "e2_p10.bin")
    with pytest.raises(ValidationError, match="incomplete"):
        import_checkpoint_dir(tmp_path, 2)
