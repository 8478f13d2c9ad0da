import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pfjm.data import (
    HU_SCALE,
    ArchiveError,
    BadMagicError,
    LengthMismatchError,
    PhantomSpec,
    TruncatedArchiveError,
    build_joint_condition,
    from_hu,
    generate_phantom,
    make_dataset,
    read_archive,
    simulate_low_dose,
    split_phases,
    to_hu,
    write_archive,
)


def test_phantom_shape_range_and_determinism():
    spec = PhantomSpec(L=32, W=24, seed=4)
    a = generate_phantom(spec)
    assert a.shape == (32, 24, 3) and a.dtype == np.float32
    assert np.all(np.isfinite(a)) and a.min() >= -1 and a.max() <= 1
    assert a.tobytes() == generate_phantom(spec).tobytes()
    assert a.tobytes() != generate_phantom(PhantomSpec(L=32, W=24, seed=5)).tobytes()


def test_phantom_rejects_tiny_sizes():
    with pytest.raises(ValueError):
        PhantomSpec(L=7, W=16)
    with pytest.raises(ValueError):
        PhantomSpec(L=16, W=4)


def test_zero_amplitudes_give_identical_phases():
    vol = generate_phantom(PhantomSpec(L=32, W=32, amplitudes=(0.0, 0.0, 0.0), seed=1))
    assert np.array_equal(vol[..., 0], vol[..., 1])
    assert np.array_equal(vol[..., 0], vol[..., 2])


@pytest.mark.parametrize("seed", range(5))
def test_cross_phase_structure(seed):
    spec = PhantomSpec(L=64, W=64, seed=seed)
    vol, vessel = generate_phantom(spec, return_vessel_mask=True)
    assert vessel.any()
    off = ~vessel
    corr = np.corrcoef(vol[..., 0][off], vol[..., 1][off])[0, 1]
    assert corr > 0.99
    for k in (1, 2):
        delta = to_hu(vol[..., k][vessel] - vol[..., 0][vessel]).mean()
        assert delta == pytest.approx(spec.amplitudes[k] * HU_SCALE, abs=1.0)
    # arterial brightest, venous intermediate
    means = [vol[..., k][vessel].mean() for k in range(3)]
    assert means[1] > means[2] > means[0]


@pytest.mark.parametrize("dose", [1.0, 0.25, 0.1])
def test_noise_calibration(dose):
    base = 10 / HU_SCALE
    y = np.zeros((1000, 1000), dtype=np.float64)
    c = simulate_low_dose(y, dose, base, np.random.default_rng(int(dose * 100)))
    resid = c - y
    assert resid.std() == pytest.approx(base / np.sqrt(dose), rel=0.01)
    se = resid.std() / np.sqrt(resid.size)
    assert abs(resid.mean()) < 3 * se


def test_low_dose_errors():
    with pytest.raises(ValueError):
        simulate_low_dose(np.zeros(4), 0.0, 0.01, np.random.default_rng(0))
    with pytest.raises(ValueError):
        simulate_low_dose(np.zeros(4), 1.5, 0.01, np.random.default_rng(0))


def test_joint_condition_round_trip():
    rng = np.random.default_rng(0)
    c1, c2, c3 = (rng.standard_normal((5, 6)) for _ in range(3))
    joint = build_joint_condition(c1, c2, c3)
    assert joint.shape == (5, 6, 3)
    assert np.array_equal(joint[..., 0], c1)
    for a, b in zip(split_phases(joint), (c1, c2, c3)):
        assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        build_joint_condition(c1, c2, c3[:4])
    with pytest.raises(ValueError):
        split_phases(np.zeros((4, 4, 2)))


def test_hu_mapping():
    assert to_hu(1.0) == 1024 and to_hu(-1.0) == -1024
    assert from_hu(512.0) == 0.5


def test_make_dataset_pairs_and_seeding():
    spec = PhantomSpec(L=16, W=16)
    rt, ld = make_dataset(spec, 3, 0.1, 10 / HU_SCALE, seed=7)
    assert rt.shape == ld.shape == (3, 16, 16, 3)
    rt2, ld2 = make_dataset(spec, 3, 0.1, 10 / HU_SCALE, seed=7)
    assert rt.tobytes() == rt2.tobytes() and ld.tobytes() == ld2.tobytes()
    assert not np.array_equal(rt[0], rt[1])
    with pytest.raises(ValueError):
        make_dataset(spec, 0, 0.1, 0.01, seed=0)


def test_scalar_one_payload_bytes(tmp_path):
    path = tmp_path / "one.pfjm"
    write_archive(path, {"x": np.float32(1.0)})
    blob = path.read_bytes()
    assert blob[:8] == b"PFJMTNSR"
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen])
    assert header["entries"] == [{"name": "x", "dtype": "f32", "shape": []}]
    assert header["version"] == 1
    assert blob[12 + hlen:] == bytes([0x00, 0x00, 0x80, 0x3F])


@settings(max_examples=40, deadline=None)
@given(arrays=st.lists(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5),
                                  elements=st.floats(allow_nan=False, allow_infinity=False, width=32)),
                       min_size=1, max_size=4))
def test_archive_round_trip_bit_exact(tmp_path_factory, arrays):
    path = tmp_path_factory.mktemp("arc") / "t.pfjm"
    tensors = {f"t{i}": a for i, a in enumerate(arrays)}
    write_archive(path, tensors, {"note": "x", "n": len(arrays)})
    back, meta = read_archive(path)
    assert meta == {"note": "x", "n": len(arrays)}
    assert list(back) == list(tensors)
    for k, a in tensors.items():
        assert back[k].shape == a.shape
        assert back[k].tobytes() == np.ascontiguousarray(a, dtype="<f4").tobytes()


def _valid_archive(tmp_path):
    path = tmp_path / "a.pfjm"
    write_archive(path, {"a": np.arange(6, dtype=np.float32).reshape(2, 3)})
    return path, path.read_bytes()


def test_bad_magic(tmp_path):
    path, blob = _valid_archive(tmp_path)
    path.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(BadMagicError, match="bad magic"):
        read_archive(path)
    path.write_bytes(b"PF")
    with pytest.raises(BadMagicError):
        read_archive(path)


def test_truncated_payload(tmp_path):
    path, blob = _valid_archive(tmp_path)
    path.write_bytes(blob[:-3])
    with pytest.raises(TruncatedArchiveError, match="truncated"):
        read_archive(path)
    path.write_bytes(blob[:10])
    with pytest.raises(TruncatedArchiveError):
        read_archive(path)
    path.write_bytes(blob[:20])
    with pytest.raises(TruncatedArchiveError):
        read_archive(path)


def test_length_disagreement(tmp_path):
    path, blob = _valid_archive(tmp_path)
    path.write_bytes(blob + b"\x00\x00\x00\x00")
    with pytest.raises(LengthMismatchError, match="disagreement"):
        read_archive(path)


def test_error_types_are_distinct():
    assert len({BadMagicError, TruncatedArchiveError, LengthMismatchError}) == 3
    for cls in (BadMagicError, TruncatedArchiveError, LengthMismatchError):
        assert issubclass(cls, ArchiveError)
        assert not any(issubclass(cls, o) for o in (BadMagicError, TruncatedArchiveError, LengthMismatchError)
                       if o is not cls)


def test_malformed_header(tmp_path):
    path = tmp_path / "h.pfjm"
    header = b"{not json"
    path.write_bytes(b"PFJMTNSR" + struct.pack("<I", len(header)) + header)
    with pytest.raises(ArchiveError, match="malformed"):
        read_archive(path)


def test_write_rejects_non_finite(tmp_path):
    with pytest.raises(ValueError):
        write_archive(tmp_path / "n.pfjm", {"a": np.array([np.nan], dtype=np.float32)})
    assert not (tmp_path / "n.pfjm").exists()
