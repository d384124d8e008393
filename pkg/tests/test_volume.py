import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tokenseg.volume import (
    HEADER_SIZE, Blob, FormatError, MaskVolume, PhantomSpec, Volume3D, ellipsoid_mask,
    generate_phantom, load_mask, load_volume, normalize_intensity, save_mask, save_volume,
)


def test_volume_roundtrip(tmp_path, rng):
    v = Volume3D(rng.normal(size=(4, 4, 4)).astype(np.float32), (0.5, 1.0, 2.0))
    save_volume(v, tmp_path / "v.tsv3")
    back = load_volume(tmp_path / "v.tsv3")
    assert back.voxels.tobytes() == v.voxels.tobytes()
    assert back.spacing == v.spacing


def test_mask_all_ones_payload(tmp_path):
    save_mask(MaskVolume(np.ones((4, 4, 4), dtype=np.uint8)), tmp_path / "m.tsv3")
    raw = (tmp_path / "m.tsv3").read_bytes()
    assert raw[HEADER_SIZE:] == bytes([1]) * 64
    assert load_mask(tmp_path / "m.tsv3").labels.sum() == 64


def test_header_layout(tmp_path):
    save_volume(Volume3D(np.zeros((2, 3, 5), np.float32)), tmp_path / "v.tsv3")
    raw = (tmp_path / "v.tsv3").read_bytes()
    assert raw[:4] == b"TSV3"
    assert struct.unpack_from("<HBB3I", raw, 4) == (1, 0, 0, 2, 3, 5)
    assert len(raw) == HEADER_SIZE + 30 * 4


def test_bad_magic(tmp_path):
    p = tmp_path / "v.tsv3"
    save_volume(Volume3D(np.zeros((2, 2, 2), np.float32)), p)
    raw = bytearray(p.read_bytes())
    raw[0:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_volume(p)


def test_payload_size_mismatch(tmp_path):
    # 2x2x2 header followed by 7 float32 scalars (28 bytes, 32 expected)
    header = struct.pack("<4sHBB3I3f", b"TSV3", 1, 0, 0, 2, 2, 2, 1.0, 1.0, 1.0)
    p = tmp_path / "short.tsv3"
    p.write_bytes(header + np.zeros(7, "<f4").tobytes())
    with pytest.raises(FormatError, match="28 bytes"):
        load_volume(p)


def test_nonfinite_voxel_reports_offset(tmp_path):
    header = struct.pack("<4sHBB3I3f", b"TSV3", 1, 0, 0, 2, 2, 2, 1.0, 1.0, 1.0)
    payload = np.zeros(8, "<f4")
    payload[3] = np.nan
    p = tmp_path / "nan.tsv3"
    p.write_bytes(header + payload.tobytes())
    with pytest.raises(FormatError, match=f"offset {HEADER_SIZE + 12}"):
        load_volume(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope.tsv3")


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError, match="cannot write"):
        save_volume(Volume3D(np.zeros((2, 2, 2))), tmp_path / "missing" / "dir" / "v.tsv3")


@given(st.tuples(*[st.integers(1, 16)] * 3), st.integers(0, 2**32 - 1))
def test_roundtrip_property(dims, seed):
    import tempfile
    from pathlib import Path

    rng = np.random.default_rng(seed)
    v = Volume3D(rng.normal(size=dims).astype(np.float32))
    m = MaskVolume(rng.integers(0, 2, size=dims))
    with tempfile.TemporaryDirectory() as d:
        save_volume(v, Path(d) / "v")
        save_mask(m, Path(d) / "m")
        assert load_volume(Path(d) / "v").voxels.tobytes() == v.voxels.tobytes()
        assert np.array_equal(load_mask(Path(d) / "m").labels, m.labels)


def test_normalize_endpoints():
    out, flag = normalize_intensity(Volume3D(np.array([0.0, 255.0, 0.0, 255.0]).reshape(1, 2, 2)))
    assert not flag
    assert sorted(set(out.voxels.ravel())) == [0.0, 1.0]


def test_normalize_constant_flags():
    out, flag = normalize_intensity(Volume3D(np.full((3, 3, 3), 7.0)))
    assert flag and not out.voxels.any()


def test_normalize_rank_order(rng):
    x = rng.normal(size=(5, 6, 7)) * 40 + 3
    out, _ = normalize_intensity(Volume3D(x))
    y = out.voxels
    assert y.min() == 0.0 and y.max() == 1.0
    assert np.array_equal(np.argsort(x, axis=None, kind="stable"),
                          np.argsort(y, axis=None, kind="stable"))


def test_normalize_idempotent(rng):
    once, _ = normalize_intensity(Volume3D(rng.random((6, 6, 6))))
    twice, _ = normalize_intensity(once)
    assert np.array_equal(once.voxels, twice.voxels)


def test_phantom_deterministic():
    spec = PhantomSpec((16, 16, 16), [Blob((8, 8, 8), (4, 5, 3), 1.0)], 0.1, 0.2, seed=9)
    a, b = generate_phantom(spec), generate_phantom(spec)
    assert a[0].voxels.tobytes() == b[0].voxels.tobytes()
    assert np.array_equal(a[1].labels, b[1].labels)


def test_phantom_sphere_volume():
    spec = PhantomSpec((32, 32, 32), [Blob((16, 16, 16), (6, 6, 6), 1.0)])
    _, m = generate_phantom(spec)
    # exhaustive voxel-in-sphere count
    count = sum(
        1 for d in range(32) for h in range(32) for w in range(32)
        if (d - 16) ** 2 + (h - 16) ** 2 + (w - 16) ** 2 <= 36
    )
    assert m.labels.sum() == count
    assert abs(count - 4 / 3 * np.pi * 216) / (4 / 3 * np.pi * 216) < 0.05


def test_phantom_matches_membership_oracle(rng):
    blobs = [Blob(tuple(rng.uniform(2, 10, 3)), tuple(rng.uniform(1.5, 4, 3)), 1.0)
             for _ in range(3)]
    _, m = generate_phantom(PhantomSpec((12, 12, 12), blobs, noise_sigma=0.3, seed=1))
    oracle = np.zeros((12, 12, 12), np.uint8)
    for d in range(12):
        for h in range(12):
            for w in range(12):
                for b in blobs:
                    r = sum(((p - c) / s) ** 2 for p, c, s in zip((d, h, w), b.center, b.radii))
                    if r <= 1.0:
                        oracle[d, h, w] = 1
    assert np.array_equal(m.labels, oracle)


def test_phantom_noise_does_not_touch_labels():
    spec = PhantomSpec((10, 10, 10), [Blob((5, 5, 5), (3, 3, 3), 1.0)], noise_sigma=0.5, seed=3)
    clean = PhantomSpec((10, 10, 10), [Blob((5, 5, 5), (3, 3, 3), 1.0)])
    assert np.array_equal(generate_phantom(spec)[1].labels, generate_phantom(clean)[1].labels)
    assert np.array_equal(generate_phantom(clean)[1].labels, ellipsoid_mask((10,) * 3, (5,) * 3, (3,) * 3))


def test_zero_blobs():
    _, m = generate_phantom(PhantomSpec((8, 8, 8)))
    assert not m.labels.any()


def test_spec_validation():
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec((8, 8, 8), [Blob((9, 1, 1), (1, 1, 1))]))
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec((8, 8, 8), noise_sigma=-1.0))
