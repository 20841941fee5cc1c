import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from openvox.errors import CorruptionError, DimensionError, FormatError, ValidationError
from openvox.geometry import VoxelSet
from openvox.instance_map import Instance, InstanceMap
from openvox.semantics import SemanticFeature, quality
from openvox.synthbench import NoiseModel, default_intrinsics, make_scene, orbit_trajectory, render_frame
from openvox.tensor_io import (
    decode_tensor,
    encode_tensor,
    load_frame,
    load_map,
    load_table,
    read_tensor,
    save_frame,
    save_map,
    save_table,
    write_tensor,
)


def header(code, dims):
    return b"DTEN" + bytes([1, code, len(dims)]) + b"".join(struct.pack("<I", d) for d in dims)


def test_three_floats_from_hand_built_bytes(tmp_path):
    p = tmp_path / "t.dten"
    p.write_bytes(header(0, [3]) + struct.pack("<3f", 1.0, 2.0, 3.0))
    t = read_tensor(p)
    assert t.dtype == np.float32 and t.tolist() == [1.0, 2.0, 3.0]


def test_grid_shape():
    t = decode_tensor(header(0, [2, 2, 4]) + bytes(64))
    assert t.shape == (2, 2, 4)


def test_short_payload_is_corruption():
    with pytest.raises(CorruptionError):
        decode_tensor(header(0, [3]) + bytes(8))


def test_bad_magic_is_format_error():
    with pytest.raises(FormatError):
        decode_tensor(b"XTEN" + header(0, [1])[4:] + bytes(4))


def test_bad_version_and_dtype():
    buf = bytearray(header(0, [1]) + bytes(4))
    buf[4] = 2
    with pytest.raises(FormatError):
        decode_tensor(bytes(buf))
    buf = bytearray(header(0, [1]) + bytes(4))
    buf[5] = 9
    with pytest.raises(FormatError):
        decode_tensor(bytes(buf))


def test_ndim_limit():
    with pytest.raises(ValidationError):
        encode_tensor(np.zeros((1, 1, 1, 1, 1), dtype=np.float32))


def test_zero_length_dim(tmp_path):
    write_tensor(np.zeros(0, dtype=np.float32), tmp_path / "e.dten")
    assert read_tensor(tmp_path / "e.dten").shape == (0,)
    assert (tmp_path / "e.dten").stat().st_size == 4 + 3 + 4


def test_pose_payload_is_64_bytes():
    assert len(encode_tensor(np.eye(4, dtype=np.float32))) == 4 + 3 + 8 + 64


def test_unsupported_dtype_rejected():
    with pytest.raises(ValidationError):
        encode_tensor(np.zeros(3, dtype=np.float64))


dtypes = st.sampled_from([np.float32, np.uint8, np.int32])


@given(dtypes.flatmap(lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=1, max_dims=4, min_side=0, max_side=5))))
def test_round_trip_bit_identical(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.dtype == arr.dtype and out.shape == arr.shape
    assert out.tobytes() == arr.tobytes()


def small_frame():
    scene = make_scene(1, n_boxes=3)
    pose = orbit_trajectory(scene, 1, 2.5)[0]
    return render_frame(scene, pose, default_intrinsics(56, 60), NoiseModel(0.01, 0.05), np.random.default_rng(0))


def test_frame_round_trip(tmp_path):
    f = small_frame()
    g = load_frame(save_frame(f, tmp_path / "f"))
    for name in ("depth", "masks", "patch_grid", "tracking_grid", "global_embedding", "confidences"):
        assert np.array_equal(getattr(f, name), getattr(g, name)), name
    assert g.intrinsics == f.intrinsics and g.patch_size == f.patch_size


def test_448_image_with_32_patch_grid_loads(tmp_path):
    f = small_frame()
    f.intrinsics = default_intrinsics(448, 60)
    f.depth = np.ones((448, 448), dtype=np.float32)
    f.masks = np.zeros((0, 448, 448), dtype=np.uint8)
    f.confidences = np.zeros(0, dtype=np.float32)
    f.patch_grid = np.ones((32, 32, f.patch_grid.shape[2]), dtype=np.float32)
    f.tracking_grid = np.ones((32, 32, 4), dtype=np.float32)
    assert load_frame(save_frame(f, tmp_path / "ok")).patch_grid.shape == (32, 32, f.patch_grid.shape[2])
    f.patch_grid = np.ones((30, 30, f.patch_grid.shape[2]), dtype=np.float32)
    with pytest.raises(DimensionError):
        f.validate()


def test_missing_frame_file(tmp_path):
    path = save_frame(small_frame(), tmp_path / "f")
    (tmp_path / "f" / "depth.dten").unlink()
    with pytest.raises(FileNotFoundError):
        load_frame(path)


def random_map(rng, n, df=8, dt=6, res=0.05):
    m = InstanceMap(res)
    for i in range(n):
        keys = rng.integers(-50, 50, size=(rng.integers(1, 40), 3))
        vec = rng.standard_normal(df).astype(np.float32)
        q = quality(*rng.random(4).astype(np.float32), mask_area=int(rng.integers(0, 5000)),
                    mean_d=float(rng.random()))
        m.add(Instance(int(i * 3 + rng.integers(0, 3)), VoxelSet.from_keys(keys, res), SemanticFeature(vec, q),
                       rng.standard_normal(dt).astype(np.float32), int(rng.integers(1, 9)), int(rng.integers(0, 99))))
    return m


def assert_maps_equal(a, b):
    assert a.resolution == b.resolution and a.next_id == b.next_id and a.config == b.config
    assert sorted(a.instances) == sorted(b.instances)
    for i in a.instances:
        x, y = a.instances[i], b.instances[i]
        assert x.voxels == y.voxels
        assert x.semantic.vector.tobytes() == y.semantic.vector.tobytes()
        assert x.tracking.tobytes() == y.tracking.tobytes()
        assert (x.obs_count, x.last_seen) == (y.obs_count, y.last_seen)
        for fa, fb in zip(x.semantic.quality.as_row(), y.semantic.quality.as_row()):
            assert np.float32(fa).tobytes() == np.float32(fb).tobytes()
        assert x.semantic.quality.mask_area == y.semantic.quality.mask_area


def test_empty_map_round_trip(tmp_path):
    m = InstanceMap(0.05)
    back = load_map(save_map(m, tmp_path / "m"))
    assert len(back) == 0


@pytest.mark.parametrize("seed", range(5))
def test_map_round_trip(tmp_path, seed):
    m = random_map(np.random.default_rng(seed), 12)
    assert_maps_equal(m, load_map(save_map(m, tmp_path / "m")))


def test_map_hash_mismatch_detected(tmp_path):
    import json

    d = save_map(random_map(np.random.default_rng(0), 2), tmp_path / "m")
    meta = json.loads((d / "snapshot.json").read_text())
    meta["config_hash"] = "0" * 64
    (d / "snapshot.json").write_text(json.dumps(meta))
    with pytest.raises(CorruptionError):
        load_map(d)


def test_table_round_trip(tmp_path):
    scene = make_scene(0)
    save_table(scene.table(), tmp_path / "t")
    back = load_table(tmp_path / "t")
    assert back.names == scene.class_names
    assert back.embeddings.tobytes() == scene.table().embeddings.tobytes()
