"""End-to-end acceptance checks, one test per criterion; each prints a PASS/FAIL line."""

import contextlib
import math
import time

import numpy as np
import pytest

from oracles import brute_force_assignment, brute_force_postman, brute_visible, naive_dbscan
from openvox import pipeline
from openvox.config import RunConfig
from openvox.geometry import Aabb, VoxelSet, bvh_build, bvh_query, dbscan_labels, voxel_overlap
from openvox.retrieval import evaluate, hungarian_match, retrieval_metrics, segmentation_metrics
from openvox.semantics import SemanticFeature, compute_distinctiveness, fuse_semantic, quality, s_angle, s_size
from openvox.synthbench import (
    default_intrinsics,
    export_ground_truth,
    make_scene,
    orbit_trajectory,
    render_sequence,
)
from openvox.tensor_io import TextEmbeddingTable, decode_tensor, encode_tensor, load_map, save_map
from openvox.synthbench import Box, scene_voxel_labels
from openvox.trajgen import (
    CSV_HEADER,
    CoverageCamera,
    LabelledVoxels,
    chinese_postman,
    coverage_analysis,
    quantize,
    replay,
)
from test_tensor_io import assert_maps_equal, random_map

RESULTS: dict[int, str] = {}


@contextlib.contextmanager
def criterion(n: int, name: str):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        RESULTS[n] = f"criterion {n} ({name}): FAIL [{time.perf_counter() - t0:.1f} s]"
        print(RESULTS[n])
        raise
    RESULTS[n] = f"criterion {n} ({name}): PASS [{time.perf_counter() - t0:.1f} s]"
    print(RESULTS[n])


def test_criterion_1_distinctiveness():
    with criterion(1, "distinctiveness map"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        for _ in range(200):
            grid = rng.normal(size=(int(rng.integers(2, 17)), int(rng.integers(2, 17)), int(rng.integers(2, 65))))
            d = compute_distinctiveness(grid)
            assert abs(float(d.mean()) - 1.0) <= 1e-3
            shifted = compute_distinctiveness(grid + rng.normal(size=grid.shape[2]) * 10)
            assert np.allclose(shifted, d, atol=1e-4)
            assert np.all(compute_distinctiveness(np.broadcast_to(grid[0, 0], grid.shape).copy()) == 0)
        hand = np.array([[[1, 0], [1, 0]], [[1, 0], [0, 1]]], dtype=float)
        assert np.allclose(compute_distinctiveness(hand).ravel(), [0.6667, 0.6667, 0.6667, 2.0], atol=1e-3)
        assert time.perf_counter() - t0 < 1.0


def test_criterion_2_quality_score():
    with criterion(2, "quality score"):
        hw = 100 * 100
        for frac in np.linspace(1 / 3.3, 1.0, 50):
            assert s_size(math.ceil(frac * hw), 100, 100) == 1.0
        assert s_size(0.1 * hw, 100, 100) == np.float32(0.33)
        n = np.array([[0, 0, 1.0], [0, 1.0, 0]])
        assert s_angle(n, -n) == 1.0
        assert s_angle(n, np.array([[1.0, 0, 0], [0, 0, 1.0]])) == 0.0
        assert s_angle(np.array([[0, 0, 1.0]] * 2), np.array([[0, 0, -1.0], [0, 0, 1.0]])) == 0.5
        rng = np.random.default_rng(2)
        for _ in range(1000):
            a = rng.random(4).astype(np.float32)
            a[3] += 0.5
            b = quality(*a)
            assert b.q.tobytes() == (((a[0] * a[1]) * a[2]) * a[3]).tobytes()
            assert 0 <= b.s_angle <= 1 and b.s_size <= 1
        qs = rng.permutation(np.linspace(0.01, 0.99, 25)).astype(np.float32)
        obs = [SemanticFeature(np.eye(25, dtype=np.float32)[i], quality(q, 1, 1, 1)) for i, q in enumerate(qs)]
        best = obs[int(np.argmax(qs))]
        for _ in range(1000):
            cur = None
            for k in rng.permutation(len(obs)):
                cur = fuse_semantic(cur, obs[k])
            assert cur is best


def test_criterion_3_geometry_oracles():
    with criterion(3, "geometry oracles"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(3)
        for _ in range(500):
            ka = rng.integers(-4, 4, size=(int(rng.integers(0, 80)), 3))
            kb = rng.integers(-4, 4, size=(int(rng.integers(0, 80)), 3))
            ov = voxel_overlap(VoxelSet.from_keys(ka, 0.05), VoxelSet.from_keys(kb, 0.05))
            sa, sb = set(map(tuple, ka.tolist())), set(map(tuple, kb.tolist()))
            inter = len(sa & sb)
            assert ov.intersection == inter
            assert ov.iou == (inter / len(sa | sb) if sa | sb else 0.0)
            assert ov.overlap_min == (inter / min(len(sa), len(sb)) if sa and sb else 0.0)
        for _ in range(100):
            n = int(rng.integers(1, 2001))
            centers = rng.uniform(-2, 2, size=(5, 3))
            pts = centers[rng.integers(0, 5, n)] + rng.normal(0, 0.25, size=(n, 3))
            eps, min_pts = float(rng.uniform(0.05, 0.2)), int(rng.integers(2, 12))
            assert np.array_equal(dbscan_labels(pts, eps, min_pts), naive_dbscan(pts, eps, min_pts))
        for _ in range(1000):
            m = int(rng.integers(0, 80))
            lo = rng.uniform(-10, 10, size=(m, 3))
            boxes = {i: Aabb(lo[i], lo[i] + rng.uniform(0, 3, 3)) for i in range(m)}
            ql = rng.uniform(-10, 10, 3)
            q = Aabb(ql, ql + rng.uniform(0, 3, 3))
            margin = float(rng.uniform(0, 1))
            brute = {i for i, b in boxes.items() if b.intersects(q.inflate(margin))}
            assert brute <= set(bvh_query(bvh_build(boxes, int(rng.integers(1, 9))), q, margin))
        assert time.perf_counter() - t0 < 30.0


def map_scene(scene, poses, cfg, size):
    frames = render_sequence(scene, poses, default_intrinsics(size, cfg.synth.hfov_deg), pipeline.synth_noise(cfg))
    return pipeline.run_mapping(frames, cfg)


def test_criterion_4_determinism_and_fixpoint(tmp_path):
    with criterion(4, "association determinism and fixpoint"):
        cfg = RunConfig(seed=11)
        scene = make_scene(11)
        poses = orbit_trajectory(scene, 60, cfg.synth.orbit_radius, cfg.synth.camera_height)
        a = map_scene(scene, poses, cfg, 168).map
        b = map_scene(scene, poses, cfg, 168).map
        save_map(a, tmp_path / "a")
        save_map(b, tmp_path / "b")
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        ids = sorted(a.instances)
        assert ids
        for i, x in enumerate(ids):
            for y in ids[i + 1:]:
                ok, _ = a.qualifies(a.instances[y], a.instances[x])
                assert not ok


def test_criterion_5_synthetic_end_to_end():
    with criterion(5, "synthetic end-to-end"):
        t0 = time.perf_counter()
        cfg = RunConfig()
        assert (cfg.synth.depth_sigma, cfg.synth.feature_sigma, cfg.synth.frames) == (0.01, 0.05, 200)
        scene = pipeline.synth_scene(cfg)
        assert len(scene.boxes) == 10
        run = map_scene(scene, pipeline.synth_poses(cfg, scene), cfg, cfg.synth.image_size)
        rep = evaluate(run.map, export_ground_truth(scene, cfg.resolution), scene.table(), cfg.eval.ks)
        print(f"  instances {len(run.map)}, Acc@1 {rep.retrieval['Acc@1']:.3f}, mAcc {rep.dense['mAcc']:.3f}, "
              f"unassigned {rep.unassigned_fraction:.3%}")
        assert 8 <= len(run.map) <= 14
        assert rep.retrieval["Acc@1"] >= 0.9
        assert rep.dense["mAcc"] >= 0.9
        assert rep.unassigned_fraction < 0.05
        assert time.perf_counter() - t0 < 120.0


@pytest.mark.slow
def test_criterion_6_scalability():
    with criterion(6, "bounded frame time at scale"):
        t0 = time.perf_counter()
        cfg = RunConfig.model_validate({"synth": {"rooms": 32, "frames": 4000, "image_size": 224}})
        scene = pipeline.synth_scene(cfg)
        run = map_scene(scene, pipeline.synth_poses(cfg, scene), cfg, cfg.synth.image_size)
        wall = np.array([f.wall_ms for f in run.frames])
        inst = np.array([f.instances for f in run.frames])
        mem = np.array([f.memory_bytes for f in run.frames], dtype=np.float64)
        early, late = np.median(wall[100:500]), np.median(wall[-len(wall) // 10:])
        per_inst = mem[500:] / inst[500:]
        print(f"  frames {len(wall)}, peak instances {inst.max()}, median ms early {early:.1f} late {late:.1f}, "
              f"bytes/instance {per_inst[0]:.0f} -> {per_inst[-1]:.0f}")
        assert len(wall) == 4000
        assert inst.max() >= 300
        assert late <= 2 * early
        # memory per instance stays bounded, so total memory grows at most linearly in the instance count
        assert per_inst.max() <= 2 * per_inst[0]
        assert time.perf_counter() - t0 < 30 * 60


def test_criterion_7_evaluation_oracles():
    with criterion(7, "evaluation oracles"):
        rng = np.random.default_rng(7)
        for _ in range(200):
            iou = rng.random((7, 7))
            assert hungarian_match(iou).total == pytest.approx(brute_force_assignment(iou), abs=1e-12)
        for c in (2, 5, 12):
            q, _ = np.linalg.qr(rng.normal(size=(c, c)))
            table = TextEmbeddingTable([str(k) for k in range(c)], q.T.astype(np.float32))
            r = retrieval_metrics(list(rng.normal(size=(40, c))), list(rng.integers(0, c, 40)), table,
                                  list(range(1, c + 1)))
            accs = [r[f"Acc@{k}"] for k in range(1, c + 1)]
            assert all(x <= y for x, y in zip(accs, accs[1:]))
            assert accs[-1] == 1.0
            assert 1 / c <= r["AUC_topk"] <= 1
        m = segmentation_metrics(np.array([[5, 5], [0, 10]]))
        assert abs(m["mAcc"] - 0.75) <= 1e-6
        assert abs(m["mIoU"] - (0.5 + 2 / 3) / 2) <= 1e-6
        assert round(m["mIoU"], 3) == 0.583


def test_criterion_8_trajgen_oracles():
    with criterion(8, "trajgen oracles"):
        rng = np.random.default_rng(8)
        for _ in range(100):
            nv = int(rng.integers(2, 7))
            edges = [(int(rng.integers(0, v)), v, float(rng.uniform(0.5, 4))) for v in range(1, nv)]
            while len(edges) < int(rng.integers(nv - 1, 9)):
                u, v = rng.integers(0, nv, 2)
                if u != v:
                    edges.append((int(u), int(v), float(rng.uniform(0.5, 4))))
            assert chinese_postman(nv, edges).length == pytest.approx(brute_force_postman(nv, edges), abs=1e-9)
        cycle = [(0, 1, 1.0), (1, 2, 1.5), (2, 3, 2.0), (3, 0, 2.5), (0, 2, 1.0), (2, 4, 1.0), (4, 0, 1.0)]
        t = chinese_postman(5, cycle)
        assert t.duplicated == [] and t.length == pytest.approx(sum(w for *_, w in cycle))
        assert chinese_postman(3, [(0, 1, 1.0), (1, 2, 2.0)]).length == pytest.approx(6.0)
        curve = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 1.5], [0.5, 2.0]])
        traj = quantize(curve, start_yaw=3)
        for p, q in zip(traj.poses, replay(traj.start, traj.actions)):
            assert abs(p[0] - q[0]) <= 1e-6 and abs(p[1] - q[1]) <= 1e-6 and p[2] == q[2]
        boxes = [Box(np.array([0.9, 0.1, 0.2]), np.array([0.3, 0.4, 0.4]), 0),
                 Box(np.array([-0.5, 0.7, 0.25]), np.array([0.4, 0.3, 0.5]), 1),
                 Box(np.array([-0.4, -0.8, 0.15]), np.array([0.5, 0.35, 0.3]), 2)]
        inst = scene_voxel_labels(boxes, 0.05)
        cam = CoverageCamera(32, 32)
        poses = orbit_trajectory(np.array([0.0, 0.0, 0.2]), 8, 2.4, 1.0, phase=0.13)
        volume = LabelledVoxels.build(inst)
        for pose in poses:
            dirs = cam.directions(pose)
            cells, hit = volume.cast(pose[:3, 3], dirs, cam.max_range)
            got: dict[int, set] = {}
            for c in cells[hit]:
                got.setdefault(int(volume.labels[tuple(c)]), set()).add(tuple(int(v) for v in c + volume.offset))
            assert got == brute_visible(inst, pose[:3, 3], dirs, cam.max_range)
        prev = None
        for n in range(1, len(poses) + 1):
            cov = [r.covered_voxels for r in coverage_analysis(inst, poses[:n], camera=cam).rows]
            assert prev is None or all(a >= b for a, b in zip(cov, prev))
            prev = cov


def test_criterion_9_io_round_trips(tmp_path):
    with criterion(9, "I/O round trips"):
        rng = np.random.default_rng(9)
        dtypes = [np.float32, np.uint8, np.int32]
        for k in range(100):
            shape = tuple(int(v) for v in rng.integers(0, 6, size=int(rng.integers(0, 5))))
            dt = dtypes[k % 3]
            if dt is np.float32:
                arr = rng.standard_normal(shape).astype(dt)
            else:
                info = np.iinfo(dt)
                arr = rng.integers(info.min, info.max, size=shape, dtype=dt, endpoint=True)
            buf = encode_tensor(arr)
            back = decode_tensor(buf)
            assert back.dtype == arr.dtype and back.shape == arr.shape and back.tobytes() == arr.tobytes()
            assert encode_tensor(back) == buf
        for k in range(100):
            m = random_map(rng, int(rng.integers(0, 15)))
            d = save_map(m, tmp_path / f"m{k}")
            back = load_map(d)
            assert_maps_equal(m, back)
            d2 = save_map(back, tmp_path / f"r{k}")
            for f in sorted(p.name for p in d.iterdir()):
                assert (d / f).read_bytes() == (d2 / f).read_bytes()
        pose = orbit_trajectory(np.zeros(3), 1, 2.0)[0]
        csv_text = coverage_analysis({0: VoxelSet.from_keys(np.zeros((1, 3)), 0.05)}, [pose]).to_csv()
        assert csv_text.splitlines()[0] == "ID,Category,Region,Model Voxels,Covered Voxels,Coverage (%)"
        assert CSV_HEADER == ["ID", "Category", "Region", "Model Voxels", "Covered Voxels", "Coverage (%)"]
