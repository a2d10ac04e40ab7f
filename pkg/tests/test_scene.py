import math

import numpy as np
import pytest

from ssc3od.geom import BoxBEV, Pose, iou_matrix, boxes_to_array
from ssc3od.scene import (
    Agent, AgentKind, CorpusConfig, LidarConfig, PlacementError, Scene, generate_corpus,
    load_dataset, points_per_object, sample_lidar, save_dataset, sparse_ratio, sparsify, sparsify_labels,
)

NOISELESS = LidarConfig(num_beams=4, points_per_beam=720, max_range=45.0, noise_sigma=0.0)


def one_box_scene(box, pose=Pose(), sensor=NOISELESS, extra=()):
    objects = {0: box}
    for i, b in enumerate(extra, 1):
        objects[i] = b
    return Scene(0, [Agent(0, AgentKind.VEHICLE, pose, sensor)], objects)


def ray_rect_distance(ox, oy, theta, box):
    """Independent slab-test ray/rectangle intersection (world frame)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    px, py = ox - box.cx, oy - box.cy
    lo = np.array([c * px + s * py, -s * px + c * py])
    d = np.array([c * math.cos(theta) + s * math.sin(theta), -s * math.cos(theta) + c * math.sin(theta)])
    half = np.array([box.length / 2, box.width / 2])
    t0, t1 = -math.inf, math.inf
    for k in range(2):
        if abs(d[k]) < 1e-15:
            if abs(lo[k]) > half[k]:
                return math.inf
            continue
        a, b = (-half[k] - lo[k]) / d[k], (half[k] - lo[k]) / d[k]
        t0, t1 = max(t0, min(a, b)), min(t1, max(a, b))
    return t0 if t1 >= t0 >= 0 else math.inf


def test_counting_example():
    ds = generate_corpus(CorpusConfig(num_scenes=1, agents_min=2, agents_max=2, num_objects=8), seed=3)
    assert len(ds.scenes) == 1 and len(ds.scenes[0].agents) == 2
    assert ds.num_labels("full") == 16


def test_corpus_invariants():
    cfg = CorpusConfig(num_scenes=12)
    ds = generate_corpus(cfg, seed=5)
    x0, x1, y0, y1 = cfg.range_spec
    for sc in ds.scenes:
        assert len({a.id for a in sc.agents}) == len(sc.agents) >= 1
        arr = boxes_to_array([sc.objects[o] for o in sc.object_ids()])
        m = iou_matrix(arr, arr)
        np.fill_diagonal(m, 0)
        assert m.max() <= 0.05
        assert np.all((arr[:, 0] >= x0) & (arr[:, 0] <= x1) & (arr[:, 1] >= y0) & (arr[:, 1] <= y1))
        assert all(sc.visible_objects(a.id) for a in sc.agents)
        assert sc.agents[0].kind is AgentKind.VEHICLE


def test_placement_errors():
    with pytest.raises(PlacementError):
        generate_corpus(CorpusConfig(num_scenes=1, num_objects=0), seed=0)
    with pytest.raises(PlacementError):
        generate_corpus(CorpusConfig(num_scenes=1, num_objects=400, range_spec=(-10, 10, -10, 10)), seed=0)
    with pytest.raises(ValueError):
        CorpusConfig(agents_max=6)


def test_determinism_and_file_roundtrip(tmp_path):
    cfg = CorpusConfig(num_scenes=4)
    a = sparsify(generate_corpus(cfg, seed=9), seed=2)
    b = sparsify(generate_corpus(cfg, seed=9), seed=2)
    save_dataset(a, tmp_path / "a.scenes")
    save_dataset(b, tmp_path / "b.scenes")
    assert (tmp_path / "a.scenes").read_bytes() == (tmp_path / "b.scenes").read_bytes()
    back = load_dataset(tmp_path / "a.scenes", "train")
    save_dataset(back, tmp_path / "c.scenes")
    assert (tmp_path / "c.scenes").read_bytes() == (tmp_path / "a.scenes").read_bytes()
    assert back.sparse == a.sparse and back.full == a.full
    for s0, s1 in zip(a.scenes, back.scenes):
        np.testing.assert_array_equal(s0.cloud(0).points, s1.cloud(0).points)
    text = (tmp_path / "a.scenes").read_text()
    assert "schema_version=1" in text.splitlines()[0]
    (tmp_path / "bad.scenes").write_text(text.replace("schema_version=1", "schema_version=7", 1))
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "bad.scenes")


def test_scene_depends_only_on_seed_and_index():
    small = generate_corpus(CorpusConfig(num_scenes=2), seed=4)
    big = generate_corpus(CorpusConfig(num_scenes=5), seed=4)
    for s0, s1 in zip(small.scenes, big.scenes):
        assert s0.objects == s1.objects and s0.agents == s1.agents


def test_lidar_points_lie_on_visible_faces():
    box = BoxBEV(10.0, 1.0, 4.0, 2.0, 0.4, 1.0, 0.75, 1.5)
    sc = one_box_scene(box)
    pts = sample_lidar(sc, sc.agents[0], seed=0).points
    assert len(pts) > 0
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * (pts[:, 0] - box.cx) + s * (pts[:, 1] - box.cy)
    ly = -s * (pts[:, 0] - box.cx) + c * (pts[:, 1] - box.cy)
    on_x = np.abs(np.abs(lx) - 2.0) < 1e-9
    on_y = np.abs(np.abs(ly) - 1.0) < 1e-9
    assert np.all(on_x | on_y)
    # only the two faces turned towards the sensor (at the origin) return
    sx = c * -box.cx + s * -box.cy
    sy = -s * -box.cx + c * -box.cy
    assert np.all(np.sign(lx[on_x]) == np.sign(sx)) and np.all(np.sign(ly[on_y]) == np.sign(sy))
    assert on_x.any() and on_y.any()
    # ranges agree with an independent ray/rectangle intersection
    theta = np.arctan2(pts[:, 1], pts[:, 0])
    expected = np.array([ray_rect_distance(0, 0, t, box) for t in theta])
    np.testing.assert_allclose(np.hypot(pts[:, 0], pts[:, 1]), expected, atol=1e-9)
    assert np.all((pts[:, 2] >= 0.0) & (pts[:, 2] <= 1.5))


def test_occluded_object_gets_no_points():
    target = BoxBEV(20.0, 0.0, 4.0, 2.0, 0.0)
    occluder = BoxBEV(8.0, 0.0, 2.0, 6.0, 0.0)
    sc = one_box_scene(target, extra=[occluder])
    counts = points_per_object(sc, 0)
    assert counts[0] == 0 and counts[1] > 0


def test_empty_scene_and_seed_independence():
    sc = Scene(0, [Agent(0, AgentKind.VEHICLE, Pose(), NOISELESS)], {})
    assert len(sample_lidar(sc, sc.agents[0], 1)) == 0
    box_scene = one_box_scene(BoxBEV(5.0, -3.0, 4.0, 2.0, 1.0), pose=Pose(1.0, 2.0, 0, 0, 0, 0.3))
    a = sample_lidar(box_scene, box_scene.agents[0], 1).points
    b = sample_lidar(box_scene, box_scene.agents[0], 99).points
    np.testing.assert_array_equal(a, b)
    noisy = one_box_scene(BoxBEV(5.0, -3.0, 4.0, 2.0, 1.0), sensor=LidarConfig(noise_sigma=0.05))
    assert not np.array_equal(sample_lidar(noisy, noisy.agents[0], 1).points,
                              sample_lidar(noisy, noisy.agents[0], 2).points)


def test_points_beyond_range_dropped():
    sensor = LidarConfig(max_range=10.0, noise_sigma=0.0)
    sc = one_box_scene(BoxBEV(30.0, 0.0, 4.0, 2.0, 0.0), sensor=sensor)
    assert len(sample_lidar(sc, sc.agents[0], 0)) == 0


def test_sparsify_labels_cardinality():
    rng = np.random.default_rng(0)
    out = sparsify_labels({0: [1, 2, 3], 1: [2, 4]}, None, rng)
    assert out[0][0] in {1, 2, 3} and out[1][0] in {2, 4}
    assert sparsify_labels({0: [5], 1: [7]}, None, rng) == {0: [5], 1: [7]}
    with pytest.raises(ValueError):
        sparsify_labels({0: [1]}, {0: []}, rng)


def test_sparsify_paper_count():
    # 4811 two-agent frames keep exactly one label per agent
    rng = np.random.default_rng(1)
    total = 0
    for _ in range(4811):
        total += sum(len(v) for v in sparsify_labels({0: list(range(30)), 1: list(range(20))}, None, rng).values())
    assert total == 9622


def test_sparsify_contract():
    ds = generate_corpus(CorpusConfig(num_scenes=10), seed=7)
    a, b = sparsify(ds, 3), sparsify(ds, 3)
    assert a.sparse == b.sparse
    for sc in a.scenes:
        sp = a.sparse[sc.scene_id]
        assert set(sp) == set(sc.agent_ids)
        for aid, oids in sp.items():
            assert len(oids) == 1 and oids[0] in a.full[sc.scene_id][aid]
            assert points_per_object(sc, aid)[oids[0]] >= 5


@pytest.mark.parametrize("n_sparse,n_full,expected", [(9622, 237725, 4.05), (21139, 358142, 5.90), (29300, 698991, 4.19)])
def test_sparse_ratio_table(n_sparse, n_full, expected):
    assert round(sparse_ratio(n_full, n_sparse), 2) == expected


def test_sparse_ratio_dataset():
    ds = sparsify(generate_corpus(CorpusConfig(num_scenes=3, num_objects=5), seed=1), 0)
    assert sparse_ratio(ds) == pytest.approx(100.0 * ds.num_labels("sparse") / ds.num_labels("full"))
    with pytest.raises(ValueError):
        sparse_ratio(0, 0)
