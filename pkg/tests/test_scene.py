import math

import numpy as np
import pytest

from rulegp import geometry as geo
from rulegp.rules import default_rules, evaluate_all
from rulegp.scene import (
    PROFILES, Agent, ChecksumMismatchError, Crossing, Dataset, DrivingSide, EmptySplitError, EncoderInputConfig, Frame,
    Pose, RegionProfile, Sample, Scene, Signal, StopZone, Trajectory, VersionMismatchError, ZoneKind, encode_features,
    generate_dataset, generate_scene, load_dataset, make_sample, save_dataset, scene_to_dict, split_dataset, subsample,
)

BIG = np.array([[-500.0, -500.0], [500.0, -500.0], [500.0, 500.0], [-500.0, 500.0]])


def hand_scene(stop_zones=(), crossings=(), pose=Pose()):
    hist = np.zeros((3, 2))
    ego = Agent(0, Trajectory(geo.to_global(hist, pose.translation, pose.rotation), Frame.GLOBAL), Trajectory(np.zeros((12, 2)), Frame.GLOBAL))
    scene = Scene([geo.to_global(BIG, pose.translation, pose.rotation)], list(stop_zones), list(crossings), [ego], 0, "hand", pose)
    return scene, Sample(scene, Trajectory(hist), Trajectory(np.zeros((12, 2))), np.empty(0))


def test_same_seed_identical_scene():
    a = generate_scene(PROFILES["grid-right"], 99)
    b = generate_scene(PROFILES["grid-right"], 99)
    assert scene_to_dict(a) == scene_to_dict(b)


def test_left_profile_sets_left_flag():
    for seed in range(20):
        s = generate_scene(PROFILES["curve-left"], seed)
        assert s.driving_side == DrivingSide.LEFT
        assert encode_features(make_sample(PROFILES["curve-left"], seed), s)[-1] == 1.0


@pytest.mark.parametrize("name", ["grid-right", "curve-left"])
def test_compliance_rate_near_target(name):
    prof = PROFILES[name]
    rules = default_rules()
    ok = 0
    for seed in range(1000):
        scene = generate_scene(prof, seed)
        ok += evaluate_all(rules, scene, scene.ego().future.points)
    assert 0.85 <= ok / 1000 <= 0.95


def test_stationary_empty_scene_features():
    scene, sample = hand_scene()
    f = encode_features(sample, scene)
    cfg = EncoderInputConfig()
    assert f.shape == (cfg.dim,)
    np.testing.assert_array_equal(f[:3], 0.0)
    np.testing.assert_array_equal(f[3 : 3 + 4 * cfg.max_agents], 0.0)
    rays = f[3 + 4 * cfg.max_agents : 3 + 4 * cfg.max_agents + cfg.n_rays]
    np.testing.assert_array_equal(rays, 50.0)


def test_stop_zone_distance_twelve():
    zone = StopZone(np.array([[12.0, -1.75], [14.0, -1.75], [14.0, 1.75], [12.0, 1.75]]), ZoneKind.TRAFFIC_LIGHT, Signal.RED)
    scene, sample = hand_scene([zone])
    f = encode_features(sample, scene)
    i = 3 + 4 * 4 + 8
    assert abs(f[i] - 12.0) <= 1e-9
    np.testing.assert_array_equal(f[i + 1 : i + 4], [1.0, 0.0, 0.0])


def test_stop_zone_distance_after_rigid_pose():
    pose = Pose((123.0, -45.0), 0.7)
    zone = geo.to_global(np.array([[12.0, -1.75], [14.0, -1.75], [14.0, 1.75], [12.0, 1.75]]), pose.translation, pose.rotation)
    scene, sample = hand_scene([StopZone(zone, ZoneKind.STOP_SIGN)], pose=pose)
    assert abs(encode_features(sample, scene)[3 + 16 + 8] - 12.0) <= 1e-9


def _moved(scene: Scene, offset, angle) -> Scene:
    def mv(p):
        return geo.to_global(p, offset, angle)

    t = mv(np.asarray(scene.ego_pose.translation)[None])[0]
    return Scene(
        [mv(p) for p in scene.drivable],
        [StopZone(mv(z.polygon), z.kind, z.signal) for z in scene.stop_zones],
        [Crossing(mv(c.polygon), c.active) for c in scene.crossings],
        [Agent(a.id, Trajectory(mv(a.history.points), Frame.GLOBAL), Trajectory(mv(a.future.points), Frame.GLOBAL), a.cls) for a in scene.agents],
        scene.ego_id, scene.region, Pose(tuple(t), scene.ego_pose.rotation + angle), scene.driving_side,
    )


@pytest.mark.parametrize("seed", range(8))
def test_feature_rigid_invariance(seed):
    prof = PROFILES["curve-left" if seed % 2 else "grid-right"]
    s = make_sample(prof, seed)
    moved = _moved(s.scene, (37.5, -812.25), 1.1 + seed)
    np.testing.assert_allclose(encode_features(s, moved), s.features, atol=1e-9, rtol=0)


def test_short_history_rejected():
    scene, sample = hand_scene()
    sample.history = Trajectory(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        encode_features(sample, scene)


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(PROFILES["grid-right"], 100, 3)
    save_dataset(ds, tmp_path / "d.jsonl")
    back = load_dataset(tmp_path / "d.jsonl")
    assert back == ds
    assert all(np.array_equal(a.features, b.features) for a, b in zip(ds, back))


def test_wrong_version(tmp_path):
    ds = generate_dataset(PROFILES["grid-right"], 2, 3)
    save_dataset(ds, tmp_path / "d.jsonl")
    text = (tmp_path / "d.jsonl").read_text().replace('"version":1', '"version":7', 1)
    (tmp_path / "d.jsonl").write_text(text)
    with pytest.raises(VersionMismatchError):
        load_dataset(tmp_path / "d.jsonl")


def test_checksum_detects_edit(tmp_path):
    ds = generate_dataset(PROFILES["grid-right"], 2, 3)
    save_dataset(ds, tmp_path / "d.jsonl")
    lines = (tmp_path / "d.jsonl").read_text().split("\n")
    lines[1] = lines[1].replace('"region":"grid-right"', '"region":"grid-rite"')
    (tmp_path / "d.jsonl").write_text("\n".join(lines))
    with pytest.raises(ChecksumMismatchError):
        load_dataset(tmp_path / "d.jsonl")


def test_empty_dataset(tmp_path):
    save_dataset(Dataset([]), tmp_path / "e.jsonl")
    assert len((tmp_path / "e.jsonl").read_text().splitlines()) == 1
    assert len(load_dataset(tmp_path / "e.jsonl")) == 0


def _label_only(regions):
    """Samples carrying nothing but a region tag (enough for splitting)."""
    out = []
    for r in regions:
        sc = Scene([BIG], region=r)
        out.append(Sample(sc, Trajectory(np.zeros((3, 2))), Trajectory(np.zeros((12, 2))), np.zeros(EncoderInputConfig().dim)))
    return Dataset(out)


def test_split_all_train():
    ds = _label_only(["a"] * 30 + ["b"] * 10)
    tr, va, te = split_dataset(ds, (1.0, 0.0, 0.0), 0)
    assert len(tr) == 40 and len(va) == 0 and len(te) == 0


def test_split_disjoint_and_deterministic():
    ds = _label_only(["a"] * 300 + ["b"] * 200)
    parts = split_dataset(ds, (0.6, 0.2, 0.2), 4)
    ids = [{id(s) for s in p} for p in parts]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    again = split_dataset(ds, (0.6, 0.2, 0.2), 4)
    assert all([id(s) for s in p] == [id(s) for s in q] for p, q in zip(parts, again))


def test_nested_subsample_deterministic():
    ds = _label_only(["a"] * 700 + ["b"] * 300)
    once = subsample(subsample(ds, 0.1, 8), 0.1, 8)
    twice = subsample(subsample(ds, 0.1, 8), 0.1, 8)
    assert [id(s) for s in once] == [id(s) for s in twice]
    assert {id(s) for s in once} <= {id(s) for s in subsample(ds, 0.1, 8)}


def test_split_stratified():
    ds = _label_only(["grid-right"] * 6300 + ["curve-left"] * 3700)
    tr, _, te = split_dataset(ds, (0.7, 0.15, 0.15), 1)
    for part in (tr, te):
        frac = np.mean([r == "grid-right" for r in part.regions()])
        assert abs(frac - 0.63) <= 0.02


def test_empty_split_error():
    with pytest.raises(EmptySplitError):
        split_dataset(_label_only(["a"] * 3), (0.9, 0.1, 0.0), 0)


def test_profile_validation():
    with pytest.raises(ValueError):
        RegionProfile("x", DrivingSide.RIGHT, 1.5, 0.1, 0.1, 0.9)
