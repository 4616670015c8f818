import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rulegp import geometry as geo
from rulegp import rules as rl
from rulegp.anchors import AnchorSet
from rulegp.rules import And, Condition, Kind, NoCross, Not, Or, PedPriority, WithinDrivable, YieldAt
from rulegp.scene import Agent, Crossing, Dataset, Frame, Pose, Sample, Scene, Signal, StopZone, Trajectory, ZoneKind

ROAD = np.array([[-10.0, -2.0], [100.0, -2.0], [100.0, 5.0], [-10.0, 5.0]])


def rect(x0, x1, y0, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def line(x0, x1, y=0.0, n=12):
    return np.stack([np.linspace(x0, x1, n), np.full(n, y)], axis=1)


def ego(pos=(0.0, 0.0)):
    h = np.array([[pos[0] - 2, pos[1]], [pos[0] - 1, pos[1]], list(pos)], dtype=float)
    return Agent(0, Trajectory(h, Frame.GLOBAL), Trajectory(np.zeros((12, 2)), Frame.GLOBAL))


def other(pos, id_=1):
    h = np.tile(np.asarray(pos, dtype=float), (3, 1))
    return Agent(id_, Trajectory(h, Frame.GLOBAL), Trajectory(np.tile(h[-1], (12, 1)), Frame.GLOBAL))


def scene(**kw):
    base = dict(drivable=[ROAD], agents=[ego()], region="t")
    base.update(kw)
    return Scene(**base)


# -- parsing -----------------------------------------------------------------


def test_parse_no_cross():
    assert rl.parse_rule("no_cross(traffic_light, signal_red)") == NoCross(Kind.TRAFFIC_LIGHT, Condition.SIGNAL_RED)


def test_trailing_and_offset():
    with pytest.raises(rl.RuleSyntaxError) as ei:
        rl.parse_rule("within_drivable and")
    assert ei.value.offset == 20


@pytest.mark.parametrize(
    "text",
    ["no_cross(zebra, always)", "yield_at(stop_sign, 0)", "yield_at(stop_sign, -3)", "frobnicate", "within_drivable or (ped_priority", "no_cross(stop_sign, signal_red)"],
)
def test_parse_errors(text):
    with pytest.raises(rl.RuleSyntaxError):
        rl.parse_rule(text)


def test_whitespace_insensitive():
    assert rl.parse_rule("  yield_at( stop_sign |yield ,15 )") == YieldAt((Kind.STOP_SIGN, Kind.YIELD), 15.0)


def test_left_associative_same_precedence():
    e = rl.parse_rule("within_drivable or ped_priority and not within_drivable")
    assert e == And(Or(WithinDrivable(), PedPriority()), Not(WithinDrivable()))


atoms = st.one_of(
    st.just(WithinDrivable()),
    st.just(PedPriority()),
    st.sampled_from(
        [NoCross(Kind.TRAFFIC_LIGHT, Condition.SIGNAL_RED), NoCross(Kind.CROSSING, Condition.CROSSING_ACTIVE), NoCross(Kind.STOP_SIGN, Condition.ALWAYS), NoCross(Kind.YIELD, Condition.CONFLICT_PRESENT)]
    ),
    st.builds(
        YieldAt,
        st.lists(st.sampled_from(list(Kind)), min_size=1, max_size=3).map(tuple),
        st.floats(0.01, 500.0, allow_nan=False),
    ),
)
exprs = st.recursive(atoms, lambda c: st.one_of(st.builds(And, c, c), st.builds(Or, c, c), st.builds(Not, c)), max_leaves=8)


@settings(max_examples=200, deadline=None)
@given(exprs)
def test_print_parse_round_trip(e):
    assert rl.parse_rule(rl.to_text(e)) == e


def test_rule_file(tmp_path):
    p = tmp_path / "r.txt"
    p.write_text("# header\nroad: within_drivable  # trailing\n\nred: no_cross(traffic_light, signal_red)\n")
    rules = rl.load_rules(p)
    assert [r.name for r in rules] == ["road", "red"]
    with pytest.raises(rl.RuleSyntaxError):
        rl.parse_rule_file("no colon here")


# -- evaluation --------------------------------------------------------------


def test_inside_drivable():
    assert rl.evaluate(WithinDrivable(), scene(), line(0, 50))


def test_leaving_drivable():
    assert not rl.evaluate(WithinDrivable(), scene(), line(0, 50, y=6.0))


def test_drivable_union():
    s = scene(drivable=[rect(-10, 20, -2, 5), rect(20, 60, -2, 5)])
    assert rl.evaluate(WithinDrivable(), s, line(0, 50))


def test_red_light_crossing():
    red = rule = rl.parse_rule("no_cross(traffic_light, signal_red)")
    zone = StopZone(rect(20, 22, -2, 2), ZoneKind.TRAFFIC_LIGHT, Signal.RED)
    assert not rl.evaluate(red, scene(stop_zones=[zone]), line(0, 40))
    assert rl.evaluate(rule, scene(stop_zones=[zone]), line(0, 15))
    green = StopZone(zone.polygon, ZoneKind.TRAFFIC_LIGHT, Signal.GREEN)
    assert rl.evaluate(red, scene(stop_zones=[green]), line(0, 40))


def test_yield_conflict_radius():
    zone = StopZone(rect(20, 22, -2, 2), ZoneKind.STOP_SIGN)
    rule = YieldAt((Kind.STOP_SIGN,), 15.0)
    near = scene(stop_zones=[zone], agents=[ego(), other((25.0, 10.0))])
    far = scene(stop_zones=[zone], agents=[ego(), other((25.0, 40.0))])
    assert not rl.evaluate(rule, near, line(0, 40))
    assert rl.evaluate(rule, far, line(0, 40))
    assert rl.evaluate(rule, near, line(0, 15))


def test_ped_priority_active_only():
    active = Crossing(rect(30, 33, -2, 5), True)
    idle = Crossing(rect(30, 33, -2, 5), False)
    assert not rl.evaluate(PedPriority(), scene(crossings=[active]), line(0, 40))
    assert rl.evaluate(PedPriority(), scene(crossings=[idle]), line(0, 40))


def test_composite_is_conjunction():
    s = scene(crossings=[Crossing(rect(30, 33, -2, 5), True)])
    for traj in (line(0, 40), line(0, 20), line(0, 20, y=8.0), line(0, 40, y=8.0)):
        both = rl.evaluate(rl.parse_rule("within_drivable and ped_priority"), s, traj)
        assert both == (rl.evaluate(WithinDrivable(), s, traj) and rl.evaluate(PedPriority(), s, traj))


def _scene_with_everything():
    return scene(
        stop_zones=[StopZone(rect(20, 22, -2, 2), ZoneKind.TRAFFIC_LIGHT, Signal.RED), StopZone(rect(60, 62, -2, 2), ZoneKind.YIELD)],
        crossings=[Crossing(rect(40, 43, -2, 5), True)],
        agents=[ego(), other((61.0, 8.0))],
    )


def test_rigid_motion_equivariance():
    s = _scene_with_everything()
    rng = np.random.default_rng(0)
    trajs = np.stack([line(0, x, y) for x in (10, 30, 50, 70) for y in (-1, 0, 3, 7)])
    t, r = (rng.uniform(-500, 500), rng.uniform(-500, 500)), rng.uniform(-3, 3)
    mv = lambda p: geo.to_global(p, t, r)  # noqa: E731
    moved = Scene(
        [mv(p) for p in s.drivable],
        [StopZone(mv(z.polygon), z.kind, z.signal) for z in s.stop_zones],
        [Crossing(mv(c.polygon), c.active) for c in s.crossings],
        [Agent(a.id, Trajectory(mv(a.history.points), Frame.GLOBAL), a.future, a.cls) for a in s.agents],
        0, "t", Pose(),
    )
    for r_ in rl.default_rules():
        a = rl.evaluate_batch(r_.expr, s, trajs)
        b = rl.evaluate_batch(r_.expr, moved, np.stack([mv(x) for x in trajs]))
        np.testing.assert_array_equal(a, b)


# -- labelling ---------------------------------------------------------------


def _local_dataset(scenes):
    return Dataset([Sample(sc, Trajectory(np.zeros((3, 2))), Trajectory(np.zeros((12, 2))), np.zeros(30)) for sc in scenes])


def _anchor_fan():
    ys = np.linspace(-4, 8, 4)
    xs = [15, 35, 55, 75]
    return AnchorSet(np.stack([line(1, x, y) for x in xs for y in ys]), 1.0)


def test_single_rule_modes_agree(small_grid, small_anchors):
    r = rl.default_rules(["stop-red"])
    a = rl.label_dataset(r, small_grid, small_anchors, "per-rule")[0]
    b = rl.label_dataset(r, small_grid, small_anchors, "unified")[0]
    np.testing.assert_array_equal(a.entries, b.entries)


def test_no_zones_vacuous():
    ds = _local_dataset([scene() for _ in range(3)])
    for m in rl.label_dataset(rl.default_rules(rl.RULE_SETS["stop"]), ds, _anchor_fan()):
        assert m.entries.all()


def test_cells_match_direct_evaluation(small_grid, small_curve):
    anchors = AnchorSet(small_grid.futures()[:16], 1.0)
    samples = list(small_grid)[:10] + list(small_curve)[:10]
    ds = Dataset(samples)
    rules = rl.default_rules()
    mats = rl.label_dataset(rules, ds, anchors)
    for m, r in zip(mats, rules):
        for i, s in enumerate(samples):
            pose = s.scene.ego_pose
            for k in range(16):
                glob = geo.to_global(anchors.anchors[k], pose.translation, pose.rotation)
                assert m.entries[i, k] == rl.evaluate(r.expr, s.scene, glob)


def test_unified_is_and(small_grid, small_anchors):
    rules = rl.default_rules()
    per = rl.label_dataset(rules, small_grid, small_anchors, "per-rule")
    uni = rl.label_dataset(rules, small_grid, small_anchors, "unified")[0]
    np.testing.assert_array_equal(uni.entries, np.logical_and.reduce([m.entries for m in per]))


def test_parallel_equals_sequential(small_grid, small_anchors):
    rules = rl.default_rules()
    seq = rl.label_dataset(rules, small_grid, small_anchors)
    par = rl.label_dataset(rules, small_grid, small_anchors, workers=2)
    assert seq == par


def test_hash_mismatch(small_grid, small_anchors):
    ds = Dataset(list(small_grid), anchor_hash="deadbeef")
    with pytest.raises(rl.AnchorHashMismatch):
        rl.label_dataset(rl.default_rules(), ds, small_anchors)


def test_matrix_round_trip(tmp_path, small_grid, small_anchors):
    m = rl.label_dataset(rl.default_rules(["within-drivable"]), small_grid, small_anchors)[0]
    rl.save_matrix(m, tmp_path / "m.bin")
    assert rl.load_matrix(tmp_path / "m.bin") == m
