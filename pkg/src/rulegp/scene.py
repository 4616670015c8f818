"""Synthetic driving scenes, per-sample feature encoding and dataset files.

Scenes are laid out in the ego's local frame (ego at the origin heading +x,
right-hand traffic), mirrored for left-hand traffic, and then placed in the
world with a random rigid pose. Ground-truth ego futures are drawn from a
broad behaviour distribution and accepted or rejected against the default
rule set so that the compliance rate matches the region profile.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geometry as geo

DT = 0.5
HISTORY_LEN = 3
FUTURE_LEN = 12
FORMAT_VERSION = 1

LANE_WIDTH = 3.5


class Frame(str, enum.Enum):
    EGO_LOCAL = "ego_local"
    GLOBAL = "global"


class DrivingSide(str, enum.Enum):
    RIGHT = "right"
    LEFT = "left"


class ZoneKind(str, enum.Enum):
    TRAFFIC_LIGHT = "traffic_light"
    STOP_SIGN = "stop_sign"
    YIELD = "yield"


class Signal(str, enum.Enum):
    RED = "red"
    GREEN = "green"
    NOT_APPLICABLE = "not_applicable"


class AgentClass(str, enum.Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"


@dataclass(eq=False)
class Trajectory:
    points: np.ndarray
    frame: Frame = Frame.EGO_LOCAL

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("trajectory coordinates must be finite")

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        return (
            isinstance(other, Trajectory)
            and self.frame == other.frame
            and np.array_equal(self.points, other.points)
        )


@dataclass(eq=False)
class StopZone:
    polygon: np.ndarray
    kind: ZoneKind
    signal: Signal = Signal.NOT_APPLICABLE


@dataclass(eq=False)
class Crossing:
    polygon: np.ndarray
    active: bool


@dataclass(eq=False)
class Agent:
    id: int
    history: Trajectory
    future: Trajectory
    cls: AgentClass = AgentClass.VEHICLE


@dataclass(frozen=True)
class Pose:
    translation: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0


@dataclass(eq=False)
class Scene:
    drivable: list[np.ndarray]
    stop_zones: list[StopZone] = field(default_factory=list)
    crossings: list[Crossing] = field(default_factory=list)
    agents: list[Agent] = field(default_factory=list)
    ego_id: int = 0
    region: str = ""
    ego_pose: Pose = Pose()
    driving_side: DrivingSide = DrivingSide.RIGHT

    def ego(self) -> Agent:
        return next(a for a in self.agents if a.id == self.ego_id)

    def others(self) -> list[Agent]:
        return [a for a in self.agents if a.id != self.ego_id]

    def __eq__(self, other):
        return isinstance(other, Scene) and scene_to_dict(self) == scene_to_dict(other)


@dataclass(frozen=True)
class RegionProfile:
    name: str
    driving_side: DrivingSide
    curvature_mix: float
    stop_density: float
    crossing_density: float
    compliance_rate: float

    def __post_init__(self):
        if not 0.0 <= self.curvature_mix <= 1.0:
            raise ValueError("curvature_mix must lie in [0, 1]")
        if not 0.0 <= self.compliance_rate <= 1.0:
            raise ValueError("compliance_rate must lie in [0, 1]")
        if self.stop_density < 0 or self.crossing_density < 0:
            raise ValueError("densities must be non-negative")


# The two built-in regions are the out-of-distribution axis: grid-like roads with
# right-hand traffic versus mostly curved roads with left-hand traffic.
PROFILES = {
    "grid-right": RegionProfile("grid-right", DrivingSide.RIGHT, 0.15, 0.8, 0.6, 0.9),
    "curve-left": RegionProfile("curve-left", DrivingSide.LEFT, 0.75, 0.6, 0.5, 0.9),
}


@dataclass(eq=False)
class Sample:
    scene: Scene
    history: Trajectory
    future: Trajectory
    features: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and self.scene == other.scene
            and self.history == other.history
            and self.future == other.future
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True)
class EncoderInputConfig:
    max_agents: int = 4
    n_rays: int = 8
    ray_clamp: float = 50.0

    @property
    def dim(self) -> int:
        return 3 + 4 * self.max_agents + self.n_rays + 4 + 1 + 1


# ---------------------------------------------------------------------------
# scene layout helpers (ego-local frame, right-hand traffic)


def _integrate_path(curvature, s_min: float, s_max: float, ds: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integrate a planar curve with unit-speed parametrisation through the origin."""

    def run(sign):
        n = int(math.ceil(abs(s_max if sign > 0 else s_min) / ds))
        s = sign * ds * np.arange(n + 1)
        step = np.diff(s)
        k = np.array([curvature(x) for x in 0.5 * (s[:-1] + s[1:])])
        th = np.concatenate([[0.0], np.cumsum(k * step)])
        mid = 0.5 * (th[:-1] + th[1:])
        inc = step[:, None] * np.stack([np.cos(mid), np.sin(mid)], axis=1)
        pts = np.concatenate([np.zeros((1, 2)), np.cumsum(inc, axis=0)])
        return s, pts, th

    sf, pf, tf = run(1)
    sb, pb, tb = run(-1)
    s = np.concatenate([sb[::-1], sf[1:]])
    pts = np.concatenate([pb[::-1], pf[1:]])
    th = np.concatenate([tb[::-1], tf[1:]])
    return s, pts, th


def _offset(pts: np.ndarray, th: np.ndarray, d: float) -> np.ndarray:
    normal = np.stack([-np.sin(th), np.cos(th)], axis=1)
    return pts + d * normal


def _band(pts, th, lo, hi) -> np.ndarray:
    return np.concatenate([_offset(pts, th, lo), _offset(pts, th, hi)[::-1]])


def _strip(s, pts, th, s0, depth, lo, hi) -> np.ndarray:
    """Quadrilateral across a path between arc lengths s0 and s0+depth."""
    p = []
    for si, (a, b) in ((s0, (lo, hi)), (s0 + depth, (hi, lo))):
        x = np.interp(si, s, pts[:, 0])
        y = np.interp(si, s, pts[:, 1])
        t = np.interp(si, s, th)
        n = np.array([-math.sin(t), math.cos(t)])
        p.append(np.array([x, y]) + a * n)
        p.append(np.array([x, y]) + b * n)
    return np.array(p)


def _rect(x0, x1, y0, y1) -> np.ndarray:
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


class _Route:
    """Arc-length parametrised polyline used to place moving objects."""

    def __init__(self, pts: np.ndarray):
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        self.pts = pts
        self.s = np.concatenate([[0.0], np.cumsum(seg)])

    def at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        return np.stack([np.interp(s, self.s, self.pts[:, 0]), np.interp(s, self.s, self.pts[:, 1])], axis=-1)

    @property
    def length(self) -> float:
        return float(self.s[-1])


def _turn_route(x_start: float, radius: float, left: bool, tail: float = 80.0) -> _Route:
    """Straight along +x to ``x_start``, a quarter arc, then straight."""
    pre = np.concatenate([np.linspace(-20.0, 0.0, 41), np.linspace(0.0, x_start, max(2, int(x_start / 0.5) + 1))[1:]])
    pre = np.stack([pre, np.zeros_like(pre)], axis=1)
    ang = np.linspace(0.0, math.pi / 2, 40)
    sign = 1.0 if left else -1.0
    arc = np.stack([x_start + radius * np.sin(ang), sign * radius * (1 - np.cos(ang))], axis=1)
    post_y = sign * (radius + np.linspace(0.0, tail, 81))
    post = np.stack([np.full_like(post_y, x_start + radius), post_y], axis=1)
    pts = np.concatenate([pre, arc[1:], post[1:]])
    return _Route(pts)


def _speed_profile(rng, v0: float, a0: float, stop_at: float | None) -> np.ndarray:
    """Arc-length travelled at each future timestep."""
    t = DT * np.arange(1, FUTURE_LEN + 1)
    if stop_at is not None and v0 > 0.1 and stop_at > 0.5:
        decel = v0 * v0 / (2.0 * stop_at)
        t_stop = v0 / decel
        tt = np.minimum(t, t_stop)
        return v0 * tt - 0.5 * decel * tt * tt
    if stop_at is not None:
        return np.zeros_like(t)
    a = a0
    if a < 0:
        t_stop = v0 / -a if v0 > 0 else 0.0
        tt = np.minimum(t, t_stop)
        return v0 * tt + 0.5 * a * tt * tt
    v_cap = 16.0
    t_cap = max(0.0, (v_cap - v0) / a) if a > 0 else np.inf
    tt = np.minimum(t, t_cap)
    return v0 * tt + 0.5 * a * tt * tt + np.maximum(t - t_cap, 0.0) * (v0 + a * tt)


@dataclass
class _Layout:
    drivable: list
    stop_zones: list
    crossings: list
    routes: dict  # name -> _Route for the ego
    stop_lines: list  # arc lengths along the follow route where stopping makes sense
    others: list  # (route, speed, cls, s0)


def _grid_layout(rng, profile) -> _Layout:
    main = _rect(-80.0, 160.0, -LANE_WIDTH / 2, 1.5 * LANE_WIDTH)
    drivable = [main]
    stop_zones, crossings, stop_lines, others = [], [], [], []
    routes = {"follow": _Route(np.array([[-80.0, 0.0], [0.0, 0.0], [160.0, 0.0]]))}
    has_intersection = rng.random() < 0.75
    if has_intersection:
        D = float(rng.uniform(12.0, 45.0))
        drivable.append(_rect(D, D + 2 * LANE_WIDTH, -100.0, 100.0))
        r_right = float(rng.uniform(3.5, 5.5))
        r_left = float(rng.uniform(7.0, 11.0))
        routes["right"] = _turn_route(D + LANE_WIDTH / 2 - r_right, r_right, left=False)
        routes["left"] = _turn_route(D + 1.5 * LANE_WIDTH - r_left, r_left, left=True)
        if rng.random() < profile.stop_density:
            kind = [ZoneKind.TRAFFIC_LIGHT, ZoneKind.STOP_SIGN, ZoneKind.YIELD][int(rng.choice(3, p=[0.5, 0.3, 0.2]))]
            signal = Signal.NOT_APPLICABLE
            if kind == ZoneKind.TRAFFIC_LIGHT:
                signal = Signal.RED if rng.random() < 0.5 else Signal.GREEN
            stop_zones.append(StopZone(_rect(D - 5.0, D - 3.0, -LANE_WIDTH / 2, LANE_WIDTH / 2), kind, signal))
            stop_lines.append(D - 5.0)
            if kind != ZoneKind.TRAFFIC_LIGHT and rng.random() < 0.6:
                # cross traffic approaching the junction
                y0 = float(rng.uniform(8.0, 30.0))
                side = 1.0 if rng.random() < 0.5 else -1.0
                x_lane = D + (0.5 if side > 0 else 1.5) * LANE_WIDTH
                route = _Route(np.array([[x_lane, side * 100.0], [x_lane, -side * 100.0]]))
                others.append((route, float(rng.uniform(3.0, 10.0)), AgentClass.VEHICLE, 100.0 - y0))
        if rng.random() < profile.crossing_density:
            poly = _rect(D - 3.0, D - 0.2, -LANE_WIDTH / 2, 1.5 * LANE_WIDTH)
            active = rng.random() < 0.5
            crossings.append(Crossing(poly, bool(active)))
            stop_lines.append(D - 3.0)
            if active:
                y = float(rng.uniform(-1.0, 4.5))
                x = float(rng.uniform(D - 2.5, D - 0.7))
                route = _Route(np.array([[x, y], [x, y + 20.0]]))
                others.append((route, float(rng.uniform(0.5, 1.5)), AgentClass.PEDESTRIAN, 0.0))
    elif rng.random() < profile.crossing_density:
        s0 = float(rng.uniform(12.0, 45.0))
        crossings.append(Crossing(_rect(s0, s0 + 3.0, -LANE_WIDTH / 2, 1.5 * LANE_WIDTH), bool(rng.random() < 0.5)))
        stop_lines.append(s0)
        if rng.random() < profile.stop_density:
            signal = Signal.RED if rng.random() < 0.5 else Signal.GREEN
            stop_zones.append(StopZone(_rect(s0 - 2.5, s0 - 0.5, -LANE_WIDTH / 2, LANE_WIDTH / 2), ZoneKind.TRAFFIC_LIGHT, signal))
            stop_lines.append(s0 - 2.5)
        if crossings[-1].active:
            y = float(rng.uniform(-1.0, 4.5))
            route = _Route(np.array([[s0 + 1.5, y], [s0 + 1.5, y + 20.0]]))
            others.append((route, float(rng.uniform(0.5, 1.5)), AgentClass.PEDESTRIAN, 0.0))
    _add_traffic(rng, routes["follow"], others)
    return _Layout(drivable, stop_zones, crossings, routes, stop_lines, others)


def _curve_layout(rng, profile) -> _Layout:
    radius = float(rng.uniform(25.0, 90.0))
    k = (1.0 if rng.random() < 0.5 else -1.0) / radius
    start = float(rng.uniform(-15.0, 25.0))
    end = start + (math.pi / 2) / abs(k)

    def curvature(s):
        return k if start <= s < end else 0.0

    s, pts, th = _integrate_path(curvature, -60.0, 160.0)
    drivable = [_band(pts, th, -LANE_WIDTH / 2, 1.5 * LANE_WIDTH)]
    routes = {"follow": _Route(pts)}
    stop_zones, crossings, stop_lines, others = [], [], [], []
    if rng.random() < profile.crossing_density:
        s0 = float(rng.uniform(12.0, 45.0))
        crossings.append(Crossing(_strip(s, pts, th, s0, 3.0, -LANE_WIDTH / 2, 1.5 * LANE_WIDTH), bool(rng.random() < 0.5)))
        stop_lines.append(s0)
        if rng.random() < profile.stop_density:
            kind = [ZoneKind.TRAFFIC_LIGHT, ZoneKind.YIELD][int(rng.choice(2, p=[0.7, 0.3]))]
            signal = Signal.NOT_APPLICABLE
            if kind == ZoneKind.TRAFFIC_LIGHT:
                signal = Signal.RED if rng.random() < 0.5 else Signal.GREEN
            stop_zones.append(StopZone(_strip(s, pts, th, s0 - 2.5, 2.0, -LANE_WIDTH / 2, LANE_WIDTH / 2), kind, signal))
            stop_lines.append(s0 - 2.5)
        if crossings[-1].active:
            c = crossings[-1].polygon.mean(axis=0)
            d = crossings[-1].polygon[1] - crossings[-1].polygon[0]
            d = d / np.linalg.norm(d)
            route = _Route(np.array([c - 2.0 * d, c + 18.0 * d]))
            others.append((route, float(rng.uniform(0.5, 1.5)), AgentClass.PEDESTRIAN, float(rng.uniform(0.0, 3.0))))
    elif rng.random() < profile.stop_density:
        s0 = float(rng.uniform(12.0, 45.0))
        stop_zones.append(StopZone(_strip(s, pts, th, s0, 2.0, -LANE_WIDTH / 2, LANE_WIDTH / 2), ZoneKind.YIELD))
        stop_lines.append(s0)
        # merging traffic from the opposite lane side
        if rng.random() < 0.6:
            i = int(np.searchsorted(s, s0 + 8.0))
            opp = _offset(pts, th, LANE_WIDTH)[i:][::-1]
            others.append((_Route(opp), float(rng.uniform(3.0, 9.0)), AgentClass.VEHICLE, 0.0))
    _add_traffic(rng, routes["follow"], others, opposite=_offset(pts, th, LANE_WIDTH)[::-1])
    return _Layout(drivable, stop_zones, crossings, routes, stop_lines, others)


def _add_traffic(rng, follow: _Route, others: list, opposite: np.ndarray | None = None):
    if rng.random() < 0.4:
        s_lead = float(rng.uniform(15.0, 60.0))
        others.append((follow, float(rng.uniform(3.0, 12.0)), AgentClass.VEHICLE, _arc_at_origin(follow) + s_lead))
    if rng.random() < 0.5:
        if opposite is None:
            opposite = np.array([[160.0, LANE_WIDTH], [-80.0, LANE_WIDTH]])
        route = _Route(opposite)
        s0 = float(rng.uniform(0.4, 0.8)) * route.length
        others.append((route, float(rng.uniform(4.0, 12.0)), AgentClass.VEHICLE, s0))


def _agent_tracks(route: _Route, speed: float, s0: float, bbox) -> tuple[np.ndarray, np.ndarray]:
    th = DT * np.arange(-(HISTORY_LEN - 1), 1)
    tf = DT * np.arange(1, FUTURE_LEN + 1)
    hist = route.at(np.clip(s0 + speed * th, 0.0, route.length))
    fut = route.at(np.clip(s0 + speed * tf, 0.0, route.length))
    lo, hi = bbox
    inside = np.all((fut >= lo) & (fut <= hi), axis=1)
    if not inside.all():
        first_out = int(np.argmin(inside))
        hold = fut[first_out - 1] if first_out > 0 else hist[-1]
        fut[first_out:] = hold
    return hist, fut


def _mirror(points: np.ndarray) -> np.ndarray:
    out = np.array(points, dtype=np.float64, copy=True)
    out[..., 1] *= -1.0
    return out


def _ego_future(rng, layout: _Layout, v0: float) -> np.ndarray:
    names = sorted(layout.routes)
    route = layout.routes[names[int(rng.integers(len(names)))]]
    stop_at = None
    if layout.stop_lines and rng.random() < 0.45:
        line = float(layout.stop_lines[int(rng.integers(len(layout.stop_lines)))])
        stop_at = line - float(rng.uniform(0.3, 3.0))
    elif rng.random() < 0.08:
        stop_at = float(rng.uniform(1.0, 25.0))
    a0 = float(rng.uniform(-2.0, 1.5))
    s = _speed_profile(rng, v0, a0, stop_at)
    fut = route.at(_arc_at_origin(route) + s)
    if rng.random() < 0.12:
        # lateral drift away from the lane
        side = 1.0 if rng.random() < 0.5 else -1.0
        rate = float(rng.uniform(0.3, 1.5))
        fut = fut + np.outer(side * rate * DT * np.arange(1, FUTURE_LEN + 1), [0.0, 1.0])
    return fut


def _arc_at_origin(route: _Route) -> float:
    d = np.linalg.norm(route.pts, axis=1)
    i = int(np.argmin(d))
    return float(route.s[i])


def _ego_history(layout: _Layout, v0: float, a_prev: float) -> np.ndarray:
    route = layout.routes["follow"]
    s_org = _arc_at_origin(route)
    t = DT * np.arange(-(HISTORY_LEN - 1), 1)
    s = v0 * t + 0.5 * a_prev * t * t
    pts = route.at(s_org + s)
    pts[-1] = 0.0
    return pts


def generate_scene(profile: RegionProfile, seed: int, *, return_sample_parts: bool = False):
    """Generate one scene deterministically from ``(profile, seed)``.

    With ``return_sample_parts=True`` also returns the ego history and future
    in the ego-local frame.
    """
    from .rules import default_rules, evaluate_all  # circular at import time

    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), _profile_key(profile)]))
    curved = rng.random() < profile.curvature_mix
    layout = _curve_layout(rng, profile) if curved else _grid_layout(rng, profile)
    v0 = float(rng.uniform(0.0, 14.0)) if rng.random() > 0.08 else 0.0
    a_prev = float(rng.uniform(-1.0, 1.0)) if v0 > 2.0 else 0.0
    history = _ego_history(layout, v0, a_prev)

    lo = np.array([-100.0, -120.0])
    hi = np.array([200.0, 120.0])
    agents_local = []
    for i, (route, speed, cls, s0) in enumerate(layout.others):
        h, f = _agent_tracks(route, speed, s0, (lo, hi))
        agents_local.append((i + 1, cls, h, f))

    left = profile.driving_side == DrivingSide.LEFT
    conv = _mirror if left else (lambda p: np.asarray(p, dtype=np.float64))
    angle = float(rng.uniform(-math.pi, math.pi))
    trans = (float(rng.uniform(-1000.0, 1000.0)), float(rng.uniform(-1000.0, 1000.0)))
    pose = Pose(trans, angle)

    def world(p):
        return geo.to_global(conv(p), trans, angle)

    def world_poly(p):
        q = world(p)
        return q[::-1].copy() if left else q

    others = [
        Agent(i, Trajectory(world(h), Frame.GLOBAL), Trajectory(world(f), Frame.GLOBAL), cls)
        for i, cls, h, f in agents_local
    ]
    base = Scene(
        drivable=[world_poly(p) for p in layout.drivable],
        stop_zones=[StopZone(world_poly(z.polygon), z.kind, z.signal) for z in layout.stop_zones],
        crossings=[Crossing(world_poly(c.polygon), c.active) for c in layout.crossings],
        agents=[],
        ego_id=0,
        region=profile.name,
        ego_pose=pose,
        driving_side=profile.driving_side,
    )
    base.agents = others

    rules = default_rules()
    want = rng.random() < profile.compliance_rate
    future = None
    for _ in range(40):
        cand = conv(_ego_future(rng, layout, v0))
        ok = evaluate_all(rules, base, geo.to_global(cand, trans, angle))
        if ok == want and np.all((cand >= lo) & (cand <= hi)):
            future = cand
            break
    if future is None:
        # deterministic fallbacks: standing still is always compliant, a jump
        # far off the road never is
        future = np.zeros((FUTURE_LEN, 2)) if want else np.tile([0.0, -20.0], (FUTURE_LEN, 1))
    hist_local = conv(history)
    ego = Agent(
        0,
        Trajectory(geo.to_global(hist_local, trans, angle), Frame.GLOBAL),
        Trajectory(geo.to_global(future, trans, angle), Frame.GLOBAL),
        AgentClass.VEHICLE,
    )
    base.agents = [ego] + others
    if return_sample_parts:
        return base, Trajectory(hist_local), Trajectory(future)
    return base


def _profile_key(profile: RegionProfile) -> int:
    return int.from_bytes(hashlib.sha256(profile.name.encode()).digest()[:8], "little")


# ---------------------------------------------------------------------------
# feature encoding


def encode_features(sample: Sample, scene: Scene, config: EncoderInputConfig = EncoderInputConfig()) -> np.ndarray:
    """Fixed-layout, ego-frame feature vector for one sample.

    Layout: speed, longitudinal acceleration, yaw rate; ``max_agents`` x
    (x, y, vx, vy) for the nearest agents; ``n_rays`` ray distances to the
    drivable boundary; distance to the stop zone ahead and a one-hot of its
    signal (red, green, n/a); distance to the nearest active crossing; a
    driving-side flag (1 for left-hand traffic).
    """
    hist = sample.history.points
    if len(hist) < HISTORY_LEN:
        raise ValueError(f"history needs {HISTORY_LEN} points, got {len(hist)}")
    hist = hist[-HISTORY_LEN:]
    v1 = (hist[1] - hist[0]) / DT
    v2 = (hist[2] - hist[1]) / DT
    speed = float(np.hypot(*v2))
    accel = (speed - float(np.hypot(*v1))) / DT
    if speed > 1e-6 and np.hypot(*v1) > 1e-6:
        dyaw = math.atan2(v2[1], v2[0]) - math.atan2(v1[1], v1[0])
        yaw_rate = math.remainder(dyaw, 2 * math.pi) / DT
    else:
        yaw_rate = 0.0

    t = np.asarray(scene.ego_pose.translation, dtype=np.float64)
    rot = scene.ego_pose.rotation
    R = geo.rotation_matrix(rot)
    clamp = config.ray_clamp

    agent_block = np.zeros(4 * config.max_agents)
    rel = []
    for a in scene.others():
        h = a.history.points
        p = geo.to_local(h[-1], t, rot)
        v = (h[-1] - h[-2]) / DT @ R if len(h) >= 2 else np.zeros(2)
        rel.append((float(np.hypot(*p)), a.id, p, v))
    rel.sort(key=lambda r: (r[0], r[1]))
    for j, (_, _, p, v) in enumerate(rel[: config.max_agents]):
        agent_block[4 * j : 4 * j + 4] = [p[0], p[1], v[0], v[1]]

    bearings = [2 * math.pi * k / config.n_rays for k in range(config.n_rays)]
    directions = np.stack([R @ np.array([math.cos(b), math.sin(b)]) for b in bearings])
    rays = geo.ray_exit_distances(t, directions, scene.drivable, clamp)

    heading = R @ np.array([1.0, 0.0])
    stop_dist, stop_onehot = clamp, np.zeros(3)
    for z in scene.stop_zones:
        d = geo.ray_hit_distance(t, heading, [z.polygon], clamp)
        if d < stop_dist:
            stop_dist = d
            stop_onehot = np.zeros(3)
            stop_onehot[[Signal.RED, Signal.GREEN, Signal.NOT_APPLICABLE].index(z.signal)] = 1.0
    cross = clamp
    for c in scene.crossings:
        if c.active:
            cross = min(cross, geo.point_polygon_distance(t, c.polygon))
    side = 1.0 if scene.driving_side == DrivingSide.LEFT else 0.0
    return np.concatenate([[speed, accel, yaw_rate], agent_block, rays, [stop_dist], stop_onehot, [cross, side]])


def make_sample(profile: RegionProfile, seed: int, config: EncoderInputConfig = EncoderInputConfig()) -> Sample:
    scene, hist, fut = generate_scene(profile, seed, return_sample_parts=True)
    sample = Sample(scene, hist, fut, np.empty(0))
    sample.features = encode_features(sample, scene, config)
    return sample


def generate_dataset(profile: RegionProfile, n: int, seed: int, config: EncoderInputConfig = EncoderInputConfig()) -> "Dataset":
    seeds = np.random.SeedSequence([int(seed), _profile_key(profile)]).generate_state(n, dtype=np.uint64)
    samples = [make_sample(profile, int(s), config) for s in seeds]
    return Dataset(samples, config=config)


# ---------------------------------------------------------------------------
# dataset container and file format


class DatasetFormatError(ValueError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class ChecksumMismatchError(DatasetFormatError):
    pass


@dataclass(eq=False)
class Dataset:
    samples: list[Sample]
    config: EncoderInputConfig = EncoderInputConfig()
    anchor_hash: str = ""
    dt: float = DT

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, idx):
        return self.samples[idx]

    @property
    def d(self) -> int:
        return self.config.dim

    def features(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.d))
        return np.stack([s.features for s in self.samples])

    def futures(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, FUTURE_LEN, 2))
        return np.stack([s.future.points for s in self.samples])

    def regions(self) -> list[str]:
        return [s.scene.region for s in self.samples]

    def subset(self, indices) -> "Dataset":
        return replace(self, samples=[self.samples[i] for i in indices])

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.config == other.config
            and self.anchor_hash == other.anchor_hash
            and self.dt == other.dt
            and len(self) == len(other)
            and all(a == b for a, b in zip(self.samples, other.samples))
        )


def _pts(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def scene_to_dict(scene: Scene) -> dict:
    return {
        "drivable": [_pts(p) for p in scene.drivable],
        "stop_zones": [{"polygon": _pts(z.polygon), "kind": z.kind.value, "signal": z.signal.value} for z in scene.stop_zones],
        "crossings": [{"polygon": _pts(c.polygon), "active": bool(c.active)} for c in scene.crossings],
        "agents": [
            {
                "id": a.id,
                "class": a.cls.value,
                "history": _pts(a.history.points),
                "future": _pts(a.future.points),
            }
            for a in scene.agents
        ],
        "ego_id": scene.ego_id,
        "region": scene.region,
        "driving_side": scene.driving_side.value,
        "ego_pose": {"translation": [float(v) for v in scene.ego_pose.translation], "rotation": float(scene.ego_pose.rotation)},
    }


def scene_from_dict(d: dict) -> Scene:
    arr = lambda v: np.asarray(v, dtype=np.float64).reshape(-1, 2)  # noqa: E731
    return Scene(
        drivable=[arr(p) for p in d["drivable"]],
        stop_zones=[StopZone(arr(z["polygon"]), ZoneKind(z["kind"]), Signal(z["signal"])) for z in d["stop_zones"]],
        crossings=[Crossing(arr(c["polygon"]), bool(c["active"])) for c in d["crossings"]],
        agents=[
            Agent(a["id"], Trajectory(a["history"], Frame.GLOBAL), Trajectory(a["future"], Frame.GLOBAL), AgentClass(a["class"]))
            for a in d["agents"]
        ],
        ego_id=d["ego_id"],
        region=d["region"],
        ego_pose=Pose(tuple(d["ego_pose"]["translation"]), d["ego_pose"]["rotation"]),
        driving_side=DrivingSide(d["driving_side"]),
    )


def _sample_line(s: Sample) -> str:
    rec = {
        "scene": scene_to_dict(s.scene),
        "history": _pts(s.history.points),
        "future": _pts(s.future.points),
        "features": np.asarray(s.features, dtype=np.float64).tolist(),
    }
    return json.dumps(rec, separators=(",", ":"))


def save_dataset(dataset: Dataset, path) -> None:
    lines = [_sample_line(s) for s in dataset.samples]
    digest = hashlib.sha256("\n".join(lines).encode()).hexdigest()
    header = {
        "version": FORMAT_VERSION,
        "dt": dataset.dt,
        "d": dataset.d,
        "anchor_hash": dataset.anchor_hash,
        "n": len(lines),
        "max_agents": dataset.config.max_agents,
        "n_rays": dataset.config.n_rays,
        "ray_clamp": dataset.config.ray_clamp,
        "checksum": digest,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for line in lines:
            fh.write(line + "\n")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(f"{path}: missing header")
    header = json.loads(lines[0])
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: expected version {FORMAT_VERSION}, found {header.get('version')!r}")
    body = lines[1:]
    if "checksum" in header and hashlib.sha256("\n".join(body).encode()).hexdigest() != header["checksum"]:
        raise ChecksumMismatchError(f"{path}: checksum mismatch")
    config = EncoderInputConfig(
        max_agents=header.get("max_agents", 4), n_rays=header.get("n_rays", 8), ray_clamp=header.get("ray_clamp", 50.0)
    )
    if config.dim != header["d"]:
        raise DatasetFormatError(f"{path}: header d={header['d']} inconsistent with encoder layout ({config.dim})")
    samples = []
    for line in body:
        rec = json.loads(line)
        samples.append(
            Sample(
                scene_from_dict(rec["scene"]),
                Trajectory(rec["history"]),
                Trajectory(rec["future"]),
                np.asarray(rec["features"], dtype=np.float64),
            )
        )
    return Dataset(samples, config=config, anchor_hash=header["anchor_hash"], dt=header["dt"])


class EmptySplitError(ValueError):
    pass


def split_dataset(dataset: Dataset, fractions, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint, region-stratified train/val/test split.

    Each region's samples are shuffled once with ``seed``; consecutive blocks
    of that permutation form the splits, so smaller training fractions are
    prefixes of larger ones.
    """
    if isinstance(fractions, dict):
        fractions = (fractions.get("train", 0.0), fractions.get("val", 0.0), fractions.get("test", 0.0))
    fractions = tuple(float(f) for f in fractions)
    if any(f < 0 for f in fractions) or sum(fractions) > 1.0 + 1e-12:
        raise ValueError(f"fractions must be non-negative and sum to <= 1, got {fractions}")
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(dataset.regions()):
        groups.setdefault(r, []).append(i)
    parts: list[list[int]] = [[], [], []]
    for region in sorted(groups):
        idx = np.asarray(groups[region])
        key = int.from_bytes(hashlib.sha256(region.encode()).digest()[:8], "little")
        perm = idx[np.random.default_rng([int(seed), key]).permutation(len(idx))]
        n = len(idx)
        bounds = np.round(np.cumsum((0.0,) + fractions) * n).astype(int)
        for j in range(3):
            parts[j].extend(perm[bounds[j] : bounds[j + 1]].tolist())
    for name, frac, p in zip(("train", "val", "test"), fractions, parts):
        if frac > 0 and not p:
            raise EmptySplitError(f"{name} fraction {frac} yields no samples")
    return tuple(dataset.subset(sorted(p)) for p in parts)  # type: ignore[return-value]


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Region-stratified fraction of a dataset (nested across fractions)."""
    return split_dataset(dataset, (fraction, 0.0, 0.0), seed)[0]
