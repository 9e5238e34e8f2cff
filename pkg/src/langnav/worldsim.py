"""Deterministic procedural town, kinematic ego, and semantic rendering.

The town is a grid of axis-aligned roads. Every feature, including traffic
lights, is a painted ground footprint, so a camera frame is exactly the
per-pixel inverse projection of the ground plane and ground-truth masks live
in the same geometry as the rendered views.

Class palette: 0 void, 1 road, 2 lane marking, 3 sidewalk, 4 vehicle,
5 pedestrian, 6 bus stop, 7 traffic light, 8 building.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, GroundPoint, Pose2D, SemanticRaster, \
    ground_grid

CLASS_VOID = 0
CLASS_ROAD = 1
CLASS_MARKING = 2
CLASS_SIDEWALK = 3
CLASS_VEHICLE = 4
CLASS_PEDESTRIAN = 5
CLASS_BUS_STOP = 6
CLASS_TRAFFIC_LIGHT = 7
CLASS_BUILDING = 8
NUM_CLASSES = 9

COLORS = ("black", "white", "red", "blue", "green", "yellow")
SIDES = ("left", "right")

LANE_OFFSET = 1.75          # lane center distance from road centerline
LANE_WIDTH = 3.5
ROAD_HALF = 5.5             # paved surface half-width
SIDEWALK_HALF = 8.0         # sidewalk outer edge
MARKING_HALF = 0.15
JUNCTION_HALF = 5.5         # junction box reach along each road
PARKING_OFFSET = 4.5        # parked-car center offset from centerline
END_MARGIN = 20.0           # road extension past the outermost junctions
VEHICLE_LENGTH = 4.5
VEHICLE_WIDTH = 2.0
PED_SIZE = 0.5

TURN_RADIUS_RIGHT = JUNCTION_HALF - LANE_OFFSET   # 3.75
TURN_RADIUS_LEFT = JUNCTION_HALF + LANE_OFFSET    # 7.25


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    wheelbase: float = 2.5
    max_speed: float = 5.0
    max_steer: float = 0.61
    max_steps: int = 600
    max_accel: float = 2.0
    max_decel: float = 4.0

    def __post_init__(self):
        if self.dt <= 0 or self.max_steps <= 0:
            raise ValueError("dt and max_steps must be positive")


@dataclass(frozen=True)
class Lane:
    """Directed lane-center polyline; kind is 'link' (between junctions)
    or 'conn' (through a junction, with its turn label)."""
    id: int
    kind: str
    points: np.ndarray          # (K, 2) float64, direction of travel
    turn: str | None = None     # conn only: left / right / straight
    width: float = LANE_WIDTH

    def length(self) -> float:
        return float(polyline_length(self.points))


@dataclass(frozen=True)
class Landmark:
    """Painted footprint. side is relative to travel along the positive
    road axis (+x for horizontal roads, +y for vertical); callers facing
    the other way flip it."""
    class_id: int
    polygon: np.ndarray         # (K, 2) convex, CCW
    color: str = ""
    side: str = ""


@dataclass
class Actor:
    id: int
    class_id: int               # CLASS_VEHICLE or CLASS_PEDESTRIAN
    pose: Pose2D
    speed: float = 0.0
    route: np.ndarray | None = None   # (K, 2); None = stationary
    color: str = ""
    loop: bool = False
    progress: float = 0.0       # arc length along route

    def footprint(self) -> np.ndarray:
        if self.class_id == CLASS_PEDESTRIAN:
            return rect_corners(self.pose.x, self.pose.y, self.pose.yaw,
                                PED_SIZE, PED_SIZE)
        return rect_corners(self.pose.x, self.pose.y, self.pose.yaw,
                            VEHICLE_LENGTH, VEHICLE_WIDTH)


@dataclass
class EgoState:
    pose: Pose2D
    speed: float = 0.0
    steer: float = 0.0
    odometer: float = 0.0

    def footprint(self) -> np.ndarray:
        return rect_corners(self.pose.x, self.pose.y, self.pose.yaw,
                            VEHICLE_LENGTH, VEHICLE_WIDTH)


@dataclass
class WorldMap:
    seed: int
    xs: np.ndarray              # vertical road centerline x positions
    ys: np.ndarray              # horizontal road centerline y positions
    lanes: list
    successors: dict            # lane id -> tuple of lane ids
    landmarks: list
    spawn_points: list
    _by_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {ln.id: ln for ln in self.lanes}

    def lane(self, lane_id: int) -> Lane:
        return self._by_id[lane_id]

    @property
    def junctions(self) -> list:
        return [(float(x), float(y)) for x in self.xs for y in self.ys]

    @property
    def bounds(self) -> tuple:
        return (float(self.xs[0] - END_MARGIN),
                float(self.ys[0] - END_MARGIN),
                float(self.xs[-1] + END_MARGIN),
                float(self.ys[-1] + END_MARGIN))


# ---- small geometry helpers ----

def rect_corners(cx, cy, yaw, length, width) -> np.ndarray:
    """CCW corners of an oriented rectangle, length along yaw."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def point_in_convex(px, py, poly: np.ndarray) -> bool:
    """Scalar membership test for a CCW convex polygon (edges inclusive)."""
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0) < 0.0:
            return False
    return True


def points_in_convex(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.ones(len(pts), dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        cross = (x1 - x0) * (pts[:, 1] - y0) - (y1 - y0) * (pts[:, 0] - x0)
        inside &= cross >= 0.0
    return inside


def rects_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quads."""
    for poly in (a, b):
        for i in range(len(poly)):
            edge = poly[(i + 1) % len(poly)] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def polyline_length(points: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def polyline_cumlen(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def point_along(points: np.ndarray, s: float):
    """Position and tangent yaw at arc length s (clamped to the ends)."""
    cum = polyline_cumlen(points)
    s = min(max(s, 0.0), cum[-1])
    i = int(np.searchsorted(cum, s, side="right") - 1)
    i = min(i, len(points) - 2)
    seg = points[i + 1] - points[i]
    seg_len = float(np.linalg.norm(seg))
    t = 0.0 if seg_len == 0.0 else (s - cum[i]) / seg_len
    p = points[i] + t * seg
    yaw = math.atan2(seg[1], seg[0])
    return float(p[0]), float(p[1]), yaw


def resample_polyline(points: np.ndarray, spacing: float) -> np.ndarray:
    """Evenly spaced samples including both endpoints."""
    total = polyline_length(points)
    n = max(int(math.floor(total / spacing)) + 1, 2)
    ss = np.linspace(0.0, total, n)
    return np.array([point_along(points, s)[:2] for s in ss])


# ---- map generation ----

def _side_tag(axis: str, offset_sign: float) -> str:
    # cross(travel dir, offset) < 0 means the offset side is to the right
    if axis == "v":
        return "right" if offset_sign > 0 else "left"
    return "left" if offset_sign > 0 else "right"


def generate_map(seed: int) -> WorldMap:
    """Grid town: 3x3 junctions, two lanes per road, arcs through every
    junction, buildings in the blocks, parked cars, bus stops, and painted
    traffic-light markers. Pure function of the seed."""
    rng = np.random.default_rng(seed)
    xs = np.concatenate([[0.0], np.cumsum(rng.uniform(55.0, 70.0, size=2))])
    ys = np.concatenate([[0.0], np.cumsum(rng.uniform(55.0, 70.0, size=2))])

    lanes = []
    starts = {}

    def key(p):
        return (round(float(p[0]), 4), round(float(p[1]), 4))

    def add(kind, pts, turn=None):
        ln = Lane(len(lanes), kind, np.asarray(pts, dtype=np.float64), turn)
        lanes.append(ln)
        starts.setdefault(key(ln.points[0]), []).append(ln.id)
        return ln

    lo_y, hi_y = ys[0] - END_MARGIN, ys[-1] + END_MARGIN
    lo_x, hi_x = xs[0] - END_MARGIN, xs[-1] + END_MARGIN

    # links along vertical roads (two directions), split at junction boxes
    for x in xs:
        cuts = [lo_y] + [float(y) for y in ys] + [hi_y]
        for a, b in zip(cuts[:-1], cuts[1:]):
            y0 = a + (JUNCTION_HALF if a != lo_y else 0.0)
            y1 = b - (JUNCTION_HALF if b != hi_y else 0.0)
            if y1 <= y0:
                continue
            add("link", [[x + LANE_OFFSET, y0], [x + LANE_OFFSET, y1]])
            add("link", [[x - LANE_OFFSET, y1], [x - LANE_OFFSET, y0]])
    for y in ys:
        cuts = [lo_x] + [float(x) for x in xs] + [hi_x]
        for a, b in zip(cuts[:-1], cuts[1:]):
            x0 = a + (JUNCTION_HALF if a != lo_x else 0.0)
            x1 = b - (JUNCTION_HALF if b != hi_x else 0.0)
            if x1 <= x0:
                continue
            add("link", [[x0, y - LANE_OFFSET], [x1, y - LANE_OFFSET]])
            add("link", [[x1, y + LANE_OFFSET], [x0, y + LANE_OFFSET]])

    # junction connectors: straight-through plus quarter-circle arcs
    def arc(p0, heading, turn):
        if turn == "right":
            r = TURN_RADIUS_RIGHT
            nx, ny = math.sin(heading), -math.cos(heading)
            sweep = -math.pi / 2.0
        else:
            r = TURN_RADIUS_LEFT
            nx, ny = -math.sin(heading), math.cos(heading)
            sweep = math.pi / 2.0
        cx, cy = p0[0] + r * nx, p0[1] + r * ny
        a0 = math.atan2(p0[1] - cy, p0[0] - cx)
        n = max(int(abs(sweep) * r / 0.4) + 1, 3)
        ts = np.linspace(0.0, 1.0, n)
        return np.stack([cx + r * np.cos(a0 + sweep * ts),
                         cy + r * np.sin(a0 + sweep * ts)], axis=1)

    for jx in xs:
        for jy in ys:
            approaches = [
                ((jx + LANE_OFFSET, jy - JUNCTION_HALF), math.pi / 2),
                ((jx - LANE_OFFSET, jy + JUNCTION_HALF), -math.pi / 2),
                ((jx - JUNCTION_HALF, jy - LANE_OFFSET), 0.0),
                ((jx + JUNCTION_HALF, jy + LANE_OFFSET), math.pi),
            ]
            for p0, heading in approaches:
                dx, dy = math.cos(heading), math.sin(heading)
                p1 = (p0[0] + 2 * JUNCTION_HALF * dx,
                      p0[1] + 2 * JUNCTION_HALF * dy)
                add("conn", [list(p0), list(p1)], turn="straight")
                add("conn", arc(p0, heading, "right"), turn="right")
                add("conn", arc(p0, heading, "left"), turn="left")

    successors = {}
    for ln in lanes:
        nxt = tuple(sorted(starts.get(key(ln.points[-1]), ())))
        successors[ln.id] = tuple(i for i in nxt if i != ln.id)

    landmarks = []

    # traffic-light markers: one painted square at each junction corner (NE)
    for jx in xs:
        for jy in ys:
            landmarks.append(Landmark(
                CLASS_TRAFFIC_LIGHT,
                rect_corners(jx + 6.5, jy + 6.5, 0.0, 1.0, 1.0)))

    # bus stops: sidewalk rectangles beside seeded interior links
    n_stops = int(rng.integers(1, 3))
    for _ in range(n_stops):
        x = float(rng.choice(xs))
        j = int(rng.integers(0, len(ys) - 1))
        yc = (ys[j] + ys[j + 1]) / 2.0 + float(rng.uniform(-8.0, 8.0))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        landmarks.append(Landmark(
            CLASS_BUS_STOP,
            rect_corners(x + sign * 6.75, yc, math.pi / 2, 4.0, 2.0),
            side=_side_tag("v", sign)))

    # buildings: one or two axis-aligned blocks inside each city block
    for i in range(len(xs) - 1):
        for j in range(len(ys) - 1):
            zone = (xs[i] + 10.0, ys[j] + 10.0, xs[i + 1] - 10.0,
                    ys[j + 1] - 10.0)
            placed = []
            for _ in range(int(rng.integers(1, 3))):
                w = float(rng.uniform(10.0, 22.0))
                h = float(rng.uniform(10.0, 22.0))
                cx = float(rng.uniform(zone[0] + w / 2, zone[2] - w / 2))
                cy = float(rng.uniform(zone[1] + h / 2, zone[3] - h / 2))
                rect = rect_corners(cx, cy, 0.0, w, h)
                if any(rects_intersect(rect, r) for r in placed):
                    continue
                placed.append(rect)
                landmarks.append(Landmark(CLASS_BUILDING, rect))

    # parked cars in the outer strips of interior links, clear of junctions
    for ln in [l for l in lanes if l.kind == "link"]:
        length = ln.length()
        if length < 30.0 or rng.random() > 0.6:
            continue
        d = ln.points[1] - ln.points[0]
        axis = "v" if abs(d[1]) > abs(d[0]) else "h"
        along = float(rng.uniform(13.0, length - 13.0))
        px, py, yaw = point_along(ln.points, along)
        # push from the lane center out to the parking strip on its right
        nx, ny = math.sin(yaw), -math.cos(yaw)
        gap = PARKING_OFFSET - LANE_OFFSET
        cx, cy = px + nx * gap, py + ny * gap
        if axis == "v":
            road = xs[np.argmin(np.abs(cx - xs))]
            tag = _side_tag("v", math.copysign(1.0, cx - road))
        else:
            road = ys[np.argmin(np.abs(cy - ys))]
            tag = _side_tag("h", math.copysign(1.0, cy - road))
        landmarks.append(Landmark(
            CLASS_VEHICLE,
            rect_corners(cx, cy, yaw, VEHICLE_LENGTH, VEHICLE_WIDTH),
            color=str(rng.choice(COLORS)), side=tag))
        # sometimes a second car on the same strip, leaving a gap to
        # park in between
        if along + 9.0 <= length - 13.0 and rng.random() < 0.45:
            qx, qy, qyaw = point_along(ln.points, along + 9.0)
            landmarks.append(Landmark(
                CLASS_VEHICLE,
                rect_corners(qx + nx * gap, qy + ny * gap, qyaw,
                             VEHICLE_LENGTH, VEHICLE_WIDTH),
                color=str(rng.choice(COLORS)), side=tag))

    spawn_points = []
    for ln in lanes:
        if ln.kind != "link":
            continue
        length = ln.length()
        if length < 25.0:
            continue
        # one spawn shortly before the link's end (approaching a junction)
        # and, on long links, one mid-link with room to pull over ahead
        px, py, yaw = point_along(ln.points, length - 12.0)
        spawn_points.append(Pose2D(px, py, yaw))
        if length >= 40.0:
            px, py, yaw = point_along(ln.points, length / 2.0)
            spawn_points.append(Pose2D(px, py, yaw))

    return WorldMap(int(seed), xs, ys, lanes, successors, landmarks,
                    spawn_points)


# ---- actors ----

def generate_actors(world: WorldMap, seed: int, n_vehicles: int = 1,
                    n_pedestrians: int = 2, avoid_lane_ids=()) -> list:
    """Scripted traffic. Vehicles loop a right-turn circuit around a block
    whose lanes avoid avoid_lane_ids; pedestrians pace a sidewalk stretch.
    With fixed inputs the result is deterministic."""
    rng = np.random.default_rng(seed)
    avoid = set(avoid_lane_ids)
    actors = []
    next_id = 1

    circuits = []
    for start in [ln for ln in world.lanes if ln.kind == "link"]:
        chain = [start.id]
        ok = True
        cur = start.id
        for _ in range(8):
            nxts = world.successors.get(cur, ())
            conns = [i for i in nxts if world.lane(i).turn == "right"]
            if not conns:
                ok = False
                break
            cur = conns[0]
            chain.append(cur)
            outs = world.successors.get(cur, ())
            if not outs:
                ok = False
                break
            cur = outs[0]
            if cur == start.id:
                break
            chain.append(cur)
        if ok and cur == start.id and len(chain) >= 8 \
                and not avoid.intersection(chain):
            circuits.append(chain)

    rng.shuffle(circuits)
    for chain in circuits[:n_vehicles]:
        pts = [world.lane(chain[0]).points]
        for lid in chain[1:]:
            pts.append(world.lane(lid).points[1:])
        route = np.concatenate(pts + [world.lane(chain[0]).points[:1]])
        x, y, yaw = point_along(route, 0.0)
        actors.append(Actor(next_id, CLASS_VEHICLE, Pose2D(x, y, yaw),
                            speed=float(rng.uniform(2.0, 3.5)), route=route,
                            color=str(rng.choice(COLORS)), loop=True))
        next_id += 1

    links = [ln for ln in world.lanes
             if ln.kind == "link" and ln.length() > 25.0]
    for _ in range(n_pedestrians):
        ln = links[int(rng.integers(0, len(links)))]
        d = ln.points[1] - ln.points[0]
        yaw = math.atan2(d[1], d[0])
        nx, ny = math.sin(yaw), -math.cos(yaw)
        mid = float(rng.uniform(10.0, ln.length() - 10.0))
        px, py, _ = point_along(ln.points, mid)
        off = 6.75 - LANE_OFFSET
        sx, sy = px + nx * off, py + ny * off
        walk = np.array([[sx - math.cos(yaw) * 6.0, sy - math.sin(yaw) * 6.0],
                         [sx + math.cos(yaw) * 6.0,
                          sy + math.sin(yaw) * 6.0]])
        x, y, wyaw = point_along(walk, 0.0)
        actors.append(Actor(next_id, CLASS_PEDESTRIAN, Pose2D(x, y, wyaw),
                            speed=float(rng.uniform(0.8, 1.4)), route=walk,
                            loop=False))
        next_id += 1
    return actors


def _advance_actor(actor: Actor, dt: float) -> Actor:
    if actor.route is None or actor.speed <= 0.0:
        return actor
    total = polyline_length(actor.route)
    s = actor.progress + actor.speed * dt
    if actor.loop:
        s %= total
        x, y, yaw = point_along(actor.route, s)
    else:
        # ping-pong: fold position into [0, total], flip heading on return
        phase = s % (2.0 * total)
        if phase <= total:
            x, y, yaw = point_along(actor.route, phase)
        else:
            x, y, yaw = point_along(actor.route, 2.0 * total - phase)
            yaw = math.atan2(-math.sin(yaw), -math.cos(yaw))
    return dataclasses.replace(actor, pose=Pose2D(x, y, yaw), progress=s)


def step_sim(world: WorldMap, actors: list, ego: EgoState, controls,
             cfg: SimConfig):
    """One tick of the kinematic bicycle plus scripted actors.

    controls is (steer, target_speed); both are clamped to actuator bounds.
    Returns (actors, ego, collided).
    """
    steer = float(np.clip(controls[0], -cfg.max_steer, cfg.max_steer))
    target = float(np.clip(controls[1], 0.0, cfg.max_speed))

    dv = target - ego.speed
    dv = min(max(dv, -cfg.max_decel * cfg.dt), cfg.max_accel * cfg.dt)
    speed = ego.speed + dv

    pose = ego.pose
    step_len = speed * cfg.dt
    x = pose.x + step_len * math.cos(pose.yaw)
    y = pose.y + step_len * math.sin(pose.yaw)
    yaw = pose.yaw + (speed / cfg.wheelbase) * math.tan(steer) * cfg.dt
    new_ego = EgoState(Pose2D(x, y, yaw), speed, steer,
                       ego.odometer + step_len)

    new_actors = [_advance_actor(a, cfg.dt) for a in actors]
    ego_rect = new_ego.footprint()
    collided = any(rects_intersect(ego_rect, a.footprint())
                   for a in new_actors)
    return new_actors, new_ego, collided


# ---- semantic classification and rendering ----

def _road_distances(world: WorldMap, x, y):
    """Per-point perpendicular distances to the nearest vertical and
    horizontal centerline, with points beyond the road extents pushed to
    infinity. Works on scalars and arrays alike."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xmin, ymin, xmax, ymax = world.bounds
    dv = np.abs(x[..., None] - world.xs).min(axis=-1)
    dv = np.where((y >= ymin) & (y <= ymax), dv, np.inf)
    dh = np.abs(y[..., None] - world.ys).min(axis=-1)
    dh = np.where((x >= xmin) & (x <= xmax), dh, np.inf)
    return dv, dh


def _marking_mask(dv, dh):
    # center stripes, interrupted across junction boxes
    on_v = (dv <= MARKING_HALF) & (dh > JUNCTION_HALF)
    on_h = (dh <= MARKING_HALF) & (dv > JUNCTION_HALF)
    return on_v | on_h


def classify_points(world: WorldMap, actors: list, pts: np.ndarray
                    ) -> np.ndarray:
    """Vectorized class ids for (N, 2) ground points."""
    x, y = pts[:, 0], pts[:, 1]
    cls = np.zeros(len(pts), dtype=np.uint8)
    dv, dh = _road_distances(world, x, y)
    droad = np.minimum(dv, dh)
    cls[(droad > ROAD_HALF) & (droad <= SIDEWALK_HALF)] = CLASS_SIDEWALK
    cls[droad <= ROAD_HALF] = CLASS_ROAD
    cls[_marking_mask(dv, dh)] = CLASS_MARKING
    # paint in reverse so the first landmark in the list wins overlaps
    for lm in reversed(world.landmarks):
        cls[points_in_convex(pts, lm.polygon)] = lm.class_id
    for a in actors:
        if a.class_id == CLASS_VEHICLE:
            cls[points_in_convex(pts, a.footprint())] = CLASS_VEHICLE
    for a in actors:
        if a.class_id == CLASS_PEDESTRIAN:
            cls[points_in_convex(pts, a.footprint())] = CLASS_PEDESTRIAN
    return cls


def sample_semantic(world: WorldMap, actors: list, p) -> int:
    """Scalar classification of one ground point; priority pedestrian >
    vehicle > landmark > marking > road > sidewalk > void. This is the
    definitional kernel the renderer must agree with."""
    px = p.x if isinstance(p, GroundPoint) else float(p[0])
    py = p.y if isinstance(p, GroundPoint) else float(p[1])
    for a in actors:
        if a.class_id == CLASS_PEDESTRIAN and \
                point_in_convex(px, py, a.footprint()):
            return CLASS_PEDESTRIAN
    for a in actors:
        if a.class_id == CLASS_VEHICLE and \
                point_in_convex(px, py, a.footprint()):
            return CLASS_VEHICLE
    for lm in world.landmarks:
        if point_in_convex(px, py, lm.polygon):
            return int(lm.class_id)
    dv, dh = _road_distances(world, px, py)
    dv, dh = float(dv), float(dh)
    if bool(_marking_mask(dv, dh)):
        return CLASS_MARKING
    droad = min(dv, dh)
    if droad <= ROAD_HALF:
        return CLASS_ROAD
    if droad <= SIDEWALK_HALF:
        return CLASS_SIDEWALK
    return CLASS_VOID


def render_front_view(world: WorldMap, actors: list, ego: EgoState,
                      cam: CameraModel) -> SemanticRaster:
    """Front semantic camera frame: every below-horizon pixel samples the
    ground plane; the rest is void."""
    xy, valid = ground_grid(ego.pose, cam)
    flat = xy.reshape(-1, 2)
    classes = classify_points(world, actors, flat).reshape(cam.height,
                                                           cam.width)
    out = np.where(valid, classes, np.uint8(CLASS_VOID)).astype(np.uint8)
    return SemanticRaster(out)


# ---- WMAP serialization ----

WMAP_MAGIC = b"WMAP"
WMAP_VERSION = 1
_TURNS = (None, "straight", "right", "left")


class MapFormatError(Exception):
    """Serialized map blob is malformed."""


def serialize_map(world: WorldMap) -> bytes:
    out = bytearray()
    out += WMAP_MAGIC
    out += struct.pack("<Hq", WMAP_VERSION, world.seed)
    for arr in (world.xs, world.ys):
        out += struct.pack("<I", len(arr))
        out += np.asarray(arr, dtype="<f8").tobytes()
    out += struct.pack("<I", len(world.lanes))
    for ln in world.lanes:
        out += struct.pack("<IBBfI", ln.id, 0 if ln.kind == "link" else 1,
                           _TURNS.index(ln.turn), ln.width, len(ln.points))
        out += np.ascontiguousarray(ln.points, dtype="<f8").tobytes()
    out += struct.pack("<I", len(world.successors))
    for lid in sorted(world.successors):
        nxt = world.successors[lid]
        out += struct.pack(f"<II{len(nxt)}I", lid, len(nxt), *nxt)
    out += struct.pack("<I", len(world.landmarks))
    for lm in world.landmarks:
        color = COLORS.index(lm.color) + 1 if lm.color else 0
        side = SIDES.index(lm.side) + 1 if lm.side else 0
        out += struct.pack("<BBBI", lm.class_id, color, side,
                           len(lm.polygon))
        out += np.ascontiguousarray(lm.polygon, dtype="<f8").tobytes()
    out += struct.pack("<I", len(world.spawn_points))
    for sp in world.spawn_points:
        out += struct.pack("<3d", sp.x, sp.y, sp.yaw)
    return bytes(out)


def deserialize_map(blob: bytes) -> WorldMap:
    if blob[:4] != WMAP_MAGIC:
        raise MapFormatError(f"bad magic {blob[:4]!r}")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise MapFormatError("truncated map blob")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    def take_f64(n):
        nonlocal off
        size = 8 * n
        if off + size > len(blob):
            raise MapFormatError("truncated map blob")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy()
        off += size
        return arr

    version, seed = take("<Hq")
    if version != WMAP_VERSION:
        raise MapFormatError(f"unsupported version {version}")
    xs = take_f64(take("<I")[0])
    ys = take_f64(take("<I")[0])
    lanes = []
    for _ in range(take("<I")[0]):
        lid, kind, turn, width, npts = take("<IBBfI")
        pts = take_f64(2 * npts).reshape(npts, 2)
        lanes.append(Lane(lid, "link" if kind == 0 else "conn", pts,
                          _TURNS[turn], float(width)))
    successors = {}
    for _ in range(take("<I")[0]):
        lid, count = take("<II")
        successors[lid] = tuple(take(f"<{count}I")) if count else ()
    landmarks = []
    for _ in range(take("<I")[0]):
        class_id, color, side, npts = take("<BBBI")
        poly = take_f64(2 * npts).reshape(npts, 2)
        landmarks.append(Landmark(class_id, poly,
                                  COLORS[color - 1] if color else "",
                                  SIDES[side - 1] if side else ""))
    spawns = []
    for _ in range(take("<I")[0]):
        x, y, yaw = take("<3d")
        spawns.append(Pose2D(x, y, yaw))
    if off != len(blob):
        raise MapFormatError(f"{len(blob) - off} trailing bytes")
    return WorldMap(seed, xs, ys, lanes, successors, landmarks, spawns)
