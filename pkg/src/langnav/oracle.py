"""Ground-truth grounder: the supervision source and gold closed-loop driver.

Given the true route for a command, the oracle plays the human annotator:
it picks the farthest visible navigable region along the route (or the
final goal region once that is close and visible), rasterizes it into the
current camera, and supplies the short-horizon future trajectory mask.
`record_episode` drives the ego with these targets and records every frame,
synthesizing clicks whenever the latched target changes, which is how the
navigation dataset is produced.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (CameraModel, EmptyMaskError, GroundPoint, Pose2D,
                       SemanticRaster, project, rasterize_nav_rect,
                       rasterize_polyline)
from . import worldsim as ws
from .command import HALT_KINDS
from .navctl import MAX_STEER, PlannerConfig, pure_pursuit
from . import datastore

LIGHTING_TAGS = ("noon", "sunset", "overcast", "night")


class OffRouteError(Exception):
    """Ego has diverged too far from the ground-truth route."""


@dataclass(frozen=True)
class OracleConfig:
    final_radius: float = 25.0      # goal visible within this -> final click
    lookahead: float = 20.0         # intermediate region search horizon
    # chord-to-route bound for reachability; 0.7 m keeps pursuit tracking
    # tight through corners, looser values let the car shave them
    corridor: float = 0.7
    off_route: float = 10.0         # beyond this the oracle gives up
    traj_horizon: int = 20          # future-trajectory samples at 1 m
    relatch_lead: float = 6.0       # re-click when this close to the target


@dataclass(frozen=True)
class GroundingOutput:
    nav_mask: SemanticRaster
    traj_mask: SemanticRaster
    target: GroundPoint
    is_final: bool
    maneuver_index: int


@dataclass
class RouteState:
    """A route polyline with driving progress measured along it."""

    points: np.ndarray              # (K, 2) raw route polyline
    goal_pose: Pose2D
    progress: float = 0.0
    lane_ids: tuple = ()
    maneuver_ends: tuple = ()       # cumulative arc length per maneuver
    _grid: np.ndarray = field(default=None, repr=False)
    _grid_s: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.total = float(ws.polyline_length(self.points))
        if self._grid is None:
            step = 0.5
            n = max(int(math.floor(self.total / step)) + 1, 2)
            ss = np.linspace(0.0, self.total, n)
            self._grid_s = ss
            self._grid = np.array([ws.point_along(self.points, s)[:2]
                                   for s in ss])

    def start_pose(self):
        x, y, yaw = ws.point_along(self.points, 0.0)
        return Pose2D(x, y, yaw)

    def point_at(self, s):
        x, y, _ = ws.point_along(self.points, min(max(s, 0.0), self.total))
        return GroundPoint(x, y)

    def tangent_at(self, s):
        return ws.point_along(self.points,
                              min(max(s, 0.0), self.total))[2]

    def distance_to_route(self, x, y):
        return float(np.min(np.hypot(self._grid[:, 0] - x,
                                     self._grid[:, 1] - y)))

    def arc_of(self, x, y):
        """Arc position of the route sample nearest to (x, y)."""
        d = np.hypot(self._grid[:, 0] - x, self._grid[:, 1] - y)
        return float(self._grid_s[int(np.argmin(d))])


def make_route_state(generated_route) -> RouteState:
    return RouteState(points=generated_route.points,
                      goal_pose=generated_route.goal_pose,
                      lane_ids=tuple(generated_route.lane_ids),
                      maneuver_ends=tuple(
                          getattr(generated_route, "maneuver_ends", ())))


def update_progress(rs: RouteState, ego_x, ego_y):
    """Monotone progress: nearest route sample at or ahead of the old one."""
    ahead = (rs._grid_s >= rs.progress - 1e-9) & \
        (rs._grid_s <= rs.progress + 25.0)
    idx = np.nonzero(ahead)[0]
    d = np.hypot(rs._grid[idx, 0] - ego_x, rs._grid[idx, 1] - ego_y)
    best = idx[int(np.argmin(d))]
    return max(rs.progress, float(rs._grid_s[best]))


def _maneuver_index(rs: RouteState, progress):
    if not rs.maneuver_ends:
        return 0
    ends = np.asarray(rs.maneuver_ends)
    return int(min(np.searchsorted(ends, progress, side="right"),
                   len(ends) - 1))


def _chord_in_corridor(rs: RouteState, x0, y0, p1: GroundPoint, tol,
                       skip=2.0):
    """True when the straight chord to p1 stays within tol of the route.

    The first skip meters are exempt: the ego's own lateral error is not
    the chord's fault, and charging it here would starve the selector of
    every route-hugging target exactly when the car needs one to recover.
    """
    dist = math.hypot(p1.x - x0, p1.y - y0)
    n = max(int(dist), 2)
    for t in np.linspace(0.0, 1.0, n):
        if t * dist < skip:
            continue
        x = x0 + (p1.x - x0) * t
        y = y0 + (p1.y - y0) * t
        if rs.distance_to_route(x, y) > tol:
            return False
    return True


def _traj_mask(rs: RouteState, ego_pose, cam, cfg):
    pts = [rs.point_at(rs.progress + k) for k in range(cfg.traj_horizon)]
    return rasterize_polyline(pts, ego_pose, cam)


def _nav_mask(target, heading, ego_pose, cam):
    try:
        return rasterize_nav_rect(target, heading, ego_pose, cam)
    except EmptyMaskError:
        return SemanticRaster.zeros(cam.width, cam.height)


def oracle_ground(world, actors, ego, rs: RouteState, cam: CameraModel,
                  cfg: OracleConfig = OracleConfig()) -> GroundingOutput:
    """One grounding decision from the current state.

    The goal region wins once it projects in-bounds with less than
    final_radius meters of route left to drive; otherwise the farthest
    route point within the lookahead that is both visible and reachable
    along a near-route chord is chosen.  Straight-line goal distance is
    deliberately not the gate: on an L-shaped route the goal can sit 20 m
    away across the corner while 30 m of driving remain, and handing out
    the final region there would send the car over the curb.
    """
    pose = ego.pose if hasattr(ego, "pose") else ego
    if rs.distance_to_route(pose.x, pose.y) > cfg.off_route:
        raise OffRouteError(
            f"ego {rs.distance_to_route(pose.x, pose.y):.1f} m off route")

    goal = GroundPoint(rs.goal_pose.x, rs.goal_pose.y)
    remaining = rs.total - rs.progress
    if remaining <= cfg.final_radius and \
            project(goal, pose, cam) is not None and \
            _chord_in_corridor(rs, pose.x, pose.y, goal, cfg.corridor):
        target, heading, is_final = goal, rs.goal_pose.yaw, True
    else:
        is_final = False
        target, heading = None, None
        offsets = np.arange(float(int(cfg.lookahead)), 0.5, -1.0)
        for off in offsets:             # farthest tight chord wins
            s = rs.progress + off
            if s > rs.total:
                continue
            cand = rs.point_at(s)
            if project(cand, pose, cam) is None:
                continue
            if _chord_in_corridor(rs, pose.x, pose.y, cand, cfg.corridor):
                target, heading = cand, rs.tangent_at(s)
                break
        if target is None:
            # no chord hugs the route (ego drifted inside a corner): aim at
            # the nearest visible route point so the controller pulls back
            # onto the line instead of cutting further ahead; skip points
            # inside the planner's reach radius or the car would just park
            for off in offsets[::-1]:
                s = rs.progress + off
                if s > rs.total:
                    continue
                cand = rs.point_at(s)
                if math.hypot(cand.x - pose.x, cand.y - pose.y) < 3.0:
                    continue
                if project(cand, pose, cam) is not None:
                    target, heading = cand, rs.tangent_at(s)
                    break
        if target is None:
            # nothing reachable projects; keep pointing along the route
            s = min(rs.progress + 2.0, rs.total)
            target, heading = rs.point_at(s), rs.tangent_at(s)

    return GroundingOutput(
        nav_mask=_nav_mask(target, heading, pose, cam),
        traj_mask=_traj_mask(rs, pose, cam, cfg),
        target=target,
        is_final=is_final,
        maneuver_index=_maneuver_index(rs, rs.progress),
    )


def _click_region(plan, rs: RouteState, target: GroundPoint):
    """Which click an intermediate target belongs to.

    Movement maneuvers each own one intermediate region (the stretch after
    their junction/lane transition); a halt maneuver has none of its own,
    its destination is the final goal region, so targets latched on the
    approach collapse into the preceding movement's click.
    """
    idx = _maneuver_index(rs, rs.arc_of(target.x, target.y))
    if plan.maneuvers[idx].kind in HALT_KINDS and idx > 0:
        idx -= 1
    return idx


@dataclass(frozen=True)
class RecordConfig:
    sim: ws.SimConfig = field(default_factory=ws.SimConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    cam: CameraModel = field(default_factory=CameraModel.default)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    actor_seed: int = 0
    n_vehicles: int = 1
    n_pedestrians: int = 2
    # per-step steering jitter and per-episode bias, radians; both zero by
    # default so plain recordings drive the center line exactly
    steer_noise: float = 0.0
    steer_bias: float = 0.0


def record_episode(world, plan, rs: RouteState,
                   cfg: RecordConfig = RecordConfig(),
                   actors=None) -> datastore.EpisodeRecord:
    """Drive the route with the oracle and record every frame.

    A synthetic click is stored when the latched target first lands in a
    new region: once at episode start, once whenever the target crosses
    into the next maneuver's stretch of the route, and once for the final
    goal.  In-between latches merely slide the 20 m window forward and are
    the automated part of the annotation, not human clicks.  A failed
    drive (off-route, timeout, collision) gets verdict "failed".

    With steer_noise/steer_bias set, the driver wanders off the center
    line while every frame keeps its oracle-true labels, so the recording
    covers the slightly-wrong states an imperfect learned policy will
    actually visit instead of only the ideal line.

    Passing actors overrides the default per-route traffic.  Recordings
    that should be frame-identical until their routes diverge (same spawn,
    commands differing only in a maneuver) must share one actor list;
    deriving actors from each route separately would tag each command with
    its own traffic pattern and leak the answer into the pixels.
    """
    rng = np.random.default_rng(cfg.actor_seed)
    lighting = str(rng.choice(LIGHTING_TAGS))
    bias = float(rng.normal(0.0, cfg.steer_bias)) if cfg.steer_bias else 0.0
    if actors is None:
        actors = ws.generate_actors(world, cfg.actor_seed,
                                    n_vehicles=cfg.n_vehicles,
                                    n_pedestrians=cfg.n_pedestrians,
                                    avoid_lane_ids=rs.lane_ids)
    ego = ws.EgoState(pose=rs.start_pose())
    frames = []
    clicks = []
    latched = None
    clicked_region = None
    verdict = "failed"

    while len(frames) <= cfg.sim.max_steps:
        rs.progress = update_progress(rs, ego.pose.x, ego.pose.y)
        front = ws.render_front_view(world, actors, ego, cfg.cam)

        relatch = latched is None
        if latched is not None and not latched.is_final:
            goal = GroundPoint(rs.goal_pose.x, rs.goal_pose.y)
            goal_dist = math.hypot(goal.x - ego.pose.x, goal.y - ego.pose.y)
            if goal_dist <= cfg.oracle.final_radius and \
                    project(goal, ego.pose, cfg.cam) is not None:
                relatch = True
            elif latched.target.dist(
                    GroundPoint(ego.pose.x, ego.pose.y)) < \
                    cfg.oracle.relatch_lead:
                relatch = True
            elif project(latched.target, ego.pose, cfg.cam) is None:
                relatch = True
        if relatch:
            try:
                fresh = oracle_ground(world, actors, ego, rs, cfg.cam,
                                      cfg.oracle)
            except OffRouteError:
                break
            region = "final" if fresh.is_final else \
                _click_region(plan, rs, fresh.target)
            moved = latched is None or \
                fresh.target.dist(latched.target) > 0.5
            if region != clicked_region and moved:
                uv = project(fresh.target, ego.pose, cfg.cam)
                if uv is not None:
                    clicks.append(datastore.Click(len(frames), uv[0], uv[1],
                                                  fresh.target))
                    clicked_region = region
            latched = fresh

        heading = rs.goal_pose.yaw if latched.is_final else \
            rs.tangent_at(rs.arc_of(latched.target.x, latched.target.y))
        nav = _nav_mask(latched.target, heading, ego.pose, cfg.cam)
        traj = _traj_mask(rs, ego.pose, cfg.cam, cfg.oracle)
        frames.append(datastore.EpisodeFrame(front, nav, traj, ego.pose))

        steer, speed, reached = pure_pursuit(ego, latched.target, cfg.planner)
        if latched.is_final and reached:
            while ego.speed > 1e-3 and len(frames) <= cfg.sim.max_steps:
                actors, ego, _ = ws.step_sim(world, actors, ego, (0.0, 0.0),
                                             cfg.sim)
                front = ws.render_front_view(world, actors, ego, cfg.cam)
                nav = _nav_mask(latched.target, rs.goal_pose.yaw, ego.pose,
                                cfg.cam)
                traj = _traj_mask(rs, ego.pose, cfg.cam, cfg.oracle)
                frames.append(datastore.EpisodeFrame(front, nav, traj,
                                                     ego.pose))
            verdict = "accepted"
            break
        if cfg.steer_noise or cfg.steer_bias:
            steer = float(np.clip(steer + bias +
                                  rng.normal(0.0, cfg.steer_noise),
                                  -MAX_STEER, MAX_STEER))
        actors, ego, collided = ws.step_sim(world, actors, ego,
                                            (steer, speed), cfg.sim)
        if collided:
            break

    return datastore.EpisodeRecord(
        command=plan.raw_text,
        plan=plan,
        map_seed=world.seed,
        spawn_pose=rs.start_pose(),
        lighting=lighting,
        clicks=tuple(clicks),
        route=rs.points,
        goal_pose=rs.goal_pose,
        frames=tuple(frames),
        cam=cfg.cam,
        verdict=verdict,
    )


class OracleGrounder:
    """Grounding-interface adapter so run_episode can use the oracle.

    The grounding interface carries only frames/context/text; the oracle
    additionally needs the true ego pose, which the episode runner injects
    through the optional observe() hook before each query.
    """

    def __init__(self, world, rs: RouteState, cam: CameraModel,
                 cfg: OracleConfig = OracleConfig()):
        self.world = world
        self.rs = rs
        self.cam = cam
        self.cfg = cfg
        self._pose = rs.start_pose()

    def observe(self, ego):
        self._pose = ego.pose if hasattr(ego, "pose") else ego

    def ground(self, frames, context, text):
        self.rs.progress = update_progress(self.rs, self._pose.x,
                                           self._pose.y)
        out = oracle_ground(self.world, [], self._pose, self.rs, self.cam,
                            self.cfg)
        return out.nav_mask, out.traj_mask
