"""Live navigation: mask post-processing, stop rule, and the closed loop.

A grounder (oracle, learned model, or a remote service) turns the latest
frames + command into a navigable-region mask.  This module extracts a
drive-to target from that mask, tracks it with pure pursuit, applies the
area-threshold stopping rule, and runs whole episodes.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import (CameraModel, GroundPoint, HorizonError,
                       SemanticRaster, inverse_project)
from . import worldsim as ws

MAX_STEER = 0.61
WHEELBASE = 2.5

# final goal rectangle footprint (meters); success regions inflate this
GOAL_LENGTH = 4.0
GOAL_WIDTH = 3.0
GOAL_INFLATION = 2.0


@dataclass
class StopCriterion:
    """Fire after five consecutive over-threshold mask areas."""

    area_threshold: float = 0.08
    required_consecutive: int = 5
    consecutive_count: int = 0


@dataclass(frozen=True)
class PlannerConfig:
    lookahead: float = 5.0
    reach_radius: float = 2.0
    cruise_speed: float = 4.0

    def __post_init__(self):
        if not self.lookahead > self.reach_radius > 0.0:
            raise ValueError("need lookahead > reach_radius > 0")


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    driven_path: tuple          # GroundPoint per grounder query
    stop_reason: str            # stopped | timeout | collision | horizon_failure
    steps: int

    def __post_init__(self):
        if not self.driven_path:
            raise ValueError("driven_path must be non-empty")
        if self.success and self.stop_reason != "stopped":
            raise ValueError("success requires stop_reason 'stopped'")


def largest_component_centroid(mask):
    """Centroid (u, v) and area fraction of the biggest 4-connected blob.

    Returns None for an all-zero mask.  Ties between equal-size components
    go to the one containing the lexicographically smallest (row, col)
    pixel, which is also the first one labeled in scan order.
    """
    data = mask.pixels if hasattr(mask, "pixels") else np.asarray(mask)
    binary = data > 0
    if not binary.any():
        return None
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    labels, _ = ndimage.label(binary, structure=structure)
    sizes = np.bincount(labels.ravel())[1:]
    # scipy labels components in scan order, so argmax's first-match rule
    # implements the (row, col) tie-break
    best = int(np.argmax(sizes)) + 1
    rows, cols = np.nonzero(labels == best)
    centroid = (float(cols.mean()), float(rows.mean()))
    return centroid, float(sizes[best - 1]) / binary.size


def update_stop(sc: StopCriterion, area_fraction):
    """Advance the stop counter; True exactly when the 5th in a row lands."""
    if area_fraction > sc.area_threshold:
        sc.consecutive_count += 1
    else:
        sc.consecutive_count = 0
    return sc.consecutive_count == sc.required_consecutive


def pure_pursuit(ego, target: GroundPoint, cfg: PlannerConfig,
                 wheelbase=WHEELBASE, max_steer=MAX_STEER):
    """Steer toward a world target: (steer, target_speed, reached)."""
    dx = target.x - ego.pose.x
    dy = target.y - ego.pose.y
    dist = float(np.hypot(dx, dy))
    if dist < cfg.reach_radius:
        return 0.0, 0.0, True
    alpha = np.arctan2(dy, dx) - ego.pose.yaw
    ld = min(cfg.lookahead, dist)
    steer = float(np.arctan2(2.0 * wheelbase * np.sin(alpha), ld))
    steer = float(np.clip(steer, -max_steer, max_steer))
    speed = cfg.cruise_speed
    slow_zone = 2.0 * cfg.reach_radius
    if dist < slow_zone:
        speed = cfg.cruise_speed * dist / slow_zone
    return steer, speed, False


def goal_rectangle(goal_pose, inflation=0.0):
    return ws.rect_corners(goal_pose.x, goal_pose.y, goal_pose.yaw,
                           GOAL_LENGTH + 2.0 * inflation,
                           GOAL_WIDTH + 2.0 * inflation)


def inside_goal(x, y, goal_pose, inflation=GOAL_INFLATION):
    rect = goal_rectangle(goal_pose, inflation)
    return ws.point_in_convex(x, y, rect)


class ContextTracker:
    """Top-view trace of where the ego has been this episode.

    The 64x64 map covers 64x64 m in the current ego frame with the ego at
    pixel (32, 48) facing up; the driven path is drawn as a 2 px polyline.
    """

    SIZE = 64
    EGO_PX = (32, 48)

    def __init__(self):
        self.history = []

    def push(self, pose):
        self.history.append((pose.x, pose.y))

    def render(self, pose):
        img = np.zeros((self.SIZE, self.SIZE), dtype=np.uint8)
        pts = np.asarray(self.history + [(pose.x, pose.y)])
        rel = pts - (pose.x, pose.y)
        c, s = np.cos(pose.yaw), np.sin(pose.yaw)
        fwd = rel[:, 0] * c + rel[:, 1] * s
        left = -rel[:, 0] * s + rel[:, 1] * c
        us = np.round(self.EGO_PX[0] - left).astype(int)
        vs = np.round(self.EGO_PX[1] - fwd).astype(int)
        for i in range(len(us) - 1):
            self._segment(img, us[i], vs[i], us[i + 1], vs[i + 1])
        return SemanticRaster(img * np.uint8(255))

    def _segment(self, img, u0, v0, u1, v1):
        n = int(max(abs(u1 - u0), abs(v1 - v0))) + 1
        for t in np.linspace(0.0, 1.0, n + 1):
            u = int(round(u0 + (u1 - u0) * t))
            v = int(round(v0 + (v1 - v0) * t))
            for du in (0, 1):
                for dv in (0, 1):
                    uu, vv = u + du, v + dv
                    if 0 <= uu < self.SIZE and 0 <= vv < self.SIZE:
                        img[vv, uu] = 1


@dataclass
class RunConfig:
    """Everything run_episode needs besides the world and the grounder."""

    sim: ws.SimConfig = field(default_factory=ws.SimConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    cam: CameraModel = field(default_factory=CameraModel.default)
    stop: StopCriterion = field(default_factory=StopCriterion)
    n_frames: int = 8           # grounder window T
    stride: int = 10            # sim steps between grounder queries
    actor_seed: int = 0
    n_vehicles: int = 1
    n_pedestrians: int = 2


def _brake_to_stop(world, actors, ego, cfg, steps):
    while ego.speed > 1e-3 and steps < cfg.max_steps + 100:
        actors, ego, _ = ws.step_sim(world, actors, ego, (0.0, 0.0), cfg)
        steps += 1
    return actors, ego, steps


def run_episode(world, command_text, grounder, route_state, cfg=None):
    """Drive one live episode; every failure mode lands in stop_reason.

    `grounder` must expose ground(frames, context, text) -> (nav, traj)
    with frames the rolling T-frame window, oldest first.  The ground
    truth route supplies only the spawn pose and the goal rectangle used
    for the success verdict.
    """
    cfg = cfg or RunConfig()
    # fresh counter per episode so one RunConfig can serve a whole sweep
    stop = StopCriterion(cfg.stop.area_threshold,
                         cfg.stop.required_consecutive)
    ego = ws.EgoState(pose=route_state.start_pose())
    actors = ws.generate_actors(world, cfg.actor_seed,
                                n_vehicles=cfg.n_vehicles,
                                n_pedestrians=cfg.n_pedestrians,
                                avoid_lane_ids=getattr(route_state,
                                                       "lane_ids", ()))
    tracker = ContextTracker()
    frames = []
    driven = []
    target = None
    misses = 0
    steps = 0
    stop_reason = None

    while steps <= cfg.sim.max_steps:
        if steps % cfg.stride == 0:
            frame = ws.render_front_view(world, actors, ego, cfg.cam)
            frames.append(frame)
            frames[:] = frames[-cfg.n_frames:]
            window = [frames[0]] * (cfg.n_frames - len(frames)) + frames
            tracker.push(ego.pose)
            context = tracker.render(ego.pose)
            driven.append(GroundPoint(ego.pose.x, ego.pose.y))
            # grounders that track world state (the oracle) get the true
            # pose; vision grounders ignore the hook
            if hasattr(grounder, "observe"):
                grounder.observe(ego)
            nav_mask, _ = grounder.ground(window, context, command_text)
            picked = largest_component_centroid(nav_mask)
            area = 0.0
            if picked is None:
                misses += 1
            else:
                (u, v), area = picked
                try:
                    target = inverse_project(u, v, ego.pose, cfg.cam)
                    misses = 0
                except HorizonError:
                    misses += 1
            if misses >= 5:
                stop_reason = "horizon_failure"
                break
            if update_stop(stop, area):
                actors, ego, steps = _brake_to_stop(world, actors, ego,
                                                    cfg.sim, steps)
                stop_reason = "stopped"
                break
        if target is None:
            controls = (0.0, 0.0)
        else:
            steer, speed, _ = pure_pursuit(ego, target, cfg.planner)
            controls = (steer, speed)
        actors, ego, collided = ws.step_sim(world, actors, ego, controls,
                                            cfg.sim)
        steps += 1
        if collided:
            stop_reason = "collision"
            break

    if stop_reason is None:
        stop_reason = "timeout"
    success = stop_reason == "stopped" and \
        inside_goal(ego.pose.x, ego.pose.y, route_state.goal_pose)
    return EpisodeResult(success=success, driven_path=tuple(driven),
                         stop_reason=stop_reason, steps=steps)
