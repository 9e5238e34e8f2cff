"""Trajectory metrics and split-level closed-loop evaluation.

Three numbers grade an episode: task_completion (did the car stop inside
the goal box), discrete Frechet distance (worst-case deviation from the
ground-truth route) and normalized dynamic time warping (how closely the
whole path was retraced).  evaluate_split re-drives every stored episode
live against a grounder and rolls the per-episode numbers into a
MetricReport that serializes to JSON for downstream plotting.
"""

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import datastore
from . import navctl
from . import oracle as oc
from . import worldsim as ws

D_TH = 3.0                      # ndtw distance scale, meters


def _as_points(path) -> np.ndarray:
    """Coerce a path (GroundPoints or (n, 2) array-like) to float array."""
    if hasattr(path, "ndim"):
        pts = np.asarray(path, dtype=float)
    else:
        pts = np.asarray([[p.x, p.y] if hasattr(p, "x") else p
                          for p in path], dtype=float)
    if pts.ndim == 1 and pts.size == 2:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise ValueError("a path is a non-empty sequence of 2-d points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("path contains non-finite coordinates")
    return pts


def _pair_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.hypot(a[:, None, 0] - b[None, :, 0],
                    a[:, None, 1] - b[None, :, 1])


def frechet(p, q) -> float:
    """Discrete Frechet distance between two paths, in meters.

    The usual coupled-walk recurrence: both walkers advance monotonically,
    the cost of a coupling is its widest pair, and the distance is the
    narrowest coupling.
    """
    d = _pair_dists(_as_points(p), _as_points(q))
    n, m = d.shape
    f = np.empty((n, m))
    f[0, 0] = d[0, 0]
    for j in range(1, m):
        f[0, j] = max(f[0, j - 1], d[0, j])
    for i in range(1, n):
        f[i, 0] = max(f[i - 1, 0], d[i, 0])
        for j in range(1, m):
            f[i, j] = max(d[i, j],
                          min(f[i - 1, j], f[i, j - 1], f[i - 1, j - 1]))
    return float(f[-1, -1])


def dtw(p, r) -> float:
    """Dynamic-time-warping cost: summed pair distances of the best
    monotone alignment (match / insert / delete moves)."""
    d = _pair_dists(_as_points(p), _as_points(r))
    n, m = d.shape
    g = np.full((n + 1, m + 1), np.inf)
    g[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            g[i, j] = d[i - 1, j - 1] + \
                min(g[i - 1, j], g[i, j - 1], g[i - 1, j - 1])
    return float(g[n, m])


def ndtw(p, r, d_th=D_TH) -> float:
    """exp(-DTW(p, r) / (|r| * d_th)); 1.0 is a perfect retrace of r."""
    ref = _as_points(r)
    return float(np.exp(-dtw(p, ref) / (len(ref) * d_th)))


def task_completion(result, goal_pose) -> int:
    """1 iff the episode stopped deliberately inside the inflated goal box.

    The last driven sample is the pose at the query where the stop rule
    fired; the brake-out that follows covers well under a meter, so the
    sample stands in for the resting position.
    """
    if result.stop_reason != "stopped":
        return 0
    last = result.driven_path[-1]
    return int(navctl.inside_goal(last.x, last.y, goal_pose))


def resample_path(path, spacing=1.0) -> np.ndarray:
    """Even arc-length resampling; both endpoints always survive.

    The driven path is logged once per grounder query (several meters
    apart) while route polylines put vertices only where the geometry
    bends, so the two are put on a common grid before DTW-style sums.
    """
    pts = _as_points(path)
    total = float(ws.polyline_length(pts))
    if len(pts) == 1 or total <= 0.0:
        return pts[:1]
    n = max(int(np.ceil(total / spacing)), 1)
    ss = np.linspace(0.0, total, n + 1)
    return np.asarray([ws.point_along(pts, s)[:2] for s in ss])


# ---------------------------------------------------------------------------
# split evaluation

@dataclass
class EvalConfig:
    run: navctl.RunConfig = field(default_factory=navctl.RunConfig)
    # common grid for frechet / ndtw; 0.5 m keeps the DTW alignment slack
    # well below the real tracking error it is trying to measure
    resample_spacing: float = 0.5


@dataclass(frozen=True)
class MetricReport:
    """Per-episode scores plus their split-level aggregates."""

    model: str
    split: str
    seeds: dict
    episodes: tuple             # dict per episode; failures carry "error"
    aggregates: dict            # means and medians over the scored rows

    def to_json(self) -> str:
        return json.dumps({
            "model": self.model,
            "split": self.split,
            "seeds": self.seeds,
            "episodes": list(self.episodes),
            "aggregates": self.aggregates,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(model=d["model"], split=d["split"], seeds=d["seeds"],
                   episodes=tuple(d["episodes"]),
                   aggregates=d["aggregates"])


def aggregate(rows) -> dict:
    """Means and medians of the three metrics over the scored rows."""
    scored = [r for r in rows if "error" not in r]
    out = {"episodes": len(rows), "scored": len(scored)}
    for key in ("task_completion", "frechet", "ndtw"):
        vals = np.asarray([r[key] for r in scored], dtype=float)
        out["mean_" + key] = float(vals.mean()) if len(vals) else float("nan")
        out["median_" + key] = \
            float(np.median(vals)) if len(vals) else float("nan")
    return out


def score_episode(name, result, reference, goal_pose, spacing=1.0) -> dict:
    driven = resample_path(result.driven_path, spacing)
    ref = resample_path(reference, spacing)
    return {
        "episode": name,
        "task_completion": task_completion(result, goal_pose),
        "frechet": frechet(driven, ref),
        "ndtw": ndtw(driven, ref),
        "stop_reason": result.stop_reason,
        "steps": result.steps,
    }


def infer_lane_ids(world, route_points, margin=1.0) -> tuple:
    """Lane ids whose centerline the route travels along.

    Episode manifests store the route polyline but not the lanes it was
    planned over, so eval re-runs recover them geometrically and keep
    traffic off the ego's path exactly like the recording setup did.
    Opposing lanes sit several meters apart, so a 1 m margin never grabs
    the oncoming lane; a conn crossing the route is swept in at the
    crossing, which only makes traffic avoidance slightly more cautious.
    """
    route = resample_path(route_points, spacing=1.0)
    ids = []
    for lane in world.lanes:
        samples = resample_path(lane.points, spacing=1.0)
        d = _pair_dists(samples, route)
        if float(d.min()) <= margin:
            ids.append(lane.id)
    return tuple(ids)


def evaluate_split(grounder_factory, root, manifest, cfg=None,
                   model_id="oracle", on_result=None) -> MetricReport:
    """Re-drive every episode of a stored split and score it.

    grounder_factory(world, route_state) builds the grounder queried by
    run_episode: the oracle needs the route, learned models can ignore
    both arguments.  An episode that raises is recorded with the error
    text and left out of the aggregates; one bad episode never aborts the
    sweep.  Actor layouts vary per episode but deterministically, seeded
    by the base actor seed plus the episode's position in the manifest.
    on_result(name, result, header) fires after each scored episode, for
    plot emission without a second drive.
    """
    cfg = cfg or EvalConfig()
    if isinstance(manifest, str):
        manifest = datastore.read_split(root, manifest)
    rows = []
    for k, name in enumerate(manifest.episodes):
        directory = os.path.join(root, manifest.split, name)
        try:
            head = datastore.read_header(directory)
            world = ws.generate_map(head.map_seed)
            rs = oc.RouteState(points=head.route, goal_pose=head.goal_pose,
                               lane_ids=infer_lane_ids(world, head.route))
            run_cfg = replace(cfg.run, actor_seed=cfg.run.actor_seed + k)
            grounder = grounder_factory(world, rs)
            result = navctl.run_episode(world, head.command, grounder, rs,
                                        run_cfg)
            rows.append(score_episode(name, result, head.route,
                                      head.goal_pose, cfg.resample_spacing))
            if on_result is not None:
                on_result(name, result, head)
        except Exception as err:        # noqa: BLE001 - captured per episode
            rows.append({"episode": name,
                         "error": f"{type(err).__name__}: {err}"})
    return MetricReport(model=model_id, split=manifest.split,
                        seeds={"split_seed": manifest.seed,
                               "actor_seed": cfg.run.actor_seed},
                        episodes=tuple(rows), aggregates=aggregate(rows))


# ---------------------------------------------------------------------------
# plotting

def render_overlay_svg(driven, reference, out_path, goal_pose=None,
                       size=480):
    """Write a top-view SVG overlaying the driven path on the route.

    The route is the wide grey band, the driven path the red line; start
    and end of the drive get green / blue dots and the goal box, when
    given, a dashed outline.
    """
    drv = _as_points(driven)
    ref = _as_points(reference)
    pts = [drv, ref]
    if goal_pose is not None:
        pts.append(np.asarray(navctl.goal_rectangle(goal_pose)))
    allp = np.vstack(pts)
    lo = allp.min(axis=0) - 5.0
    hi = allp.max(axis=0) + 5.0
    span = float(max(hi[0] - lo[0], hi[1] - lo[1]))
    scale = size / span

    def to_px(arr):
        arr = np.asarray(arr, dtype=float)
        u = (arr[:, 0] - lo[0]) * scale
        v = size - (arr[:, 1] - lo[1]) * scale   # y up in world, down in svg
        return " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(u, v))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
        f'height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="#fafafa"/>',
        f'<polyline points="{to_px(ref)}" fill="none" stroke="#bbbbbb" '
        'stroke-width="6" stroke-linecap="round"/>',
        f'<polyline points="{to_px(drv)}" fill="none" stroke="#d62728" '
        'stroke-width="2"/>',
    ]
    if goal_pose is not None:
        rect = np.asarray(navctl.goal_rectangle(goal_pose))
        parts.append(f'<polygon points="{to_px(rect)}" fill="none" '
                     'stroke="#2ca02c" stroke-dasharray="4 3"/>')
    for p, color in ((drv[:1], "#2ca02c"), (drv[-1:], "#1f77b4")):
        px = to_px(p).split(",")
        parts.append(f'<circle cx="{px[0]}" cy="{px[1]}" r="4" '
                     f'fill="{color}"/>')
    parts.append("</svg>")
    with open(out_path, "w") as fh:
        fh.write("\n".join(parts))
    return out_path
