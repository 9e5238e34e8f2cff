"""Trajectory metrics against brute-force oracles plus split evaluation."""

import json
import os
import shutil
import xml.etree.ElementTree as ET
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import langnav.command as cmd
import langnav.datastore as datastore
import langnav.metrics as mx
import langnav.navctl as nc
import langnav.oracle as oc
import langnav.worldsim as ws
from langnav.geometry import CameraModel, GroundPoint, Pose2D


# ---------------------------------------------------------------------------
# brute-force oracles: enumerate every monotone walk through the pair grid
# instead of running a DP, so agreement actually checks the recurrences

@lru_cache(maxsize=None)
def _walks(n, m):
    """All monotone step sequences from cell (0, 0) to cell (n-1, m-1)."""
    if n == 1 and m == 1:
        return ((((0, 0)),),)
    out = []
    for di, dj in ((1, 0), (0, 1), (1, 1)):
        pi, pj = n - di, m - dj
        if pi >= 1 and pj >= 1:
            for walk in _walks(pi, pj):
                out.append(walk + ((n - 1, m - 1),))
    return tuple(out)


def _dists(p, q):
    p, q = np.asarray(p, float), np.asarray(q, float)
    return np.hypot(p[:, None, 0] - q[None, :, 0],
                    p[:, None, 1] - q[None, :, 1])


def frechet_by_enumeration(p, q):
    d = _dists(p, q)
    return min(max(d[i, j] for i, j in walk)
               for walk in _walks(*d.shape))


def dtw_by_enumeration(p, q):
    d = _dists(p, q)
    return min(sum(d[i, j] for i, j in walk)
               for walk in _walks(*d.shape))


def _random_path(rng, max_len=6):
    k = int(rng.integers(1, max_len + 1))
    return rng.uniform(-10.0, 10.0, size=(k, 2))


def test_frechet_matches_enumeration_on_200_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        p, q = _random_path(rng), _random_path(rng)
        assert abs(mx.frechet(p, q) - frechet_by_enumeration(p, q)) <= 1e-9


def test_dtw_and_ndtw_match_enumeration_on_200_pairs():
    rng = np.random.default_rng(4096)
    for _ in range(200):
        p, r = _random_path(rng), _random_path(rng)
        best = dtw_by_enumeration(p, r)
        assert abs(mx.dtw(p, r) - best) <= 1e-9
        assert abs(mx.ndtw(p, r) - np.exp(-best / (len(r) * 3.0))) <= 1e-9


def test_frechet_seeded_5_point_pair():
    rng = np.random.default_rng(42)
    p, q = rng.uniform(-10, 10, (5, 2)), rng.uniform(-10, 10, (5, 2))
    assert abs(mx.frechet(p, q) - frechet_by_enumeration(p, q)) <= 1e-9


def test_ndtw_seeded_4_point_pair():
    rng = np.random.default_rng(7)
    p, r = rng.uniform(-10, 10, (4, 2)), rng.uniform(-10, 10, (4, 2))
    want = np.exp(-dtw_by_enumeration(p, r) / (len(r) * 3.0))
    assert abs(mx.ndtw(p, r) - want) <= 1e-9


# ---------------------------------------------------------------------------
# closed forms

def test_ndtw_single_point_closed_form():
    assert abs(mx.ndtw([(0.0, 0.0)], [(3.0, 0.0)]) - np.exp(-1.0)) <= 1e-9


def test_frechet_parallel_offset_closed_form():
    p = [(0.0, 0.0), (10.0, 0.0)]
    q = [(0.0, 1.0), (10.0, 1.0)]
    assert abs(mx.frechet(p, q) - 1.0) <= 1e-9


def test_identity_paths():
    p = [(0.0, 0.0), (3.0, 4.0), (9.0, 4.0)]
    assert mx.frechet(p, p) == 0.0
    assert mx.ndtw(p, p) == 1.0


def test_path_validation():
    with pytest.raises(ValueError):
        mx.frechet([], [(0.0, 0.0)])
    with pytest.raises(ValueError):
        mx.ndtw([(np.nan, 0.0)], [(0.0, 0.0)])
    with pytest.raises(ValueError):
        mx.frechet([(0.0, 0.0, 0.0)], [(0.0, 0.0)])


# ---------------------------------------------------------------------------
# metric properties

coord = st.floats(min_value=-50, max_value=50, allow_nan=False)
path_st = st.lists(st.tuples(coord, coord), min_size=1, max_size=7)


@settings(max_examples=60, deadline=None)
@given(path_st, path_st)
def test_frechet_symmetric_and_endpoint_bound(p, q):
    f = mx.frechet(p, q)
    assert f == mx.frechet(q, p)
    lo = max(np.hypot(p[0][0] - q[0][0], p[0][1] - q[0][1]),
             np.hypot(p[-1][0] - q[-1][0], p[-1][1] - q[-1][1]))
    assert f >= lo - 1e-12


@settings(max_examples=60, deadline=None)
@given(path_st, path_st)
def test_ndtw_in_unit_interval(p, r):
    v = mx.ndtw(p, r)
    assert 0.0 < v <= 1.0


def test_ndtw_monotone_in_dtw_cost():
    rng = np.random.default_rng(17)
    r = _random_path(rng)
    pairs = [(_random_path(rng), None) for _ in range(20)]
    scored = sorted((mx.dtw(p, r), mx.ndtw(p, r)) for p, _ in pairs)
    ndtws = [nd for _, nd in scored]
    assert all(a >= b - 1e-12 for a, b in zip(ndtws, ndtws[1:]))


def test_resample_path_grid():
    pts = [(0.0, 0.0), (4.0, 0.0), (4.0, 4.0)]
    out = mx.resample_path(pts, spacing=1.0)
    assert np.allclose(out[0], pts[0]) and np.allclose(out[-1], pts[-1])
    gaps = np.hypot(*np.diff(out, axis=0).T)
    assert gaps.max() <= 1.0 + 1e-9
    assert len(out) == 9
    # degenerate inputs collapse to a single point
    assert mx.resample_path([(2.0, 3.0)]).shape == (1, 2)
    assert mx.resample_path([(2.0, 3.0), (2.0, 3.0)]).shape == (1, 2)


# ---------------------------------------------------------------------------
# task completion

def _result(stop_reason, x, y):
    return nc.EpisodeResult(success=False, driven_path=(GroundPoint(x, y),),
                            stop_reason=stop_reason, steps=10)


def test_task_completion_gate():
    goal = Pose2D(0.0, 0.0, 0.0)
    assert mx.task_completion(_result("stopped", 0.0, 0.0), goal) == 1
    # inflated rectangle half-extents are 4.0 along and 3.5 across
    assert mx.task_completion(_result("stopped", 3.9, 0.0), goal) == 1
    assert mx.task_completion(_result("stopped", 4.1, 0.0), goal) == 0
    assert mx.task_completion(_result("stopped", 0.0, 3.6), goal) == 0
    assert mx.task_completion(_result("timeout", 0.0, 0.0), goal) == 0
    assert mx.task_completion(_result("collision", 0.0, 0.0), goal) == 0


# ---------------------------------------------------------------------------
# aggregation and report serialization

def test_aggregate_means_and_medians():
    rows = [
        {"episode": "a", "task_completion": 1, "frechet": 1.0, "ndtw": 0.9},
        {"episode": "b", "task_completion": 0, "frechet": 2.0, "ndtw": 0.8},
        {"episode": "c", "task_completion": 1, "frechet": 6.0, "ndtw": 0.4},
        {"episode": "d", "error": "ValidationError: boom"},
    ]
    agg = mx.aggregate(rows)
    assert agg["episodes"] == 4 and agg["scored"] == 3
    assert agg["mean_task_completion"] == pytest.approx(2.0 / 3.0)
    assert agg["mean_frechet"] == pytest.approx(3.0)
    assert agg["median_frechet"] == pytest.approx(2.0)
    assert agg["mean_ndtw"] == pytest.approx(0.7)
    assert agg["median_ndtw"] == pytest.approx(0.8)


def test_report_json_roundtrip():
    report = mx.MetricReport(
        model="oracle", split="val", seeds={"split_seed": 3},
        episodes=({"episode": "e0", "task_completion": 1, "frechet": 1.5,
                   "ndtw": 0.95, "stop_reason": "stopped", "steps": 140},),
        aggregates={"episodes": 1, "scored": 1})
    again = mx.MetricReport.from_json(report.to_json())
    assert again == report
    assert json.loads(report.to_json())["model"] == "oracle"


# ---------------------------------------------------------------------------
# split evaluation on a small recorded split

def _feasible(world, seed):
    for spawn in world.spawn_points:
        try:
            return cmd.generate_command(world, spawn, seed)
        except cmd.InfeasibleError:
            continue
    raise AssertionError("no feasible spawn for seed")


@pytest.fixture(scope="module")
def world3():
    return ws.generate_map(3)


@pytest.fixture(scope="module")
def split_root(tmp_path_factory, world3):
    root = tmp_path_factory.mktemp("field")
    names = []
    for k, seed in enumerate((7, 600)):
        plan, route = _feasible(world3, seed)
        rs = oc.make_route_state(route)
        rec = oc.record_episode(world3, plan, rs,
                                oc.RecordConfig(actor_seed=seed))
        assert rec.verdict == "accepted"
        name = f"ep{k:03d}"
        datastore.write_episode(rec, str(root / "train" / name))
        names.append(name)
    datastore.write_split(
        datastore.SplitManifest("train", tuple(names), seed=3), str(root))
    return root


def _oracle_factory(world, rs):
    return oc.OracleGrounder(world, rs, CameraModel.default(),
                             oc.OracleConfig())


def test_evaluate_split_scores_every_episode(split_root):
    report = mx.evaluate_split(_oracle_factory, str(split_root), "train")
    assert report.split == "train"
    assert len(report.episodes) == 2
    for row in report.episodes:
        assert "error" not in row
        assert row["task_completion"] == 1
        assert row["ndtw"] >= 0.8
        assert row["frechet"] <= 3.0
    # the aggregates are exactly the means of the per-episode rows
    for key in ("task_completion", "frechet", "ndtw"):
        vals = [row[key] for row in report.episodes]
        assert report.aggregates["mean_" + key] == pytest.approx(
            np.mean(vals), abs=1e-12)
        assert "median_" + key in report.aggregates
    assert report.seeds["split_seed"] == 3


def test_evaluate_split_deterministic(split_root):
    a = mx.evaluate_split(_oracle_factory, str(split_root), "train")
    b = mx.evaluate_split(_oracle_factory, str(split_root), "train")
    assert a.to_json() == b.to_json()


def test_evaluate_split_captures_per_episode_failures(split_root, tmp_path):
    root = tmp_path / "broken"
    shutil.copytree(split_root, root)
    man = root / "train" / "ep001" / "manifest.json"
    man.write_text("{ not json")
    report = mx.evaluate_split(_oracle_factory, str(root), "train")
    assert len(report.episodes) == 2
    errors = [row for row in report.episodes if "error" in row]
    assert len(errors) == 1 and "FormatError" in errors[0]["error"]
    assert report.aggregates["scored"] == 1
    assert report.aggregates["mean_task_completion"] == 1.0


class _EmptyGrounder:
    def ground(self, frames, context, text):
        zeros = datastore.SemanticRaster.zeros(64, 64)
        return zeros, zeros


def test_empty_mask_grounder_degenerate_scores(split_root):
    report = mx.evaluate_split(lambda w, rs: _EmptyGrounder(),
                               str(split_root), "train")
    for row in report.episodes:
        assert row["task_completion"] == 0
        assert row["stop_reason"] == "horizon_failure"
    # the car never moves, so the driven path collapses to the spawn point
    # and ndtw equals the single-point degenerate value exactly
    head = datastore.read_header(str(split_root / "train" / "ep000"))
    ref = mx.resample_path(head.route, 0.5)
    spawn = head.route[0]
    degenerate = float(np.exp(-np.hypot(ref[:, 0] - spawn[0],
                                        ref[:, 1] - spawn[1]).sum() /
                              (len(ref) * 3.0)))
    assert report.episodes[0]["ndtw"] == pytest.approx(degenerate, abs=1e-9)


def test_infer_lane_ids_covers_planned_lanes(world3):
    plan, route = _feasible(world3, 7)
    inferred = mx.infer_lane_ids(world3, route.points)
    assert set(route.lane_ids) <= set(inferred)


def test_render_overlay_svg(tmp_path):
    driven = [(0.0, 0.0), (5.0, 0.2), (10.0, 1.0), (15.0, 4.0)]
    ref = [(0.0, 0.0), (10.0, 0.0), (15.0, 5.0)]
    out = tmp_path / "ep.svg"
    mx.render_overlay_svg(driven, ref, str(out),
                          goal_pose=Pose2D(15.0, 5.0, 0.8))
    tree = ET.parse(out)
    ns = "{http://www.w3.org/2000/svg}"
    root = tree.getroot()
    assert len(root.findall(f"{ns}polyline")) == 2
    assert len(root.findall(f"{ns}polygon")) == 1
    assert len(root.findall(f"{ns}circle")) == 2
    for poly in root.findall(f"{ns}polyline"):
        for pair in poly.attrib["points"].split():
            u, v = map(float, pair.split(","))
            assert 0.0 <= u <= 480.0 and 0.0 <= v <= 480.0
