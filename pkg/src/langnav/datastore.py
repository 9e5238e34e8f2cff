"""Episode persistence: binary raster formats, manifests, splits, stats.

An episode directory holds:

    manifest.json            command, plan, clicks, route, goal, camera
    poses.jsonl              one ego pose per frame
    frames/NNNNNN.sem        front view (SEMR: magic, u16 w, u16 h, u8 ids)
    frames/NNNNNN.nav.msk    navigable mask (MSK8: same header, {0,255})
    frames/NNNNNN.trj.msk    trajectory mask (MSK8)

Writes are atomic: everything lands in a temp directory that is renamed
into place only after validation and a full flush.
"""

import json
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .geometry import (CameraModel, GroundPoint, Pose2D, SemanticRaster,
                       inverse_project)
from . import command as cmdlang

SCHEMA_VERSION = 1
SEMR_MAGIC = b"SEMR"
MSK8_MAGIC = b"MSK8"
CLICK_TOLERANCE = 0.1       # meters between stored and reprojected click


class FormatError(Exception):
    """Structurally broken file: bad magic, truncation, malformed JSON."""


class ValidationError(Exception):
    """Well-formed file whose content violates an episode invariant."""


@dataclass(frozen=True)
class Click:
    frame_index: int
    u: float
    v: float
    ground: GroundPoint


@dataclass(frozen=True)
class EpisodeFrame:
    front: SemanticRaster
    nav_mask: SemanticRaster
    traj_mask: SemanticRaster
    pose: Pose2D


@dataclass(frozen=True)
class EpisodeRecord:
    command: str
    plan: object                # ManeuverPlan
    map_seed: int
    spawn_pose: Pose2D
    lighting: str
    clicks: tuple               # of Click
    route: np.ndarray           # (K, 2) ground-truth route
    goal_pose: Pose2D
    frames: tuple               # of EpisodeFrame
    cam: CameraModel
    split: str = "train"
    verdict: str = "accepted"

    @property
    def frame_count(self):
        return len(self.frames)


@dataclass(frozen=True)
class SplitManifest:
    split: str
    episodes: tuple             # ordered directory names
    seed: int


# ---------------------------------------------------------------------------
# raster files

def encode_raster(raster: SemanticRaster, magic: bytes) -> bytes:
    head = magic + struct.pack("<HH", raster.width, raster.height)
    return head + raster.pixels.tobytes()


def decode_raster(blob: bytes, magic: bytes) -> SemanticRaster:
    if len(blob) < 8:
        raise FormatError("raster shorter than its header")
    if blob[:4] != magic:
        raise FormatError(f"bad raster magic {blob[:4]!r}, want {magic!r}")
    w, h = struct.unpack("<HH", blob[4:8])
    if len(blob) != 8 + w * h:
        raise FormatError(f"raster payload is {len(blob) - 8} bytes, "
                          f"want {w * h}")
    pixels = np.frombuffer(blob[8:], dtype=np.uint8).reshape(h, w)
    raster = SemanticRaster(pixels.copy())
    if magic == MSK8_MAGIC and not raster.is_binary():
        raise ValidationError("mask values must be 0 or 255")
    return raster


def write_raster(path, raster: SemanticRaster, magic: bytes):
    with open(path, "wb") as fh:
        fh.write(encode_raster(raster, magic))


def read_raster(path, magic: bytes) -> SemanticRaster:
    with open(path, "rb") as fh:
        return decode_raster(fh.read(), magic)


# ---------------------------------------------------------------------------
# manifest serialization

def _pose_to_json(p):
    return {"x": p.x, "y": p.y, "yaw": p.yaw}


def _pose_from_json(d):
    return Pose2D(float(d["x"]), float(d["y"]), float(d["yaw"]))


def _referent_to_json(ref):
    if ref is None:
        return None
    if isinstance(ref, tuple):
        return [_referent_to_json(r) for r in ref]
    return {"obj": ref.obj, "color": ref.color, "side": ref.side}


def _referent_from_json(d):
    if d is None:
        return None
    if isinstance(d, list):
        return tuple(_referent_from_json(r) for r in d)
    return cmdlang.Referent(d["obj"], color=d["color"], side=d["side"])


def plan_to_json(plan):
    return {
        "raw_text": plan.raw_text,
        "token_count": plan.token_count,
        "maneuvers": [
            {"kind": m.kind, "direction": m.direction,
             "relation": m.relation,
             "referent": _referent_to_json(m.referent)}
            for m in plan.maneuvers],
    }


def plan_from_json(d):
    maneuvers = tuple(
        cmdlang.Maneuver(m["kind"], direction=m["direction"],
                         relation=m["relation"],
                         referent=_referent_from_json(m["referent"]))
        for m in d["maneuvers"])
    return cmdlang.ManeuverPlan(maneuvers, raw_text=d["raw_text"],
                                token_count=int(d["token_count"]))


def _cam_to_json(cam):
    return {"width": cam.width, "height": cam.height, "fx": cam.fx,
            "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "mount_height": cam.mount_height, "mount_pitch": cam.mount_pitch}


def _cam_from_json(d):
    return CameraModel(int(d["width"]), int(d["height"]), float(d["fx"]),
                       float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       float(d["mount_height"]), float(d["mount_pitch"]))


def _manifest_json(record: EpisodeRecord) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": record.command,
        "plan": plan_to_json(record.plan),
        "map_seed": record.map_seed,
        "spawn_pose": _pose_to_json(record.spawn_pose),
        "lighting": record.lighting,
        "clicks": [{"frame": c.frame_index, "u": c.u, "v": c.v,
                    "ground": {"x": c.ground.x, "y": c.ground.y}}
                   for c in record.clicks],
        "route": np.asarray(record.route, dtype=float).tolist(),
        "goal_pose": _pose_to_json(record.goal_pose),
        "camera": _cam_to_json(record.cam),
        "frame_count": record.frame_count,
        "split": record.split,
        "verdict": record.verdict,
    }


_MANIFEST_KEYS = frozenset({
    "schema_version", "command", "plan", "map_seed", "spawn_pose",
    "lighting", "clicks", "route", "goal_pose", "camera", "frame_count",
    "split", "verdict"})


# ---------------------------------------------------------------------------
# validation

def validate_record(record: EpisodeRecord):
    """Raise ValidationError on any invariant violation; cheap first."""
    if record.frame_count == 0:
        raise ValidationError("episode has no frames")
    for i, fr in enumerate(record.frames):
        if not fr.nav_mask.is_binary() or not fr.traj_mask.is_binary():
            raise ValidationError(f"frame {i} masks are not binary")
    for c in record.clicks:
        if not 0 <= c.frame_index < record.frame_count:
            raise ValidationError(f"click frame {c.frame_index} out of range")
        pose = record.frames[c.frame_index].pose
        p = inverse_project(c.u, c.v, pose, record.cam)
        if p.dist(c.ground) > CLICK_TOLERANCE:
            raise ValidationError(
                f"click at frame {c.frame_index} reprojects "
                f"{p.dist(c.ground):.3f} m away from its ground point")


# ---------------------------------------------------------------------------
# episode IO

def write_episode(record: EpisodeRecord, directory):
    """Validate, then atomically write the episode directory."""
    validate_record(record)
    directory = os.path.abspath(directory)
    parent = os.path.dirname(directory)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".ep-", dir=parent)
    try:
        frames_dir = os.path.join(tmp, "frames")
        os.makedirs(frames_dir)
        with open(os.path.join(tmp, "manifest.json"), "w") as fh:
            json.dump(_manifest_json(record), fh, indent=1)
        with open(os.path.join(tmp, "poses.jsonl"), "w") as fh:
            for fr in record.frames:
                fh.write(json.dumps(_pose_to_json(fr.pose)) + "\n")
        for i, fr in enumerate(record.frames):
            stem = os.path.join(frames_dir, f"{i:06d}")
            write_raster(stem + ".sem", fr.front, SEMR_MAGIC)
            write_raster(stem + ".nav.msk", fr.nav_mask, MSK8_MAGIC)
            write_raster(stem + ".trj.msk", fr.traj_mask, MSK8_MAGIC)
        if os.path.exists(directory):
            raise ValidationError(f"episode directory {directory} exists")
        os.rename(tmp, directory)
    finally:
        if os.path.isdir(tmp):
            shutil.rmtree(tmp, ignore_errors=True)


def _load_manifest(directory) -> dict:
    man_path = os.path.join(directory, "manifest.json")
    try:
        with open(man_path) as fh:
            man = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"missing manifest: {man_path}")
    except json.JSONDecodeError as err:
        raise FormatError(f"manifest is not valid JSON: {err}")
    missing = _MANIFEST_KEYS - set(man)
    if missing:
        raise FormatError(f"manifest lacks keys {sorted(missing)}")
    if man["schema_version"] != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema {man['schema_version']}")
    return man


@dataclass(frozen=True)
class EpisodeHeader:
    """Manifest-level view of an episode, no frame files touched.

    Evaluation re-drives episodes live, so it only needs the command, the
    world seed and the ground-truth route; loading hundreds of rasters per
    episode just to throw them away would dominate the sweep.
    """
    command: str
    plan: object
    map_seed: int
    spawn_pose: Pose2D
    lighting: str
    route: np.ndarray
    goal_pose: Pose2D
    cam: CameraModel
    frame_count: int
    split: str
    verdict: str


def read_header(directory) -> EpisodeHeader:
    """Parse just manifest.json of an episode directory."""
    man = _load_manifest(directory)
    return EpisodeHeader(
        command=man["command"],
        plan=plan_from_json(man["plan"]),
        map_seed=int(man["map_seed"]),
        spawn_pose=_pose_from_json(man["spawn_pose"]),
        lighting=man["lighting"],
        route=np.asarray(man["route"], dtype=float),
        goal_pose=_pose_from_json(man["goal_pose"]),
        cam=_cam_from_json(man["camera"]),
        frame_count=int(man["frame_count"]),
        split=man["split"],
        verdict=man["verdict"],
    )


def read_episode(directory) -> EpisodeRecord:
    """Parse an episode directory and re-verify every invariant."""
    man = _load_manifest(directory)

    poses = []
    with open(os.path.join(directory, "poses.jsonl")) as fh:
        for line in fh:
            if line.strip():
                poses.append(_pose_from_json(json.loads(line)))
    n = int(man["frame_count"])
    if len(poses) != n:
        raise ValidationError(f"{len(poses)} poses for {n} frames")

    frames = []
    for i in range(n):
        stem = os.path.join(directory, "frames", f"{i:06d}")
        try:
            front = read_raster(stem + ".sem", SEMR_MAGIC)
            nav = read_raster(stem + ".nav.msk", MSK8_MAGIC)
            traj = read_raster(stem + ".trj.msk", MSK8_MAGIC)
        except FileNotFoundError as err:
            raise ValidationError(f"frame file missing: {err.filename}")
        frames.append(EpisodeFrame(front, nav, traj, poses[i]))

    record = EpisodeRecord(
        command=man["command"],
        plan=plan_from_json(man["plan"]),
        map_seed=int(man["map_seed"]),
        spawn_pose=_pose_from_json(man["spawn_pose"]),
        lighting=man["lighting"],
        clicks=tuple(Click(int(c["frame"]), float(c["u"]), float(c["v"]),
                           GroundPoint(float(c["ground"]["x"]),
                                       float(c["ground"]["y"])))
                     for c in man["clicks"]),
        route=np.asarray(man["route"], dtype=float),
        goal_pose=_pose_from_json(man["goal_pose"]),
        frames=tuple(frames),
        cam=_cam_from_json(man["camera"]),
        split=man["split"],
        verdict=man["verdict"],
    )
    validate_record(record)
    return record


def records_equal(a: EpisodeRecord, b: EpisodeRecord) -> bool:
    """Structural equality of two episode records."""
    if (a.command, a.map_seed, a.lighting, a.split, a.verdict) != \
            (b.command, b.map_seed, b.lighting, b.split, b.verdict):
        return False
    if a.plan != b.plan or a.spawn_pose != b.spawn_pose or \
            a.goal_pose != b.goal_pose or a.cam != b.cam:
        return False
    if a.clicks != b.clicks or not np.array_equal(a.route, b.route):
        return False
    if a.frame_count != b.frame_count:
        return False
    return all(fa == fb for fa, fb in zip(a.frames, b.frames))


# ---------------------------------------------------------------------------
# splits and statistics

def write_split(manifest: SplitManifest, root):
    path = os.path.join(root, manifest.split, "split.json")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        json.dump({"split": manifest.split,
                   "episodes": list(manifest.episodes),
                   "seed": manifest.seed}, fh, indent=1)


def read_split(root, split) -> SplitManifest:
    path = os.path.join(root, split, "split.json")
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"missing split manifest: {path}")
    except json.JSONDecodeError as err:
        raise FormatError(f"split manifest is not valid JSON: {err}")
    return SplitManifest(d["split"], tuple(d["episodes"]), int(d["seed"]))


def split_episode_dirs(root, manifest: SplitManifest):
    return [os.path.join(root, manifest.split, name)
            for name in manifest.episodes]


@dataclass(frozen=True)
class SplitStats:
    split: str
    episodes: int
    frames: int
    mean_words: float
    mean_clicks: float


def compute_stats(root, manifest: SplitManifest) -> SplitStats:
    """Exact Table-style statistics recomputed from the files."""
    words, clicks, frames = [], [], 0
    for directory in split_episode_dirs(root, manifest):
        record = read_episode(directory)
        words.append(len(record.command.split()))
        clicks.append(len(record.clicks))
        frames += record.frame_count
    n = len(words)
    return SplitStats(manifest.split, n, frames,
                      float(np.mean(words)) if n else 0.0,
                      float(np.mean(clicks)) if n else 0.0)
