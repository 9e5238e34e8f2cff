"""Socket services: remote grounding and live click-to-drive annotation.

Framing is a u32-LE byte count followed by one UTF-8 JSON object; rasters
travel base64-encoded in the same binary formats the datastore writes, so
a browser client and a test script parse the exact same bytes.  The
grounding endpoint is stateless per request; an annotation connection owns
one simulator session and walks composing -> driving -> reviewing.
"""

from __future__ import annotations

import base64
import json
import math
import os
import select
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import command as cmd
from . import datastore
from . import grounder as gr
from . import worldsim as ws
from .geometry import (CameraModel, EmptyMaskError, GroundPoint,
                       HorizonError, Pose2D, SemanticRaster, inverse_project,
                       rasterize_nav_rect, rasterize_polyline)
from .metrics import resample_path
from .navctl import PlannerConfig, pure_pursuit

MAX_MESSAGE = 16 << 20


class ProtocolError(Exception):
    def __init__(self, code, detail=""):
        super().__init__(detail or code)
        self.code = code


# ---------------------------------------------------------------------------
# framing

def send_message(sock, obj) -> None:
    data = json.dumps(obj, separators=(",", ":")).encode()
    sock.sendall(struct.pack("<I", len(data)) + data)


def _recv_exact(sock, n):
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def recv_message(sock):
    """One framed message; None on a clean close at a message boundary."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (length,) = struct.unpack("<I", head)
    if length > MAX_MESSAGE:
        raise ProtocolError("oversize", f"{length} byte message")
    body = _recv_exact(sock, length)
    if body is None:
        raise ProtocolError("truncated", "stream closed mid-message")
    try:
        return json.loads(body.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ProtocolError("bad_json", str(err))


def poll_message(sock, timeout):
    """recv_message when bytes are already waiting, else None."""
    ready, _, _ = select.select([sock], [], [], timeout)
    if not ready:
        return None
    return recv_message(sock)


def raster_to_b64(raster, magic) -> str:
    return base64.b64encode(datastore.encode_raster(raster, magic)).decode()


def raster_from_b64(text, magic) -> SemanticRaster:
    try:
        blob = base64.b64decode(text, validate=True)
    except (ValueError, TypeError) as err:
        raise ProtocolError("bad_raster", f"invalid base64: {err}")
    try:
        return datastore.decode_raster(blob, magic)
    except (datastore.FormatError, datastore.ValidationError) as err:
        raise ProtocolError("bad_raster", str(err))


# ---------------------------------------------------------------------------
# grounding service

class TokenGrounder:
    """Serves a grounding model to clients that send token ids."""

    def __init__(self, model):
        self.model = model

    def ground(self, frames, context, tokens):
        return gr.predict(self.model, frames, context, tokens)


def _ground_reply(grounding, msg):
    if msg.get("type") != "ground":
        raise ProtocolError("bad_type", f"unexpected {msg.get('type')!r}")
    frames_b64 = msg.get("frames_b64")
    if not isinstance(frames_b64, list) or not frames_b64:
        raise ProtocolError("bad_raster", "frames_b64 must be a list")
    frames = [raster_from_b64(s, datastore.SEMR_MAGIC) for s in frames_b64]
    context = raster_from_b64(msg.get("context_b64", ""),
                              datastore.MSK8_MAGIC)
    try:
        tokens = np.asarray(msg.get("tokens"), dtype=np.int64)
    except (TypeError, ValueError) as err:
        raise ProtocolError("bad_tokens", str(err))
    # world-state grounders (the oracle behind this endpoint) take the true
    # pose through the same observe hook the episode runner uses
    ego = msg.get("ego")
    if ego is not None and hasattr(grounding, "observe"):
        grounding.observe(Pose2D(float(ego["x"]), float(ego["y"]),
                                 float(ego["yaw"])))
    if "progress" in msg and hasattr(grounding, "rs"):
        grounding.rs.progress = float(msg["progress"])
    try:
        nav, traj = grounding.ground(frames, context, tokens)
    except Exception as err:                      # noqa: BLE001
        raise ProtocolError("ground_failed", f"{type(err).__name__}: {err}")
    return {"type": "masks",
            "nav_b64": raster_to_b64(nav, datastore.MSK8_MAGIC),
            "traj_b64": raster_to_b64(traj, datastore.MSK8_MAGIC)}


class _GroundingHandler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            try:
                msg = recv_message(self.request)
            except ProtocolError as err:
                send_message(self.request,
                             {"type": "error", "code": err.code})
                if err.code in ("oversize", "truncated"):
                    return
                continue
            if msg is None:
                return
            try:
                reply = _ground_reply(self.server.grounding, msg)
            except ProtocolError as err:
                reply = {"type": "error", "code": err.code,
                         "detail": str(err)}
            send_message(self.request, reply)


def make_grounding_server(grounding, host="127.0.0.1", port=0):
    """TCP server answering ground requests; grounding needs ground(frames,
    context, tokens) and may expose observe()/rs like the oracle adapter."""
    server = socketserver.ThreadingTCPServer((host, port), _GroundingHandler,
                                             bind_and_activate=True)
    server.daemon_threads = True
    server.grounding = grounding
    return server


def serve_grounding(port, grounding, host="127.0.0.1"):
    """Blocking entry point used by the command line."""
    with make_grounding_server(grounding, host, port) as server:
        server.serve_forever()


class RemoteGrounder:
    """Client half: lets run_episode drive against a grounding server."""

    def __init__(self, host, port, vocab=None):
        self.addr = (host, port)
        self.vocab = vocab if vocab is not None else cmd.Vocabulary()
        self.sock = None
        self._pose = None
        self._tokens = {}

    def observe(self, ego):
        self._pose = ego.pose if hasattr(ego, "pose") else ego

    def close(self):
        if self.sock is not None:
            self.sock.close()
            self.sock = None

    def ground(self, frames, context, text):
        if self.sock is None:
            self.sock = socket.create_connection(self.addr)
        tokens = self._tokens.get(text)
        if tokens is None:
            tokens, _ = cmd.encode_tokens(text, self.vocab)
            self._tokens[text] = tokens
        msg = {"type": "ground",
               "frames_b64": [raster_to_b64(f, datastore.SEMR_MAGIC)
                              for f in frames],
               "context_b64": raster_to_b64(context, datastore.MSK8_MAGIC),
               "tokens": [int(t) for t in tokens]}
        if self._pose is not None:
            msg["ego"] = {"x": self._pose.x, "y": self._pose.y,
                          "yaw": self._pose.yaw}
        send_message(self.sock, msg)
        reply = recv_message(self.sock)
        if reply is None or reply.get("type") != "masks":
            code = (reply or {}).get("code", "closed")
            raise ProtocolError(code, f"grounding failed: {reply}")
        return (raster_from_b64(reply["nav_b64"], datastore.MSK8_MAGIC),
                raster_from_b64(reply["traj_b64"], datastore.MSK8_MAGIC))


# ---------------------------------------------------------------------------
# annotation service

VIEW_RESOLUTION = 256


@dataclass
class AnnotationConfig:
    """One human (or scripted) annotation session over a fixed world."""

    map_seed: int = 1
    spawn_index: int = 0
    actor_seed: int = 0
    n_vehicles: int = 1
    n_pedestrians: int = 2
    sim: ws.SimConfig = field(default_factory=ws.SimConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    view: CameraModel = field(
        default_factory=lambda: CameraModel.default(VIEW_RESOLUTION))
    record_cam: CameraModel = field(default_factory=CameraModel.default)
    # wall-clock pacing factor per sim step; 0 free-runs for scripted tests
    time_scale: float = 1.0
    traj_horizon: int = 20


def next_episode_dir(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    taken = [int(n[3:]) for n in os.listdir(out_dir)
             if n.startswith("ep-") and n[3:].isdigit()]
    return os.path.join(out_dir, f"ep-{max(taken, default=-1) + 1:06d}")


class AnnotationSession:
    """Server half of one annotation episode.

    The navigator's clicks are inverse-projected to ground targets and
    tracked with pure pursuit; every sim step is recorded.  The reference
    route of an accepted episode is the driven path itself and the
    trajectory masks are backfilled from it once finish arrives, mirroring
    how the dataset defines z_t as the future of the actual trajectory.
    """

    def __init__(self, sock, out_dir, cfg: AnnotationConfig):
        self.sock = sock
        self.out_dir = out_dir
        self.cfg = cfg
        self.world = ws.generate_map(cfg.map_seed)
        self.spawn = self.world.spawn_points[cfg.spawn_index %
                                             len(self.world.spawn_points)]
        rng = np.random.default_rng(cfg.actor_seed)
        self.lighting = str(rng.choice(LIGHTING_TAGS))
        self.seq = 0
        self._reset()

    def _reset(self):
        cfg = self.cfg
        self.ego = ws.EgoState(pose=self.spawn)
        self.actors = ws.generate_actors(self.world, cfg.actor_seed,
                                         n_vehicles=cfg.n_vehicles,
                                         n_pedestrians=cfg.n_pedestrians)
        self.target = None
        self.clicks = []
        self.views = []             # 256 view per recorded step, for replay
        self.recorded = []          # (front64, nav64, pose) per step
        self.step = 0

    # -- messages --

    def _send(self, obj):
        send_message(self.sock, obj)

    def _error(self, code, detail=""):
        self._send({"type": "error", "code": code, "detail": detail})

    def _send_frame(self, view, step):
        self.seq += 1
        self._send({"type": "frame", "seq": self.seq,
                    "raster_b64": raster_to_b64(view, datastore.SEMR_MAGIC),
                    "ego": {"x": self.ego.pose.x, "y": self.ego.pose.y,
                            "yaw": self.ego.pose.yaw,
                            "speed": self.ego.speed},
                    "step": step})

    # -- state machine --

    def run(self):
        try:
            plan, text = self._composing()
            if plan is None:
                return
            accepted = self._driving()
            if accepted is None:
                return
            if accepted:
                self._write(plan, text)
                self._send({"type": "done", "reason": "accepted"})
            else:
                self._send({"type": "done", "reason": "rejected"})
        except (ProtocolError, BrokenPipeError, ConnectionError, OSError):
            # a vanished client aborts the in-flight episode; nothing is on
            # disk until a verdict accepts it
            return

    def _composing(self):
        while True:
            msg = recv_message(self.sock)
            if msg is None:
                return None, None
            if msg.get("type") != "set_command":
                self._error("bad_phase", "expected set_command")
                continue
            text = str(msg.get("text", ""))
            try:
                plan = cmd.parse_command(text)
            except cmd.ParseError as err:
                self._error("bad_command", str(err))
                continue
            return plan, text

    def _handle_click(self, msg):
        u, v = float(msg.get("u", -1)), float(msg.get("v", -1))
        try:
            point = inverse_project(u, v, self.ego.pose, self.cfg.view)
        except HorizonError as err:
            self._error("horizon", str(err))
            return
        self.target = point
        self.clicks.append(datastore.Click(max(len(self.recorded) - 1, 0),
                                           u, v, point))

    def _driving(self):
        """Returns the verdict (True/False), or None on disconnect/timeout."""
        cfg = self.cfg
        while self.step < cfg.sim.max_steps:
            view = ws.render_front_view(self.world, self.actors, self.ego,
                                        cfg.view)
            front = ws.render_front_view(self.world, self.actors, self.ego,
                                         cfg.record_cam)
            nav = self._nav_mask()
            self.views.append(view)
            self.recorded.append((front, nav, self.ego.pose))
            self._send_frame(view, self.step)

            msg = poll_message(self.sock, 0.0)
            while msg is not None:
                kind = msg.get("type")
                if kind == "click":
                    self._handle_click(msg)
                elif kind == "restart":
                    self._reset()
                    break
                elif kind == "finish":
                    return self._reviewing()
                else:
                    self._error("bad_phase", f"unexpected {kind!r}")
                msg = poll_message(self.sock, 0.0)
            else:
                self._advance()
                if cfg.time_scale > 0.0:
                    time.sleep(cfg.sim.dt * cfg.time_scale)
        self._send({"type": "done", "reason": "timeout"})
        return None

    def _advance(self):
        cfg = self.cfg
        controls = (0.0, 0.0)
        if self.target is not None:
            steer, speed, reached = pure_pursuit(self.ego, self.target,
                                                 cfg.planner)
            controls = (0.0, 0.0) if reached else (steer, speed)
        self.actors, self.ego, _ = ws.step_sim(self.world, self.actors,
                                               self.ego, controls, cfg.sim)
        self.step += 1

    def _nav_mask(self):
        if self.target is None:
            return SemanticRaster.zeros(self.cfg.record_cam.width,
                                        self.cfg.record_cam.height)
        dx = self.target.x - self.ego.pose.x
        dy = self.target.y - self.ego.pose.y
        heading = math.atan2(dy, dx) if math.hypot(dx, dy) > 0.5 \
            else self.ego.pose.yaw
        try:
            return rasterize_nav_rect(self.target, heading, self.ego.pose,
                                      self.cfg.record_cam)
        except EmptyMaskError:
            return SemanticRaster.zeros(self.cfg.record_cam.width,
                                        self.cfg.record_cam.height)

    def _reviewing(self):
        for i, view in enumerate(self.views):
            self.seq += 1
            self._send({"type": "frame", "seq": self.seq,
                        "raster_b64": raster_to_b64(view,
                                                    datastore.SEMR_MAGIC),
                        "ego": {"x": self.recorded[i][2].x,
                                "y": self.recorded[i][2].y,
                                "yaw": self.recorded[i][2].yaw, "speed": 0.0},
                        "step": i})
        while True:
            msg = recv_message(self.sock)
            if msg is None:
                return None
            if msg.get("type") != "verdict":
                self._error("bad_phase", "expected verdict")
                continue
            return bool(msg.get("accept"))

    def _traj_masks(self):
        """Future-of-driven-path mask per recorded frame."""
        poses = [p for (_, _, p) in self.recorded]
        pts = np.asarray([(p.x, p.y) for p in poses])
        steps = np.hypot(*np.diff(pts, axis=0).T)
        arc = np.concatenate([[0.0], np.cumsum(steps)])
        line = resample_path(pts, spacing=1.0)
        line_arc = np.linspace(0.0, arc[-1], len(line))
        masks = []
        for k, pose in enumerate(poses):
            i0 = int(np.searchsorted(line_arc, arc[k]))
            future = line[i0:i0 + self.cfg.traj_horizon]
            if len(future) < 2:
                masks.append(SemanticRaster.zeros(
                    self.cfg.record_cam.width, self.cfg.record_cam.height))
                continue
            masks.append(rasterize_polyline(
                [GroundPoint(x, y) for x, y in future], pose,
                self.cfg.record_cam))
        return masks

    def _write(self, plan, text):
        trajs = self._traj_masks()
        frames = tuple(
            datastore.EpisodeFrame(front, nav, traj, pose)
            for (front, nav, pose), traj in zip(self.recorded, trajs))
        pts = np.asarray([(p.x, p.y) for (_, _, p) in self.recorded])
        record = datastore.EpisodeRecord(
            command=text,
            plan=plan,
            map_seed=self.cfg.map_seed,
            spawn_pose=self.spawn,
            lighting=self.lighting,
            clicks=tuple(self.clicks),
            route=resample_path(pts, spacing=0.5),
            goal_pose=self.ego.pose,
            frames=frames,
            cam=self.cfg.view,
            verdict="accepted",
        )
        datastore.write_episode(record, next_episode_dir(self.out_dir))


LIGHTING_TAGS = ("noon", "sunset", "overcast", "night")


class _AnnotationHandler(socketserver.BaseRequestHandler):
    def handle(self):
        AnnotationSession(self.request, self.server.out_dir,
                          self.server.annotation_cfg).run()


def make_annotation_server(out_dir, cfg=None, host="127.0.0.1", port=0):
    server = socketserver.ThreadingTCPServer((host, port),
                                             _AnnotationHandler,
                                             bind_and_activate=True)
    server.daemon_threads = True
    server.out_dir = out_dir
    server.annotation_cfg = cfg or AnnotationConfig()
    return server


def serve_annotation(port, out_dir, cfg=None, host="127.0.0.1"):
    """Blocking entry point used by the command line."""
    with make_annotation_server(out_dir, cfg, host, port) as server:
        server.serve_forever()


def run_server_thread(server):
    """serve_forever on a daemon thread; returns (thread, port)."""
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread, server.server_address[1]
