"""Regenerate the committed format-conformance fixtures.

Run from the repository root:

    python3 tests/fixtures/regen_fixtures.py

The fixtures pin the on-disk raster and episode formats; regenerate them
only on a deliberate format change, never to make a failing test pass.
"""

import os
import shutil
import struct

import numpy as np

from langnav import datastore as ds
from langnav.command import parse_command
from langnav.geometry import (CameraModel, GroundPoint, Pose2D,
                              SemanticRaster, project)

HERE = os.path.dirname(os.path.abspath(__file__))


def golden_front(step):
    px = (np.arange(64, dtype=np.uint8).reshape(8, 8) % 7) + step
    return SemanticRaster(px)


def golden_mask(step):
    px = np.zeros((8, 8), np.uint8)
    px[2 + step:5 + step, 3:6] = 255
    return SemanticRaster(px)


def golden_record():
    cam = CameraModel.default(resolution=8)
    poses = [Pose2D(0.0, 0.0, 0.0), Pose2D(0.5, 0.0, 0.0)]
    ground = GroundPoint(6.0, 0.5)
    u, v = project(ground, poses[0], cam)
    frames = tuple(
        ds.EpisodeFrame(golden_front(i), golden_mask(i), golden_mask(i),
                        poses[i])
        for i in range(2))
    return ds.EpisodeRecord(
        command="stop near the car",
        plan=parse_command("stop near the car"),
        map_seed=0,
        spawn_pose=poses[0],
        lighting="noon",
        clicks=(ds.Click(0, u, v, ground),),
        route=np.array([[0.0, 0.0], [20.0, 0.0]]),
        goal_pose=Pose2D(18.0, 0.0, 0.0),
        frames=frames,
        cam=cam,
    )


def main():
    ds.write_raster(os.path.join(HERE, "golden.sem"), golden_front(0),
                    ds.SEMR_MAGIC)
    ds.write_raster(os.path.join(HERE, "golden.msk"), golden_mask(0),
                    ds.MSK8_MAGIC)

    # same payloads with a corrupted magic, for the FormatError path
    for name, good in (("corrupt.sem", "golden.sem"),
                       ("corrupt.msk", "golden.msk")):
        with open(os.path.join(HERE, good), "rb") as fh:
            blob = fh.read()
        with open(os.path.join(HERE, name), "wb") as fh:
            fh.write(b"X" + blob[1:])

    episode_dir = os.path.join(HERE, "golden_episode")
    if os.path.isdir(episode_dir):
        shutil.rmtree(episode_dir)
    ds.write_episode(golden_record(), episode_dir)
    print("fixtures written under", HERE)


if __name__ == "__main__":
    main()
