"""On-disk episode format: rasters, manifests, splits, and statistics."""

import dataclasses
import json
import os
import struct

import numpy as np
import pytest

from langnav import command as cmd
from langnav import datastore as ds
from langnav import oracle as oc
from langnav import worldsim as ws
from langnav.geometry import (CameraModel, GroundPoint, Pose2D,
                              SemanticRaster, project)

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def _tiny_record(command="stop near the car", n_clicks=1, n_frames=2):
    cam = CameraModel.default(resolution=8)
    poses = [Pose2D(0.5 * i, 0.0, 0.0) for i in range(n_frames)]
    front = SemanticRaster((np.arange(64, dtype=np.uint8).reshape(8, 8)) % 7)
    mask = np.zeros((8, 8), np.uint8)
    mask[3:5, 3:6] = 255
    mask = SemanticRaster(mask)
    clicks = []
    for i in range(n_clicks):
        ground = GroundPoint(6.0 + i, 0.5)
        u, v = project(ground, poses[0], cam)
        clicks.append(ds.Click(0, u, v, ground))
    frames = tuple(ds.EpisodeFrame(front, mask, mask, p) for p in poses)
    return ds.EpisodeRecord(
        command=command,
        plan=cmd.parse_command("stop near the car"),
        map_seed=0,
        spawn_pose=poses[0],
        lighting="noon",
        clicks=tuple(clicks),
        route=np.array([[0.0, 0.0], [20.0, 0.0]]),
        goal_pose=Pose2D(18.0, 0.0, 0.0),
        frames=frames,
        cam=cam,
    )


# ---- raster codec ----

def test_raster_bytes_match_struct_layout():
    px = np.arange(12, dtype=np.uint8).reshape(3, 4)
    blob = ds.encode_raster(SemanticRaster(px), ds.SEMR_MAGIC)
    want = b"SEMR" + struct.pack("<HH", 4, 3) + bytes(range(12))
    assert blob == want
    back = ds.decode_raster(blob, ds.SEMR_MAGIC)
    assert np.array_equal(back.pixels, px)


def test_raster_round_trip_random():
    rng = np.random.default_rng(5)
    px = rng.integers(0, 256, size=(17, 9), dtype=np.uint8)
    blob = ds.encode_raster(SemanticRaster(px), ds.SEMR_MAGIC)
    assert np.array_equal(ds.decode_raster(blob, ds.SEMR_MAGIC).pixels, px)


def test_raster_bad_magic_is_format_error():
    px = np.zeros((2, 2), np.uint8)
    blob = ds.encode_raster(SemanticRaster(px), ds.SEMR_MAGIC)
    with pytest.raises(ds.FormatError):
        ds.decode_raster(b"XEMR" + blob[4:], ds.SEMR_MAGIC)


def test_raster_truncation_is_format_error():
    px = np.zeros((4, 4), np.uint8)
    blob = ds.encode_raster(SemanticRaster(px), ds.MSK8_MAGIC)
    with pytest.raises(ds.FormatError):
        ds.decode_raster(blob[:-3], ds.MSK8_MAGIC)
    with pytest.raises(ds.FormatError):
        ds.decode_raster(blob[:5], ds.MSK8_MAGIC)


def test_mask_with_stray_value_is_validation_error():
    blob = ds.MSK8_MAGIC + struct.pack("<HH", 2, 2) + bytes([0, 255, 37, 0])
    with pytest.raises(ds.ValidationError):
        ds.decode_raster(blob, ds.MSK8_MAGIC)
    # the identical payload is fine as a semantic raster
    sem = ds.SEMR_MAGIC + struct.pack("<HH", 2, 2) + bytes([0, 255, 37, 0])
    assert ds.decode_raster(sem, ds.SEMR_MAGIC).pixels[1, 0] == 37


# ---- golden fixtures ----

def test_golden_sem_fixture_parses_bit_exactly():
    with open(os.path.join(FIXTURES, "golden.sem"), "rb") as fh:
        blob = fh.read()
    want_px = (np.arange(64, dtype=np.uint8).reshape(8, 8)) % 7
    assert blob == b"SEMR" + struct.pack("<HH", 8, 8) + want_px.tobytes()
    raster = ds.decode_raster(blob, ds.SEMR_MAGIC)
    assert np.array_equal(raster.pixels, want_px)
    assert ds.encode_raster(raster, ds.SEMR_MAGIC) == blob


def test_golden_msk_fixture_parses_bit_exactly():
    with open(os.path.join(FIXTURES, "golden.msk"), "rb") as fh:
        blob = fh.read()
    want_px = np.zeros((8, 8), np.uint8)
    want_px[2:5, 3:6] = 255
    assert blob == b"MSK8" + struct.pack("<HH", 8, 8) + want_px.tobytes()
    raster = ds.decode_raster(blob, ds.MSK8_MAGIC)
    assert np.array_equal(raster.pixels, want_px)
    assert ds.encode_raster(raster, ds.MSK8_MAGIC) == blob


def test_corrupt_fixtures_raise_format_error():
    for name, magic in (("corrupt.sem", ds.SEMR_MAGIC),
                        ("corrupt.msk", ds.MSK8_MAGIC)):
        with open(os.path.join(FIXTURES, name), "rb") as fh:
            blob = fh.read()
        with pytest.raises(ds.FormatError):
            ds.decode_raster(blob, magic)


def test_golden_episode_reads_and_rewrites_bit_exactly(tmp_path):
    src = os.path.join(FIXTURES, "golden_episode")
    record = ds.read_episode(src)
    assert record.command == "stop near the car"
    assert record.frame_count == 2
    assert len(record.clicks) == 1
    assert record.clicks[0].frame_index == 0
    assert record.plan.maneuvers[0].kind == "stop"
    assert record.plan.maneuvers[0].referent.obj == "car"

    dst = tmp_path / "rewritten"
    ds.write_episode(record, dst)
    for rel in ("manifest.json", "poses.jsonl", "frames/000000.sem",
                "frames/000000.nav.msk", "frames/000000.trj.msk",
                "frames/000001.sem", "frames/000001.nav.msk",
                "frames/000001.trj.msk"):
        with open(os.path.join(src, rel), "rb") as fh:
            want = fh.read()
        with open(dst / rel, "rb") as fh:
            got = fh.read()
        assert got == want, rel


# ---- episode round trip and validation ----

def test_write_read_round_trip(tmp_path):
    rec = _tiny_record()
    ds.write_episode(rec, tmp_path / "ep")
    back = ds.read_episode(tmp_path / "ep")
    assert ds.records_equal(rec, back)
    # and the round trip is stable under a second pass
    ds.write_episode(back, tmp_path / "ep2")
    assert ds.records_equal(back, ds.read_episode(tmp_path / "ep2"))


def test_recorded_episode_round_trips(tmp_path):
    world = ws.generate_map(3)
    for sp in world.spawn_points:
        try:
            plan, route = cmd.generate_command(world, sp, seed=7)
            break
        except cmd.InfeasibleError:
            continue
    rec = oc.record_episode(world, plan, oc.make_route_state(route))
    ds.write_episode(rec, tmp_path / "ep")
    back = ds.read_episode(tmp_path / "ep")
    assert ds.records_equal(rec, back)
    assert back.frame_count == rec.frame_count


def test_validation_rejects_bad_click_reprojection(tmp_path):
    rec = _tiny_record()
    bad = dataclasses.replace(
        rec, clicks=(dataclasses.replace(rec.clicks[0],
                                         ground=GroundPoint(9.0, 3.0)),))
    with pytest.raises(ds.ValidationError):
        ds.validate_record(bad)
    with pytest.raises(ds.ValidationError):
        ds.write_episode(bad, tmp_path / "ep")
    assert not (tmp_path / "ep").exists()


def test_validation_rejects_out_of_range_click():
    rec = _tiny_record()
    bad = dataclasses.replace(
        rec, clicks=(dataclasses.replace(rec.clicks[0], frame_index=5),))
    with pytest.raises(ds.ValidationError):
        ds.validate_record(bad)


def test_validation_rejects_nonbinary_mask():
    rec = _tiny_record()
    grey = SemanticRaster(np.full((8, 8), 9, np.uint8))
    frames = (dataclasses.replace(rec.frames[0], nav_mask=grey),
              rec.frames[1])
    with pytest.raises(ds.ValidationError):
        ds.validate_record(dataclasses.replace(rec, frames=frames))


def test_read_missing_manifest_is_format_error(tmp_path):
    with pytest.raises(ds.FormatError):
        ds.read_episode(tmp_path / "nothing")


def test_read_bad_json_is_format_error(tmp_path):
    d = tmp_path / "ep"
    d.mkdir()
    (d / "manifest.json").write_text("{ not json")
    with pytest.raises(ds.FormatError):
        ds.read_episode(d)


def test_read_missing_key_is_format_error(tmp_path):
    ds.write_episode(_tiny_record(), tmp_path / "ep")
    man_path = tmp_path / "ep" / "manifest.json"
    man = json.loads(man_path.read_text())
    del man["goal_pose"]
    man_path.write_text(json.dumps(man))
    with pytest.raises(ds.FormatError):
        ds.read_episode(tmp_path / "ep")


def test_read_wrong_schema_is_format_error(tmp_path):
    ds.write_episode(_tiny_record(), tmp_path / "ep")
    man_path = tmp_path / "ep" / "manifest.json"
    man = json.loads(man_path.read_text())
    man["schema_version"] = 99
    man_path.write_text(json.dumps(man))
    with pytest.raises(ds.FormatError):
        ds.read_episode(tmp_path / "ep")


def test_read_missing_frame_file_is_validation_error(tmp_path):
    ds.write_episode(_tiny_record(), tmp_path / "ep")
    os.remove(tmp_path / "ep" / "frames" / "000001.nav.msk")
    with pytest.raises(ds.ValidationError):
        ds.read_episode(tmp_path / "ep")


def test_read_pose_count_mismatch_is_validation_error(tmp_path):
    ds.write_episode(_tiny_record(), tmp_path / "ep")
    poses = (tmp_path / "ep" / "poses.jsonl").read_text().splitlines()
    (tmp_path / "ep" / "poses.jsonl").write_text(poses[0] + "\n")
    with pytest.raises(ds.ValidationError):
        ds.read_episode(tmp_path / "ep")


def test_write_refuses_existing_directory_and_leaves_no_litter(tmp_path):
    rec = _tiny_record()
    ds.write_episode(rec, tmp_path / "ep")
    before = (tmp_path / "ep" / "manifest.json").read_bytes()
    with pytest.raises(ds.ValidationError):
        ds.write_episode(_tiny_record(command="park on the left"),
                         tmp_path / "ep")
    assert (tmp_path / "ep" / "manifest.json").read_bytes() == before
    leftovers = [n for n in os.listdir(tmp_path) if n.startswith(".ep-")]
    assert leftovers == []


def test_records_equal_detects_differences():
    a = _tiny_record()
    assert ds.records_equal(a, _tiny_record())
    assert not ds.records_equal(a, _tiny_record(command="park on the left"))
    shifted = dataclasses.replace(
        a, frames=a.frames[:1] + (dataclasses.replace(
            a.frames[1], pose=Pose2D(9.0, 9.0, 0.0)),))
    assert not ds.records_equal(a, shifted)


# ---- splits and stats ----

def test_split_manifest_round_trip(tmp_path):
    man = ds.SplitManifest("val", ("ep-000", "ep-001"), seed=12)
    ds.write_split(man, tmp_path)
    back = ds.read_split(tmp_path, "val")
    assert back == man
    assert ds.split_episode_dirs(tmp_path, back) == [
        str(tmp_path / "val" / "ep-000"), str(tmp_path / "val" / "ep-001")]


def test_read_split_missing_is_format_error(tmp_path):
    with pytest.raises(ds.FormatError):
        ds.read_split(tmp_path, "train")


def test_compute_stats_hand_built_split(tmp_path):
    a = _tiny_record(command="turn left now", n_clicks=1, n_frames=2)
    b = _tiny_record(command="stop near the black car", n_clicks=3,
                     n_frames=3)
    ds.write_episode(a, tmp_path / "train" / "ep-000")
    ds.write_episode(b, tmp_path / "train" / "ep-001")
    man = ds.SplitManifest("train", ("ep-000", "ep-001"), seed=0)
    ds.write_split(man, tmp_path)
    stats = ds.compute_stats(tmp_path, ds.read_split(tmp_path, "train"))
    assert stats.episodes == 2
    assert stats.frames == 5
    assert stats.mean_words == pytest.approx(4.0)
    assert stats.mean_clicks == pytest.approx(2.0)
