import pandas as pd
import pytest

from dsadlc.errors import IntegrityError, SchemaError
from dsadlc.ingest import (
    NEIGHBOR_COLUMNS, TRACKS_COLUMNS, DatasetManifest, RecordingPaths, infer_merge_lanes, load_recording,
    write_recording,
)
from dsadlc.trajectory import Direction

from conftest import make_recording, make_track


def _raw_rows(vid, frames, x, y, vx, vy=0.0, ax=0.0, ay=0.0, length=4.0, width=2.0, lane=5, preceding=0):
    rows = []
    for k, f in enumerate(frames):
        row = {"frame": f, "id": vid, "x": x + vx * k / 25.0, "y": y, "width": length, "height": width,
               "xVelocity": vx, "yVelocity": vy, "xAcceleration": ax, "yAcceleration": ay,
               "dhw": 0.0, "thw": 0.0, "ttc": 0.0, "laneId": lane}
        row.update({c: 0 for c in NEIGHBOR_COLUMNS})
        row["precedingId"] = preceding
        rows.append(row)
    return rows


def write_raw(root, tracks_rows, meta_rows, rec_meta=None):
    paths = RecordingPaths.in_dir(root, 1)
    rec = {"id": 1, "frameRate": 25, "speedLimit": -1, "upperLaneMarkings": "1.0;4.5;8.0",
           "lowerLaneMarkings": "12.0;15.5;19.0;22.5"}
    rec.update(rec_meta or {})
    pd.DataFrame([rec]).to_csv(paths.recording_meta, index=False)
    pd.DataFrame(meta_rows).to_csv(paths.tracks_meta, index=False)
    pd.DataFrame(tracks_rows, columns=TRACKS_COLUMNS).to_csv(paths.tracks, index=False)
    return paths


def _basic(tmp_path, **rec_meta):
    rows = _raw_rows(1, range(10, 15), x=10.0, y=15.0, vx=30.0, vy=0.5, ax=1.0, ay=0.2, lane=5)
    rows += _raw_rows(2, range(0, 3), x=50.0, y=5.0, vx=-30.0, vy=0.25, ax=-1.0, lane=2)
    meta = [{"id": 1, "class": "Car", "drivingDirection": 2, "numFrames": 5},
            {"id": 2, "class": "Truck", "drivingDirection": 1, "numFrames": 3}]
    return write_raw(tmp_path, rows, meta, rec_meta)


def test_increasing_track_is_converted_to_front_centre_coordinates(tmp_path):
    rec = load_recording(_basic(tmp_path))
    t = rec.track(1)
    assert t.driving_direction == Direction.INCREASING
    assert t.length == 4.0 and t.width == 2.0
    assert t.x[0] == pytest.approx(14.0)      # raw left edge + length
    assert t.y[0] == pytest.approx(-16.0)     # centre, y axis flipped
    assert t.vx[0] == 30.0 and t.vy[0] == -0.5
    assert t.ax[0] == 1.0 and t.ay[0] == -0.2
    assert t.frame.tolist() == [10, 11, 12, 13, 14]


def test_decreasing_track_is_mirrored(tmp_path):
    t = load_recording(_basic(tmp_path)).track(2)
    assert t.driving_direction == Direction.DECREASING
    assert t.x[0] == pytest.approx(-50.0)
    assert t.y[0] == pytest.approx(6.0)
    assert t.vx[0] == 30.0 and t.vy[0] == 0.25
    assert t.ax[0] == 1.0


def test_lane_numbering_from_markings(tmp_path):
    rec = load_recording(_basic(tmp_path))
    upper = [lane.lane_id for lane in rec.lanes[Direction.DECREASING]]
    lower = [lane.lane_id for lane in rec.lanes[Direction.INCREASING]]
    assert upper == [3, 2]        # left to right when driving in the decreasing direction
    assert lower == [5, 6, 7]
    assert rec.left_of(Direction.INCREASING, 6) == 5
    assert rec.left_of(Direction.DECREASING, 2) == 3


def test_meta_defaults(tmp_path):
    rec = load_recording(_basic(tmp_path))
    assert rec.speed_limit is None
    assert rec.frame_rate == 25.0
    rec = load_recording(_basic(tmp_path, speedLimit=33.33))
    assert rec.speed_limit == pytest.approx(33.33)


def test_missing_column_is_a_schema_error(tmp_path):
    paths = _basic(tmp_path)
    df = pd.read_csv(paths.tracks).drop(columns=["xVelocity"])
    df.to_csv(paths.tracks, index=False)
    with pytest.raises(SchemaError, match="xVelocity"):
        load_recording(paths)


def test_unknown_vehicle_class_is_a_schema_error(tmp_path):
    paths = _basic(tmp_path)
    df = pd.read_csv(paths.tracks_meta)
    df.loc[0, "class"] = "Bus"
    df.to_csv(paths.tracks_meta, index=False)
    with pytest.raises(SchemaError):
        load_recording(paths)


def test_frame_gap_is_an_integrity_error(tmp_path):
    paths = _basic(tmp_path)
    df = pd.read_csv(paths.tracks)
    df = df[df.frame != 12]
    df.to_csv(paths.tracks, index=False)
    with pytest.raises(IntegrityError):
        load_recording(paths)


def test_num_frames_mismatch_is_an_integrity_error(tmp_path):
    paths = _basic(tmp_path)
    df = pd.read_csv(paths.tracks_meta)
    df.loc[0, "numFrames"] = 6
    df.to_csv(paths.tracks_meta, index=False)
    with pytest.raises(IntegrityError):
        load_recording(paths)


def test_manifest_discovers_recordings_in_order(tmp_path):
    _basic(tmp_path)
    paths = RecordingPaths.in_dir(tmp_path, 3)
    for src, dst in zip(RecordingPaths.in_dir(tmp_path, 1).__dict__.values(), paths.__dict__.values()):
        dst.write_bytes(src.read_bytes())
    manifest = DatasetManifest.discover(tmp_path)
    assert [e.tracks.name for e in manifest.entries] == ["01_tracks.csv", "03_tracks.csv"]
    paths.tracks.unlink()
    with pytest.raises(FileNotFoundError):
        DatasetManifest.discover(tmp_path)


def test_synthetic_recording_round_trips(tmp_path, synth_recording):
    paths = RecordingPaths.in_dir(tmp_path, synth_recording.recording_id)
    write_recording(synth_recording, paths)
    loaded = load_recording(paths)
    assert loaded.equals(synth_recording, atol=1e-9)
    # a second write and load cycle is stable
    again = RecordingPaths.in_dir(tmp_path / "again", synth_recording.recording_id)
    write_recording(loaded, again)
    reloaded = load_recording(again)
    assert reloaded.equals(loaded, atol=1e-9)


def test_merge_flags_survive_round_trip(tmp_path):
    rec = make_recording([make_track(1, 5, lane=4)], merge_lane=4)
    paths = RecordingPaths.in_dir(tmp_path, 1)
    write_recording(rec, paths)
    assert load_recording(paths).merge_lane_ids() == {(Direction.INCREASING, 4)}


def test_merge_lane_inferred_when_rightmost_lane_ends_early():
    rec = make_recording([make_track(1, 100, x0=0.0, v=30.0, lane=3),    # reaches x = 119
                          make_track(2, 25, x0=0.0, v=30.0, lane=4)])    # stops at x = 29
    flagged = infer_merge_lanes(rec.lanes, rec.tracks)[Direction.INCREASING]
    assert [lane.is_merge for lane in flagged] == [False, False, True]
    rec = make_recording([make_track(1, 100, lane=3), make_track(2, 100, lane=4)])
    flagged = infer_merge_lanes(rec.lanes, rec.tracks)[Direction.INCREASING]
    assert not any(lane.is_merge for lane in flagged)
