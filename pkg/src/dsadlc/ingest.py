"""Read and write recordings in the highD three-file CSV layout.

Files per recording ``NN``::

    NN_recordingMeta.csv  id,frameRate,speedLimit,upperLaneMarkings,lowerLaneMarkings[,mergeLanes]
    NN_tracksMeta.csv     id,class,drivingDirection,numFrames
    NN_tracks.csv         frame,id,x,y,width,height,xVelocity,yVelocity,xAcceleration,
                          yAcceleration,dhw,thw,ttc,precedingId,followingId,leftPrecedingId,
                          leftAlongsideId,leftFollowingId,rightPrecedingId,rightAlongsideId,
                          rightFollowingId,laneId

Raw positions follow highD: ``x, y`` is the upper-left corner of the
bounding box in image axes (``y`` down), ``width`` is the box extent along
``x`` (vehicle length) and ``height`` the extent along ``y`` (vehicle
width).  Loading converts every track to canonical coordinates (see
:mod:`dsadlc.trajectory`); writing applies the inverse.  Absent neighbour
ids are encoded as 0.  ``mergeLanes`` is an optional ``;``-separated list
of on-ramp lane ids; when the column is missing, merge lanes are inferred.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import IntegrityError, SchemaError
from .trajectory import NEIGHBOR_FIELDS, Direction, Lane, Recording, VehicleClass, VehicleTrack

log = logging.getLogger(__name__)

DEFAULT_FRAME_RATE = 25.0

RECORDING_META_COLUMNS = ["id", "frameRate", "speedLimit", "upperLaneMarkings", "lowerLaneMarkings"]
TRACKS_META_COLUMNS = ["id", "class", "drivingDirection", "numFrames"]
NEIGHBOR_COLUMNS = [
    "precedingId",
    "followingId",
    "leftPrecedingId",
    "leftAlongsideId",
    "leftFollowingId",
    "rightPrecedingId",
    "rightAlongsideId",
    "rightFollowingId",
]
TRACKS_COLUMNS = [
    "frame", "id", "x", "y", "width", "height",
    "xVelocity", "yVelocity", "xAcceleration", "yAcceleration",
    "dhw", "thw", "ttc", *NEIGHBOR_COLUMNS, "laneId",
]

# Merge-lane inference: a rightmost lane whose traffic disappears this far
# (as a fraction of the observed road extent) before the downstream end.
MERGE_LANE_SHORTFALL = 0.25


@dataclass(frozen=True)
class RecordingPaths:
    recording_meta: Path
    tracks_meta: Path
    tracks: Path

    @classmethod
    def in_dir(cls, root, recording_id: int) -> "RecordingPaths":
        root = Path(root)
        stem = f"{recording_id:02d}"
        return cls(
            root / f"{stem}_recordingMeta.csv",
            root / f"{stem}_tracksMeta.csv",
            root / f"{stem}_tracks.csv",
        )


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[RecordingPaths, ...]

    @classmethod
    def discover(cls, root) -> "DatasetManifest":
        """All complete ``NN_*`` triples under ``root``, ordered by recording number."""
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset root {root} is not a directory")
        entries = []
        for meta in sorted(root.glob("*_recordingMeta.csv")):
            m = re.fullmatch(r"(\d+)_recordingMeta\.csv", meta.name)
            if not m:
                continue
            paths = RecordingPaths(meta, root / f"{m.group(1)}_tracksMeta.csv", root / f"{m.group(1)}_tracks.csv")
            missing = [p for p in (paths.tracks_meta, paths.tracks) if not p.exists()]
            if missing:
                raise FileNotFoundError(f"recording {meta.name}: missing {', '.join(map(str, missing))}")
            entries.append(paths)
        return cls(root, tuple(entries))


def _require(df: pd.DataFrame, columns, path) -> None:
    for col in columns:
        if col not in df.columns:
            raise SchemaError(f"{path}: missing column '{col}'")


def _read_csv(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision="round_trip", keep_default_na=False, na_values=[""])
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: header row missing") from None


def _parse_markings(value) -> list[float]:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return []
    text = str(value).strip()
    if not text:
        return []
    return sorted(float(v) for v in text.split(";") if v.strip())


def _lanes_from_markings(upper: list[float], lower: list[float], merge_ids: set[int]) -> dict:
    k = len(upper)
    upper_lanes = []
    for i in range(1, len(upper)):
        lid = i + 1
        upper_lanes.append(Lane(lid, Direction.DECREASING, upper[i], upper[i - 1], lid in merge_ids))
    lower_lanes = []
    for i in range(1, len(lower)):
        lid = k + i + 1
        lower_lanes.append(Lane(lid, Direction.INCREASING, -lower[i - 1], -lower[i], lid in merge_ids))
    # left-to-right in the direction of travel
    return {
        Direction.DECREASING: tuple(sorted(upper_lanes, key=lambda lane: -lane.lane_id)),
        Direction.INCREASING: tuple(sorted(lower_lanes, key=lambda lane: lane.lane_id)),
    }


def _to_canonical(direction: Direction, x, y, vx, vy, ax, ay, length, width):
    yc = y + width / 2.0
    if direction == Direction.INCREASING:
        return x + length, -yc, vx, -vy, ax, -ay
    return -x, yc, -vx, vy, -ax, ay


def _from_canonical(direction: Direction, x, y, vx, vy, ax, ay, length, width):
    if direction == Direction.INCREASING:
        return x - length, -y - width / 2.0, vx, -vy, ax, -ay
    return -x, y - width / 2.0, -vx, vy, -ax, ay


def infer_merge_lanes(lanes: dict, tracks: dict) -> dict:
    """Flag rightmost lanes whose traffic ends well before the downstream edge."""
    out = {}
    for direction, lane_list in lanes.items():
        lane_list = list(lane_list)
        dir_tracks = [t for t in tracks.values() if t.driving_direction == direction and len(t)]
        if len(lane_list) >= 2 and dir_tracks:
            xs = np.concatenate([t.x for t in dir_tracks])
            lids = np.concatenate([t.lane_id for t in dir_tracks])
            lo, hi = float(xs.min()), float(xs.max())
            rightmost = lane_list[-1]
            in_lane = xs[lids == rightmost.lane_id]
            if in_lane.size and hi - float(in_lane.max()) > MERGE_LANE_SHORTFALL * (hi - lo):
                lane_list[-1] = Lane(rightmost.lane_id, direction, rightmost.y_left, rightmost.y_right, True)
        out[direction] = tuple(lane_list)
    return out


def load_recording(entry: RecordingPaths) -> Recording:
    rec_meta = _read_csv(entry.recording_meta)
    _require(rec_meta, ["id", "upperLaneMarkings", "lowerLaneMarkings"], entry.recording_meta)
    if len(rec_meta) != 1:
        raise SchemaError(f"{entry.recording_meta}: expected exactly one data row, found {len(rec_meta)}")
    meta = rec_meta.iloc[0]
    recording_id = int(meta["id"])
    frame_rate = DEFAULT_FRAME_RATE
    if "frameRate" in rec_meta.columns and not pd.isna(meta["frameRate"]):
        frame_rate = float(meta["frameRate"])
    speed_limit = None
    if "speedLimit" in rec_meta.columns and not pd.isna(meta["speedLimit"]) and float(meta["speedLimit"]) > 0:
        speed_limit = float(meta["speedLimit"])
    merge_known = "mergeLanes" in rec_meta.columns
    merge_ids = {int(v) for v in _parse_markings(meta["mergeLanes"])} if merge_known else set()
    lanes = _lanes_from_markings(
        _parse_markings(meta["upperLaneMarkings"]), _parse_markings(meta["lowerLaneMarkings"]), merge_ids
    )

    tracks_meta = _read_csv(entry.tracks_meta)
    _require(tracks_meta, TRACKS_META_COLUMNS, entry.tracks_meta)
    info = {}
    for row in tracks_meta.to_dict("records"):
        vid = int(row["id"])
        try:
            cls = VehicleClass(str(row["class"]))
        except ValueError:
            raise SchemaError(f"{entry.tracks_meta}: vehicle {vid} has unknown class {row['class']!r}") from None
        direction = int(row["drivingDirection"])
        if direction not in (1, 2):
            raise SchemaError(f"{entry.tracks_meta}: vehicle {vid} has invalid drivingDirection {direction}")
        info[vid] = (cls, Direction(direction), int(row["numFrames"]))

    df = _read_csv(entry.tracks)
    _require(df, TRACKS_COLUMNS, entry.tracks)
    df = df.sort_values(["id", "frame"], kind="stable")
    tracks = {}
    n_rows = 0
    for vid, g in df.groupby("id", sort=True):
        vid = int(vid)
        if vid not in info:
            raise IntegrityError(f"{entry.tracks}: vehicle {vid} missing from tracks meta")
        cls, direction, num_frames = info[vid]
        frames = g["frame"].to_numpy(np.int64)
        if np.any(np.diff(frames) != 1):
            raise IntegrityError(f"{entry.tracks}: vehicle {vid} has non-contiguous frames")
        if len(frames) != num_frames:
            raise IntegrityError(
                f"{entry.tracks}: vehicle {vid} has {len(frames)} rows but numFrames={num_frames}"
            )
        length = float(g["width"].iloc[0])
        width = float(g["height"].iloc[0])
        x, y, vx, vy, ax, ay = _to_canonical(
            direction,
            *(g[c].to_numpy(np.float64) for c in
              ("x", "y", "xVelocity", "yVelocity", "xAcceleration", "yAcceleration")),
            length, width,
        )
        ids = g[NEIGHBOR_COLUMNS].to_numpy(np.int64)
        tracks[vid] = VehicleTrack(
            vehicle_id=vid,
            vehicle_class=cls,
            driving_direction=direction,
            width=width,
            length=length,
            frame=frames,
            x=x, y=y, vx=vx, vy=vy, ax=ax, ay=ay,
            lane_id=g["laneId"].to_numpy(np.int64),
            space_headway=g["dhw"].to_numpy(np.float64),
            time_headway=g["thw"].to_numpy(np.float64),
            neighbor_ids=ids,
        )
        n_rows += len(frames)
    if n_rows != len(df):
        raise IntegrityError(f"{entry.tracks}: {len(df)} rows read but {n_rows} frames built")
    missing = set(info) - set(tracks)
    if missing:
        raise IntegrityError(f"{entry.tracks_meta}: vehicles without rows: {sorted(missing)[:10]}")
    if not merge_known:
        lanes = infer_merge_lanes(lanes, tracks)
    log.debug("loaded recording %d: %d tracks, %d rows", recording_id, len(tracks), n_rows)
    return Recording(recording_id, frame_rate, lanes, tracks, speed_limit)


def _markings_for(recording: Recording):
    """Raw lane markings for both carriageways, checked against the lane ids."""
    upper_lanes = sorted(recording.lanes.get(Direction.DECREASING, ()), key=lambda lane: lane.lane_id)
    lower_lanes = sorted(recording.lanes.get(Direction.INCREASING, ()), key=lambda lane: lane.lane_id)
    upper = sorted({v for lane in upper_lanes for v in (lane.y_left, lane.y_right)})
    lower = sorted({-v for lane in lower_lanes for v in (lane.y_left, lane.y_right)})
    rebuilt = _lanes_from_markings(upper, lower, set())
    for d, lane_list in (("upper", upper_lanes), ("lower", lower_lanes)):
        want = [lane.lane_id for lane in lane_list]
        got = sorted(lane.lane_id for lane in rebuilt[Direction.DECREASING if d == "upper" else Direction.INCREASING])
        if want != got:
            raise SchemaError(
                f"{d} lane ids {want} do not follow the marking-based numbering {got}"
            )
    return upper, lower


def _fmt_markings(values) -> str:
    return ";".join(repr(float(v)) for v in values)


def _ttc_column(recording: Recording, track: VehicleTrack) -> np.ndarray:
    out = np.zeros(len(track))
    for i, pid in enumerate(track.neighbor_ids[:, 0].tolist()):
        if not pid or pid not in recording.tracks:
            continue
        leader = recording.tracks[pid]
        f = int(track.frame[i])
        if not leader.has_frame(f):
            continue
        j = leader.row(f)
        closing = track.vx[i] - leader.vx[j]
        if closing != 0:
            out[i] = (leader.x[j] - track.x[i]) / closing
    return out


def write_recording(recording: Recording, paths: RecordingPaths) -> None:
    upper, lower = _markings_for(recording)
    merge = sorted(lane.lane_id for ls in recording.lanes.values() for lane in ls if lane.is_merge)
    rec_meta = pd.DataFrame([{
        "id": recording.recording_id,
        "frameRate": float(recording.frame_rate),
        "speedLimit": -1.0 if recording.speed_limit is None else float(recording.speed_limit),
        "upperLaneMarkings": _fmt_markings(upper),
        "lowerLaneMarkings": _fmt_markings(lower),
        "mergeLanes": ";".join(str(v) for v in merge),
    }])
    meta_rows = []
    parts = []
    for vid in sorted(recording.tracks):
        t = recording.tracks[vid]
        meta_rows.append({
            "id": vid,
            "class": t.vehicle_class.value,
            "drivingDirection": int(t.driving_direction),
            "numFrames": len(t),
        })
        x, y, vx, vy, ax, ay = _from_canonical(t.driving_direction, t.x, t.y, t.vx, t.vy, t.ax, t.ay,
                                               t.length, t.width)
        cols = {
            "frame": t.frame,
            "id": np.full(len(t), vid, dtype=np.int64),
            "x": x, "y": y,
            "width": np.full(len(t), t.length),
            "height": np.full(len(t), t.width),
            "xVelocity": vx, "yVelocity": vy,
            "xAcceleration": ax, "yAcceleration": ay,
            "dhw": t.space_headway, "thw": t.time_headway,
            "ttc": _ttc_column(recording, t),
        }
        for name, col in zip(NEIGHBOR_COLUMNS, t.neighbor_ids.T):
            cols[name] = col
        cols["laneId"] = t.lane_id
        parts.append(pd.DataFrame(cols, columns=TRACKS_COLUMNS))
    tracks_df = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=TRACKS_COLUMNS)
    tracks_meta = pd.DataFrame(meta_rows, columns=TRACKS_META_COLUMNS)
    for path, df in ((paths.recording_meta, rec_meta), (paths.tracks_meta, tracks_meta), (paths.tracks, tracks_df)):
        try:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            df.to_csv(path, index=False, lineterminator="\n")
        except OSError as exc:
            raise OSError(f"writing {path}: {exc}") from exc


assert len(NEIGHBOR_COLUMNS) == len(NEIGHBOR_FIELDS)
