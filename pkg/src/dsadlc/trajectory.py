"""In-memory trajectory model: recordings, vehicle tracks, lanes and neighbours.

All coordinates are canonical: ``+x`` is the direction of travel of the
vehicle's carriageway, ``+y`` points to the overtaking (left) side, and ``x``
is the longitudinal position of the vehicle's front-center.  Tracks are
stored column-wise as numpy arrays; :class:`TrackFrame` objects are built on
demand.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Mapping

import numpy as np

from .errors import IntegrityError, NotFound, WindowUnderrun

NEIGHBOR_FIELDS = (
    "preceding_id",
    "following_id",
    "left_preceding_id",
    "left_alongside_id",
    "left_following_id",
    "right_preceding_id",
    "right_alongside_id",
    "right_following_id",
)

# Channel order of the surrounding-vehicle DOP stack.
ROLES = ("P", "PL", "PR", "FL", "FR", "ASL", "ASR")

_ROLE_FIELD = {
    "P": "preceding_id",
    "PL": "left_preceding_id",
    "PR": "right_preceding_id",
    "FL": "left_following_id",
    "FR": "right_following_id",
    "ASL": "left_alongside_id",
    "ASR": "right_alongside_id",
}


class VehicleClass(str, enum.Enum):
    CAR = "Car"
    TRUCK = "Truck"


class Direction(enum.IntEnum):
    """Driving direction, valued with the highD ``drivingDirection`` codes."""

    DECREASING = 1
    INCREASING = 2


@dataclass(frozen=True)
class TrackFrame:
    frame_index: int
    vehicle_id: int
    x: float
    y: float
    vx: float
    vy: float
    ax: float
    ay: float
    lane_id: int
    space_headway: float = 0.0
    time_headway: float = 0.0
    preceding_id: int | None = None
    following_id: int | None = None
    left_preceding_id: int | None = None
    left_alongside_id: int | None = None
    left_following_id: int | None = None
    right_preceding_id: int | None = None
    right_alongside_id: int | None = None
    right_following_id: int | None = None


_FLOAT_COLUMNS = ("x", "y", "vx", "vy", "ax", "ay", "space_headway", "time_headway")


@dataclass(frozen=True, eq=False)
class VehicleTrack:
    """One vehicle's trajectory.

    ``neighbor_ids`` has one column per entry of :data:`NEIGHBOR_FIELDS`;
    0 encodes an absent neighbour (ids are positive integers).
    """

    vehicle_id: int
    vehicle_class: VehicleClass
    driving_direction: Direction
    width: float
    length: float
    frame: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    lane_id: np.ndarray
    space_headway: np.ndarray
    time_headway: np.ndarray
    neighbor_ids: np.ndarray

    def __post_init__(self):
        n = len(self.frame)
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("frame", np.asarray(self.frame, dtype=np.int64))
        set_("lane_id", np.asarray(self.lane_id, dtype=np.int64))
        for name in _FLOAT_COLUMNS:
            set_(name, np.asarray(getattr(self, name), dtype=np.float64))
        ids = np.asarray(self.neighbor_ids, dtype=np.int64)
        if ids.size == 0:
            ids = ids.reshape(n, len(NEIGHBOR_FIELDS))
        set_("neighbor_ids", ids)
        set_("vehicle_class", VehicleClass(self.vehicle_class))
        set_("driving_direction", Direction(self.driving_direction))
        for name in _FLOAT_COLUMNS + ("lane_id",):
            if len(getattr(self, name)) != n:
                raise IntegrityError(f"vehicle {self.vehicle_id}: column {name} has wrong length")
        if self.neighbor_ids.shape != (n, len(NEIGHBOR_FIELDS)):
            raise IntegrityError(f"vehicle {self.vehicle_id}: neighbor id table has wrong shape")
        if n and np.any(np.diff(self.frame) != 1):
            raise IntegrityError(f"vehicle {self.vehicle_id}: frames are not contiguous")
        if np.any(self.space_headway < 0) or np.any(self.time_headway < 0):
            raise IntegrityError(f"vehicle {self.vehicle_id}: negative headway")
        no_leader = self.neighbor_ids[:, 0] == 0
        if np.any(self.space_headway[no_leader] != 0) or np.any(self.time_headway[no_leader] != 0):
            raise IntegrityError(f"vehicle {self.vehicle_id}: headway set without a preceding vehicle")
        for arr in (self.frame, self.lane_id, self.neighbor_ids, *(getattr(self, c) for c in _FLOAT_COLUMNS)):
            arr.setflags(write=False)

    @classmethod
    def from_frames(cls, frames, vehicle_class=VehicleClass.CAR,
                    driving_direction=Direction.INCREASING, width=1.8, length=4.5) -> "VehicleTrack":
        frames = list(frames)
        if not frames:
            raise IntegrityError("a track needs at least one frame")
        vid = frames[0].vehicle_id
        if any(f.vehicle_id != vid for f in frames):
            raise IntegrityError("frames of one track must share the vehicle id")
        cols = {name: [getattr(f, name) for f in frames] for name in _FLOAT_COLUMNS}
        ids = [[getattr(f, k) or 0 for k in NEIGHBOR_FIELDS] for f in frames]
        return cls(
            vehicle_id=vid,
            vehicle_class=vehicle_class,
            driving_direction=driving_direction,
            width=width,
            length=length,
            frame=[f.frame_index for f in frames],
            lane_id=[f.lane_id for f in frames],
            neighbor_ids=ids,
            **cols,
        )

    def __len__(self):
        return len(self.frame)

    @property
    def first_frame(self) -> int:
        return int(self.frame[0])

    @property
    def last_frame(self) -> int:
        return int(self.frame[-1])

    def has_frame(self, frame_index: int) -> bool:
        return len(self) > 0 and self.first_frame <= frame_index <= self.last_frame

    def row(self, frame_index: int) -> int:
        if not self.has_frame(frame_index):
            raise NotFound(f"vehicle {self.vehicle_id} has no frame {frame_index}")
        return int(frame_index - self.first_frame)

    def frame_at(self, frame_index: int) -> TrackFrame:
        i = self.row(frame_index)
        ids = {k: (int(v) or None) for k, v in zip(NEIGHBOR_FIELDS, self.neighbor_ids[i])}
        return TrackFrame(
            frame_index=int(self.frame[i]),
            vehicle_id=self.vehicle_id,
            lane_id=int(self.lane_id[i]),
            **{c: float(getattr(self, c)[i]) for c in _FLOAT_COLUMNS},
            **ids,
        )

    @property
    def frames(self) -> list[TrackFrame]:
        return [self.frame_at(int(f)) for f in self.frame]

    def slice(self, start: int, stop: int) -> "VehicleTrack":
        """Rows ``start:stop`` (positional) as a new track."""
        return VehicleTrack(
            vehicle_id=self.vehicle_id,
            vehicle_class=self.vehicle_class,
            driving_direction=self.driving_direction,
            width=self.width,
            length=self.length,
            frame=self.frame[start:stop],
            lane_id=self.lane_id[start:stop],
            neighbor_ids=self.neighbor_ids[start:stop],
            **{c: getattr(self, c)[start:stop] for c in _FLOAT_COLUMNS},
        )

    def equals(self, other: "VehicleTrack", atol: float = 0.0) -> bool:
        if not isinstance(other, VehicleTrack):
            return False
        same_meta = (
            self.vehicle_id == other.vehicle_id
            and self.vehicle_class == other.vehicle_class
            and self.driving_direction == other.driving_direction
            and abs(self.width - other.width) <= atol
            and abs(self.length - other.length) <= atol
            and len(self) == len(other)
        )
        if not same_meta:
            return False
        if not (np.array_equal(self.frame, other.frame)
                and np.array_equal(self.lane_id, other.lane_id)
                and np.array_equal(self.neighbor_ids, other.neighbor_ids)):
            return False
        return all(
            np.allclose(getattr(self, c), getattr(other, c), rtol=0.0, atol=atol)
            for c in _FLOAT_COLUMNS
        )

    def __eq__(self, other):
        return self.equals(other)

    __hash__ = None


TrajectoryWindow = VehicleTrack


@dataclass(frozen=True)
class Lane:
    """A lane in canonical coordinates; ``y_left > y_right``."""

    lane_id: int
    direction: Direction
    y_left: float
    y_right: float
    is_merge: bool = False

    @property
    def center(self) -> float:
        return 0.5 * (self.y_left + self.y_right)


@dataclass(frozen=True)
class NeighborSet:
    P: int | None = None
    PL: int | None = None
    PR: int | None = None
    FL: int | None = None
    FR: int | None = None
    ASL: int | None = None
    ASR: int | None = None

    def __post_init__(self):
        present = [v for v in self.as_tuple() if v is not None]
        if len(present) != len(set(present)):
            raise IntegrityError(f"vehicle assigned to more than one neighbour role: {self}")

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, r) for r in ROLES)

    def items(self) -> Iterator[tuple[str, int | None]]:
        return zip(ROLES, self.as_tuple())


@dataclass(frozen=True, eq=False)
class Recording:
    """A recording: lane layout plus all vehicle tracks.

    ``lanes`` maps each driving direction to its lanes ordered from the
    leftmost (overtaking side) to the rightmost lane.  ``ground_truth`` is
    only set by the synthetic generator and never serialised with the
    recording itself.
    """

    recording_id: int
    frame_rate: float
    lanes: Mapping[Direction, tuple[Lane, ...]]
    tracks: Mapping[int, VehicleTrack]
    speed_limit: float | None = None
    ground_truth: object = field(default=None, repr=False)

    def __post_init__(self):
        if not self.frame_rate > 0:
            raise IntegrityError(f"frame rate must be positive, got {self.frame_rate}")
        lanes = {Direction(d): tuple(ls) for d, ls in self.lanes.items()}
        object.__setattr__(self, "lanes", lanes)
        tracks = dict(self.tracks)
        object.__setattr__(self, "tracks", tracks)
        known = {(d, lane.lane_id) for d, ls in lanes.items() for lane in ls}
        for vid, track in tracks.items():
            if track.vehicle_id != vid:
                raise IntegrityError(f"track keyed {vid} carries vehicle id {track.vehicle_id}")
            for lid in np.unique(track.lane_id):
                if (track.driving_direction, int(lid)) not in known:
                    raise IntegrityError(
                        f"vehicle {vid} references lane {int(lid)} unknown for its direction"
                    )

    def track(self, vehicle_id: int) -> VehicleTrack:
        try:
            return self.tracks[vehicle_id]
        except KeyError:
            raise NotFound(f"unknown vehicle id {vehicle_id}") from None

    def frames_for(self, seconds: float) -> int:
        return int(round(seconds * self.frame_rate))

    @cached_property
    def _lane_lookup(self) -> dict:
        lookup = {}
        for d, lanes in self.lanes.items():
            for i, lane in enumerate(lanes):
                left = lanes[i - 1].lane_id if i > 0 else None
                right = lanes[i + 1].lane_id if i + 1 < len(lanes) else None
                lookup[(d, lane.lane_id)] = (lane, left, right)
        return lookup

    def lane(self, direction: Direction, lane_id: int) -> Lane:
        return self._lane_lookup[(Direction(direction), lane_id)][0]

    def left_of(self, direction: Direction, lane_id: int) -> int | None:
        return self._lane_lookup[(Direction(direction), lane_id)][1]

    def right_of(self, direction: Direction, lane_id: int) -> int | None:
        return self._lane_lookup[(Direction(direction), lane_id)][2]

    def merge_lane_ids(self) -> set[tuple[Direction, int]]:
        return {(d, lane.lane_id) for d, ls in self.lanes.items() for lane in ls if lane.is_merge}

    @cached_property
    def _frame_index(self):
        if not self.tracks:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, empty
        frames = np.concatenate([t.frame for t in self.tracks.values()])
        vids = np.concatenate([np.full(len(t), vid, dtype=np.int64) for vid, t in self.tracks.items()])
        rows = np.concatenate([np.arange(len(t), dtype=np.int64) for t in self.tracks.values()])
        order = np.lexsort((vids, frames))
        return frames[order], vids[order], rows[order]

    def vehicles_at(self, frame_index: int) -> tuple[np.ndarray, np.ndarray]:
        """Ids (ascending) and row positions of all vehicles present at a frame."""
        frames, vids, rows = self._frame_index
        lo = np.searchsorted(frames, frame_index, side="left")
        hi = np.searchsorted(frames, frame_index, side="right")
        return vids[lo:hi], rows[lo:hi]

    def equals(self, other: "Recording", atol: float = 0.0) -> bool:
        if not isinstance(other, Recording):
            return False
        if (self.recording_id != other.recording_id
                or self.frame_rate != other.frame_rate
                or self.speed_limit != other.speed_limit
                or set(self.tracks) != set(other.tracks)):
            return False
        mine = {d: ls for d, ls in self.lanes.items() if ls}
        theirs = {d: ls for d, ls in other.lanes.items() if ls}
        if set(mine) != set(theirs):
            return False
        for d in mine:
            if len(mine[d]) != len(theirs[d]):
                return False
            for la, lb in zip(mine[d], theirs[d]):
                if (la.lane_id, la.direction, la.is_merge) != (lb.lane_id, lb.direction, lb.is_merge):
                    return False
                if abs(la.y_left - lb.y_left) > atol or abs(la.y_right - lb.y_right) > atol:
                    return False
        return all(self.tracks[k].equals(other.tracks[k], atol) for k in self.tracks)


def window(track: VehicleTrack, end_frame: int, duration_s: float, frame_rate: float = 25.0) -> TrajectoryWindow:
    """The ``round(duration_s * frame_rate)`` frames ending at ``end_frame`` (inclusive)."""
    n = int(round(duration_s * frame_rate))
    if n < 1:
        raise WindowUnderrun(f"window of {duration_s} s at {frame_rate} Hz holds no frames")
    end = track.row(end_frame)
    start = end - n + 1
    if start < 0:
        raise WindowUnderrun(
            f"vehicle {track.vehicle_id}: {n} frames requested ending at {end_frame}, only {end + 1} available"
        )
    return track.slice(start, end + 1)


def _overlaps(x_front: float, length: float, ego_front: float, ego_length: float) -> bool:
    return x_front > ego_front - ego_length and x_front - length < ego_front


def geometric_roles(recording: Recording, ego_id: int, frame_index: int) -> dict[str, int | None]:
    """Neighbour roles by position only, plus the same-lane follower ``F``."""
    ego = recording.track(ego_id)
    i = ego.row(frame_index)
    direction = ego.driving_direction
    ego_lane = int(ego.lane_id[i])
    ego_x = float(ego.x[i])
    left = recording.left_of(direction, ego_lane)
    right = recording.right_of(direction, ego_lane)

    best: dict[str, tuple[float, int]] = {}

    def offer(role, dist, vid):
        if role not in best or (dist, vid) < best[role]:
            best[role] = (dist, vid)

    vids, rows = recording.vehicles_at(frame_index)
    for vid, row in zip(vids.tolist(), rows.tolist()):
        if vid == ego_id:
            continue
        other = recording.tracks[vid]
        if other.driving_direction != direction:
            continue
        lane = int(other.lane_id[row])
        x = float(other.x[row])
        dx = x - ego_x
        if lane == ego_lane:
            if dx > 0:
                offer("P", dx, vid)
            else:
                offer("F", -dx, vid)
        elif lane in (left, right):
            side = "L" if lane == left else "R"
            if _overlaps(x, other.length, ego_x, ego.length):
                offer("AS" + side, abs(dx), vid)
            elif dx > 0:
                offer("P" + side, dx, vid)
            else:
                offer("F" + side, -dx, vid)
    roles = {r: None for r in ROLES + ("F",)}
    roles.update({r: vid for r, (_, vid) in best.items()})
    return roles


def neighbors(recording: Recording, ego_id: int, frame_index: int) -> NeighborSet:
    """Resolve the seven neighbour roles of ``ego_id`` at ``frame_index``.

    Neighbour ids stored with the frame take precedence; a frame carrying no
    ids at all falls back to the geometric search.
    """
    ego = recording.track(ego_id)
    ids = ego.neighbor_ids[ego.row(frame_index)]
    if np.any(ids):
        by_field = dict(zip(NEIGHBOR_FIELDS, ids.tolist()))
        return NeighborSet(**{r: (by_field[_ROLE_FIELD[r]] or None) for r in ROLES})
    roles = geometric_roles(recording, ego_id, frame_index)
    return NeighborSet(**{r: roles[r] for r in ROLES})
