"""Lane-change detection, case extraction and train/test splitting.

A lane change is anchored at its crossing frame (the first frame with a new
lane id).  The manoeuvre onset ``t_start`` is found by walking back from the
crossing while the lateral speed toward the target lane stays above
:data:`ONSET_SPEED`; the decision frame lies one reaction time earlier.
"""
from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, FormatError, WindowUnderrun
from .features import DEFAULT_T_H, DOP_COLUMNS, DOP_ROWS, DOP_SHAPE, FACTOR_NAMES, WINDOW_S, FeatureBundle, assemble_case
from .trajectory import ROLES, Recording, VehicleTrack

ONSET_SPEED = 0.10  # m/s
DEFAULT_T_REACT = 1.0
MIN_STAY_S = 12.0
DEFAULT_STRIDE_S = 2.0
DEFAULT_DUP_FACTOR = 16
DEFAULT_TRAIN_FRACTION = 0.9

CASE_MAGIC = b"DSADLC-C"
CASE_FORMAT_VERSION = 1
DOP_CHANNELS = ROLES + ("EGO",)
DOP_SIZE = DOP_SHAPE[0] * DOP_SHAPE[1]
CASE_WIDTH = len(DOP_CHANNELS) * DOP_SIZE + len(FACTOR_NAMES)


class Label(enum.IntEnum):
    KEEP = 0
    LEFT = 1
    RIGHT = 2

    @property
    def title(self) -> str:
        return self.name.capitalize()


@dataclass(frozen=True)
class LaneChangeEvent:
    vehicle_id: int
    t_decision: int
    t_start: int
    t_cross: int
    t_end: int
    direction: Label
    from_lane: int
    to_lane: int

    def __post_init__(self):
        if self.direction not in (Label.LEFT, Label.RIGHT):
            raise ValueError(f"lane-change direction must be LEFT or RIGHT, got {self.direction!r}")
        if not self.t_decision < self.t_start <= self.t_cross <= self.t_end:
            raise ValueError(
                f"vehicle {self.vehicle_id}: frames out of order "
                f"({self.t_decision}, {self.t_start}, {self.t_cross}, {self.t_end})"
            )


class Provenance(NamedTuple):
    recording_id: int
    vehicle_id: int
    decision_frame: int


@dataclass(frozen=True, eq=False)
class LabeledCase:
    bundle: FeatureBundle
    label: Label
    provenance: Provenance

    def __post_init__(self):
        object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "provenance", Provenance(*self.provenance))


def _lane_change_side(recording: Recording, track: VehicleTrack, before: int, after: int, dy: float) -> Label:
    direction = track.driving_direction
    try:
        if recording.left_of(direction, before) == after:
            return Label.LEFT
        if recording.right_of(direction, before) == after:
            return Label.RIGHT
    except KeyError:
        pass
    # lanes not adjacent in the layout: fall back on the lateral displacement (+y is left)
    return Label.LEFT if dy > 0 else Label.RIGHT


def _crossings(track: VehicleTrack) -> np.ndarray:
    """Row indices whose lane id differs from the previous row."""
    return np.flatnonzero(np.diff(track.lane_id) != 0) + 1


def _onset_and_end(lateral: np.ndarray, cross: int, threshold: float) -> tuple[int, int]:
    start = cross
    while start > 0 and lateral[start - 1] > threshold:
        start -= 1
    end = cross
    while end + 1 < len(lateral) and lateral[end + 1] > threshold:
        end += 1
    return start, end


def _raw_events(track: VehicleTrack, recording: Recording, t_react: float, threshold: float):
    """All lane changes of a track, including those lacking decision history."""
    out = []
    offset = int(round(t_react * recording.frame_rate))
    for r in _crossings(track):
        before, after = int(track.lane_id[r - 1]), int(track.lane_id[r])
        side = _lane_change_side(recording, track, before, after, track.y[r] - track.y[r - 1])
        sign = 1.0 if side == Label.LEFT else -1.0
        start, end = _onset_and_end(sign * track.vy, r, threshold)
        t_start = int(track.frame[start])
        out.append(LaneChangeEvent(
            vehicle_id=track.vehicle_id,
            t_decision=t_start - offset,
            t_start=t_start,
            t_cross=int(track.frame[r]),
            t_end=int(track.frame[end]),
            direction=side,
            from_lane=before,
            to_lane=after,
        ))
    return out


def detect_lane_changes(track: VehicleTrack, recording: Recording, t_react: float = DEFAULT_T_REACT,
                        threshold: float = ONSET_SPEED, history_s: float = WINDOW_S) -> list[LaneChangeEvent]:
    """Lane changes of ``track`` whose decision frame has ``history_s`` of history."""
    need = int(round(history_s * recording.frame_rate))
    return [e for e in _raw_events(track, recording, t_react, threshold)
            if e.t_decision - need + 1 >= track.first_frame]


def filter_mlc(events: Sequence[LaneChangeEvent], recording: Recording) -> list[LaneChangeEvent]:
    """Drop lane changes that leave a merge (on-ramp) lane."""
    merge = recording.merge_lane_ids()
    if not merge:
        return list(events)
    return [e for e in events
            if (recording.track(e.vehicle_id).driving_direction, e.from_lane) not in merge]


def _lk_frames(track: VehicleTrack, recording: Recording, min_stay_s: float, stride_s: float,
               t_react: float, threshold: float, history_s: float) -> list[int]:
    fps = recording.frame_rate
    min_rows = int(round(min_stay_s * fps))
    stride = int(round(stride_s * fps))
    history = int(round(history_s * fps))
    if stride < 1:
        raise ConfigError(f"stride of {stride_s} s is shorter than one frame")
    cuts = _crossings(track)
    events = _raw_events(track, recording, t_react, threshold)
    bounds = np.concatenate([[0], cuts, [len(track)]])
    frames = []
    for k in range(len(bounds) - 1):
        lo, hi = int(bounds[k]), int(bounds[k + 1])
        if hi - lo < min_rows:
            continue
        # the first window after a lane change still carries its noise
        first_j = 2 if k > 0 else 1
        stop = hi
        if k < len(events):
            stop = min(stop, events[k].t_decision - int(track.frame[0]))
        j = first_j
        while lo + j * stride < stop:
            r = lo + j * stride
            if r - history + 1 >= lo:
                frames.append(int(track.frame[r]))
            j += 1
    return frames


def lane_keep_frames(track: VehicleTrack, recording: Recording, min_stay_s: float = MIN_STAY_S,
                     stride_s: float = DEFAULT_STRIDE_S, t_react: float = DEFAULT_T_REACT,
                     threshold: float = ONSET_SPEED, history_s: float = WINDOW_S) -> list[int]:
    """Decision frames of lane-keep cases for one track.

    Segments are maximal runs in one lane lasting at least ``min_stay_s``.
    Cases sit every ``stride_s`` from the segment start (the first one a
    full window in), skip one extra stride after a lane change, and stop
    before the decision frame of the next lane change.
    """
    return _lk_frames(track, recording, min_stay_s, stride_s, t_react, threshold, history_s)


def extract_lk_cases(recording: Recording, min_stay_s: float = MIN_STAY_S, stride_s: float = DEFAULT_STRIDE_S,
                     t_h: float = DEFAULT_T_H, t_react: float = DEFAULT_T_REACT) -> list[LabeledCase]:
    cases = []
    for vid in sorted(recording.tracks):
        track = recording.tracks[vid]
        for frame in lane_keep_frames(track, recording, min_stay_s, stride_s, t_react):
            bundle = assemble_case(recording, vid, frame, t_h)
            cases.append(LabeledCase(bundle, Label.KEEP, Provenance(recording.recording_id, vid, frame)))
    return cases


def extract_lc_cases(recording: Recording, events: Sequence[LaneChangeEvent],
                     t_h: float = DEFAULT_T_H) -> list[LabeledCase]:
    cases = []
    for e in events:
        try:
            bundle = assemble_case(recording, e.vehicle_id, e.t_decision, t_h)
        except WindowUnderrun:
            continue
        cases.append(LabeledCase(bundle, e.direction,
                                 Provenance(recording.recording_id, e.vehicle_id, e.t_decision)))
    return cases


def detect_all(recording: Recording, t_react: float = DEFAULT_T_REACT) -> list[LaneChangeEvent]:
    """Discretionary lane changes of every vehicle in a recording."""
    events = []
    for vid in sorted(recording.tracks):
        events.extend(detect_lane_changes(recording.tracks[vid], recording, t_react))
    return filter_mlc(events, recording)


def extract_cases(recording: Recording, t_react: float = DEFAULT_T_REACT, t_h: float = DEFAULT_T_H,
                  stride_s: float = DEFAULT_STRIDE_S, min_stay_s: float = MIN_STAY_S) -> list[LabeledCase]:
    """Lane-change cases followed by lane-keep cases of one recording."""
    lc = extract_lc_cases(recording, detect_all(recording, t_react), t_h)
    return lc + extract_lk_cases(recording, min_stay_s, stride_s, t_h, t_react)


# ---------------------------------------------------------------------------
# columnar case sets


def flatten_bundle(bundle: FeatureBundle) -> np.ndarray:
    """One case row: the 7 surrounding DOPs, the ego DOP, then the factors."""
    return np.concatenate([bundle.surrounding.reshape(-1), bundle.ego.reshape(-1), bundle.factors])


def unflatten_row(row: np.ndarray) -> FeatureBundle:
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (CASE_WIDTH,):
        raise FormatError(f"case row must have {CASE_WIDTH} entries, got {row.shape}")
    n_sur = len(ROLES) * DOP_SIZE
    return FeatureBundle(
        row[:n_sur].reshape((len(ROLES),) + DOP_SHAPE).copy(),
        row[n_sur:n_sur + DOP_SIZE].reshape(DOP_SHAPE).copy(),
        row[n_sur + DOP_SIZE:].copy(),
    )


@dataclass(eq=False)
class CaseSet:
    """Cases as aligned columns: features (n, 458), labels (n,), provenance (n, 3)."""

    features: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray
    meta: dict | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, CASE_WIDTH)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.provenance = np.asarray(self.provenance, dtype=np.int64).reshape(-1, 3)
        self.meta = dict(self.meta or {})
        n = len(self.features)
        if len(self.labels) != n or len(self.provenance) != n:
            raise FormatError("features, labels and provenance differ in length")
        if n and (self.labels.min() < 0 or self.labels.max() > 2):
            raise FormatError("labels must be 0 (Keep), 1 (Left) or 2 (Right)")

    @classmethod
    def from_cases(cls, cases: Sequence[LabeledCase], meta: dict | None = None) -> "CaseSet":
        if not cases:
            return cls(np.zeros((0, CASE_WIDTH)), np.zeros(0), np.zeros((0, 3)), meta)
        return cls(np.stack([flatten_bundle(c.bundle) for c in cases]),
                   [int(c.label) for c in cases],
                   [tuple(c.provenance) for c in cases], meta)

    @classmethod
    def concat(cls, sets: Sequence["CaseSet"], meta: dict | None = None) -> "CaseSet":
        sets = list(sets)
        if not sets:
            return cls.from_cases([], meta)
        return cls(np.concatenate([s.features for s in sets]), np.concatenate([s.labels for s in sets]),
                   np.concatenate([s.provenance for s in sets]), meta if meta is not None else sets[0].meta)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> LabeledCase:
        return LabeledCase(unflatten_row(self.features[i]), Label(int(self.labels[i])),
                           Provenance(*(int(v) for v in self.provenance[i])))

    def to_cases(self) -> list[LabeledCase]:
        return [self[i] for i in range(len(self))]

    def take(self, index) -> "CaseSet":
        index = np.asarray(index, dtype=np.int64)
        return CaseSet(self.features[index], self.labels[index], self.provenance[index], self.meta)

    @property
    def surrounding(self) -> np.ndarray:
        return self.features[:, :len(ROLES) * DOP_SIZE].reshape((-1, len(ROLES)) + DOP_SHAPE)

    @property
    def ego(self) -> np.ndarray:
        n_sur = len(ROLES) * DOP_SIZE
        return self.features[:, n_sur:n_sur + DOP_SIZE].reshape((-1, 1) + DOP_SHAPE)

    @property
    def factors(self) -> np.ndarray:
        return self.features[:, len(DOP_CHANNELS) * DOP_SIZE:]

    def label_counts(self) -> dict[str, int]:
        return {lab.title: int(np.sum(self.labels == lab)) for lab in Label}

    def keys(self) -> list[tuple[int, int, int]]:
        return [tuple(int(v) for v in p) for p in self.provenance]

    def equals(self, other: "CaseSet") -> bool:
        return (isinstance(other, CaseSet) and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.provenance, other.provenance))

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features.astype("<f8"), self.labels.astype("<i8"), self.provenance.astype("<i8")):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def write(self, path) -> None:
        write_case_file(path, self)

    @classmethod
    def read(cls, path) -> "CaseSet":
        return read_case_file(path)


def case_columns() -> list[str]:
    cols = [f"{ch}.{row}.{stat}" for ch in DOP_CHANNELS for row in DOP_ROWS for stat in DOP_COLUMNS]
    return cols + [f"factor.{name}" for name in FACTOR_NAMES]


def write_case_file(path, cases: CaseSet) -> None:
    """Binary case file.

    Layout: magic, u32 version, u32 header length, JSON header (count,
    column names, meta), then float64 features (n x 458, row-major), int64
    provenance (n x 3: recording, vehicle, decision frame), uint8 labels,
    all little-endian, and a SHA-256 trailer over everything before it.
    """
    header = {"count": len(cases), "columns": case_columns(), "meta": cases.meta,
              "labels": {lab.title: int(lab) for lab in Label}}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(CASE_MAGIC + struct.pack("<II", CASE_FORMAT_VERSION, len(head)) + head)
    body += np.ascontiguousarray(cases.features, dtype="<f8").tobytes()
    body += np.ascontiguousarray(cases.provenance, dtype="<i8").tobytes()
    body += np.ascontiguousarray(cases.labels, dtype="u1").tobytes()
    body += hashlib.sha256(body).digest()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(body))


def read_case_file(path) -> CaseSet:
    data = Path(path).read_bytes()
    fixed = len(CASE_MAGIC) + 8
    if len(data) < fixed + 32 or data[:len(CASE_MAGIC)] != CASE_MAGIC:
        raise FormatError(f"{path}: not a case file or truncated")
    if hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    version, head_len = struct.unpack("<II", data[len(CASE_MAGIC):fixed])
    if version != CASE_FORMAT_VERSION:
        raise FormatError(f"{path}: case format version {version}, expected {CASE_FORMAT_VERSION}")
    try:
        header = json.loads(data[fixed:fixed + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from None
    if header.get("columns") != case_columns():
        raise FormatError(f"{path}: column layout differs from this version's layout")
    n = int(header["count"])
    off = fixed + head_len
    sizes = (n * CASE_WIDTH * 8, n * 3 * 8, n)
    if off + sum(sizes) != len(data) - 32:
        raise FormatError(f"{path}: payload size does not match {n} cases")
    feats = np.frombuffer(data, dtype="<f8", count=n * CASE_WIDTH, offset=off).reshape(n, CASE_WIDTH)
    off += sizes[0]
    prov = np.frombuffer(data, dtype="<i8", count=n * 3, offset=off).reshape(n, 3)
    off += sizes[1]
    labels = np.frombuffer(data, dtype="u1", count=n, offset=off)
    return CaseSet(feats.astype(np.float64), labels.astype(np.int64), prov.astype(np.int64), header["meta"])


# ---------------------------------------------------------------------------
# splitting


def split_indices(n: int, train_fraction: float = DEFAULT_TRAIN_FRACTION, seed: int = 0):
    """Seeded permutation split: ``(train_index, test_index)``."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if n < 1:
        raise ConfigError("cannot split an empty case set")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    return perm[:n_train], perm[n_train:]


def _select(cases, index):
    if isinstance(cases, CaseSet):
        return cases.take(index)
    return [cases[int(i)] for i in index]


def _labels_of(cases) -> np.ndarray:
    if isinstance(cases, CaseSet):
        return cases.labels
    return np.array([int(c.label) for c in cases], dtype=np.int64)


def split_and_balance(cases, train_fraction: float = DEFAULT_TRAIN_FRACTION,
                      dup_factor: int = DEFAULT_DUP_FACTOR, seed: int = 0):
    """Split at case level, then add ``dup_factor`` copies of every training lane change.

    Accepts a :class:`CaseSet` or a list of :class:`LabeledCase` and returns
    the same kind.  The test split is never duplicated.
    """
    if dup_factor < 0 or int(dup_factor) != dup_factor:
        raise ConfigError(f"dup_factor must be a non-negative integer, got {dup_factor}")
    train_idx, test_idx = split_indices(len(cases), train_fraction, seed)
    labels = _labels_of(cases)
    lc = train_idx[labels[train_idx] != Label.KEEP]
    balanced = np.concatenate([train_idx, np.tile(lc, int(dup_factor))])
    return _select(cases, balanced), _select(cases, test_idx)
