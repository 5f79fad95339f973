"""Accuracy reporting and lane-change impact analysis.

Impact is measured on the follower in the target lane: its relative speed
change between the start and the end of the manoeuvre, and how its
time-to-collision with its own leader changed over the same interval.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import LengthMismatch, MissingTrajectory, NonPositiveStartSpeed, NotFound
from .labeling import DEFAULT_T_REACT, CaseSet, LaneChangeEvent, Label, detect_lane_changes
from .trajectory import Recording, neighbors

CLASS_NAMES = tuple(lab.title for lab in Label)
SPEED_THRESHOLDS = (0.0, -1.0, -2.0, -3.0)
UNDEFINED = "—"


def _pct(value) -> str:
    return UNDEFINED if value is None else f"{value:.2f}%"


def _text_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)  # noqa: E731
                              for i, (c, w) in enumerate(zip(r, widths)))
    lines = [fmt(header), "  ".join("-" * w for w in widths)]
    return "\n".join(lines + [fmt(r) for r in rows]) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# classification accuracy


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = actual class and columns = predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (3, 3) or np.any(counts < 0):
            raise ValueError("a confusion matrix is a 3x3 array of non-negative counts")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def overall_accuracy(self) -> float | None:
        """Percentage of correct predictions (None for an empty matrix)."""
        return 100.0 * np.trace(self.counts) / self.total if self.total else None

    def row_percentages(self) -> list[list[float] | None]:
        out = []
        for row in self.counts:
            s = row.sum()
            out.append(None if s == 0 else [100.0 * c / s for c in row])
        return out

    def per_class_accuracy(self) -> list[float | None]:
        return [None if r is None else r[i] for i, r in enumerate(self.row_percentages())]

    def format_row(self, actual: int) -> str:
        r = self.row_percentages()[actual]
        return " / ".join(_pct(None if r is None else v) for v in (r or [None] * 3))

    def rows(self, name: str = ""):
        pct = self.row_percentages()
        out = []
        for i, cls in enumerate(CLASS_NAMES):
            cells = [_pct(v) for v in pct[i]] if pct[i] is not None else [UNDEFINED] * 3
            out.append([name if i == 0 else "", cls, *cells, _pct(self.overall_accuracy) if i == 0 else ""])
        return out

    def to_text(self, name: str = "") -> str:
        return format_comparison({name: self})

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    __hash__ = None


def confusion(predictions, actuals) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.int64).reshape(-1)
    a = np.asarray(actuals, dtype=np.int64).reshape(-1)
    if len(p) != len(a):
        raise LengthMismatch(f"{len(p)} predictions but {len(a)} actual labels")
    if len(p) and (min(p.min(), a.min()) < 0 or max(p.max(), a.max()) > 2):
        raise ValueError("labels must be 0 (Keep), 1 (Left) or 2 (Right)")
    counts = np.zeros((3, 3), dtype=np.int64)
    np.add.at(counts, (a, p), 1)
    return ConfusionMatrix(counts)


COMPARISON_HEADER = ["Model", "Actual", "Pred Keep", "Pred Left", "Pred Right", "Overall"]


def format_comparison(matrices: Mapping[str, ConfusionMatrix]) -> str:
    """Row-percentage table of several models, one block of three rows each."""
    rows = [row for name, cm in matrices.items() for row in cm.rows(name)]
    return _text_table(COMPARISON_HEADER, rows)


def comparison_csv(matrices: Mapping[str, ConfusionMatrix]) -> str:
    rows = []
    for name, cm in matrices.items():
        for i, cls in enumerate(CLASS_NAMES):
            rows.append([name, cls, *(int(c) for c in cm.counts[i]),
                         "" if cm.overall_accuracy is None else f"{cm.overall_accuracy:.4f}"])
    return _csv_text(["model", "actual", "pred_keep", "pred_left", "pred_right", "overall_accuracy_pct"], rows)


# ---------------------------------------------------------------------------
# impact metrics


def speed_change_rate(v_start: float, v_end: float) -> float:
    """Relative speed change in percent."""
    if not v_start > 0:
        raise NonPositiveStartSpeed(f"start speed must be positive, got {v_start}")
    return (v_end - v_start) / v_start * 100.0


def ttc(x_l: float | None, x_f: float | None, v_l: float | None, v_f: float | None) -> float | None:
    """Signed time to collision of a follower with its leader.

    None when there is no leader or the speeds are equal (never closing).
    """
    if x_l is None or v_l is None:
        return None
    closing = v_f - v_l
    if closing == 0:
        return None
    return (x_l - x_f) / closing


class SafetyImpact(str, enum.Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"
    NONE = "None"


def safety_impact(ttc_start: float | None, ttc_end: float | None) -> SafetyImpact:
    """Classify a TTC change; a missing value counts as 0 (no leader)."""
    start = 0.0 if ttc_start is None else ttc_start
    end = 0.0 if ttc_end is None else ttc_end
    if start > 0 and end > 0:
        if end > start:
            return SafetyImpact.POSITIVE
        if end < start:
            return SafetyImpact.NEGATIVE
        return SafetyImpact.NONE
    if start > 0 and end < 0:
        return SafetyImpact.POSITIVE
    if start <= 0 and end > 0:
        return SafetyImpact.NEGATIVE
    return SafetyImpact.NONE


class Quadrant(str, enum.Enum):
    TP = "TP"  # predict keep, actual keep
    FP = "FP"  # predict keep, actual change
    FN = "FN"  # predict change, actual keep
    TN = "TN"  # predict change, actual change


def quadrant(predicted: int, actual: int) -> Quadrant:
    pred_lc = int(predicted) != Label.KEEP
    act_lc = int(actual) != Label.KEEP
    if not pred_lc:
        return Quadrant.FP if act_lc else Quadrant.TP
    return Quadrant.TN if act_lc else Quadrant.FN


@dataclass(frozen=True)
class ImpactRecord:
    provenance: tuple
    predicted: int
    actual: int
    quadrant: Quadrant
    follower_id: int | None = None
    v_start: float | None = None
    v_end: float | None = None
    ttc_start: float | None = None
    ttc_end: float | None = None

    def __post_init__(self):
        if self.quadrant != quadrant(self.predicted, self.actual):
            raise ValueError(f"quadrant {self.quadrant} disagrees with predicted {self.predicted} / "
                             f"actual {self.actual}")

    @property
    def has_follower(self) -> bool:
        return self.follower_id is not None

    @property
    def speed_change(self) -> float | None:
        return None if not self.has_follower else speed_change_rate(self.v_start, self.v_end)

    @property
    def safety(self) -> SafetyImpact | None:
        return None if not self.has_follower else safety_impact(self.ttc_start, self.ttc_end)


def _ttc_encoded(recording: Recording, follower_id: int, frame: int) -> float:
    """TTC for impact analysis: no leader is 0, a non-closing leader is -inf."""
    track = recording.tracks[follower_id]
    i = track.row(frame)
    leader = int(track.neighbor_ids[i, 0])
    if leader == 0 or leader not in recording.tracks or not recording.tracks[leader].has_frame(frame):
        return 0.0
    lt = recording.tracks[leader]
    j = lt.row(frame)
    value = ttc(float(lt.x[j]), float(track.x[i]), float(lt.vx[j]), float(track.vx[i]))
    return -math.inf if value is None else value


def find_event(recording: Recording, vehicle_id: int, decision_frame: int,
               t_react: float = DEFAULT_T_REACT) -> LaneChangeEvent:
    for e in detect_lane_changes(recording.track(vehicle_id), recording, t_react):
        if e.t_decision == decision_frame:
            return e
    raise MissingTrajectory(f"vehicle {vehicle_id}: no lane change decided at frame {decision_frame}")


def impact_record(recording: Recording, provenance, predicted: int, actual: int,
                  t_react: float = DEFAULT_T_REACT) -> ImpactRecord:
    """Follower speeds and TTCs at the start and end of one lane change."""
    _, vid, frame = (int(v) for v in provenance)
    q = quadrant(predicted, actual)
    event = find_event(recording, vid, frame, t_react)
    role = "FL" if event.direction == Label.LEFT else "FR"
    follower = dict(neighbors(recording, vid, event.t_start).items())[role]
    if follower is None:
        return ImpactRecord(tuple(provenance), int(predicted), int(actual), q)
    try:
        track = recording.track(follower)
        i0, i1 = track.row(event.t_start), track.row(event.t_end)
    except NotFound:
        raise MissingTrajectory(
            f"follower {follower} of vehicle {vid} is not recorded over frames {event.t_start}-{event.t_end}"
        ) from None
    return ImpactRecord(tuple(provenance), int(predicted), int(actual), q, follower,
                        float(track.vx[i0]), float(track.vx[i1]),
                        _ttc_encoded(recording, follower, event.t_start),
                        _ttc_encoded(recording, follower, event.t_end))


SPEED_HEADER = ["Partition", "Cases", "No follower", "< 0", "< -1%", "< -2%", "< -3%"]
SAFETY_HEADER = ["Partition", "Cases", "No follower", "Positive", "Negative", "None"]


@dataclass
class ImpactReport:
    records: list = field(default_factory=list)
    skipped: int = 0

    def partition(self, q: Quadrant) -> list[ImpactRecord]:
        return [r for r in self.records if r.quadrant == q]

    def speed_row(self, q: Quadrant) -> dict:
        """Share of followers (in percent) whose speed change rate is below each threshold."""
        part = self.partition(q)
        rates = [r.speed_change for r in part if r.has_follower]
        pct = {t: (100.0 * sum(v < t for v in rates) / len(rates) if rates else None) for t in SPEED_THRESHOLDS}
        return {"cases": len(part), "no_follower": len(part) - len(rates), "below": pct}

    def safety_row(self, q: Quadrant) -> dict:
        part = self.partition(q)
        outcomes = [r.safety for r in part if r.has_follower]
        pct = {s: (100.0 * sum(o == s for o in outcomes) / len(outcomes) if outcomes else None)
               for s in SafetyImpact}
        return {"cases": len(part), "no_follower": len(part) - len(outcomes), "share": pct}

    def _speed_rows(self):
        rows = []
        for q in (Quadrant.TN, Quadrant.FP):
            r = self.speed_row(q)
            rows.append([q.value, r["cases"], r["no_follower"], *(_pct(r["below"][t]) for t in SPEED_THRESHOLDS)])
        return rows

    def _safety_rows(self):
        rows = []
        for q in (Quadrant.TN, Quadrant.FP):
            r = self.safety_row(q)
            rows.append([q.value, r["cases"], r["no_follower"], *(_pct(r["share"][s]) for s in SafetyImpact)])
        return rows

    def to_text(self) -> str:
        out = "Speed change rate of the target-lane follower\n"
        out += _text_table(SPEED_HEADER, self._speed_rows())
        out += "\nSafety impact on the target-lane follower\n"
        out += _text_table(SAFETY_HEADER, self._safety_rows())
        if self.skipped:
            out += f"\n{self.skipped} lane-change cases skipped: follower not recorded over the manoeuvre\n"
        return out

    def records_csv(self) -> str:
        rows = []
        for r in self.records:
            sc = r.speed_change
            rows.append([*r.provenance, CLASS_NAMES[r.actual], CLASS_NAMES[r.predicted], r.quadrant.value,
                         "" if r.follower_id is None else r.follower_id,
                         *("" if v is None else repr(float(v)) for v in (r.v_start, r.v_end, r.ttc_start, r.ttc_end)),
                         "" if sc is None else repr(sc), "" if r.safety is None else r.safety.value])
        return _csv_text(["recording_id", "vehicle_id", "decision_frame", "actual", "predicted", "quadrant",
                          "follower_id", "v_start", "v_end", "ttc_start", "ttc_end", "speed_change_pct",
                          "safety_impact"], rows)

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "impact.txt").write_text(self.to_text())
        (d / "impact_records.csv").write_text(self.records_csv())
        (d / "speed_change.csv").write_text(_csv_text(SPEED_HEADER, self._speed_rows()))
        (d / "safety_impact.csv").write_text(_csv_text(SAFETY_HEADER, self._safety_rows()))


def impact_report(cases: CaseSet, predictions, recordings: Mapping[int, Recording],
                  t_react: float = DEFAULT_T_REACT, skip_missing: bool = False) -> ImpactReport:
    """Impact records for every actual lane change (TN and FP partitions)."""
    predictions = np.asarray(predictions, dtype=np.int64)
    if len(predictions) != len(cases):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(cases)} cases")
    report = ImpactReport()
    for i in np.flatnonzero(cases.labels != Label.KEEP):
        prov = tuple(int(v) for v in cases.provenance[i])
        rec = recordings.get(prov[0])
        if rec is None:
            raise MissingTrajectory(f"recording {prov[0]} is not available")
        try:
            report.records.append(impact_record(rec, prov, predictions[i], cases.labels[i], t_react))
        except MissingTrajectory:
            if not skip_missing:
                raise
            report.skipped += 1
    return report
