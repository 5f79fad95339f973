"""DOP matrices and traffic-factor vectors.

A DOP summarises a vehicle's last two seconds as an 8x7 matrix: one row per
kinematic feature (:data:`DOP_ROWS`), one column per statistic
(:data:`DOP_COLUMNS`).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import NotFound, WindowUnderrun
from .trajectory import ROLES, Recording, VehicleTrack, neighbors, window

DOP_ROWS = (
    "relative_y",
    "relative_x",
    "lateral_velocity",
    "longitudinal_velocity",
    "lateral_acceleration",
    "longitudinal_acceleration",
    "space_headway",
    "time_headway",
)
DOP_COLUMNS = ("mean", "std", "median", "p25", "p75", "min", "max")
DOP_SHAPE = (len(DOP_ROWS), len(DOP_COLUMNS))

WINDOW_S = 2.0
DEFAULT_T_H = 1.5


class TrafficFactors(NamedTuple):
    """Speed-gain, safety and tolerance variables of one decision instant."""

    ego_minus_p_speed: float
    pl_minus_p_speed: float
    pr_minus_p_speed: float
    pl_minus_p_distance: float
    pr_minus_p_distance: float
    fl_distance: float
    fr_distance: float
    ego_minus_fl_speed: float
    ego_minus_fr_speed: float
    p_distance_slack: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


FACTOR_NAMES = TrafficFactors._fields


def _feature_rows(win: VehicleTrack) -> np.ndarray:
    return np.stack([
        win.y - win.y[0],
        win.x - win.x[0],
        win.vy,
        win.vx,
        win.ay,
        win.ax,
        win.space_headway,
        win.time_headway,
    ])


def dop_statistics(rows: np.ndarray) -> np.ndarray:
    """Column statistics of each row of ``rows`` (features x samples)."""
    p25, median, p75 = np.percentile(rows, [25.0, 50.0, 75.0], axis=1)
    return np.stack([
        rows.mean(axis=1),
        rows.std(axis=1),
        median,
        p25,
        p75,
        rows.min(axis=1),
        rows.max(axis=1),
    ], axis=1)


def compute_dop(win: VehicleTrack, frame_rate: float = 25.0, duration_s: float = WINDOW_S) -> np.ndarray:
    expected = int(round(duration_s * frame_rate))
    if len(win) < expected:
        raise WindowUnderrun(f"vehicle {win.vehicle_id}: DOP needs {expected} frames, got {len(win)}")
    return dop_statistics(_feature_rows(win))


def _kinematics(recording: Recording, vehicle_id, frame_index: int):
    if vehicle_id is None:
        return None
    track = recording.tracks.get(vehicle_id)
    if track is None or not track.has_frame(frame_index):
        return None
    i = track.row(frame_index)
    return float(track.x[i]), float(track.vx[i])


def compute_factors(recording: Recording, ego_id: int, frame_index: int,
                    t_h: float = DEFAULT_T_H, neighbor_set=None) -> TrafficFactors:
    """Traffic factors at one frame; a missing neighbour contributes v = d = 0."""
    ego = recording.track(ego_id)
    i = ego.row(frame_index)
    x_e, v_e = float(ego.x[i]), float(ego.vx[i])
    roles = neighbor_set if neighbor_set is not None else neighbors(recording, ego_id, frame_index)
    v = {}
    d = {}
    for role, vid in roles.items():
        state = _kinematics(recording, vid, frame_index)
        if state is None:
            v[role] = d[role] = 0.0
        else:
            d[role] = abs(state[0] - x_e)
            v[role] = state[1]
    return TrafficFactors(
        v_e - v["P"],
        v["PL"] - v["P"],
        v["PR"] - v["P"],
        d["PL"] - d["P"],
        d["PR"] - d["P"],
        d["FL"],
        d["FR"],
        v_e - v["FL"],
        v_e - v["FR"],
        d["P"] - v_e * t_h,
    )


@dataclass(frozen=True, eq=False)
class FeatureBundle:
    """Model input for one decision instant.

    ``surrounding`` stacks the DOPs of the roles in :data:`ROLES` order
    (7x8x7); roles without a vehicle, or whose vehicle lacks two seconds of
    history, are zero.
    """

    surrounding: np.ndarray
    ego: np.ndarray
    factors: np.ndarray

    def equals(self, other: "FeatureBundle", atol: float = 0.0) -> bool:
        return all(
            a.shape == b.shape and np.allclose(a, b, rtol=0.0, atol=atol)
            for a, b in ((self.surrounding, other.surrounding), (self.ego, other.ego),
                         (self.factors, other.factors))
        )

    def __eq__(self, other):
        return isinstance(other, FeatureBundle) and self.equals(other)

    __hash__ = None

    def channel_present(self, role: str) -> bool:
        return bool(np.any(self.surrounding[ROLES.index(role)]))


def assemble_case(recording: Recording, ego_id: int, decision_frame: int,
                  t_h: float = DEFAULT_T_H, duration_s: float = WINDOW_S) -> FeatureBundle:
    ego = recording.track(ego_id)
    ego_win = window(ego, decision_frame, duration_s, recording.frame_rate)
    ego_dop = compute_dop(ego_win, recording.frame_rate, duration_s)
    roles = neighbors(recording, ego_id, decision_frame)
    surrounding = np.zeros((len(ROLES),) + DOP_SHAPE)
    for c, (_, vid) in enumerate(roles.items()):
        if vid is None or vid not in recording.tracks:
            continue
        try:
            win = window(recording.tracks[vid], decision_frame, duration_s, recording.frame_rate)
        except (WindowUnderrun, NotFound):
            continue
        surrounding[c] = compute_dop(win, recording.frame_rate, duration_s)
    factors = compute_factors(recording, ego_id, decision_frame, t_h, roles).as_array()
    return FeatureBundle(surrounding, ego_dop, factors)
