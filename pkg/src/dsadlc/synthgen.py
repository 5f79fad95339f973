"""Synthetic highway traffic with per-driver styles.

Longitudinal control is the Intelligent Driver Model plus a smooth
(Ornstein-Uhlenbeck) acceleration perturbation whose amplitude grows with the
driver's aggressiveness; lane choice follows MOBIL.  When a driver's lane
change incentive first exceeds their threshold the frame is recorded as the
decision moment; the lateral manoeuvre starts one reaction time later and is
a cubic blend between lane centres lasting 3-5 s.

All generated tracks drive in the increasing direction; lane ids follow the
numbering that :mod:`dsadlc.ingest` derives from the lane markings (2 for
the leftmost lane upward), so generated recordings round-trip through the
CSV layer unchanged.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError, GenerationError
from .trajectory import Direction, Lane, Recording, VehicleClass, VehicleTrack

FRAME_RATE = 25.0
DT = 1.0 / FRAME_RATE

MIN_GAP = 2.0  # IDM jam distance s0, m
SAFE_DECEL = 4.0  # MOBIL safety limit for the new follower, m/s^2
NOISE_TIME_CONSTANT = 1.0  # s
CAR_LENGTH, CAR_WIDTH = 4.5, 1.8
TRUCK_LENGTH, TRUCK_WIDTH = 15.0, 2.5
TRUCK_STYLE = -1

# No lane-change decisions this soon after entering the road or after the
# previous manoeuvre, nor this close to the downstream end.
ENTRY_HOLD_S = 3.0
COOLDOWN_S = 3.0
EXIT_MARGIN_M = 250.0

GROUND_TRUTH_COLUMNS = [
    "vehicle_id", "t_decision_frame", "t_start_frame", "t_cross_frame",
    "t_end_frame", "direction", "style_index",
]


@dataclass(frozen=True)
class DriverStyleParams:
    aggressiveness: float = 0.5
    desired_speed: float = 33.0
    desired_time_headway: float = 1.5
    max_accel: float = 1.5
    comfortable_decel: float = 2.0
    politeness: float = 0.3
    lane_change_threshold: float = 0.3
    reaction_time: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.aggressiveness <= 1.0:
            raise ConfigError(f"aggressiveness must lie in [0, 1], got {self.aggressiveness}")
        for name in ("desired_speed", "desired_time_headway", "max_accel", "comfortable_decel"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.politeness <= 1.0:
            raise ConfigError(f"politeness must lie in [0, 1], got {self.politeness}")
        if self.reaction_time < 0:
            raise ConfigError("reaction_time must be non-negative")

    @property
    def noise_std(self) -> float:
        """Stationary std of the acceleration perturbation, m/s^2."""
        return 0.05 + 0.75 * self.aggressiveness

    @property
    def lane_change_duration(self) -> float:
        return 5.0 - 2.0 * self.aggressiveness


AGGRESSIVE = DriverStyleParams(
    aggressiveness=0.9, desired_speed=34.0, desired_time_headway=1.0, max_accel=2.0,
    comfortable_decel=3.0, politeness=0.0, lane_change_threshold=0.1, reaction_time=1.0,
)
CONSERVATIVE = DriverStyleParams(
    aggressiveness=0.1, desired_speed=32.0, desired_time_headway=1.8, max_accel=1.0,
    comfortable_decel=1.5, politeness=0.5, lane_change_threshold=1.0, reaction_time=1.0,
)


@dataclass(frozen=True)
class ScenarioConfig:
    lane_count: int = 3
    road_length: float = 600.0
    duration: float = 600.0
    spawn_rate: float = 0.8
    style_mixture: tuple = ((AGGRESSIVE, 0.5), (CONSERVATIVE, 0.5))
    rng_seed: int = 0
    lane_width: float = 3.75
    truck_fraction: float = 0.2
    truck_speed: float = 23.0
    speed_spread: float = 0.06
    keep_right_bias: float = 0.2
    recording_id: int = 1

    def __post_init__(self):
        if self.lane_count < 2:
            raise ConfigError("lane_count must be at least 2")
        if self.road_length <= 0 or self.duration < 0 or self.spawn_rate < 0:
            raise ConfigError("road_length must be positive; duration and spawn_rate non-negative")
        if not self.style_mixture:
            raise ConfigError("style_mixture must not be empty")
        total = sum(p for _, p in self.style_mixture)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"style probabilities sum to {total}, not 1")
        if any(p < 0 for _, p in self.style_mixture):
            raise ConfigError("style probabilities must be non-negative")
        if not 0.0 <= self.truck_fraction < 1.0:
            raise ConfigError("truck_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        data = dict(data)
        styles = data.pop("styles", None)
        known = set(cls.__dataclass_fields__) - {"style_mixture"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
        if styles is not None:
            mixture = []
            for entry in styles:
                entry = dict(entry)
                p = float(entry.pop("probability"))
                mixture.append((DriverStyleParams(**entry), p))
            data["style_mixture"] = tuple(mixture)
        return cls(**data)


@dataclass(frozen=True)
class LaneChangeTruth:
    vehicle_id: int
    t_decision: int
    t_start: int
    t_cross: int
    t_end: int
    direction: str
    style_index: int


@dataclass
class GroundTruth:
    events: list = field(default_factory=list)
    vehicle_styles: dict = field(default_factory=dict)
    event_count: int = 0
    blocked_spawns: int = 0


def idm_accel(v, v0, T, a_max, b, gap, v_lead) -> float:
    """IDM acceleration; ``gap`` is None on a free road."""
    free = 1.0 - (v / v0) ** 4
    if gap is None:
        return a_max * free
    s_star = MIN_GAP + max(0.0, v * T + v * (v - v_lead) / (2.0 * math.sqrt(a_max * b)))
    return a_max * (free - (s_star / max(gap, 0.1)) ** 2)


class _Vehicle:
    __slots__ = (
        "vid", "style_index", "style", "cls", "length", "width", "v0", "x", "v", "a", "noise",
        "lane", "y", "vy", "ay", "entered", "last_change_end", "pending", "maneuver", "rows",
        "gt_index",
    )

    def __init__(self, vid, style_index, style, cls, length, width, v0, x, v, lane, y, frame):
        self.vid = vid
        self.style_index = style_index
        self.style = style
        self.cls = cls
        self.length = length
        self.width = width
        self.v0 = v0
        self.x = x
        self.v = v
        self.a = 0.0
        self.noise = 0.0
        self.lane = lane
        self.y = y
        self.vy = 0.0
        self.ay = 0.0
        self.entered = frame
        self.last_change_end = -10**9
        self.pending = None  # (target_lane, decision_frame, start_frame)
        self.maneuver = None  # (from_lane, to_lane, start_frame, n_frames, y0, y1)
        self.rows = []
        self.gt_index = None

    def lanes(self):
        if self.maneuver is None:
            return (self.lane,)
        return (self.maneuver[0], self.maneuver[1])

    def idm(self, gap, v_lead):
        s = self.style
        return idm_accel(self.v, self.v0, s.desired_time_headway, s.max_accel, s.comfortable_decel, gap, v_lead)


class _Simulation:
    def __init__(self, config: ScenarioConfig):
        self.cfg = config
        self.rng = np.random.default_rng(config.rng_seed)
        self.n_lanes = config.lane_count
        self.w = config.lane_width
        self.active: list[_Vehicle] = []
        self.finished: list[_Vehicle] = []
        self.next_id = 1
        self.truth = GroundTruth()
        self.attempts = 0
        probs = np.array([p for _, p in config.style_mixture], dtype=float)
        self.style_cdf = np.cumsum(probs / probs.sum())

    # lane geometry: lane index 0 is the leftmost lane
    def lane_center(self, lane):
        return (self.n_lanes - lane - 0.5) * self.w

    def lane_of_y(self, y):
        idx = self.n_lanes - 1 - int(math.floor(y / self.w))
        return min(max(idx, 0), self.n_lanes - 1)

    def lane_id(self, lane):
        return lane + 2

    def _occupancy(self):
        occ = [[] for _ in range(self.n_lanes)]
        for veh in self.active:
            for lane in veh.lanes():
                occ[lane].append((veh.x, veh.vid, veh))
        for lst in occ:
            lst.sort(key=lambda t: (t[0], t[1]))
        keys = [[(t[0], t[1]) for t in lst] for lst in occ]
        return occ, keys

    @staticmethod
    def _leader(occ, keys, lane, veh, x=None):
        x = veh.x if x is None else x
        lst = occ[lane]
        i = bisect.bisect_right(keys[lane], (x, veh.vid))
        while i < len(lst) and lst[i][2] is veh:
            i += 1
        return lst[i][2] if i < len(lst) else None

    @staticmethod
    def _follower(occ, keys, lane, veh, x=None):
        x = veh.x if x is None else x
        lst = occ[lane]
        i = bisect.bisect_left(keys[lane], (x, veh.vid)) - 1
        while i >= 0 and lst[i][2] is veh:
            i -= 1
        return lst[i][2] if i >= 0 else None

    @staticmethod
    def _gap(follower, leader):
        return leader.x - leader.length - follower.x

    def _accel_behind(self, veh, leader):
        if leader is None:
            return veh.idm(None, 0.0)
        return veh.idm(self._gap(veh, leader), leader.v)

    def _mobil(self, veh, target, occ, keys):
        """Incentive and safety of moving ``veh`` into ``target``."""
        new_lead = self._leader(occ, keys, target, veh)
        new_fol = self._follower(occ, keys, target, veh)
        if new_lead is not None and self._gap(veh, new_lead) < MIN_GAP:
            return -math.inf, False
        if new_fol is not None and self._gap(new_fol, veh) < MIN_GAP:
            return -math.inf, False
        if new_lead is not None and new_lead.maneuver is not None:
            return -math.inf, False
        a_cur = self._accel_behind(veh, self._leader(occ, keys, veh.lane, veh))
        a_new = self._accel_behind(veh, new_lead)
        gain = a_new - a_cur
        if new_fol is not None:
            nf_after = new_fol.idm(self._gap(new_fol, veh), veh.v)
            if nf_after < -SAFE_DECEL:
                return -math.inf, False
            nf_before = self._accel_behind(new_fol, new_lead)
            gain += veh.style.politeness * (nf_after - nf_before)
        old_fol = self._follower(occ, keys, veh.lane, veh)
        if old_fol is not None:
            old_lead = self._leader(occ, keys, veh.lane, veh)
            of_after = self._accel_behind(old_fol, old_lead)
            of_before = old_fol.idm(self._gap(old_fol, veh), veh.v)
            gain += veh.style.politeness * (of_after - of_before)
        if target > veh.lane:
            gain += self.cfg.keep_right_bias
        else:
            gain -= self.cfg.keep_right_bias
        return gain, True

    def _choose_style(self):
        if self.rng.random() < self.cfg.truck_fraction:
            return TRUCK_STYLE
        return int(np.searchsorted(self.style_cdf, self.rng.random(), side="right").clip(0, len(self.style_cdf) - 1))

    def _spawn(self, frame, occ, keys):
        self.attempts += 1
        style_index = self._choose_style()
        spread = self.cfg.speed_spread
        if style_index == TRUCK_STYLE:
            style = DriverStyleParams(
                aggressiveness=0.0, desired_speed=self.cfg.truck_speed, desired_time_headway=2.0,
                max_accel=0.8, comfortable_decel=1.5, politeness=1.0, lane_change_threshold=math.inf,
            )
            cls, length, width = VehicleClass.TRUCK, TRUCK_LENGTH, TRUCK_WIDTH
            lanes = [self.n_lanes - 1]
            v0 = style.desired_speed * (1.0 + 0.03 * float(np.clip(self.rng.standard_normal(), -2, 2)))
        else:
            style = self.cfg.style_mixture[style_index][0]
            cls, length, width = VehicleClass.CAR, CAR_LENGTH, CAR_WIDTH
            lanes = list(self.rng.permutation(self.n_lanes))
            v0 = style.desired_speed * (1.0 + spread * float(np.clip(self.rng.standard_normal(), -2, 2)))
        x = length
        for lane in lanes:
            lane = int(lane)
            lst = occ[lane]
            leader = lst[0][2] if lst else None
            if leader is None:
                v = v0
            else:
                gap = leader.x - leader.length - x
                v = min(v0, leader.v)
                if gap < MIN_GAP + v * style.desired_time_headway * 0.8 + 5.0:
                    continue
            veh = _Vehicle(self.next_id, style_index, style, cls, length, width, v0, x, v, lane,
                           self.lane_center(lane), frame)
            self.next_id += 1
            self.active.append(veh)
            self.truth.vehicle_styles[veh.vid] = style_index
            return veh
        self.truth.blocked_spawns += 1
        return None

    def _decide(self, frame, occ, keys):
        fr = FRAME_RATE
        for veh in self.active:
            if veh.cls != VehicleClass.CAR or veh.maneuver is not None or veh.pending is not None:
                continue
            if frame - veh.entered < ENTRY_HOLD_S * fr or frame - veh.last_change_end < COOLDOWN_S * fr:
                continue
            if veh.x > self.cfg.road_length - EXIT_MARGIN_M:
                continue
            best = None
            for target in (veh.lane - 1, veh.lane + 1):
                if not 0 <= target < self.n_lanes:
                    continue
                gain, safe = self._mobil(veh, target, occ, keys)
                if safe and gain > veh.style.lane_change_threshold and (best is None or gain > best[0]):
                    best = (gain, target)
            if best is not None:
                start = frame + int(round(veh.style.reaction_time * fr))
                veh.pending = (best[1], frame, start)

    def _start_maneuvers(self, frame, occ, keys):
        for veh in self.active:
            if veh.pending is None or veh.pending[2] != frame:
                continue
            target, decision, start = veh.pending
            veh.pending = None
            _, safe = self._mobil(veh, target, occ, keys)
            if not safe:
                continue
            n = int(round(veh.style.lane_change_duration * FRAME_RATE))
            veh.maneuver = (veh.lane, target, frame, n, veh.y, self.lane_center(target))
            veh.lane = target
            direction = "Left" if target < veh.maneuver[0] else "Right"
            veh.gt_index = len(self.truth.events)
            self.truth.events.append([veh.vid, decision, frame, None, frame + n, direction, veh.style_index])

    def _lateral(self, veh, frame):
        if veh.maneuver is None:
            veh.vy = veh.ay = 0.0
            return
        from_lane, to_lane, start, n, y0, y1 = veh.maneuver
        T = n * DT
        tau = (frame - start) / n
        if tau >= 1.0:
            veh.y, veh.vy, veh.ay = y1, 0.0, 0.0
            veh.maneuver = None
            veh.last_change_end = frame
            self.truth.event_count += 1
            self.truth.events[veh.gt_index].append(True)
            veh.gt_index = None
            return
        dy = y1 - y0
        veh.y = y0 + dy * (3 * tau**2 - 2 * tau**3)
        veh.vy = dy * 6 * tau * (1 - tau) / T
        veh.ay = dy * (6 - 12 * tau) / T**2

    def step(self, frame):
        occ, keys = self._occupancy()
        if frame > 0:
            self._integrate(occ, keys)
            leaving = [v for v in self.active if v.x > self.cfg.road_length]
            if leaving:
                self.finished.extend(leaving)
                self.active = [v for v in self.active if v.x <= self.cfg.road_length]
            occ, keys = self._occupancy()
        if self.rng.random() < self.cfg.spawn_rate * DT:
            if self._spawn(frame, occ, keys) is not None:
                occ, keys = self._occupancy()
        self._start_maneuvers(frame, occ, keys)
        for veh in self.active:
            self._lateral(veh, frame)
        occ, keys = self._occupancy()
        self._decide(frame, occ, keys)
        self._record(frame)

    def _integrate(self, occ, keys):
        decay = math.exp(-DT / NOISE_TIME_CONSTANT)
        kick = math.sqrt(1.0 - decay**2)
        new_v = {}
        for veh in self.active:
            acc = min(self._accel_behind(veh, self._leader(occ, keys, lane, veh)) for lane in veh.lanes())
            veh.noise = veh.noise * decay + veh.style.noise_std * kick * float(self.rng.standard_normal())
            acc = float(np.clip(acc + veh.noise, -9.0, veh.style.max_accel + 2.0 * veh.style.noise_std))
            new_v[veh.vid] = max(0.0, veh.v + acc * DT)
        for veh in self.active:
            v_next = new_v[veh.vid]
            veh.x += 0.5 * (veh.v + v_next) * DT
            veh.a = (v_next - veh.v) / DT
            veh.v = v_next
        # hard no-overlap guard, applied front to back
        occ, _ = self._occupancy()
        for lst in occ:
            for (_, _, leader), (_, _, fol) in zip(reversed(lst), list(reversed(lst))[1:]):
                limit = leader.x - leader.length - 0.5
                if fol.x > limit:
                    fol.x = limit
                    if fol.v > leader.v:
                        fol.a += (leader.v - fol.v) / DT
                        fol.v = leader.v

    def _record(self, frame):
        for veh in self.active:
            lane = self.lane_of_y(veh.y)
            veh.rows.append((frame, veh.x, veh.y, veh.v, veh.vy, veh.a, veh.ay, lane))
            if veh.gt_index is not None and self.truth.events[veh.gt_index][3] is None and lane == veh.lane:
                self.truth.events[veh.gt_index][3] = frame

    def run(self):
        n_frames = int(round(self.cfg.duration * FRAME_RATE))
        for frame in range(n_frames):
            self.step(frame)
        self.finished.extend(self.active)
        if self.attempts >= 20 and self.truth.blocked_spawns > 0.5 * self.attempts:
            raise GenerationError(
                f"spawn rate {self.cfg.spawn_rate}/s saturates the road: "
                f"{self.truth.blocked_spawns} of {self.attempts} entries blocked"
            )


def _capacity(config: ScenarioConfig) -> float:
    """Rough upper bound on entering flow, vehicles per second."""
    per_lane = []
    for style, p in config.style_mixture:
        per_lane.append(p / (style.desired_time_headway + (MIN_GAP + CAR_LENGTH) / style.desired_speed))
    return config.lane_count * sum(per_lane)


def _neighbor_table(rec: dict, frames: list, vehicles: dict):
    """Geometric neighbour ids and headways for every recorded row."""
    by_frame: dict[int, list] = {}
    for vid, rows in rec.items():
        for i, row in enumerate(rows):
            by_frame.setdefault(row[0], []).append((vid, i))
    ids = {vid: np.zeros((len(rows), 8), dtype=np.int64) for vid, rows in rec.items()}
    dhw = {vid: np.zeros(len(rows)) for vid, rows in rec.items()}
    thw = {vid: np.zeros(len(rows)) for vid, rows in rec.items()}
    for frame in frames:
        members = by_frame.get(frame)
        if not members:
            continue
        members.sort()
        vid_arr = np.array([m[0] for m in members])
        x = np.array([rec[v][i][1] for v, i in members])
        v = np.array([rec[v][i][3] for v, i in members])
        lane = np.array([rec[vv][i][7] for vv, i in members])
        length = np.array([vehicles[vv].length for vv, _ in members])
        dx = x[None, :] - x[:, None]  # other minus ego
        dlane = lane[None, :] - lane[:, None]
        not_self = ~np.eye(len(members), dtype=bool)
        overlap = (x[None, :] > x[:, None] - length[:, None]) & (x[None, :] - length[None, :] < x[:, None])
        big = np.inf

        def nearest(mask, dist):
            d = np.where(mask & not_self, dist, big)
            j = np.argmin(d, axis=1)  # ties resolve to the lower id (members are id-sorted)
            ok = np.isfinite(d[np.arange(len(members)), j])
            return np.where(ok, vid_arr[j], 0), np.where(ok, j, -1)

        same = dlane == 0
        p_id, p_j = nearest(same & (dx > 0), dx)
        f_id, _ = nearest(same & (dx <= 0), -dx)
        cols = [p_id, f_id]
        for side in (-1, 1):  # left lane has the smaller lane index
            adj = dlane == side
            cols.append(nearest(adj & ~overlap & (dx > 0), dx)[0])
            cols.append(nearest(adj & overlap, np.abs(dx))[0])
            cols.append(nearest(adj & ~overlap & (dx <= 0), -dx)[0])
        table = np.stack(cols, axis=1)
        for k, (vid, i) in enumerate(members):
            ids[vid][i] = table[k]
            if p_j[k] >= 0:
                gap = float(dx[k, p_j[k]])
                dhw[vid][i] = gap
                thw[vid][i] = gap / v[k] if v[k] > 0 else 0.0
    return ids, dhw, thw


def generate(config: ScenarioConfig) -> Recording:
    if config.spawn_rate > _capacity(config):
        raise GenerationError(
            f"spawn rate {config.spawn_rate}/s exceeds the road capacity of about {_capacity(config):.2f}/s"
        )
    sim = _Simulation(config)
    sim.run()
    vehicles = {v.vid: v for v in sim.finished if v.rows}
    rec = {vid: v.rows for vid, v in vehicles.items()}
    frames = sorted({row[0] for rows in rec.values() for row in rows})
    ids, dhw, thw = _neighbor_table(rec, frames, vehicles)
    lanes = tuple(
        Lane(sim.lane_id(i), Direction.INCREASING, (config.lane_count - i) * config.lane_width,
             (config.lane_count - i - 1) * config.lane_width)
        for i in range(config.lane_count)
    )
    tracks = {}
    for vid in sorted(rec):
        rows = np.array(rec[vid], dtype=np.float64)
        veh = vehicles[vid]
        tracks[vid] = VehicleTrack(
            vehicle_id=vid,
            vehicle_class=veh.cls,
            driving_direction=Direction.INCREASING,
            width=veh.width,
            length=veh.length,
            frame=rows[:, 0].astype(np.int64),
            x=rows[:, 1], y=rows[:, 2], vx=rows[:, 3], vy=rows[:, 4], ax=rows[:, 5], ay=rows[:, 6],
            lane_id=rows[:, 7].astype(np.int64) + 2,
            space_headway=dhw[vid],
            time_headway=thw[vid],
            neighbor_ids=ids[vid],
        )
    truth = sim.truth
    # manoeuvres cut off by the road end or the recording end are not ground truth
    truth.events = [LaneChangeTruth(*e[:7]) for e in truth.events if len(e) == 8]
    truth.vehicle_styles = {vid: s for vid, s in truth.vehicle_styles.items() if vid in tracks}
    return Recording(config.recording_id, FRAME_RATE, {Direction.INCREASING: lanes}, tracks,
                     None, ground_truth=truth)


def export_ground_truth(recording: Recording, path=None) -> pd.DataFrame:
    """Lane-change ground truth as a table; also written to ``path`` when given."""
    truth = recording.ground_truth
    events = truth.events if truth is not None else []
    df = pd.DataFrame(
        [(e.vehicle_id, e.t_decision, e.t_start, e.t_cross, e.t_end, e.direction, e.style_index)
         for e in events],
        columns=GROUND_TRUTH_COLUMNS,
    )
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, lineterminator="\n")
    return df


def load_ground_truth(path) -> list[LaneChangeTruth]:
    df = pd.read_csv(path)
    return [LaneChangeTruth(int(r.vehicle_id), int(r.t_decision_frame), int(r.t_start_frame),
                            int(r.t_cross_frame), int(r.t_end_frame), str(r.direction), int(r.style_index))
            for r in df.itertuples(index=False)]
