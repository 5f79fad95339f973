import numpy as np
import pytest

from dsadlc.synthgen import ScenarioConfig, generate
from dsadlc.trajectory import Direction, Lane, Recording, VehicleTrack

LANE_WIDTH = 3.75
FPS = 25.0


def three_lanes(merge_lane=None):
    """Lanes 2 (left), 3, 4 (right) of an increasing-direction carriageway."""
    return {Direction.INCREASING: tuple(
        Lane(lid, Direction.INCREASING, (5 - lid) * LANE_WIDTH, (4 - lid) * LANE_WIDTH, lid == merge_lane)
        for lid in (2, 3, 4)
    )}


def lane_center(lane_id):
    return (4.5 - lane_id) * LANE_WIDTH


def make_track(vid, n, x0=0.0, v=30.0, lane=3, start=0, y=None, vy=None, ax=None, ay=None,
               lane_ids=None, length=4.5, width=1.8, neighbor_ids=None):
    frames = np.arange(start, start + n)
    t = (frames - start) / FPS
    lane_ids = np.full(n, lane) if lane_ids is None else np.asarray(lane_ids)
    if y is None:
        y = np.array([lane_center(k) for k in lane_ids])
    return VehicleTrack(
        vehicle_id=vid, vehicle_class="Car", driving_direction=Direction.INCREASING,
        width=width, length=length, frame=frames,
        x=x0 + v * t, y=y,
        vx=np.full(n, float(v)),
        vy=np.zeros(n) if vy is None else vy,
        ax=np.zeros(n) if ax is None else ax,
        ay=np.zeros(n) if ay is None else ay,
        lane_id=lane_ids,
        space_headway=np.zeros(n), time_headway=np.zeros(n),
        neighbor_ids=np.zeros((n, 8), dtype=np.int64) if neighbor_ids is None else neighbor_ids,
    )


def make_recording(tracks, merge_lane=None, recording_id=1):
    return Recording(recording_id, FPS, three_lanes(merge_lane), {t.vehicle_id: t for t in tracks})


def lane_change_track(vid, n=600, cross_at=300, from_lane=3, to_lane=2, duration=3.0, x0=0.0, v=30.0):
    """A track with one smooth lane change whose lateral move is centred on ``cross_at``."""
    frames = np.arange(n)
    y0, y1 = lane_center(from_lane), lane_center(to_lane)
    half = int(round(duration * FPS / 2))
    s = np.clip((frames - (cross_at - half)) / (2 * half), 0.0, 1.0)
    y = y0 + (y1 - y0) * (3 * s ** 2 - 2 * s ** 3)
    vy = (y1 - y0) * (6 * s - 6 * s ** 2) / (2 * half / FPS)
    lane_ids = np.where(frames < cross_at, from_lane, to_lane)
    return make_track(vid, n, x0=x0, v=v, y=y, vy=vy, lane_ids=lane_ids)


@pytest.fixture(scope="session")
def synth_recording():
    return generate(ScenarioConfig(duration=150.0, rng_seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
