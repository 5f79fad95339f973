import numpy as np
import pytest

from dsadlc.errors import ConfigError, FormatError
from dsadlc.features import assemble_case
from dsadlc.labeling import (
    CASE_WIDTH, CaseSet, LabeledCase, LaneChangeEvent, Label, Provenance, detect_lane_changes, extract_cases,
    extract_lk_cases, filter_mlc, lane_keep_frames, read_case_file, split_and_balance, write_case_file,
)

from conftest import lane_change_track, make_recording, make_track


def _onset_by_scan(track, cross_row, sign=1.0):
    r = cross_row
    while r > 0 and sign * track.vy[r - 1] > 0.10:
        r -= 1
    return int(track.frame[r])


def test_straight_track_has_no_lane_change():
    rec = make_recording([make_track(1, 400)])
    assert detect_lane_changes(rec.track(1), rec) == []


def test_left_lane_change_timing():
    track = lane_change_track(1, cross_at=300)
    rec = make_recording([track])
    (e,) = detect_lane_changes(track, rec)
    assert e.direction == Label.LEFT and (e.from_lane, e.to_lane) == (3, 2)
    assert e.t_cross == 300
    assert e.t_start == _onset_by_scan(track, 300)
    assert e.t_decision == e.t_start - 25
    assert e.t_decision < e.t_start <= e.t_cross <= e.t_end
    # the lateral move lasts 3 s centred on the crossing
    assert 300 - 38 <= e.t_start <= 300 - 30 and 300 + 30 <= e.t_end <= 300 + 38


def test_right_lane_change_and_reaction_time():
    track = lane_change_track(1, cross_at=300, from_lane=3, to_lane=4)
    rec = make_recording([track])
    (e,) = detect_lane_changes(track, rec, t_react=0.8)
    assert e.direction == Label.RIGHT
    assert e.t_start == _onset_by_scan(track, 300, sign=-1.0)
    assert e.t_decision == e.t_start - 20


def test_event_without_decision_history_is_dropped():
    # crossing at 110: onset at 74, decision at 49 with exactly 50 frames of history
    track = lane_change_track(1, n=300, cross_at=110)
    (e,) = detect_lane_changes(track, make_recording([track]))
    assert e.t_decision == 49
    track = lane_change_track(1, n=300, cross_at=109)
    assert detect_lane_changes(track, make_recording([track])) == []


def test_event_ordering_is_enforced():
    with pytest.raises(ValueError):
        LaneChangeEvent(1, 10, 10, 20, 30, Label.LEFT, 3, 2)
    with pytest.raises(ValueError):
        LaneChangeEvent(1, 5, 10, 20, 30, Label.KEEP, 3, 2)


def test_filter_mlc_drops_changes_out_of_the_merge_lane():
    tracks = [make_track(v, 5, lane=4 if v <= 2 else 3, x0=10.0 * v) for v in range(1, 6)]
    rec = make_recording(tracks, merge_lane=4)
    events = [LaneChangeEvent(v, 1, 2, 3, 4, Label.LEFT, 4 if v <= 2 else 3, 3 if v <= 2 else 2)
              for v in range(1, 6)]
    kept = filter_mlc(events, rec)
    assert kept == events[2:]
    assert filter_mlc(events, make_recording(tracks)) == events
    assert filter_mlc(events[:2], rec) == []


def test_lane_keep_threshold():
    short = make_track(1, 297)  # 11.88 s
    rec = make_recording([short])
    assert lane_keep_frames(short, rec) == []
    assert extract_lk_cases(rec) == []


def test_twenty_second_stay_gives_nine_cases():
    track = make_track(1, 500)
    rec = make_recording([track])
    assert lane_keep_frames(track, rec) == list(range(50, 451, 50))
    cases = extract_lk_cases(rec)
    assert len(cases) == 9 and all(c.label == Label.KEEP for c in cases)
    assert [c.provenance.decision_frame for c in cases] == list(range(50, 451, 50))


def test_lane_keep_cases_avoid_the_lane_change():
    track = lane_change_track(1, n=1200, cross_at=500)
    rec = make_recording([track])
    (e,) = detect_lane_changes(track, rec)
    frames = lane_keep_frames(track, rec)
    before = [f for f in frames if f < 500]
    after = [f for f in frames if f >= 500]
    assert before == [f for f in range(50, 500, 50) if f < e.t_decision]
    # the segment after the change skips its first window
    assert after[0] == 500 + 100
    assert all((f - 500) % 50 == 0 for f in after)


def _toy_cases(n_keep, n_left, n_right=0):
    cases = []
    labels = [Label.KEEP] * n_keep + [Label.LEFT] * n_left + [Label.RIGHT] * n_right
    rng = np.random.default_rng(0)
    for i, lab in enumerate(labels):
        feats = rng.normal(size=CASE_WIDTH)
        cases.append((feats, lab, (1, i + 1, 100 + i)))
    return CaseSet(np.stack([c[0] for c in cases]), [int(c[1]) for c in cases], [c[2] for c in cases])


def test_split_and_balance_recount():
    cases = _toy_cases(100, 10)
    train, test = split_and_balance(cases, 0.9, 16, seed=5)
    train_keys = set(train.keys())
    test_keys = set(test.keys())
    assert not train_keys & test_keys
    assert len(train_keys) + len(test_keys) == 110 and len(train_keys) == 99
    left_originals = sum(1 for k in train_keys if cases.labels[k[1] - 1] == Label.LEFT)
    assert int(np.sum(train.labels == Label.LEFT)) == 17 * left_originals
    assert int(np.sum(train.labels == Label.KEEP)) == 99 - left_originals
    # every training lane change appears exactly 17 times
    keys, counts = np.unique(train.provenance[train.labels == Label.LEFT], axis=0, return_counts=True)
    assert set(counts.tolist()) <= {17}
    # the test split is never duplicated
    assert len(test) == len(test_keys)


def test_dup_factor_zero_is_a_plain_split():
    cases = _toy_cases(30, 5)
    train, test = split_and_balance(cases, 0.9, 0, seed=1)
    assert sorted(train.keys() + test.keys()) == sorted(cases.keys())


def test_split_is_deterministic_per_seed():
    cases = _toy_cases(50, 8, 7)
    a = split_and_balance(cases, seed=3)
    b = split_and_balance(cases, seed=3)
    c = split_and_balance(cases, seed=4)
    assert a[0].digest() == b[0].digest() and a[1].digest() == b[1].digest()
    assert a[1].digest() != c[1].digest()


def test_split_accepts_case_lists():
    cases = _toy_cases(20, 4).to_cases()
    train, test = split_and_balance(cases, 0.5, 2, seed=0)
    assert isinstance(train, list) and all(isinstance(c, LabeledCase) for c in train)
    n_lc = sum(c.label != Label.KEEP for c in train)
    assert len(train) == 12 + 2 * n_lc // 3 and len(test) == 12


@pytest.mark.parametrize("fraction", [0.0, 1.0, 1.2, -0.1])
def test_split_rejects_bad_fraction(fraction):
    with pytest.raises(ConfigError):
        split_and_balance(_toy_cases(5, 1), fraction)


def test_case_file_round_trip(tmp_path):
    cases = _toy_cases(12, 3, 2)
    cases.meta = {"t_react": 1.0}
    path = tmp_path / "cases.bin"
    write_case_file(path, cases)
    back = read_case_file(path)
    assert back.equals(cases) and back.meta == {"t_react": 1.0}
    write_case_file(tmp_path / "again.bin", back)
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_case_file_corruption_is_detected(tmp_path):
    path = tmp_path / "cases.bin"
    write_case_file(path, _toy_cases(4, 1))
    data = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-40])
    with pytest.raises(FormatError):
        read_case_file(tmp_path / "short.bin")
    flipped = bytearray(data)
    flipped[200] ^= 1
    (tmp_path / "flip.bin").write_bytes(bytes(flipped))
    with pytest.raises(FormatError):
        read_case_file(tmp_path / "flip.bin")
    (tmp_path / "magic.bin").write_bytes(b"NOTACASE" + data[8:])
    with pytest.raises(FormatError):
        read_case_file(tmp_path / "magic.bin")


def test_case_rows_keep_their_layout():
    cases = _toy_cases(3, 1)
    c = cases[1]
    assert c.bundle.surrounding.shape == (7, 8, 7) and c.bundle.ego.shape == (8, 7)
    assert np.array_equal(cases.surrounding[1], c.bundle.surrounding)
    assert np.array_equal(cases.ego[1, 0], c.bundle.ego)
    assert np.array_equal(cases.factors[1], c.bundle.factors)
    assert c.provenance == Provenance(1, 2, 101)


def test_extracted_cases_reproduce_from_provenance(synth_recording):
    rec = synth_recording
    cases = extract_cases(rec)
    labels = {c.label for c in cases}
    assert Label.KEEP in labels and (Label.LEFT in labels or Label.RIGHT in labels)
    keys = [tuple(c.provenance) for c in cases]
    assert len(keys) == len(set(keys))
    for c in cases[:: max(1, len(cases) // 25)]:
        again = assemble_case(rec, c.provenance.vehicle_id, c.provenance.decision_frame)
        assert again.equals(c.bundle)


def test_detection_agrees_with_generator_ground_truth(synth_recording):
    rec = synth_recording
    truth = rec.ground_truth.events
    assert truth
    matched = 0
    for g in truth:
        events = detect_lane_changes(rec.track(g.vehicle_id), rec)
        if any(abs(e.t_cross - g.t_cross) <= 2 and abs(e.t_start - g.t_start) <= 5 for e in events):
            matched += 1
    assert matched >= 0.9 * len(truth)
