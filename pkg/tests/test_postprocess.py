"""Peak-picking against the literal-definition brute force, snapping,
marking readout, and report serialisation."""

import json

import numpy as np
import pytest

from dynamark.errors import SchemaError
from dynamark.postprocess import (
    EventReport,
    build_event_report,
    change_points,
    markings_at_beats,
    pick_peaks,
    snap_to_nearest,
    to_seconds,
)


def brute_force_peaks(probs, threshold=0.5, radius=3):
    """Literal transcription of the definition, used as the oracle."""
    picked = []
    for t in range(len(probs)):
        if not probs[t] > threshold:
            continue
        lo, hi = max(0, t - radius), min(len(probs), t + radius + 1)
        if any(probs[u] > probs[t] for u in range(lo, hi)):
            continue
        if picked and t - picked[-1] <= radius:
            continue
        picked.append(t)
    return picked


def test_peaks_all_zero():
    assert pick_peaks(np.zeros(100)).size == 0


def test_peaks_single_spike():
    probs = np.zeros(200)
    probs[100] = 0.9
    assert pick_peaks(probs).tolist() == [100]


def test_peaks_plateau_earliest_wins():
    probs = np.zeros(30)
    probs[10:13] = 0.8
    assert pick_peaks(probs).tolist() == [10]


def test_peaks_min_spacing():
    rng = np.random.default_rng(0)
    for _ in range(200):
        probs = rng.uniform(0, 1, size=rng.integers(1, 200))
        picked = pick_peaks(probs)
        assert (np.diff(picked) >= 4).all()


def test_peaks_match_brute_force_1000_trials():
    rng = np.random.default_rng(1234)
    for trial in range(1000):
        n = int(rng.integers(1, 201))
        # mix of smooth and spiky sequences, with deliberate ties
        probs = rng.uniform(0, 1, size=n)
        if trial % 3 == 0:
            probs = np.round(probs, 1)  # many exact ties
        got = pick_peaks(probs).tolist()
        want = brute_force_peaks(probs)
        assert got == want, f"trial {trial}: {got} != {want}"


def test_threshold_monotonicity():
    rng = np.random.default_rng(5)
    for _ in range(100):
        probs = rng.uniform(0, 1, size=150)
        lo = set(pick_peaks(probs, threshold=0.4).tolist())
        hi = set(pick_peaks(probs, threshold=0.6).tolist())
        assert hi <= lo


def test_markings_one_hot_readout():
    probs = np.zeros((10, 6))
    probs[2, 3] = 1.0
    probs[7, 5] = 1.0
    assert markings_at_beats(probs, [2, 7]) == ["mf", "ff"]


def test_markings_empty_beats():
    assert markings_at_beats(np.zeros((5, 6)), []) == []


def test_markings_tie_to_lower_class():
    probs = np.zeros((3, 6))
    probs[1, 2] = 0.5
    probs[1, 4] = 0.5
    assert markings_at_beats(probs, [1]) == ["p"]


def test_markings_out_of_range():
    with pytest.raises(SchemaError):
        markings_at_beats(np.zeros((5, 6)), [5])


def test_markings_match_brute_force_1000_trials():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        t = int(rng.integers(1, 40))
        probs = rng.uniform(0, 1, size=(t, 6))
        beats = np.unique(rng.integers(0, t, size=rng.integers(0, 6)))
        got = markings_at_beats(probs, beats)
        labels = ("blank", "pp", "p", "mf", "f", "ff")
        want = [labels[int(max(range(6), key=lambda c: probs[b, c]))] for b in beats]
        assert got == want


def test_change_points_empty_when_below_threshold():
    probs = np.full(50, 0.6)
    assert change_points(probs, [10, 20]).size == 0


def test_change_point_snaps_to_nearest_beat():
    probs = np.zeros(100)
    probs[52] = 0.9
    idx = change_points(probs, np.array([50, 60]))
    assert idx.tolist() == [0]


def test_change_points_dedup():
    probs = np.zeros(100)
    probs[[49, 51]] = 0.9
    idx = change_points(probs, np.array([50, 80]))
    assert idx.tolist() == [0]


def test_change_points_no_beats():
    probs = np.ones(10)
    assert change_points(probs, np.array([])).size == 0


def test_snap_tie_goes_earlier():
    idx = snap_to_nearest(np.array([55.0]), np.array([50.0, 60.0]))
    assert idx.tolist() == [0]


def test_to_seconds():
    np.testing.assert_allclose(to_seconds([50]), [1.0])
    np.testing.assert_allclose(to_seconds([0]), [0.0])
    np.testing.assert_allclose(to_seconds([10, 35]), [0.2, 0.7])


def test_build_report_and_serialization(tmp_path):
    t = 300
    beat_probs = np.zeros(t)
    beat_probs[[50, 100, 150, 200]] = 0.9
    downbeat_probs = np.zeros(t)
    downbeat_probs[50] = 0.8
    cp_probs = np.zeros(t)
    cp_probs[101] = 0.9
    dyn_probs = np.zeros((t, 6))
    dyn_probs[:, 2] = 1.0  # 'p' everywhere
    report = build_event_report(beat_probs, downbeat_probs, cp_probs, dyn_probs)
    assert report.beats == [1.0, 2.0, 3.0, 4.0]
    assert report.downbeats == [1.0]
    assert report.markings == ["p", "p", "p", "p"]
    assert report.change_points == [2.0]
    # change points are members of the beat set, exactly
    assert set(report.change_points) <= set(report.beats)

    jpath = tmp_path / "report.json"
    report.write_json(jpath)
    loaded = EventReport.from_json(jpath)
    assert loaded == report
    blob = json.loads(jpath.read_text())
    assert set(blob) == {"beats", "downbeats", "markings", "change_points"}

    cpath = tmp_path / "report.csv"
    report.write_csv(cpath)
    rows = cpath.read_text().strip().splitlines()
    assert rows[0] == "time_s,marking,is_downbeat,is_change_point"
    assert rows[1] == "1.000,p,1,0"
    assert rows[2] == "2.000,p,0,1"


def test_report_beats_override():
    t = 200
    dyn_probs = np.zeros((t, 6))
    dyn_probs[:, 4] = 1.0
    cp_probs = np.zeros(t)
    report = build_event_report(np.zeros(t), np.zeros(t), cp_probs, dyn_probs,
                                beat_frames_override=np.array([10, 60, 110]))
    assert len(report.markings) == 3
    assert report.beats == [0.2, 1.2, 2.2]


def test_report_silence_is_empty():
    t = 100
    report = build_event_report(np.zeros(t), np.zeros(t), np.zeros(t), np.zeros((t, 6)))
    assert report.beats == [] and report.markings == [] and report.change_points == []


def test_prob_sequence_validation():
    from dynamark.postprocess import ProbSequence
    seq = ProbSequence(np.array([0.1, 0.9, 0.0]))
    assert seq.fps == 50.0
    with pytest.raises(SchemaError, match=r"\[0, 1\]"):
        ProbSequence(np.array([0.2, 1.2]))
    with pytest.raises(SchemaError, match="fps"):
        ProbSequence(np.array([0.2]), fps=-1)
    probs = np.zeros(60)
    probs[20] = 0.8
    assert pick_peaks(ProbSequence(probs)).tolist() == [20]


def test_downbeat_alignment_flag():
    t = 200
    beat_probs = np.zeros(t)
    beat_probs[[50, 100, 150]] = 0.9
    downbeat_probs = np.zeros(t)
    downbeat_probs[52] = 0.8   # 2 frames off the nearest beat
    downbeat_probs[120] = 0.8  # > 3 frames from any beat
    loose = build_event_report(beat_probs, downbeat_probs, np.zeros(t), np.zeros((t, 6)))
    assert loose.downbeats == [52 / 50.0, 120 / 50.0]  # default: untouched
    aligned = build_event_report(beat_probs, downbeat_probs, np.zeros(t), np.zeros((t, 6)),
                                 align_downbeats=True)
    assert aligned.downbeats == [1.0]  # snapped to the beat at frame 50; 120 dropped


def test_from_json_schema_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"beats": [1.0], "downbeats": [], "markings": [], "change_points": []}))
    with pytest.raises(SchemaError, match="markings"):
        EventReport.from_json(bad)
    notjson = tmp_path / "notjson.json"
    notjson.write_text("{")
    with pytest.raises(SchemaError):
        EventReport.from_json(notjson)
