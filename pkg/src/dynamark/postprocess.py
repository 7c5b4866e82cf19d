"""Frame-wise probabilities to discrete musical events.

Beats and downbeats come from thresholding at 50% plus peak-picking in
a +-3 frame (70 ms) neighbourhood; the dynamic marking of each beat is
the argmax class at that frame; change-point candidates above 75% are
snapped to the nearest detected beat.  All tie-breaks (plateaus,
equidistant snaps) resolve to the earlier frame.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter1d

from .errors import SchemaError
from .objectives import DYNAMIC_LABELS

FPS = 50.0
PEAK_THRESHOLD = 0.5
PEAK_RADIUS = 3
CHANGE_POINT_THRESHOLD = 0.75


@dataclass
class ProbSequence:
    """Frame-wise probabilities in [0, 1] at a fixed frame rate."""

    values: np.ndarray
    fps: float = FPS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.fps <= 0:
            raise SchemaError(f"fps must be positive, got {self.fps}")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise SchemaError("probabilities must lie in [0, 1]")


def _prob_values(probs) -> np.ndarray:
    return probs.values if isinstance(probs, ProbSequence) else np.asarray(probs, dtype=np.float64)


@dataclass
class EventReport:
    """Discrete predicted events, times in seconds."""

    beats: list[float] = field(default_factory=list)
    downbeats: list[float] = field(default_factory=list)
    markings: list[str] = field(default_factory=list)
    change_points: list[float] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "beats": [round(t, 3) for t in self.beats],
            "downbeats": [round(t, 3) for t in self.downbeats],
            "markings": list(self.markings),
            "change_points": [round(t, 3) for t in self.change_points],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> "EventReport":
        try:
            d = json.loads(Path(path).read_text())
            report = cls(beats=[float(t) for t in d["beats"]],
                         downbeats=[float(t) for t in d["downbeats"]],
                         markings=[str(m) for m in d["markings"]],
                         change_points=[float(t) for t in d["change_points"]])
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise SchemaError(f"{path}: not a valid event report: {exc}") from exc
        if len(report.markings) != len(report.beats):
            raise SchemaError(f"{path}: {len(report.markings)} markings for {len(report.beats)} beats")
        return report

    def write_csv(self, path) -> None:
        """One row per beat: time, marking, is_downbeat, is_change_point."""
        downbeats = set(self.downbeats)
        change_points = set(self.change_points)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time_s", "marking", "is_downbeat", "is_change_point"])
            for t, marking in zip(self.beats, self.markings):
                writer.writerow([f"{t:.3f}", marking,
                                 int(t in downbeats), int(t in change_points)])


def pick_peaks(probs: np.ndarray, threshold: float = PEAK_THRESHOLD,
               radius: int = PEAK_RADIUS) -> np.ndarray:
    """Frames that exceed ``threshold`` and are window maxima.

    A frame survives when it is >= every neighbour within ``radius``
    and no earlier surviving frame lies within ``radius`` (so selected
    frames are at least radius+1 apart; plateau ties go to the earlier
    frame).  Accepts a plain array or a :class:`ProbSequence`.
    """
    probs = _prob_values(probs)
    if probs.size == 0:
        return np.zeros(0, dtype=np.intp)
    win_max = maximum_filter1d(probs, size=2 * radius + 1, mode="constant", cval=-np.inf)
    candidates = np.nonzero((probs > threshold) & (probs >= win_max))[0]
    picked: list[int] = []
    for t in candidates:
        if picked and t - picked[-1] <= radius:
            continue
        picked.append(int(t))
    return np.asarray(picked, dtype=np.intp)


def markings_at_beats(dyn_probs: np.ndarray, beat_frames) -> list[str]:
    """Argmax class label at each beat frame; ties to the lower class."""
    dyn_probs = np.asarray(dyn_probs)
    labels = []
    for frame in np.asarray(beat_frames, dtype=np.intp):
        if frame < 0 or frame >= dyn_probs.shape[0]:
            raise SchemaError(f"beat frame {frame} outside [0, {dyn_probs.shape[0]})")
        labels.append(DYNAMIC_LABELS[int(np.argmax(dyn_probs[frame]))])
    return labels


def snap_to_nearest(frames: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Index of the nearest anchor for each frame; ties to the earlier one."""
    anchors = np.asarray(anchors, dtype=np.float64)
    frames = np.asarray(frames, dtype=np.float64)
    pos = np.searchsorted(anchors, frames)
    out = np.empty(len(frames), dtype=np.intp)
    for i, (x, p) in enumerate(zip(frames, pos)):
        if p == 0:
            out[i] = 0
        elif p == len(anchors):
            out[i] = len(anchors) - 1
        else:
            left, right = anchors[p - 1], anchors[p]
            out[i] = p - 1 if x - left <= right - x else p
    return out


def change_points(cp_probs: np.ndarray, beat_frames,
                  threshold: float = CHANGE_POINT_THRESHOLD) -> np.ndarray:
    """Candidate frames above ``threshold``, snapped to beat indices.

    Returns sorted unique indices into ``beat_frames``; empty when
    there are no beats to snap to.
    """
    beat_frames = np.asarray(beat_frames)
    if beat_frames.size == 0:
        return np.zeros(0, dtype=np.intp)
    candidates = np.nonzero(_prob_values(cp_probs) > threshold)[0]
    if candidates.size == 0:
        return np.zeros(0, dtype=np.intp)
    return np.unique(snap_to_nearest(candidates, beat_frames))


def to_seconds(frames, fps: float = FPS) -> np.ndarray:
    return np.asarray(frames, dtype=np.float64) / fps


def build_event_report(beat_probs: np.ndarray, downbeat_probs: np.ndarray,
                       cp_probs: np.ndarray, dyn_probs: np.ndarray,
                       fps: float = FPS, align_downbeats: bool = False,
                       beat_frames_override: np.ndarray | None = None) -> EventReport:
    """Assemble an EventReport from per-frame probabilities.

    ``beat_frames_override`` substitutes an externally supplied beat
    grid (score-assisted mode); markings and change points then attach
    to that grid.  ``align_downbeats`` snaps detected downbeats to the
    nearest beat within +-3 frames (off by default).
    """
    if beat_frames_override is not None:
        beat_frames = np.asarray(beat_frames_override, dtype=np.intp)
    else:
        beat_frames = pick_peaks(beat_probs)
    downbeat_frames = pick_peaks(downbeat_probs)
    if align_downbeats and beat_frames.size and downbeat_frames.size:
        snapped = snap_to_nearest(downbeat_frames, beat_frames)
        keep = np.abs(beat_frames[snapped] - downbeat_frames) <= PEAK_RADIUS
        downbeat_frames = np.unique(beat_frames[snapped[keep]])
    cp_idx = change_points(cp_probs, beat_frames)
    return EventReport(
        beats=[float(t) for t in to_seconds(beat_frames, fps)],
        downbeats=[float(t) for t in to_seconds(downbeat_frames, fps)],
        markings=markings_at_beats(dyn_probs, beat_frames),
        change_points=[float(t) for t in to_seconds(beat_frames[cp_idx], fps)],
    )
