"""Annotation ingestion, frame-target rasterisation, segmentation and
the piece-stratified cross-validation split.

Annotation schema (CSV, one pair of files per recording):

* ``<id>_beats.csv``    header ``beat_index,time_s,is_downbeat`` with
  0-based contiguous beat indices and strictly ascending times;
* ``<id>_markings.csv`` header ``beat_index,marking`` listing only the
  beats that carry a mark (tokens: pp, p, mf, ff, f).

Markings carry forward: every beat from a mark up to (but excluding)
the next mark holds that mark; beats before the first mark are blank.
A change point is any beat whose carried-forward marking differs from
the previous beat's (the first non-blank mark counts).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, SchemaError
from .objectives import DYNAMIC_LABELS, LABEL_TO_CLASS, FrameTargets

FPS = 50
MARKING_TOKENS = ("pp", "p", "mf", "f", "ff")
SEGMENT_SECONDS = 60
TRAIN_HOP_FRACTION = 0.5


@dataclass
class RecordingAnnotation:
    """Beat-aligned ground truth for one performance."""

    piece_id: str
    performer_id: str
    beat_times: np.ndarray
    downbeat_flags: np.ndarray
    markings: list[str]  # carried-forward, "blank" before the first mark
    duration: float

    @property
    def n_beats(self) -> int:
        return len(self.beat_times)

    def change_point_beats(self) -> list[int]:
        """0-based beat indices where the carried marking changes."""
        out = []
        previous = "blank"
        for i, mark in enumerate(self.markings):
            if mark != previous:
                out.append(i)
                previous = mark
        return out


@dataclass
class Segment:
    """A fixed-length training/evaluation window."""

    features: np.ndarray  # (F, T_seg)
    targets: FrameTargets
    recording_id: str
    start_s: float
    n_valid: int  # frames before zero padding starts


@dataclass
class Recording:
    recording_id: str
    piece_id: str
    features: np.ndarray  # (F, T)
    annotation: RecordingAnnotation
    targets: FrameTargets


def _read_rows(path, expected_header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if [h.strip() for h in header] != expected_header:
            raise SchemaError(f"{path}: row 1: expected header {','.join(expected_header)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(expected_header):
                raise SchemaError(f"{path}: row {lineno}: expected {len(expected_header)} columns, got {len(row)}")
            yield lineno, [cell.strip() for cell in row]


def load_annotation(beat_file, marking_file, piece_id: str | None = None,
                    performer_id: str | None = None, duration: float | None = None) -> RecordingAnnotation:
    """Parse and validate one beats/markings CSV pair."""
    beat_file = Path(beat_file)
    times: list[float] = []
    downbeats: list[bool] = []
    for lineno, (idx_s, time_s, db_s) in _read_rows(beat_file, ["beat_index", "time_s", "is_downbeat"]):
        try:
            idx, t, db = int(idx_s), float(time_s), int(db_s)
        except ValueError as exc:
            raise SchemaError(f"{beat_file}: row {lineno}: {exc}") from exc
        if idx != len(times):
            raise SchemaError(f"{beat_file}: row {lineno}: beat_index {idx} out of order (expected {len(times)})")
        if times and t <= times[-1]:
            raise SchemaError(f"{beat_file}: row {lineno}: beat times not strictly ascending ({t} after {times[-1]})")
        if db not in (0, 1):
            raise SchemaError(f"{beat_file}: row {lineno}: is_downbeat must be 0 or 1, got {db_s}")
        times.append(t)
        downbeats.append(bool(db))
    if not times:
        raise SchemaError(f"{beat_file}: no beats")

    marks_at: dict[int, str] = {}
    marking_file = Path(marking_file)
    for lineno, (idx_s, token) in _read_rows(marking_file, ["beat_index", "marking"]):
        try:
            idx = int(idx_s)
        except ValueError as exc:
            raise SchemaError(f"{marking_file}: row {lineno}: {exc}") from exc
        if token not in MARKING_TOKENS:
            raise SchemaError(f"{marking_file}: row {lineno}: unknown marking token {token!r} "
                              f"(expected one of {', '.join(MARKING_TOKENS)})")
        if not 0 <= idx < len(times):
            raise SchemaError(f"{marking_file}: row {lineno}: beat_index {idx} outside [0, {len(times)})")
        if idx in marks_at:
            raise SchemaError(f"{marking_file}: row {lineno}: duplicate mark for beat {idx}")
        marks_at[idx] = token

    carried: list[str] = []
    current = "blank"
    for i in range(len(times)):
        current = marks_at.get(i, current)
        carried.append(current)

    stem = beat_file.stem.removesuffix("_beats")
    if piece_id is None:
        piece_id = stem.split("__")[0]
    if performer_id is None:
        performer_id = stem.split("__")[1] if "__" in stem else stem
    return RecordingAnnotation(
        piece_id=piece_id, performer_id=performer_id,
        beat_times=np.asarray(times, dtype=np.float64),
        downbeat_flags=np.asarray(downbeats, dtype=bool),
        markings=carried,
        duration=float(duration if duration is not None else times[-1]),
    )


def time_to_frame(t: float, fps: int = FPS) -> int:
    """Nearest frame, half-up ties."""
    return int(np.floor(t * fps + 0.5))


def rasterize(ann: RecordingAnnotation, n_frames: int) -> FrameTargets:
    """Frame-level targets at 50 fps from a beat-aligned annotation."""
    frames = [time_to_frame(t) for t in ann.beat_times]
    # half-up rounding can push the final beat to frame ceil(duration*fps)
    needed = max(int(np.ceil(ann.duration * FPS)), frames[-1] + 1 if frames else 0)
    if n_frames < needed:
        raise SchemaError(f"rasterize: {n_frames} frames cannot hold a {ann.duration:.2f}s annotation "
                          f"(needs >= {needed})")
    beat = np.zeros(n_frames, dtype=np.uint8)
    downbeat = np.zeros(n_frames, dtype=np.uint8)
    change_point = np.zeros(n_frames, dtype=np.uint8)
    dynamic_class = np.zeros(n_frames, dtype=np.int64)
    for i in range(1, len(frames)):
        if frames[i] == frames[i - 1]:
            raise SchemaError(f"beats {i - 1} and {i} both round to frame {frames[i]}: "
                              "annotation denser than the 50 fps frame grid")
    change_beats = set(ann.change_point_beats())
    for i, frame in enumerate(frames):
        beat[frame] = 1
        if ann.downbeat_flags[i]:
            downbeat[frame] = 1
        if i in change_beats:
            change_point[frame] = 1
    # carry the class forward from each beat frame to the next change
    for i, frame in enumerate(frames):
        cls = LABEL_TO_CLASS[ann.markings[i]]
        end = frames[i + 1] if i + 1 < len(frames) else n_frames
        dynamic_class[frame:end] = cls
    if frames and frames[-1] < n_frames:
        dynamic_class[frames[-1]:] = LABEL_TO_CLASS[ann.markings[-1]]
    targets = FrameTargets(beat=beat, downbeat=downbeat, change_point=change_point,
                           dynamic_class=dynamic_class, beat_mask=beat.copy())
    targets.validate()
    return targets


def read_markings_at_beats(targets: FrameTargets, beat_frames) -> list[str]:
    """Inverse of rasterisation: class labels at the given beat frames."""
    return [DYNAMIC_LABELS[int(targets.dynamic_class[f])] for f in beat_frames]


def make_segments(features: np.ndarray, targets: FrameTargets, recording_id: str = "",
                  window_s: int = SEGMENT_SECONDS, mode: str = "train",
                  fps: int = FPS) -> list[Segment]:
    """Slice a recording into fixed windows.

    Train mode advances by half a window and uses only fully covered
    windows (one zero-padded window when the recording is shorter);
    eval mode tiles without overlap, padding the final window.  Padded
    frames are flagged through ``n_valid``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    f, t = features.shape
    win = window_s * fps
    hop = int(win * TRAIN_HOP_FRACTION) if mode == "train" else win
    if mode == "train":
        starts = list(range(0, t - win + 1, hop)) if t >= win else [0]
    else:
        starts = list(range(0, t, win))

    segments = []
    for start in starts:
        stop = min(start + win, t)
        feat = np.zeros((f, win), dtype=features.dtype)
        feat[:, : stop - start] = features[:, start:stop]
        sl = slice(start, stop)
        pad = win - (stop - start)
        tg = FrameTargets(
            beat=_pad(targets.beat[sl], pad),
            downbeat=_pad(targets.downbeat[sl], pad),
            change_point=_pad(targets.change_point[sl], pad),
            dynamic_class=_pad(targets.dynamic_class[sl], pad),
            beat_mask=_pad(targets.beat_mask[sl], pad),
        )
        segments.append(Segment(features=feat, targets=tg, recording_id=recording_id,
                                start_s=start / fps, n_valid=stop - start))
    return segments


def _pad(arr: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(arr, (0, pad)) if pad else arr.copy()


def make_folds(piece_ids, k: int = 5, seed: int = 86) -> dict[str, int]:
    """Seeded shuffle + round robin; all recordings of a piece share a fold."""
    pieces = sorted(set(piece_ids))
    if k > len(pieces):
        raise EmptyInputError(f"cannot make {k} folds from {len(pieces)} pieces")
    rng = np.random.default_rng(seed)
    order = [pieces[i] for i in rng.permutation(len(pieces))]
    return {piece: i % k for i, piece in enumerate(order)}


def write_segment_manifest(path, recordings, fold_of_piece: dict[str, int],
                           window_s: int = SEGMENT_SECONDS) -> None:
    """JSON manifest: recording ids, fold ids, and segment offsets."""
    entries = []
    for rec in recordings:
        train_starts = [s.start_s for s in make_segments(rec.features, rec.targets,
                                                         rec.recording_id, window_s, "train")]
        eval_starts = [s.start_s for s in make_segments(rec.features, rec.targets,
                                                        rec.recording_id, window_s, "eval")]
        entries.append({
            "recording_id": rec.recording_id,
            "piece_id": rec.piece_id,
            "fold": fold_of_piece[rec.piece_id],
            "train_segment_starts_s": train_starts,
            "eval_segment_starts_s": eval_starts,
        })
    Path(path).write_text(json.dumps({"window_s": window_s, "recordings": entries}, indent=2) + "\n")


def discover_recording_ids(annotations_dir) -> list[str]:
    """Recording ids from ``*_beats.csv`` files, sorted."""
    return sorted(p.stem.removesuffix("_beats") for p in Path(annotations_dir).glob("*_beats.csv"))


def load_corpus(features_dir, annotations_dir) -> list[Recording]:
    """Pair DYNF feature files with annotation CSVs by recording id."""
    from .audio import load_features

    features_dir = Path(features_dir)
    annotations_dir = Path(annotations_dir)
    ids = discover_recording_ids(annotations_dir)
    if not ids:
        raise EmptyInputError(f"no *_beats.csv annotations found in {annotations_dir}")
    recordings = []
    for rec_id in ids:
        feat_path = features_dir / f"{rec_id}.dynf"
        if not feat_path.exists():
            raise EmptyInputError(
                f"missing features for {rec_id}: expected {feat_path}; "
                f"run `dynamark extract` over the audio directory first")
        values, _ = load_features(feat_path)
        ann = load_annotation(annotations_dir / f"{rec_id}_beats.csv",
                              annotations_dir / f"{rec_id}_markings.csv")
        targets = rasterize(ann, values.shape[1])
        recordings.append(Recording(recording_id=rec_id, piece_id=ann.piece_id,
                                    features=values, annotation=ann, targets=targets))
    return recordings
