"""AdamW training, checkpoint persistence, fold orchestration, ablations.

Checkpoint selection: after each epoch the model is scored on its
validation recordings with the unweighted mean of the four task F1s
(beat and downbeat at +-70 ms, beat-wise dynamics macro F1, snapped
change-point F1) and the best-scoring epoch is kept.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore
from .dataset import Recording, Segment, make_segments, time_to_frame
from .errors import CheckpointError, TrainingError
from .metrics import (
    changepoint_f1,
    dynamics_macro_f1,
    event_f1,
    mean_std,
    snap_times_to_beat_indices,
)
from .network import DynamicsModel, ModelConfig
from .objectives import TASKS, LossConfig, TargetBatch, multitask_loss
from .postprocess import build_event_report

CHECKPOINT_MAGIC = b"DYNC"
CHECKPOINT_VERSION = 1

ABLATIONS = ("no_mmoe", "s1", "no_augment", "seg30")


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 10
    epochs: int = 120
    seed: int = 86
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    segment_s: int = 60
    augment_overlap: bool = True
    enabled_tasks: tuple[str, ...] = TASKS

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise TrainingError(f"invalid training config: lr={self.lr}, batch_size={self.batch_size}")
        if not self.enabled_tasks:
            raise TrainingError("enabled_tasks must not be empty")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["enabled_tasks"] = list(self.enabled_tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        d["enabled_tasks"] = tuple(d.get("enabled_tasks", TASKS))
        return cls(**d)


class AdamW:
    """Decoupled weight-decay Adam with bias correction.

    A parameter that has never received a nonzero gradient is left
    untouched (no decay either), so heads of disabled tasks stay at
    their initial values exactly.
    """

    def __init__(self, store: ParameterStore, lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}

    def step(self) -> None:
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
            entry = self.state.get(name)
            if entry is None:
                if not g.any():
                    continue
                entry = self.state[name] = {
                    "step": 0,
                    "m": np.zeros_like(p.data, dtype=np.float32),
                    "v": np.zeros_like(p.data, dtype=np.float32),
                }
            entry["step"] += 1
            t = entry["step"]
            m, v = entry["m"], entry["v"]
            g32 = g.astype(np.float32, copy=False)
            m *= self.beta1
            m += (1.0 - self.beta1) * g32
            v *= self.beta2
            v += (1.0 - self.beta2) * (g32 * g32)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        self.store.zero_grads()


def adamw_step(store: ParameterStore, cfg: TrainConfig, optimizer: AdamW | None = None) -> AdamW:
    """Single optimiser step; returns the (new or reused) optimiser."""
    if optimizer is None:
        optimizer = AdamW(store, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                          weight_decay=cfg.weight_decay)
    optimizer.step()
    return optimizer


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    bn_state: dict[str, np.ndarray]
    epoch: int
    val_summary: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: DynamicsModel, train_config: TrainConfig,
                   epoch: int, val_summary: dict | None = None) -> "Checkpoint":
        return cls(version=CHECKPOINT_VERSION, model_config=model.cfg,
                   train_config=train_config, params=model.params.state_dict(),
                   bn_state=model.bn_state_dict(), epoch=epoch,
                   val_summary=dict(val_summary or {}))


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(cp: Checkpoint, path) -> None:
    config_blob = json.dumps({
        "model_config": cp.model_config.as_dict(),
        "train_config": cp.train_config.as_dict(),
        "epoch": cp.epoch,
        "val_summary": cp.val_summary,
        "n_params": len(cp.params),
        "n_state": len(cp.bn_state),
    }).encode("utf-8")
    body = struct.pack("<I", len(config_blob)) + config_blob
    tensors = list(sorted(cp.params.items())) + list(sorted(cp.bn_state.items()))
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        body += _pack_tensor(name, arr)
    blob = CHECKPOINT_MAGIC + struct.pack("<I", cp.version)
    blob += struct.pack("<I", zlib.crc32(body)) + body
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, crc = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} not supported "
                              f"(this build reads version {CHECKPOINT_VERSION})")
    body = blob[12:]
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt or truncated")
    (config_len,) = struct.unpack_from("<I", body, 0)
    config = json.loads(body[4:4 + config_len].decode("utf-8"))
    offset = 4 + config_len
    (n_tensors,) = struct.unpack_from("<I", body, offset)
    offset += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", body, offset)
        offset += 2
        name = body[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", body, offset)
        offset += 1
        shape = struct.unpack_from(f"<{rank}I", body, offset)
        offset += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        tensors[name] = arr.copy()
    model_cfg = ModelConfig.from_dict(config["model_config"])
    train_cfg = TrainConfig.from_dict(config["train_config"])
    probe = DynamicsModel(model_cfg, seed=0)
    param_set = set(probe.params.names())
    params = {k: v for k, v in tensors.items() if k in param_set}
    bn_state = {k: v for k, v in tensors.items() if k not in param_set}
    if len(params) != config["n_params"] or len(bn_state) != config["n_state"]:
        raise CheckpointError(f"{path}: tensor inventory does not match the recorded model")
    return Checkpoint(version=version, model_config=model_cfg, train_config=train_cfg,
                      params=params, bn_state=bn_state, epoch=config["epoch"],
                      val_summary=config["val_summary"])


def model_from_checkpoint(cp: Checkpoint) -> DynamicsModel:
    model = DynamicsModel(cp.model_config, seed=0)
    model.params.load_state_dict(cp.params)
    model.load_bn_state_dict(cp.bn_state)
    return model


# --------------------------------------------------------------------------
# prediction / evaluation
# --------------------------------------------------------------------------

def predict_frames(model: DynamicsModel, features: np.ndarray,
                   window_s: int = 60) -> dict[str, np.ndarray]:
    """Eval-mode logits for a whole recording, stitched over windows."""
    from .objectives import FrameTargets

    t = features.shape[1]
    dummy = FrameTargets(beat=np.zeros(t, dtype=np.uint8), downbeat=np.zeros(t, dtype=np.uint8),
                         change_point=np.zeros(t, dtype=np.uint8),
                         dynamic_class=np.zeros(t, dtype=np.int64),
                         beat_mask=np.zeros(t, dtype=np.uint8))
    pieces = {"dynamics": [], "change_point": [], "beat": [], "downbeat": []}
    for seg in make_segments(features, dummy, mode="eval", window_s=window_s):
        logits = model.forward(seg.features, training=False)
        pieces["dynamics"].append(logits.dynamics.data[0, :seg.n_valid])
        pieces["change_point"].append(logits.change_point.data[0, :seg.n_valid])
        pieces["beat"].append(logits.beat.data[0, :seg.n_valid])
        pieces["downbeat"].append(logits.downbeat.data[0, :seg.n_valid])
    return {k: np.concatenate(v, axis=0) for k, v in pieces.items()}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def annotate_features(model: DynamicsModel, features: np.ndarray,
                      beat_times_override=None, align_downbeats: bool = False,
                      window_s: int = 60):
    """Features -> EventReport via forward pass + post-processing."""
    frames = predict_frames(model, features, window_s=window_s)
    override_frames = None
    if beat_times_override is not None:
        t = features.shape[1]
        override_frames = np.asarray(
            [min(time_to_frame(bt), t - 1) for bt in beat_times_override], dtype=np.intp)
    return build_event_report(
        _sigmoid(frames["beat"]), _sigmoid(frames["downbeat"]),
        _sigmoid(frames["change_point"]), _softmax_rows(frames["dynamics"]),
        align_downbeats=align_downbeats, beat_frames_override=override_frames)


def evaluate_recording(model: DynamicsModel, rec: Recording, window_s: int = 60) -> dict:
    """The four validation F1s for one recording."""
    frames = predict_frames(model, rec.features, window_s=window_s)
    report = build_event_report(_sigmoid(frames["beat"]), _sigmoid(frames["downbeat"]),
                                _sigmoid(frames["change_point"]), _softmax_rows(frames["dynamics"]))
    ann = rec.annotation
    beat = event_f1(report.beats, ann.beat_times)
    downbeat = event_f1(report.downbeats, ann.beat_times[ann.downbeat_flags])
    # dynamics: sample the predicted class curve at ground-truth beats
    t = rec.features.shape[1]
    gt_frames = [min(time_to_frame(bt), t - 1) for bt in ann.beat_times]
    dyn_probs = _softmax_rows(frames["dynamics"])
    from .postprocess import markings_at_beats
    pred_labels = markings_at_beats(dyn_probs, gt_frames)
    dynamics = dynamics_macro_f1(pred_labels, ann.markings)
    # change points: snap predicted times to the ground-truth beat grid
    pred_cp = snap_times_to_beat_indices(report.change_points, ann.beat_times)
    cpt = changepoint_f1(pred_cp, ann.change_point_beats())
    return {
        "beat_f1": beat.f1,
        "downbeat_f1": downbeat.f1,
        "dynamics_f1": dynamics.macro_f1,
        "change_point_f1": cpt.f1,
        "detail": {"beat": beat.as_dict(), "downbeat": downbeat.as_dict(),
                   "dynamics": dynamics.as_dict(), "change_point": cpt.as_dict()},
    }


TASK_F1_KEYS = ("dynamics_f1", "change_point_f1", "beat_f1", "downbeat_f1")


def evaluate_recordings(model: DynamicsModel, recordings, window_s: int = 60) -> dict:
    """Per-recording F1s plus task means and their overall mean."""
    per_recording = {rec.recording_id: evaluate_recording(model, rec, window_s)
                     for rec in recordings}
    summary = {}
    for key in TASK_F1_KEYS:
        values = [r[key] for r in per_recording.values() if r[key] is not None]
        summary[key] = float(np.mean(values)) if values else None
    defined = [v for v in summary.values() if v is not None]
    summary["mean_f1"] = float(np.mean(defined)) if defined else 0.0
    return {"per_recording": per_recording, **summary}


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _batches(segments: list[Segment], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(segments))
    for lo in range(0, len(order), batch_size):
        chunk = [segments[i] for i in order[lo:lo + batch_size]]
        feats = np.stack([seg.features for seg in chunk])
        targets = TargetBatch.from_targets([seg.targets for seg in chunk],
                                           [seg.n_valid for seg in chunk])
        yield feats, targets


def train_model(model: DynamicsModel, train_recordings, val_recordings,
                train_cfg: TrainConfig, log=None, stop_when=None) -> tuple[Checkpoint, dict]:
    """Fit on train recordings; keep the best-validation checkpoint.

    Returns (best checkpoint, history with per-epoch losses and
    validation summaries).  ``stop_when(val_summary)`` returning True
    ends training early (off by default, so the stock protocol always
    runs the configured number of epochs).
    """
    if not train_recordings:
        raise TrainingError("training split is empty")
    if not val_recordings:
        raise TrainingError("validation split is empty")
    segments = []
    for rec in train_recordings:
        segments.extend(make_segments(rec.features, rec.targets, rec.recording_id,
                                      window_s=train_cfg.segment_s,
                                      mode="train" if train_cfg.augment_overlap else "eval"))
    loss_cfg = LossConfig(enabled_tasks=train_cfg.enabled_tasks)
    optimizer = AdamW(model.params, lr=train_cfg.lr, betas=train_cfg.betas,
                      eps=train_cfg.eps, weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed)
    history = {"step_losses": [], "epoch_losses": [], "val_mean_f1": []}
    best: Checkpoint | None = None
    best_score = -1.0
    for epoch in range(train_cfg.epochs):
        epoch_losses = []
        for feats, targets in _batches(segments, train_cfg.batch_size, rng):
            logits = model.forward(feats, training=True)
            loss, report = multitask_loss(logits, targets, loss_cfg)
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step()
            history["step_losses"].append(report.total)
            epoch_losses.append(report.total)
        history["epoch_losses"].append(float(np.mean(epoch_losses)))
        val = evaluate_recordings(model, val_recordings, window_s=train_cfg.segment_s)
        history["val_mean_f1"].append(val["mean_f1"])
        if log:
            log(f"epoch {epoch + 1}/{train_cfg.epochs}: "
                f"loss {history['epoch_losses'][-1]:.4f} val mean F1 {val['mean_f1']:.3f}")
        if val["mean_f1"] > best_score:
            best_score = val["mean_f1"]
            summary = {k: val[k] for k in TASK_F1_KEYS + ("mean_f1",)}
            best = Checkpoint.from_model(model, train_cfg, epoch=epoch + 1, val_summary=summary)
        if stop_when is not None and stop_when({k: val[k] for k in TASK_F1_KEYS + ("mean_f1",)}):
            break
    return best, history


def split_fold(recordings, fold_of_piece: dict[str, int], fold: int):
    train = [r for r in recordings if fold_of_piece[r.piece_id] != fold]
    val = [r for r in recordings if fold_of_piece[r.piece_id] == fold]
    return train, val


def train_fold(recordings, fold_of_piece: dict[str, int], fold: int,
               model_cfg: ModelConfig, train_cfg: TrainConfig, log=None) -> tuple[Checkpoint, dict]:
    """Train one cross-validation fold from scratch."""
    train, val = split_fold(recordings, fold_of_piece, fold)
    if not train or not val:
        raise TrainingError(f"fold {fold}: empty split (train={len(train)}, val={len(val)})")
    model = DynamicsModel(model_cfg, seed=train_cfg.seed)
    return train_model(model, train, val, train_cfg, log=log)


def apply_ablation(name: str, model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Exactly one modification of the base configuration."""
    m = model_cfg.as_dict()
    t = train_cfg.as_dict()
    if name == "no_mmoe":
        m["use_mmoe"] = False
    elif name == "s1":
        m["scaling_factor"] = 1
    elif name == "no_augment":
        t["augment_overlap"] = False
    elif name == "seg30":
        t["segment_s"] = 30
    else:
        raise TrainingError(f"unknown ablation {name!r}; expected one of {', '.join(ABLATIONS)}")
    return ModelConfig.from_dict(m), TrainConfig.from_dict(t)


def run_ablation(name: str, recordings, fold_of_piece: dict[str, int],
                 model_cfg: ModelConfig, train_cfg: TrainConfig,
                 folds=None, log=None) -> dict:
    """Run the standard protocol under one ablation switch.

    Report carries the four task F1s (mean over the folds run) plus
    their average, mirroring the ablation-table layout.
    """
    model_cfg, train_cfg = apply_ablation(name, model_cfg, train_cfg)
    folds = sorted(set(fold_of_piece.values())) if folds is None else list(folds)
    per_fold = []
    for fold in folds:
        best, _ = train_fold(recordings, fold_of_piece, fold, model_cfg, train_cfg, log=log)
        per_fold.append(best.val_summary)
    report = {"ablation": name,
              "model_config": model_cfg.as_dict(),
              "train_config": train_cfg.as_dict(),
              "folds": folds,
              "per_fold": per_fold,
              "f1": {}}
    for key in TASK_F1_KEYS:
        report["f1"][key] = mean_std([s.get(key) for s in per_fold])
    defined = [report["f1"][k]["mean"] for k in TASK_F1_KEYS if report["f1"][k]["mean"] is not None]
    report["average"] = float(np.mean(defined)) if defined else None
    return report
