"""Composite multi-task loss: shift-tolerant weighted BCE for the three
binary targets plus beat-masked cross-entropy for dynamics.

The shift-tolerant loss is a reconstruction: for every annotated
positive frame the positive term uses the best prediction within a
+-``tolerance`` window, frames inside any such window are excluded
from the negative term, and positive terms are up-weighted to offset
target sparsity.  Whether the original formulation also pools
predictions for the negative term is unclear; exclusion is our
documented choice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

TASKS = ("dynamics", "change_point", "beat", "downbeat")
N_DYNAMIC_CLASSES = 6
DYNAMIC_LABELS = ("blank", "pp", "p", "mf", "f", "ff")
LABEL_TO_CLASS = {label: i for i, label in enumerate(DYNAMIC_LABELS)}

SHIFT_TOLERANCE = 3  # frames (+-60 ms at 50 fps)
POS_WEIGHT_CLAMP = (1.0, 100.0)


@dataclass
class FrameTargets:
    """Per-frame supervision for one recording or segment.

    ``dynamic_class`` carries the prevailing class at every frame
    (carry-forward between beats); the dynamics loss only reads it
    where ``beat_mask`` is set.
    """

    beat: np.ndarray
    downbeat: np.ndarray
    change_point: np.ndarray
    dynamic_class: np.ndarray
    beat_mask: np.ndarray

    def __post_init__(self):
        t = len(self.beat)
        for name in ("downbeat", "change_point", "dynamic_class", "beat_mask"):
            if len(getattr(self, name)) != t:
                raise ShapeError(f"FrameTargets: {name} has length {len(getattr(self, name))}, expected {t}")

    @property
    def n_frames(self) -> int:
        return len(self.beat)

    def validate(self) -> None:
        if not np.all(self.beat[self.downbeat > 0] > 0):
            raise ShapeError("FrameTargets: downbeat frames must be beat frames")
        if not np.all(self.beat[self.change_point > 0] > 0):
            raise ShapeError("FrameTargets: change-point frames must be beat frames")
        if self.dynamic_class.min(initial=0) < 0 or self.dynamic_class.max(initial=0) >= N_DYNAMIC_CLASSES:
            raise ShapeError("FrameTargets: dynamic_class outside [0, 6)")


@dataclass
class TargetBatch:
    """Stacked (B, T) targets plus a validity mask for padded frames."""

    beat: np.ndarray
    downbeat: np.ndarray
    change_point: np.ndarray
    dynamic_class: np.ndarray
    beat_mask: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_targets(cls, targets, n_valid=None) -> "TargetBatch":
        targets = list(targets)
        t = targets[0].n_frames
        b = len(targets)
        valid = np.ones((b, t), dtype=bool)
        if n_valid is not None:
            for i, n in enumerate(n_valid):
                valid[i, n:] = False
        stack = lambda name: np.stack([np.asarray(getattr(tg, name)) for tg in targets])
        return cls(beat=stack("beat"), downbeat=stack("downbeat"),
                   change_point=stack("change_point"), dynamic_class=stack("dynamic_class"),
                   beat_mask=stack("beat_mask"), valid=valid)


@dataclass
class LossConfig:
    tolerance: int = SHIFT_TOLERANCE
    pos_weight: float | None = None  # None: per-batch negatives/positives, clamped
    enabled_tasks: tuple[str, ...] = TASKS


@dataclass
class LossReport:
    total: float
    dyn: float
    cpt: float
    beat: float
    dbt: float

    def as_dict(self) -> dict:
        return {"total": self.total, "dyn": self.dyn, "cpt": self.cpt,
                "beat": self.beat, "dbt": self.dbt}


def _as_2d(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    return arr[None, :] if arr.ndim == 1 else arr


def _window_argmax(row: np.ndarray, center: int, tol: int, valid_row: np.ndarray) -> int:
    lo = max(0, center - tol)
    hi = min(len(row), center + tol + 1)
    idx = np.arange(lo, hi)
    idx = idx[valid_row[lo:hi]]
    if idx.size == 0:
        return center
    return int(idx[np.argmax(row[idx])])


def default_pos_weight(target: np.ndarray, valid: np.ndarray) -> float:
    """negatives/positives over valid frames, clamped to [1, 100]."""
    n_pos = int(np.count_nonzero(target[valid]))
    if n_pos == 0:
        return 1.0
    n_neg = int(valid.sum()) - n_pos
    return float(np.clip(n_neg / n_pos, *POS_WEIGHT_CLAMP))


def shift_tolerant_wbce(logits: Tensor, target: np.ndarray, tolerance: int = SHIFT_TOLERANCE,
                        pos_weight: float | None = None, valid: np.ndarray | None = None) -> Tensor:
    """Weighted BCE with a +-``tolerance`` frame hit window.

    ``logits`` is (T,) or (B, T); ``target`` is binary with the same
    shape.  Returns a scalar Tensor (mean over contributing terms).
    """
    target = _as_2d(target).astype(bool)
    shaped = logits if logits.ndim == 2 else ad.reshape(logits, (1, logits.shape[0]))
    if shaped.shape != target.shape:
        raise ShapeError(f"shift_tolerant_wbce: logits {shaped.shape} vs target {target.shape}")
    b, t = target.shape
    if valid is None:
        valid = np.ones((b, t), dtype=bool)
    else:
        valid = _as_2d(valid).astype(bool)
    if pos_weight is None:
        pos_weight = default_pos_weight(target, valid)

    data = shaped.data
    pos_flat: list[int] = []
    neg_excluded = np.zeros((b, t), dtype=bool)
    for i in range(b):
        positives = np.nonzero(target[i] & valid[i])[0]
        for t_star in positives:
            pos_flat.append(i * t + _window_argmax(data[i], int(t_star), tolerance, valid[i]))
            lo = max(0, t_star - tolerance)
            neg_excluded[i, lo:t_star + tolerance + 1] = True
    neg_keep = valid & ~target & ~neg_excluded
    neg_flat = np.nonzero(neg_keep.reshape(-1))[0]

    n_pos, n_neg = len(pos_flat), len(neg_flat)
    if n_pos + n_neg == 0:
        return Tensor(np.zeros((), dtype=shaped.data.dtype))
    terms = []
    if n_pos:
        # -log sigmoid(l) == softplus(-l)
        pos_logits = ad.take(shaped, np.asarray(pos_flat, dtype=np.intp))
        terms.append(ad.scale(ad.tsum(ad.softplus(ad.neg(pos_logits))), pos_weight))
    if n_neg:
        # -log(1 - sigmoid(l)) == softplus(l)
        neg_logits = ad.take(shaped, neg_flat)
        terms.append(ad.tsum(ad.softplus(neg_logits)))
    total = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return ad.scale(total, 1.0 / (n_pos + n_neg))


def masked_ce(dyn_logits: Tensor, dynamic_class: np.ndarray, beat_mask: np.ndarray,
              valid: np.ndarray | None = None) -> Tensor:
    """Cross-entropy over the 6 classes at beat-masked frames only."""
    shaped = dyn_logits if dyn_logits.ndim == 3 else ad.reshape(dyn_logits, (1,) + dyn_logits.shape)
    classes = _as_2d(dynamic_class).astype(np.int64)
    mask = _as_2d(beat_mask).astype(bool)
    b, t, c = shaped.shape
    if c != N_DYNAMIC_CLASSES:
        raise ShapeError(f"masked_ce: expected {N_DYNAMIC_CLASSES} classes, got {c}")
    if classes.shape != (b, t) or mask.shape != (b, t):
        raise ShapeError(f"masked_ce: targets {classes.shape}/{mask.shape} vs logits {shaped.shape}")
    if classes.max(initial=0) >= c or classes.min(initial=0) < 0:
        raise ShapeError(f"masked_ce: class id outside [0, {c})")
    if valid is not None:
        mask = mask & _as_2d(valid).astype(bool)
    rows = np.nonzero(mask.reshape(-1))[0]
    if rows.size == 0:
        return Tensor(np.zeros((), dtype=shaped.data.dtype))
    flat_idx = rows * c + classes.reshape(-1)[rows]
    logp = ad.log_softmax(shaped)
    picked = ad.take(logp, flat_idx)
    return ad.scale(ad.tsum(ad.neg(picked)), 1.0 / rows.size)


def multitask_loss(logits, targets: TargetBatch, cfg: LossConfig | None = None):
    """Sum of the four task losses; returns (scalar Tensor, LossReport)."""
    from .network import TaskLogits  # local import to avoid a cycle

    assert isinstance(logits, TaskLogits)
    cfg = cfg or LossConfig()
    zero = Tensor(np.zeros((), dtype=logits.beat.data.dtype))

    def binary_term(task_logits, target):
        return shift_tolerant_wbce(task_logits, target, tolerance=cfg.tolerance,
                                   pos_weight=cfg.pos_weight, valid=targets.valid)

    dyn = (masked_ce(logits.dynamics, targets.dynamic_class, targets.beat_mask, valid=targets.valid)
           if "dynamics" in cfg.enabled_tasks else zero)
    cpt = (binary_term(logits.change_point, targets.change_point)
           if "change_point" in cfg.enabled_tasks else zero)
    beat = (binary_term(logits.beat, targets.beat)
            if "beat" in cfg.enabled_tasks else zero)
    dbt = (binary_term(logits.downbeat, targets.downbeat)
           if "downbeat" in cfg.enabled_tasks else zero)

    total = ad.add(ad.add(dyn, cpt), ad.add(beat, dbt))
    report = LossReport(total=total.item(), dyn=dyn.item(), cpt=cpt.item(),
                        beat=beat.item(), dbt=dbt.item())
    return total, report
