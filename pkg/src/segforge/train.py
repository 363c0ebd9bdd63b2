"""Adam, global-norm gradient clipping, gradient accumulation and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from . import unet as U
from .augment import AugmentConfig, augment_pair, derive_seed, prepare_eval
from .data import ImageSample
from .loss import LossConfig, loss_from_logits
from .metrics import ConfusionMatrix, MetricsError, mean_foreground, per_class_dice, per_class_iou

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "L", "L_iou", "L_dice", "L_ce", "mIoU", "mDice"]


class TrainConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    """Training hit a NaN/Inf loss or gradient and was stopped."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 15
    micro_batch: int = 8
    accumulation_steps: int = 1
    clip_threshold: float = 3.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    validate_every: int = 1
    eval_batch: int = 16
    seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise TrainConfigError("learning_rate must be > 0")
        if self.epochs < 0:
            raise TrainConfigError("epochs must be >= 0")
        if self.micro_batch < 1:
            raise TrainConfigError("micro_batch must be >= 1")
        if self.accumulation_steps < 1:
            raise TrainConfigError("accumulation_steps must be >= 1")
        if not self.clip_threshold > 0:
            raise TrainConfigError("clip_threshold must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise TrainConfigError("Adam coefficients out of range")
        if self.validate_every != 1:
            raise TrainConfigError("validation runs after every epoch; validate_every must be 1")
        if self.workers < 1 or self.eval_batch < 1:
            raise TrainConfigError("workers and eval_batch must be >= 1")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation_steps


# ---------------------------------------------------------------------------
# optimiser pieces
# ---------------------------------------------------------------------------

def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray], threshold: float) -> Dict[str, np.ndarray]:
    """Rescale all gradients together so their global L2 norm is at most ``threshold``."""
    if not threshold > 0:
        raise ValueError("clip threshold must be > 0")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    norm = global_norm(grads)
    if norm <= threshold:
        return dict(grads)
    scale = threshold / norm
    return {name: g * scale for name, g in grads.items()}


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, T.Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def stack_batch(samples: Sequence[ImageSample]):
    images = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return np.ascontiguousarray(images), masks


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, "shuffle", epoch))
    return rng.permutation(n)


def accumulate_gradients(model: U.UNetModel, micro_batches: Sequence[Sequence[ImageSample]],
                         loss_cfg: LossConfig, provenance: str = ""):
    """Sum of gradients of ``(n_i / n_total) * loss_i`` over the micro-batches.

    Returns ``(grads, stats)`` where ``stats`` holds sample-weighted loss means.
    """
    total = sum(len(mb) for mb in micro_batches)
    for p in model.params.values():
        p.zero_grad()
    sums = {"L": 0.0, "L_iou": 0.0, "L_dice": 0.0, "L_ce": 0.0}
    for mb in micro_batches:
        images, masks = stack_batch(mb)
        lb = loss_from_logits(U.forward(model, images), masks, loss_cfg)
        value = lb.total.item()
        if not math.isfinite(value):
            ids = ", ".join(s.id for s in mb)
            raise NumericalError(f"non-finite loss {value} {provenance} on samples [{ids}]")
        T.backward(lb.total * (len(mb) / total))
        for k, v in lb.as_dict().items():
            sums[k] += v * len(mb)
    grads = {}
    for name, p in model.params.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.zero_grad()
    return grads, {k: v / total for k, v in sums.items()}


def train_epoch(model: U.UNetModel, dataset: Sequence[ImageSample], loss_cfg: LossConfig,
                train_cfg: TrainConfig, aug_cfg: AugmentConfig, epoch: int,
                state: Optional[AdamState] = None) -> Dict[str, float]:
    """One pass over ``dataset``; returns sample-weighted loss means."""
    if not dataset:
        raise ValueError("training set is empty")
    state = state if state is not None else AdamState()
    order = epoch_order(len(dataset), train_cfg.seed, epoch)

    def aug(i):
        return augment_pair(dataset[i], epoch, aug_cfg)

    if train_cfg.workers > 1:
        with ThreadPoolExecutor(train_cfg.workers) as pool:
            augmented = list(pool.map(aug, order))
    else:
        augmented = [aug(i) for i in order]

    eff, mb = train_cfg.effective_batch, train_cfg.micro_batch
    sums = {"L": 0.0, "L_iou": 0.0, "L_dice": 0.0, "L_ce": 0.0}
    for start in range(0, len(augmented), eff):
        group = augmented[start:start + eff]
        micro = [group[i:i + mb] for i in range(0, len(group), mb)]
        grads, stats = accumulate_gradients(model, micro, loss_cfg, f"in epoch {epoch}")
        grads = clip_gradients(grads, train_cfg.clip_threshold)
        adam_step(model.params, grads, state, train_cfg)
        for k in sums:
            sums[k] += stats[k] * len(group)
    return {k: v / len(augmented) for k, v in sums.items()}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class Evaluation:
    confusion: ConfusionMatrix
    iou: List[Optional[float]]
    dice: List[Optional[float]]
    miou: Optional[float]
    mdice: Optional[float]


def _mean_or_none(values):
    try:
        return mean_foreground(values)
    except MetricsError:
        return None


def evaluate_confusion(cm: ConfusionMatrix) -> Evaluation:
    iou, dice = per_class_iou(cm), per_class_dice(cm)
    return Evaluation(cm, iou, dice, _mean_or_none(iou), _mean_or_none(dice))


def predict_masks(model: U.UNetModel, samples: Sequence[ImageSample], aug_cfg: AugmentConfig,
                  batch: int = 16) -> List[np.ndarray]:
    out = []
    for start in range(0, len(samples), batch):
        chunk = [prepare_eval(s, aug_cfg) for s in samples[start:start + batch]]
        images, _ = stack_batch(chunk)
        out.extend(U.predict(model, images))
    return out


def validate(model: U.UNetModel, dataset: Sequence[ImageSample], aug_cfg: AugmentConfig,
             batch: int = 16) -> Evaluation:
    """Argmax predictions accumulated into one global confusion matrix."""
    if not dataset:
        raise ValueError("validation set is empty")
    cm = ConfusionMatrix(model.cfg.num_classes)
    for s, pred in zip(dataset, predict_masks(model, dataset, aug_cfg, batch)):
        cm.accumulate(s.mask, pred)
    return evaluate_confusion(cm)


# ---------------------------------------------------------------------------
# fit / checkpoints
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    model: U.UNetModel
    history: List[Dict[str, Any]]
    per_class: List[Dict[str, Any]]
    best_miou: Optional[float]
    best_epoch: Optional[int]
    state: AdamState


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(v)
    return repr(float(v))


def write_log(history: Sequence[Mapping[str, Any]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([_fmt(row.get(c)) for c in LOG_COLUMNS])


def write_per_class(rows: Sequence[Mapping[str, Any]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "class", "iou", "dice"])
        for r in rows:
            w.writerow([r["epoch"], r["class"], _fmt(r["iou"]), _fmt(r["dice"])])


def save_training_checkpoint(path, model: U.UNetModel, state: AdamState, epoch: int,
                             history, per_class, best_miou, best_epoch, meta: Optional[dict] = None) -> None:
    extra = {}
    for name in model.params:
        if name in state.m:
            extra[f"adam.m.{name}"] = state.m[name]
            extra[f"adam.v.{name}"] = state.v[name]
    full = dict(meta or {})
    full["state"] = {"epoch": epoch, "adam_step": state.t, "best_miou": best_miou, "best_epoch": best_epoch}
    full["history"] = list(history)
    full["per_class"] = list(per_class)
    U.save_checkpoint(path, model, full, extra)


def load_training_checkpoint(path):
    """Returns ``(model, state, meta)`` with the Adam moments restored."""
    model, meta, extra = U.load_checkpoint(path)
    state = AdamState(t=int(meta.get("state", {}).get("adam_step", 0)))
    for name in model.params:
        if f"adam.m.{name}" in extra:
            state.m[name] = extra[f"adam.m.{name}"].copy()
            state.v[name] = extra[f"adam.v.{name}"].copy()
    return model, state, meta


def fit(model: U.UNetModel, train_set: Sequence[ImageSample], val_set: Sequence[ImageSample],
        loss_cfg: LossConfig, train_cfg: TrainConfig, aug_cfg: AugmentConfig,
        out_dir=None, meta: Optional[dict] = None, resume_from=None,
        on_epoch: Optional[Callable[[Dict[str, Any]], None]] = None,
        emit_plot_data: bool = False) -> FitResult:
    """Train for ``train_cfg.epochs`` epochs with validation after each.

    Row 0 of the history is the validation of the starting weights.  With
    ``out_dir`` set, writes ``log.csv``, ``last.ckpt`` and ``best.ckpt``
    (highest foreground mIoU), plus ``per_class.csv`` when ``emit_plot_data``.
    ``resume_from`` continues a run from one of its checkpoints.
    """
    train_cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    state = AdamState()
    history: List[Dict[str, Any]] = []
    per_class: List[Dict[str, Any]] = []
    best_miou, best_epoch, start = None, None, 1
    if resume_from is not None:
        model, state, saved = load_training_checkpoint(resume_from)
        history = list(saved.get("history", []))
        per_class = list(saved.get("per_class", []))
        st = saved.get("state", {})
        best_miou, best_epoch = st.get("best_miou"), st.get("best_epoch")
        start = int(st.get("epoch", 0)) + 1

    def record(epoch, stats):
        nonlocal best_miou, best_epoch
        ev = validate(model, val_set, aug_cfg, train_cfg.eval_batch)
        row = {"epoch": epoch, **(stats or {}), "mIoU": ev.miou, "mDice": ev.mdice}
        history.append(row)
        for c in range(1, len(ev.iou)):
            per_class.append({"epoch": epoch, "class": c, "iou": ev.iou[c], "dice": ev.dice[c]})
        improved = ev.miou is not None and (best_miou is None or ev.miou > best_miou)
        if improved:
            best_miou, best_epoch = ev.miou, epoch
        if out is not None:
            ckpt = (state, epoch, history, per_class, best_miou, best_epoch, meta)
            save_training_checkpoint(out / "last.ckpt", model, *ckpt)
            if improved or not (out / "best.ckpt").exists():
                save_training_checkpoint(out / "best.ckpt", model, *ckpt)
            write_log(history, out / "log.csv")
            if emit_plot_data:
                write_per_class(per_class, out / "per_class.csv")
        log.info("epoch %d: %s", epoch, {k: row.get(k) for k in LOG_COLUMNS[1:]})
        if on_epoch is not None:
            on_epoch(row)

    if resume_from is None:
        record(0, None)
    for epoch in range(start, train_cfg.epochs + 1):
        stats = train_epoch(model, train_set, loss_cfg, train_cfg, aug_cfg, epoch, state)
        record(epoch, stats)
    return FitResult(model, history, per_class, best_miou, best_epoch, state)


# ---------------------------------------------------------------------------
# inference timing
# ---------------------------------------------------------------------------

@dataclass
class InferenceReport:
    mean_seconds: float
    images: int
    params: int
    flops_per_image: int

    @property
    def flops_per_batch(self) -> int:
        return self.flops_per_image * self.images


def measure_inference(model: U.UNetModel, images: np.ndarray, repetitions: int = 5,
                      warmup: int = 1) -> InferenceReport:
    """Mean wall-clock seconds of one forward pass over ``images`` (N, 3, H, W)."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    images = np.asarray(images, dtype=np.float64)
    for _ in range(warmup):
        U.forward(model, images)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        U.forward(model, images)
        times.append(time.perf_counter() - t0)
    return InferenceReport(
        mean_seconds=float(np.mean(times)),
        images=int(images.shape[0]),
        params=U.count_params(model),
        flops_per_image=U.estimate_flops(model.cfg, tuple(images.shape[2:])),
    )
