"""Source-free mean-teacher adaptation with student stabilisation.

Per minibatch the teacher labels raw target images (confidence >= delta,
then NMS), the student takes an SGD step on the detection loss of the
augmented images against those hard labels, and the teacher absorbs the
student by EMA.  Once per epoch the student is pulled back toward the
teacher (``phi <- gamma * phi + (1 - gamma) * theta``).  The teacher is the
model used for inference.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from sfdet import align, detector as det, metrics, tam as tam_mod
from sfdet.datagen import ConfigError, LabeledBox
from sfdet.params import ParamSet, all_finite, check_compatible, combine, copy_params, freeze

log = logging.getLogger(__name__)

VARIANTS = ("ssm", "no_ssm", "l2", "delayed_ema", "strong_weak")
ALIGNMENTS = ("none", "gw_student", "gw_teacher", "adv_student")
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
HISTORY_HEADER = ("epoch", "teacher_map50", "student_map50", "pseudo_per_img", "loss")


class AdaptationError(RuntimeError):
    pass


@dataclass
class AdaptConfig:
    alpha: float = 0.999
    gamma: float = 0.5
    delta: float = 0.4
    eta: float = 0.01
    epochs: int = 60
    batch_size: int = 16
    nms_iou: float = 0.3
    box_weight: float = 0.05
    cls_weight: float = 0.5
    obj_weight: float = 1.0
    variant: str = "ssm"
    l2_lambda: float = 0.01
    delay_period: int = 0  # batches between EMA updates; 0 means one epoch
    momentum: float = 0.937
    weight_decay: float = 5e-4
    grad_clip: float = 10.0
    loss_scale: str = "mean"  # "mean": gradients of the batch-mean loss; "batch": of batch_size * loss
    align: str = "none"
    gw_weight: float = 0.1
    gw_reduction: str = "mean"  # "mean": per-edge average of the graph loss; "sum": plain edge sum
    adv_weight: float = 0.1
    disc_lr: float = 0.01
    student_geom: bool = True  # random flip + shift on the student view, labels moved to match
    eval_conf: float = 0.001
    eval_nms: float = 0.6
    seed: int = 0

    def validate(self) -> None:
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        for name in ("gamma", "delta", "nms_iou"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.align not in ALIGNMENTS:
            raise ConfigError(f"unknown alignment {self.align!r}; choose from {ALIGNMENTS}")
        if self.gw_reduction not in ("sum", "mean"):
            raise ConfigError(f"gw_reduction must be 'sum' or 'mean', got {self.gw_reduction!r}")
        if self.loss_scale not in ("batch", "mean"):
            raise ConfigError(f"loss_scale must be 'batch' or 'mean', got {self.loss_scale!r}")
        if min(self.box_weight, self.cls_weight, self.obj_weight, self.l2_lambda, self.gw_weight,
               self.adv_weight) < 0:
            raise ConfigError("loss weights must be >= 0")

    @property
    def loss_weights(self) -> det.LossWeights:
        return det.LossWeights(self.box_weight, self.cls_weight, self.obj_weight)

    @property
    def uses_ssm(self) -> bool:
        return self.variant in ("ssm", "strong_weak")

    def replace(self, **changes) -> "AdaptConfig":
        data = asdict(self)
        data.update(changes)
        cfg = AdaptConfig(**data)
        cfg.validate()
        return cfg


def config_keys() -> dict[str, type]:
    return {f.name: type(f.default) for f in fields(AdaptConfig)}


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    teacher_map50: float
    student_map50: float
    pseudo_per_img: float
    loss: float


@dataclass
class AdaptHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise ValueError("epoch records must be consecutive")
        self.records.append(rec)

    def teacher_curve(self) -> list[float]:
        return [r.teacher_map50 for r in self.records]

    @property
    def final_teacher(self) -> float:
        return self.records[-1].teacher_map50 if self.records else float("nan")

    @property
    def best_teacher(self) -> float:
        return max(self.teacher_curve()) if self.records else float("nan")

    @property
    def retention(self) -> float:
        best = self.best_teacher
        return self.final_teacher / best if best > 0 else float("nan")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_HEADER)
            for r in self.records:
                w.writerow([r.epoch, f"{r.teacher_map50:.6f}", f"{r.student_map50:.6f}",
                            f"{r.pseudo_per_img:.6f}", f"{r.loss:.6f}"])

    @classmethod
    def read_csv(cls, path: str | Path) -> "AdaptHistory":
        hist = cls()
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != HISTORY_HEADER:
            raise ValueError(f"{path}: not a history file (header {rows[0] if rows else None})")
        for row in rows[1:]:
            hist.append(EpochRecord(int(row[0]), *(float(v) for v in row[1:])))
        return hist


@dataclass
class AdaptResult:
    teacher: ParamSet
    student: ParamSet
    history: AdaptHistory
    data_paths: set[tuple[str, str]] = field(default_factory=set)


# ---------------------------------------------------------------- update rules

def ema_update(theta: ParamSet, phi: ParamSet, alpha: float) -> ParamSet:
    """Teacher update: ``theta' = alpha * theta + (1 - alpha) * phi``."""
    if alpha == 1.0:
        check_compatible(theta, phi)
        return {k: v.copy() for k, v in theta.items()}
    return combine(theta, phi, lambda t, s: (alpha * t + (1.0 - alpha) * s).astype(t.dtype, copy=False))


def ssm_update(phi: ParamSet, theta: ParamSet, gamma: float) -> ParamSet:
    """Student stabilisation: ``phi' = gamma * phi + (1 - gamma) * theta``."""
    if gamma == 1.0:
        check_compatible(phi, theta)
        return {k: v.copy() for k, v in phi.items()}
    return combine(phi, theta, lambda s, t: (gamma * s + (1.0 - gamma) * t).astype(s.dtype, copy=False))


def l2_penalty(phi: ParamSet, theta: ParamSet, lam: float) -> tuple[float, ParamSet]:
    """``lam * ||phi - theta||^2`` and its gradient w.r.t. phi."""
    check_compatible(phi, theta)
    diff = {k: phi[k].astype(np.float64) - theta[k] for k in phi}
    value = lam * sum(float(np.sum(d * d)) for d in diff.values())
    return value, {k: (2.0 * lam * d).astype(phi[k].dtype) for k, d in diff.items()}


def pseudo_labels(teacher: ParamSet, img: np.ndarray, delta: float = 0.4, nms_iou: float = 0.3) -> list[LabeledBox]:
    """Hard labels from the teacher: detections with confidence >= delta after NMS."""
    return [d.to_label() for d in det.decode(det.forward(teacher, img), delta, nms_iou)]


def _batch_pseudo_labels(grids: np.ndarray, delta: float, nms_iou: float) -> list[list[LabeledBox]]:
    return [[d.to_label() for d in det.decode(g, delta, nms_iou)] for g in grids]


# ---------------------------------------------------------------- strong / weak views

def weak_params(seed: int, image_size: int = 64) -> tuple[bool, int, int]:
    rng = np.random.default_rng(seed)
    max_shift = max(1, image_size // 16)
    return bool(rng.random() < 0.5), int(rng.integers(-max_shift, max_shift + 1)), int(
        rng.integers(-max_shift, max_shift + 1))


def apply_weak(img: np.ndarray, flip: bool, dx: int, dy: int) -> np.ndarray:
    """Horizontal flip then an integer translation with edge replication."""
    out = img[:, ::-1] if flip else img
    if dx or dy:
        h, w = out.shape[:2]
        pad = max(abs(dx), abs(dy))
        padded = np.pad(out, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
        out = padded[pad - dy:pad - dy + h, pad - dx:pad - dx + w]
    return np.ascontiguousarray(out)


def transform_boxes(boxes: Sequence[LabeledBox], flip: bool, dx: int, dy: int, image_size: int) -> list[LabeledBox]:
    """Apply the weak geometric transform to boxes, clipping to the image."""
    out = []
    for b in boxes:
        cx = 1.0 - b.cx if flip else b.cx
        x0 = np.clip(cx - b.w / 2 + dx / image_size, 0, 1)
        x1 = np.clip(cx + b.w / 2 + dx / image_size, 0, 1)
        y0 = np.clip(b.cy - b.h / 2 + dy / image_size, 0, 1)
        y1 = np.clip(b.cy + b.h / 2 + dy / image_size, 0, 1)
        if x1 - x0 > 0 and y1 - y0 > 0:
            out.append(LabeledBox(b.class_id, float((x0 + x1) / 2), float((y0 + y1) / 2), float(x1 - x0),
                                  float(y1 - y0)))
    return out


def strong_weak_augment(img: np.ndarray, role: str, seed: int) -> np.ndarray:
    """Weak view (flip + shift) for the teacher, or that view plus photometric
    jitter, random grayscale (p=0.2) and blur for the student.

    Both roles share the geometric transform for a given seed, so teacher
    labels on the weak view apply directly to the strong view.
    """
    if role not in ("teacher_weak", "student_strong"):
        raise ValueError(f"role must be 'teacher_weak' or 'student_strong', got {role!r}")
    img = np.asarray(img, dtype=np.float32)
    out = apply_weak(img, *weak_params(seed, img.shape[0]))
    if role == "teacher_weak":
        return out
    rng = np.random.default_rng([seed, 1])
    out = out * rng.uniform(0.6, 1.4)                                          # brightness
    out = (out - out.mean()) * rng.uniform(0.6, 1.4) + out.mean()              # contrast
    g = (out @ LUMA)[..., None]
    out = g + (out - g) * rng.uniform(0.6, 1.4)                                # saturation
    if rng.random() < 0.2:
        out = np.repeat((out @ LUMA)[..., None], 3, axis=-1)
    sigma = rng.uniform(0.1, 1.5)
    out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0), mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------- evaluation

def evaluate_map50(params: ParamSet, images: np.ndarray, gts: Sequence[Sequence[LabeledBox]],
                   conf: float = 0.001, nms_iou: float = 0.6) -> float:
    return metrics.map50(det.detect(params, images, conf, nms_iou), gts)


# ---------------------------------------------------------------- the loop

def _clip(grads: ParamSet, max_norm: float) -> ParamSet:
    if not max_norm:
        return grads
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm <= max_norm:
        return grads
    s = max_norm / (norm + 1e-12)
    return {k: g * s for k, g in grads.items()}


def _add(a: ParamSet, b: ParamSet) -> ParamSet:
    return {k: a[k] + b[k].astype(a[k].dtype) for k in a}


def _image_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def run_adaptation(source: ParamSet, target_images: np.ndarray, val_images: np.ndarray | None,
                   val_labels: Sequence[Sequence[LabeledBox]] | None, tam: tam_mod.TamParams | None,
                   config: AdaptConfig = AdaptConfig(), style: np.ndarray | None = None) -> AdaptResult:
    """Adapt a source-trained detector using unlabeled target images.

    ``val_images``/``val_labels`` only feed the per-epoch history and never
    influence training.  ``tam`` is required unless the variant is
    ``strong_weak``; ``style`` defaults to the average target image.
    """
    config.validate()
    if not all_finite(source):
        raise AdaptationError("source checkpoint contains non-finite values")
    x_all = np.asarray(target_images, dtype=np.float32)
    n = len(x_all)
    if n == 0:
        raise AdaptationError("no target images")
    size = x_all.shape[1]
    use_tam = config.variant != "strong_weak"
    if use_tam and tam is None:
        raise AdaptationError(f"variant {config.variant!r} needs a trained TAM")
    if use_tam:
        style = tam_mod.compute_style_image(x_all) if style is None else style
        x_stylized = tam_mod.stylize(tam, x_all, style)
    weights = config.loss_weights
    bs = config.batch_size
    nb = int(math.ceil(n / bs))
    period = config.delay_period or nb
    rng = np.random.default_rng(config.seed)

    teacher = freeze(copy_params(source))
    student = copy_params(source)
    velocity = None
    disc = None
    if config.align == "adv_student":
        disc = align.init_discriminator(source["b3c.b"].shape[0], seed=config.seed)
    data_paths: set[tuple[str, str]] = set()
    history = AdaptHistory()
    step = 0

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        n_pseudo = 0
        losses = []
        for b in range(nb):
            idx = order[b * bs:(b + 1) * bs]
            x = x_all[idx]
            if use_tam:
                teacher_in, student_in = x, x_stylized[idx]
                data_paths.update({("teacher", "target"), ("student", "stylized")})
            else:
                seeds = [_image_seed(config.seed, epoch, int(k)) for k in idx]
                teacher_in = np.stack([strong_weak_augment(img, "teacher_weak", s) for img, s in zip(x, seeds)])
                student_in = np.stack([strong_weak_augment(img, "student_strong", s) for img, s in zip(x, seeds)])
                data_paths.update({("teacher", "target_weak"), ("student", "target_strong")})

            t_grid, t_feats, _ = det.forward_train(teacher, teacher_in)
            labels = _batch_pseudo_labels(t_grid, config.delta, config.nms_iou)
            n_pseudo += sum(len(p) for p in labels)

            if use_tam and config.student_geom:
                student_in = student_in.copy()
                for j, k in enumerate(idx):
                    g = weak_params(_image_seed(config.seed, epoch, int(k)), size)
                    student_in[j] = apply_weak(student_in[j], *g)
                    labels[j] = transform_boxes(labels[j], *g, size)

            two_views = config.align in ("gw_student", "adv_student")
            if two_views:
                data_paths.add(("student", "target"))
                s_in = np.concatenate([student_in, x])
            else:
                s_in = student_in
            s_grid, s_feats, cache = det.forward_train(student, s_in)
            m = len(idx)
            loss, dgrid_aug = det.detection_loss(s_grid[:m], labels, weights, det.ANCHOR)
            dgrid = np.zeros_like(s_grid)
            dgrid[:m] = dgrid_aug
            total = loss.total
            dfeat = None
            if config.align in ("gw_student", "gw_teacher"):
                feats_t = s_feats[m:] if config.align == "gw_student" else t_feats
                l_gw, d_t, d_a = align.gw_batch(feats_t, s_feats[:m], config.gw_reduction)
                dfeat = np.zeros(s_feats.shape)
                dfeat[:m] = config.gw_weight * d_a
                if config.align == "gw_student":
                    dfeat[m:] = config.gw_weight * d_t
                total += config.gw_weight * l_gw
            elif config.align == "adv_student":
                domain = np.concatenate([np.ones(m), np.zeros(m)])
                l_adv, d_grads, dfeat = align.adversarial_loss(disc, s_feats, domain, config.adv_weight)
                disc = {k: disc[k] - config.disc_lr * d_grads[k] for k in disc}
                total -= config.adv_weight * l_adv

            if not np.isfinite(total):
                raise AdaptationError(f"non-finite loss at epoch {epoch} batch {b}: {loss}")
            scale = float(m) if config.loss_scale == "batch" else 1.0
            grads = det.backward(student, cache, dgrid * scale,
                                 None if dfeat is None else (dfeat * scale).astype(s_feats.dtype))
            if config.variant == "l2":
                value, g_l2 = l2_penalty(student, teacher, config.l2_lambda)
                grads = _add(grads, {k: g * scale for k, g in g_l2.items()})
                total += value
            grads = _clip(grads, config.grad_clip)
            try:
                student, velocity = det.sgd_step(student, grads, config.eta, config.momentum, velocity,
                                                 config.weight_decay, step)
            except det.TrainingError as exc:
                raise AdaptationError(f"epoch {epoch}: {exc}") from exc
            step += 1
            if config.variant == "delayed_ema":
                if step % period == 0:
                    teacher = freeze(ema_update(teacher, student, config.alpha))
            else:
                teacher = freeze(ema_update(teacher, student, config.alpha))
            losses.append(total)

        if config.uses_ssm:
            student = ssm_update(student, teacher, config.gamma)
        if not all_finite(student):
            raise AdaptationError(f"student parameters became non-finite at epoch {epoch}")
        if val_images is not None and val_labels is not None:
            t_map = evaluate_map50(teacher, val_images, val_labels, config.eval_conf, config.eval_nms)
            s_map = evaluate_map50(student, val_images, val_labels, config.eval_conf, config.eval_nms)
        else:
            t_map = s_map = float("nan")
        history.append(EpochRecord(epoch, t_map, s_map, n_pseudo / n, float(np.mean(losses))))
        log.info("epoch %d teacher %.4f student %.4f pseudo/img %.2f loss %.4f", epoch, t_map, s_map,
                 n_pseudo / n, history.records[-1].loss)

    return AdaptResult(teacher, student, history, data_paths)
