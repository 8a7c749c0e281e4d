"""Training objectives and per-iteration update procedures.

Losses are the negated Bernoulli log-likelihood evaluated in logit form, so
every reported term is nonnegative and minimized. Batched calls average over
the batch.

Rows whose pseudo-label is NaN have no supervision (the teacher missed the
feedback window); they contribute only the ground-truth serving loss.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingSupervision
from .models import (
    Mlp,
    MlpGrads,
    VMArch,
    backward,
    forward,
    mlp_backward,
    mlp_forward,
    sa_features,
    sa_logit,
    sgd_step,
)
from .numerics import sigmoid


class DistillMode(str, enum.Enum):
    NO_DISTILL = "NoDistill"
    VANILLA_KD = "VanillaKD"
    AH = "AH"
    AH_PLUS_SA = "AH_plus_SA"

    @classmethod
    def parse(cls, value: "str | DistillMode") -> "DistillMode":
        if isinstance(value, cls):
            return value
        for mode in cls:
            if value.lower() in (mode.value.lower(), mode.name.lower()):
                return mode
        raise ValueError(f"unknown distillation mode {value!r}")


@dataclass(frozen=True)
class AHConfig:
    loss_weight: float = 1.0  # w
    label_scale: float = 1.0  # alpha
    grad_scale: float = 1.0  # beta

    def __post_init__(self):
        if self.loss_weight < 0 or self.grad_scale < 0:
            raise ValueError("loss_weight and grad_scale must be nonnegative")
        if self.label_scale < 1:
            raise ValueError("label_scale must be >= 1")


def bce(logit, target):
    """Binary cross-entropy between ``sigmoid(logit)`` and a soft target."""
    z = np.asarray(logit, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    out = np.maximum(z, 0.0) - t * z + np.log1p(np.exp(-np.abs(z)))
    return float(out) if out.ndim == 0 else out


def bce_grad(logit, target):
    """Derivative of :func:`bce` with respect to the logit."""
    return sigmoid(logit) - np.asarray(target, dtype=np.float64)


def scale_target(y_f, label_scale: float):
    return np.minimum(label_scale * np.asarray(y_f, dtype=np.float64), 1.0)


def loss_kd(y_s_logit, y_f, y):
    return bce(y_s_logit, y) + bce(y_s_logit, y_f)


def loss_ah(y_s_logit, y_d_logit, y_f, y, cfg: AHConfig):
    """Returns ``(L_s, L_d, total)`` with ``total = L_s + w * L_d``."""
    l_s = bce(y_s_logit, y)
    l_d = bce(y_d_logit, scale_target(y_f, cfg.label_scale))
    return l_s, l_d, l_s + cfg.loss_weight * l_d


# ---------------------------------------------------------------------------
# Student Adapter


@dataclass
class StudentAdapter:
    """Scalar-in, scalar-out MLP recalibrating the teacher's pseudo-label.

    ``seen`` counts training examples so callers can hold off consuming its
    output until it has warmed up.
    """

    mlp: Mlp
    seen: int = 0

    def copy(self) -> "StudentAdapter":
        return StudentAdapter(self.mlp.copy(), self.seen)

    def predict(self, y_f) -> np.ndarray:
        return sigmoid(sa_logit(self.mlp, y_f))


def sa_train_step(sa: StudentAdapter, y_f, y, lr: float):
    """One gradient step on ``bce(SA(y_f), y)``; returns ``(new_sa, y_sa)``.

    ``y_sa`` is the post-update prediction. It is returned as a read-only
    array: downstream losses treat it as a constant target, so nothing flows
    back into the adapter.
    """
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    yf = np.atleast_1d(np.asarray(y_f, dtype=np.float64))
    yv = np.atleast_1d(np.asarray(y, dtype=np.float64))
    out, cache = mlp_forward(sa.mlp, sa_features(yf))
    g = bce_grad(out[:, 0], yv) / len(yf)
    grads, _ = mlp_backward(sa.mlp, cache, g[:, None])
    new = StudentAdapter(sgd_step(sa.mlp, MlpGrads(grads), lr), sa.seen + len(yf))
    y_sa = new.predict(yf)
    y_sa.flags.writeable = False
    return new, y_sa


# ---------------------------------------------------------------------------
# VM step


@dataclass
class TrainStepReport:
    l_s: float = 0.0
    l_d: float = 0.0
    l_sa: float = 0.0
    l_sta: float = 0.0
    grad_norms: dict[str, float] = field(default_factory=dict)
    updated: dict[str, bool] = field(default_factory=dict)


def _as_batch(features, y, y_f):
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    yv = np.atleast_1d(np.asarray(y, dtype=np.float64))
    yf = None if y_f is None else np.atleast_1d(np.asarray(y_f, dtype=np.float64))
    return X, yv, yf


def head_dlogits(fwd, y, y_f, y_sa, mode: DistillMode, cfg: AHConfig):
    """Per-row loss derivatives w.r.t. the three head logits, plus mean losses.

    ``y_f`` may contain NaN for unsupervised rows; ``y_sa`` is None when the
    Student Adapter term is off.
    """
    n = len(y)
    y_s, y_d, y_a = (np.atleast_1d(v) for v in (fwd.y_s, fwd.y_d, fwd.y_sa_head))
    d_s = bce_grad(y_s, y)
    d_d = np.zeros(n)
    d_a = np.zeros(n)
    losses = {"l_s": float(np.mean(bce(y_s, y))), "l_d": 0.0, "l_sa": 0.0}
    if mode is not DistillMode.NO_DISTILL:
        has = np.isfinite(y_f)
        yf = np.where(has, y_f, 0.5)
        if mode is DistillMode.VANILLA_KD:
            d_s = d_s + has * bce_grad(y_s, yf)
            losses["l_d"] = float(np.sum(has * bce(y_s, yf)) / n)
        else:
            t = scale_target(yf, cfg.label_scale)
            d_d = cfg.loss_weight * has * bce_grad(y_d, t)
            losses["l_d"] = float(np.sum(has * bce(y_d, t)) / n)
            if mode is DistillMode.AH_PLUS_SA and y_sa is not None:
                ys = np.where(has, y_sa, 0.5)
                d_a = has * bce_grad(y_a, ys)
                losses["l_sa"] = float(np.sum(has * bce(y_a, ys)) / n)
    return (d_s / n, d_d / n, d_a / n), losses


def composite_objective(vm: VMArch, features, y, y_f, y_sa, mode, cfg: AHConfig):
    """Scalar objective split as ``(serving_part, distill_part)``.

    The backbone gradient of a training step equals the gradient of
    ``serving_part + beta * distill_part``; head parameters see the unscaled
    sum. Used as the finite-difference reference for :func:`backward`.
    """
    mode = DistillMode.parse(mode)
    X, yv, yf = _as_batch(features, y, y_f)
    fwd = forward(vm, X)
    _, losses = head_dlogits(fwd, yv, yf, y_sa, mode, cfg)
    if mode is DistillMode.VANILLA_KD:
        return losses["l_s"] + losses["l_d"], 0.0
    return losses["l_s"], cfg.loss_weight * losses["l_d"] + losses["l_sa"]


def vm_train_step(
    vm: VMArch,
    sa: StudentAdapter | None,
    features,
    y,
    y_f,
    mode,
    cfg: AHConfig,
    lr: float,
    sa_lr: float | None = None,
    sa_warmup: int = 100,
):
    """One iteration of VM training; returns ``(vm, sa, report)``.

    For ``AH_plus_SA`` the order is: update the adapter on the ground truth,
    freeze its fresh output as a target, then take one VM step on the AH loss
    plus the adapter-target loss. Adapter targets are only used once the
    adapter has seen ``sa_warmup`` examples.
    """
    mode = DistillMode.parse(mode)
    X, yv, yf = _as_batch(features, y, y_f)
    if mode is not DistillMode.NO_DISTILL and yf is None:
        raise MissingSupervision(f"mode {mode.value} needs teacher pseudo-labels")
    if vm.grad_scale != cfg.grad_scale:
        vm = VMArch(*vm.parts(), grad_scale=cfg.grad_scale)
    report = TrainStepReport()

    y_sa = None
    if mode is DistillMode.AH_PLUS_SA:
        if sa is None:
            raise ValueError("AH_plus_SA needs a Student Adapter")
        has = np.isfinite(yf)
        if has.any():
            sa, fresh = sa_train_step(sa, yf[has], yv[has], lr if sa_lr is None else sa_lr)
            report.l_sta = float(np.mean(bce(sa_logit(sa.mlp, yf[has]), yv[has])))
            report.updated["student_adapter"] = True
            if sa.seen >= sa_warmup:
                y_sa = np.full(len(yv), np.nan)
                y_sa[has] = fresh
                y_sa.flags.writeable = False

    fwd = forward(vm, X)
    dlogits, losses = head_dlogits(fwd, yv, yf, y_sa, mode, cfg)
    grads = backward(vm, fwd, dlogits)
    vm = sgd_step(vm, grads, lr)
    report.l_s, report.l_d, report.l_sa = losses["l_s"], losses["l_d"], losses["l_sa"]
    for name, g in zip(("backbone", "serving_head", "ah_head", "sa_head"), grads.parts()):
        norm = float(np.sqrt(sum(np.sum(a * a) for a in g.arrays())))
        report.grad_norms[name] = norm
        report.updated[name] = norm > 0.0
    return vm, sa, report


def fm_train_step(fm: Mlp, features, y, lr: float) -> tuple[Mlp, float]:
    """One step of teacher training on ground-truth labels; returns ``(fm, loss)``."""
    X, yv, _ = _as_batch(features, y, None)
    out, cache = mlp_forward(fm, X)
    z = out[:, 0]
    g = bce_grad(z, yv) / len(yv)
    grads, _ = mlp_backward(fm, cache, g[:, None])
    return sgd_step(fm, MlpGrads(grads), lr), float(np.mean(bce(z, yv)))
