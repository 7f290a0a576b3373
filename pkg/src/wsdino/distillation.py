"""Student/teacher distributions, the weak-label distillation loss, EMA and schedules."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .errors import NumericalError, ParameterError, StructureError


def _check_temperature(tau):
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")


def student_distribution(logits, tau_s=0.1):
    _check_temperature(tau_s)
    return F.softmax(logits / tau_s, dim=-1)


def student_log_distribution(logits, tau_s=0.1):
    _check_temperature(tau_s)
    return F.log_softmax(logits / tau_s, dim=-1)


def teacher_distribution(logits, center, tau_t=0.04):
    _check_temperature(tau_t)
    return F.softmax((logits - center) / tau_t, dim=-1)


def view_pairs(n_teacher, n_student):
    """(teacher view, student view) index pairs. Teacher view ``t`` is student view ``t``."""
    return [(t, s) for t in range(n_teacher) for s in range(n_student) if s != t]


class PairTrace:
    """Counts cross-entropy terms evaluated by :func:`wsdino_loss`."""

    def __init__(self):
        self.n_terms = 0
        self.pairs = []

    def __call__(self, t, s):
        self.n_terms += 1
        self.pairs.append((t, s))


def wsdino_loss(teacher_probs, student_log_probs, trace=None):
    """Sum of H(P_t(x), P_s(x')) over teacher views x and student views x' != x.

    ``teacher_probs`` and ``student_log_probs`` are sequences of ``(B, K)`` tensors (or
    ``(K,)`` vectors); the global views come first in the student list.  Returns the
    per-sample loss averaged over the batch.  Teacher inputs are detached.
    """
    n_t, n_s = len(teacher_probs), len(student_log_probs)
    if n_t == 0 or n_s <= n_t - 1 or n_s < n_t:
        raise StructureError(f"need the {n_t} teacher views among the {n_s} student views")
    shapes = {tuple(p.shape) for p in teacher_probs} | {tuple(q.shape) for q in student_log_probs}
    if len(shapes) != 1:
        raise StructureError(f"mismatched view output shapes {sorted(shapes)}")
    total = 0.0
    for t, s in view_pairs(n_t, n_s):
        if trace is not None:
            trace(t, s)
        total = total + torch.sum(-teacher_probs[t].detach() * student_log_probs[s], dim=-1)
    return total.mean()


def ema_update(teacher, student, momentum):
    """theta_t <- momentum * theta_t + (1 - momentum) * theta_s, in place."""
    t_params = list(teacher.parameters())
    s_params = list(student.parameters())
    if len(t_params) != len(s_params) or any(a.shape != b.shape for a, b in zip(t_params, s_params)):
        raise StructureError("student and teacher parameter shapes differ")
    with torch.no_grad():
        for pt, ps in zip(t_params, s_params):
            pt.mul_(momentum).add_(ps.detach(), alpha=1.0 - momentum)
    return teacher


def center_update(center, teacher_logits, momentum=0.9):
    if not 0 <= momentum < 1:
        raise ParameterError(f"center momentum must be in [0, 1), got {momentum}")
    if teacher_logits.shape[0] == 0:
        raise StructureError("empty batch in center update")
    with torch.no_grad():
        return center * momentum + (1.0 - momentum) * teacher_logits.mean(dim=0, keepdim=True)


@dataclass(frozen=True)
class ScheduleSpec:
    total_epochs: int = 400
    warmup_epochs: int = 10
    lr_start: float = 0.0
    lr_peak: float = 4e-6
    lr_final: float = 3e-6
    tau_t_start: float = 0.04
    tau_t: float = 0.04
    tau_s: float = 0.1
    momentum: float = 0.99
    center_momentum: float = 0.9
    clip_grad: float = 0.0  # 0 disables
    freeze_last_layer: int = 1

    def to_dict(self):
        return asdict(self)


SCHEDULE_NAMES = ("lr", "tau_t", "tau_s", "momentum")


def _lerp(a, b, w):
    # exact at w = 0 and w = 1
    return a * (1.0 - w) + b * w


def schedule_value(spec: ScheduleSpec, name, epoch, step=0, steps_per_epoch=1):
    """Value of a schedule at fractional epoch ``epoch + step / steps_per_epoch``.

    ``lr`` warms up linearly then follows a half cosine from peak to final at
    ``total_epochs``; ``tau_t`` warms up linearly and is then held constant.
    """
    if name not in SCHEDULE_NAMES:
        raise ParameterError(f"unknown schedule {name!r}")
    e = epoch + step / steps_per_epoch
    if not 0 <= e <= spec.total_epochs:
        raise ParameterError(f"epoch {e} outside [0, {spec.total_epochs}]")
    warm = spec.warmup_epochs
    if name == "lr":
        if e < warm:
            return _lerp(spec.lr_start, spec.lr_peak, e / warm)
        span = spec.total_epochs - warm
        progress = (e - warm) / span if span > 0 else 1.0
        w = 0.5 * (1.0 + math.cos(math.pi * progress))
        return _lerp(spec.lr_final, spec.lr_peak, w)
    if name == "tau_t":
        if e < warm:
            return _lerp(spec.tau_t_start, spec.tau_t, e / warm)
        return spec.tau_t
    if name == "tau_s":
        return spec.tau_s
    return spec.momentum


@dataclass
class TrainState:
    student: torch.nn.Module
    teacher: torch.nn.Module
    center: torch.Tensor
    schedule: ScheduleSpec
    optimizer: torch.optim.Optimizer = None
    epoch: int = 0
    step: int = 0
    global_step: int = 0
    use_centering: bool = True
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, model, schedule: ScheduleSpec, use_centering=True):
        student = model
        teacher = copy.deepcopy(model)
        for p in teacher.parameters():
            p.requires_grad_(False)
        center = torch.zeros(1, model.cfg.out_dim)
        optimizer = make_optimizer(student, schedule.lr_peak)
        return cls(student, teacher, center, schedule, optimizer, use_centering=use_centering)


def clip_gradients(model, clip):
    """Rescale each parameter's gradient to norm at most ``clip``."""
    for p in model.parameters():
        if p.grad is not None:
            norm = p.grad.norm(2)
            factor = clip / (norm + 1e-6)
            if factor < 1:
                p.grad.mul_(factor)


def make_optimizer(model, lr):
    return torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)


def _forward_views(state: TrainState, views, n_global, tau_t, tau_s):
    batch = views[0].shape[0]
    with torch.no_grad():
        teacher_logits = state.teacher(views[:n_global])
    center = state.center if state.use_centering else torch.zeros_like(state.center)
    teacher_probs = teacher_distribution(teacher_logits, center, tau_t).chunk(n_global)
    student_logits = state.student(views)
    student_log_probs = student_log_distribution(student_logits, tau_s).split(batch)
    return teacher_logits, student_logits, teacher_probs, student_log_probs


def train_step(state: TrainState, views, steps_per_epoch=1, trace=None):
    """One distillation step on a collated batch (list of per-view ``(B, 1, s, s)`` tensors).

    Updates the student by AdamW, then the teacher by EMA and the center. Returns the loss.
    """
    if not views or views[0].shape[0] == 0:
        raise StructureError("empty batch")
    spec = state.schedule
    lr = schedule_value(spec, "lr", state.epoch, state.step, steps_per_epoch)
    tau_t = schedule_value(spec, "tau_t", state.epoch, state.step, steps_per_epoch)
    tau_s = schedule_value(spec, "tau_s", state.epoch, state.step, steps_per_epoch)
    momentum = schedule_value(spec, "momentum", state.epoch, state.step, steps_per_epoch)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    state.student.train()
    teacher_logits, student_logits, tp, slp = _forward_views(state, views, 2, tau_t, tau_s)
    loss = wsdino_loss(tp, slp, trace=trace)
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite loss at epoch {state.epoch} step {state.step}",
            diagnostics={
                "epoch": state.epoch,
                "step": state.step,
                "lr": lr,
                "tau_t": tau_t,
                "teacher_logits_absmax": float(teacher_logits.abs().max()),
                "student_logits_finite": bool(torch.isfinite(student_logits).all()),
                "center_absmax": float(state.center.abs().max()),
            },
        )
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if spec.clip_grad:
        clip_gradients(state.student, spec.clip_grad)
    if state.epoch < spec.freeze_last_layer:
        for name, p in state.student.named_parameters():
            if name.startswith("head.last_"):
                p.grad = None
    state.optimizer.step()
    ema_update(state.teacher, state.student, momentum)
    state.center = center_update(state.center, teacher_logits, spec.center_momentum)
    value = float(loss.detach())
    state.history.append(dict(epoch=state.epoch, step=state.step, loss=value, lr=lr, tau_t=tau_t))
    state.step += 1
    state.global_step += 1
    return state, value
