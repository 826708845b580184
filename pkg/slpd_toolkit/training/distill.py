"""Teacher-student distillation: projections, the three SLPD losses and their gradients."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import log_softmax, softmax
from scipy.stats import entropy

from ..config import LossWeights, ModelConfig
from ..errors import ConfigurationError, DataError, DimensionMismatchError
from .network import NetworkParams, encode, head_logits, init_mlp, mlp_backward, mlp_forward


@dataclass(frozen=True, eq=False)
class DistillState:
    """Student and EMA teacher networks plus the centering and temperature state.

    ``center`` tracks the teacher logits of region views and
    ``prototype_center`` the head logits of the prototype targets; each branch
    is centered on its own running mean.
    """

    student: NetworkParams
    teacher: NetworkParams
    center: np.ndarray
    tau_student: float
    tau_teacher: float
    ema_momentum: float
    center_momentum: float
    velocity: Optional[NetworkParams] = None
    prototype_head: str = "teacher"
    prototype_center: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.prototype_center is None:
            object.__setattr__(self, "prototype_center", np.zeros_like(self.center))
        for student_array, teacher_array in zip(self.student.arrays(), self.teacher.arrays()):
            if student_array.shape != teacher_array.shape:
                raise DimensionMismatchError("Teacher and student shapes differ")
        if self.center.shape != (self.student.head.out_dim,):
            raise DimensionMismatchError(f"Center must have shape ({self.student.head.out_dim},)")
        if self.prototype_center.shape != self.center.shape:
            raise DimensionMismatchError("Prototype center must have the same shape as the center")
        if not (self.tau_student > 0 and 0 < self.tau_teacher <= self.tau_student):
            raise ConfigurationError("Temperatures must satisfy 0 < tau_teacher <= tau_student")
        if not (0.0 <= self.ema_momentum <= 1.0 and 0.0 <= self.center_momentum <= 1.0):
            raise ConfigurationError("Momenta must lie in [0, 1]")
        if self.prototype_head not in ("teacher", "student"):
            raise ConfigurationError(f"Unknown prototype head: {self.prototype_head}")

    @property
    def out_dim(self) -> int:
        return self.student.head.out_dim

    @property
    def embed_dim(self) -> int:
        return self.student.encoder.out_dim


@dataclass(frozen=True)
class LossComponents:
    """Batch means of the three losses (0.0 when a term had no eligible regions)."""

    self_distill: float
    intra: float = 0.0
    inter: float = 0.0


@dataclass(frozen=True, eq=False)
class Minibatch:
    """Two augmented views per region and the optional prototype targets.

    ``intra_prototypes`` is ``(B, D)`` and ``inter_prototypes`` ``(B, K, D)``;
    the masks mark which rows carry a target (skip-listed slides do not).
    """

    view1: np.ndarray
    view2: np.ndarray
    intra_prototypes: Optional[np.ndarray] = None
    intra_mask: Optional[np.ndarray] = None
    inter_prototypes: Optional[np.ndarray] = None
    inter_mask: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return int(self.view1.shape[0])


@dataclass(frozen=True, eq=False)
class BatchEvaluation:
    """Loss components, student gradients and teacher statistics of one minibatch."""

    components: LossComponents
    total: float
    gradients: Optional[NetworkParams]
    teacher_logits: np.ndarray
    teacher_entropy: float
    prototype_logits: Optional[np.ndarray] = None


def init_state(model: ModelConfig, d_in: int, rng: np.random.Generator) -> DistillState:
    """Random student, teacher = copy of student, zero center and momentum buffer."""

    encoder = init_mlp((d_in, *model.hidden, model.embed_dim), model.activation, rng)
    head = init_mlp((model.embed_dim, model.head_hidden, model.out_dim), model.activation, rng)
    student = NetworkParams(encoder=encoder, head=head)
    return DistillState(
        student=student,
        teacher=student.copy(),
        center=np.zeros(model.out_dim),
        tau_student=model.tau_student,
        tau_teacher=model.tau_teacher,
        ema_momentum=model.ema_momentum,
        center_momentum=model.center_momentum,
        velocity=student.map(np.zeros_like),
        prototype_head=model.prototype_head,
    )


# Probability heads -----------------------------------------------------------
def project_student(state: DistillState, z: np.ndarray) -> np.ndarray:
    """softmax(head_s(z) / tau_student)."""

    return softmax(head_logits(state.student.head, z) / state.tau_student, axis=-1)


def project_teacher(state: DistillState, z: np.ndarray) -> np.ndarray:
    """softmax((head_t(z) - center) / tau_teacher)."""

    return _teacher_probabilities(state, head_logits(state.teacher.head, z))


def prototype_logits(state: DistillState, prototypes: np.ndarray) -> np.ndarray:
    """Raw head logits of prototype vectors, before centering."""

    head = state.teacher.head if state.prototype_head == "teacher" else state.student.head
    return head_logits(head, prototypes)


def project_prototypes(state: DistillState, prototypes: np.ndarray) -> np.ndarray:
    """softmax((head(c) - prototype_center) / tau_teacher): the sharpened target of a prototype."""

    return _prototype_probabilities(state, prototype_logits(state, prototypes))


def cross_entropy(p: np.ndarray, q: np.ndarray) -> float:
    """H(p, q) = -sum_i p_i log q_i."""

    return float(-np.sum(np.asarray(p) * np.log(np.asarray(q))))


# Losses ----------------------------------------------------------------------
def loss_self(state: DistillState, x_view1: np.ndarray, x_view2: np.ndarray) -> float:
    """Symmetrised self-distillation between two views of one region."""

    teacher1 = project_teacher(state, encode(state.teacher.encoder, x_view1))
    teacher2 = project_teacher(state, encode(state.teacher.encoder, x_view2))
    student1 = project_student(state, encode(state.student.encoder, x_view1))
    student2 = project_student(state, encode(state.student.encoder, x_view2))
    return 0.5 * (cross_entropy(teacher1, student2) + cross_entropy(teacher2, student1))


def loss_intra(state: DistillState, prototype: np.ndarray, x_student_views: np.ndarray) -> float:
    """H(g_t(c), g_s(z)) averaged over the student's views (one vector or a stack)."""

    target = project_prototypes(state, np.asarray(prototype, dtype=np.float64))
    views = np.atleast_2d(np.asarray(x_student_views, dtype=np.float64))
    students = project_student(state, encode(state.student.encoder, views))
    return float(np.mean([cross_entropy(target, student) for student in students]))


def loss_inter(state: DistillState, matched_prototypes: np.ndarray, x_student_views: np.ndarray) -> float:
    """Mean over the K matched cross-slide prototypes of the intra-style term."""

    prototypes = np.asarray(matched_prototypes, dtype=np.float64)
    if prototypes.size == 0:
        raise DataError("loss_inter needs at least one matched prototype")
    prototypes = np.atleast_2d(prototypes)
    return float(np.mean([loss_intra(state, prototype, x_student_views) for prototype in prototypes]))


def loss_total(weights: LossWeights, components: LossComponents) -> float:
    """L_self + alpha1 * L_intra + alpha2 * L_inter."""

    return components.self_distill + weights.alpha1 * components.intra + weights.alpha2 * components.inter


# Batched losses with analytic gradients ---------------------------------------
def loss_and_gradients(
    state: DistillState,
    weights: LossWeights,
    batch: Minibatch,
    *,
    compute_gradients: bool = True,
) -> BatchEvaluation:
    """Evaluate every active loss on ``batch`` and backpropagate through the student.

    Teacher outputs and prototype targets are constants: teacher parameters,
    the center and the prototypes receive no gradient. A term whose weight is
    zero is still reported but contributes nothing to the gradient.
    """

    if batch.size == 0:
        raise DataError("Minibatch is empty")
    views = (np.asarray(batch.view1, dtype=np.float64), np.asarray(batch.view2, dtype=np.float64))
    size = batch.size
    out_dim = state.out_dim

    teacher_logits = [head_logits(state.teacher.head, encode(state.teacher.encoder, view)) for view in views]
    teacher_probs = [_teacher_probabilities(state, logits) for logits in teacher_logits]

    forwards = []
    log_probs = []
    for view in views:
        embedding, encoder_cache = mlp_forward(state.student.encoder, view)
        logits, head_cache = mlp_forward(state.student.head, embedding)
        forwards.append((encoder_cache, head_cache))
        log_probs.append(log_softmax(logits / state.tau_student, axis=1))

    # Per-view accumulation of sum(w) and sum(w * target) for the logit gradient.
    coefficients = [np.zeros(size), np.zeros(size)]
    targets = [np.zeros((size, out_dim)), np.zeros((size, out_dim))]

    def _accumulate(rows: np.ndarray, weight: float, probs: np.ndarray, view_indices: tuple[int, ...]) -> None:
        for view_index in view_indices:
            coefficients[view_index][rows] += weight
            targets[view_index][rows] += weight * probs

    every_row = np.arange(size)
    self_terms = 0.5 * (_row_cross_entropy(teacher_probs[0], log_probs[1]) + _row_cross_entropy(teacher_probs[1], log_probs[0]))
    self_value = float(np.mean(self_terms))
    _accumulate(every_row, 0.5 / size, teacher_probs[1], (0,))
    _accumulate(every_row, 0.5 / size, teacher_probs[0], (1,))

    used_logits: list[np.ndarray] = []
    intra_value = 0.0
    rows = _active_rows(batch.intra_prototypes, batch.intra_mask, size)
    if rows.size:
        logits = prototype_logits(state, batch.intra_prototypes[rows])
        used_logits.append(logits)
        probs = _prototype_probabilities(state, logits)
        intra_value = _two_view_mean(probs, log_probs, rows)
        if weights.alpha1 != 0.0:
            _accumulate(rows, weights.alpha1 * 0.5 / rows.size, probs, (0, 1))

    inter_value = 0.0
    rows = _active_rows(batch.inter_prototypes, batch.inter_mask, size)
    if rows.size:
        matched = batch.inter_prototypes[rows]
        count, K, dim = matched.shape
        logits = prototype_logits(state, matched.reshape(count * K, dim))
        used_logits.append(logits)
        probs = _prototype_probabilities(state, logits).reshape(count, K, out_dim).mean(axis=1)
        inter_value = _two_view_mean(probs, log_probs, rows)
        if weights.alpha2 != 0.0:
            _accumulate(rows, weights.alpha2 * 0.5 / rows.size, probs, (0, 1))

    components = LossComponents(self_distill=self_value, intra=intra_value, inter=inter_value)

    gradients: Optional[NetworkParams] = None
    if compute_gradients:
        view_grads = []
        for view_index, (encoder_cache, head_cache) in enumerate(forwards):
            q = np.exp(log_probs[view_index])
            grad_logits = (coefficients[view_index][:, None] * q - targets[view_index]) / state.tau_student
            head_grad, grad_embedding = mlp_backward(state.student.head, head_cache, grad_logits)
            encoder_grad, _ = mlp_backward(state.student.encoder, encoder_cache, grad_embedding)
            view_grads.append(NetworkParams(encoder=encoder_grad, head=head_grad))
        gradients = view_grads[0].map(np.add, view_grads[1])

    all_teacher_probs = np.concatenate(teacher_probs, axis=0)
    return BatchEvaluation(
        components=components,
        total=loss_total(weights, components),
        gradients=gradients,
        teacher_logits=np.concatenate(teacher_logits, axis=0),
        teacher_entropy=float(np.mean(entropy(all_teacher_probs, axis=1))),
        prototype_logits=np.concatenate(used_logits, axis=0) if used_logits else None,
    )


def gradients(state: DistillState, weights: LossWeights, batch: Minibatch) -> NetworkParams:
    """Exact gradients of the total loss w.r.t. every student parameter."""

    evaluation = loss_and_gradients(state, weights, batch)
    assert evaluation.gradients is not None
    return evaluation.gradients


# Parameter updates -----------------------------------------------------------
def sgd_step(
    params: NetworkParams,
    grads: NetworkParams,
    lr: float,
    momentum: float,
    velocity: Optional[NetworkParams] = None,
) -> tuple[NetworkParams, NetworkParams]:
    """Classical momentum: ``v <- momentum * v + g``; ``p <- p - lr * v``."""

    if lr < 0:
        raise ConfigurationError("lr must be non-negative")
    if not 0.0 <= momentum < 1.0:
        raise ConfigurationError("momentum must lie in [0, 1)")
    for param, grad in zip(params.arrays(), grads.arrays()):
        if param.shape != grad.shape:
            raise DimensionMismatchError(f"Gradient shape {grad.shape} does not match parameter {param.shape}")
    if velocity is None:
        velocity = params.map(np.zeros_like)
    new_velocity = velocity.map(lambda v, g: momentum * v + g, grads)
    return params.map(lambda p, v: p - lr * v, new_velocity), new_velocity


def ema_update(state: DistillState, momentum: float) -> DistillState:
    """teacher <- m * teacher + (1 - m) * student, for every parameter."""

    if not 0.0 <= momentum <= 1.0:
        raise ConfigurationError("EMA momentum must lie in [0, 1]")
    teacher = state.teacher.map(lambda t, s: momentum * t + (1.0 - momentum) * s, state.student)
    return replace(state, teacher=teacher)


def update_center(state: DistillState, batch_teacher_logits: np.ndarray) -> DistillState:
    """center <- c_m * center + (1 - c_m) * mean(batch logits)."""

    logits = np.atleast_2d(np.asarray(batch_teacher_logits, dtype=np.float64))
    if logits.shape[0] == 0:
        raise DataError("update_center needs a non-empty batch")
    momentum = state.center_momentum
    return replace(state, center=momentum * state.center + (1.0 - momentum) * logits.mean(axis=0))


def update_prototype_center(state: DistillState, batch_prototype_logits: np.ndarray) -> DistillState:
    """prototype_center <- c_m * prototype_center + (1 - c_m) * mean(batch prototype logits)."""

    logits = np.atleast_2d(np.asarray(batch_prototype_logits, dtype=np.float64))
    if logits.shape[0] == 0:
        raise DataError("update_prototype_center needs a non-empty batch")
    momentum = state.center_momentum
    return replace(state, prototype_center=momentum * state.prototype_center + (1.0 - momentum) * logits.mean(axis=0))


# Internal helpers ------------------------------------------------------------
def _teacher_probabilities(state: DistillState, logits: np.ndarray) -> np.ndarray:
    return softmax((logits - state.center) / state.tau_teacher, axis=-1)


def _prototype_probabilities(state: DistillState, logits: np.ndarray) -> np.ndarray:
    return softmax((logits - state.prototype_center) / state.tau_teacher, axis=-1)


def _row_cross_entropy(p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    return -np.sum(p * log_q, axis=1)


def _two_view_mean(probs: np.ndarray, log_probs: list[np.ndarray], rows: np.ndarray) -> float:
    terms = 0.5 * (_row_cross_entropy(probs, log_probs[0][rows]) + _row_cross_entropy(probs, log_probs[1][rows]))
    return float(np.mean(terms))


def _active_rows(targets: Optional[np.ndarray], mask: Optional[np.ndarray], size: int) -> np.ndarray:
    if targets is None:
        return np.empty(0, dtype=np.int64)
    if mask is None:
        return np.arange(size)
    return np.flatnonzero(mask)


__all__ = [
    "DistillState",
    "LossComponents",
    "Minibatch",
    "BatchEvaluation",
    "init_state",
    "project_student",
    "project_teacher",
    "prototype_logits",
    "project_prototypes",
    "cross_entropy",
    "loss_self",
    "loss_intra",
    "loss_inter",
    "loss_total",
    "loss_and_gradients",
    "gradients",
    "sgd_step",
    "ema_update",
    "update_center",
    "update_prototype_center",
]
