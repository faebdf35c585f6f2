"""Loss computations: per-task losses, the attention-weighted multi-task
sum, KL transfer losses from the shared stream to each modality stream,
and the combined training objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .exceptions import ConfigError, ShapeError, StateError

MODALITY_STREAMS = ("text", "audio", "visual")
ALL_STREAMS = ("shared", "text", "audio", "visual")


@dataclass(frozen=True)
class TaskDescriptor:
    id: str
    kind: str  # "regression" | "classification"
    num_classes: int | None = None
    loss_fn: str = "mse"  # "mse" | "cross_entropy"

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.kind == "classification" and (self.num_classes is None or self.num_classes < 2):
            raise ConfigError("classification tasks need num_classes >= 2")
        if self.kind == "regression" and self.loss_fn != "mse":
            raise ConfigError("regression tasks use mse")
        if self.kind == "classification" and self.loss_fn != "cross_entropy":
            raise ConfigError("classification tasks use cross_entropy")

    @property
    def output_dim(self) -> int:
        return 1 if self.kind == "regression" else int(self.num_classes)


DEFAULT_TASKS = (
    TaskDescriptor("sentiment", "regression", loss_fn="mse"),
    TaskDescriptor("class7", "classification", 7, "cross_entropy"),
    TaskDescriptor("class2", "classification", 2, "cross_entropy"),
    TaskDescriptor("emotion", "classification", 6, "cross_entropy"),
)


@dataclass(frozen=True)
class LossConfig:
    """Coefficients of the training objective.

    mode "fixed": total = sum_k lambda_k * L_k + gamma * (KL_text + KL_audio + KL_visual)
    mode "adaptive": total = sum_k w_k * L_k + beta * L_KT, with w from the
    task-attention scorer.
    """

    lambdas: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    gamma: float = 0.5
    beta: float = 0.5
    kl_epsilon: float = 1e-8
    kl_temperature: float = 1.0
    mode: str = "fixed"
    active_tasks: tuple[str, ...] | None = None  # None = all tasks active

    def __post_init__(self):
        if any(l < 0 for l in self.lambdas) or self.gamma < 0 or self.beta < 0:
            raise ConfigError("lambdas, gamma and beta must be >= 0")
        if not any(l > 0 for l in self.lambdas):
            raise ConfigError("at least one lambda must be positive")
        if not (0.0 < self.kl_epsilon <= 1e-3):
            raise ConfigError("kl_epsilon must lie in (0, 1e-3]")
        if self.kl_temperature <= 0:
            raise ConfigError("kl_temperature must be positive")
        if self.mode not in ("fixed", "adaptive"):
            raise ConfigError(f"unknown loss mode {self.mode!r}")

    def is_active(self, task_id: str) -> bool:
        return self.active_tasks is None or task_id in self.active_tasks


@dataclass
class LossReport:
    """All loss components of one batch (or one split)."""

    task_losses: dict[str, float]
    task_weights: dict[str, float]
    mtl_loss: float
    kl_text: float
    kl_audio: float
    kl_visual: float
    transfer_loss: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def task_loss(desc: TaskDescriptor, prediction, label, eps: float = 1e-8) -> float:
    """Single-sample loss: squared error, or -log p[label] with p clamped
    to >= eps."""
    if desc.kind == "regression":
        return float((float(prediction) - float(label)) ** 2)
    p = np.asarray(prediction, dtype=np.float64)
    if p.shape != (desc.num_classes,):
        raise ShapeError(f"prediction shape {p.shape} != ({desc.num_classes},)")
    label = int(label)
    if not 0 <= label < desc.num_classes:
        raise ValueError(f"label {label} out of range for {desc.num_classes} classes")
    return float(-np.log(max(p[label], eps)))


def mtl_loss(losses: np.ndarray, weights: np.ndarray) -> float:
    """Attention-weighted sum of per-task losses; weights must sum to 1."""
    losses = np.asarray(losses, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if losses.shape != weights.shape:
        raise ShapeError("losses and weights must have equal length")
    if abs(weights.sum() - 1.0) > 1e-6:
        raise ValueError(f"weights sum to {weights.sum()}, expected 1")
    return float(np.dot(weights, losses))


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = 1e-8) -> float:
    """KL(p || q) with both distributions clamped to >= eps and renormalized,
    so a zero in q never produces inf/NaN."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError("p and q must have the same length")
    for name, d in (("p", p), ("q", q)):
        if abs(d.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} sums to {d.sum()}, expected 1 +- 1e-6")
    pc = np.maximum(p, eps)
    pc = pc / pc.sum()
    qc = np.maximum(q, eps)
    qc = qc / qc.sum()
    return float(np.sum(pc * (np.log(pc) - np.log(qc))))


def transfer_loss(stream_probs: dict[str, np.ndarray], eps: float = 1e-8):
    """Per-modality KL from the shared-stream distribution to each modality
    distribution, plus their sum.

    The shared distribution is the (detached) target; gradients never flow
    into it from these terms.

    Returns (kl_text, kl_audio, kl_visual, total).
    """
    for stream in ALL_STREAMS:
        if stream not in stream_probs:
            raise StateError(f"missing stream distribution {stream!r}")
    p_shared = stream_probs["shared"]
    kls = tuple(kl_divergence(p_shared, stream_probs[m], eps) for m in MODALITY_STREAMS)
    return kls[0], kls[1], kls[2], float(sum(kls))


def total_loss(
    task_losses: dict[str, float],
    task_weights: dict[str, float],
    kl_terms: tuple[float, float, float],
    cfg: LossConfig,
    task_order: tuple[str, ...],
) -> float:
    """Combine task losses and KL transfer terms per cfg.mode. Inactive
    tasks contribute nothing."""
    if len(cfg.lambdas) != len(task_order):
        raise ConfigError(
            f"{len(cfg.lambdas)} lambdas for {len(task_order)} tasks"
        )
    kl_sum = float(sum(kl_terms))
    if cfg.mode == "fixed":
        task_part = sum(
            lam * task_losses[tid]
            for lam, tid in zip(cfg.lambdas, task_order)
            if cfg.is_active(tid)
        )
        return float(task_part + cfg.gamma * kl_sum)
    task_part = sum(
        task_weights[tid] * task_losses[tid] for tid in task_order if cfg.is_active(tid)
    )
    return float(task_part + cfg.beta * kl_sum)


def build_report(
    task_losses: dict[str, float],
    task_weights: dict[str, float],
    kl_terms: tuple[float, float, float],
    cfg: LossConfig,
    task_order: tuple[str, ...],
) -> LossReport:
    active = [tid for tid in task_order if cfg.is_active(tid)]
    losses = np.array([task_losses[tid] for tid in active])
    weights = np.array([task_weights[tid] for tid in active])
    mtl = mtl_loss(losses, weights)
    total = total_loss(task_losses, task_weights, kl_terms, cfg, task_order)
    return LossReport(
        task_losses=dict(task_losses),
        task_weights=dict(task_weights),
        mtl_loss=mtl,
        kl_text=kl_terms[0],
        kl_audio=kl_terms[1],
        kl_visual=kl_terms[2],
        transfer_loss=float(sum(kl_terms)),
        total=total,
    )
