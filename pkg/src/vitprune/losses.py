"""Training objectives: CNN hard distillation, full-model distillation, and the
ablation variants built from them.

KL terms use the teacher distribution as the target,
``KL(teacher || student) = sum p_t * (log p_t - log p_s)``, and carry no
``tau**2`` rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODES = ("proposed", "cnn_only", "full_plus_ce", "ce_only")
KL_CONVENTION = "KL(teacher || student)"


@dataclass
class LossConfig:
    mode: str = "proposed"
    alpha: float = 1e5
    tau: float = 20.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"loss mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")

    @property
    def needs_full_teacher(self) -> bool:
        return self.mode in ("proposed", "full_plus_ce")

    @property
    def needs_cnn_teacher(self) -> bool:
        return self.mode in ("proposed", "cnn_only")


def loss_cnn(z_c: Tensor, z_d: Tensor, y_true, y_teacher) -> Tensor:
    if y_teacher is None:
        raise ValueError("CNN distillation needs teacher labels")
    return T.cross_entropy(z_c, y_true) + T.cross_entropy(z_d, y_teacher)


def _soft(z, tau: float) -> np.ndarray:
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64) * tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_full(z_c_s: Tensor, z_d_s: Tensor, z_c_t, z_d_t, tau: float) -> Tensor:
    """KL between softmax(tau * z) of student and of the frozen full model, both tokens."""
    if z_c_s.shape[-1] != np.shape(getattr(z_c_t, "data", z_c_t))[-1]:
        raise ValueError("student and teacher logits differ in width")
    dt = z_c_s.dtype
    p_c = Tensor(_soft(z_c_t, tau).astype(dt))
    p_d = Tensor(_soft(z_d_t, tau).astype(dt))
    return (T.kl_div(T.log_softmax(z_c_s * tau), p_c)
            + T.kl_div(T.log_softmax(z_d_s * tau), p_d))


def loss_ce_avg(z_c: Tensor, z_d: Tensor, y_true) -> Tensor:
    return T.cross_entropy((z_c + z_d) * 0.5, y_true)


def loss_total(config: LossConfig, outputs: dict, y_true, y_teacher=None,
               teacher_outputs: dict | None = None) -> Tensor:
    """Objective selected by ``config.mode``.

    ``outputs`` / ``teacher_outputs`` hold ``z_c`` and ``z_d``; the full-model
    teacher logits may be tensors or arrays.
    """
    z_c, z_d = outputs["z_c"], outputs["z_d"]
    if config.needs_full_teacher and teacher_outputs is None:
        raise ValueError(f"mode {config.mode!r} needs full-model teacher logits")
    if config.mode == "proposed":
        lf = loss_full(z_c, z_d, teacher_outputs["z_c"], teacher_outputs["z_d"], config.tau)
        return lf * config.alpha + loss_cnn(z_c, z_d, y_true, y_teacher)
    if config.mode == "cnn_only":
        return loss_cnn(z_c, z_d, y_true, y_teacher)
    if config.mode == "full_plus_ce":
        lf = loss_full(z_c, z_d, teacher_outputs["z_c"], teacher_outputs["z_d"], config.tau)
        return lf + loss_ce_avg(z_c, z_d, y_true)
    return loss_ce_avg(z_c, z_d, y_true)
