"""Flow distillation: regress a guidance-strength-conditioned student onto the
average field of a two-step guided teacher rollout.

Phase 1 freezes the pretrained teacher; phase 2 swaps the teacher for an
exponential moving average of the student, refreshed after every update. The
student inherits the teacher's parameters, with the new guidance-strength
embedding zeroed so its initial predictions reproduce the teacher's.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .checkpoint import Checkpoint
from .configuration import ConfigError
from .diffcore import NumericalError, Tensor
from .flowmatch import (
    LengthBucketBatcher,
    TrainingBatch,
    TrainingConfig,
    build_text_condition,
    cfg_combine,
    lr_at,
    make_batch,
    masked_mse,
    sample_mask,
)
from .model import ModelConfig, TTSModel

PHASE_FIXED_TEACHER = "fixed_teacher"
PHASE_EMA_TEACHER = "ema_teacher"


@dataclass
class DistillConfig:
    dt_max: float = 0.25
    omega_min: float = 0.0
    omega_max: float = 2.0
    ema_beta: float = 0.999
    phase1_steps: int = 1200
    phase2_steps: int = 600
    lr: float = 5e-4
    warmup_steps: int = 50
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.dt_max <= 0.5:
            raise ConfigError("dt_max must be in (0, 0.5]")
        if not 0.0 <= self.omega_min <= self.omega_max:
            raise ConfigError("need 0 <= omega_min <= omega_max")
        if not 0.0 < self.ema_beta < 1.0:
            raise ConfigError("ema_beta must be in (0, 1)")


@dataclass
class TeacherHandle:
    """Frozen parameter set driving the teacher field; never optimized."""

    model: TTSModel
    phase: str  # PHASE_FIXED_TEACHER or PHASE_EMA_TEACHER


@dataclass
class BatchConditions:
    """Batched conditions in (B, T, ...) layout for teacher evaluations."""

    z: np.ndarray            # (B, T, F)
    speech_cond: np.ndarray  # (B, T, D)
    valid: np.ndarray | None = None


def teacher_prediction(teacher: TTSModel, x: np.ndarray, t: np.ndarray,
                       cond: BatchConditions, omega: np.ndarray) -> np.ndarray:
    """Guided teacher field.

    A guidance-conditioned teacher (phase 2's EMA student) folds the strength
    into a single evaluation; a plain teacher runs the two-branch combination,
    with the unconditional branch dropping the text condition. At omega = 0 the
    unconditional branch is skipped entirely.
    """
    with dc.no_grad():
        dtype = x.dtype
        if teacher.cfg_conditioned:
            return teacher.estimate(
                Tensor(x), t.astype(dtype), Tensor(cond.z),
                Tensor(cond.speech_cond), omega.astype(dtype), valid=cond.valid,
            ).data
        v_cond = teacher.estimate(
            Tensor(x), t.astype(dtype), Tensor(cond.z),
            Tensor(cond.speech_cond), None, valid=cond.valid,
        ).data
        if not omega.any():
            return v_cond
        null = np.broadcast_to(
            teacher.null_text_cond.data.astype(dtype), cond.z.shape
        )
        v_uncond = teacher.estimate(
            Tensor(x), t.astype(dtype), Tensor(np.ascontiguousarray(null)),
            Tensor(cond.speech_cond), None, valid=cond.valid,
        ).data
        return cfg_combine(v_cond, v_uncond, omega[:, None, None])


def one_step_solver(x_t: np.ndarray, t: np.ndarray, t_to: np.ndarray,
                    cond: BatchConditions, omega: np.ndarray,
                    teacher: TTSModel) -> np.ndarray:
    """x_t + (t_to - t) * guided teacher field at (x_t, t)."""
    if np.any(t_to < t) or np.any(t < 0) or np.any(t_to > 1):
        raise ValueError("one_step_solver: need 0 <= t <= t_to <= 1")
    v = teacher_prediction(teacher, x_t, t, cond, omega)
    return x_t + (t_to - t)[:, None, None] * v


def teacher_two_step(x_t: np.ndarray, t: np.ndarray, cond: BatchConditions,
                     omega: np.ndarray, rng: np.random.Generator,
                     cfg: DistillConfig, teacher: TTSModel,
                     return_internals: bool = False):
    """Two guided teacher steps with independent uniform step sizes, both
    clamped at t = 1; destination times are resampled in the measure-zero
    event that no progress was made."""
    b = t.shape[0]
    for _ in range(100):
        s1 = rng.uniform(0.0, cfg.dt_max, size=b)
        s2 = rng.uniform(0.0, cfg.dt_max, size=b)
        t_mid = np.minimum(t + s1, 1.0)
        t_dest = np.minimum(t_mid + s2, 1.0)
        if np.all(t_dest > t):
            break
    else:
        raise NumericalError("teacher_two_step: could not sample t_dest > t")
    x_mid = one_step_solver(x_t, t, t_mid, cond, omega, teacher)
    x_dest = one_step_solver(x_mid, t_mid, t_dest, cond, omega, teacher)
    if return_internals:
        return x_dest, t_dest, {"t_mid": t_mid, "x_mid": x_mid}
    return x_dest, t_dest


def teacher_vector_field(x_t: np.ndarray, x_dest: np.ndarray, t: np.ndarray,
                         t_dest: np.ndarray) -> np.ndarray:
    """Average field over the rollout: (x_dest - x_t) / (t_dest - t)."""
    dt = t_dest - t
    if np.any(dt <= 0):
        raise ValueError("teacher_vector_field: t_dest must exceed t")
    return (x_dest - x_t) / dt[:, None, None]


def flow_distill_loss(batch: TrainingBatch, student: TTSModel,
                      teacher: TTSModel, rng: np.random.Generator,
                      cfg: DistillConfig,
                      train_cfg: TrainingConfig) -> Tensor:
    """Masked MSE between the student's strength-conditioned prediction and
    the two-step teacher field. Teacher evaluations carry no gradients."""
    if not student.cfg_conditioned:
        raise ConfigError("flow_distill_loss: student must be cfg_conditioned")
    dtype = batch.features.dtype
    t = rng.random(batch.features.shape[0])
    x0 = rng.standard_normal(batch.features.shape).astype(dtype)
    mask = np.zeros(batch.features.shape[:2], dtype=dtype)
    for i, t_i in enumerate(batch.lengths):
        spec = sample_mask(t_i, rng, train_cfg)
        mask[i, spec.start : spec.end] = 1.0
    omega = rng.uniform(cfg.omega_min, cfg.omega_max, size=t.shape[0])

    x1 = batch.features
    t3 = t.astype(dtype)[:, None, None]
    m3 = mask[:, :, None]
    x_t = (1.0 - t3) * x0 + t3 * x1
    speech_cond = (1.0 - m3) * x1

    with dc.no_grad():
        z_teacher = build_text_condition(teacher, batch)
        cond = BatchConditions(z_teacher.data, speech_cond, batch.frame_valid)
        x_dest, t_dest = teacher_two_step(x_t, t, cond, omega, rng, cfg, teacher)
        v_teacher = teacher_vector_field(x_t, x_dest, t, t_dest).astype(dtype)

    z_student = build_text_condition(student, batch)
    v_student = student.estimate(Tensor(x_t), t.astype(dtype), z_student,
                                 Tensor(speech_cond), omega.astype(dtype),
                                 valid=batch.frame_valid)
    return masked_mse(v_student, v_teacher, mask)


def ema_update(student_params, ema_params, beta: float) -> None:
    """theta_ema <- (1 - beta) * theta_student + beta * theta_ema, in place."""
    for p_s, p_e in zip(student_params, ema_params):
        if p_s.data.shape != p_e.data.shape:
            raise ValueError(
                f"ema_update: shape mismatch {p_s.data.shape} vs {p_e.data.shape} "
                f"for {p_s.name!r}"
            )
        p_e.data *= beta
        p_e.data += (1.0 - beta) * p_s.data


def make_student_from_teacher(teacher: TTSModel, seed: int = 0) -> TTSModel:
    """Clone the teacher into a guidance-conditioned student whose zeroed
    strength embedding leaves initial predictions identical to the teacher's."""
    if teacher.cfg_conditioned:
        raise ConfigError("teacher is already cfg_conditioned")
    student_cfg = ModelConfig.from_dict(teacher.config.to_dict())
    student_cfg.cfg_conditioned = True
    student = TTSModel(student_cfg, seed=seed)
    student.import_params(teacher.export_params(), allow_missing=True)
    student.vf.omega_embed.zero_()
    return student


@dataclass
class DistillLogEntry:
    phase: str
    step: int
    loss: float
    lr: float


class Distiller:
    """Two-phase distillation driver; owns the student and its optimizer."""

    def __init__(self, teacher: TTSModel, corpus, cfg: DistillConfig,
                 train_cfg: TrainingConfig, student_seed: int = 0):
        cfg.validate()
        self.teacher = teacher
        self.corpus = corpus
        self.cfg = cfg
        self.train_cfg = train_cfg
        self.student = make_student_from_teacher(teacher, seed=student_seed)
        self.optimizer = dc.Adam(list(self.student.parameters()), lr=cfg.lr)
        self.batch_rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(5,)))
        self.loss_rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(6,)))
        self.batcher = iter(LengthBucketBatcher(
            corpus.train_split(), train_cfg.batch_frames, self.batch_rng))
        self.history: list[DistillLogEntry] = []
        self.step = 0

    def _dtype(self):
        return next(self.student.parameters()).data.dtype

    def _run_phase(self, teacher_model: TTSModel, phase: str, steps: int,
                   ema_model: TTSModel | None = None, log_cb=None) -> None:
        schedule_cfg = TrainingConfig(
            lr=self.cfg.lr, warmup_steps=self.cfg.warmup_steps,
            steps=self.cfg.phase1_steps + self.cfg.phase2_steps,
        )
        for _ in range(steps):
            samples = next(self.batcher)
            batch = make_batch(samples, self.corpus.vocab.pad_id, self._dtype())
            self.optimizer.zero_grad()
            loss = flow_distill_loss(batch, self.student, teacher_model,
                                     self.loss_rng, self.cfg, self.train_cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(
                    f"distillation loss is not finite at step {self.step}")
            dc.backward(loss)
            self.optimizer.lr = lr_at(self.step, schedule_cfg)
            self.optimizer.step()
            if ema_model is not None:
                ema_update(list(self.student.parameters()),
                           list(ema_model.parameters()), self.cfg.ema_beta)
            self.step += 1
            entry = DistillLogEntry(phase, self.step, value, self.optimizer.lr)
            self.history.append(entry)
            if log_cb:
                log_cb(entry)

    def run(self, log_cb=None) -> TTSModel:
        handle = TeacherHandle(self.teacher, PHASE_FIXED_TEACHER)
        self._run_phase(handle.model, handle.phase, self.cfg.phase1_steps,
                        log_cb=log_cb)
        if self.cfg.phase2_steps > 0:
            ema_model = TTSModel(
                ModelConfig.from_dict(self.student.config.to_dict()), seed=0)
            ema_model.import_params(self.student.export_params())
            handle = TeacherHandle(ema_model, PHASE_EMA_TEACHER)
            self._run_phase(handle.model, handle.phase, self.cfg.phase2_steps,
                            ema_model=ema_model, log_cb=log_cb)
        return self.student


def run_distillation(teacher_ckpt: Checkpoint, cfg: DistillConfig, corpus,
                     train_cfg: TrainingConfig, log_cb=None) -> Checkpoint:
    """Distill from a teacher checkpoint; emits a guidance-conditioned
    student checkpoint."""
    teacher_cfg = ModelConfig.from_dict(teacher_ckpt.config["model"])
    teacher = TTSModel(teacher_cfg, seed=0)
    teacher.import_params(teacher_ckpt.params)
    distiller = Distiller(teacher, corpus, cfg, train_cfg,
                          student_seed=cfg.seed)
    student = distiller.run(log_cb=log_cb)
    config = dict(teacher_ckpt.config)
    config["model"] = student.config.to_dict()
    config["distill"] = dataclasses.asdict(cfg)
    return Checkpoint(config=config, params=student.export_params(),
                      step=distiller.step)
