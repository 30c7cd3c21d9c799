"""Distillation machinery against closed forms: one-step solver arithmetic,
two-step rollout statistics, the average-field identity, EMA geometric decay,
and the stop-gradient contract on the teacher."""

import numpy as np
import pytest

from zipflow import diffcore as dc
from zipflow.configuration import ConfigError
from zipflow.diffcore import Tensor
from zipflow.distill import (
    BatchConditions,
    DistillConfig,
    Distiller,
    TeacherHandle,
    ema_update,
    flow_distill_loss,
    make_student_from_teacher,
    one_step_solver,
    teacher_prediction,
    teacher_two_step,
    teacher_vector_field,
)
from zipflow.flowmatch import TrainingConfig, cfg_combine, make_batch
from zipflow.model import TTSModel
from zipflow.toyspeech import ToyCorpusConfig, generate_corpus

from tests.test_flowmatch import small_model_config


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(ToyCorpusConfig(seed=6), 48)


@pytest.fixture
def teacher(corpus):
    return TTSModel(small_model_config(corpus.vocab.size,
                                       corpus.config.feature_dim), seed=3)


class ScalarAffineTeacher:
    """v(x, t) = a * x + b, analytically integrable; ignores conditions."""

    cfg_conditioned = False

    def __init__(self, a=2.0, b=0.5):
        self.a, self.b = a, b
        self.null_text_cond = dc.Parameter(np.zeros(4), name="null")

    def estimate(self, x_t, t, z, speech_cond, omega=None, valid=None):
        return Tensor(self.a * x_t.data + self.b)


def _cond(b, t, f=4, d=3):
    return BatchConditions(np.zeros((b, t, f)), np.zeros((b, t, d)))


def test_one_step_zero_length_is_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 3))
    t = np.array([0.3, 0.6])
    out = one_step_solver(x, t, t, _cond(2, 5), np.zeros(2), ScalarAffineTeacher())
    np.testing.assert_array_equal(out, x)


def test_one_step_matches_hand_computation():
    # x=1.0, t=0.2 -> 0.5, v = 2*1 + 0.5 = 2.5, x' = 1 + 0.3*2.5 = 1.75
    x = np.full((1, 1, 1), 1.0)
    out = one_step_solver(x, np.array([0.2]), np.array([0.5]), _cond(1, 1),
                          np.zeros(1), ScalarAffineTeacher())
    assert abs(out[0, 0, 0] - 1.75) < 1e-12


def test_one_step_omega_zero_equals_two_evaluation_formula(teacher, corpus):
    rng = np.random.default_rng(1)
    b, t_len = 2, 6
    d, f = corpus.config.feature_dim, teacher.config.text_feat_dim
    x = rng.standard_normal((b, t_len, d)).astype(np.float32)
    cond = BatchConditions(
        rng.standard_normal((b, t_len, f)).astype(np.float32),
        rng.standard_normal((b, t_len, d)).astype(np.float32),
    )
    t = np.array([0.1, 0.4])
    omega = np.zeros(b)
    teacher.reset_eval_count()
    shortcut = teacher_prediction(teacher, x, t, cond, omega)
    assert teacher.eval_count == 1  # single-evaluation shortcut
    # explicit two-evaluation combination with omega = 0
    v_c = teacher.estimate(Tensor(x), t.astype(np.float32), Tensor(cond.z),
                           Tensor(cond.speech_cond), None).data
    null = np.broadcast_to(teacher.null_text_cond.data, cond.z.shape)
    v_u = teacher.estimate(Tensor(x), t.astype(np.float32),
                           Tensor(np.ascontiguousarray(null)),
                           Tensor(cond.speech_cond), None).data
    np.testing.assert_array_equal(shortcut, cfg_combine(v_c, v_u, 0.0))


def test_two_step_degenerate_at_tiny_dt():
    x = np.ones((1, 4, 3))
    t = np.array([0.5])
    cfg = DistillConfig(dt_max=1e-12)
    x_dest, t_dest = teacher_two_step(x, t, _cond(1, 4), np.zeros(1),
                                      np.random.default_rng(0), cfg,
                                      ScalarAffineTeacher())
    np.testing.assert_allclose(x_dest, x, atol=1e-10)
    np.testing.assert_allclose(t_dest, t, atol=1e-10)


def test_two_step_clamps_at_one():
    x = np.ones((4, 3, 2))
    t = np.full(4, 0.95)
    cfg = DistillConfig(dt_max=0.25)
    rng = np.random.default_rng(2)
    for _ in range(20):
        _, t_dest, internals = teacher_two_step(
            x, t, _cond(4, 3), np.zeros(4), rng, cfg, ScalarAffineTeacher(),
            return_internals=True)
        assert np.all(t_dest <= 1.0) and np.all(internals["t_mid"] <= 1.0)
        assert np.all(t_dest > t)


def test_two_step_destination_time_distribution():
    # from t=0, E[t_dest] = E[s1] + E[s2] = dt_max (no clamping active)
    cfg = DistillConfig(dt_max=0.25)
    rng = np.random.default_rng(3)
    n = 100_000
    x = np.zeros((n, 1, 1))
    _, t_dest = teacher_two_step(x, np.zeros(n), _cond(n, 1, f=4, d=1),
                                 np.zeros(n), rng, cfg, ScalarAffineTeacher())
    assert abs(t_dest.mean() - cfg.dt_max) / cfg.dt_max < 0.01


def test_teacher_vector_field_recovers_constant_field():
    v_bar = 1.7
    x_t = np.full((1, 2, 2), 0.3)
    t, t_dest = np.array([0.2]), np.array([0.6])
    x_dest = x_t + v_bar * (t_dest - t)[:, None, None]
    np.testing.assert_allclose(
        teacher_vector_field(x_t, x_dest, t, t_dest), v_bar, rtol=1e-12)


def test_teacher_vector_field_scalar_case():
    # x: 1 -> 2 over t: 0.2 -> 0.6 gives slope 2.5
    out = teacher_vector_field(np.full((1, 1, 1), 1.0), np.full((1, 1, 1), 2.0),
                               np.array([0.2]), np.array([0.6]))
    assert abs(out[0, 0, 0] - 2.5) < 1e-12


def test_teacher_vector_field_rejects_zero_interval():
    with pytest.raises(ValueError):
        teacher_vector_field(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)),
                             np.array([0.5]), np.array([0.5]))


def test_rollout_field_is_weighted_average_of_step_predictions():
    # exact algebraic identity of the two-step construction
    rng = np.random.default_rng(4)
    teacher = ScalarAffineTeacher(a=-1.3, b=0.8)
    x = rng.standard_normal((3, 5, 4))
    t = np.array([0.1, 0.3, 0.55])
    cfg = DistillConfig(dt_max=0.2)
    omega = np.zeros(3)
    cond = _cond(3, 5, d=4)
    x_dest, t_dest, internals = teacher_two_step(
        x, t, cond, omega, np.random.default_rng(9), cfg, teacher,
        return_internals=True)
    t_mid, x_mid = internals["t_mid"], internals["x_mid"]
    v1 = teacher_prediction(teacher, x, t, cond, omega)
    v2 = teacher_prediction(teacher, x_mid, t_mid, cond, omega)
    w1 = (t_mid - t)[:, None, None]
    w2 = (t_dest - t_mid)[:, None, None]
    expected = (w1 * v1 + w2 * v2) / (t_dest - t)[:, None, None]
    np.testing.assert_allclose(
        teacher_vector_field(x, x_dest, t, t_dest), expected, atol=1e-10)


def test_exact_linear_flow_teacher_field_matches_pointwise():
    # for a constant-in-time affine field the rollout average equals the
    # pointwise prediction up to O(dt) curvature from the x-dependence
    teacher = ScalarAffineTeacher(a=1.0, b=0.0)
    x = np.full((1, 1, 1), 2.0)
    t = np.array([0.4])
    cfg = DistillConfig(dt_max=1e-4)
    x_dest, t_dest = teacher_two_step(x, t, _cond(1, 1, d=1), np.zeros(1),
                                      np.random.default_rng(5), cfg, teacher)
    v_avg = teacher_vector_field(x, x_dest, t, t_dest)
    v_point = teacher.estimate(Tensor(x), t, None, None).data
    np.testing.assert_allclose(v_avg, v_point, rtol=1e-3)


# -- EMA ---------------------------------------------------------------------------


def _param_like(value, name):
    with dc.using_dtype("float64"):
        p = dc.Parameter(np.asarray(value, dtype=np.float64))
    p.name = name
    return p


def test_ema_beta_zero_copies_student():
    s = [_param_like([1.0, 2.0], "w")]
    e = [_param_like([9.0, 9.0], "w")]
    ema_update(s, e, beta=0.0)
    np.testing.assert_array_equal(e[0].data, s[0].data)


def test_ema_geometric_closed_form():
    beta = 0.9
    s = [_param_like([1.0], "w")]
    e = [_param_like([0.0], "w")]
    for _ in range(10):
        ema_update(s, e, beta)
    assert abs(e[0].data[0] - (1.0 - 0.9 ** 10)) < 1e-12
    assert abs(e[0].data[0] - 0.6513215599) < 1e-9


@pytest.mark.parametrize("beta,k", [(0.5, 7), (0.99, 40), (0.999, 25)])
def test_ema_closed_form_machine_precision(beta, k):
    rng = np.random.default_rng(6)
    target = rng.standard_normal(5)
    start = rng.standard_normal(5)
    s = [_param_like(target, "w")]
    e = [_param_like(start, "w")]
    for _ in range(k):
        ema_update(s, e, beta)
    expected = target + beta ** k * (start - target)
    np.testing.assert_allclose(e[0].data, expected, rtol=0, atol=1e-12)


# -- distillation loss and phases ------------------------------------------------


def test_student_init_reproduces_teacher_conditional_prediction(teacher, corpus):
    student = make_student_from_teacher(teacher, seed=11)
    rng = np.random.default_rng(7)
    d, f = corpus.config.feature_dim, teacher.config.text_feat_dim
    x = rng.standard_normal((1, 9, d)).astype(np.float32)
    z = rng.standard_normal((1, 9, f)).astype(np.float32)
    cond = rng.standard_normal((1, 9, d)).astype(np.float32)
    t = np.array([0.35], dtype=np.float32)
    v_teacher = teacher.estimate(Tensor(x), t, Tensor(z), Tensor(cond), None).data
    for omega in (0.0, 1.0, 2.0):
        v_student = student.estimate(Tensor(x), t, Tensor(z), Tensor(cond),
                                     np.array([omega], dtype=np.float32)).data
        np.testing.assert_array_equal(v_student, v_teacher)


def test_student_requires_conditioning_flag(teacher, corpus):
    batch = make_batch(corpus.train_split()[:2], corpus.vocab.pad_id, np.float32)
    with pytest.raises(ConfigError):
        flow_distill_loss(batch, teacher, teacher, np.random.default_rng(0),
                          DistillConfig(), TrainingConfig())


def test_loss_zero_when_student_equals_teacher_field(teacher, corpus):
    # a constant teacher field rolls out exactly, so a student echoing the
    # same constant is the loss minimizer (up to float32 rollout rounding)
    value = 0.8125  # exactly representable

    class ConstantTeacher(TTSModel):
        def estimate(self, x_t, t, z, speech_cond, omega=None, valid=None):
            return Tensor(np.full(x_t.shape, value, dtype=x_t.dtype.type))

    class ConstantStudent(TTSModel):
        def estimate(self, x_t, t, z, speech_cond, omega=None, valid=None):
            return Tensor(np.full(x_t.shape, value, dtype=x_t.dtype.type))

    const_teacher = ConstantTeacher(teacher.config, seed=0)
    student_cfg = make_student_from_teacher(teacher, seed=0).config
    const_student = ConstantStudent(student_cfg, seed=0)
    batch = make_batch(corpus.train_split()[:2], corpus.vocab.pad_id, np.float32)
    loss = flow_distill_loss(batch, const_student, const_teacher,
                             np.random.default_rng(8), DistillConfig(),
                             TrainingConfig())
    assert loss.item() < 1e-10


def test_loss_positive_for_disagreeing_student(teacher, corpus):
    batch = make_batch(corpus.train_split()[:2], corpus.vocab.pad_id, np.float32)
    student = make_student_from_teacher(teacher, seed=0)
    # nudge the student away from the teacher
    student.vf.in_proj.weight.data += 0.05
    loss = flow_distill_loss(batch, student, teacher, np.random.default_rng(8),
                             DistillConfig(), TrainingConfig())
    assert loss.item() > 0


def test_no_gradient_reaches_teacher(teacher, corpus):
    batch = make_batch(corpus.train_split()[:3], corpus.vocab.pad_id, np.float32)
    student = make_student_from_teacher(teacher, seed=1)
    loss = flow_distill_loss(batch, student, teacher, np.random.default_rng(9),
                             DistillConfig(), TrainingConfig())
    dc.backward(loss)
    assert all(p.grad is None for p in teacher.parameters())
    assert any(p.grad is not None and np.abs(p.grad).sum() > 0
               for p in student.parameters())


def test_loss_finite_at_init_across_seeds(teacher, corpus):
    batch = make_batch(corpus.train_split()[:2], corpus.vocab.pad_id, np.float32)
    student = make_student_from_teacher(teacher, seed=2)
    values = []
    for seed in range(100):
        loss = flow_distill_loss(batch, student, teacher,
                                 np.random.default_rng(seed), DistillConfig(),
                                 TrainingConfig())
        values.append(loss.item())
    assert all(np.isfinite(v) for v in values)
    # the student starts as the teacher, so it already tracks the field roughly
    assert np.mean(values) < 5.0


def test_distiller_two_phases_run_and_student_is_conditioned(teacher, corpus):
    cfg = DistillConfig(phase1_steps=3, phase2_steps=2, ema_beta=0.9, lr=1e-4,
                        warmup_steps=0)
    distiller = Distiller(teacher, corpus, cfg,
                          TrainingConfig(batch_frames=128))
    student = distiller.run()
    assert student.cfg_conditioned
    phases = [e.phase for e in distiller.history]
    assert phases.count("fixed_teacher") == 3
    assert phases.count("ema_teacher") == 2


def test_distill_config_validation():
    with pytest.raises(ConfigError):
        DistillConfig(dt_max=0.7).validate()
    with pytest.raises(ConfigError):
        DistillConfig(omega_min=2.0, omega_max=1.0).validate()
    with pytest.raises(ConfigError):
        DistillConfig(ema_beta=1.0).validate()


def test_teacher_handle_phases():
    handle = TeacherHandle(model=None, phase="fixed_teacher")
    assert handle.phase == "fixed_teacher"
