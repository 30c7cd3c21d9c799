"""Flow-matching training and sampling.

Training draws per-sample noise, time, and a contiguous temporal mask, builds
the frame-aligned text condition (dropped to a learned null embedding with a
configured probability), and regresses the estimator output onto the
interpolant velocity on masked positions only. Sampling integrates the learned
field with an Euler solver under time-dependent classifier-free guidance; the
zero-shot pipeline infills a Gaussian-initialized span appended to the prompt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import toyspeech
from .alignment import (
    FILLER_INDEX,
    TokenSequence,
    estimate_duration,
    index_map_for_mode,
)
from .configuration import ConfigError
from .diffcore import NumericalError, Tensor
from .model import TTSModel
from .toyspeech import ToySample


@dataclass
class TrainingConfig:
    cfg_text_drop_prob: float = 0.2
    mask_frac_min: float = 0.7
    mask_frac_max: float = 1.0
    t_distribution: str = "uniform01"
    batch_frames: int = 640
    lr: float = 1e-3
    warmup_steps: int = 100
    lr_schedule: str = "constant"  # or "cosine"
    steps: int = 3000
    eval_every: int = 200
    eval_utterances: int = 24
    eval_nfe: int = 16
    eval_omega: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.cfg_text_drop_prob <= 1.0:
            raise ConfigError("cfg_text_drop_prob must be in [0, 1]")
        if not 0.0 < self.mask_frac_min <= self.mask_frac_max <= 1.0:
            raise ConfigError("need 0 < mask_frac_min <= mask_frac_max <= 1")
        if self.t_distribution != "uniform01":
            raise ConfigError(f"unknown t_distribution {self.t_distribution!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.batch_frames < 2:
            raise ConfigError("batch_frames must cover at least one utterance")


@dataclass
class MaskSpec:
    """Contiguous temporal mask [start, end) over n_frames; 1 = masked."""

    start: int
    end: int
    n_frames: int

    def frame_mask(self) -> np.ndarray:
        m = np.zeros(self.n_frames)
        m[self.start : self.end] = 1.0
        return m

    def matrix(self, feature_dim: int) -> np.ndarray:
        """(D, T) mask, constant across the feature axis."""
        return np.repeat(self.frame_mask()[None, :], feature_dim, axis=0)


def sample_mask(n_frames: int, rng: np.random.Generator,
                cfg: TrainingConfig) -> MaskSpec:
    """Span length is a uniform fraction of T (rounded); start is uniform."""
    if n_frames < 2:
        raise ValueError("sample_mask: need at least 2 frames")
    frac = rng.uniform(cfg.mask_frac_min, cfg.mask_frac_max)
    length = min(n_frames, max(1, int(frac * n_frames + 0.5)))
    start = int(rng.integers(0, n_frames - length + 1))
    return MaskSpec(start, start + length, n_frames)


def sample_interpolant(x0: Tensor, x1: Tensor, t: float) -> Tensor:
    if x0.shape != x1.shape:
        raise dc.ShapeError(
            f"sample_interpolant: shapes {x0.shape} and {x1.shape} differ"
        )
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"sample_interpolant: t={t} outside [0, 1]")
    return x0 * (1.0 - t) + x1 * t


def cfg_combine(v_cond, v_uncond, omega: float):
    """Guidance extrapolation (1 + w) * v_cond - w * v_uncond (Tensor or array)."""
    return v_cond * (1.0 + omega) - v_uncond * omega


@dataclass
class SolverSchedule:
    times: list

    def __post_init__(self):
        ts = list(self.times)
        if len(ts) < 2 or ts[0] != 0.0 or ts[-1] != 1.0:
            raise ConfigError("solver time grid must start at 0 and end at 1")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigError("solver time grid must be strictly increasing")
        self.times = ts

    @property
    def nfe(self) -> int:
        return len(self.times) - 1

    @classmethod
    def uniform(cls, nfe: int) -> "SolverSchedule":
        if nfe < 1:
            raise ConfigError("nfe must be >= 1")
        return cls([k / nfe for k in range(nfe + 1)])


@dataclass
class CFGSchedule:
    omega: float = 1.0
    early_fraction: float = 0.5

    def __post_init__(self):
        if self.omega < 0:
            raise ConfigError("omega must be >= 0")
        if not 0.0 <= self.early_fraction <= 1.0:
            raise ConfigError("early_fraction must be in [0, 1]")


@dataclass
class SolveConditions:
    """Single-sequence conditions in (T, F) / (T, D) layout."""

    z: np.ndarray
    speech_cond: np.ndarray


def euler_solve(model, x0: np.ndarray, conditions: SolveConditions,
                schedule: SolverSchedule, cfg: CFGSchedule) -> np.ndarray:
    """Integrate x' = v(x, t) from the time grid's 0 to 1.

    Guidance is time dependent: within the early fraction of steps the
    unconditional branch drops only the text condition; later steps drop both
    text and speech conditions. At omega=0 (or for a guidance-conditioned
    model) the unconditional branch is never evaluated.
    """
    x = np.array(x0, copy=True)
    k_total = schedule.nfe
    for k in range(k_total):
        t0, t1 = schedule.times[k], schedule.times[k + 1]
        if getattr(model, "cfg_conditioned", False):
            v = model.solve_field(x, t0, conditions, omega=cfg.omega)
        elif cfg.omega == 0.0:
            v = model.solve_field(x, t0, conditions)
        else:
            v_cond = model.solve_field(x, t0, conditions)
            early = (k / k_total) < cfg.early_fraction
            v_uncond = model.solve_field(
                x, t0, conditions, drop_text=True, drop_speech=not early
            )
            v = cfg_combine(v_cond, v_uncond, cfg.omega)
        x = x + (t1 - t0) * v
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"euler_solve: non-finite state at step {k}")
    return x


# -- batched training ----------------------------------------------------------


@dataclass
class TrainingBatch:
    tokens: np.ndarray        # (B, Nmax) int64, PAD-padded
    token_valid: np.ndarray   # (B, Nmax) in {0, 1}
    features: np.ndarray      # (B, Tmax, D), zero-padded
    frame_valid: np.ndarray   # (B, Tmax) in {0, 1}
    lengths: list
    n_tokens: list


def make_batch(samples: list[ToySample], pad_id: int, dtype) -> TrainingBatch:
    b = len(samples)
    n_max = max(len(s.token_ids) for s in samples)
    t_max = max(s.n_frames for s in samples)
    d = samples[0].features.shape[0]
    tokens = np.full((b, n_max), pad_id, dtype=np.int64)
    token_valid = np.zeros((b, n_max), dtype=dtype)
    feats = np.zeros((b, t_max, d), dtype=dtype)
    frame_valid = np.zeros((b, t_max), dtype=dtype)
    for i, s in enumerate(samples):
        n, t = len(s.token_ids), s.n_frames
        tokens[i, :n] = s.token_ids
        token_valid[i, :n] = 1.0
        feats[i, :t] = s.features.T
        frame_valid[i, :t] = 1.0
    return TrainingBatch(tokens, token_valid, feats, frame_valid,
                         [s.n_frames for s in samples],
                         [len(s.token_ids) for s in samples])


def build_text_condition(model: TTSModel, batch: TrainingBatch,
                         drop: np.ndarray | None = None,
                         encoder_model: TTSModel | None = None) -> Tensor:
    """Batched frame-aligned text condition (B, Tmax, F).

    Frames beyond an utterance's length point at the filler slot (their value
    never reaches the loss or valid attention keys). `drop` replaces whole
    samples' conditions with the learned null embedding.
    """
    enc = encoder_model or model
    feats = enc.encode_tokens(batch.tokens, batch.token_valid)
    b, n_max, f = feats.shape
    t_max = batch.features.shape[1]
    dtype = feats.dtype

    cols = np.full((b, t_max), n_max, dtype=np.int64)
    for i, (n, t) in enumerate(zip(batch.n_tokens, batch.lengths)):
        idx_map = index_map_for_mode(model.config.alignment_mode, n, t)
        cols[i, :t] = [n_max if v == FILLER_INDEX else v for v in idx_map]

    filler = dc.reshape(enc.filler_embed, (1, 1, f))
    filler_tile = dc.mul(Tensor(np.ones((b, 1, 1), dtype=dtype)), filler)
    z = dc.gather_time(dc.concat([feats, filler_tile], axis=1), cols)

    if drop is not None and drop.any():
        keep = Tensor((1.0 - drop).astype(dtype)[:, None, None])
        dropm = Tensor(drop.astype(dtype)[:, None, None])
        null = dc.reshape(enc.null_text_cond, (1, 1, f))
        z = dc.add(dc.mul(z, keep), dc.mul(null, dropm))
    return z


def draw_batch_noise(batch: TrainingBatch, rng: np.random.Generator,
                     cfg: TrainingConfig, dtype):
    """Per-sample (t, x0, mask, drop) draws for one training step."""
    b, t_max, d = batch.features.shape
    t = rng.random(b)
    x0 = rng.standard_normal((b, t_max, d)).astype(dtype)
    mask = np.zeros((b, t_max), dtype=dtype)
    for i, t_i in enumerate(batch.lengths):
        spec = sample_mask(t_i, rng, cfg)
        mask[i, spec.start : spec.end] = 1.0
    drop = (rng.random(b) < cfg.cfg_text_drop_prob).astype(dtype)
    return t, x0, mask, drop


def cfm_tts_loss(batch: TrainingBatch, model: TTSModel, rng: np.random.Generator,
                 cfg: TrainingConfig) -> Tensor:
    """Masked flow-matching loss: mean over masked positions of
    || v(x_t, z, (1-m) . x1) - (x1 - x0) ||^2."""
    dtype = batch.features.dtype
    t, x0, mask, drop = draw_batch_noise(batch, rng, cfg, dtype)
    return masked_velocity_mse(batch, model, t, x0, mask, drop)


def masked_mse(v: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over masked elements of (v - target)^2; mask is (B, T) temporal."""
    m3 = mask[:, :, None]
    diff = dc.mul(dc.sub(v, Tensor(target)), Tensor(m3))
    count = float(mask.sum()) * target.shape[-1]
    if count == 0:
        raise ValueError("masked_mse: empty mask")
    return dc.tsum(dc.mul(diff, diff)) * (1.0 / count)


def masked_velocity_mse(batch: TrainingBatch, model: TTSModel, t: np.ndarray,
                        x0: np.ndarray, mask: np.ndarray,
                        drop: np.ndarray | None) -> Tensor:
    dtype = batch.features.dtype
    x1 = batch.features
    t3 = t.astype(dtype)[:, None, None]
    m3 = mask[:, :, None]
    x_t = (1.0 - t3) * x0 + t3 * x1
    speech_cond = (1.0 - m3) * x1

    z = build_text_condition(model, batch, drop)
    v = model.estimate(Tensor(x_t), t.astype(dtype), z, Tensor(speech_cond),
                       None, valid=batch.frame_valid)
    return masked_mse(v, x1 - x0, mask)


def heldout_masked_mse(model: TTSModel, batch: TrainingBatch,
                       seed: int) -> float:
    """Reconstruction MSE on a fixed batch with frozen draws (no text drop),
    comparable across training steps."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(9,)))
    cfg = TrainingConfig(cfg_text_drop_prob=0.0)
    dtype = batch.features.dtype
    t, x0, mask, _ = draw_batch_noise(batch, rng, cfg, dtype)
    with dc.no_grad():
        loss = masked_velocity_mse(batch, model, t, x0, mask, None)
    return loss.item()


# -- training loop ----------------------------------------------------------------


class LengthBucketBatcher:
    """Deterministic epoch-permuted batcher greedily filling a frame budget."""

    def __init__(self, samples: list[ToySample], batch_frames: int,
                 rng: np.random.Generator):
        if not samples:
            raise ValueError("no training samples")
        self.samples = samples
        self.batch_frames = batch_frames
        self.rng = rng

    def __iter__(self):
        while True:
            order = self.rng.permutation(len(self.samples))
            i = 0
            while i < len(order):
                chosen = [self.samples[order[i]]]
                t_max = chosen[0].n_frames
                i += 1
                while i < len(order):
                    cand = self.samples[order[i]]
                    new_max = max(t_max, cand.n_frames)
                    if new_max * (len(chosen) + 1) > self.batch_frames:
                        break
                    chosen.append(cand)
                    t_max = new_max
                    i += 1
                yield chosen


def lr_at(step: int, cfg: TrainingConfig) -> float:
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.lr_schedule == "cosine":
        frac = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))
    return cfg.lr


@dataclass
class TrainLogEntry:
    step: int
    loss: float
    lr: float
    heldout_mse: float | None = None
    heldout_wer: float | None = None
    heldout_sim: float | None = None


class Trainer:
    """Owns one model and its optimizer; single-threaded mutation contract."""

    def __init__(self, model: TTSModel, corpus: toyspeech.ToyCorpus,
                 cfg: TrainingConfig, run_eval: bool = True):
        cfg.validate()
        self.model = model
        self.corpus = corpus
        self.cfg = cfg
        self.run_eval = run_eval
        self.optimizer = dc.Adam(list(model.parameters()), lr=cfg.lr)
        self.batch_rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
        self.loss_rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(3,)))
        self.batcher = iter(LengthBucketBatcher(
            corpus.train_split(), cfg.batch_frames, self.batch_rng))
        self.history: list[TrainLogEntry] = []
        self.step = 0
        self._heldout_batch = None

    def _dtype(self):
        return next(self.model.parameters()).data.dtype

    def heldout_batch(self) -> TrainingBatch:
        if self._heldout_batch is None:
            held = self.corpus.heldout_split()[:16]
            self._heldout_batch = make_batch(held, self.corpus.vocab.pad_id,
                                             self._dtype())
        return self._heldout_batch

    def train_step(self) -> float:
        samples = next(self.batcher)
        batch = make_batch(samples, self.corpus.vocab.pad_id, self._dtype())
        self.optimizer.zero_grad()
        loss = cfm_tts_loss(batch, self.model, self.loss_rng, self.cfg)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"training loss is not finite at step {self.step}")
        dc.backward(loss)
        dc.fill_missing_grads(self.optimizer.params)
        self.optimizer.lr = lr_at(self.step, self.cfg)
        self.optimizer.step()
        self.step += 1
        return value

    def train(self, steps: int | None = None, log_cb=None) -> list[TrainLogEntry]:
        steps = self.cfg.steps if steps is None else steps
        for _ in range(steps):
            value = self.train_step()
            entry = TrainLogEntry(self.step, value, self.optimizer.lr)
            if self.cfg.eval_every and self.step % self.cfg.eval_every == 0:
                entry.heldout_mse = heldout_masked_mse(
                    self.model, self.heldout_batch(), self.cfg.seed)
                if self.run_eval:
                    result = evaluate_on_corpus(
                        self.model, self.corpus,
                        SolverSchedule.uniform(self.cfg.eval_nfe),
                        CFGSchedule(omega=self.cfg.eval_omega),
                        seed=self.cfg.seed,
                        max_utterances=self.cfg.eval_utterances,
                    )
                    entry.heldout_wer = result["wer"]
                    entry.heldout_sim = result["sim"]
            self.history.append(entry)
            if log_cb:
                log_cb(entry)
        return self.history


# -- zero-shot synthesis and corpus evaluation --------------------------------------


def synthesize(model: TTSModel, prompt_feats: np.ndarray,
               prompt_tokens: TokenSequence, synth_tokens: TokenSequence,
               schedule: SolverSchedule, cfg: CFGSchedule,
               rng: np.random.Generator) -> np.ndarray:
    """Zero-shot synthesis: returns only the synthesis-region frames (D, T_synth).

    The prompt and synthesis token sequences are concatenated (prompt first),
    frame-aligned over the combined length, and the speech condition carries
    the prompt features with zeros over the synthesis region.
    """
    if prompt_feats.size == 0:
        raise ValueError("synthesize: prompt features are empty")
    dtype = next(model.parameters()).data.dtype
    d = model.config.feature_dim
    t_prompt = prompt_feats.shape[1]
    t_synth = estimate_duration(t_prompt, len(prompt_tokens), len(synth_tokens))
    t_total = t_prompt + t_synth

    ids = np.asarray(prompt_tokens.ids + synth_tokens.ids, dtype=np.int64)[None, :]
    with dc.no_grad():
        feats = model.encode_tokens(ids)  # (1, N, F)
        n = ids.shape[1]
        idx_map = index_map_for_mode(model.config.alignment_mode, n, t_total)
        cols = np.array([[n if v == FILLER_INDEX else v for v in idx_map]],
                        dtype=np.int64)
        filler = dc.reshape(model.filler_embed, (1, 1, -1))
        z = dc.gather_time(dc.concat([feats, filler], axis=1), cols)

    speech_cond = np.zeros((t_total, d), dtype=dtype)
    speech_cond[:t_prompt] = prompt_feats.T.astype(dtype)
    x0 = rng.standard_normal((t_total, d)).astype(dtype)

    out = euler_solve(model, x0,
                      SolveConditions(z.data[0], speech_cond), schedule, cfg)
    return out[t_prompt:].T.copy()


def evaluate_on_corpus(model: TTSModel, corpus: toyspeech.ToyCorpus,
                       schedule: SolverSchedule, cfg: CFGSchedule,
                       seed: int = 0, max_utterances: int | None = None,
                       split: str = "heldout") -> dict:
    """Zero-shot evaluation: each held-out utterance's first half (exact
    frames) prompts synthesis of its second half; the oracle decoder scores
    the result against the reference tokens."""
    samples = (corpus.heldout_split() if split == "heldout"
               else corpus.train_split())
    if max_utterances is not None:
        samples = samples[:max_utterances]
    rows = []
    total_edits, total_ref = 0, 0
    sims = []
    mses = []
    for i, s in enumerate(samples):
        k = max(1, len(s.token_ids) // 2)
        t_prompt = sum(s.durations[:k])
        prompt_feats = s.features[:, :t_prompt]
        ref = s.token_ids[k:]
        if not ref:
            continue
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4, i)))
        synth = synthesize(model, prompt_feats, TokenSequence(s.token_ids[:k]),
                           TokenSequence(ref), schedule, cfg, rng)
        hyp = toyspeech.oracle_decode(synth, corpus.bank)
        edits = toyspeech.edit_distance(ref, hyp)
        total_edits += edits
        total_ref += len(ref)
        sim = toyspeech.toy_sim(prompt_feats, synth.astype(np.float64), corpus.bank)
        sims.append(sim)
        true_region = s.features[:, t_prompt : t_prompt + synth.shape[1]]
        width = min(true_region.shape[1], synth.shape[1])
        if width:
            mses.append(float(np.mean(
                (true_region[:, :width] - synth[:, :width]) ** 2)))
        rows.append({
            "utt_id": s.utt_id, "wer": edits / len(ref), "sim": sim,
            "ref_len": len(ref), "hyp_len": len(hyp),
        })
    return {
        "wer": total_edits / max(1, total_ref),
        "sim": float(np.mean(sims)) if sims else 0.0,
        "masked_mse": float(np.mean(mses)) if mses else 0.0,
        "rows": rows,
        "n_utterances": len(rows),
    }
