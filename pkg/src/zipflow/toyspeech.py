"""Synthetic token-to-feature corpus with a known generative process, plus the
brute-force oracle decoder and the desk-scale metrics built on it.

Each utterance is a token sequence rendered to features: every token owns a
fixed unit-norm template vector, repeated for a random per-token duration,
shifted by a per-utterance speaker offset, with Gaussian noise on top. The
oracle decoder inverts this construction by nearest-template assignment, which
gives a metric floor the model metrics are read against.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

from .alignment import Vocabulary
from .checkpoint import CORPUS_MAGIC, RecordContainer


@dataclass
class ToyCorpusConfig:
    vocab_size: int = 16
    feature_dim: int = 8
    dur_min: int = 2
    dur_max: int = 6
    speaker_sigma: float = 0.25
    noise_sigma: float = 0.05
    len_min: int = 4
    len_max: int = 16
    seed: int = 0

    def validate(self) -> None:
        if not 2 <= self.vocab_size <= 52:
            raise ValueError("vocab_size must be in [2, 52] (letter tokens)")
        if self.dur_min < 2:
            raise ValueError("dur_min must be >= 2 (oracle discards 1-frame runs)")
        if self.dur_min > self.dur_max or self.len_min > self.len_max:
            raise ValueError("invalid duration or length range")
        if self.len_min < 1:
            raise ValueError("len_min must be >= 1")


@dataclass
class TemplateBank:
    """Per-token unit-norm feature templates; row i belongs to vocab id token_ids[i]."""

    vectors: np.ndarray  # (V, D) float64
    token_ids: list[int]

    def min_pairwise_distance(self) -> float:
        diffs = self.vectors[:, None, :] - self.vectors[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        return float(dist.min())


@dataclass
class ToySample:
    utt_id: str
    token_ids: list[int]  # vocab ids
    durations: list[int]
    features: np.ndarray  # (D, T)
    speaker_offset: np.ndarray  # (D,)

    @property
    def n_frames(self) -> int:
        return self.features.shape[1]


@dataclass
class ToyCorpus:
    config: ToyCorpusConfig
    vocab: Vocabulary
    bank: TemplateBank
    samples: list[ToySample] = field(default_factory=list)

    def train_split(self) -> list[ToySample]:
        return self.samples[0::2]

    def heldout_split(self) -> list[ToySample]:
        return self.samples[1::2]


def _corpus_alphabet(vocab_size: int) -> list[str]:
    return list(string.ascii_letters[:vocab_size])


def make_template_bank(cfg: ToyCorpusConfig, vocab: Vocabulary) -> TemplateBank:
    """Draw unit-norm templates until the separation margin (> 4 sigma) holds."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    required = 4.0 * cfg.noise_sigma
    for _ in range(1000):
        vecs = rng.standard_normal((cfg.vocab_size, cfg.feature_dim))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        bank = TemplateBank(vecs, vocab.corpus_ids)
        if bank.min_pairwise_distance() > required:
            return bank
    raise RuntimeError("could not draw a separated template bank; lower vocab_size "
                       "or noise_sigma")


def _generate_sample(cfg: ToyCorpusConfig, bank: TemplateBank,
                     index: int) -> ToySample:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, index)))
    n = int(rng.integers(cfg.len_min, cfg.len_max + 1))
    v = cfg.vocab_size
    # no immediate token repetition: the run-collapsing oracle cannot separate
    # adjacent identical tokens, which would put a floor on toy-WER
    toks = [int(rng.integers(0, v))]
    for _ in range(n - 1):
        step = int(rng.integers(1, v))
        toks.append((toks[-1] + step) % v)
    durations = [int(d) for d in rng.integers(cfg.dur_min, cfg.dur_max + 1, size=n)]
    offset = rng.normal(0.0, cfg.speaker_sigma, size=cfg.feature_dim)
    frames = []
    for tok, dur in zip(toks, durations):
        frames.append(np.repeat(bank.vectors[tok][None, :], dur, axis=0))
    clean = np.concatenate(frames, axis=0)
    noisy = clean + offset + rng.normal(0.0, cfg.noise_sigma, size=clean.shape)
    return ToySample(
        utt_id=f"utt{index:05d}",
        token_ids=[bank.token_ids[t] for t in toks],
        durations=durations,
        features=noisy.T.copy(),
        speaker_offset=offset,
    )


def generate_corpus(cfg: ToyCorpusConfig, n: int) -> ToyCorpus:
    """Deterministic given cfg.seed; sample i only depends on (seed, i)."""
    cfg.validate()
    vocab = Vocabulary.from_corpus_tokens(_corpus_alphabet(cfg.vocab_size))
    bank = make_template_bank(cfg, vocab)
    samples = [_generate_sample(cfg, bank, i) for i in range(n)]
    return ToyCorpus(cfg, vocab, bank, samples)


# -- oracle decoding and metrics ------------------------------------------------


def estimate_speaker_offset(features: np.ndarray, bank: TemplateBank,
                            n_iters: int = 3) -> np.ndarray:
    """Mean frame residual after nearest-template subtraction, iterated."""
    x = features.T  # (T, D)
    offset = np.zeros(features.shape[0])
    for _ in range(n_iters):
        resid = x - offset
        dists = ((resid[:, None, :] - bank.vectors[None, :, :]) ** 2).sum(-1)
        nearest = bank.vectors[dists.argmin(axis=1)]
        offset = (x - nearest).mean(axis=0)
    return offset


def oracle_decode(features: np.ndarray, bank: TemplateBank,
                  est_offset: np.ndarray | None = None,
                  min_run: int = 2) -> list[int]:
    """Nearest-template frame labeling, collapsed to token runs.

    features: (D, T). Runs shorter than min_run frames are discarded;
    consecutive identical labels collapse into one token.
    """
    if est_offset is None:
        est_offset = estimate_speaker_offset(features, bank)
    x = features.T - est_offset
    dists = ((x[:, None, :] - bank.vectors[None, :, :]) ** 2).sum(-1)
    labels = dists.argmin(axis=1)

    decoded: list[int] = []
    run_label, run_len = None, 0
    for lab in list(labels) + [None]:
        if lab == run_label:
            run_len += 1
            continue
        if run_label is not None and run_len >= min_run:
            decoded.append(bank.token_ids[run_label])
        run_label, run_len = lab, 1
    return decoded


def edit_distance(a, b) -> int:
    """Levenshtein distance via the classic rolling-row DP."""
    a, b = list(a), list(b)
    if len(a) > len(b):
        a, b = b, a
    prev = list(range(len(a) + 1))
    for j, cb in enumerate(b):
        cur = [j + 1]
        for i, ca in enumerate(a):
            if ca == cb:
                cur.append(prev[i])
            else:
                cur.append(1 + min(prev[i], prev[i + 1], cur[-1]))
        prev = cur
    return prev[-1]


def toy_wer(ref, hyp) -> float:
    """Edit distance divided by reference length."""
    ref = list(ref)
    if not ref:
        raise ValueError("toy_wer: reference sequence is empty")
    return edit_distance(ref, list(hyp)) / len(ref)


def toy_sim(prompt: np.ndarray, synth: np.ndarray, bank: TemplateBank) -> float:
    """Cosine similarity between estimated speaker offsets of two feature
    sequences; defined as 0 when either offset has zero norm."""
    if prompt.size == 0 or synth.size == 0:
        raise ValueError("toy_sim: inputs must be non-empty")
    a = estimate_speaker_offset(prompt, bank)
    b = estimate_speaker_offset(synth, bank)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# -- persistence ------------------------------------------------------------------


def save_corpus(corpus: ToyCorpus, path, manifest_path=None) -> None:
    header = {
        "kind": "toy_corpus",
        "config": vars(corpus.config).copy(),
        "n_samples": len(corpus.samples),
        "vocab": corpus.vocab.tokens,
    }
    records = {
        "templates": corpus.bank.vectors,
        "template_token_ids": np.asarray(corpus.bank.token_ids, dtype=np.int64),
    }
    for s in corpus.samples:
        records[f"{s.utt_id}.tokens"] = np.asarray(s.token_ids, dtype=np.int64)
        records[f"{s.utt_id}.durations"] = np.asarray(s.durations, dtype=np.int64)
        records[f"{s.utt_id}.features"] = s.features
        records[f"{s.utt_id}.speaker_offset"] = s.speaker_offset
    RecordContainer(CORPUS_MAGIC, header, records).save(path)
    if manifest_path is not None:
        with open(manifest_path, "w", encoding="utf-8") as f:
            for s in corpus.samples:
                toks = "".join(corpus.vocab.tokens[i] for i in s.token_ids)
                durs = ",".join(str(d) for d in s.durations)
                f.write(f"{s.utt_id}\t{toks}\t{durs}\t{s.n_frames}\n")


def load_corpus(path) -> ToyCorpus:
    box = RecordContainer.load(path, CORPUS_MAGIC)
    cfg = ToyCorpusConfig(**box.header["config"])
    vocab = Vocabulary(box.header["vocab"])
    bank = TemplateBank(
        box.records["templates"],
        [int(i) for i in box.records["template_token_ids"]],
    )
    samples = []
    for i in range(box.header["n_samples"]):
        utt = f"utt{i:05d}"
        samples.append(ToySample(
            utt_id=utt,
            token_ids=[int(t) for t in box.records[f"{utt}.tokens"]],
            durations=[int(d) for d in box.records[f"{utt}.durations"]],
            features=box.records[f"{utt}.features"],
            speaker_offset=box.records[f"{utt}.speaker_offset"],
        ))
    return ToyCorpus(cfg, vocab, bank, samples)
