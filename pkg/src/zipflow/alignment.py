"""Text-side machinery: vocabulary, tokenization, frame alignment of token
features (average upsampling and the filler-padding baseline), and sentence
duration estimation from the prompt token-length ratio."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

PAD_TOKEN = "<pad>"
FILLER_TOKEN = "<filler>"

# sentinel in per-frame source maps for frames covered by the filler embedding
FILLER_INDEX = -1


class TokenizeError(ValueError):
    pass


@dataclass
class Vocabulary:
    """Bijective token<->id map with reserved PAD (batching) and FILLER ids."""

    tokens: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.tokens[:2] != [PAD_TOKEN, FILLER_TOKEN]:
            raise ValueError("vocabulary must start with the PAD and FILLER tokens")
        self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    @classmethod
    def from_corpus_tokens(cls, corpus_tokens) -> "Vocabulary":
        return cls([PAD_TOKEN, FILLER_TOKEN] + list(corpus_tokens))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def filler_id(self) -> int:
        return 1

    @property
    def corpus_ids(self) -> list[int]:
        return list(range(2, len(self.tokens)))

    def save(self, path) -> None:
        """One token per line; the id of a token is its line number."""
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line != "\n"])


@dataclass
class TokenSequence:
    ids: list[int]

    def __post_init__(self):
        if len(self.ids) < 1:
            raise TokenizeError("token sequence must contain at least one token")

    def __len__(self):
        return len(self.ids)


@dataclass
class TextCondition:
    """Frame-aligned text condition: z is (F, T); source_index maps each frame
    to the token position it was copied from, or FILLER_INDEX."""

    z: Tensor
    source_index: list[int]


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    """Character-level tokenization; unknown characters are an error."""
    if not text:
        raise TokenizeError("cannot tokenize empty text")
    unknown = sorted({ch for ch in text if ch not in vocab.token_to_id})
    if unknown:
        raise TokenizeError(f"unknown characters: {unknown!r}")
    return TokenSequence([vocab.token_to_id[ch] for ch in text])


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> str:
    return "".join(vocab.tokens[i] for i in seq.ids)


def upsample_index_map(n_tokens: int, n_frames: int) -> list[int]:
    """Average-upsampling frame->token map: token i covers frames
    [i*d, (i+1)*d) with d = floor(T/N); trailing frames map to FILLER_INDEX."""
    if n_tokens < 1:
        raise ValueError("need at least one token")
    if n_frames < n_tokens:
        raise ValueError(f"frame count {n_frames} < token count {n_tokens}")
    d = n_frames // n_tokens
    idx = [min(t // d, n_tokens - 1) if t < d * n_tokens else FILLER_INDEX
           for t in range(n_frames)]
    return idx


def filler_pad_index_map(n_tokens: int, n_frames: int) -> list[int]:
    """Baseline map: one frame per token at the front, filler for the rest."""
    if n_frames < n_tokens:
        raise ValueError(f"frame count {n_frames} < token count {n_tokens}")
    return list(range(n_tokens)) + [FILLER_INDEX] * (n_frames - n_tokens)


def index_map_for_mode(mode: str, n_tokens: int, n_frames: int) -> list[int]:
    if mode == "average_upsample":
        return upsample_index_map(n_tokens, n_frames)
    if mode == "filler_pad":
        return filler_pad_index_map(n_tokens, n_frames)
    raise ValueError(f"unknown alignment mode {mode!r}")


def _apply_index_map(text_feats: Tensor, index_map: list[int],
                     filler_embed: Tensor) -> TextCondition:
    n = text_feats.shape[1]
    # gather over an extended (F, N+1) matrix whose last column is the filler
    extended = dc.concat([text_feats, dc.reshape(filler_embed, (-1, 1))], axis=1)
    cols = np.array([i if i != FILLER_INDEX else n for i in index_map], dtype=np.int64)
    feats_tn = dc.transpose(extended, (1, 0))  # (N+1, F), time-major for gather
    z_tn = dc.gather_time(feats_tn, cols)
    return TextCondition(z=dc.transpose(z_tn, (1, 0)), source_index=list(index_map))


def average_upsample(text_feats: Tensor, n_frames: int,
                     filler_embed: Tensor) -> TextCondition:
    """Expand token features (F, N) to a frame-aligned condition (F, T):
    each token column is repeated floor(T/N) times, trailing frames take the
    filler embedding."""
    n = text_feats.shape[1]
    return _apply_index_map(
        text_feats, upsample_index_map(n, n_frames), filler_embed
    )


def filler_pad_baseline(text_feats: Tensor, n_frames: int,
                        filler_embed: Tensor) -> TextCondition:
    """Token columns occupy frames [0, N); frames [N, T) are filler (no repetition)."""
    n = text_feats.shape[1]
    return _apply_index_map(
        text_feats, filler_pad_index_map(n, n_frames), filler_embed
    )


def estimate_duration(t_prompt: int, n_prompt: int, n_synth: int) -> int:
    """Synthesis frame count from the token-length ratio, rounded to the
    nearest frame (half up) with a floor of one frame."""
    if min(t_prompt, n_prompt, n_synth) < 1:
        raise ValueError("all duration inputs must be >= 1")
    return max(1, int(t_prompt * n_synth / n_prompt + 0.5))
