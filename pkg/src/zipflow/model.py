"""Text encoder and vector field estimator.

Both networks share the same layer recipe: two feed-forward blocks wrap a
group of attention-weight-reusing modules (two self-attention modules plus a
tanh-gated non-linear attention module) and a depthwise-convolution module,
every sub-block residual with pre-normalization. The estimator additionally
arranges its layers into stacks that pool the time axis down by a per-stack
rate, process at the lower resolution, upsample back, and recombine with the
stack input through a learned per-channel bypass scale.

Internal layout is (batch, time, channels); the public single-sequence
surfaces use the (channels, time) convention of the rest of the package.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .alignment import TextCondition, TokenSequence
from .configuration import ConfigError, dataclass_from_dict, dataclass_to_dict
from .diffcore import (
    Embedding,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Parameter,
    Tensor,
)

NEG_INF = -1e30


@dataclass
class EncoderConfig:
    layers: int = 2
    dim: int = 32
    ffn_dim: int = 64


@dataclass
class EstimatorConfig:
    stack_downsample_rates: list = field(default_factory=lambda: [1, 2, 4, 2, 1])
    stack_layers: list = field(default_factory=lambda: [1, 1, 2, 1, 1])
    dim: int = 48
    ffn_dim: int = 96
    attn_heads: int = 2
    conv_kernel: int = 7


@dataclass
class AblationSwitches:
    use_convolution: bool = True
    use_downsampling: bool = True
    use_bypass: bool = True
    use_nla: bool = True
    share_attention_weights: bool = True
    use_text_encoder: bool = True


@dataclass
class ModelConfig:
    feature_dim: int = 8
    text_feat_dim: int = 16
    vocab_size: int = 18  # corpus tokens + PAD + FILLER
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    ablation: AblationSwitches = field(default_factory=AblationSwitches)
    cfg_conditioned: bool = False
    alignment_mode: str = "average_upsample"  # or "filler_pad"

    def validate(self) -> None:
        est = self.estimator
        if len(est.stack_downsample_rates) != len(est.stack_layers):
            raise ConfigError(
                "stack_downsample_rates and stack_layers must have equal length"
            )
        bad = [r for r in est.stack_downsample_rates if r not in (1, 2, 4)]
        if bad:
            raise ConfigError(f"unsupported downsampling rates {bad}; allowed: 1, 2, 4")
        if est.dim % est.attn_heads != 0:
            raise ConfigError("estimator dim must be divisible by attn_heads")
        if self.encoder.dim % 2 != 0:
            raise ConfigError("encoder dim must be even (two-head attention)")
        if est.conv_kernel % 2 != 1:
            raise ConfigError("conv_kernel must be odd")
        if self.alignment_mode not in ("average_upsample", "filler_pad"):
            raise ConfigError(f"unknown alignment_mode {self.alignment_mode!r}")

    def to_dict(self) -> dict:
        return dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        cfg = dataclass_from_dict(cls, data)
        cfg.validate()
        return cfg


def reference_full_scale_config() -> ModelConfig:
    """The full-scale shape (~123M parameters); documentation and structure
    checks only, never instantiated in tests."""
    return ModelConfig(
        feature_dim=100,
        text_feat_dim=512,
        vocab_size=1024,
        encoder=EncoderConfig(layers=4, dim=192, ffn_dim=512),
        estimator=EstimatorConfig(
            stack_downsample_rates=[1, 2, 4, 2, 1],
            stack_layers=[2, 2, 4, 4, 4],
            dim=512, ffn_dim=1536, attn_heads=8, conv_kernel=7,
        ),
    )


def toy_model_config() -> ModelConfig:
    """Desk-scale default; parameter count is regression-tested."""
    return ModelConfig()


def gradcheck_model_config() -> ModelConfig:
    """Tiny double-precision finite-difference target: 2-layer stacks."""
    return ModelConfig(
        feature_dim=8,
        text_feat_dim=8,
        vocab_size=18,
        encoder=EncoderConfig(layers=1, dim=16, ffn_dim=24),
        estimator=EstimatorConfig(
            stack_downsample_rates=[1, 2, 4, 2, 1],
            stack_layers=[2, 2, 2, 2, 2],
            dim=16, ffn_dim=24, attn_heads=2, conv_kernel=7,
        ),
    )


ABLATION_KEYS = tuple(f.name for f in dataclasses.fields(AblationSwitches))


def apply_ablation_overrides(config: ModelConfig, overrides: dict) -> None:
    """Apply KEY=VAL ablation overrides (switch names or alignment_mode)."""
    for key, raw in overrides.items():
        if key == "alignment_mode":
            config.alignment_mode = str(raw)
            continue
        if key not in ABLATION_KEYS:
            raise ConfigError(
                f"unknown ablation key {key!r}; allowed: {sorted(ABLATION_KEYS)} "
                "or alignment_mode"
            )
        if isinstance(raw, str):
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                value = True
            elif lowered in ("false", "0", "no"):
                value = False
            else:
                raise ConfigError(f"ablation {key}: expected a boolean, got {raw!r}")
        else:
            value = bool(raw)
        setattr(config.ablation, key, value)
    config.validate()


# -- shared building blocks ---------------------------------------------------


def sinusoid_positions(n: int, dim: int, dtype) -> np.ndarray:
    pos = np.arange(n, dtype=dtype)[:, None]
    i = np.arange(dim // 2, dtype=dtype)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros((n, dim), dtype=dtype)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, h = x.shape
    return dc.transpose(dc.reshape(x, (b, t, heads, h // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return dc.reshape(dc.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def additive_key_mask(valid: np.ndarray | None, dtype) -> Tensor | None:
    """(B, T) validity -> (B, 1, 1, T) additive attention bias, or None."""
    if valid is None:
        return None
    bias = (1.0 - valid.astype(dtype)) * NEG_INF
    return Tensor(bias[:, None, None, :])


def pool_valid(valid: np.ndarray) -> np.ndarray:
    """Factor-2 mask pooling: a pooled frame is valid if either source is."""
    t = valid.shape[-1]
    if t % 2 == 1:
        valid = np.concatenate([valid, valid[..., -1:]], axis=-1)
    return np.maximum(valid[..., 0::2], valid[..., 1::2])


class ScalarEmbedding(Module):
    """Fourier features of a scalar followed by a linear projection."""

    N_FREQS = 16

    def __init__(self, dim: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        self.freqs = np.exp(
            np.linspace(math.log(0.25), math.log(16.0), self.N_FREQS)
        )
        self.proj = Linear(2 * self.N_FREQS, dim, rng, zero_init=zero_init)

    def zero_(self) -> None:
        """Zero the projection so the embedding contributes nothing."""
        self.proj.weight.data[:] = 0.0
        self.proj.bias.data[:] = 0.0

    def __call__(self, values) -> Tensor:
        return self.proj(dc.fourier_scalar_embed(values, self.freqs))


class AttentionWeights(Module):
    """Query/key projections producing softmax attention matrices (B, h, T, T)."""

    def __init__(self, dim: int, heads: int, rng):
        super().__init__()
        self.heads = heads
        self.scale = 1.0 / math.sqrt(dim // heads)
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, key_bias: Tensor | None) -> Tensor:
        q = _split_heads(self.q_proj(x), self.heads)
        k = _split_heads(self.k_proj(x), self.heads)
        scores = dc.mul(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), self.scale)
        if key_bias is not None:
            scores = dc.add(scores, key_bias)
        return dc.softmax(scores, axis=-1)


class SelfAttention(Module):
    """Value/output projections applied through a given attention matrix."""

    def __init__(self, dim: int, heads: int, rng, own_weights: bool):
        super().__init__()
        self.heads = heads
        if own_weights:
            self.attn = AttentionWeights(dim, heads, rng)
        else:
            self.attn = None
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, weights: Tensor) -> Tensor:
        v = _split_heads(self.v_proj(x), self.heads)
        return self.out_proj(_merge_heads(dc.matmul(weights, v)))


class NonlinearAttention(Module):
    """Attention-weighted tanh-gated projection: OutProj(A @ (tanh(Wa x) * Wb x))."""

    def __init__(self, dim: int, heads: int, rng, own_weights: bool):
        super().__init__()
        self.heads = heads
        if own_weights:
            self.attn = AttentionWeights(dim, heads, rng)
        else:
            self.attn = None
        self.gate_proj = Linear(dim, dim, rng)
        self.value_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, weights: Tensor) -> Tensor:
        gated = dc.mul(dc.tanh(self.gate_proj(x)), self.value_proj(x))
        mixed = dc.matmul(weights, _split_heads(gated, self.heads))
        return self.out_proj(_merge_heads(mixed))


class ConvModule(Module):
    """Pointwise -> depthwise (odd kernel, same padding) -> pointwise."""

    def __init__(self, dim: int, kernel: int, rng):
        super().__init__()
        self.pw_in = Linear(dim, dim, rng)
        self.dw_weight = Parameter(rng.standard_normal((kernel, dim)) / math.sqrt(kernel))
        self.pw_out = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, frame_scale: Tensor | None) -> Tensor:
        h = dc.silu(self.pw_in(x))
        if frame_scale is not None:
            h = dc.mul(h, frame_scale)  # keep padding out of the receptive field
        h = dc.silu(dc.depthwise_conv1d(h, self.dw_weight))
        return self.pw_out(h)


class FeedForward(Module):
    def __init__(self, dim: int, ffn_dim: int, rng):
        super().__init__()
        self.lin_in = Linear(dim, ffn_dim, rng)
        self.lin_out = Linear(ffn_dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin_out(dc.silu(self.lin_in(x)))


class ZipLayer(Module):
    """One encoder layer: ffn -> (attn weights) -> self-attn -> NLA -> conv ->
    self-attn -> ffn, each residual with pre-normalization.

    With shared attention weights, the matrix computed once after the first
    feed-forward block is consumed by both self-attention modules and the NLA.
    """

    def __init__(self, dim: int, ffn_dim: int, heads: int, conv_kernel: int,
                 rng, ablation: AblationSwitches):
        super().__init__()
        share = ablation.share_attention_weights
        self.share_attention_weights = share
        self.norm_ffn1 = LayerNorm(dim)
        self.ffn1 = FeedForward(dim, ffn_dim, rng)
        if share:
            self.norm_attn = LayerNorm(dim)
            self.attn_weights = AttentionWeights(dim, heads, rng)
        self.norm_sa1 = LayerNorm(dim)
        self.self_attn1 = SelfAttention(dim, heads, rng, own_weights=not share)
        if ablation.use_nla:
            self.norm_nla = LayerNorm(dim)
            self.nla = NonlinearAttention(dim, heads, rng, own_weights=not share)
        else:
            self.nla = None
        if ablation.use_convolution:
            self.norm_conv = LayerNorm(dim)
            self.conv = ConvModule(dim, conv_kernel, rng)
        else:
            self.conv = None
        self.norm_sa2 = LayerNorm(dim)
        self.self_attn2 = SelfAttention(dim, heads, rng, own_weights=not share)
        self.norm_ffn2 = LayerNorm(dim)
        self.ffn2 = FeedForward(dim, ffn_dim, rng)

        self.record_attention = False
        self.recorded_attention: dict = {}

    def _weights_for(self, module, x_normed: Tensor, shared: Tensor | None,
                     key_bias, tag: str) -> Tensor:
        w = shared if shared is not None else module.attn(x_normed, key_bias)
        if self.record_attention:
            self.recorded_attention[tag] = np.array(w.data, copy=True)
        return w

    def __call__(self, x: Tensor, key_bias: Tensor | None,
                 frame_scale: Tensor | None) -> Tensor:
        x = dc.add(x, self.ffn1(self.norm_ffn1(x)))
        shared = None
        if self.share_attention_weights:
            shared = self.attn_weights(self.norm_attn(x), key_bias)

        h = self.norm_sa1(x)
        w = self._weights_for(self.self_attn1, h, shared, key_bias, "self_attn1")
        x = dc.add(x, self.self_attn1(h, w))

        if self.nla is not None:
            h = self.norm_nla(x)
            w = self._weights_for(self.nla, h, shared, key_bias, "nla")
            x = dc.add(x, self.nla(h, w))

        if self.conv is not None:
            x = dc.add(x, self.conv(self.norm_conv(x), frame_scale))

        h = self.norm_sa2(x)
        w = self._weights_for(self.self_attn2, h, shared, key_bias, "self_attn2")
        x = dc.add(x, self.self_attn2(h, w))

        x = dc.add(x, self.ffn2(self.norm_ffn2(x)))
        return x


class UNetStack(Module):
    """Layers run at time resolution T/rate (ceil; last frame repeated when
    odd), upsampled back and recombined with the stack input via a learned
    per-channel bypass scale: out = x + scale * (processed - x)."""

    def __init__(self, dim: int, ffn_dim: int, heads: int, conv_kernel: int,
                 rate: int, n_layers: int, rng, ablation: AblationSwitches):
        super().__init__()
        if rate not in (1, 2, 4):
            raise ConfigError(f"unsupported stack rate {rate}")
        self.rate = rate if ablation.use_downsampling else 1
        self.layers = ModuleList([
            ZipLayer(dim, ffn_dim, heads, conv_kernel, rng, ablation)
            for _ in range(n_layers)
        ])
        if ablation.use_bypass:
            self.bypass_scale = Parameter(np.full(dim, 0.5))
        else:
            self.bypass_scale = None

    def __call__(self, x: Tensor, valid: np.ndarray | None) -> Tensor:
        x_in = x
        levels = {1: 0, 2: 1, 4: 2}[self.rate]
        lengths = [x.shape[-2]]
        v = valid
        if levels and valid is not None:
            x = dc.mul(x, Tensor(valid.astype(x.dtype)[..., None]))
        for _ in range(levels):
            x = dc.avgpool2_time(x)
            v = pool_valid(v) if v is not None else None
            lengths.append(x.shape[-2])

        key_bias = additive_key_mask(v, x.dtype)
        frame_scale = Tensor(v.astype(x.dtype)[..., None]) if v is not None else None
        for layer in self.layers:
            x = layer(x, key_bias, frame_scale)

        for target in reversed(lengths[:-1]):
            x = dc.upsample2_time(x, target)

        if self.bypass_scale is not None:
            return dc.add(x_in, dc.mul(self.bypass_scale, dc.sub(x, x_in)))
        return x


# -- the two networks -----------------------------------------------------------


class TextEncoder(Module):
    """Token ids -> text features (B, N, F). Without the encoder stack the
    embedding table maps straight to the text-feature dimension."""

    def __init__(self, config: ModelConfig, rng):
        super().__init__()
        self.use_encoder = config.ablation.use_text_encoder
        enc = config.encoder
        if self.use_encoder:
            self.embed = Embedding(config.vocab_size, enc.dim, rng)
            self.layers = ModuleList([
                ZipLayer(enc.dim, enc.ffn_dim, 2, config.estimator.conv_kernel,
                         rng, config.ablation)
                for _ in range(enc.layers)
            ])
            self.out_norm = LayerNorm(enc.dim)
            self.out_proj = Linear(enc.dim, config.text_feat_dim, rng)
        else:
            self.embed = Embedding(config.vocab_size, config.text_feat_dim, rng)

    def __call__(self, ids: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
        x = self.embed(np.asarray(ids, dtype=np.int64))
        if not self.use_encoder:
            return x
        x = dc.add(x, Tensor(sinusoid_positions(x.shape[-2], x.shape[-1], x.dtype)))
        key_bias = additive_key_mask(valid, x.dtype)
        frame_scale = Tensor(valid.astype(x.dtype)[..., None]) if valid is not None else None
        for layer in self.layers:
            x = layer(x, key_bias, frame_scale)
        return self.out_proj(self.out_norm(x))


class VectorFieldEstimator(Module):
    """Concatenated (x_t, text condition, speech condition) features plus
    time / guidance-strength embeddings -> estimated vector field."""

    def __init__(self, config: ModelConfig, rng):
        super().__init__()
        est = config.estimator
        d, f = config.feature_dim, config.text_feat_dim
        self.in_proj = Linear(2 * d + f, est.dim, rng)
        self.time_embed = ScalarEmbedding(est.dim, rng)
        if config.cfg_conditioned:
            self.omega_embed = ScalarEmbedding(est.dim, rng)
        else:
            self.omega_embed = None
        self.stacks = ModuleList([
            UNetStack(est.dim, est.ffn_dim, est.attn_heads, est.conv_kernel,
                      rate, n_layers, rng, config.ablation)
            for rate, n_layers in zip(est.stack_downsample_rates, est.stack_layers)
        ])
        self.out_norm = LayerNorm(est.dim)
        self.out_proj = Linear(est.dim, d, rng, zero_init=True)

    def __call__(self, x_t: Tensor, t: np.ndarray, z: Tensor, speech_cond: Tensor,
                 omega: np.ndarray | None = None,
                 valid: np.ndarray | None = None) -> Tensor:
        h = self.in_proj(dc.concat([x_t, z, speech_cond], axis=-1))
        h = dc.add(h, Tensor(sinusoid_positions(h.shape[-2], h.shape[-1], h.dtype)))
        te = self.time_embed(t)
        h = dc.add(h, dc.reshape(te, (te.shape[0], 1, te.shape[-1])))
        if omega is not None:
            oe = self.omega_embed(omega)
            h = dc.add(h, dc.reshape(oe, (oe.shape[0], 1, oe.shape[-1])))
        for stack in self.stacks:
            h = stack(h, valid)
        return self.out_proj(self.out_norm(h))


class TTSModel(Module):
    """Complete model: text encoder, vector field estimator, and the learned
    null-text and filler embeddings living in the text-condition space."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
        f = config.text_feat_dim
        self.text_encoder = TextEncoder(config, rng)
        self.vf = VectorFieldEstimator(config, rng)
        self.null_text_cond = Parameter(rng.standard_normal(f) / math.sqrt(f))
        self.filler_embed = Parameter(rng.standard_normal(f) / math.sqrt(f))
        self.assign_parameter_names()
        self.eval_count = 0

    @property
    def cfg_conditioned(self) -> bool:
        return self.config.cfg_conditioned

    def reset_eval_count(self) -> None:
        self.eval_count = 0

    # -- batched internals -------------------------------------------------

    def encode_tokens(self, ids: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
        return self.text_encoder(ids, valid)

    def estimate(self, x_t: Tensor, t: np.ndarray, z: Tensor, speech_cond: Tensor,
                 omega: np.ndarray | None = None,
                 valid: np.ndarray | None = None) -> Tensor:
        if (omega is not None) != self.config.cfg_conditioned:
            if omega is not None:
                raise ValueError("omega passed to a model without CFG-strength conditioning")
            raise ValueError("CFG-strength conditioned model requires omega")
        for other, name in ((z, "text condition"), (speech_cond, "speech condition")):
            if other.shape[-2] != x_t.shape[-2]:
                raise dc.ShapeError(
                    f"estimate: {name} length {other.shape[-2]} != input length "
                    f"{x_t.shape[-2]}"
                )
        self.eval_count += 1
        return self.vf(x_t, t, z, speech_cond, omega, valid)

    # -- public single-sequence surfaces ------------------------------------

    def text_encoder_forward(self, tokens: TokenSequence) -> Tensor:
        """Token sequence -> text features with shape (F, N)."""
        ids = np.asarray(tokens.ids, dtype=np.int64)[None, :]
        out = self.encode_tokens(ids)
        return dc.transpose(dc.reshape(out, out.shape[1:]), (1, 0))

    def vf_forward(self, x_t: Tensor, t: float, z, speech_cond: Tensor,
                   omega: float | None = None) -> Tensor:
        """Single-sequence estimator call: inputs (D, T)/(F, T) -> output (D, T)."""
        z_t = z.z if isinstance(z, TextCondition) else z
        bt = lambda m: dc.reshape(dc.transpose(m, (1, 0)),
                                  (1, m.shape[1], m.shape[0]))
        t_arr = np.array([t], dtype=x_t.dtype)
        omega_arr = None if omega is None else np.array([omega], dtype=x_t.dtype)
        out = self.estimate(bt(x_t), t_arr, bt(z_t), bt(speech_cond), omega_arr)
        return dc.transpose(dc.reshape(out, out.shape[1:]), (1, 0))

    def solve_field(self, x: np.ndarray, t: float, conditions,
                    drop_text: bool = False, drop_speech: bool = False,
                    omega: float | None = None) -> np.ndarray:
        """Single-sequence field evaluation for ODE solvers (no tape).

        `conditions` carries .z (T, F) and .speech_cond (T, D) arrays; dropping
        swaps in the learned null-text embedding / zeroed speech condition.
        """
        dtype = x.dtype
        with dc.no_grad():
            if drop_text:
                z = np.broadcast_to(
                    self.null_text_cond.data.astype(dtype),
                    (x.shape[0], self.config.text_feat_dim),
                )
            else:
                z = conditions.z
            speech = (np.zeros_like(conditions.speech_cond) if drop_speech
                      else conditions.speech_cond)
            t_arr = np.array([t], dtype=dtype)
            omega_arr = None if omega is None else np.array([omega], dtype=dtype)
            out = self.estimate(
                Tensor(x[None]), t_arr, Tensor(np.ascontiguousarray(z[None])),
                Tensor(speech[None]), omega_arr,
            )
        return out.data[0]

    # -- checkpoint glue ------------------------------------------------------

    def export_params(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def import_params(self, params: dict, allow_missing: bool = False) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(params))
        extra = sorted(set(params) - set(own))
        if extra:
            raise ConfigError(f"checkpoint has unknown parameters: {extra[:5]}")
        if missing and not allow_missing:
            raise ConfigError(f"checkpoint is missing parameters: {missing[:5]}")
        for name, arr in params.items():
            if own[name].data.shape != arr.shape:
                raise ConfigError(
                    f"parameter {name!r}: checkpoint shape {arr.shape} != model "
                    f"shape {own[name].data.shape}"
                )
            own[name].data = arr.astype(dc.default_dtype(), copy=True)

    @classmethod
    def from_config_dict(cls, config: dict, params: dict, seed: int = 0) -> "TTSModel":
        model = cls(ModelConfig.from_dict(config), seed=seed)
        model.import_params(params)
        return model

    def set_record_attention(self, enabled: bool) -> None:
        for _, mod in self._iter_layers():
            mod.record_attention = enabled
            mod.recorded_attention = {}

    def _iter_layers(self):
        for si, stack in enumerate(self.vf.stacks):
            for li, layer in enumerate(stack.layers):
                yield f"vf.stacks.{si}.layers.{li}", layer
