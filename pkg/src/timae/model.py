"""The Ti-MAE network: conv embedding, masking, asymmetric encoder/decoder.

Tokens are timesteps. A 1-D convolution (k=3, s=1, p=1) embeds each window,
a fixed sinusoidal table is added, and only the visible tokens go through the
encoder. The decoder narrows the width to ``d_decoder``, pads the masked
positions with a mask token, re-adds positional encoding over the full
length and projects every timestep back to ``out_channels`` values.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ParameterError, ShapeError
from .tensor import Tensor

MASK_STRATEGIES = ("random", "continuous", "split", "periodic")
PERIODIC_RUN = 4


@dataclass
class ModelConfig:
    in_channels: int = 1
    out_channels: int = 1
    window_len: int = 300
    d_model: int = 64
    d_decoder: int = 32
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_mult: int = 4
    dropout_p: float = 0.1
    mask_ratio: float = 0.75
    conv_kernel: int = 3
    conv_stride: int = 1
    conv_padding: int = 1
    use_encoder_pe: bool = True
    use_decoder_pe: bool = True
    norm: str = "pre"
    activation: str = "gelu"
    mask_token_init: str = "zeros"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("in_channels", "out_channels", "window_len", "d_model", "d_decoder", "n_heads", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads or self.d_decoder % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} and d_decoder={self.d_decoder} must be divisible by n_heads={self.n_heads}")
        if self.d_model % 2 or self.d_decoder % 2:
            raise ConfigError("positional encoding needs even widths")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.norm not in ("pre", "post"):
            raise ConfigError(f"norm must be 'pre' or 'post', got {self.norm!r}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.mask_token_init not in ("zeros", "random"):
            raise ConfigError(f"mask_token_init must be 'zeros' or 'random', got {self.mask_token_init!r}")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ConfigError("layer counts must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ------------------------------------------------------------------ masking
@dataclass(frozen=True)
class MaskSpec:
    strategy: str
    ratio: float
    length: int
    visible_idx: np.ndarray = field(repr=False)
    masked_idx: np.ndarray = field(repr=False)

    @property
    def n_visible(self) -> int:
        return int(self.visible_idx.size)

    @property
    def n_masked(self) -> int:
        return int(self.masked_idx.size)

    def indicator(self) -> np.ndarray:
        """Boolean [L] array, True at masked positions."""
        out = np.zeros(self.length, dtype=bool)
        out[self.masked_idx] = True
        return out


def n_masked_for(length: int, ratio: float) -> int:
    # half-up rounding; Python's round() would send 0.5 to the even neighbour
    return int(math.floor(ratio * length + 0.5))


def _periodic_positions(length: int, n_mask: int, rng: np.random.Generator) -> np.ndarray:
    runs = [PERIODIC_RUN] * (n_mask // PERIODIC_RUN)
    if n_mask % PERIODIC_RUN:
        runs.append(n_mask % PERIODIC_RUN)
    period = length / len(runs)
    starts = np.floor(np.arange(len(runs)) * period).astype(int)
    slack = length - (starts[-1] + runs[-1])
    starts = starts + int(rng.integers(0, slack + 1))
    return np.concatenate([np.arange(s, s + n) for s, n in zip(starts, runs)])


def make_mask(length: int, strategy: str, ratio: float, rng: np.random.Generator, draw: int | None = None) -> MaskSpec:
    """Partition ``range(length)`` into visible and masked positions.

    ``random`` samples uniformly without replacement; ``continuous`` masks
    the tail; ``split`` masks the tail on even draws and the head on odd ones
    (a coin flip when ``draw`` is None); ``periodic`` places runs of four
    masked tokens at equidistant offsets with a random phase. A trailing
    shorter run absorbs counts that are not a multiple of four.
    """
    if strategy not in MASK_STRATEGIES:
        raise ParameterError(f"unknown mask strategy {strategy!r}; expected one of {MASK_STRATEGIES}")
    if not 0.0 <= ratio < 1.0:
        raise ParameterError(f"mask ratio must lie in [0, 1), got {ratio}")
    n_mask = n_masked_for(length, ratio)
    if n_mask >= length:
        raise ParameterError(f"ratio {ratio} masks all {length} tokens; nothing left visible")

    if n_mask == 0:
        masked = np.empty(0, dtype=np.int64)
    elif strategy == "random":
        masked = rng.permutation(length)[:n_mask]
    elif strategy == "continuous":
        masked = np.arange(length - n_mask, length)
    elif strategy == "split":
        head = bool(rng.integers(2)) if draw is None else draw % 2 == 1
        masked = np.arange(n_mask) if head else np.arange(length - n_mask, length)
    else:
        masked = _periodic_positions(length, n_mask, rng)

    flags = np.zeros(length, dtype=bool)
    flags[masked] = True
    return MaskSpec(
        strategy=strategy,
        ratio=float(ratio),
        length=length,
        visible_idx=np.flatnonzero(~flags),
        masked_idx=np.flatnonzero(flags),
    )


def full_visible(length: int) -> MaskSpec:
    return MaskSpec("random", 0.0, length, np.arange(length), np.empty(0, dtype=np.int64))


def stack_masks(masks: MaskSpec | Sequence[MaskSpec], batch: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row visible/masked index arrays [B, V] and [B, M]."""
    if isinstance(masks, MaskSpec):
        return (
            np.broadcast_to(masks.visible_idx, (batch, masks.n_visible)),
            np.broadcast_to(masks.masked_idx, (batch, masks.n_masked)),
        )
    masks = list(masks)
    if len(masks) != batch:
        raise ShapeError(f"{len(masks)} masks for a batch of {batch}")
    if len({m.n_visible for m in masks}) != 1:
        raise ShapeError("masks in one batch must have equal visible counts")
    return np.stack([m.visible_idx for m in masks]), np.stack([m.masked_idx for m in masks])


# -------------------------------------------------------------- positional
@functools.lru_cache(maxsize=64)
def _pe_table(length: int, d: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    two_i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, two_i / d)
    pe = np.empty((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.flags.writeable = False
    return pe


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Fixed sinusoidal table [length, d]; cached per (length, d)."""
    if d % 2:
        raise ConfigError(f"positional encoding needs an even width, got {d}")
    return _pe_table(int(length), int(d))


# ------------------------------------------------------------------ network
def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class TiMaeModel:
    """Parameters live in ``self.params`` keyed by dotted names."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        p: dict[str, Tensor] = {}

        def leaf(arr):
            return Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True)

        def add_linear(name, fan_in, fan_out):
            p[f"{name}.weight"] = leaf(xavier_uniform(rng, fan_in, fan_out, (fan_in, fan_out), self.dtype))
            p[f"{name}.bias"] = leaf(np.zeros(fan_out))

        def add_block(prefix, d):
            for ln in ("ln1", "ln2"):
                p[f"{prefix}.{ln}.gamma"] = leaf(np.ones(d))
                p[f"{prefix}.{ln}.beta"] = leaf(np.zeros(d))
            for proj in ("q", "k", "v", "o"):
                add_linear(f"{prefix}.attn.{proj}", d, d)
            add_linear(f"{prefix}.mlp.fc1", d, cfg.ffn_mult * d)
            add_linear(f"{prefix}.mlp.fc2", cfg.ffn_mult * d, d)

        k, m, d, dd = cfg.conv_kernel, cfg.in_channels, cfg.d_model, cfg.d_decoder
        p["embed.kernel"] = leaf(xavier_uniform(rng, k * m, k * d, (k, m, d), self.dtype))
        p["embed.bias"] = leaf(np.zeros(d))
        for i in range(cfg.enc_layers):
            add_block(f"encoder.{i}", d)
        add_linear("decoder.reduce", d, dd)
        if cfg.mask_token_init == "zeros":
            p["decoder.mask_token"] = leaf(np.zeros(dd))
        else:
            p["decoder.mask_token"] = leaf(rng.normal(0.0, 0.02, dd))
        for i in range(cfg.dec_layers):
            add_block(f"decoder.{i}", dd)
        add_linear("decoder.proj", dd, cfg.out_channels)
        self.params = p
        self._act = T.activation(cfg.activation)

    # ------------------------------------------------------------ plumbing
    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def encoder_parameter_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(("embed.", "encoder."))]

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def set_parameter(self, name: str, value: Tensor) -> None:
        if name not in self.params:
            raise KeyError(name)
        if value.shape != self.params[name].shape:
            raise ShapeError(f"{name}: expected shape {self.params[name].shape}, got {value.shape}")
        self.params[name] = value

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def _lin(self, x: Tensor, name: str) -> Tensor:
        return T.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _attention(self, x: Tensor, prefix: str) -> Tensor:
        B, N, d = x.shape
        h = self.cfg.n_heads
        dh = d // h

        def heads(t):
            return T.transpose(T.reshape(t, (B, N, h, dh)), (0, 2, 1, 3))

        # scaling q rather than the [N, N] scores is cheaper and identical
        q = heads(T.scale(self._lin(x, f"{prefix}.q"), 1.0 / math.sqrt(dh)))
        k = heads(self._lin(x, f"{prefix}.k"))
        v = heads(self._lin(x, f"{prefix}.v"))
        scores = T.matmul(q, T.swapaxes(k, -1, -2))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, N, d))
        return self._lin(ctx, f"{prefix}.o")

    def _mlp(self, x: Tensor, prefix: str) -> Tensor:
        return self._lin(self._act(self._lin(x, f"{prefix}.fc1")), f"{prefix}.fc2")

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"], self.cfg.ln_eps)

    def block(self, z: Tensor, prefix: str) -> Tensor:
        if self.cfg.norm == "pre":
            z = T.add(z, self._attention(self._ln(z, f"{prefix}.ln1"), f"{prefix}.attn"))
            return T.add(z, self._mlp(self._ln(z, f"{prefix}.ln2"), f"{prefix}.mlp"))
        z = self._ln(T.add(z, self._attention(z, f"{prefix}.attn")), f"{prefix}.ln1")
        return self._ln(T.add(z, self._mlp(z, f"{prefix}.mlp")), f"{prefix}.ln2")

    # ------------------------------------------------------------- forward
    def embed(self, x) -> Tensor:
        """[B, L, m] -> tokens [B, L, d_model]."""
        x = T.as_tensor(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[-1] != self.cfg.in_channels:
            raise ShapeError(f"expected input [B, L, {self.cfg.in_channels}], got {x.shape}")
        cfg = self.cfg
        tok = T.conv1d(x, self.params["embed.kernel"], self.params["embed.bias"], cfg.conv_stride, cfg.conv_padding)
        if cfg.use_encoder_pe:
            tok = T.add(tok, Tensor(positional_encoding(tok.shape[1], cfg.d_model).astype(self.dtype)))
        return tok

    def encode(self, tokens: Tensor, mask: MaskSpec | Sequence[MaskSpec] | np.ndarray) -> Tensor:
        """Run the encoder over visible tokens only: [B, L, d] -> [B, V, d]."""
        B, L, _ = tokens.shape
        vis = self._visible(mask, B, L)
        if vis.shape[1] == 0:
            raise ContractError("encoder needs at least one visible token")
        z = T.gather_rows(tokens, vis)
        for i in range(self.cfg.enc_layers):
            z = self.block(z, f"encoder.{i}")
        return z

    def decode(
        self,
        latents: Tensor,
        mask: MaskSpec | Sequence[MaskSpec],
        length: int | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """[B, V, d_model] encoded visible tokens -> reconstruction [B, L, out_channels]."""
        cfg = self.cfg
        B, V, _ = latents.shape
        if isinstance(mask, MaskSpec):
            length = mask.length
        elif length is None:
            length = list(mask)[0].length
        vis, masked = stack_masks(mask, B)
        if vis.shape[1] != V:
            raise ShapeError(f"{V} latent rows but the mask has {vis.shape[1]} visible positions")
        z = T.scatter_rows(self._lin(latents, "decoder.reduce"), vis, length)
        if masked.shape[1]:
            flags = np.zeros((B, length, 1), dtype=self.dtype)
            np.put_along_axis(flags, masked[:, :, None], 1.0, axis=1)
            z = T.add(z, T.mul(Tensor(flags), self.params["decoder.mask_token"]))
        if cfg.use_decoder_pe:
            z = T.add(z, Tensor(positional_encoding(length, cfg.d_decoder).astype(self.dtype)))
        z = T.dropout(z, cfg.dropout_p, training, rng)
        for i in range(cfg.dec_layers):
            z = self.block(z, f"decoder.{i}")
        return self._lin(z, "decoder.proj")

    def reconstruct(self, x, mask, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """embed -> encode -> decode; output covers every timestep."""
        tokens = self.embed(x)
        return self.decode(self.encode(tokens, mask), mask, tokens.shape[1], training, rng)

    def encode_full(self, x) -> Tensor:
        """Encoder output with nothing masked: [B, L, d_model]."""
        tokens = self.embed(x)
        z = tokens
        for i in range(self.cfg.enc_layers):
            z = self.block(z, f"encoder.{i}")
        return z

    @staticmethod
    def _visible(mask, B: int, L: int) -> np.ndarray:
        if isinstance(mask, np.ndarray):
            vis = mask if mask.ndim == 2 else np.broadcast_to(mask, (B, mask.size))
        else:
            if isinstance(mask, MaskSpec) and mask.length != L:
                raise ShapeError(f"mask is for length {mask.length}, tokens have length {L}")
            vis, _ = stack_masks(mask, B)
        return vis
