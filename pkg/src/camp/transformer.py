"""Permutation-equivariant transformer encoder.

Pre-norm blocks (x += MHSA(LN(x)); x += MLP(LN(x))) with a final layer norm
and no positional information by default, so permuting the input rows
permutes the output rows identically. Fixed sinusoidal embeddings can be
added for the order-sensitivity ablation, and per-head attention matrices can
be captured for analysis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensorcore import ParameterTree, Tensor
from .tensorcore import ops
from .tensorcore.init import ones, truncated_normal, zeros


class TransformerError(Exception):
    """Raised on configuration/shape violations."""


@dataclass
class EncoderConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_mlp: int = 512
    dropout_rate: float = 0.1
    use_positional: bool = False

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.d_model, self.d_mlp) < 1:
            raise TransformerError("all encoder dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise TransformerError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise TransformerError("dropout_rate must lie in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def desk(cls, **overrides) -> "EncoderConfig":
        """Desk-scale profile (trainable on one CPU core in minutes)."""
        return cls(**{**dict(n_layers=4, n_heads=4, d_model=128, d_mlp=512), **overrides})

    @classmethod
    def full_scale(cls, **overrides) -> "EncoderConfig":
        """The large "base"-variant profile (12 layers, 12 heads, 768 wide)."""
        return cls(
            **{**dict(n_layers=12, n_heads=12, d_model=768, d_mlp=3072, dropout_rate=0.2),
               **overrides}
        )


@dataclass
class LayerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderParams:
    layers: list[LayerParams]
    final_gain: Tensor
    final_bias: Tensor


@dataclass
class AttentionRecord:
    """Row-oriented attention weights: weights[i][j] is how strongly sequence
    element i attends to element j."""

    layer: int
    head: int
    weights: np.ndarray

    @property
    def length(self) -> int:
        return self.weights.shape[0]

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "head": self.head,
            "L": int(self.weights.shape[0]),
            "weights": self.weights.reshape(-1).tolist(),  # row-major
        }


def init_encoder_params(rng: np.random.Generator, config: EncoderConfig) -> EncoderParams:
    d, m = config.d_model, config.d_mlp
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerParams(
                ln1_gain=ones((d,)),
                ln1_bias=zeros((d,)),
                wq=truncated_normal(rng, (d, d)),
                bq=zeros((d,)),
                wk=truncated_normal(rng, (d, d)),
                bk=zeros((d,)),
                wv=truncated_normal(rng, (d, d)),
                bv=zeros((d,)),
                wo=truncated_normal(rng, (d, d)),
                bo=zeros((d,)),
                ln2_gain=ones((d,)),
                ln2_bias=zeros((d,)),
                w1=truncated_normal(rng, (d, m)),
                b1=zeros((m,)),
                w2=truncated_normal(rng, (m, d)),
                b2=zeros((d,)),
            )
        )
    return EncoderParams(layers=layers, final_gain=ones((d,)), final_bias=zeros((d,)))


def register_encoder_params(
    tree: ParameterTree, params: EncoderParams, prefix: str = "encoder"
) -> None:
    for i, layer in enumerate(params.layers):
        for name in (
            "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv",
            "wo", "bo", "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2",
        ):
            tree.register(f"{prefix}.layer{i}.{name}", getattr(layer, name))
    tree.register(f"{prefix}.final_gain", params.final_gain)
    tree.register(f"{prefix}.final_bias", params.final_bias)


def sinusoid_table(length: int, d_model: int) -> np.ndarray:
    """Fixed positional table: even channels sin, odd channels cos."""
    pos = np.arange(length)[:, None]
    channel = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (channel // 2)) / d_model)
    table = np.where(channel % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def add_fixed_positional(rows: Tensor) -> Tensor:
    """Add the sinusoid table row-wise by sequence position (last two axes
    are (L, d_model); leading batch axes broadcast)."""
    length, d_model = rows.shape[-2], rows.shape[-1]
    return ops.add(rows, Tensor(sinusoid_table(length, d_model), _own=True))


def encoder_forward(
    x: Tensor,
    params: EncoderParams,
    config: EncoderConfig,
    train: bool = False,
    dropout_rng: Optional[np.random.Generator] = None,
    capture: bool = False,
) -> tuple[Tensor, Optional[list[AttentionRecord]]]:
    """Run the encoder over (L, d_model) rows, or a (B, L, d_model) batch.

    With ``capture`` (rank-2 input only) every (layer, head) attention matrix
    is recorded after softmax, before attention dropout. Dropout is active
    only with ``train=True`` and requires an explicit generator, keeping
    train-mode forwards reproducible.
    """
    if x.shape[-1] != config.d_model:
        raise TransformerError(
            f"sequence width {x.shape[-1]} != d_model {config.d_model}"
        )
    if x.ndim not in (2, 3):
        raise TransformerError("encoder input must be rank 2 or 3")
    if capture and x.ndim != 2:
        raise TransformerError("attention capture supports single sequences only")
    if train and config.dropout_rate > 0 and dropout_rng is None:
        raise TransformerError("train-mode forward needs a dropout generator")

    def drop(t: Tensor) -> Tensor:
        if train and config.dropout_rate > 0:
            return ops.dropout(t, config.dropout_rate, dropout_rng)
        return t

    dh = config.d_head
    inv_sqrt_dh = 1.0 / np.sqrt(dh)
    records: list[AttentionRecord] = [] if capture else None

    for layer_no, layer in enumerate(params.layers):
        h = ops.layer_norm(x, layer.ln1_gain, layer.ln1_bias)
        q = ops.add(ops.matmul(h, layer.wq), layer.bq)
        k = ops.add(ops.matmul(h, layer.wk), layer.bk)
        v = ops.add(ops.matmul(h, layer.wv), layer.bv)
        head_outputs = []
        for head in range(config.n_heads):
            lo, hi = head * dh, (head + 1) * dh
            scores = ops.scale(
                ops.matmul(ops.slice_last(q, lo, hi), ops.transpose_last2(ops.slice_last(k, lo, hi))),
                inv_sqrt_dh,
            )
            attn = ops.softmax(scores)
            if capture:
                records.append(
                    AttentionRecord(layer=layer_no, head=head, weights=attn.data.copy())
                )
            head_outputs.append(ops.matmul(drop(attn), ops.slice_last(v, lo, hi)))
        merged = ops.concat(head_outputs, axis=-1)
        attn_out = drop(ops.add(ops.matmul(merged, layer.wo), layer.bo))
        x = ops.add(x, attn_out)

        h2 = ops.layer_norm(x, layer.ln2_gain, layer.ln2_bias)
        mid = drop(ops.gelu(ops.add(ops.matmul(h2, layer.w1), layer.b1)))
        mlp_out = drop(ops.add(ops.matmul(mid, layer.w2), layer.b2))
        x = ops.add(x, mlp_out)

    out = ops.layer_norm(x, params.final_gain, params.final_bias)
    return out, records
