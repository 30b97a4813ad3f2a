"""End-to-end model: extraction, the classifier head, the loss, and the full
prediction path from episode to logits.

Besides the per-episode reference path (:func:`predict`), this module holds
the batched forwards used by training and evaluation: leave-one-out pools and
shared-support query sets are assembled into one (B, L, d_model) tensor so a
whole batch runs through the encoder in a single pass. Tests pin the batched
paths to the per-episode path bit-for-bit (eval mode).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .context import (
    UNKNOWN,
    JointSequence,
    Layout,
    assemble_naive_icl,
)
from .encoder import (
    LabelTable,
    MpnnParams,
    embed_episode,
    encode_molecules,
    init_label_table,
    init_mpnn_params,
    register_mpnn_params,
)
from .moldata import Episode, LabeledMolecule
from .tensorcore import ParameterTree, Tensor
from .tensorcore import ops
from .tensorcore.init import truncated_normal, zeros
from .transformer import (
    AttentionRecord,
    EncoderConfig,
    EncoderParams,
    add_fixed_positional,
    encoder_forward,
    init_encoder_params,
    register_encoder_params,
)


class ModelError(Exception):
    """Raised on model configuration or usage errors."""


@dataclass
class ModelConfig:
    """Every knob of the full model; desk-scale defaults."""

    atom_feature_dim: int
    n_bond_types: int
    d_model: int = 128
    d_label: int = 0  # 0 -> d_model // 8
    d_node: int = 64
    mpnn_steps: int = 3
    n_layers: int = 4
    n_heads: int = 4
    d_mlp: int = 512
    d_head: int = 0  # 0 -> d_model
    dropout_rate: float = 0.1
    use_positional: bool = False
    layout: Layout = Layout.CAMP

    def __post_init__(self):
        if self.d_label == 0:
            self.d_label = max(1, self.d_model // 8)
        if self.d_head == 0:
            self.d_head = self.d_model
        if self.layout is Layout.CAMP and self.d_label >= self.d_model:
            raise ModelError("d_label must be smaller than d_model")

    @property
    def d_mol(self) -> int:
        """Molecule embedding width: the label rows fill the rest of d_model
        in the joint layout; interleaved tokens use the full width."""
        if self.layout is Layout.CAMP:
            return self.d_model - self.d_label
        return self.d_model

    @property
    def token_label_width(self) -> int:
        return self.d_label if self.layout is Layout.CAMP else self.d_model

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_model=self.d_model,
            d_mlp=self.d_mlp,
            dropout_rate=self.dropout_rate,
            use_positional=self.use_positional,
        )

    @classmethod
    def full_scale(cls, atom_feature_dim: int, n_bond_types: int, **overrides) -> "ModelConfig":
        base = dict(
            d_model=768, n_layers=12, n_heads=12, d_mlp=3072, dropout_rate=0.2
        )
        base.update(overrides)
        return cls(atom_feature_dim, n_bond_types, **base)


@dataclass
class HeadParams:
    """One hidden GELU layer, then two logits."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def init_head_params(rng: np.random.Generator, d_model: int, d_head: int) -> HeadParams:
    # Fan-in scaling; the 0.02 transformer convention is kept for the encoder
    # stack only, where layer norm rescales the residual stream.
    return HeadParams(
        w1=truncated_normal(rng, (d_model, d_head), std=np.sqrt(2.0 / d_model)),
        b1=zeros((d_head,)),
        w2=truncated_normal(rng, (d_head, 2), std=np.sqrt(2.0 / d_head)),
        b2=zeros((2,)),
    )


def head_forward(head: HeadParams, x: Tensor) -> Tensor:
    hidden = ops.gelu(ops.add(ops.matmul(x, head.w1), head.b1))
    return ops.add(ops.matmul(hidden, head.w2), head.b2)


@dataclass
class Prediction:
    logits: np.ndarray
    probability_positive: float


@dataclass
class CampModel:
    config: ModelConfig
    mpnn: MpnnParams
    table: LabelTable
    encoder: EncoderParams
    head: HeadParams
    params: ParameterTree

    def clone_values(self) -> dict[str, np.ndarray]:
        return self.params.value_dict()

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        self.params.load_value_dict(values)


def build_model(config: ModelConfig, seed: int) -> CampModel:
    rng = np.random.default_rng(seed)
    mpnn = init_mpnn_params(
        rng,
        atom_feature_dim=config.atom_feature_dim,
        n_bond_types=config.n_bond_types,
        d_node=config.d_node,
        d_mol=config.d_mol,
        steps=config.mpnn_steps,
    )
    table = init_label_table(rng, config.token_label_width)
    encoder = init_encoder_params(rng, config.encoder_config())
    head = init_head_params(rng, config.d_model, config.d_head)
    tree = ParameterTree()
    register_mpnn_params(tree, mpnn)
    tree.register("label_table", table.table)
    register_encoder_params(tree, encoder)
    tree.register("head.w1", head.w1)
    tree.register("head.b1", head.b1)
    tree.register("head.w2", head.w2)
    tree.register("head.b2", head.b2)
    return CampModel(config=config, mpnn=mpnn, table=table, encoder=encoder, head=head, params=tree)


def extract_query(rows: Tensor, query_index: int) -> Tensor:
    """Return row ``query_index`` unchanged (the extraction function)."""
    if rows.ndim != 2:
        raise ModelError("extract_query expects (L, d_model) rows")
    if not 0 <= query_index < rows.shape[0]:
        raise ModelError(
            f"query index {query_index} outside sequence of length {rows.shape[0]}"
        )
    return ops.row(rows, query_index)


def episode_sequence(model: CampModel, episode: Episode) -> JointSequence:
    """Assemble one episode's joint sequence in the model's layout."""
    if model.config.layout is Layout.CAMP:
        return embed_episode(episode, model.mpnn, model.table)
    graphs = [m.graph for m in episode.support] + [episode.query.graph]
    mol_embs = encode_molecules(graphs, model.mpnn)
    labels = np.array([m.label for m in episode.support], dtype=np.intp)
    label_embs = ops.index_rows(model.table.table, labels)
    return assemble_naive_icl(mol_embs, label_embs)


def episode_logits(
    model: CampModel,
    episode: Episode,
    train: bool = False,
    dropout_rng: Optional[np.random.Generator] = None,
    capture: bool = False,
) -> tuple[Tensor, Optional[list[AttentionRecord]]]:
    """Per-episode forward: embed, encode, extract, classify."""
    seq = episode_sequence(model, episode)
    rows = seq.rows
    if model.config.use_positional:
        rows = add_fixed_positional(rows)
    out, records = encoder_forward(
        rows,
        model.encoder,
        model.config.encoder_config(),
        train=train,
        dropout_rng=dropout_rng,
        capture=capture,
    )
    logits = head_forward(model.head, extract_query(out, seq.query_index))
    return logits, records


def predict(episode: Episode, model: CampModel) -> Prediction:
    """Deterministic eval-mode prediction for one episode."""
    logits, _ = episode_logits(model, episode, train=False)
    probs = ops.apply_softmax(logits.data)
    return Prediction(logits=logits.data.copy(), probability_positive=float(probs[1]))


def episode_loss(logits: Tensor, label: int) -> Tensor:
    """Cross entropy -log softmax(logits)[label] as a scalar tensor."""
    if label not in (0, 1):
        raise ModelError(f"label must be 0 or 1, got {label}")
    return ops.neg(ops.row(ops.log_softmax(logits), label))


# ---------------------------------------------------------------------------
# batched forwards


def _pool_sequence_block(
    model: CampModel, pool: Sequence[LabeledMolecule]
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """All leave-one-out episodes of one pool as an (n, L, d_model) tensor.

    Episode j designates pool[j] as the query. Returns (sequences, query row
    index per episode, query label per episode).
    """
    n = len(pool)
    if n < 2:
        raise ModelError("leave-one-out pools need at least 2 molecules")
    mol_embs = encode_molecules([m.graph for m in pool], model.mpnn)
    labels = np.array([m.label for m in pool], dtype=np.intp)
    if model.config.layout is Layout.CAMP:
        # Episode j: query (pool[j], UNKNOWN label) at row 0, then the other
        # molecules in pool order, matching the per-episode path's row order
        # so both paths agree bit-for-bit.
        order = np.empty((n, n), dtype=np.intp)
        ids = np.empty((n, n), dtype=np.intp)
        for j in range(n):
            others = np.concatenate([np.arange(j), np.arange(j + 1, n)])
            order[j, 0] = j
            order[j, 1:] = others
            ids[j, 0] = UNKNOWN
            ids[j, 1:] = labels[others]
        mols = ops.reshape(
            ops.index_rows(mol_embs, order.reshape(-1)), (n, n, model.config.d_mol)
        )
        label_rows = ops.reshape(
            ops.index_rows(model.table.table, ids.reshape(-1)),
            (n, n, model.config.d_label),
        )
        seqs = ops.concat([mols, label_rows], axis=-1)
        query_rows = np.zeros(n, dtype=np.intp)
        return seqs, query_rows, labels
    # Interleaved layout: episode j lists the other n-1 molecules as
    # (molecule, label) token pairs, then pool[j] as the final query token.
    label_embs = ops.index_rows(model.table.table, labels)
    combined = ops.concat([mol_embs, label_embs], axis=0)  # mol i -> i, label i -> n+i
    length = 2 * (n - 1) + 1
    order = np.empty((n, length), dtype=np.intp)
    for j in range(n):
        others = np.concatenate([np.arange(j), np.arange(j + 1, n)])
        order[j, 0 : 2 * (n - 1) : 2] = others
        order[j, 1 : 2 * (n - 1) : 2] = n + others
        order[j, -1] = j
    seqs = ops.reshape(
        ops.index_rows(combined, order.reshape(-1)), (n, length, model.config.d_model)
    )
    query_rows = np.full(n, length - 1, dtype=np.intp)
    return seqs, query_rows, labels


def pools_logits(
    model: CampModel,
    pools: Sequence[Sequence[LabeledMolecule]],
    train: bool = False,
    dropout_rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, np.ndarray]:
    """Batched leave-one-out forward over same-size pools.

    Returns (logits tensor of shape (total_episodes, 2), query labels); the
    episode order is pool-major, query-position-minor.
    """
    sizes = {len(p) for p in pools}
    if len(sizes) != 1:
        raise ModelError(f"pools in one batch must share a size, got {sorted(sizes)}")
    blocks, query_rows, labels = zip(*(_pool_sequence_block(model, p) for p in pools))
    seqs = blocks[0] if len(blocks) == 1 else ops.concat(list(blocks), axis=0)
    if model.config.use_positional:
        seqs = add_fixed_positional(seqs)
    out, _ = encoder_forward(
        seqs,
        model.encoder,
        model.config.encoder_config(),
        train=train,
        dropout_rng=dropout_rng,
    )
    batch, length, d_model = out.shape
    flat = ops.reshape(out, (batch * length, d_model))
    qrows = np.concatenate(query_rows)
    positions = np.arange(batch) * length + qrows
    logits = head_forward(model.head, ops.index_rows(flat, positions))
    return logits, np.concatenate(labels)


def shared_support_logits(
    model: CampModel,
    support: Sequence[LabeledMolecule],
    queries: Sequence[LabeledMolecule],
) -> np.ndarray:
    """Eval-mode logits for many queries against one support set.

    Equivalent to one episode per query; returns an (n_queries, 2) array.
    """
    n_q, k = len(queries), len(support)
    if n_q == 0 or k == 0:
        raise ModelError("need at least one query and one demonstration")
    graphs = [q.graph for q in queries] + [m.graph for m in support]
    mol_embs = encode_molecules(graphs, model.mpnn)
    q_embs = ops.index_rows(mol_embs, np.arange(n_q))
    s_embs = ops.index_rows(mol_embs, n_q + np.arange(k))
    s_labels = np.array([m.label for m in support], dtype=np.intp)
    if model.config.layout is Layout.CAMP:
        support_rows = ops.concat(
            [s_embs, ops.index_rows(model.table.table, s_labels)], axis=-1
        )
        unk = ops.index_rows(model.table.table, np.full(n_q, UNKNOWN, dtype=np.intp))
        query_rows = ops.concat([q_embs, unk], axis=-1)
        seqs = ops.concat(
            [
                ops.reshape(query_rows, (n_q, 1, model.config.d_model)),
                ops.expand0(support_rows, n_q),
            ],
            axis=1,
        )
        query_index = 0
    else:
        label_embs = ops.index_rows(model.table.table, s_labels)
        demo_block = ops.reshape(
            ops.concat([s_embs, label_embs], axis=-1), (2 * k, model.config.d_model)
        )
        seqs = ops.concat(
            [
                ops.expand0(demo_block, n_q),
                ops.reshape(q_embs, (n_q, 1, model.config.d_model)),
            ],
            axis=1,
        )
        query_index = 2 * k
    if model.config.use_positional:
        seqs = add_fixed_positional(seqs)
    out, _ = encoder_forward(seqs, model.encoder, model.config.encoder_config())
    length = out.shape[1]
    flat = ops.reshape(out, (n_q * length, model.config.d_model))
    positions = np.arange(n_q) * length + query_index
    logits = head_forward(model.head, ops.index_rows(flat, positions))
    return logits.data.copy()
