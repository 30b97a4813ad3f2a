"""Molecule and label encoders.

The molecule encoder is a message passing network: per-bond-type linear
messages from in-neighbors are sum-aggregated, node states update through a
GELU projection of [state || aggregate], and a mean-pool readout projects to
the molecule embedding. The label encoder is a 3-row embedding table (rows
NEGATIVE, POSITIVE, and the learnable UNKNOWN row that stands in for the
query's missing label).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .context import UNKNOWN, JointSequence, assemble_camp
from .moldata import NEGATIVE, POSITIVE, AtomGraph, Episode
from .tensorcore import ParameterTree, Tensor
from .tensorcore import ops
from .tensorcore.init import truncated_normal, zeros

LABEL_ROWS = 3  # NEGATIVE, POSITIVE, UNKNOWN


class EncoderError(Exception):
    """Raised on graph/parameter mismatches during encoding."""


@dataclass
class MpnnParams:
    """Message passing weights: input/update/readout projections plus one
    message matrix per bond type."""

    w_in: Tensor
    b_in: Tensor
    messages: list[Tensor]
    w_update: Tensor
    b_update: Tensor
    w_readout: Tensor
    b_readout: Tensor
    steps: int

    @property
    def feature_dim(self) -> int:
        return self.w_in.shape[0]

    @property
    def d_node(self) -> int:
        return self.w_in.shape[1]

    @property
    def d_mol(self) -> int:
        return self.w_readout.shape[1]

    @property
    def n_bond_types(self) -> int:
        return len(self.messages)


def _he_std(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


def init_mpnn_params(
    rng: np.random.Generator,
    atom_feature_dim: int,
    n_bond_types: int,
    d_node: int,
    d_mol: int,
    steps: int,
) -> MpnnParams:
    """Fan-in scaled weights (the transformer's 0.02 convention would shrink
    node states by orders of magnitude over the message-passing rounds).

    Message matrices get half the He variance: sum-aggregation over the
    typical 2+ in-neighbors would otherwise roughly double the node-state
    energy every round, leaving molecule dims drowning out label dims in the
    joint rows.
    """
    if min(atom_feature_dim, n_bond_types, d_node, d_mol) < 1 or steps < 0:
        raise EncoderError("all encoder dimensions must be positive (steps >= 0)")
    return MpnnParams(
        w_in=truncated_normal(rng, (atom_feature_dim, d_node), std=_he_std(atom_feature_dim)),
        b_in=zeros((d_node,)),
        messages=[
            truncated_normal(rng, (d_node, d_node), std=np.sqrt(0.5 / d_node))
            for _ in range(n_bond_types)
        ],
        w_update=truncated_normal(rng, (2 * d_node, d_node), std=_he_std(2 * d_node)),
        b_update=zeros((d_node,)),
        w_readout=truncated_normal(rng, (d_node, d_mol), std=_he_std(d_node)),
        b_readout=zeros((d_mol,)),
        steps=steps,
    )


def register_mpnn_params(tree: ParameterTree, params: MpnnParams, prefix: str = "mpnn") -> None:
    tree.register(f"{prefix}.w_in", params.w_in)
    tree.register(f"{prefix}.b_in", params.b_in)
    for t, msg in enumerate(params.messages):
        tree.register(f"{prefix}.message{t}", msg)
    tree.register(f"{prefix}.w_update", params.w_update)
    tree.register(f"{prefix}.b_update", params.b_update)
    tree.register(f"{prefix}.w_readout", params.w_readout)
    tree.register(f"{prefix}.b_readout", params.b_readout)


def encode_molecules(graphs: list[AtomGraph], params: MpnnParams) -> Tensor:
    """Encode a batch of molecules as one disconnected union graph.

    Returns an (n_graphs, d_mol) tensor; row order matches the input order.
    The union trick shares the message-passing matmuls across molecules and
    cannot leak information between them (there are no cross-molecule edges).
    """
    if not graphs:
        raise EncoderError("encode_molecules needs at least one graph")
    offsets = []
    total = 0
    for g, graph in enumerate(graphs):
        if graph.feature_dim != params.feature_dim:
            raise EncoderError(
                f"graph {g}: feature width {graph.feature_dim} != encoder width "
                f"{params.feature_dim}"
            )
        offsets.append(total)
        total += graph.n_atoms

    # Constant per-bond-type adjacency (dst, src) and mean-pool matrices.
    adjacency = np.zeros((params.n_bond_types, total, total))
    pool = np.zeros((len(graphs), total))
    for g, (graph, off) in enumerate(zip(graphs, offsets)):
        for src, dst, bond in graph.edges:
            if bond >= params.n_bond_types:
                raise EncoderError(
                    f"graph {g}: unknown bond type {bond} (encoder has "
                    f"{params.n_bond_types})"
                )
            adjacency[bond, off + dst, off + src] = 1.0
        pool[g, off : off + graph.n_atoms] = 1.0 / graph.n_atoms

    atoms = Tensor(np.concatenate([g.atoms for g in graphs], axis=0))
    h = ops.add(ops.matmul(atoms, params.w_in), params.b_in)
    adj_tensors = [
        Tensor(adjacency[t], _own=True) if adjacency[t].any() else None
        for t in range(params.n_bond_types)
    ]
    for _ in range(params.steps):
        agg = None
        for msg, adj in zip(params.messages, adj_tensors):
            if adj is None:
                continue
            contrib = ops.matmul(adj, ops.matmul(h, msg))
            agg = contrib if agg is None else ops.add(agg, contrib)
        if agg is None:
            agg = Tensor(np.zeros((total, params.d_node)))
        stacked = ops.concat([h, agg], axis=-1)
        h = ops.gelu(ops.add(ops.matmul(stacked, params.w_update), params.b_update))
    pooled = ops.matmul(Tensor(pool, _own=True), h)
    return ops.add(ops.matmul(pooled, params.w_readout), params.b_readout)


def encode_molecule(graph: AtomGraph, params: MpnnParams) -> Tensor:
    """Single-molecule embedding (d_mol vector)."""
    return ops.row(encode_molecules([graph], params), 0)


@dataclass
class LabelTable:
    """Embedding table with exactly three rows: NEGATIVE, POSITIVE, UNKNOWN."""

    table: Tensor

    def __post_init__(self):
        if self.table.ndim != 2 or self.table.shape[0] != LABEL_ROWS:
            raise EncoderError(f"label table must have {LABEL_ROWS} rows")

    @property
    def d_label(self) -> int:
        return self.table.shape[1]


def init_label_table(rng: np.random.Generator, d_label: int) -> LabelTable:
    # Unit scale, the embedding-table convention; matches the per-dim RMS of
    # the molecule embeddings so label dims carry their share of row energy.
    return LabelTable(truncated_normal(rng, (LABEL_ROWS, d_label), std=1.0))


def encode_label(label_id: int, table: LabelTable) -> Tensor:
    """Row lookup; equivalent to one_hot(label_id) @ table."""
    if label_id not in (NEGATIVE, POSITIVE, UNKNOWN):
        raise EncoderError(f"label id {label_id} out of range")
    return ops.row(table.table, label_id)


def embed_episode(episode: Episode, mpnn: MpnnParams, table: LabelTable) -> JointSequence:
    """Joint sequence of [molecule || label] rows; the query sits at row 0
    carrying the UNKNOWN label row."""
    graphs = [episode.query.graph] + [m.graph for m in episode.support]
    mol_embs = encode_molecules(graphs, mpnn)
    labels = [m.label for m in episode.support]
    return assemble_camp(mol_embs, labels, table.table)
