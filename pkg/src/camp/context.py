"""Sequence assembly for the two context layouts.

The standard layout concatenates each molecule embedding with its label
embedding into one row per example (k demonstrations plus the query, which
carries the UNKNOWN label row). The naive in-context layout instead
interleaves molecule and label tokens along the sequence dimension, ending
with the bare query molecule token.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .moldata import NEGATIVE, POSITIVE
from .tensorcore import Tensor
from .tensorcore import ops

UNKNOWN = 2


class Layout(enum.Enum):
    CAMP = "camp"
    NAIVE_ICL = "naive_icl"


class LayoutError(Exception):
    """Raised when a sequence violates its declared layout."""


@dataclass
class JointSequence:
    """(L, d_model) sequence rows plus the query's position and layout tag."""

    rows: Tensor
    query_index: int
    layout: Layout

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise LayoutError(f"sequence rows must be rank 2, got {self.rows.shape}")
        if not 0 <= self.query_index < self.rows.shape[0]:
            raise LayoutError(
                f"query_index {self.query_index} outside sequence of length "
                f"{self.rows.shape[0]}"
            )

    @property
    def length(self) -> int:
        return self.rows.shape[0]

    @property
    def width(self) -> int:
        return self.rows.shape[1]


def assemble_camp(mol_embs: Tensor, labels: Sequence[int], label_table: Tensor) -> JointSequence:
    """Rows [molecule || label]; query at row 0 with the UNKNOWN label row.

    ``mol_embs`` is (k+1, d_mol) with the query embedding first; ``labels``
    are the k demonstration labels in order.
    """
    if mol_embs.ndim != 2 or mol_embs.shape[0] < 2:
        raise LayoutError("mol_embs must be (k+1, d_mol) with k >= 1")
    k = mol_embs.shape[0] - 1
    if len(labels) != k:
        raise LayoutError(f"expected {k} demonstration labels, got {len(labels)}")
    if any(l not in (NEGATIVE, POSITIVE) for l in labels):
        raise LayoutError("demonstration labels must be 0 or 1")
    ids = np.array([UNKNOWN] + [int(l) for l in labels], dtype=np.intp)
    label_rows = ops.index_rows(label_table, ids)
    rows = ops.concat([mol_embs, label_rows], axis=-1)
    return JointSequence(rows=rows, query_index=0, layout=Layout.CAMP)


def assemble_naive_icl(mol_embs: Tensor, label_embs: Tensor) -> JointSequence:
    """Interleaved tokens [mol_1, lab_1, ..., mol_k, lab_k, mol_query].

    ``mol_embs`` is (k+1, d_model) with the k demonstration molecules first
    and the query last; ``label_embs`` is (k, d_model). Length is 2k+1 and
    the query token sits at index 2k.
    """
    if mol_embs.ndim != 2 or label_embs.ndim != 2:
        raise LayoutError("token blocks must be rank 2")
    if mol_embs.shape[1] != label_embs.shape[1]:
        raise LayoutError(
            f"molecule tokens are width {mol_embs.shape[1]} but label tokens are "
            f"width {label_embs.shape[1]}"
        )
    k = label_embs.shape[0]
    if mol_embs.shape[0] != k + 1 or k < 1:
        raise LayoutError("need k+1 molecule tokens for k >= 1 label tokens")
    combined = ops.concat([mol_embs, label_embs], axis=0)
    order = np.empty(2 * k + 1, dtype=np.intp)
    order[0:2 * k:2] = np.arange(k)           # demonstration molecules
    order[1:2 * k:2] = k + 1 + np.arange(k)   # their label tokens
    order[2 * k] = k                          # the query molecule
    rows = ops.index_rows(combined, order)
    return JointSequence(rows=rows, query_index=2 * k, layout=Layout.NAIVE_ICL)


# ---------------------------------------------------------------------------
# validators


def _row_matches(row: np.ndarray, candidates: np.ndarray) -> int | None:
    for i, cand in enumerate(candidates):
        if np.array_equal(row, cand):
            return i
    return None


def validate_camp_layout(seq: JointSequence, label_table: Tensor) -> None:
    """Structural check: every label sub-vector is a table row, and the
    UNKNOWN row appears exactly once, at the query index."""
    if seq.layout is not Layout.CAMP:
        raise LayoutError(f"expected CAMP layout, got {seq.layout}")
    d_label = label_table.shape[1]
    if seq.width <= d_label:
        raise LayoutError("sequence width must exceed the label width")
    table = label_table.data
    for i in range(seq.length):
        sub = seq.rows.data[i, seq.width - d_label :]
        match = _row_matches(sub, table)
        if match is None:
            raise LayoutError(f"row {i}: label sub-vector is not a table row")
        if (match == UNKNOWN) != (i == seq.query_index):
            raise LayoutError(
                f"row {i}: UNKNOWN label row must appear exactly at the query index"
            )


def validate_naive_layout(seq: JointSequence, label_table: Tensor) -> None:
    """Structural check: strict molecule/label alternation with the query
    molecule token last and no label token after it."""
    if seq.layout is not Layout.NAIVE_ICL:
        raise LayoutError(f"expected NAIVE_ICL layout, got {seq.layout}")
    if seq.length % 2 != 1:
        raise LayoutError("interleaved sequence length must be odd (2k+1)")
    if seq.query_index != seq.length - 1:
        raise LayoutError("query token must be the final row")
    table = label_table.data[(NEGATIVE, POSITIVE), :]
    for i in range(seq.length):
        is_label_row = _row_matches(seq.rows.data[i], table) is not None
        if i % 2 == 1 and not is_label_row:
            raise LayoutError(f"row {i}: expected a label token")
        if i % 2 == 0 and is_label_row:
            raise LayoutError(f"row {i}: molecule token equals a label token")


def verify_camp_assembly(
    seq: JointSequence, mol_embs: Tensor, labels: Sequence[int], label_table: Tensor
) -> None:
    """Exact-reconstruction check: the sequence must equal what
    :func:`assemble_camp` emits for these inputs, bit for bit."""
    expected = assemble_camp(mol_embs, labels, label_table)
    if seq.layout is not Layout.CAMP or seq.query_index != expected.query_index:
        raise LayoutError("layout metadata does not match the assembly inputs")
    if not np.array_equal(seq.rows.data, expected.rows.data):
        raise LayoutError("sequence rows do not reproduce the assembly inputs")


def verify_naive_assembly(seq: JointSequence, mol_embs: Tensor, label_embs: Tensor) -> None:
    expected = assemble_naive_icl(mol_embs, label_embs)
    if seq.layout is not Layout.NAIVE_ICL or seq.query_index != expected.query_index:
        raise LayoutError("layout metadata does not match the assembly inputs")
    if not np.array_equal(seq.rows.data, expected.rows.data):
        raise LayoutError("sequence rows do not reproduce the assembly inputs")
