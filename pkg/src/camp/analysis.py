"""Learning-mechanism toolkit: PCA projections of joint embeddings before and
after the encoder, per-head attention export, label-keyed striation scoring,
and the label-flip experiment."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .camphead import CampModel, Prediction
from .context import Layout
from .moldata import Episode, LabeledMolecule
from .transformer import AttentionRecord, add_fixed_positional, encoder_forward
from .tensorcore import ops


class AnalysisError(Exception):
    """Raised on degenerate inputs or invalid experiment indices."""


# ---------------------------------------------------------------------------
# PCA via power iteration


@dataclass
class PcaProjection:
    mean: np.ndarray
    axes: np.ndarray  # (2, d), orthonormal rows
    coordinates: np.ndarray  # (L, 2)
    explained_variance: np.ndarray  # fractions, non-increasing

    def project(self, rows: np.ndarray) -> np.ndarray:
        """Project new rows with the stored mean and axes."""
        return (np.asarray(rows) - self.mean) @ self.axes.T


def _power_iterate(
    cov: np.ndarray, rng: np.random.Generator, iters: int = 200, tol: float = 1e-10
) -> tuple[float, np.ndarray]:
    v = rng.normal(size=cov.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        w /= norm
        if np.abs(w - v).max() < tol or np.abs(w + v).max() < tol:
            v = w
            break
        v = w
    return float(v @ cov @ v), v


def pca_2d(rows: np.ndarray, seed: int = 0) -> PcaProjection:
    """Top-2 principal axes by power iteration with deflation.

    Axis signs are fixed (largest-magnitude entry positive) so exports are
    stable across runs.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 3 or rows.shape[1] < 2:
        raise AnalysisError("pca_2d needs an (L >= 3, d >= 2) matrix")
    mean = rows.mean(axis=0)
    centered = rows - mean
    if np.abs(centered).max() == 0.0:
        raise AnalysisError("pca_2d is undefined for identical rows")
    cov = centered.T @ centered / (rows.shape[0] - 1)
    total_var = float(np.trace(cov))

    rng = np.random.default_rng(seed)
    lam1, v1 = _power_iterate(cov, rng)
    deflated = cov - lam1 * np.outer(v1, v1)
    lam2, v2 = _power_iterate(deflated, rng)
    v2 = v2 - (v2 @ v1) * v1  # re-orthogonalize against numerical drift
    v2 /= np.linalg.norm(v2)
    axes = np.stack([v1, v2])
    for i in range(2):
        if axes[i, np.argmax(np.abs(axes[i]))] < 0:
            axes[i] = -axes[i]
    coords = centered @ axes.T
    explained = np.array([max(lam1, 0.0), max(lam2, 0.0)]) / max(total_var, 1e-300)
    return PcaProjection(
        mean=mean, axes=axes, coordinates=coords, explained_variance=explained
    )


# ---------------------------------------------------------------------------
# embedding snapshots


ROLE_QUERY = "query"
ROLE_POSITIVE = "positive"
ROLE_NEGATIVE = "negative"
ROLE_LABEL_TOKEN = "label"


@dataclass
class EmbeddingSnapshot:
    pre_rows: np.ndarray
    post_rows: np.ndarray
    attention: list[AttentionRecord]
    roles: list[str]
    query_index: int
    prediction: Prediction


def _episode_roles(episode: Episode, layout: Layout) -> tuple[list[str], int]:
    demo_roles = [
        ROLE_POSITIVE if m.label == 1 else ROLE_NEGATIVE for m in episode.support
    ]
    if layout is Layout.CAMP:
        return [ROLE_QUERY] + demo_roles, 0
    interleaved: list[str] = []
    for role in demo_roles:
        interleaved.extend([role, ROLE_LABEL_TOKEN])
    interleaved.append(ROLE_QUERY)
    return interleaved, len(interleaved) - 1


def snapshot_embeddings(model: CampModel, episode: Episode) -> EmbeddingSnapshot:
    """Eval-mode pre-encoder rows, post-encoder rows, and all attention maps.

    Neither the model nor the episode is mutated.
    """
    from .camphead import episode_sequence, head_forward, extract_query

    seq = episode_sequence(model, episode)
    rows = seq.rows
    if model.config.use_positional:
        rows = add_fixed_positional(rows)
    out, records = encoder_forward(
        rows, model.encoder, model.config.encoder_config(), capture=True
    )
    logits = head_forward(model.head, extract_query(out, seq.query_index))
    probs = ops.apply_softmax(logits.data)
    roles, query_index = _episode_roles(episode, model.config.layout)
    assert query_index == seq.query_index
    return EmbeddingSnapshot(
        pre_rows=seq.rows.data.copy(),
        post_rows=out.data.copy(),
        attention=records,
        roles=roles,
        query_index=seq.query_index,
        prediction=Prediction(
            logits=logits.data.copy(), probability_positive=float(probs[1])
        ),
    )


# ---------------------------------------------------------------------------
# label-flip experiment


@dataclass
class LabelFlipReport:
    flip_index: int  # sequence row index of the flipped demonstration
    before: EmbeddingSnapshot
    after: EmbeddingSnapshot

    def pre_rows_changed(self) -> np.ndarray:
        """Boolean mask of pre-encoder rows that differ at all."""
        return np.abs(self.before.pre_rows - self.after.pre_rows).max(axis=1) > 0

    def post_row_displacements(self) -> np.ndarray:
        return np.linalg.norm(self.after.post_rows - self.before.post_rows, axis=1)


def label_flip(model: CampModel, episode: Episode, flip_index: int) -> LabelFlipReport:
    """Re-run the snapshot with demonstration ``flip_index`` label-negated.

    ``flip_index`` addresses a sequence row (the layout the figures use); the
    query row is rejected. Only joint-layout models are supported since the
    flip must stay within one row.
    """
    if model.config.layout is not Layout.CAMP:
        raise AnalysisError("label_flip requires the joint (non-interleaved) layout")
    seq_len = len(episode.support) + 1
    if not 0 <= flip_index < seq_len:
        raise AnalysisError(f"flip_index {flip_index} outside sequence of {seq_len}")
    if flip_index == 0:
        raise AnalysisError("flip_index addresses the query; flip a demonstration")
    support_pos = flip_index - 1  # query occupies row 0
    before = snapshot_embeddings(model, episode)
    flipped_support = [
        LabeledMolecule(m.graph, 1 - m.label) if i == support_pos else m
        for i, m in enumerate(episode.support)
    ]
    after = snapshot_embeddings(
        model, Episode(support=flipped_support, query=episode.query)
    )
    return LabelFlipReport(flip_index=flip_index, before=before, after=after)


# ---------------------------------------------------------------------------
# attention striation


def striation_score(record: AttentionRecord, row_labels: Sequence[int]) -> float:
    """How label-keyed an attention head is, in [0, 1].

    1 - (pooled within-class variance of attention rows, grouped by the
    attending row's class id) / (total variance of rows). Identical rows
    within each class with distinct rows across classes give 1; identical
    rows overall give 0 by convention.
    """
    weights = record.weights
    row_labels = np.asarray(row_labels)
    if row_labels.shape[0] != weights.shape[0]:
        raise AnalysisError("one class id per attention row is required")
    grand = weights.mean(axis=0)
    total = float(((weights - grand) ** 2).sum(axis=1).mean())
    if total == 0.0:
        return 0.0
    within = 0.0
    for cls in np.unique(row_labels):
        members = weights[row_labels == cls]
        within += float(((members - members.mean(axis=0)) ** 2).sum(axis=1).sum())
    within /= weights.shape[0]
    return float(np.clip(1.0 - within / total, 0.0, 1.0))


# ---------------------------------------------------------------------------
# exports


def write_pca_csv(pca: PcaProjection, roles: Sequence[str], path) -> None:
    lines = ["row,role,pc1,pc2"]
    for i, (role, (x, y)) in enumerate(zip(roles, pca.coordinates)):
        lines.append(f"{i},{role},{x:.17g},{y:.17g}")
    lines.append(
        f"#explained_variance,{pca.explained_variance[0]:.17g},"
        f"{pca.explained_variance[1]:.17g},"
    )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_ROLE_STYLE = {
    ROLE_QUERY: dict(marker="^", color="tab:green", label="query"),
    ROLE_POSITIVE: dict(marker="s", color="tab:blue", label="positive"),
    ROLE_NEGATIVE: dict(marker="o", color="tab:red", label="negative"),
    ROLE_LABEL_TOKEN: dict(marker="x", color="tab:gray", label="label token"),
}


def _scatter_roles(ax, coords: np.ndarray, roles: Sequence[str]) -> None:
    seen = set()
    for (x, y), role in zip(coords, roles):
        style = _ROLE_STYLE[role]
        ax.scatter(
            x, y, marker=style["marker"], color=style["color"],
            label=style["label"] if role not in seen else None, s=60,
        )
        seen.add(role)


def plot_snapshot_svg(
    snapshot: EmbeddingSnapshot, path, layer: int = 0, head: int = 0
) -> None:
    """Optional 3-panel figure: PCA of rows before and after the encoder,
    plus one head's attention matrix."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    for ax, rows, title in (
        (axes[0], snapshot.pre_rows, "before encoder"),
        (axes[1], snapshot.post_rows, "after encoder"),
    ):
        pca = pca_2d(rows)
        _scatter_roles(ax, pca.coordinates, snapshot.roles)
        ax.set_title(title)
        ax.set_xlabel("pc1")
        ax.set_ylabel("pc2")
    axes[0].legend(loc="best", fontsize=8)
    record = next(
        r for r in snapshot.attention if r.layer == layer and r.head == head
    )
    im = axes[2].imshow(record.weights, cmap="viridis", vmin=0.0)
    axes[2].set_title(f"attention layer {layer} head {head}")
    axes[2].set_xlabel("attended")
    axes[2].set_ylabel("attending")
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_label_flip_svg(
    report: LabelFlipReport, path, layer: int = 0, head: int = 0
) -> None:
    """Optional 2x3 figure: the snapshot panels before (top) and after
    (bottom) the flip; post-encoder rows share the pre-flip PCA axes so the
    flipped row's displacement is visible."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pre_axes = pca_2d(report.before.pre_rows)
    post_axes = pca_2d(report.before.post_rows)
    fig, axes = plt.subplots(2, 3, figsize=(12, 7))
    for row_idx, snap in ((0, report.before), (1, report.after)):
        _scatter_roles(axes[row_idx][0], pre_axes.project(snap.pre_rows), snap.roles)
        axes[row_idx][0].set_title("before encoder" + (" (flipped)" if row_idx else ""))
        _scatter_roles(axes[row_idx][1], post_axes.project(snap.post_rows), snap.roles)
        axes[row_idx][1].set_title("after encoder" + (" (flipped)" if row_idx else ""))
        record = next(
            r for r in snap.attention if r.layer == layer and r.head == head
        )
        axes[row_idx][2].imshow(record.weights, cmap="viridis", vmin=0.0)
        axes[row_idx][2].set_title(f"attention layer {layer} head {head}")
        for ax in axes[row_idx][:2]:
            flip_xy = (
                pre_axes.project(snap.pre_rows)[report.flip_index]
                if ax is axes[row_idx][0]
                else post_axes.project(snap.post_rows)[report.flip_index]
            )
            ax.annotate(
                "flipped", flip_xy, textcoords="offset points", xytext=(6, 6),
                fontsize=8, color="goldenrod",
            )
    axes[0][0].legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def write_attention_json(records: Sequence[AttentionRecord], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in records:
        path = directory / f"layer{rec.layer}_head{rec.head}.json"
        path.write_text(json.dumps(rec.to_dict()), encoding="utf-8")
        written.append(path)
    return written
