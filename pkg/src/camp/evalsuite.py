"""Precision-recall metrics, support-size sweeps, a centroid sanity baseline,
and the inference latency benchmark.

The headline metric is the area under the precision-recall curve in its
average-precision form, and its delta against the random-classifier baseline
(the positive fraction of the query set).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .camphead import CampModel, predict, shared_support_logits
from .moldata import (
    Episode,
    LabeledMolecule,
    TaskSet,
    mean_atom_features,
    sample_support,
)
from .tensorcore import ops


class MetricError(Exception):
    """Raised on undefined metrics or infeasible evaluation requests."""


def auprc(scores, labels) -> float:
    """Average precision: mean of precision-at-rank over positives, ranked by
    descending score; ties keep their original order (stable sort)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if scores.ndim != 1 or scores.shape != labels.shape or scores.size == 0:
        raise MetricError("scores and labels must be equal-length non-empty vectors")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be binary")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("AUPRC is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, labels.size + 1)
    precision_at_hit = hits[ranked == 1] / ranks[ranked == 1]
    return float(precision_at_hit.sum() / n_pos)


def positive_fraction(labels) -> float:
    labels = np.asarray(labels, dtype=np.intp)
    return float(labels.sum() / labels.size)


def delta_auprc(scores, labels) -> float:
    """AUPRC minus the random-classifier baseline (the positive fraction)."""
    return auprc(scores, labels) - positive_fraction(labels)


@dataclass
class PrecisionRecallSummary:
    auprc: float
    positive_fraction: float
    delta_auprc: float
    n_query: int

    @classmethod
    def from_scores(cls, scores, labels) -> "PrecisionRecallSummary":
        ap = auprc(scores, labels)
        frac = positive_fraction(labels)
        return cls(
            auprc=ap,
            positive_fraction=frac,
            delta_auprc=ap - frac,
            n_query=int(np.asarray(labels).size),
        )


@dataclass
class SweepRow:
    task_id: str
    support_size: int
    seed: int
    summary: PrecisionRecallSummary


@dataclass
class SweepAggregate:
    support_size: int
    mean_delta_auprc: float
    stderr_delta_auprc: float
    mean_auprc: float
    n_seeds: int


@dataclass
class SweepReport:
    rows: list[SweepRow] = field(default_factory=list)
    aggregates: list[SweepAggregate] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def aggregate_for(self, support_size: int) -> SweepAggregate:
        for agg in self.aggregates:
            if agg.support_size == support_size:
                return agg
        raise MetricError(f"no aggregate for support size {support_size}")


def _seed_for(base_seed: int, support_size: int, seed_index: int, task_index: int) -> int:
    ent = np.random.SeedSequence(entropy=(base_seed, support_size, seed_index, task_index))
    return int(ent.generate_state(1)[0])


def score_task_queries(
    model: CampModel,
    support: Sequence[LabeledMolecule],
    queries: Sequence[LabeledMolecule],
) -> np.ndarray:
    """Positive-class probability for every query against one shared support."""
    logits = shared_support_logits(model, support, queries)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs[:, 1]


def evaluate_sweep(
    model: CampModel,
    tasks: TaskSet,
    support_sizes: Sequence[int],
    n_seeds: int,
    base_seed: int = 0,
) -> SweepReport:
    """For each (task, size, seed): sample one stratified support, score every
    remaining molecule as a query, and summarize; aggregate per size as the
    mean +/- standard error over per-seed task means."""
    if n_seeds < 1:
        raise MetricError("n_seeds must be positive")
    report = SweepReport()
    for size in support_sizes:
        per_seed_means: list[float] = []
        for seed_index in range(n_seeds):
            task_deltas: list[float] = []
            for task_index, task in enumerate(tasks.tasks):
                if len(task.molecules) < size + 1:
                    report.skipped.append(
                        f"task {task.task_id} too small for support {size}"
                    )
                    continue
                rng = np.random.default_rng(
                    _seed_for(base_seed, size, seed_index, task_index)
                )
                support, remainder = sample_support(task, size, rng)
                labels = [m.label for m in remainder]
                if sum(labels) == 0:
                    report.skipped.append(
                        f"task {task.task_id} size {size} seed {seed_index}: "
                        "query set has no positives"
                    )
                    continue
                scores = score_task_queries(model, support, remainder)
                summary = PrecisionRecallSummary.from_scores(scores, labels)
                report.rows.append(
                    SweepRow(task.task_id, size, seed_index, summary)
                )
                task_deltas.append(summary.delta_auprc)
            if task_deltas:
                per_seed_means.append(float(np.mean(task_deltas)))
        if per_seed_means:
            arr = np.array(per_seed_means)
            stderr = (
                float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
            )
            aps = [
                r.summary.auprc
                for r in report.rows
                if r.support_size == size
            ]
            report.aggregates.append(
                SweepAggregate(
                    support_size=size,
                    mean_delta_auprc=float(arr.mean()),
                    stderr_delta_auprc=stderr,
                    mean_auprc=float(np.mean(aps)),
                    n_seeds=len(arr),
                )
            )
    return report


def write_sweep_csv(report: SweepReport, path) -> None:
    lines = ["record,task_id,support_size,seed,auprc,positive_fraction,delta_auprc,n_query"]
    for r in report.rows:
        s = r.summary
        lines.append(
            f"task,{r.task_id},{r.support_size},{r.seed},{s.auprc:.17g},"
            f"{s.positive_fraction:.17g},{s.delta_auprc:.17g},{s.n_query}"
        )
    for a in report.aggregates:
        lines.append(
            f"aggregate,ALL,{a.support_size},{a.n_seeds},{a.mean_auprc:.17g},,"
            f"{a.mean_delta_auprc:.17g} +/- {a.stderr_delta_auprc:.17g},"
        )
    for msg in report.skipped:
        lines.append(f"skipped,{msg},,,,,,")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# centroid sanity baseline


def centroid_scores(
    support: Sequence[LabeledMolecule], queries: Sequence[LabeledMolecule]
) -> np.ndarray:
    """Distance-to-class-mean classifier over mean atom features: softmax of
    negative Euclidean distances to the two class centroids."""
    labels = np.array([m.label for m in support])
    if 0 not in labels or 1 not in labels:
        raise MetricError("centroid baseline needs both classes in the support")
    feats = np.array([mean_atom_features(m) for m in support])
    centroids = np.stack([feats[labels == 0].mean(axis=0), feats[labels == 1].mean(axis=0)])
    out = np.empty(len(queries))
    for i, q in enumerate(queries):
        x = mean_atom_features(q)
        dists = np.linalg.norm(centroids - x, axis=1)
        out[i] = ops.apply_softmax(-dists)[1]
    return out


# ---------------------------------------------------------------------------
# latency benchmark


@dataclass
class LatencyRow:
    support_size: int
    repeat: int
    seconds: float
    n_episodes: int

    @property
    def us_per_episode(self) -> float:
        return 1e6 * self.seconds / self.n_episodes


@dataclass
class LatencyReport:
    rows: list[LatencyRow] = field(default_factory=list)

    def median_us_per_episode(self, support_size: int) -> float:
        vals = [r.us_per_episode for r in self.rows if r.support_size == support_size]
        if not vals:
            raise MetricError(f"no timings for support size {support_size}")
        return float(np.median(vals))

    def total_seconds(self) -> float:
        return float(sum(r.seconds for r in self.rows))


def benchmark_latency(
    model: CampModel,
    tasks: TaskSet,
    support_sizes: Sequence[int],
    repeats: int,
    base_seed: int = 0,
) -> LatencyReport:
    """Wall-clock time to score one full query-set evaluation per task, per
    support size, one episode at a time (the serving-shaped code path)."""
    if repeats < 1:
        raise MetricError("repeats must be positive")
    report = LatencyReport()
    for size in support_sizes:
        eligible = [t for t in tasks.tasks if len(t.molecules) >= size + 1]
        if not eligible:
            raise MetricError(f"no task large enough for support size {size}")
        for repeat in range(repeats):
            rng = np.random.default_rng(_seed_for(base_seed, size, repeat, 0))
            episodes = []
            for task in eligible:
                support, remainder = sample_support(task, size, rng)
                episodes.extend(
                    Episode(support=support, query=query) for query in remainder
                )
            started = time.perf_counter()
            for episode in episodes:
                predict(episode, model)
            elapsed = time.perf_counter() - started
            n_episodes = len(episodes)
            report.rows.append(
                LatencyRow(
                    support_size=size,
                    repeat=repeat,
                    seconds=elapsed,
                    n_episodes=n_episodes,
                )
            )
    return report


def plot_sweep_svg(report: SweepReport, path) -> None:
    """Optional figure: mean delta-AUPRC vs support size with error bars."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sizes = [a.support_size for a in report.aggregates]
    means = [a.mean_delta_auprc for a in report.aggregates]
    errs = [a.stderr_delta_auprc for a in report.aggregates]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.errorbar(sizes, means, yerr=errs, marker="o", capsize=3)
    ax.set_xscale("log", base=2)
    ax.set_xticks(sizes)
    ax.set_xticklabels([str(s) for s in sizes])
    ax.set_xlabel("support size")
    ax.set_ylabel("delta AUPRC")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def write_latency_csv(report: LatencyReport, path) -> None:
    lines = ["support_size,repeat,seconds,n_episodes,us_per_episode"]
    for r in report.rows:
        lines.append(
            f"{r.support_size},{r.repeat},{r.seconds:.6f},{r.n_episodes},"
            f"{r.us_per_episode:.3f}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
