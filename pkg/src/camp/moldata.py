"""Molecular graphs, labeled tasks, episode sampling, and dataset ingestion.

Molecules are connected graphs of fixed-width atom feature vectors with typed
directed edges (every bond stored in both orientations). Tasks are binary
labeled molecule collections; episodes pair a support set of demonstrations
with a single query. The on-disk format is line-delimited JSON with a header
record carrying ``{format_version, atom_feature_dim, n_bond_types}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1

NEGATIVE = 0
POSITIVE = 1


class DataError(Exception):
    """Raised on malformed datasets or infeasible sampling requests."""


@dataclass
class AtomGraph:
    """A molecule: (n_atoms, feature_dim) features plus typed directed edges."""

    atoms: np.ndarray
    edges: list[tuple[int, int, int]]

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        if self.atoms.ndim != 2 or self.atoms.shape[0] == 0:
            raise DataError("atoms must be a non-empty (n_atoms, feature_dim) matrix")
        self.edges = [(int(s), int(d), int(t)) for s, d, t in self.edges]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.atoms.shape[1]

    def validate(self, n_bond_types: int | None = None) -> None:
        n = self.n_atoms
        if not np.isfinite(self.atoms).all():
            raise DataError("atom features hold non-finite values")
        seen = set(self.edges)
        for src, dst, bond in self.edges:
            if not (0 <= src < n and 0 <= dst < n):
                raise DataError(f"edge ({src}, {dst}) indexes outside {n} atoms")
            if src == dst:
                raise DataError(f"self-loop on atom {src}")
            if bond < 0 or (n_bond_types is not None and bond >= n_bond_types):
                raise DataError(f"bond type {bond} out of range")
            if (dst, src, bond) not in seen:
                raise DataError(f"edge ({src}, {dst}) missing its reverse orientation")
        if not self._connected():
            raise DataError("molecule graph is not connected")

    def _connected(self) -> bool:
        n = self.n_atoms
        if n == 1:
            return True
        adj: list[list[int]] = [[] for _ in range(n)]
        for src, dst, _ in self.edges:
            adj[src].append(dst)
        seen = {0}
        frontier = [0]
        while frontier:
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        nxt.append(v)
            frontier = nxt
        return len(seen) == n


def mirror_edges(edges: Iterable[tuple[int, int, int]]) -> list[tuple[int, int, int]]:
    """Add the reverse orientation of any edge that lacks one."""
    out = list(dict.fromkeys((int(s), int(d), int(t)) for s, d, t in edges))
    present = set(out)
    for src, dst, bond in list(out):
        if (dst, src, bond) not in present:
            out.append((dst, src, bond))
            present.add((dst, src, bond))
    return out


@dataclass
class LabeledMolecule:
    graph: AtomGraph
    label: int

    def __post_init__(self):
        if self.label not in (NEGATIVE, POSITIVE):
            raise DataError(f"label must be 0 or 1, got {self.label}")


@dataclass
class PropertyTask:
    task_id: str
    molecules: list[LabeledMolecule]

    def __post_init__(self):
        if len(self.molecules) < 2:
            raise DataError(f"task {self.task_id!r} needs at least 2 molecules")

    def labels(self) -> np.ndarray:
        return np.array([m.label for m in self.molecules], dtype=np.intp)


@dataclass
class Episode:
    """k labeled demonstrations plus one query molecule."""

    support: list[LabeledMolecule]
    query: LabeledMolecule

    def __post_init__(self):
        if len(self.support) < 1:
            raise DataError("episode needs at least one demonstration")
        if any(m is self.query for m in self.support):
            raise DataError("query must not be an element of the support")

    @property
    def k(self) -> int:
        return len(self.support)


@dataclass
class TaskSet:
    tasks: list[PropertyTask]
    split: str = "train"
    atom_feature_dim: int = 0
    n_bond_types: int = 1

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate task_id within a TaskSet")
        if self.tasks and self.atom_feature_dim == 0:
            self.atom_feature_dim = self.tasks[0].molecules[0].graph.feature_dim

    def __len__(self) -> int:
        return len(self.tasks)


# ---------------------------------------------------------------------------
# ingestion


def load_tasks(path, split: str = "train") -> TaskSet:
    """Read a line-delimited task file, mirroring one-directional edges."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    records = [(i + 1, line) for i, line in enumerate(lines) if line.strip()]
    if not records:
        raise DataError(f"{path}: no tasks (file is empty)")

    header_no, header_line = records[0]
    try:
        header = json.loads(header_line)
        feature_dim = int(header["atom_feature_dim"])
        n_bond_types = int(header["n_bond_types"])
        version = int(header["format_version"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}:{header_no}: malformed header record: {exc}") from exc
    if version != FORMAT_VERSION:
        raise DataError(f"{path}:{header_no}: unsupported format_version {version}")
    if feature_dim < 1 or n_bond_types < 1:
        raise DataError(f"{path}:{header_no}: header dimensions must be positive")

    tasks: list[PropertyTask] = []
    seen_ids: set[str] = set()
    for line_no, line in records[1:]:
        try:
            rec = json.loads(line)
        except ValueError as exc:
            raise DataError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
        try:
            task = _parse_task(rec, feature_dim, n_bond_types)
        except DataError as exc:
            raise DataError(f"{path}:{line_no}: {exc}") from exc
        if task.task_id in seen_ids:
            raise DataError(f"{path}:{line_no}: duplicate task_id {task.task_id!r}")
        seen_ids.add(task.task_id)
        tasks.append(task)
    if not tasks:
        raise DataError(f"{path}: no tasks (header only)")
    return TaskSet(tasks, split=split, atom_feature_dim=feature_dim, n_bond_types=n_bond_types)


def _parse_task(rec: dict, feature_dim: int, n_bond_types: int) -> PropertyTask:
    if "task_id" not in rec or "molecules" not in rec:
        raise DataError("task record needs task_id and molecules")
    molecules = []
    for j, mol in enumerate(rec["molecules"]):
        atoms = np.asarray(mol.get("atoms", []), dtype=np.float64)
        if atoms.ndim != 2 or atoms.shape[1] != feature_dim:
            raise DataError(
                f"molecule {j}: atoms must be (n, {feature_dim}); got shape {atoms.shape}"
            )
        edges = mirror_edges(tuple(e) for e in mol.get("edges", []))
        graph = AtomGraph(atoms, edges)
        graph.validate(n_bond_types)
        molecules.append(LabeledMolecule(graph, int(mol["label"])))
    return PropertyTask(str(rec["task_id"]), molecules)


def save_tasks(taskset: TaskSet, path) -> None:
    """Serialize in the line-delimited format accepted by :func:`load_tasks`."""
    path = Path(path)
    header = {
        "format_version": FORMAT_VERSION,
        "atom_feature_dim": taskset.atom_feature_dim,
        "n_bond_types": taskset.n_bond_types,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for task in taskset.tasks:
            rec = {
                "task_id": task.task_id,
                "molecules": [
                    {
                        "atoms": mol.graph.atoms.tolist(),
                        "edges": [list(e) for e in mol.graph.edges],
                        "label": mol.label,
                    }
                    for mol in task.molecules
                ],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# episode sampling


def sample_support(
    task: PropertyTask, k: int, rng: np.random.Generator
) -> tuple[list[LabeledMolecule], list[LabeledMolecule]]:
    """Support of size k (stratified when possible) plus the remainder.

    When the task holds both classes and k >= 2, the support is guaranteed to
    contain at least one molecule of each class; a single-class support would
    leave the binary task ill-posed.
    """
    n = len(task.molecules)
    if k < 1:
        raise DataError("support size must be >= 1")
    if n < k + 1:
        raise DataError(
            f"task {task.task_id!r} has {n} molecules; needs >= {k + 1} for support {k}"
        )
    labels = task.labels()
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    chosen: list[int] = []
    if k >= 2 and len(pos) > 0 and len(neg) > 0:
        chosen.append(int(rng.choice(pos)))
        chosen.append(int(rng.choice(neg)))
    rest = np.setdiff1d(np.arange(n), np.array(chosen, dtype=np.intp))
    fill = rng.choice(rest, size=k - len(chosen), replace=False)
    chosen.extend(int(i) for i in fill)
    chosen_set = set(chosen)
    support = [task.molecules[i] for i in chosen]
    remainder = [m for i, m in enumerate(task.molecules) if i not in chosen_set]
    return support, remainder


def sample_episode(task: PropertyTask, k: int, rng: np.random.Generator) -> Episode:
    """One stratified support of size k plus a query from the remainder."""
    support, remainder = sample_support(task, k, rng)
    query = remainder[int(rng.integers(len(remainder)))]
    return Episode(support=support, query=query)


def expand_leave_one_out(pool: Sequence[LabeledMolecule]) -> list[Episode]:
    """Each pool element becomes the query of exactly one episode.

    A pool of k+1 molecules yields k+1 episodes with support size k; the
    support keeps the pool's relative order.
    """
    if len(pool) < 2:
        raise DataError("leave-one-out expansion needs a pool of >= 2 molecules")
    episodes = []
    for i in range(len(pool)):
        support = [m for j, m in enumerate(pool) if j != i]
        episodes.append(Episode(support=support, query=pool[i]))
    return episodes


def split_tasks(
    tasks: Sequence[PropertyTask],
    fractions: Sequence[float],
    rng: np.random.Generator,
    splits: Sequence[str] = ("train", "valid", "test"),
) -> list[TaskSet]:
    """Disjoint task-level split with largest-remainder rounding."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != len(splits):
        raise DataError("one fraction per split required")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("fractions must be non-negative and sum to 1")
    nonzero = sum(1 for f in fractions if f > 0)
    if len(tasks) < nonzero:
        raise DataError(f"{len(tasks)} tasks cannot cover {nonzero} nonzero splits")

    n = len(tasks)
    ideal = [f * n for f in fractions]
    counts = [int(np.floor(x)) for x in ideal]
    # Distribute the rounding slack to the largest remainders, then guarantee
    # every nonzero-fraction split is non-empty.
    order = np.argsort([c - x for c, x in zip(counts, ideal)])
    for i in range(n - sum(counts)):
        counts[int(order[i])] += 1
    for i, f in enumerate(fractions):
        while f > 0 and counts[i] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] += 1

    perm = rng.permutation(n)
    out = []
    cursor = 0
    for count, split in zip(counts, splits):
        members = [tasks[int(i)] for i in perm[cursor : cursor + count]]
        cursor += count
        out.append(TaskSet(members, split=split))
    return out


# ---------------------------------------------------------------------------
# synthetic task generator


def make_synthetic_tasks(
    n_tasks: int,
    molecules_per_task: int,
    atom_feature_dim: int,
    rng: np.random.Generator,
    n_bond_types: int = 3,
    noise_std: float = 0.5,
    motif_separation: float = 2.0,
    min_atoms: int = 3,
    max_atoms: int = 12,
    split: str = "train",
) -> TaskSet:
    """Class-motif tasks: each class's atom features are noisy copies of a
    per-task motif vector, on random connected graphs.

    Difficulty is the ratio of ``noise_std`` to ``motif_separation`` (the
    Euclidean distance between the two class motifs).
    """
    if min(n_tasks, molecules_per_task, atom_feature_dim) < 1:
        raise DataError("all generator counts must be positive")
    tasks = []
    for t in range(n_tasks):
        center = rng.normal(size=atom_feature_dim)
        direction = rng.normal(size=atom_feature_dim)
        direction /= np.linalg.norm(direction)
        motifs = {
            NEGATIVE: center - 0.5 * motif_separation * direction,
            POSITIVE: center + 0.5 * motif_separation * direction,
        }
        molecules = []
        n_pos = molecules_per_task // 2 + (molecules_per_task % 2 and t % 2)
        labels = [POSITIVE] * n_pos + [NEGATIVE] * (molecules_per_task - n_pos)
        labels = [labels[int(i)] for i in rng.permutation(molecules_per_task)]
        for label in labels:
            n_atoms = int(rng.integers(min_atoms, max_atoms + 1))
            atoms = motifs[label] + noise_std * rng.normal(
                size=(n_atoms, atom_feature_dim)
            )
            molecules.append(
                LabeledMolecule(AtomGraph(atoms, _random_edges(n_atoms, n_bond_types, rng)), label)
            )
        tasks.append(PropertyTask(f"synth-{t:03d}", molecules))
    return TaskSet(
        tasks, split=split, atom_feature_dim=atom_feature_dim, n_bond_types=n_bond_types
    )


def _random_edges(
    n_atoms: int, n_bond_types: int, rng: np.random.Generator
) -> list[tuple[int, int, int]]:
    """Random spanning tree plus a few extra bonds, mirrored to both directions."""
    order = rng.permutation(n_atoms)
    bonds: set[tuple[int, int]] = set()
    for i in range(1, n_atoms):
        a = int(order[i])
        b = int(order[int(rng.integers(i))])
        bonds.add((min(a, b), max(a, b)))
    for _ in range(int(rng.integers(0, max(1, n_atoms // 2) + 1))):
        a, b = rng.integers(n_atoms), rng.integers(n_atoms)
        if a != b:
            bonds.add((min(int(a), int(b)), max(int(a), int(b))))
    edges = []
    for a, b in sorted(bonds):
        bond = int(rng.integers(n_bond_types))
        edges.append((a, b, bond))
        edges.append((b, a, bond))
    return edges


def mean_atom_features(molecule: LabeledMolecule) -> np.ndarray:
    return molecule.graph.atoms.mean(axis=0)
