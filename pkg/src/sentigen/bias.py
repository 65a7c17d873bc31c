"""Cross-dataset annotation transfer and subjective-bias scores.

Records from a source dataset are re-annotated with the label of the nearest
target-dataset centroid in representation space; the resulting cross-dataset
accuracy matrix (percent) feeds two scores:

  bias_ana(i, j) = |acc[i][i] - acc[i][j]|            one-directional gap
  bias_sub(i, j) = |bias_ana(i, j) - bias_ana(j, i)|  symmetric difference

A small published accuracy matrix over four conversation/sentiment corpora
ships as a fixture so the score pipeline can be exercised without training.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import ContractError, ShapeError

FIXTURE_NAME = "cross_annotation_accuracy.json"


@dataclass(frozen=True)
class AccuracyMatrix:
    """Square cross-annotation accuracy table in percent; rows are source
    datasets, columns are annotation (target) datasets."""

    datasets: tuple
    acc: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.acc, dtype=np.float64)
        n = len(self.datasets)
        if arr.shape != (n, n):
            raise ShapeError(f"accuracy matrix shape {arr.shape} does not match {n} datasets")
        object.__setattr__(self, "acc", arr)

    def index(self, dataset_id):
        try:
            return self.datasets.index(dataset_id)
        except ValueError:
            raise ContractError(f"dataset {dataset_id!r} not in accuracy matrix") from None

    def to_json(self):
        return {"datasets": list(self.datasets),
                "accuracy_percent": [[float(x) for x in row] for row in self.acc]}

    @classmethod
    def from_json(cls, obj):
        return cls(datasets=tuple(obj["datasets"]),
                   acc=np.asarray(obj["accuracy_percent"], dtype=np.float64))


def fixture_accuracy_matrix():
    """The bundled published cross-annotation accuracy table."""
    payload = resources.files("sentigen.fixtures").joinpath(FIXTURE_NAME).read_text("utf-8")
    return AccuracyMatrix.from_json(json.loads(payload))


def bias_ana(acc, i, j):
    """Gap between a dataset's own-annotation accuracy and its accuracy under
    dataset j's annotation scheme."""
    a = acc.acc
    return float(abs(a[i, i] - a[i, j]))


def bias_sub(acc, i, j):
    """Symmetric subjective-bias score between datasets i and j."""
    return float(abs(bias_ana(acc, i, j) - bias_ana(acc, j, i)))


@dataclass(frozen=True)
class BiasReport:
    datasets: tuple
    ana: np.ndarray
    sub: np.ndarray

    def to_json(self):
        return {"datasets": list(self.datasets),
                "bias_ana": [[float(x) for x in row] for row in self.ana],
                "bias_sub": [[float(x) for x in row] for row in self.sub]}


def bias_report(acc):
    """All pairwise scores for an accuracy matrix. The diagonal is zero by
    construction; sub is symmetric."""
    n = len(acc.datasets)
    ana = np.zeros((n, n))
    sub = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            ana[i, j] = bias_ana(acc, i, j)
            sub[i, j] = bias_sub(acc, i, j)
    return BiasReport(datasets=acc.datasets, ana=ana, sub=sub)


def render_bias_report(report, digits=2):
    """Aligned text tables for terminal output."""
    names = list(report.datasets)
    width = max(len(n) for n in names) + 2
    cell = max(width, digits + 5)

    def table(title, mat):
        lines = [title, " " * width + "".join(f"{n:>{cell}}" for n in names)]
        for i, n in enumerate(names):
            row = "".join(f"{mat[i, j]:>{cell}.{digits}f}" for j in range(len(names)))
            lines.append(f"{n:<{width}}" + row)
        return "\n".join(lines)

    return table("annotation-transfer gap (|own - cross| accuracy, %)", report.ana) \
        + "\n\n" + table("subjective bias (symmetric, %)", report.sub) + "\n"


# ---------------------------------------------------------------------------
# cross annotation from representations


def label_centroids(items):
    """Mean vector per label over (label, vector) pairs, labels ordered
    lexicographically."""
    if not items:
        raise ContractError("cannot build centroids from zero items")
    groups = {}
    for label, vec in items:
        groups.setdefault(str(label), []).append(np.asarray(vec, dtype=np.float64))
    dims = {v.shape for vecs in groups.values() for v in vecs}
    if len(dims) != 1:
        raise ShapeError(f"inconsistent vector shapes {sorted(dims)}")
    return [(label, np.mean(np.stack(groups[label]), axis=0)) for label in sorted(groups)]


def nearest_label(vec, centroids):
    """Label of the nearest centroid by squared distance; ties resolve to the
    lexicographically earlier label (centroids arrive label-sorted)."""
    v = np.asarray(vec, dtype=np.float64)
    d = np.asarray([float(np.sum((v - c) ** 2)) for _, c in centroids])
    return centroids[int(np.argmin(d))][0]


def cross_annotate(source_items, target_centroids, correspondence=None):
    """Re-annotate source (gold_label, vector) pairs with nearest target
    centroids and score agreement.

    ``correspondence`` maps source gold labels onto target labels (identity by
    default); sources mapping to None never count as agreement. Returns
    (pseudo_labels, accuracy_percent).
    """
    if not source_items:
        raise ContractError("cannot cross-annotate zero items")
    pseudo = [nearest_label(vec, target_centroids) for _, vec in source_items]
    hits = 0
    for (gold, _), assigned in zip(source_items, pseudo):
        expected = correspondence.get(str(gold)) if correspondence is not None else str(gold)
        if expected is not None and expected == assigned:
            hits += 1
    return pseudo, 100.0 * hits / len(source_items)


def build_accuracy_matrix(items_by_dataset, order=None, correspondence=None):
    """Cross-annotation accuracy matrix over datasets.

    ``items_by_dataset`` maps dataset_id to (gold_label, vector) pairs;
    ``correspondence`` optionally maps (source_id, target_id) to a label map.
    Entry [i][j] annotates dataset i's items with dataset j's centroids.
    """
    names = tuple(order) if order is not None else tuple(items_by_dataset)
    for name in names:
        if name not in items_by_dataset:
            raise ContractError(f"no items for dataset {name!r}")
    centroids = {name: label_centroids(items_by_dataset[name]) for name in names}
    n = len(names)
    acc = np.zeros((n, n))
    for i, src in enumerate(names):
        for j, tgt in enumerate(names):
            cmap = correspondence.get((src, tgt)) if correspondence else None
            _, acc[i, j] = cross_annotate(items_by_dataset[src], centroids[tgt], cmap)
    return AccuracyMatrix(datasets=names, acc=acc)
