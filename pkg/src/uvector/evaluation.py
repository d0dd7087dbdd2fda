"""k-means over embeddings and clustering metrics (ACC, NMI, ARI)."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .embedder import embed
from .features import FeatureConfig, Featurizer

NMI_NORMALIZATION = "arithmetic"
METRIC_FIELDS = ("speakers", "impurity", "split", "ACC", "NMI", "ARI")


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    history: list  # objective after every assignment step
    n_iter: int


def _sq_dists(x, c):
    return np.maximum((x**2).sum(1)[:, None] - 2.0 * x @ c.T + (c**2).sum(1)[None, :], 0.0)


def _kmeans_pp(x, k, rng):
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[j] = x[i]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(1))
    return centers


def _lloyd(x, centers, max_iter):
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centers)
        new = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(centers)):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(0)
            else:
                # re-seed an empty cluster on the worst-served point
                far = np.argmax(d[np.arange(len(x)), labels])
                centers[j] = x[far]
                labels[far] = j
    return new, centers, history, it


def kmeans_fit(x, k: int, seed=0, n_init: int = 10, max_iter: int = 300) -> KMeansResult:
    """k-means++ seeding and Lloyd iterations until the assignment stops
    changing (or ``max_iter``); the best of ``n_init`` restarts is kept."""
    x = np.asarray(x, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > len(x):
        raise ValueError(f"k={k} exceeds the number of points ({len(x)})")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, centers, history, it = _lloyd(x, _kmeans_pp(x, k, rng), max_iter)
        if best is None or history[-1] < best.inertia:
            best = KMeansResult(labels, centers, history[-1], history, it)
    return best


def kmeans(embeddings, k: int, seed=0, n_init: int = 10, max_iter: int = 300) -> np.ndarray:
    return kmeans_fit(embeddings, k, seed, n_init, max_iter).labels


# ---------------------------------------------------------------------------
# Metrics


def _check(pred, truth):
    pred, truth = np.asarray(pred).ravel(), np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"partitions differ in length: {len(pred)} vs {len(truth)}")
    return pred, truth


def contingency(pred, truth) -> np.ndarray:
    pred, truth = _check(pred, truth)
    _, p = np.unique(pred, return_inverse=True)
    _, t = np.unique(truth, return_inverse=True)
    table = np.zeros((p.max(initial=-1) + 1, t.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (p, t), 1)
    return table


def acc(pred, truth) -> float:
    """Share of points agreeing under the best one-to-one label mapping."""
    table = contingency(pred, truth)
    if table.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / table.sum())


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(pred, truth) -> float:
    """Mutual information over the arithmetic mean of the two entropies;
    0 when both partitions are constant."""
    table = contingency(pred, truth).astype(np.float64)
    n = table.sum()
    if n == 0:
        return 0.0
    h_p, h_t = _entropy(table.sum(1), n), _entropy(table.sum(0), n)
    denom = 0.5 * (h_p + h_t)
    if denom == 0:
        return 0.0
    nz = table > 0
    outer = np.outer(table.sum(1), table.sum(0))
    mi = float(np.sum(table[nz] / n * np.log(table[nz] * n / outer[nz])))
    return float(np.clip(mi / denom, 0.0, 1.0))


def _pairs(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum(x * (x - 1) / 2))


def ari(pred, truth) -> float:
    """Adjusted Rand index from pair counts. Two identical trivial partitions
    (all one cluster, or all singletons) score 1."""
    table = contingency(pred, truth)
    n = table.sum()
    if n < 2:
        return 1.0
    index = _pairs(table)
    a, b = _pairs(table.sum(1)), _pairs(table.sum(0))
    expected = a * b / _pairs([n])
    max_index = 0.5 * (a + b)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricsReport:
    train_acc: float
    train_nmi: float
    train_ari: float
    ground_acc: float
    ground_nmi: float
    ground_ari: float
    k_train: int
    k_ground: int

    def rows(self, speakers, impurity) -> list[dict]:
        """Two rows (Train, Ground) in the layout of the benchmark tables."""
        return [
            {"speakers": speakers, "impurity": impurity, "split": "Train",
             "ACC": self.train_acc, "NMI": self.train_nmi, "ARI": self.train_ari},
            {"speakers": speakers, "impurity": impurity, "split": "Ground",
             "ACC": self.ground_acc, "NMI": self.ground_nmi, "ARI": self.ground_ari},
        ]

    def to_dict(self) -> dict:
        return asdict(self)


def score_embeddings(train_emb, pseudo_labels, test_emb, ground_labels, seed=0, n_init: int = 10) -> MetricsReport:
    """Cluster train embeddings with k = #pseudo labels and test embeddings
    with k = #speakers, then score each against its labels."""
    pseudo_labels, ground_labels = np.asarray(pseudo_labels), np.asarray(ground_labels)
    k_train = len(np.unique(pseudo_labels))
    k_ground = len(np.unique(ground_labels))
    tr = kmeans(train_emb, k_train, seed, n_init)
    gr = kmeans(test_emb, k_ground, seed, n_init)
    return MetricsReport(acc(tr, pseudo_labels), nmi(tr, pseudo_labels), ari(tr, pseudo_labels),
                         acc(gr, ground_labels), nmi(gr, ground_labels), ari(gr, ground_labels),
                         k_train, k_ground)


def evaluate(net, train_set, test_set, feature_cfg: FeatureConfig = FeatureConfig(), seed=0,
             train_features=None, test_features=None, n_init: int = 10) -> MetricsReport:
    """Embed un-augmented frames and score both partitions.

    The network only ever sees feature maps; ground labels of ``test_set``
    are read for scoring after embedding, those of ``train_set`` never.
    """
    feat = Featurizer(feature_cfg, np.float32)
    if train_features is None:
        train_features = feat(train_set.audio)
    if test_features is None:
        test_features = feat(test_set.audio)
    net.eval()
    return score_embeddings(embed(net, train_features), train_set.pseudo_label,
                            embed(net, test_features), test_set.ground_speaker, seed, n_init)


def format_metric(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_metrics_csv(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["speakers"], r["impurity"], r["split"]] + [format_metric(float(r[f])) for f in ("ACC", "NMI", "ARI")])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
