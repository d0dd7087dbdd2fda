import itertools
import math

import numpy as np
import pytest
from sklearn import metrics as skm

from uvector.evaluation import (MetricsReport, acc, ari, contingency, kmeans, kmeans_fit, nmi,
                                read_metrics_csv, score_embeddings, write_metrics_csv)


def random_partitions(rng, n_pairs=200, max_k=6):
    for _ in range(n_pairs):
        n = int(rng.integers(2, 40))
        kp, kt = rng.integers(1, max_k + 1, size=2)
        yield rng.integers(0, kp, n), rng.integers(0, kt, n)


def acc_brute(pred, truth):
    """Best agreement over every one-to-one mapping of predicted labels."""
    p_labels, t_labels = sorted(set(pred)), sorted(set(truth))
    width = max(len(p_labels), len(t_labels))
    targets = t_labels + [None] * (width - len(t_labels))
    best = 0
    for perm in itertools.permutations(targets, len(p_labels)):
        m = dict(zip(p_labels, perm))
        best = max(best, sum(m[a] == b for a, b in zip(pred, truth)))
    return best / len(pred)


def nmi_direct(pred, truth):
    n = len(pred)
    pu, tu = sorted(set(pred)), sorted(set(truth))
    h = lambda labels, u: -sum((c := list(labels).count(v)) / n * math.log(c / n) for v in u)
    hp, ht = h(pred, pu), h(truth, tu)
    mi = 0.0
    for a in pu:
        for b in tu:
            nij = sum(1 for x, y in zip(pred, truth) if x == a and y == b)
            if nij:
                ni, nj = list(pred).count(a), list(truth).count(b)
                mi += nij / n * math.log(n * nij / (ni * nj))
    denom = (hp + ht) / 2
    return 0.0 if denom == 0 else mi / denom


def ari_direct(pred, truth):
    n = len(pred)
    table = {}
    for a, b in zip(pred, truth):
        table[a, b] = table.get((a, b), 0) + 1
    rows = [list(pred).count(a) for a in set(pred)]
    cols = [list(truth).count(b) for b in set(truth)]
    index = sum(math.comb(v, 2) for v in table.values())
    sa, sb = sum(math.comb(v, 2) for v in rows), sum(math.comb(v, 2) for v in cols)
    expected = sa * sb / math.comb(n, 2)
    mx = (sa + sb) / 2
    return 1.0 if mx == expected else (index - expected) / (mx - expected)


def test_acc_matches_brute_force_exactly():
    for pred, truth in random_partitions(np.random.default_rng(0)):
        assert acc(pred, truth) == acc_brute(list(pred), list(truth))


def test_nmi_and_ari_match_direct_formulas():
    for pred, truth in random_partitions(np.random.default_rng(1)):
        assert abs(nmi(pred, truth) - nmi_direct(list(pred), list(truth))) <= 1e-12
        assert abs(ari(pred, truth) - ari_direct(list(pred), list(truth))) <= 1e-12


def test_nmi_and_ari_agree_with_sklearn():
    for pred, truth in random_partitions(np.random.default_rng(2), 50):
        if len(set(pred)) == len(set(truth)) == 1:
            continue  # sklearn scores two constant partitions 1, the convention here is 0
        assert nmi(pred, truth) == pytest.approx(skm.normalized_mutual_info_score(truth, pred), abs=1e-12)
        assert ari(pred, truth) == pytest.approx(skm.adjusted_rand_score(truth, pred), abs=1e-12)


def test_metrics_are_symmetric():
    for pred, truth in random_partitions(np.random.default_rng(3), 50):
        assert nmi(pred, truth) == pytest.approx(nmi(truth, pred), abs=1e-14)
        assert ari(pred, truth) == pytest.approx(ari(truth, pred), abs=1e-14)
        assert 0.0 <= nmi(pred, truth) <= 1.0 and ari(pred, truth) <= 1.0


def test_metric_examples():
    assert acc([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert acc([0, 0, 1, 1], [0, 1, 1, 1]) == 0.75
    assert nmi([0, 1, 0, 1], [0, 0, 1, 1]) == 0.0
    assert ari([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(-0.5)
    assert nmi([0, 0, 0], [1, 1, 1]) == 0.0
    assert ari([0, 0, 0], [1, 1, 1]) == 1.0


def test_perfect_agreement_under_relabeling(rng):
    truth = rng.integers(0, 5, 60)
    pred = (truth + 3) % 5
    assert acc(pred, truth) == nmi(pred, truth) == ari(pred, truth) == 1.0


def test_length_mismatch_is_an_error():
    with pytest.raises(ValueError):
        acc([0, 1], [0, 1, 1])


def test_contingency_counts():
    np.testing.assert_array_equal(contingency([5, 5, 7], ["a", "b", "b"]), [[1, 1], [0, 1]])


def blobs(rng, k=4, per=30, spread=0.05):
    centers = rng.uniform(-5, 5, (k, 3))
    x = np.concatenate([c + spread * rng.standard_normal((per, 3)) for c in centers])
    return x, np.repeat(np.arange(k), per)


def test_kmeans_recovers_separated_blobs(rng):
    x, y = blobs(rng)
    assert acc(kmeans(x, 4, seed=0), y) == 1.0


def test_kmeans_objective_never_increases(rng):
    x = rng.standard_normal((200, 5))
    for seed in range(5):
        h = kmeans_fit(x, 6, seed=seed, n_init=1).history
        assert all(b <= a + 1e-9 for a, b in zip(h, h[1:]))


def test_kmeans_is_seeded_and_validates(rng):
    x = rng.standard_normal((50, 2))
    np.testing.assert_array_equal(kmeans(x, 3, seed=4), kmeans(x, 3, seed=4))
    with pytest.raises(ValueError):
        kmeans(x[:2], 3)
    assert len(np.unique(kmeans(x[:5], 5))) == 5


def test_kmeans_inertia_close_to_sklearn(rng):
    from sklearn.cluster import KMeans
    x, _ = blobs(rng, k=5, spread=1.0)
    ours = kmeans_fit(x, 5, seed=0).inertia
    ref = KMeans(5, n_init=10, random_state=0).fit(x).inertia_
    assert ours <= ref * 1.01


def test_score_embeddings_uses_label_counts(rng):
    x, y = blobs(rng, k=3, per=10)
    rep = score_embeddings(x, np.arange(30) // 2, x, y, seed=0)
    assert rep.k_train == 15 and rep.k_ground == 3
    assert rep.ground_acc == 1.0


def test_metrics_csv(tmp_path):
    rep = MetricsReport(0.5, 0.25, 0.125, 1.0, 0.9, 0.8, 10, 2)
    write_metrics_csv(tmp_path / "m.csv", rep.rows(5, 0.05))
    text = (tmp_path / "m.csv").read_text().splitlines()
    assert text[0] == "speakers,impurity,split,ACC,NMI,ARI"
    assert text[1] == "5,0.05,Train,0.500000,0.250000,0.125000"
    assert [r["split"] for r in read_metrics_csv(tmp_path / "m.csv")] == ["Train", "Ground"]
