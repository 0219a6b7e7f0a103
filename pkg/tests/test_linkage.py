from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idleak.linkage import (
    DimensionMismatchError,
    EmbeddingSet,
    OpenSetError,
    ScoreMatrix,
    auroc,
    best_balanced_threshold,
    linkage_matrix,
    score_matrix,
    similarity_from_embeddings,
    top1_details,
    top1_recall,
    verification_eval,
    verification_pairs,
)


def _unit(rng, n, d=8):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _clusters(rng, n_ids=5, per=3, d=16, spread=0.05):
    centers = _unit(rng, n_ids, d)
    v = np.repeat(centers, per, axis=0) + spread * rng.standard_normal((n_ids * per, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    labels = np.repeat(np.arange(n_ids), per)
    ids = np.array([f"s{i}" for i in range(len(v))])
    return v, labels, ids


def test_self_scores_are_one(rng):
    q = _unit(rng, 3)
    np.testing.assert_allclose(np.diag(score_matrix(q, q).scores), 1.0)


def test_hand_dot_products():
    q = np.array([[1.0, 0.0]])
    k = np.array([[0.5, np.sqrt(0.75)], [0.25, np.sqrt(1 - 0.0625)]])
    np.testing.assert_allclose(score_matrix(q, k).scores[0], [0.5, 0.25])


def test_parallel_equals_sequential(rng):
    q, k = _unit(rng, 40, 32), _unit(rng, 60, 32)
    assert np.array_equal(score_matrix(q, k, workers=1).scores, score_matrix(q, k, workers=4).scores)


def test_dimension_mismatch(rng):
    with pytest.raises(DimensionMismatchError):
        score_matrix(_unit(rng, 2, 4), _unit(rng, 2, 5))
    with pytest.raises(ValueError):
        score_matrix([], _unit(rng, 2, 4))


def test_top1_hand_case():
    s = np.array([[0.9, 0.2, 0.1], [0.1, 0.3, 0.8]])
    assert top1_recall(ScoreMatrix(s, ["A", "C"], ["A", "B", "C"])) == 1.0
    assert top1_recall(ScoreMatrix(s, ["A", "B"], ["A", "B", "C"])) == 0.5


def test_top1_ties_go_to_lowest_index_and_are_counted():
    s = np.array([[0.5, 0.5]])
    r = top1_details(ScoreMatrix(s, ["A"], ["A", "B"]))
    assert r.recall == 1.0 and r.ties == 1
    assert top1_recall(ScoreMatrix(s, ["B"], ["A", "B"])) == 0.0


def test_open_set_query_rejected_with_identity():
    with pytest.raises(OpenSetError, match="'Z'"):
        top1_recall(ScoreMatrix(np.array([[0.1, 0.2]]), ["Z"], ["A", "B"]))


def test_self_pairs_excluded(rng):
    v, labels, ids = _clusters(rng)
    m = score_matrix(v, v, labels, labels, ids, ids)
    r = top1_details(m)
    assert r.recall == 1.0 and r.self_pairs_excluded == len(v)


def test_single_image_identity_is_open_set_after_self_exclusion(rng):
    v = _unit(rng, 3)
    ids = ["a", "b", "c"]
    with pytest.raises(OpenSetError):
        top1_recall(score_matrix(v, v, [0, 0, 1], [0, 0, 1], ids, ids))


def test_single_domain_clustered_grid(rng):
    v, labels, ids = _clusters(rng)
    grid = linkage_matrix({"X": EmbeddingSet(v, labels, ids)})
    assert grid.recall.shape == (1, 1) and grid.cell("X", "X") == 1.0


def test_grid_orientation(rng):
    v, labels, ids = _clusters(rng)
    sets = {name: EmbeddingSet(v + 0.01 * i, labels, ids) for i, name in enumerate(["P", "M", "H", "O"])}
    grid = linkage_matrix(sets, ["P", "M", "H"], ["P", "M", "H", "O"])
    assert grid.recall.shape == (3, 4)
    assert grid.to_dict()["query_domains"] == ["P", "M", "H"]


def test_grid_rejects_mismatched_universes(rng):
    v, labels, ids = _clusters(rng)
    with pytest.raises(ValueError):
        linkage_matrix({"A": EmbeddingSet(v, labels, ids), "B": EmbeddingSet(v, labels + 1, ids)})


def test_auroc_hand_cases():
    assert auroc([0.9, 0.8], [0.7, 0.6]) == 1.0
    assert auroc([0.9, 0.6], [0.8, 0.7]) == 0.5
    with pytest.raises(ValueError):
        auroc([], [0.1])


def _brute_auroc(g, i):
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(g, i))
    return wins / (len(g) * len(i))


def test_auroc_equals_pair_count_on_100_scores(rng):
    scores = np.round(rng.random(100), 2)
    g, i = scores[:40], scores[40:]
    assert auroc(g, i) == _brute_auroc(g, i)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=1, max_size=30), st.lists(st.integers(0, 20), min_size=1, max_size=30))
def test_auroc_matches_brute_force(g, i):
    g, i = np.array(g) / 20.0, np.array(i) / 20.0
    assert auroc(g, i) == pytest.approx(_brute_auroc(g, i), abs=1e-12)


def test_balanced_threshold_perfect_split():
    t, acc = best_balanced_threshold(np.array([0.9, 0.8]), np.array([0.1, 0.2]))
    assert acc == 1.0 and 0.2 < t <= 0.8


def test_verification_pairs_exclude_self(rng):
    v, labels, ids = _clusters(rng, n_ids=4, per=3)
    s = EmbeddingSet(v, labels, ids)
    g, i = verification_pairs(s, s)
    assert len(g) == 4 * 3 * 2 and len(i) == 12 * 9
    rep = verification_eval(g, i)
    assert rep.auroc == 1.0


def test_similarity_degenerate_oracle(rng):
    v, labels, _ = _clusters(rng)
    r = similarity_from_embeddings(v, v, labels)
    assert r.mean_template_to_source == pytest.approx(1.0)
    assert r.mean_difference > 0


def test_similarity_skips_single_image_identities(rng):
    v = _unit(rng, 4)
    r = similarity_from_embeddings(v, v, [0, 0, 1, 2])
    assert r.skipped_identities == 2 and len(r.same_identity) == 1
    d = r.to_dict()
    assert sum(d["template_to_source"]["histogram"]["counts"]) == 4
