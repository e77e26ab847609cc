import logging
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from sklearn.metrics import adjusted_rand_score

from lmlab.corpus import encode_labeled, build_vocab, tokenize
from lmlab.errors import ContractError, DataError
from lmlab.labeler import (build_lsa, format_labeled_lines, iterate_labeling,
                           kmeans, select_dissimilar, term_document_matrix)
from synthetic import topic_paragraphs


def unit(v):
    return v / np.linalg.norm(v)


class TestTermDocumentMatrix:
    def test_hand_example(self):
        docs = [["a", "b", "a"], ["b", "c"]]
        terms, idf, m = term_document_matrix(docs)
        assert terms == ["a", "b", "c"]
        idf_rare = math.log(3 / 2) + 1
        assert_allclose(idf, [idf_rare, math.log(1) + 1, idf_rare], rtol=1e-15)
        assert_allclose(m, [[2 * idf_rare, 0.0], [1.0, 1.0], [0.0, idf_rare]],
                        rtol=1e-15)

    def test_no_tokens_rejected(self):
        with pytest.raises(DataError):
            term_document_matrix([[], []])


class TestBuildLsa:
    def test_disjoint_docs_match_analytic_svd(self):
        docs = [["aa", "aa"], ["bb"]]
        lsa = build_lsa(docs, 2, seed=42)
        _, _, m = term_document_matrix(docs)
        u_ref, s_ref, _ = np.linalg.svd(m, full_matrices=False)
        assert_allclose(lsa.singular_values, s_ref, rtol=1e-10)
        assert_allclose(np.abs(lsa.u_d), np.abs(u_ref), atol=1e-10)
        p0 = lsa.project(["aa"])
        p1 = lsa.project(["bb"])
        assert abs(p0 @ p1) < 1e-10
        assert_allclose(np.linalg.norm(p0), 1.0, rtol=1e-12)

    def test_matches_numpy_svd_on_random_docs(self):
        rng = np.random.default_rng(42)
        words = [f"w{i}" for i in range(12)]
        docs = [[words[int(j)] for j in rng.integers(0, 12, size=rng.integers(3, 9))]
                for _ in range(8)]
        lsa = build_lsa(docs, 4, seed=0)
        _, _, m = term_document_matrix(docs)
        _, s_ref, _ = np.linalg.svd(m)
        assert_allclose(lsa.singular_values, s_ref[:lsa.d], rtol=1e-8)
        # singular directions are axes of m m^T
        mmt = m @ m.T
        for j in range(lsa.d):
            u = lsa.u_d[:, j]
            assert_allclose(mmt @ u, (lsa.singular_values[j] ** 2) * u,
                            atol=1e-6 * lsa.singular_values[0] ** 2)

    def test_duplicate_docs_project_identically(self):
        docs = [["x", "y"], ["x", "y"], ["z", "q", "z"]]
        lsa = build_lsa(docs, 2, seed=42)
        vecs = lsa.project_many(docs)
        assert (vecs[0] == vecs[1]).all()

    def test_rank_one_reconstruction(self):
        docs = [["a"], ["a", "a"], ["a", "a", "a", "a"]]
        lsa = build_lsa(docs, 1, seed=42)
        _, _, m = term_document_matrix(docs)
        recon = lsa.u_d @ (lsa.u_d.T @ m)
        assert np.linalg.norm(recon - m) <= 1e-8 * np.linalg.norm(m)

    def test_requested_d_above_rank_warns_and_shrinks(self, caplog):
        docs = [["a"], ["a", "a"], ["a", "a", "a"]]
        with caplog.at_level(logging.WARNING, logger="lmlab.labeler"):
            lsa = build_lsa(docs, 3, seed=42)
        assert lsa.d == 1
        assert any("rank" in r.message for r in caplog.records)

    def test_doc_order_invariance(self):
        rng = np.random.default_rng(3)
        words = [f"w{i}" for i in range(10)]
        docs = [[words[int(j)] for j in rng.integers(0, 10, size=5 + i)]
                for i in range(6)]
        a = build_lsa(docs, 3, seed=42)
        b = build_lsa(docs[::-1], 3, seed=42)
        assert_allclose(a.singular_values, b.singular_values, rtol=1e-9)
        assert_allclose(a.u_d, b.u_d, atol=1e-8)

    def test_unseen_terms_project_to_zero(self):
        lsa = build_lsa([["a", "b"], ["b", "c"]], 2, seed=42)
        assert (lsa.project(["zzz"]) == 0.0).all()

    def test_fewer_than_two_docs_rejected(self):
        with pytest.raises(ContractError):
            build_lsa([["a"]], 1)

    def test_sign_convention(self):
        lsa = build_lsa([["a", "a"], ["b"]], 2, seed=42)
        for j in range(lsa.d):
            col = lsa.u_d[:, j]
            assert col[np.abs(col).argmax()] > 0


def two_clouds(n_per, seed=42):
    rng = np.random.default_rng(seed)
    pts = []
    for center in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])):
        for _ in range(n_per):
            pts.append(unit(center + rng.normal(scale=0.05, size=3)))
    return np.stack(pts)


class TestKmeans:
    def test_recovers_two_clouds(self):
        vectors = two_clouds(20)
        state = kmeans(vectors, 2, seed=42)
        first = state.assignment[:20]
        second = state.assignment[20:]
        assert len(set(first)) == 1 and len(set(second)) == 1
        assert first[0] != second[0]
        assert state.objective > 0.99 * len(vectors) * 0.99

    def test_k_equals_n_reaches_objective_n(self):
        rng = np.random.default_rng(0)
        vectors = np.stack([unit(rng.normal(size=4)) for _ in range(6)])
        state = kmeans(vectors, 6, seed=42)
        assert_allclose(state.objective, 6.0, rtol=1e-9)
        assert sorted(state.assignment) == list(range(6))

    def test_objective_monotone_under_truncation(self):
        # the run is deterministic per seed, so capping max_iters walks the
        # same trajectory; the objective must never step down along it
        vectors = two_clouds(15, seed=7)
        objectives = [kmeans(vectors, 3, seed=5, max_iters=i).objective
                      for i in range(1, 12)]
        diffs = np.diff(objectives)
        assert (diffs >= -1e-12).all(), objectives

    def test_single_cluster_confidence_is_one(self):
        vectors = two_clouds(5)
        state = kmeans(vectors, 1, seed=42)
        assert (state.confidence == 1.0).all()

    def test_confidence_is_clamped_margin(self):
        vectors = two_clouds(10)
        state = kmeans(vectors, 2, seed=42)
        assert (state.confidence >= 0.0).all()
        assert (state.confidence <= 1.0).all()
        sims = vectors @ state.centroids.T
        margin = np.minimum(sims.max(axis=1) - np.partition(sims, -2, axis=1)[:, -2], 1.0)
        assert_allclose(state.confidence, margin, rtol=0, atol=0)

    def test_deterministic(self):
        vectors = two_clouds(10)
        a = kmeans(vectors, 2, seed=9)
        b = kmeans(vectors, 2, seed=9)
        assert (a.assignment == b.assignment).all()
        assert (a.centroids == b.centroids).all()

    def test_centroids_unit_norm(self):
        vectors = two_clouds(10)
        state = kmeans(vectors, 2, seed=42)
        assert_allclose(np.linalg.norm(state.centroids, axis=1), 1.0, rtol=1e-12)

    def test_k_out_of_range(self):
        vectors = two_clouds(3)
        with pytest.raises(ContractError):
            kmeans(vectors, 0)
        with pytest.raises(ContractError):
            kmeans(vectors, len(vectors) + 1)


class TestSelectDissimilar:
    def test_orthogonal_pair_beats_diagonal(self):
        c = np.stack([np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                      unit(np.array([1.0, 1.0]))])
        assert select_dissimilar(c, 2) == [0, 1]

    def test_k_equals_n_takes_all(self):
        c = np.eye(4)
        assert select_dissimilar(c, 4) == [0, 1, 2, 3]

    def test_k_one_takes_first(self):
        c = np.eye(3)
        assert select_dissimilar(c, 1) == [0]

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            select_dissimilar(np.eye(3), 4)


def topic_docs(k=3, n=120, seed=42):
    text, gold = topic_paragraphs(k, n, seed=seed)
    blocks = [b for b in text.split("\n\n") if b.strip()]
    return [tokenize(b) for b in blocks], gold


class TestIterateLabeling:
    def test_recovers_topics(self):
        docs, gold = topic_docs(k=3, n=120)
        result = iterate_labeling(docs, 3, d=8, seed=42)
        assert adjusted_rand_score(gold, result.labels) >= 0.8

    def test_every_doc_labeled(self):
        docs, _ = topic_docs(k=2, n=40)
        result = iterate_labeling(docs, 2, d=6, seed=42)
        assert len(result.labels) == len(docs)
        assert set(result.labels) <= {0, 1}

    def test_single_round_retain_all_matches_manual_composition(self):
        docs, _ = topic_docs(k=2, n=30)
        k, d, seed = 2, 6, 42
        result = iterate_labeling(docs, k, tau=-1.0, rounds=1, d=d, seed=seed,
                                  pool_factor=2)

        lsa = build_lsa(docs, d, seed=seed)
        vectors = lsa.project_many(docs)
        pool = kmeans(vectors, 2 * k, seed=seed)
        centroids = pool.centroids[select_dissimilar(pool.centroids, k)]
        assignment = (vectors @ centroids.T).argmax(axis=1)
        # margin >= 0 always, so tau = -1 retains every document
        lsa2 = build_lsa(docs, d, seed=seed)
        vecs2 = lsa2.project_many(docs)
        new_centroids = np.stack([
            unit(vecs2[assignment == j].sum(axis=0)) for j in range(k)])
        expected = (vecs2 @ new_centroids.T).argmax(axis=1)
        assert result.labels == [int(x) for x in expected]
        assert result.rounds_run == 1

    def test_history_records_rounds(self):
        docs, _ = topic_docs(k=2, n=40)
        result = iterate_labeling(docs, 2, d=6, seed=42, rounds=3)
        assert result.rounds_run == len(result.history)
        for entry in result.history:
            assert 0 < entry.retained <= len(docs)
            assert 0.0 <= entry.mean_confidence <= 1.0
            assert 0.0 <= entry.changed_fraction <= 1.0

    def test_converged_stop(self):
        # topics are well separated, so assignments settle before round 4
        docs, _ = topic_docs(k=2, n=60)
        result = iterate_labeling(docs, 2, d=6, seed=42, rounds=4)
        assert result.history[-1].changed_fraction < 0.001

    def test_impossible_tau_aborts_with_diagnostic(self):
        docs, _ = topic_docs(k=2, n=30)
        with pytest.raises(DataError, match="tau"):
            iterate_labeling(docs, 2, tau=1.5, d=6, seed=42)

    def test_deterministic(self):
        docs, _ = topic_docs(k=3, n=60)
        a = iterate_labeling(docs, 3, d=8, seed=13)
        b = iterate_labeling(docs, 3, d=8, seed=13)
        assert a.labels == b.labels

    def test_bad_k_rejected(self):
        docs, _ = topic_docs(k=2, n=10)
        with pytest.raises(ContractError):
            iterate_labeling(docs, 0)
        with pytest.raises(ContractError):
            iterate_labeling(docs, len(docs) + 1)

    def test_bad_rounds_rejected(self):
        docs, _ = topic_docs(k=2, n=10)
        with pytest.raises(ContractError):
            iterate_labeling(docs, 2, rounds=0)


class TestFormatLabeledLines:
    def test_round_trips_through_ingestion(self):
        texts = ["the cat sat . it purred .", "stocks\nfell hard ."]
        labels = [1, 0]
        out = format_labeled_lines(texts, labels)
        vocab = build_vocab(tokenize(" ".join(texts)), 50)
        corpus = encode_labeled(out, vocab)
        assert [p.label for p in corpus.paragraphs] == labels
        assert corpus.paragraphs[0].sentences and corpus.paragraphs[1].sentences

    def test_newlines_collapse(self):
        out = format_labeled_lines(["a\nb"], [0])
        assert out == "__label__0\ta b\n"

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractError):
            format_labeled_lines(["a"], [0, 1])
