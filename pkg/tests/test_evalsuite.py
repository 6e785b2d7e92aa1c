import warnings
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from seal.errors import DataError, NumericalError
from seal.evalsuite import (
    AttentionPool,
    DegenerateMetricWarning,
    abmil_pool,
    cosine_similarity,
    expand_active_genes,
    g2i_build_query,
    g2i_similarity_map,
    i2g_retrieve,
    kfold_probe,
    mean_pool,
    metric_auc,
    metric_mse,
    metric_pcc,
    metric_spearman,
    pca_fit,
    pca_transform,
    rasterize,
    ridge_fit,
    ridge_predict,
)

from oracles import gd_least_squares, pairwise_auc


class TestPca:
    def test_subspace_reconstruction(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(30, 2)) @ rng.normal(size=(2, 6)) + 4.0
        p = pca_fit(X, 2)
        rec = pca_transform(X, p) @ p.components + p.mean
        np.testing.assert_allclose(rec, X, atol=1e-10)

    def test_orthonormal_components(self):
        p = pca_fit(np.random.default_rng(1).normal(size=(20, 7)), 5)
        np.testing.assert_allclose(p.components @ p.components.T, np.eye(5), atol=1e-8)

    def test_explained_variance_oracle(self):
        X = np.random.default_rng(2).normal(size=(10, 6))
        Xc = X - X.mean(axis=0)
        cov = np.zeros((6, 6))
        for row in Xc:
            cov += np.outer(row, row)
        cov /= 9
        ref = np.sort(np.linalg.eigvals(cov).real)[::-1][:4]
        np.testing.assert_allclose(pca_fit(X, 4).explained_variance, ref, atol=1e-8)

    def test_sign_convention(self):
        p = pca_fit(np.random.default_rng(3).normal(size=(15, 5)), 3)
        pivots = p.components[np.arange(3), np.abs(p.components).argmax(axis=1)]
        assert (pivots > 0).all()

    def test_too_many_components(self):
        with pytest.raises(DataError):
            pca_fit(np.zeros((4, 6)), 5)


class TestRidge:
    def test_exact_fit(self):
        rng = np.random.default_rng(0)
        Z = rng.normal(size=(12, 3))
        Y = Z @ rng.normal(size=(3, 2)) + np.array([1.0, -2.0])
        np.testing.assert_allclose(ridge_predict(Z, ridge_fit(Z, Y, 0.0)), Y, atol=1e-10)

    def test_huge_alpha_predicts_mean(self):
        rng = np.random.default_rng(1)
        Z, Y = rng.normal(size=(10, 3)), rng.normal(size=(10, 2))
        w = ridge_fit(Z, Y, 1e12)
        assert np.abs(w.coef).max() < 1e-9
        np.testing.assert_allclose(ridge_predict(Z, w), np.tile(Y.mean(axis=0), (10, 1)), atol=1e-9)

    def test_gradient_descent_oracle(self):
        rng = np.random.default_rng(2)
        Z, Y = rng.normal(size=(20, 3)), rng.normal(size=(20, 2))
        w = ridge_fit(Z, Y, 0.7)
        coef, intercept = gd_least_squares(Z, Y, 0.7)
        np.testing.assert_allclose(w.coef, coef, atol=1e-6)
        np.testing.assert_allclose(w.intercept, intercept, atol=1e-6)

    def test_singular(self):
        Z = np.ones((5, 2))
        with pytest.raises(NumericalError):
            ridge_fit(Z, np.zeros((5, 1)), 0.0)


class TestMetrics:
    def test_pcc_self(self):
        x = np.random.default_rng(0).normal(size=20)
        assert metric_pcc(x, x) == pytest.approx(1.0)
        assert metric_mse(x, x) == 0.0

    def test_constant_input(self):
        with pytest.warns(DegenerateMetricWarning):
            assert metric_pcc(np.ones(5), np.arange(5)) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_spearman_monotone_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=15), rng.normal(size=15)
        assert metric_spearman(np.exp(a) * 3 + 1, b) == pytest.approx(metric_spearman(a, b), abs=1e-12)

    def test_auc_example(self):
        assert metric_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_auc_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.integers(0, 5, size=12).astype(float)
        labels = np.r_[0, 1, rng.integers(0, 2, size=10)]
        assert metric_auc(scores, labels) == pairwise_auc(scores, labels)

    def test_auc_needs_both_classes(self):
        with pytest.raises(DataError):
            metric_auc([0.1, 0.2], [1, 1])


class TestProbe:
    def test_linear_targets(self):
        rng = np.random.default_rng(0)
        E = rng.normal(size=(60, 8))
        r = kfold_probe(E, E @ rng.normal(size=(8, 3)), n_components=8, alpha=1e-6)
        assert r.mean_pcc > 0.999

    def test_leave_one_out(self):
        rng = np.random.default_rng(1)
        E, Y = rng.normal(size=(8, 3)), rng.normal(size=(8, 2))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateMetricWarning)
            r = kfold_probe(E, Y, k=8)
        assert np.isfinite(r.mse).all() and r.pcc.shape == (8, 2)

    def test_k_too_large(self):
        with pytest.raises(DataError):
            kfold_probe(np.zeros((4, 2)), np.zeros((4, 1)), k=5)

    def test_seeded_folds(self):
        rng = np.random.default_rng(2)
        E, Y = rng.normal(size=(30, 4)), rng.normal(size=(30, 2))
        a, b = kfold_probe(E, Y, seed=3), kfold_probe(E, Y, seed=3)
        np.testing.assert_array_equal(a.folds, b.folds)
        np.testing.assert_array_equal(a.pcc, b.pcc)

    def test_noise_monotone(self):
        means = []
        for sigma in (0.0, 0.5, 2.0):
            vals = []
            for seed in range(3):
                rng = np.random.default_rng(seed)
                E = rng.normal(size=(100, 10))
                Y = E @ rng.normal(size=(10, 4)) + sigma * rng.normal(size=(100, 4))
                vals.append(kfold_probe(E, Y, seed=seed).mean_pcc)
            means.append(np.mean(vals))
        assert means[0] > means[1] > means[2]

    def test_write_tsv(self, tmp_path):
        rng = np.random.default_rng(4)
        r = kfold_probe(rng.normal(size=(20, 3)), rng.normal(size=(20, 2)), genes=["A", "B"])
        lines = (tmp_path / "p.tsv").write_text("") or None
        r.write_tsv(tmp_path / "p.tsv")
        rows = (tmp_path / "p.tsv").read_text().splitlines()
        assert rows[0].startswith("gene\tpcc_mean") and [l.split("\t")[0] for l in rows[1:]] == ["A", "B"]


class TestPooling:
    def test_mean_pool(self):
        v = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(mean_pool(v[None]), v)
        np.testing.assert_array_equal(mean_pool(np.stack([v, -v])), np.zeros(3))
        bag = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_allclose(mean_pool(bag[::-1]), mean_pool(bag), atol=1e-15)

    def pool(self):
        torch.manual_seed(0)
        return AttentionPool(4, hidden=6).double()

    def test_single_item(self):
        v = np.array([[0.5, -1.0, 2.0, 0.0]])
        emb, a = abmil_pool(v, self.pool())
        np.testing.assert_array_equal(a, [1.0])
        np.testing.assert_allclose(emb, v[0], rtol=1e-15)

    def test_identical_items_uniform(self):
        _, a = abmil_pool(np.tile([[0.3, 0.1, -0.2, 1.0]], (4, 1)), self.pool())
        np.testing.assert_allclose(a, np.full(4, 0.25), rtol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(1, 8))
    def test_permutation_and_convexity(self, seed, m):
        rng = np.random.default_rng(seed)
        bag = rng.normal(size=(m, 4))
        perm = rng.permutation(m)
        p = self.pool()
        emb, a = abmil_pool(bag, p)
        emb2, a2 = abmil_pool(bag[perm], p)
        np.testing.assert_allclose(emb2, emb, atol=1e-12)
        np.testing.assert_allclose(a2, a[perm], atol=1e-12)
        assert abs(a.sum() - 1) <= 1e-6
        assert (emb >= bag.min(axis=0) - 1e-12).all() and (emb <= bag.max(axis=0) + 1e-12).all()

    def test_empty_bag(self):
        with pytest.raises(DataError):
            abmil_pool(np.zeros((0, 4)), self.pool())


class TestI2g:
    def test_k1_is_nearest_neighbour(self):
        rng = np.random.default_rng(0)
        R, P, Q = rng.normal(size=(30, 5)), rng.normal(size=(30, 7)), rng.normal(size=(10, 5))
        out = i2g_retrieve(Q, R, P, K=1)
        for i, q in enumerate(Q):
            sims = [q @ r / (np.linalg.norm(q) * np.linalg.norm(r)) for r in R]
            np.testing.assert_array_equal(out[i], P[int(np.argmax(sims))])

    def test_equal_similarities_plain_mean(self):
        R = np.tile([[1.0, 2.0]], (6, 1))
        P = np.random.default_rng(1).normal(size=(6, 3))
        np.testing.assert_allclose(i2g_retrieve(np.array([2.0, 4.0]), R, P, K=6), P.mean(axis=0), atol=1e-7)

    def test_weighted_average(self):
        R = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        P = np.array([[1.0], [2.0], [3.0]])
        s = np.array([1.0, 1 / np.sqrt(2)])
        expect = (s @ P[:2]) / s.sum()
        np.testing.assert_allclose(i2g_retrieve(np.array([1.0, 0.0]), R, P, K=2), expect, rtol=1e-14)

    def test_errors(self):
        R, P = np.eye(3), np.eye(3)
        with pytest.raises(DataError):
            i2g_retrieve(np.ones(3), R, P, K=4)
        with pytest.raises(NumericalError):
            i2g_retrieve(np.array([1.0, 0, 0]), np.array([[1.0, 0, 0], [-1.0, 0, 0]]), np.eye(2), K=2)
        with pytest.raises(DataError):
            cosine_similarity(np.zeros(3), R)


class TestG2i:
    def table(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=200)
        X = np.stack([a, 2 * a + 1, rng.normal(size=200), rng.normal(size=200)], axis=1)
        X[:, 2] = rng.normal(size=200)
        return SimpleNamespace(values=X, gene_names=["A", "B", "C", "D"])

    def test_expansion_pair(self):
        t = self.table()
        assert expand_active_genes(t.values, t.gene_names, ["A"]) == ["A", "B"]

    def test_percentile_filter(self):
        X = np.arange(1, 101, dtype=float)[:, None]
        t = SimpleNamespace(values=X, gene_names=["G"])
        q = g2i_build_query(["G"], t, X)
        np.testing.assert_array_equal(q.kept_spots, np.arange(75, 100))

    def test_query_embedding_is_mean(self):
        t = self.table()
        emb = np.random.default_rng(5).normal(size=(200, 6))
        q = g2i_build_query(["A"], t, emb)
        total = np.zeros(6)
        for i in q.kept_spots:
            total += emb[i]
        np.testing.assert_allclose(q.query_embedding, total / len(q.kept_spots), atol=1e-7)
        np.testing.assert_allclose(q.query_vector, t.values[q.kept_spots].mean(axis=0))

    def test_missing_gene(self):
        with pytest.raises(DataError):
            g2i_build_query(["Z"], self.table(), np.zeros((200, 2)))

    def test_similarity_map(self, tmp_path):
        rng = np.random.default_rng(1)
        patches = rng.normal(size=(12, 4))
        coords = np.stack(np.meshgrid(np.arange(4.0), np.arange(3.0)), -1).reshape(-1, 2)
        q = SimpleNamespace(query_embedding=patches[5].copy())
        s = g2i_similarity_map(q, patches, coords, tmp_path / "m.tsv", tmp_path / "m.png")
        assert s[5] == pytest.approx(1.0) and np.all(np.abs(s) <= 1 + 1e-12)
        q.query_embedding = 7.5 * q.query_embedding
        np.testing.assert_array_equal(np.argsort(g2i_similarity_map(q, patches, coords)), np.argsort(s))
        assert len((tmp_path / "m.tsv").read_text().splitlines()) == 13
        assert (tmp_path / "m.png").stat().st_size > 0
        assert rasterize(coords, s).shape == (3, 4)
