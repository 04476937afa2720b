import numpy as np
import pytest

from setcompat import (
    ItemInput,
    auc,
    eval_compat,
    eval_fitb,
    export_embeddings,
    init_params,
    pca2d,
    read_features,
    score_outfit,
)
from setcompat.data import FitbQuery
from setcompat.errors import InputError
from setcompat.evaluation import EvaluationError
from setcompat.model import embed_item

from conftest import random_items, tiny_config


def brute_force_auc(pos, neg):
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_separation(self):
        assert auc([0.9, 0.8], [0.3, 0.1]) == 1.0

    def test_all_ties(self):
        assert auc([0.5, 0.5, 0.5], [0.5, 0.5]) == 0.5

    def test_three_of_four_ordered_pairs(self):
        # brute force: (.8,.6) (.8,.2) (.4,.2) win, (.4,.6) loses
        assert auc([0.8, 0.4], [0.6, 0.2]) == 0.75

    def test_empty_class_rejected(self):
        with pytest.raises(EvaluationError):
            auc([], [0.5])
        with pytest.raises(EvaluationError):
            auc([0.5], [])

    def test_equals_brute_force_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            n_pos = int(rng.integers(1, 50))
            n_neg = int(rng.integers(1, 50))
            pool = rng.integers(0, 12, size=n_pos + n_neg) / 10.0  # plenty of ties
            pos, neg = pool[:n_pos], pool[n_pos:]
            assert auc(pos, neg) == brute_force_auc(list(pos), list(neg))

    def test_antisymmetry_without_ties(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            scores = rng.permutation(100) / 100.0
            pos, neg = scores[:40], scores[40:]
            assert auc(pos, neg) + auc(neg, pos) == 1.0

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(2)
        pos = rng.random(30)
        neg = rng.random(40)
        base = auc(pos, neg)
        assert auc(2.0 * pos + 1.0, 2.0 * neg + 1.0) == base
        assert auc(np.exp(pos), np.exp(neg)) == base


class TestEvalCompat:
    def _labeled(self, rng, count=12):
        return [
            (random_items(rng, int(rng.integers(2, 6)), 8, prefix=f"e{k}-"), int(k % 2))
            for k in range(count)
        ]

    def test_constant_scorer_gives_half(self):
        params = init_params(tiny_config(), np.random.default_rng(0))
        for name, t in params.named_tensors():
            if not name.endswith(".ln_g"):
                t.data[:] = 0
        rng = np.random.default_rng(1)
        report = eval_compat(params, self._labeled(rng))
        assert report.auc == 0.5

    def test_label_flip_antisymmetry(self):
        rng = np.random.default_rng(2)
        params = init_params(tiny_config(), rng)
        labeled = self._labeled(rng, count=20)
        flipped = [(items, 1 - label) for items, label in labeled]
        a = eval_compat(params, labeled).auc
        b = eval_compat(params, flipped).auc
        assert abs((1.0 - a) - b) < 1e-12

    def test_single_class_rejected(self):
        rng = np.random.default_rng(3)
        params = init_params(tiny_config(), rng)
        labeled = [(random_items(rng, 3, 8, prefix=f"s{k}-"), 1) for k in range(4)]
        with pytest.raises(EvaluationError):
            eval_compat(params, labeled)

    def test_counts_and_histogram(self):
        rng = np.random.default_rng(4)
        params = init_params(tiny_config(), rng)
        report = eval_compat(params, self._labeled(rng, count=20))
        assert report.n_pos == 10 and report.n_neg == 10
        assert sum(report.histogram["pos"]) == 10
        assert sum(report.histogram["neg"]) == 10


def _fitb_world(rng, n_queries=40, feature_dim=8):
    items = {}
    queries = []
    counter = 0

    def new_item(prefix):
        nonlocal counter
        item = ItemInput(f"{prefix}{counter:04d}", rng.normal(size=feature_dim).astype(np.float32))
        counter += 1
        items[item.item_id] = item
        return item

    for q in range(n_queries):
        partial = [new_item("a") for _ in range(3)]
        candidates = [new_item("z") for _ in range(4)]
        answer_index = int(rng.integers(4))
        queries.append(
            FitbQuery(
                partial_items=tuple(i.item_id for i in partial),
                candidates=tuple(c.item_id for c in candidates),
                answer_index=answer_index,
                category="top",
                outfit_id=f"q{q}",
            )
        )
    return items, queries


class TestEvalFitb:
    def test_identical_candidates_tie_break_to_lowest_index(self):
        rng = np.random.default_rng(5)
        params = init_params(tiny_config(), rng)
        shared = rng.normal(size=8).astype(np.float32)
        items = {f"a{k}": ItemInput(f"a{k}", rng.normal(size=8).astype(np.float32)) for k in range(2)}
        # candidate ids all sort after the partial items, so scores tie exactly
        for k in range(4):
            items[f"z{k}"] = ItemInput(f"z{k}", shared.copy())
        query = FitbQuery(
            partial_items=("a0", "a1"),
            candidates=("z0", "z1", "z2", "z3"),
            answer_index=2,
            category="top",
        )
        report = eval_fitb(params, [query], items)
        assert report.n_ties == 1
        assert report.results[0].chosen == 0
        assert report.accuracy == 0.0

    def test_random_scorer_near_chance(self):
        rng = np.random.default_rng(6)
        params = init_params(tiny_config(), rng)
        items, queries = _fitb_world(rng, n_queries=400)
        report = eval_fitb(params, queries, items)
        assert 0.15 < report.accuracy < 0.35

    def test_missing_feature_excluded_and_counted(self):
        rng = np.random.default_rng(7)
        params = init_params(tiny_config(), rng)
        items, queries = _fitb_world(rng, n_queries=5)
        del items[queries[0].candidates[0]]
        report = eval_fitb(params, queries, items)
        assert report.n_excluded == 1
        assert report.n_queries == 4

    def test_accuracy_matches_results(self):
        rng = np.random.default_rng(8)
        params = init_params(tiny_config(), rng)
        items, queries = _fitb_world(rng, n_queries=60)
        report = eval_fitb(params, queries, items)
        correct = sum(r.chosen == r.answer for r in report.results)
        assert report.accuracy == correct / report.n_queries

    def test_candidate_order_invariance_up_to_ties(self):
        rng = np.random.default_rng(9)
        params = init_params(tiny_config(), rng)
        items, queries = _fitb_world(rng, n_queries=30)
        report = eval_fitb(params, queries, items)
        # reverse candidate order; correctness of untied queries is unchanged
        reversed_queries = [
            FitbQuery(
                partial_items=q.partial_items,
                candidates=tuple(reversed(q.candidates)),
                answer_index=3 - q.answer_index,
                category=q.category,
                outfit_id=q.outfit_id,
            )
            for q in queries
        ]
        report2 = eval_fitb(params, reversed_queries, items)
        for r1, r2 in zip(report.results, report2.results):
            if not (r1.tied or r2.tied):
                assert (r1.chosen == r1.answer) == (r2.chosen == r2.answer)


class TestExportEmbeddings:
    def test_round_trip_matches_embed_item(self, tmp_path):
        rng = np.random.default_rng(10)
        params = init_params(tiny_config(), rng)
        items = random_items(rng, 20, 8)
        path = tmp_path / "emb.frnf"
        export_embeddings(params, items, path)
        store = read_features(path)
        assert store.dim == params.config.projection_dim
        for it in items:
            assert store.get(it.item_id).tobytes() == embed_item(params, it).tobytes()

    def test_zero_weights_zero_embeddings(self, tmp_path):
        params = init_params(tiny_config(), np.random.default_rng(0))
        params["proj.w"].data[:] = 0
        params["proj.b"].data[:] = 0
        items = random_items(np.random.default_rng(1), 5, 8)
        path = tmp_path / "emb.frnf"
        export_embeddings(params, items, path)
        store = read_features(path)
        assert not store.vectors.any()


class TestPca2d:
    def test_axis_aligned_line(self):
        rng = np.random.default_rng(11)
        x = np.zeros((50, 3))
        x[:, 0] = rng.normal(size=50)
        result = pca2d(x)
        np.testing.assert_allclose(np.abs(result.components[0]), [1.0, 0.0, 0.0], atol=1e-6)
        assert result.components[0][0] > 0  # sign fixed
        assert result.variances[1] == 0.0
        assert result.rank_deficient

    def test_isotropic_sample_has_balanced_variances(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(5000, 2))
        result = pca2d(x)
        v1, v2 = result.variances
        assert not result.rank_deficient
        assert v2 / v1 > 0.9

    def test_isometry_on_2d_subspace(self):
        rng = np.random.default_rng(13)
        basis, _ = np.linalg.qr(rng.normal(size=(5, 2)))
        coords_true = rng.normal(size=(40, 2)) * [3.0, 1.0]
        x = coords_true @ basis.T
        result = pca2d(x)
        d_orig = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
        d_proj = np.linalg.norm(
            result.coords[:, None, :] - result.coords[None, :, :], axis=2
        )
        np.testing.assert_allclose(d_proj, d_orig, atol=1e-9)

    def test_matches_dense_eigensolver(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(200, 6)) @ np.diag([5.0, 3.0, 1.0, 0.5, 0.2, 0.1])
        result = pca2d(x)
        cov = np.cov(x, rowvar=False)
        eigvals, eigvecs = np.linalg.eigh(cov)
        top = eigvals[::-1][:2]
        np.testing.assert_allclose(result.variances, top, rtol=1e-8)
        for i in range(2):
            vec = eigvecs[:, ::-1][:, i]
            assert abs(abs(vec @ result.components[i]) - 1.0) < 1e-7

    def test_all_zero_input_flagged(self):
        result = pca2d(np.zeros((10, 4)))
        assert result.rank_deficient
        assert result.variances == (0.0, 0.0)
        assert not result.coords.any()

    def test_too_few_rows_rejected(self):
        with pytest.raises(InputError):
            pca2d(np.zeros((1, 4)))

    def test_deterministic(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(100, 7))
        a = pca2d(x)
        b = pca2d(x)
        assert a.coords.tobytes() == b.coords.tobytes()
