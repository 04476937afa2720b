import math

import numpy as np
import pytest

from setcompat import (
    ItemInput,
    ModelConfig,
    build_pairs,
    embed_item,
    init_params,
    relation,
    score_outfit,
    score_outfit_vse,
    score_outfits,
)
from setcompat.errors import ConfigError, InputError
from setcompat.model import ModelParams, parameter_shapes
from setcompat.tensor import Tensor

from conftest import random_items, tiny_config


def oracle_score(params, items):
    """Straight-line reimplementation: one pair vector at a time, plain numpy."""
    cfg = params.config
    ordered = sorted(items, key=lambda it: it.item_id)
    dtype = params.dtype
    v = np.stack([np.asarray(it.x, dtype=dtype) for it in ordered])
    v = v @ params["proj.w"].data + params["proj.b"].data
    if cfg.vse_enabled:
        t = np.stack([np.asarray(it.d, dtype=dtype) for it in ordered])
        t = t @ params["text.w"].data + params["text.b"].data
        v = np.concatenate([v, t], axis=1)

    def run_layers(a, prefix, n_layers):
        for i in range(n_layers):
            p = f"{prefix}{i}"
            a = a @ params[f"{p}.w"].data + params[f"{p}.b"].data
            mean = a.mean()
            var = a.var()
            a = (a - mean) / np.sqrt(var + cfg.layer_norm_eps)
            a = a * params[f"{p}.ln_g"].data + params[f"{p}.ln_b"].data
            a = np.maximum(a, 0)
        return a

    hs = []
    n = len(ordered)
    for i in range(n):
        for j in range(i + 1, n):
            pair = np.concatenate([v[i], v[j]])
            hs.append(run_layers(pair, "g", len(cfg.g_layers)))
    agg = np.mean(hs, axis=0)
    z = run_layers(agg, "f", len(cfg.f_layers))
    logits = z @ params["cls.w"].data + params["cls.b"].data
    e = np.exp(logits - logits.max())
    return float((e / e.sum())[1])


class TestEmbedItem:
    def test_zero_input_zero_bias(self):
        cfg = tiny_config()
        params = init_params(cfg, np.random.default_rng(0))
        v = embed_item(params, ItemInput("a", np.zeros(8, dtype=np.float32)))
        np.testing.assert_array_equal(v, np.zeros(8, dtype=np.float32))

    def test_identity_slice_picks_row(self):
        cfg = tiny_config()
        params = init_params(cfg, np.random.default_rng(0))
        params["proj.w"].data[:] = np.eye(8, dtype=np.float32)
        e1 = np.zeros(8, dtype=np.float32)
        e1[0] = 1.0
        v = embed_item(params, ItemInput("a", e1))
        np.testing.assert_array_equal(v, e1)

    def test_matches_matvec_oracle(self):
        rng = np.random.default_rng(5)
        cfg = tiny_config()
        params = init_params(cfg, rng, dtype=np.float64)
        x = rng.normal(size=8)
        v = embed_item(params, ItemInput("a", x))
        expected = np.array(
            [sum(x[i] * params["proj.w"].data[i, j] for i in range(8)) for j in range(8)]
        ) + params["proj.b"].data
        assert np.abs(v - expected).max() < 1e-10

    def test_dimension_mismatch(self):
        params = init_params(tiny_config(), np.random.default_rng(0))
        with pytest.raises(InputError):
            embed_item(params, ItemInput("a", np.zeros(9, dtype=np.float32)))


class TestBuildPairs:
    def test_counts(self):
        rng = np.random.default_rng(0)
        assert len(build_pairs(random_items(rng, 2, 8))) == 1
        assert len(build_pairs(random_items(rng, 5, 8))) == 10

    def test_shuffled_input_identical_pairs(self):
        rng = np.random.default_rng(1)
        items = random_items(rng, 6, 8)
        base = [(a.item_id, b.item_id) for a, b in build_pairs(items)]
        for _ in range(10):
            perm = [items[i] for i in rng.permutation(len(items))]
            got = [(a.item_id, b.item_id) for a, b in build_pairs(perm)]
            assert got == base

    def test_pair_internal_order_is_ascending(self):
        rng = np.random.default_rng(2)
        for a, b in build_pairs(random_items(rng, 7, 8)):
            assert a.item_id < b.item_id

    def test_too_few_items(self):
        rng = np.random.default_rng(0)
        with pytest.raises(InputError):
            build_pairs(random_items(rng, 1, 8))


class TestRelation:
    def test_zero_weights_zero_output(self):
        cfg = tiny_config()
        params = init_params(cfg, np.random.default_rng(0))
        for name, t in params.named_tensors():
            if name.endswith(".w"):
                t.data[:] = 0
        h = relation(params, np.ones(cfg.pair_input_dim, dtype=np.float32))
        np.testing.assert_array_equal(h, np.zeros(cfg.g_layers[-1], dtype=np.float32))

    def test_eval_mode_deterministic(self):
        rng = np.random.default_rng(3)
        params = init_params(tiny_config(), rng)
        pair = rng.normal(size=16).astype(np.float32)
        h1 = relation(params, pair)
        h2 = relation(params, pair)
        assert h1.tobytes() == h2.tobytes()

    def test_matches_sequential_oracle(self):
        rng = np.random.default_rng(4)
        cfg = tiny_config()
        params = init_params(cfg, rng, dtype=np.float64)
        pair = rng.normal(size=cfg.pair_input_dim)
        a = pair.copy()
        for i in range(len(cfg.g_layers)):
            a = a @ params[f"g{i}.w"].data + params[f"g{i}.b"].data
            a = (a - a.mean()) / np.sqrt(a.var() + cfg.layer_norm_eps)
            a = a * params[f"g{i}.ln_g"].data + params[f"g{i}.ln_b"].data
            a = np.maximum(a, 0)
        got = relation(params, pair)
        assert np.abs(got - a).max() < 1e-8

    def test_wrong_width_rejected(self):
        params = init_params(tiny_config(), np.random.default_rng(0))
        with pytest.raises(InputError):
            relation(params, np.zeros(5, dtype=np.float32))


class TestScoreOutfit:
    def test_pair_of_two_aggregates_single_relation(self):
        # with n=2 the pooled vector is the single h itself
        rng = np.random.default_rng(6)
        cfg = tiny_config()
        params = init_params(cfg, rng, dtype=np.float64)
        items = random_items(rng, 2, 8, dtype=np.float64)
        assert abs(score_outfit(params, items).m_s - oracle_score(params, items)) < 1e-10

    def test_permutation_invariance_is_exact(self):
        rng = np.random.default_rng(7)
        params = init_params(tiny_config(), rng)
        for n in (2, 3, 5, 8, 12):
            items = random_items(rng, n, 8, prefix=f"n{n}-")
            base = score_outfit(params, items)
            for _ in range(5):
                perm = [items[i] for i in rng.permutation(n)]
                got = score_outfit(params, perm)
                assert got.m_s == base.m_s
                assert got.logits.tobytes() == base.logits.tobytes()

    def test_matches_forward_oracle_float64(self):
        rng = np.random.default_rng(8)
        params = init_params(tiny_config(), rng, dtype=np.float64)
        for n in (2, 4, 7):
            items = random_items(rng, n, 8, dtype=np.float64)
            assert abs(score_outfit(params, items).m_s - oracle_score(params, items)) < 1e-10

    def test_matches_forward_oracle_float32(self):
        rng = np.random.default_rng(9)
        params = init_params(tiny_config(), rng)
        items = random_items(rng, 5, 8)
        assert abs(score_outfit(params, items).m_s - oracle_score(params, items)) < 1e-6

    def test_pair_count_instrumentation(self):
        rng = np.random.default_rng(10)
        params = init_params(tiny_config(), rng)
        for n in range(2, 13):
            items = random_items(rng, n, 8)
            assert score_outfit(params, items).n_pairs == math.comb(n, 2)

    def test_probability_contract(self):
        rng = np.random.default_rng(11)
        params = init_params(tiny_config(), rng)
        score = score_outfit(params, random_items(rng, 4, 8))
        assert 0.0 < score.m_s < 1.0
        assert abs(score.probs.sum() - 1.0) < 1e-6
        assert score.m_s == float(score.probs[1])

    def test_single_item_rejected(self):
        params = init_params(tiny_config(), np.random.default_rng(0))
        with pytest.raises(InputError):
            score_outfit(params, random_items(np.random.default_rng(0), 1, 8))

    def test_duplicate_ids_rejected(self):
        params = init_params(tiny_config(), np.random.default_rng(0))
        items = random_items(np.random.default_rng(0), 3, 8)
        items[1].item_id = items[0].item_id
        with pytest.raises(InputError, match="duplicate"):
            score_outfit(params, items)

    def test_batched_scores_match_single(self):
        rng = np.random.default_rng(12)
        params = init_params(tiny_config(), rng)
        outfits = [random_items(rng, int(rng.integers(2, 7)), 8, prefix=f"o{k}-") for k in range(20)]
        batched = score_outfits(params, outfits)
        singles = np.array([score_outfit(params, o).m_s for o in outfits])
        np.testing.assert_allclose(batched, singles, atol=1e-6)


class TestScoreOutfitVse:
    def vse_config(self):
        return tiny_config(vse_enabled=True, vocab_size=12, text_projection_dim=4)

    def test_zero_text_weights_reduce_to_plain_model(self):
        # drop the text columns from g's first layer: identical scores
        rng = np.random.default_rng(13)
        cfg = self.vse_config()
        params = init_params(cfg, rng, dtype=np.float64)
        params["text.w"].data[:] = 0
        params["text.b"].data[:] = 0
        plain_cfg = tiny_config()
        p, t = cfg.projection_dim, cfg.text_projection_dim
        rows = np.concatenate(
            [np.arange(0, p), np.arange(p + t, p + t + p)]
        )
        tensors = {}
        for name, shape in parameter_shapes(plain_cfg):
            if name == "g0.w":
                tensors[name] = Tensor(params["g0.w"].data[rows, :].copy())
            else:
                tensors[name] = Tensor(params[name].data.copy())
        plain = ModelParams(plain_cfg, tensors)
        items = random_items(rng, 4, 8, dtype=np.float64, vocab_size=12)
        s_vse = score_outfit_vse(params, items).m_s
        s_plain = score_outfit(plain, [ItemInput(i.item_id, i.x) for i in items]).m_s
        assert abs(s_vse - s_plain) < 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(14)
        params = init_params(self.vse_config(), rng)
        items = random_items(rng, 6, 8, vocab_size=12)
        base = score_outfit_vse(params, items).m_s
        for _ in range(5):
            perm = [items[i] for i in rng.permutation(6)]
            assert score_outfit_vse(params, perm).m_s == base

    def test_matches_forward_oracle(self):
        rng = np.random.default_rng(15)
        params = init_params(self.vse_config(), rng, dtype=np.float64)
        items = random_items(rng, 5, 8, dtype=np.float64, vocab_size=12)
        assert abs(score_outfit_vse(params, items).m_s - oracle_score(params, items)) < 1e-10

    def test_missing_description_rejected(self):
        rng = np.random.default_rng(16)
        params = init_params(self.vse_config(), rng)
        items = random_items(rng, 3, 8, vocab_size=12)
        items[1].d = None
        with pytest.raises(InputError, match="description"):
            score_outfit_vse(params, items)

    def test_plain_params_rejected(self):
        rng = np.random.default_rng(17)
        params = init_params(tiny_config(), rng)
        with pytest.raises(ConfigError):
            score_outfit_vse(params, random_items(rng, 3, 8))


class TestInitParams:
    def test_same_seed_bit_identical(self):
        cfg = tiny_config()
        a = init_params(cfg, np.random.default_rng(99))
        b = init_params(cfg, np.random.default_rng(99))
        for (name, ta), (_, tb) in zip(a.named_tensors(), b.named_tensors()):
            assert ta.data.tobytes() == tb.data.tobytes(), name

    def test_gains_ones_biases_zero(self):
        params = init_params(tiny_config(), np.random.default_rng(0))
        for name, t in params.named_tensors():
            if name.endswith(".ln_g"):
                np.testing.assert_array_equal(t.data, np.ones_like(t.data))
            elif name.endswith((".b", ".ln_b")):
                np.testing.assert_array_equal(t.data, np.zeros_like(t.data))

    def test_weight_sample_mean_within_bound(self):
        params = init_params(
            tiny_config(projection_dim=64, g_layers=(64, 64), f_layers=(32,)),
            np.random.default_rng(123),
        )
        for name, t in params.named_tensors():
            if not name.endswith(".w"):
                continue
            fan_in, fan_out = t.data.shape
            s = math.sqrt(6.0 / (fan_in + fan_out))
            assert abs(float(t.data.mean())) < 3 * s / math.sqrt(t.data.size), name

    def test_parameter_count_derives_from_config(self):
        cfg = tiny_config()
        params = init_params(cfg, np.random.default_rng(0))
        expected = sum(int(np.prod(shape)) for _, shape in parameter_shapes(cfg))
        assert params.parameter_count() == expected

    def test_bad_configs_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(feature_dim=0)
        with pytest.raises(ConfigError):
            ModelConfig(feature_dim=4, g_layers=())
        with pytest.raises(ConfigError):
            ModelConfig(feature_dim=4, dropout_rate=1.0)
        with pytest.raises(ConfigError):
            ModelConfig(feature_dim=4, vse_enabled=True, vocab_size=0)


class TestTrainEvalModes:
    def test_train_mode_applies_dropout_eval_does_not(self):
        rng = np.random.default_rng(18)
        params = init_params(tiny_config(dropout_rate=0.5), rng)
        items = random_items(rng, 4, 8)
        eval_1 = score_outfit(params, items, mode="eval").m_s
        eval_2 = score_outfit(params, items, mode="eval").m_s
        assert eval_1 == eval_2
        train_scores = {
            score_outfit(params, items, mode="train", rng=np.random.default_rng(s)).m_s
            for s in range(8)
        }
        assert len(train_scores) > 1

    def test_unknown_mode_rejected(self):
        rng = np.random.default_rng(19)
        params = init_params(tiny_config(), rng)
        with pytest.raises(InputError):
            score_outfit(params, random_items(rng, 3, 8), mode="predict")
