import math

import numpy as np
import pytest

from umiformer.autodiff import ContractError, Tensor, no_grad, ops
from umiformer.encoder import (
    ABM,
    IVDB,
    PBM,
    STM,
    AttentionFusion,
    Encoder,
    EncoderConfig,
    PatchEmbed,
    Trace,
)
from umiformer.geometry import dpc_knn_cluster


def small_config(**changes):
    base = dict(image_size=16, patch_size=4, dim=12, depth=2, heads=2, ivdb_period=1, k=2, k_dpc=3, g=8)
    base.update(changes)
    return EncoderConfig(**base)


def randomize(module, rng, scale=0.5):
    for _, p in module.named_parameters():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)


class TestConfig:
    def test_ivdb_positions(self):
        assert EncoderConfig(depth=12, ivdb_period=3).ivdb_positions() == [3, 6, 9, 12]
        assert EncoderConfig(depth=12, ivdb_period=3, ivdb_once=True).ivdb_positions() == [3]
        assert EncoderConfig(depth=4, ivdb_period=0).ivdb_positions() == []

    def test_pbm_needs_g_equal_tokens(self):
        with pytest.raises(ContractError, match="set g equal"):
            small_config(merger="pbm", g=8)
        assert small_config(merger="pbm", g=16).tokens_per_view == 16

    def test_patch_divisibility(self):
        with pytest.raises(ContractError, match="not divisible"):
            EncoderConfig(image_size=30, patch_size=8)


class TestShapes:
    @pytest.mark.parametrize("n", [1, 2, 3, 5])
    def test_output_is_g_by_dim_for_any_view_count(self, f64, rng, n):
        enc = Encoder(small_config(), np.random.default_rng(0))
        out = enc(rng.random((2, n, 16, 16, 1)))
        assert out.shape == (2, 8, 12)

    def test_wrong_image_size(self, f64):
        enc = Encoder(small_config(), np.random.default_rng(0))
        with pytest.raises(ContractError, match="16x16x1"):
            enc(np.zeros((1, 2, 8, 8, 1)))

    def test_patch_embed_of_zero_image_is_position_table(self, f64):
        cfg = small_config()
        embed = PatchEmbed(cfg, np.random.default_rng(3))
        embed.proj.bias.data[...] = 0.0
        out = embed(Tensor(np.zeros((1, 2, 16, 16, 1)))).data
        np.testing.assert_array_equal(out[0, 1], embed.pos.data)

    def test_patch_order_is_row_major(self, f64):
        cfg = small_config()
        embed = PatchEmbed(cfg, np.random.default_rng(3))
        embed.pos.data[...] = 0.0
        embed.proj.weight.data[...] = 1.0
        img = np.zeros((1, 1, 16, 16, 1))
        img[0, 0, 4:8, 8:12] = 1.0  # grid cell (row 1, col 2)
        out = embed(Tensor(img)).data[0, 0, :, 0]
        assert np.flatnonzero(out).tolist() == [1 * 4 + 2]


class TestIntraView:
    def test_views_do_not_mix_without_inter_view_blocks(self, f64, rng):
        enc = Encoder(small_config(ivdb_period=0), np.random.default_rng(0))
        images = rng.random((1, 3, 16, 16, 1))
        base = enc.tokens(images).data
        changed = images.copy()
        changed[0, 2] = rng.random((16, 16, 1))
        out = enc.tokens(changed).data
        np.testing.assert_array_equal(out[0, :2], base[0, :2])
        assert not np.allclose(out[0, 2], base[0, 2])


def fusion_oracle(x, w, b):
    m, d = x.shape
    out = np.zeros(d)
    for c in range(d):
        logits = [sum(x[i, j] * w[j, c] for j in range(d)) + b[c] for i in range(m)]
        top = max(logits)
        e = [math.exp(v - top) for v in logits]
        out[c] = sum(e[i] / sum(e) * x[i, c] for i in range(m))
    return out


class TestAttentionFusion:
    def test_matches_loop_oracle(self, f64, rng):
        fusion = AttentionFusion(3, rng)
        randomize(fusion, rng)
        x = rng.normal(size=(4, 3))
        fused, scores = fusion(Tensor(x[None]))
        w, b = fusion.score.weight.data, fusion.score.bias.data
        np.testing.assert_allclose(fused.data[0], fusion_oracle(x, w, b), rtol=1e-12)
        np.testing.assert_allclose(scores.data[0], (x @ w + b).mean(axis=1), rtol=1e-12)

    def test_single_element_is_identity(self, f64, rng):
        fusion = AttentionFusion(5, rng)
        x = rng.normal(size=(2, 1, 5))
        np.testing.assert_allclose(fusion(Tensor(x))[0].data, x[:, 0], rtol=1e-14)

    def test_mask_excludes_padding(self, f64, rng):
        fusion = AttentionFusion(4, rng)
        x = rng.normal(size=(1, 3, 4))
        padded = np.concatenate([x, 100 * np.ones((1, 2, 4))], axis=1)
        mask = np.array([[True, True, True, False, False]])
        np.testing.assert_allclose(fusion(Tensor(padded), mask)[0].data, fusion(Tensor(x))[0].data, atol=1e-12)

    def test_zero_init_gives_mean(self, f64, rng):
        fusion = AttentionFusion(4, rng, zero_init=True)
        x = rng.normal(size=(1, 6, 4))
        np.testing.assert_allclose(fusion(Tensor(x))[0].data, x.mean(axis=1), atol=1e-14)


class TestIVDB:
    def test_identity_at_init(self, f64, rng):
        ivdb = IVDB(small_config(), rng)
        x = rng.normal(size=(2, 3, 16, 12))
        np.testing.assert_array_equal(ivdb(Tensor(x)).data, x)

    def test_single_view_passes_through(self, f64, rng):
        ivdb = IVDB(small_config(), rng)
        randomize(ivdb, rng)
        x = Tensor(rng.normal(size=(1, 1, 16, 12)))
        assert ivdb(x) is x

    def test_identical_views_see_zero_edges(self, f64, rng):
        # every neighbour of a token in an identical view is itself: edge input is 0
        ivdb = IVDB(small_config(k=1), rng)
        randomize(ivdb, rng)
        view = rng.normal(size=(16, 12))
        x = Tensor(np.stack([view, view])[None])
        flat, _ = ivdb.neighbor_indices(x.data)
        r = ivdb.related(x, flat).data
        zero_edge = ivdb.edge(Tensor(np.zeros((1, 12)))).data[0]
        np.testing.assert_allclose(r, np.broadcast_to(zero_edge, r.shape), atol=1e-12)

    def test_offset_weight_is_bounded(self, f64, rng):
        ivdb = IVDB(small_config(), rng)
        randomize(ivdb, rng, scale=2.0)
        x = rng.normal(size=(1, 3, 16, 12))
        y = ivdb(Tensor(x)).data
        assert (np.abs(y - x) <= np.abs(x) + 1e-12).all()

    @pytest.mark.parametrize("strategy", ["fc_mapping", "offset", "offset_weight"])
    def test_strategies_keep_shape(self, f64, rng, strategy):
        ivdb = IVDB(small_config(rectification_strategy=strategy), rng)
        assert ivdb(Tensor(rng.normal(size=(1, 2, 16, 12)))).shape == (1, 2, 16, 12)

    def test_trace_records_stage(self, f64, rng):
        enc = Encoder(small_config(depth=4, ivdb_period=2), np.random.default_rng(0))
        trace = Trace()
        enc(rng.random((1, 2, 16, 16, 1)), trace)
        assert [s for s, _ in trace.neighbors] == [2, 4]
        assert len(trace.clusters) == 1


def _ln(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-6) * gamma + beta


def stm_merge_oracle(stm, tokens):
    """Loop re-derivation of the grouped queries after the weighted attention."""
    n_tok, d = tokens.shape
    clusters = dpc_knn_cluster(tokens, stm.k_dpc, stm.g)
    w, b = stm.fusion.score.weight.data, stm.fusion.score.bias.data
    queries = np.stack([fusion_oracle(tokens[clusters.members(j)], w, b) for j in range(stm.g)])
    importance = np.array([np.mean(tokens[i] @ w + b) for i in range(n_tok)])
    attn = stm.attn
    q_in = _ln(queries, stm.norm_q.gamma.data, stm.norm_q.beta.data)
    kv_in = _ln(tokens, stm.norm_kv.gamma.data, stm.norm_kv.beta.data)
    q = q_in @ attn.wq.weight.data + attn.wq.bias.data
    k = kv_in @ attn.wk.weight.data + attn.wk.bias.data
    v = kv_in @ attn.wv.weight.data + attn.wv.bias.data
    dh = d // stm.heads
    heads_out = np.zeros((stm.g, d))
    for h in range(stm.heads):
        sl = slice(h * dh, (h + 1) * dh)
        for j in range(stm.g):
            logits = np.array([q[j, sl] @ k[i, sl] / math.sqrt(dh) + importance[i] for i in range(n_tok)])
            e = np.exp(logits - logits.max())
            heads_out[j, sl] = (e / e.sum()) @ v[:, sl]
    attended = heads_out @ attn.wo.weight.data + attn.wo.bias.data
    return queries + attended, importance


class TestSTM:
    def test_merge_matches_loop_oracle(self, f64, rng):
        cfg = EncoderConfig(image_size=8, patch_size=2, dim=6, heads=2, g=4, k_dpc=3)
        stm = STM(cfg, rng)
        randomize(stm, rng)
        x = rng.normal(size=(2, 2, 16, 6))
        out, clusters = stm.merge(Tensor(x))
        for i in range(2):
            expected, importance = stm_merge_oracle(stm, x[i].reshape(32, 6))
            np.testing.assert_allclose(out.data[i], expected, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(clusters[i].importance, importance, rtol=1e-12)

    def test_large_negative_bias_silences_key(self, f64, rng):
        cfg = EncoderConfig(image_size=8, patch_size=2, dim=6, heads=2, g=4)
        stm = STM(cfg, rng)
        q = Tensor(rng.normal(size=(1, 4, 6)))
        kv = Tensor(rng.normal(size=(1, 16, 6)))
        bias = np.zeros((1, 2, 4, 16))
        bias[..., 5] = -1e6
        weights, _ = stm.attn.scores(q, kv, Tensor(bias))
        assert weights.data[..., 5].max() < 1e-30

    def test_permuting_views_leaves_feature_unchanged(self, f64, rng):
        enc = Encoder(small_config(), np.random.default_rng(0))
        randomize(enc.ivdbs[0], rng, scale=0.2)
        images = rng.random((1, 4, 16, 16, 1))
        base = enc(images).data
        out = enc(images[:, [2, 0, 3, 1]]).data
        np.testing.assert_allclose(out, base, atol=1e-9)

    def test_too_few_tokens(self, f64, rng):
        stm = STM(EncoderConfig(image_size=8, patch_size=4, dim=6, heads=2, g=4), rng)
        stm.g = 9
        with pytest.raises(ContractError, match="g=9"):
            stm(Tensor(rng.normal(size=(1, 2, 4, 6))))


class TestBaselineMergers:
    def test_pbm_is_max_over_views(self, f64, rng):
        x = rng.normal(size=(2, 3, 16, 12))
        np.testing.assert_array_equal(PBM()(Tensor(x)).data, x.max(axis=1))

    def test_abm_single_view_identity(self, f64, rng):
        abm = ABM(small_config(merger="abm", g=16), rng)
        x = rng.normal(size=(2, 1, 16, 12))
        np.testing.assert_allclose(abm(Tensor(x)).data, x[:, 0], rtol=1e-14)

    def test_abm_of_identical_views(self, f64, rng):
        abm = ABM(small_config(merger="abm", g=16), rng)
        randomize(abm, rng)
        view = rng.normal(size=(1, 1, 16, 12))
        x = np.repeat(view, 3, axis=1)
        np.testing.assert_allclose(abm(Tensor(x)).data, view[:, 0], rtol=1e-12)

    def test_no_grad_encode(self, rng):
        enc = Encoder(small_config(), np.random.default_rng(0))
        with no_grad():
            out = enc.encode(rng.random((3, 16, 16, 1)).astype(np.float32))
        assert out.shape == (8, 12)
