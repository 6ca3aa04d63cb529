import numpy as np
import pytest

from conftest import SMALL_HYPER, random_batch, small_head

from probepool.errors import DegenerateInputError, DimensionError
from probepool.heads import (
    HEAD_KINDS,
    TokenBatch,
    binarize,
    load_checkpoint,
    make_head,
    pack_prototypes,
    param_count,
    save_checkpoint,
    unpack_prototypes,
)
from probepool.numerics import rng_stream


def init_for(head, seed=0, dtype=np.float64):
    params = head.init_params(rng_stream(seed, 7))
    return {k: v.astype(dtype) for k, v in params.items()}


class TestBinarize:
    def test_sign_with_zero_convention(self):
        np.testing.assert_array_equal(
            binarize(np.array([0.5, -0.2, 0.0])), np.array([1.0, -1.0, 1.0])
        )

    def test_all_positive(self):
        np.testing.assert_array_equal(binarize(np.ones(5)), np.ones(5))

    def test_norm_is_sqrt_d(self):
        rng = rng_stream(1, 0)
        for _ in range(10):
            p = rng.standard_normal(24)
            assert np.linalg.norm(binarize(p)) == pytest.approx(np.sqrt(24))


class TestPackPrototypes:
    def test_all_positive_single_byte(self):
        assert pack_prototypes(np.ones((1, 8))) == b"\xff"

    def test_packed_size_is_32x_smaller(self):
        rng = rng_stream(2, 0)
        p = rng.standard_normal((5, 64)).astype(np.float32)
        blob = pack_prototypes(p)
        assert len(blob) == 5 * 64 // 8
        assert p.nbytes == 32 * len(blob)

    def test_round_trip_equals_binarize(self):
        rng = rng_stream(3, 0)
        for d in (3, 8, 13, 64):
            p = rng.standard_normal((4, d)).astype(np.float32)
            back = unpack_prototypes(pack_prototypes(p), 4, d)
            np.testing.assert_array_equal(back, binarize(p))

    def test_row_padding(self):
        p = np.ones((2, 3))
        assert len(pack_prototypes(p)) == 2  # ceil(3/8) per prototype


class TestParamCounts:
    # instantiation used throughout the benchmark tables: D=768, 64x8, C=10
    CASES = {
        "linear": 7_690,
        "ep": 9_216,
        "proto": 155_600,
        "protobin": 155_600,
        "linearc": 3_932_160,
        "mlp": 398_858,
        "simpool": 597_514,
        "mhca": 1_188_106,
    }

    @pytest.mark.parametrize("kind,expected", sorted(CASES.items()))
    def test_reference_instantiation(self, kind, expected):
        assert param_count(kind, 768, 64, 8, 10) == expected

    @pytest.mark.parametrize("kind", HEAD_KINDS)
    def test_count_equals_actual_elements(self, kind):
        head = small_head(kind)
        params = head.init_params(rng_stream(0, 1))
        assert head.param_count() == sum(v.size for v in params.values())

    def test_conv_symbolic_formula(self):
        # k^2*D*D_h + D_h + D_h*C + C
        assert param_count("conv", 768, 64, 8, 10, conv_kernel=3, conv_channels=256) == (
            9 * 768 * 256 + 256 + 256 * 10 + 10
        )

    def test_abmilp_query_scaling(self):
        d, c = 768, 10
        base = param_count("abmilp", d, 64, 8, c, attn_queries=1)
        assert param_count("abmilp", d, 64, 8, c, attn_queries=3) == base + 2 * d


class TestPrototypeForward:
    def test_self_match_scores_one(self):
        head = small_head("protobin", embed_dim=8)
        params = init_for(head)
        p_row = binarize(params["prototypes"][0])
        tokens = np.tile(p_row, (1, head.num_tokens, 1))
        batch = TokenBatch.from_tokens(tokens, head.time_bins, head.freq_bins)
        _, cache = head.forward(batch, params)
        assert cache["pooled"][0, 0] == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_tokens_score_zero(self):
        head = make_head("protobin", 2, 2, 1, 1, prototypes_per_class=1)
        params = {
            "prototypes": np.array([[1.0, 1.0]]),
            "weight": np.ones((1, 1)),
        }
        tokens = np.tile(np.array([1.0, -1.0]), (1, 2, 1))
        batch = TokenBatch.from_tokens(tokens, 2, 1)
        _, cache = head.forward(batch, params)
        assert cache["pooled"][0, 0] == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("kind", ["proto", "protobin"])
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_exhaustive_loop_oracle(self, kind, seed):
        head = make_head(kind, 8, 2, 2, 3, prototypes_per_class=1)  # J = 3
        params = init_for(head, seed)
        batch = random_batch(seed, batch=2, time_bins=2, freq_bins=2)
        logits, cache = head.forward(batch, params)
        protos = (
            binarize(params["prototypes"]) if kind == "protobin" else params["prototypes"]
        )
        for b in range(2):
            pooled = np.empty(3)
            for j in range(3):
                best = -np.inf
                for t in range(2):
                    for f in range(2):
                        z = batch.tokens[b, t * 2 + f]
                        c = float(protos[j] @ z / (np.linalg.norm(protos[j]) * np.linalg.norm(z)))
                        best = max(best, c)
                pooled[j] = best
            np.testing.assert_allclose(cache["pooled"][b], pooled, atol=1e-6)
            np.testing.assert_allclose(logits[b], params["weight"] @ pooled, atol=1e-6)

    def test_proto_equals_protobin_on_sign_vectors(self):
        proto = small_head("proto")
        protobin = small_head("protobin")
        params = init_for(proto, 3, dtype=np.float32)
        params["prototypes"] = binarize(params["prototypes"])
        batch = random_batch(4, dtype=np.float32)
        out_a, _ = proto.forward(batch, params)
        out_b, _ = protobin.forward(batch, params)
        assert np.array_equal(out_a, out_b)

    def test_token_scale_invariance(self):
        head = small_head("protobin")
        params = init_for(head)
        rng = rng_stream(5, 0)
        tokens = rng.standard_normal((1, head.num_tokens, 8))
        base, _ = head.forward(TokenBatch.from_tokens(tokens.copy(), 4, 2), params)
        tokens[0, 3] *= 7.3
        scaled, _ = head.forward(TokenBatch.from_tokens(tokens, 4, 2), params)
        np.testing.assert_allclose(base, scaled, atol=1e-12)

    def test_prototype_scale_invariance(self):
        head = small_head("protobin")
        params = init_for(head)
        batch = random_batch(6)
        base, _ = head.forward(batch, params)
        params2 = dict(params)
        params2["prototypes"] = params["prototypes"] * 11.0
        scaled, _ = head.forward(batch, params2)
        np.testing.assert_allclose(base, scaled, atol=1e-12)

    def test_max_pool_dominance(self):
        head = small_head("proto", time_bins=4, freq_bins=2)
        params = init_for(head)
        rng = rng_stream(7, 0)
        tokens = rng.standard_normal((1, 8, 8))
        _, cache = head.forward(TokenBatch.from_tokens(tokens.copy(), 4, 2), params)
        base_pooled = cache["pooled"].copy()
        # adding a token = growing the grid with one extra position
        grown = make_head("proto", 8, 3, 3, 3, prototypes_per_class=2)
        extra = np.concatenate([tokens, rng.standard_normal((1, 1, 8))], axis=1)
        _, cache2 = grown.forward(TokenBatch.from_tokens(extra, 3, 3), params)
        assert np.all(cache2["pooled"] >= base_pooled - 1e-12)

    def test_zero_tokens_skipped_in_max(self):
        head = make_head("proto", 4, 2, 1, 2, prototypes_per_class=1)
        params = init_for(head)
        tokens = np.zeros((1, 2, 4))
        tokens[0, 1] = [1.0, 0.0, 0.0, 0.0]
        batch = TokenBatch.from_tokens(tokens, 2, 1)
        _, cache = head.forward(batch, params)
        assert np.all(cache["winners"] == 1)

    def test_all_zero_tokens_rejected(self):
        head = small_head("protobin")
        params = init_for(head)
        batch = TokenBatch.from_tokens(np.zeros((1, 8, 8)), 4, 2)
        with pytest.raises(DegenerateInputError):
            head.forward(batch, params)

    def test_tie_breaks_to_first_row_major_token(self):
        head = make_head("proto", 4, 2, 2, 1, prototypes_per_class=1)
        params = init_for(head)
        token = rng_stream(8, 0).standard_normal(4)
        tokens = np.tile(token, (1, 4, 1))  # every position ties
        _, cache = head.forward(TokenBatch.from_tokens(tokens, 2, 2), params)
        assert np.all(cache["winners"] == 0)

    def test_probe_output_locations(self):
        head = small_head("protobin")
        params = init_for(head)
        out = head.probe_output(random_batch(9), params, index=0)
        assert out.logits.shape == (3,)
        assert out.pooled_descriptor.shape == (head.num_prototypes,)
        assert out.argmax_locations.shape == (head.num_prototypes, 2)
        assert np.all(out.argmax_locations[:, 0] < 4)
        assert np.all(out.argmax_locations[:, 1] < 2)
        assert np.all(out.pooled_descriptor >= -1.0)
        assert np.all(out.pooled_descriptor <= 1.0)


class TestClsHeads:
    def test_linear_zero_params(self):
        head = small_head("linear")
        batch = random_batch(10)
        params = {"weight": np.zeros((3, 8)), "bias": np.zeros(3)}
        logits, _ = head.forward(batch, params)
        assert np.array_equal(logits, np.zeros((2, 3)))

    def test_linear_identity_weight(self):
        head = make_head("linear", 4, 2, 2, 4)
        batch = random_batch(11, embed_dim=4, time_bins=2, freq_bins=2)
        params = {"weight": np.eye(4), "bias": np.zeros(4)}
        logits, _ = head.forward(batch, params)
        np.testing.assert_allclose(logits, batch.cls_vec, atol=1e-12)

    def test_linear_matches_matvec_oracle(self):
        head = small_head("linear")
        params = init_for(head, 12)
        batch = random_batch(12)
        logits, _ = head.forward(batch, params)
        for b in range(2):
            expected = params["weight"] @ batch.cls_vec[b] + params["bias"]
            np.testing.assert_allclose(logits[b], expected, rtol=1e-10)

    def test_mlp_dead_relu_returns_bias(self):
        head = make_head("mlp", 8, 4, 2, 3, hidden_units=4)
        batch = random_batch(13)
        params = init_for(head, 13)
        params["w1"] = np.zeros_like(params["w1"])
        params["b1"] = -np.ones_like(params["b1"])  # always negative pre-act
        logits, _ = head.forward(batch, params)
        np.testing.assert_allclose(logits, np.tile(params["b2"], (2, 1)), atol=1e-12)

    def test_mlp_h1_manual(self):
        head = make_head("mlp", 3, 1, 1, 2, hidden_units=1)
        x = np.array([[0.5, -1.0, 2.0]])
        batch = TokenBatch.from_tokens(x[:, None, :], 1, 1)
        params = {
            "w1": np.array([[1.0, 2.0, 0.5]]),
            "b1": np.array([0.25]),
            "w2": np.array([[3.0], [-1.0]]),
            "b2": np.array([0.1, 0.2]),
        }
        h = max(0.0, 0.5 - 2.0 + 1.0 + 0.25)
        logits, _ = head.forward(batch, params)
        np.testing.assert_allclose(logits[0], [3.0 * h + 0.1, -h + 0.2])


class TestTokenHeads:
    def test_linearc_single_token_equals_linear(self):
        head = make_head("linearc", 8, 1, 1, 3)
        rng = rng_stream(14, 0)
        tokens = rng.standard_normal((2, 1, 8))
        batch = TokenBatch.from_tokens(tokens, 1, 1)
        w = rng.standard_normal((3, 8))
        logits, _ = head.forward(batch, {"weight": w})
        np.testing.assert_allclose(logits, tokens[:, 0, :] @ w.T, rtol=1e-12)

    def test_linearc_matches_flatten_oracle(self):
        head = small_head("linearc")
        params = init_for(head, 15)
        batch = random_batch(15)
        logits, _ = head.forward(batch, params)
        for b in range(2):
            flat = batch.tokens[b].reshape(-1)
            np.testing.assert_allclose(logits[b], params["weight"] @ flat, rtol=1e-10)

    def test_conv_k1_equals_per_token_linear_then_mean(self):
        head = make_head("conv", 4, 2, 2, 3, conv_kernel=1, conv_channels=3)
        rng = rng_stream(16, 0)
        tokens = rng.standard_normal((2, 4, 4))
        batch = TokenBatch.from_tokens(tokens, 2, 2)
        kernel = rng.standard_normal((3, 4, 1, 1))
        params = {
            "kernel": kernel,
            "conv_bias": np.zeros(3),
            "weight": np.eye(3),
            "bias": np.zeros(3),
        }
        logits, _ = head.forward(batch, params)
        per_token = np.maximum(tokens @ kernel[:, :, 0, 0].T, 0.0)
        np.testing.assert_allclose(logits, per_token.mean(axis=1), rtol=1e-10)

    def test_conv_matches_direct_loop_oracle(self):
        head = make_head("conv", 3, 3, 2, 2, conv_kernel=3, conv_channels=2)
        params = init_for(head, 17)
        batch = random_batch(17, embed_dim=3, time_bins=3, freq_bins=2)
        logits, _ = head.forward(batch, params)
        k, st, sf = 3, 3, 2
        grid = batch.tokens.reshape(2, st, sf, 3)
        for b in range(2):
            acts = np.zeros((st, sf, 2))
            for t in range(st):
                for f in range(sf):
                    for o in range(2):
                        acc = params["conv_bias"][o]
                        for dt in range(k):
                            for df in range(k):
                                tt, ff = t + dt - 1, f + df - 1
                                if 0 <= tt < st and 0 <= ff < sf:
                                    acc += params["kernel"][o, :, dt, df] @ grid[b, tt, ff]
                        acts[t, f, o] = max(acc, 0.0)
            pooled = acts.mean(axis=(0, 1))
            expected = params["weight"] @ pooled + params["bias"]
            np.testing.assert_allclose(logits[b], expected, rtol=1e-8)

    def test_conv_requires_odd_kernel(self):
        with pytest.raises(ValueError):
            make_head("conv", 4, 2, 2, 2, conv_kernel=2)


class TestAttentiveHeads:
    @pytest.mark.parametrize("kind", ["mhca", "simpool", "abmilp"])
    def test_uniform_tokens_pool_to_single_token(self, kind):
        head = small_head(kind)
        params = init_for(head, 18)
        token = rng_stream(18, 1).standard_normal(8)
        tokens = np.tile(token, (2, head.num_tokens, 1))
        batch = TokenBatch.from_tokens(tokens, 4, 2)
        logits, cache = head.forward(batch, params)
        single_desc = cache["desc"][0]
        if kind == "mhca":
            np.testing.assert_allclose(single_desc, params["out_proj"] @ token, rtol=1e-8)
        else:
            np.testing.assert_allclose(single_desc, token, rtol=1e-8)

    def test_abmilp_matches_hand_rolled_oracle(self):
        head = make_head("abmilp", 4, 3, 1, 2, attn_queries=1)
        params = init_for(head, 19)
        batch = random_batch(19, embed_dim=4, time_bins=3, freq_bins=1)
        logits, _ = head.forward(batch, params)
        for b in range(2):
            z = batch.tokens[b]  # (3, 4)
            scores = []
            for t in range(3):
                g = np.tanh(params["att_v"] @ z[t])
                m = 1 / (1 + np.exp(-(params["att_gate"] @ z[t])))
                scores.append(float(params["att_w"][0] @ (g * m)))
            e = np.exp(scores - np.max(scores))
            attn = e / e.sum()
            desc = sum(attn[t] * z[t] for t in range(3))
            expected = params["weight"] @ desc + params["bias"]
            np.testing.assert_allclose(logits[b], expected, rtol=1e-8)

    def test_ep_emits_cosine_maxima(self):
        head = make_head("ep", 4, 2, 1, 2)
        params = {
            "queries": np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]),
            "scale": np.ones(4),
            "shift": np.zeros(4),
        }
        tokens = np.zeros((1, 2, 4))
        tokens[0, 0] = [2.0, 0.0, 0.0, 0.0]  # aligned with query 0
        tokens[0, 1] = [0.0, -1.0, 0.0, 0.0]  # anti-aligned with query 1
        batch = TokenBatch.from_tokens(tokens, 2, 1)
        logits, _ = head.forward(batch, params)
        np.testing.assert_allclose(logits[0], [1.0, 0.0], atol=1e-12)


class TestPermutationEquivariance:
    @pytest.mark.parametrize("kind", HEAD_KINDS)
    def test_token_permutation(self, kind):
        head = small_head(kind)
        params = init_for(head, 20)
        rng = rng_stream(20, 2)
        tokens = rng.standard_normal((2, head.num_tokens, 8))
        base, _ = head.forward(TokenBatch.from_tokens(tokens.copy(), 4, 2), params)
        perm = rng.permutation(head.num_tokens)
        permuted, _ = head.forward(TokenBatch.from_tokens(tokens[:, perm], 4, 2), params)
        if kind in ("conv", "linearc"):
            assert not np.allclose(base, permuted)
        else:
            np.testing.assert_allclose(base, permuted, atol=1e-10)


class TestCheckpoints:
    @pytest.mark.parametrize("kind", HEAD_KINDS)
    def test_round_trip(self, tmp_path, kind):
        head = small_head(kind)
        params = head.init_params(rng_stream(21, 3))
        path = tmp_path / f"{kind}.ckpt"
        save_checkpoint(path, head, params)
        head2, params2 = load_checkpoint(path)
        assert head2.kind == kind
        assert head2.param_count() == head.param_count()
        for name in params:
            assert params2[name].tobytes() == params[name].tobytes()

    def test_save_is_deterministic(self, tmp_path):
        head = small_head("protobin")
        params = head.init_params(rng_stream(22, 3))
        save_checkpoint(tmp_path / "a.ckpt", head, params)
        save_checkpoint(tmp_path / "b.ckpt", head, params)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_protobin_checkpoint_embeds_packed_blob(self, tmp_path):
        head = small_head("protobin")
        params = head.init_params(rng_stream(23, 3))
        path = tmp_path / "p.ckpt"
        save_checkpoint(path, head, params)
        blob = path.read_bytes()
        assert pack_prototypes(params["prototypes"]) in blob

    def test_unknown_head_kind(self):
        with pytest.raises(ValueError, match="protobin"):
            make_head("nope", 4, 2, 2, 2)


class TestDimensionChecks:
    @pytest.mark.parametrize("kind", [k for k in HEAD_KINDS if k not in ("linear", "mlp")])
    def test_wrong_grid_rejected(self, kind):
        head = small_head(kind)
        params = init_for(head, 24)
        batch = random_batch(24, time_bins=3, freq_bins=2)  # 6 tokens, head wants 8
        with pytest.raises(DimensionError):
            head.forward(batch, params)
