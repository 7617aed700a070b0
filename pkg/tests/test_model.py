import numpy as np
import pytest

from radgen import tensor as T
from radgen.exceptions import ConfigError, DimensionError, UsageError, VocabRangeError
from radgen.model import (
    ModelConfig, attention, check_params, embed_report, encode, encoder_layer, feed_forward, forward, fuse,
    init_params, param_names,
)
from radgen.tensor import Tensor
from radgen.text import BOS, EOS, PAD

from helpers import model_gradient_errors, randomized_params, tiny_config
from oracles import finite_difference, relative_error


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


class TestAttention:
    def test_hand_instance(self):
        out = attention(t64([[1, 0]]), t64([[1, 0], [0, 1]]), t64([[1, 0], [0, 1]])).data
        w = np.exp([1 / np.sqrt(2), 0.0])
        w /= w.sum()
        assert np.allclose(out, [w], atol=1e-15)

    def test_single_key_returns_value(self, rng):
        v = rng.normal(size=(1, 4))
        out = attention(t64(rng.normal(size=(5, 4))), t64(rng.normal(size=(1, 4))), t64(v)).data
        assert np.allclose(out, np.repeat(v, 5, axis=0), atol=1e-15)

    def test_masked_keys_ignored(self, rng):
        q, k, v = (t64(rng.normal(size=(2, 3))) for _ in range(3))
        mask = np.array([[False, True], [False, True]])
        out = attention(q, k, v, mask).data
        assert np.allclose(out, np.repeat(v.data[:1], 2, axis=0))

    def test_fully_masked_row(self, rng):
        x = t64(rng.normal(size=(2, 3)))
        with pytest.raises(UsageError):
            attention(x, x, x, np.array([[True, True], [False, False]]))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            attention(t64(np.ones((2, 3))), t64(np.ones((2, 4))), t64(np.ones((2, 4))))


class TestEmbedding:
    def test_shapes_and_pad_mask(self):
        cfg = tiny_config()
        params = init_params(cfg, np.random.default_rng(0))
        x, mask = embed_report([BOS], params, cfg)
        assert x.shape == (1, cfg.d_model) and not mask.any()
        _, mask = embed_report([BOS, 5, EOS, PAD, PAD], params, cfg)
        assert mask.tolist() == [False, False, False, True, True]

    def test_deterministic(self):
        cfg = tiny_config()
        params = init_params(cfg, np.random.default_rng(0))
        a, _ = embed_report([1, 4, 5, 2], params, cfg)
        b, _ = embed_report([1, 4, 5, 2], params, cfg)
        assert a.data.tobytes() == b.data.tobytes()

    def test_out_of_range(self):
        cfg = tiny_config()
        with pytest.raises(VocabRangeError):
            embed_report([1, cfg.vocab_size], init_params(cfg, np.random.default_rng(0)), cfg)


class TestFuse:
    def setup_method(self):
        self.cfg = tiny_config(n_heads=1)
        self.params = randomized_params(self.cfg, seed=3)
        r = np.random.default_rng(9)
        self.f_img = t64(r.normal(size=(3, 8)))
        self.f_rep = t64(r.normal(size=(4, 8)))

    def test_zero_weight_is_image_branch(self):
        self.params["enc.0.mix"].data = np.asarray(0.0)
        fused = fuse(self.f_img, self.f_rep, np.zeros(4, bool), self.params, 0, self.cfg).data
        skipped = fuse(self.f_img, None, None, self.params, 0, self.cfg).data
        assert fused.tobytes() == skipped.tobytes()

    def test_single_report_row(self):
        p = self.params
        p["enc.0.mix"].data = np.asarray(1.0)
        f_img = t64(np.random.default_rng(2).normal(size=(1, 8)))
        v = np.random.default_rng(4).normal(size=(1, 8))
        out = fuse(f_img, t64(v), None, p, 0, self.cfg).data
        image_only = fuse(f_img, None, None, p, 0, self.cfg).data
        expected = image_only + v @ p["enc.0.cross.wv"].data @ p["enc.0.cross.wo"].data
        assert np.allclose(out, expected, atol=1e-12)

    def test_weight_gradient(self):
        w = self.params["enc.0.mix"]
        mask = np.array([False, False, True, True])
        up = np.random.default_rng(0).normal(size=(3, 8))
        T.backward(T.sum(T.mul(fuse(self.f_img, self.f_rep, mask, self.params, 0, self.cfg), t64(up))))

        def f():
            with T.no_grad():
                return float(np.sum(fuse(self.f_img, self.f_rep, mask, self.params, 0, self.cfg).data * up))

        assert relative_error(w.grad, finite_difference(f, [w.data])[0]) < 1e-3


class TestEncoderLayer:
    def test_ffn_identity(self, rng):
        cfg = tiny_config()
        d, dff = cfg.d_model, cfg.d_ff
        params = {
            "x.w1": t64(np.eye(d, dff)), "x.b1": t64(np.zeros(dff)),
            "x.w2": t64(np.eye(dff, d)), "x.b2": t64(np.zeros(d)),
        }
        x = np.abs(rng.normal(size=(3, d)))
        assert np.array_equal(feed_forward(t64(x), params, "x").data, x)

    def test_zero_variance_rows_pass_literal_step(self):
        cfg = tiny_config(n_layers=1)
        params = randomized_params(cfg, seed=1)
        for name in ("enc.0.ln1.gain", "enc.0.ln2.gain"):
            params[name].data = np.ones(cfg.d_model)
        for name in ("enc.0.ln1.bias", "enc.0.ln2.bias", "enc.0.ffn.b1", "enc.0.ffn.b2"):
            params[name].data = np.zeros_like(params[name].data)
        params["enc.0.self.wo"].data = np.zeros((8, 8))
        params["enc.0.mix"].data = np.asarray(0.0)
        f = t64(np.random.default_rng(0).normal(size=(2, 8)))
        out = encoder_layer(f, None, None, params, 0, cfg).data
        assert np.array_equal(out, np.zeros((2, 8)))

    def test_literal_and_standard_golden(self):
        feats = np.random.default_rng(5).normal(size=(3, 6))
        golden = {
            True: ([-2.6329577518232865, 0.313908291813365, -0.09739039529309923, -6.556143613558355],
                   -23.213016044391885),
            False: ([0.19715788338999204, 1.3488425976185823, -1.0305863632796708, -2.576408967872033],
                    -4.830441359367455),
        }
        outs = {}
        for literal, (row, total) in golden.items():
            cfg = tiny_config(literal_residual=literal)
            out = encode(feats, [1, 5, 6, 7, 2], randomized_params(cfg, seed=11), cfg).data
            assert np.allclose(out[0, :4], row, atol=1e-9)
            assert out.sum() == pytest.approx(total, abs=1e-9)
            outs[literal] = out
        assert not np.allclose(outs[True], outs[False])


class TestForward:
    @pytest.mark.parametrize("literal", [True, False])
    def test_logit_shape(self, literal):
        cfg = tiny_config(literal_residual=literal)
        params = randomized_params(cfg)
        logits = forward(np.ones((2, 6)), [1, 4, 2], [BOS, 5, 6, 7], params, cfg)
        assert logits.shape == (4, cfg.vocab_size)

    def test_prefix_must_start_with_bos(self):
        cfg = tiny_config()
        with pytest.raises(ConfigError):
            forward(np.ones((2, 6)), None, [5, 6], randomized_params(cfg), cfg)

    def test_feature_dimension_checked(self):
        cfg = tiny_config()
        with pytest.raises(DimensionError):
            forward(np.ones((2, 5)), None, [BOS], randomized_params(cfg), cfg)

    @pytest.mark.parametrize("literal", [True, False])
    def test_causality(self, literal):
        cfg = tiny_config(literal_residual=literal)
        params = randomized_params(cfg, seed=2)
        r = np.random.default_rng(0)
        feats = r.normal(size=(2, 6))
        for _ in range(10):
            prefix = [BOS] + r.integers(3, cfg.vocab_size, size=6).tolist()
            base = forward(feats, [1, 4, 5, 2], prefix, params, cfg).data
            cut = int(r.integers(1, len(prefix)))
            altered = prefix[:cut] + r.integers(3, cfg.vocab_size, size=len(prefix) - cut).tolist()
            other = forward(feats, [1, 4, 5, 2], altered, params, cfg).data
            assert np.array_equal(base[:cut], other[:cut])

    @pytest.mark.parametrize("literal", [True, False])
    @pytest.mark.parametrize("rep", [None, [1, 4, 5, 6, 2]])
    def test_image_row_permutation(self, literal, rep):
        cfg = tiny_config(literal_residual=literal)
        params = randomized_params(cfg, seed=4)
        feats = np.random.default_rng(1).normal(size=(5, 6))
        perm = np.random.default_rng(2).permutation(5)
        a = encode(feats, rep, params, cfg).data
        b = encode(feats[perm], rep, params, cfg).data
        assert np.allclose(a[perm], b, atol=1e-12)

    def test_retrieval_disabled_matches_image_only_model(self):
        cfg = tiny_config()
        plain = tiny_config(use_retrieval=False)
        params = randomized_params(cfg, seed=6)
        subset = {k: params[k] for k in param_names(plain)}
        feats = np.random.default_rng(3).normal(size=(2, 6))
        a = forward(feats, None, [BOS, 4, 5], params, cfg).data
        b = forward(feats, [1, 4, 2], [BOS, 4, 5], subset, plain).data
        assert a.tobytes() == b.tobytes()

    def test_full_model_gradients_two_layers(self):
        cfg = tiny_config(vocab_size=9, n_heads=2, n_layers=2)
        params = randomized_params(cfg, seed=8)
        feats = np.random.default_rng(0).normal(size=(2, 6))
        errors = model_gradient_errors(cfg, params, feats, [1, 4, 5, 6, 2], [1, 7, 8, 4, 2])
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-3, worst


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(vocab_size=5, d_f=2, d_model=6, n_heads=4)

    def test_round_trip(self):
        cfg = tiny_config(literal_residual=False)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({**tiny_config().to_dict(), "bogus": 1})

    def test_param_set_checked(self):
        cfg = tiny_config()
        params = init_params(cfg, np.random.default_rng(0))
        del params["out.b"]
        with pytest.raises(ConfigError):
            check_params(params, cfg)

    def test_init_scheme(self):
        cfg = tiny_config()
        params = init_params(cfg, np.random.default_rng(0))
        assert all(float(params[f"enc.{i}.mix"].data) == 0.0 for i in range(cfg.n_layers))
        assert np.all(params["dec.0.ln1.gain"].data == 1) and np.all(params["out.b"].data == 0)
        limit = np.sqrt(6 / 16)
        assert np.abs(params["enc.0.self.wq"].data).max() <= limit
