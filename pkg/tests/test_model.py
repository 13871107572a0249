import numpy as np
import pytest

from earlyexit import _binio
from earlyexit.model import (KVCache, ModelConfig, build_model, config_digest,
                             desk_config, detokenize_tokens, forward,
                             forward_batch, lm_head_from_hidden,
                             load_model_config, load_model_weights,
                             save_model_config, save_model_weights,
                             tokenize_text)


class TestConfig:
    def test_desk_defaults(self):
        cfg = desk_config()
        assert (cfg.num_layers, cfg.hidden_dim, cfg.num_heads) == (12, 64, 4)
        assert (cfg.ffn_dim, cfg.vocab_size, cfg.max_seq_len) == (256, 256, 512)
        assert cfg.head_dim == 16

    @pytest.mark.parametrize("field,value", [
        ("num_layers", 1),
        ("num_layers", 0),
        ("hidden_dim", 0),
        ("num_heads", 5),  # does not divide hidden_dim=64... 5 doesn't divide 64
        ("vocab_size", 0),
        ("max_seq_len", 0),
        ("seed", -1),
        ("seed", 2**64),
    ])
    def test_rejects_bad_values(self, field, value):
        kwargs = {field: value}
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)

    def test_rejects_odd_head_dim(self):
        # rotary halves require an even per-head width
        with pytest.raises(ValueError):
            ModelConfig(hidden_dim=6, num_heads=2)

    def test_file_round_trip(self, tmp_path):
        cfg = desk_config(seed=99)
        path = tmp_path / "model.cfg"
        save_model_config(cfg, path)
        assert load_model_config(path) == cfg

    def test_load_rejects_unknown_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("num_layers=12\nbogus=1\n")
        with pytest.raises(ValueError, match="bogus"):
            load_model_config(path)

    def test_load_rejects_missing_key(self, tmp_path):
        path = tmp_path / "short.cfg"
        path.write_text("num_layers=12\n")
        with pytest.raises(ValueError):
            load_model_config(path)

    def test_digest_is_stable_and_seed_sensitive(self):
        a = config_digest(desk_config(seed=0))
        b = config_digest(desk_config(seed=0))
        c = config_digest(desk_config(seed=1))
        assert a == b
        assert a != c
        assert 0 <= a < 2**64


class TestBuildModel:
    def test_deterministic_across_builds(self):
        m1 = build_model(desk_config())
        m2 = build_model(desk_config())
        for (name1, t1), (name2, t2) in zip(m1.weight_tensors(), m2.weight_tensors()):
            assert name1 == name2
            assert np.array_equal(t1, t2), name1

    def test_seed_changes_weights(self):
        m1 = build_model(desk_config(seed=0))
        m2 = build_model(desk_config(seed=1))
        assert not np.array_equal(m1.embedding, m2.embedding)

    def test_norm_gains_start_at_one(self, desk_model):
        assert np.all(desk_model.final_norm == 1.0)
        assert np.all(desk_model.layers[0].attn_norm == 1.0)

    def test_init_scale_tracks_depth(self):
        # std = 0.02 / sqrt(L): doubling depth shrinks the spread
        shallow = build_model(ModelConfig(num_layers=2))
        deep = build_model(ModelConfig(num_layers=8))
        assert shallow.embedding.std() > deep.embedding.std()

    def test_all_weights_float32(self, desk_model):
        for name, tensor in desk_model.weight_tensors():
            assert tensor.dtype == np.float32, name


class TestTokenizer:
    def test_round_trip_ascii(self):
        text = "The tide carried the broken gate."
        assert detokenize_tokens(tokenize_text(text)) == text

    def test_one_token_per_byte(self):
        assert len(tokenize_text("abc")) == 3
        assert len(tokenize_text("héllo")) == 6  # two-byte é

    def test_tokens_within_vocab(self):
        tokens = tokenize_text("Ωmega")
        assert tokens.min() >= 0 and tokens.max() < 256

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError):
            tokenize_text("")


class TestForward:
    def test_logit_shape_and_dtype(self, desk_model):
        out = forward(desk_model, tokenize_text("hello world"))
        assert out.logits.shape == (11, 256)
        assert out.logits.dtype == np.float32

    def test_capture_exposes_all_layers(self, desk_model):
        tokens = tokenize_text("abcd")
        out = forward(desk_model, tokens, capture_hidden=True)
        assert len(out.hidden_states) == desk_model.config.num_layers + 1
        # index 0 is the raw embedding lookup
        np.testing.assert_array_equal(out.hidden_states[0],
                                      desk_model.embedding[tokens])

    def test_capture_does_not_change_logits(self, desk_model):
        tokens = tokenize_text("same either way")
        plain = forward(desk_model, tokens)
        captured = forward(desk_model, tokens, capture_hidden=True)
        np.testing.assert_array_equal(plain.logits, captured.logits)

    def test_final_hidden_reproduces_logits(self, desk_model):
        out = forward(desk_model, tokenize_text("check the head"), capture_hidden=True)
        recomputed = lm_head_from_hidden(desk_model, out.hidden_states[-1])
        np.testing.assert_array_equal(out.logits, recomputed)

    def test_causality(self, desk_model):
        a = tokenize_text("the river crossed the")
        b = a.copy()
        b[-1] = (b[-1] + 1) % 256
        la = forward(desk_model, a).logits
        lb = forward(desk_model, b).logits
        np.testing.assert_array_equal(la[:-1], lb[:-1])
        assert not np.array_equal(la[-1], lb[-1])

    def test_rejects_out_of_vocab(self, desk_model):
        with pytest.raises(ValueError, match="vocabulary"):
            forward(desk_model, np.array([0, 300]))

    def test_rejects_empty(self, desk_model):
        with pytest.raises(ValueError):
            forward(desk_model, np.array([], dtype=np.int64))

    def test_rejects_overlong(self, desk_model):
        with pytest.raises(ValueError, match="max_seq_len"):
            forward(desk_model, np.zeros(513, dtype=np.int64))


class TestKVCache:
    def test_incremental_matches_full(self, desk_model):
        tokens = tokenize_text("incremental decoding must agree")
        full = forward(desk_model, tokens).logits

        cache = KVCache.create(desk_model.config)
        step_logits = []
        for t in tokens:
            out = forward(desk_model, np.array([t]), cache)
            step_logits.append(out.logits[0])
        np.testing.assert_allclose(np.stack(step_logits), full, rtol=1e-4, atol=1e-4)

    def test_prefill_then_steps_matches_full(self, desk_model):
        tokens = tokenize_text("prefill then continue stepwise")
        split = 10
        full = forward(desk_model, tokens).logits

        cache = KVCache.create(desk_model.config)
        pre = forward(desk_model, tokens[:split], cache)
        # Identical tokens through the cached path reproduce the cacheless
        # pass bitwise; against the longer full pass only a tolerance holds
        # (different GEMM shapes reduce in different orders).
        np.testing.assert_array_equal(pre.logits,
                                      forward(desk_model, tokens[:split]).logits)
        np.testing.assert_allclose(pre.logits, full[:split], rtol=1e-4, atol=1e-5)
        for i, t in enumerate(tokens[split:]):
            out = forward(desk_model, np.array([t]), cache)
            np.testing.assert_allclose(out.logits[0], full[split + i],
                                       rtol=1e-4, atol=1e-4)

    def test_length_tracks_tokens(self, desk_model):
        cache = KVCache.create(desk_model.config)
        forward(desk_model, tokenize_text("abcdef"), cache)
        assert cache.length == 6
        forward(desk_model, tokenize_text("g"), cache)
        assert cache.length == 7

    def test_capacity_enforced(self, desk_model):
        cache = KVCache.create(desk_model.config)
        forward(desk_model, np.zeros(510, dtype=np.int64), cache)
        with pytest.raises(ValueError, match="max_seq_len"):
            forward(desk_model, np.zeros(3, dtype=np.int64), cache)


class TestForwardBatch:
    def test_rows_match_single_forward(self, desk_model, rng):
        batch = rng.integers(0, 256, size=(3, 20))
        logits, hiddens = forward_batch(desk_model, batch, capture_hidden=True)
        for row in range(3):
            single = forward(desk_model, batch[row], capture_hidden=True)
            np.testing.assert_array_equal(logits[row], single.logits)
            for k in range(len(hiddens)):
                np.testing.assert_array_equal(hiddens[k][row],
                                              single.hidden_states[k])

    def test_rejects_1d(self, desk_model):
        with pytest.raises(ValueError):
            forward_batch(desk_model, np.zeros(4, dtype=np.int64))


class TestWeightSerialization:
    def test_round_trip_bitwise(self, desk_model, tmp_path):
        path = tmp_path / "model.bin"
        save_model_weights(desk_model, path)
        loaded = load_model_weights(path)
        assert loaded.config == desk_model.config
        for (name, a), (_, b) in zip(desk_model.weight_tensors(),
                                     loaded.weight_tensors()):
            assert np.array_equal(a, b), name

    def test_truncation_detected(self, desk_model, tmp_path):
        path = tmp_path / "model.bin"
        save_model_weights(desk_model, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(_binio.TruncatedError):
            load_model_weights(path)

    def test_corruption_detected(self, desk_model, tmp_path):
        path = tmp_path / "model.bin"
        save_model_weights(desk_model, path)
        data = bytearray(path.read_bytes())
        data[100] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(_binio.ChecksumError):
            load_model_weights(path)

    def test_bad_magic_detected(self, desk_model, tmp_path):
        path = tmp_path / "model.bin"
        save_model_weights(desk_model, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(_binio.BadMagicError):
            load_model_weights(path)
