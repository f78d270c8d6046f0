import math

import numpy as np
import pytest

from mnemo import tensor as T
from mnemo.config import ModelConfig
from mnemo.model import (
    LayerMemoryView,
    MODE_GENERATE,
    MODE_UPDATE,
    MPlusModel,
    _rope_tables,
)
from mnemo.rng import Rng


def stm_views(model, stm_matrices):
    return [LayerMemoryView(None, m) for m in stm_matrices]


def random_stms(cfg, seed):
    rng = Rng(seed)
    return [rng.normal((cfg.N, cfg.d), 0.3) for _ in range(cfg.L)]


class TestForwardGenerate:
    def test_empty_ltm_equals_stm_only(self, tiny_model, tiny_config):
        stms = random_stms(tiny_config, 3)
        toks = Rng(4).integers(0, tiny_config.vocab, size=6)
        with_empty = [LayerMemoryView(np.zeros((0, tiny_config.d)), m) for m in stms]
        out_a = tiny_model.forward_generate(toks, with_empty)
        out_b = tiny_model.forward_generate(toks, stm_views(tiny_model, stms))
        assert np.array_equal(out_a.data, out_b.data)

    def test_window_length_contract(self, tiny_model, tiny_config):
        toks = np.zeros(tiny_config.W_gen + 1, dtype=np.int64)
        with pytest.raises(ValueError, match="window length"):
            tiny_model.forward_generate(toks, stm_views(tiny_model, random_stms(tiny_config, 5)))
        with pytest.raises(ValueError, match="window length"):
            tiny_model.forward_generate(np.zeros(0, dtype=np.int64), None)

    def test_attention_rows_sum_to_one(self, tiny_model, tiny_config):
        collect = {}
        toks = Rng(6).integers(0, tiny_config.vocab, size=5)
        views = [
            LayerMemoryView(Rng(7).normal((3, tiny_config.d)), m)
            for m in random_stms(tiny_config, 8)
        ]
        tiny_model.forward_generate(toks, views, collect=collect)
        for weights in collect["attention"]:
            assert np.abs(weights.sum(axis=-1) - 1.0).max() < 1e-12

    def test_causality(self, tiny_model, tiny_config):
        stms = random_stms(tiny_config, 9)
        toks = Rng(10).integers(0, tiny_config.vocab, size=8)
        out_a = tiny_model.forward_generate(toks, stm_views(tiny_model, stms))
        toks2 = toks.copy()
        toks2[-1] = (toks2[-1] + 1) % tiny_config.vocab
        out_b = tiny_model.forward_generate(toks2, stm_views(tiny_model, stms))
        assert np.array_equal(out_a.data[:-1], out_b.data[:-1])
        assert not np.array_equal(out_a.data[-1], out_b.data[-1])

    def test_memory_tokens_are_position_free(self, tiny_model, tiny_config):
        # permuting view rows must not change the output beyond fp summation order
        stms = random_stms(tiny_config, 11)
        toks = Rng(12).integers(0, tiny_config.vocab, size=4)
        out_a = tiny_model.forward_generate(toks, stm_views(tiny_model, stms))
        perm = Rng(13).permutation(tiny_config.N)
        out_b = tiny_model.forward_generate(
            toks, stm_views(tiny_model, [m[perm] for m in stms])
        )
        assert np.allclose(out_a.data, out_b.data, atol=1e-10)

    def test_single_token_zero_memory_matches_reference(self):
        # independent hand-built forward pass for L=1, one token, one zero
        # memory vector; zero memory contributes zero keys/values, so it only
        # adds a constant exp(0) term to the softmax denominator
        cfg = ModelConfig(L=1, d=8, n_heads=2, vocab=16, W_gen=4, N=2, K=1, K0=0, M=2, lora_rank=2)
        model = MPlusModel(cfg, Rng(21))
        tok = np.array([5])
        view = [LayerMemoryView(None, np.zeros((2, cfg.d)))]
        got = model.forward_generate(tok, view).data[0]

        p = {k: v.data for k, v in model.params.items()}

        def rms(x, g):
            return x / np.sqrt((x * x).mean() + 1e-6) * g

        x = p["embed"][5]
        h = rms(x, p["layers.0.ln1"])
        q = h @ p["layers.0.wq"]  # generate adapters are zero-init
        k_self = h @ p["layers.0.wk"]
        v_self = h @ p["layers.0.wv"]
        dh = cfg.d // cfg.n_heads
        out_heads = []
        for hd in range(cfg.n_heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            # query position 0 -> rotary is identity (cos=1, sin=0)
            s_self = q[sl] @ k_self[sl] / math.sqrt(dh)
            w_self = math.exp(s_self) / (math.exp(s_self) + 2 * math.exp(0.0))
            out_heads.append(w_self * v_self[sl])  # zero-memory values add nothing
        attn = np.concatenate(out_heads) @ p["layers.0.wo"]
        x = x + attn
        u = rms(x, p["layers.0.ln2"]) @ p["layers.0.w1"]
        x = x + (u / (1.0 + np.exp(-u))) @ p["layers.0.w2"]
        want = rms(x, p["norm_f"]) @ p["head"]
        assert np.allclose(got, want, atol=1e-12)

    def test_rope_position_zero_is_identity(self):
        cos, sin = _rope_tables(np.zeros(3), 8)
        assert np.array_equal(cos, np.ones((3, 8)))
        assert np.array_equal(sin, np.zeros((3, 8)))


class TestLayerUpdatePass:
    def test_deterministic(self, tiny_model, tiny_config):
        tiny_model.set_adapter_mode(MODE_UPDATE)
        last_k = T.Tensor(Rng(30).normal((tiny_config.K, tiny_config.d)))
        chunk = T.Tensor(Rng(31).normal((6, tiny_config.d)))
        a1, c1 = tiny_model.layer_update_pass(0, last_k, chunk)
        a2, c2 = tiny_model.layer_update_pass(0, last_k, chunk)
        assert np.array_equal(a1.data, a2.data)
        assert np.array_equal(c1.data, c2.data)

    @pytest.mark.parametrize("chunk_len", [1, 3, 16])
    def test_output_shape(self, tiny_model, tiny_config, chunk_len):
        tiny_model.set_adapter_mode(MODE_UPDATE)
        last_k = T.Tensor(Rng(32).normal((tiny_config.K, tiny_config.d)))
        chunk = T.Tensor(Rng(33).normal((chunk_len, tiny_config.d)))
        new_k, chunk_out = tiny_model.layer_update_pass(1, last_k, chunk)
        assert new_k.shape == (tiny_config.K, tiny_config.d)
        assert chunk_out.shape == (chunk_len, tiny_config.d)

    def test_empty_chunk_rejected(self, tiny_model, tiny_config):
        last_k = T.Tensor(np.zeros((tiny_config.K, tiny_config.d)))
        with pytest.raises(ValueError, match="non-empty"):
            tiny_model.layer_update_pass(0, last_k, T.Tensor(np.zeros((0, tiny_config.d))))

    def test_new_tokens_see_the_chunk(self, tiny_model, tiny_config):
        # the compressed carrier must change when the chunk changes
        tiny_model.set_adapter_mode(MODE_UPDATE)
        last_k = T.Tensor(Rng(34).normal((tiny_config.K, tiny_config.d)))
        a, _ = tiny_model.layer_update_pass(0, last_k, T.Tensor(Rng(35).normal((5, tiny_config.d))))
        b, _ = tiny_model.layer_update_pass(0, last_k, T.Tensor(Rng(36).normal((5, tiny_config.d))))
        assert not np.allclose(a.data, b.data)

    def test_zero_adapter_mode_equivalence(self, tiny_model, tiny_config):
        # adapters are zero-product at init, so both modes agree exactly
        last_k = T.Tensor(Rng(37).normal((tiny_config.K, tiny_config.d)))
        chunk = T.Tensor(Rng(38).normal((4, tiny_config.d)))
        tiny_model.set_adapter_mode(MODE_UPDATE)
        a, ca = tiny_model.layer_update_pass(0, last_k, chunk)
        tiny_model.set_adapter_mode(MODE_GENERATE)
        b, cb = tiny_model.layer_update_pass(0, last_k, chunk)
        assert np.array_equal(a.data, b.data)
        assert np.array_equal(ca.data, cb.data)


class TestAdapterMode:
    def test_toggle_restores_behavior(self, tiny_model, tiny_config):
        stms = random_stms(tiny_config, 40)
        toks = Rng(41).integers(0, tiny_config.vocab, size=5)
        before = tiny_model.forward_generate(toks, stm_views(tiny_model, stms)).data
        tiny_model.set_adapter_mode(MODE_UPDATE)
        tiny_model.set_adapter_mode(MODE_GENERATE)
        after = tiny_model.forward_generate(toks, stm_views(tiny_model, stms)).data
        assert np.array_equal(before, after)

    def test_unknown_mode_rejected(self, tiny_model):
        with pytest.raises(ValueError, match="unknown adapter mode"):
            tiny_model.set_adapter_mode("compress")

    def test_update_adapter_changes_leave_generate_untouched(self, tiny_config):
        model = MPlusModel(tiny_config, Rng(50))
        stms = random_stms(tiny_config, 51)
        toks = Rng(52).integers(0, tiny_config.vocab, size=6)
        before = model.forward_generate(toks, stm_views(model, stms)).data
        rng = Rng(53)
        for name, p in model.params.items():
            if ".lora.update." in name:
                p.data = p.data + rng.normal(p.data.shape, 0.5)
        after = model.forward_generate(toks, stm_views(model, stms)).data
        assert np.array_equal(before, after)
        model.set_adapter_mode(MODE_UPDATE)
        last_k = T.Tensor(Rng(54).normal((tiny_config.K, tiny_config.d)))
        chunk = T.Tensor(Rng(55).normal((4, tiny_config.d)))
        changed, _ = model.layer_update_pass(0, last_k, chunk)
        model.set_adapter_mode(MODE_GENERATE)
        base, _ = model.layer_update_pass(0, last_k, chunk)
        assert not np.array_equal(changed.data, base.data)


class TestCheckpointing:
    def test_round_trip_through_state_arrays(self, tiny_config):
        a = MPlusModel(tiny_config, Rng(60))
        b = MPlusModel(tiny_config, Rng(61))
        b.load_state_arrays(a.state_arrays())
        stms = random_stms(tiny_config, 62)
        toks = Rng(63).integers(0, tiny_config.vocab, size=4)
        out_a = a.forward_generate(toks, stm_views(a, stms)).data
        out_b = b.forward_generate(toks, stm_views(b, stms)).data
        assert np.array_equal(out_a, out_b)

    def test_missing_tensor_rejected(self, tiny_config):
        a = MPlusModel(tiny_config, Rng(60))
        state = a.state_arrays()
        state.pop("head")
        with pytest.raises(ValueError, match="missing"):
            a.load_state_arrays(state)

    def test_retriever_params_reserved_prefix(self, tiny_model):
        names = tiny_model.parameter_names("retriever.")
        assert names  # projectors live in the model checkpoint
        assert all(n.startswith("retriever.") for n in names)
