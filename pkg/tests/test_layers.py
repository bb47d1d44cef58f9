import io

import numpy as np
import pytest

from splitlab.gradcheck import gradcheck_layer
from splitlab.layers import (
    KINDS,
    FFNParams,
    LayerParams,
    causal_mask,
    clone_params,
    default_d_ff,
    ffn_forward,
    init_attention,
    init_layer,
    layer_forward,
    load_params,
    macaron_decoder_layer_forward,
    macaron_layer_forward,
    multi_head_attention,
    param_count,
    save_params,
    scaled_dot_attention,
    sinusoidal_positions,
    transformer_layer_forward,
    zero_like,
)
from splitlab.tensor import ContractError, DimensionError, Tensor, make_rng


def dense_attention(q, k, v, d_model, mask=None):
    """Loop-based reference: one query row at a time, explicit exp and normalisation."""
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        scores = np.array([sum(q[i, a] * k[j, a] for a in range(q.shape[1])) for j in range(k.shape[0])])
        scores = scores / np.sqrt(d_model)
        if mask is not None:
            scores = np.where(mask[i], scores, -np.inf)
        w = np.exp(scores - scores.max())
        w /= w.sum()
        out[i] = sum(w[j] * v[j] for j in range(k.shape[0]))
    return out


def layer(kind, d=8, heads=2, seed=0, **kw):
    return init_layer(kind, d, heads, make_rng(seed), bias_scale=0.5, **kw)


def run(params, x, memory=None):
    return layer_forward(x, params, encoder_output=memory).data


def memory_for(kind, n, d, seed=99):
    return make_rng(seed).uniform(-1, 1, (n + 1, d)) if kind.endswith("decoder") else None


def zero_sub(sub):
    if isinstance(sub, FFNParams):
        for t in (sub.w1, sub.b1, sub.w2, sub.b2):
            t.data = np.zeros_like(t.data)
    else:
        sub.output.data = np.zeros_like(sub.output.data)


class TestScaledDotAttention:
    def test_single_position(self):
        v = np.array([[0.3, -1.2]])
        out, w = scaled_dot_attention([[1.0, 2.0]], [[0.5, 0.5]], v)
        assert w.weights[0].tolist() == [[1.0]]
        assert np.array_equal(out.data, v)

    def test_identical_keys_give_uniform_weights(self):
        rng = make_rng(1)
        q, v = rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, (4, 3))
        k = np.tile(rng.uniform(-1, 1, (1, 3)), (4, 1))
        out, w = scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(w.weights[0], 0.25, rtol=0, atol=1e-15)
        np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0), (4, 1)), rtol=0, atol=1e-15)

    def test_against_dense_loop(self):
        rng = make_rng(2)
        q, k, v = (rng.uniform(-1, 1, (5, 4)) for _ in range(3))
        out, _ = scaled_dot_attention(q, k, v, d_model=8)
        assert np.max(np.abs(out.data - dense_attention(q, k, v, 8))) < 1e-12

    def test_masked_against_dense_loop(self):
        rng = make_rng(3)
        q, k, v = (rng.uniform(-1, 1, (5, 4)) for _ in range(3))
        m = causal_mask(5)
        out, w = scaled_dot_attention(q, k, v, m)
        assert np.max(np.abs(out.data - dense_attention(q, k, v, 4, m))) < 1e-12
        assert np.all(np.triu(w.weights[0], 1) == 0.0)

    def test_scale_uses_model_width(self):
        q = k = np.array([[1.0, 0.0], [0.0, 1.0]])
        _, w = scaled_dot_attention(q, k, np.eye(2), d_model=16)
        assert w.scores[0][0, 0] == 0.25

    def test_mask_shape_mismatch(self):
        with pytest.raises(DimensionError):
            scaled_dot_attention(np.ones((3, 2)), np.ones((3, 2)), np.ones((3, 2)), np.ones((2, 2), bool))


class TestMultiHead:
    def test_single_head_reduces_to_attention(self):
        rng = make_rng(4)
        p = init_attention(4, 1, rng)
        x = rng.uniform(-1, 1, (3, 4))
        q, k, v = (x @ w.data for w in (p.query[0], p.key[0], p.value[0]))
        expect = dense_attention(q, k, v, 4) @ p.output.data
        assert np.max(np.abs(multi_head_attention(x, p).data - expect)) < 1e-12

    def test_zero_output_projection(self):
        rng = make_rng(5)
        p = init_attention(4, 2, rng)
        p.output.data = np.zeros((4, 4))
        assert np.array_equal(multi_head_attention(rng.uniform(-5, 5, (3, 4)), p).data, np.zeros((3, 4)))

    def test_against_per_head_loop(self):
        rng = make_rng(6)
        p = init_attention(4, 2, rng)
        x = rng.uniform(-1, 1, (3, 4))
        heads = [dense_attention(x @ p.query[h].data, x @ p.key[h].data, x @ p.value[h].data, 4) for h in range(2)]
        expect = np.hstack(heads) @ p.output.data
        assert np.max(np.abs(multi_head_attention(x, p).data - expect)) < 1e-12

    def test_cross_attention_uses_memory_length(self):
        rng = make_rng(7)
        p = init_attention(4, 2, rng)
        out, w = multi_head_attention(rng.uniform(-1, 1, (3, 4)), p, kv=rng.uniform(-1, 1, (6, 4)),
                                      return_weights=True)
        assert out.shape == (3, 4)
        assert all(a.shape == (3, 6) for a in w.weights)

    def test_heads_must_divide_width(self):
        with pytest.raises(DimensionError):
            init_attention(6, 4, make_rng(0))

    def test_weight_rows_sum_to_one(self):
        rng = make_rng(8)
        p = init_attention(8, 2, rng)
        _, w = multi_head_attention(rng.uniform(-3, 3, (5, 8)), p, mask=causal_mask(5), return_weights=True)
        for a in w.weights:
            np.testing.assert_allclose(a.sum(axis=1), 1.0, rtol=0, atol=1e-9)
            assert np.all(np.triu(a, 1) == 0.0)


def scalar_ffn(activation="relu"):
    one = lambda: Tensor([[1.0]])
    zero = lambda: Tensor([[0.0]])
    return FFNParams(one(), zero(), one(), zero(), activation)


class TestFFN:
    def test_relu_gate_blocks_negative(self):
        assert ffn_forward([[-3.0]], scalar_ffn()).data[0, 0] == 0.0

    def test_relu_gate_passes_positive(self):
        assert ffn_forward([[2.0]], scalar_ffn()).data[0, 0] == 2.0

    def test_concatenation_commutes(self):
        p = layer("transformer").ffn
        rng = make_rng(9)
        a, b = rng.uniform(-1, 1, (3, 8)), rng.uniform(-1, 1, (4, 8))
        joint = ffn_forward(np.vstack([a, b]), p).data
        assert np.array_equal(joint, np.vstack([ffn_forward(a, p).data, ffn_forward(b, p).data]))

    def test_perturbing_one_row_changes_only_that_row(self):
        p = layer("transformer").ffn
        x = make_rng(10).uniform(-1, 1, (5, 8))
        y = x.copy()
        y[2] += 0.7
        diff = np.any(ffn_forward(x, p).data != ffn_forward(y, p).data, axis=1)
        assert diff.tolist() == [False, False, True, False, False]

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            ffn_forward(np.ones((2, 3)), scalar_ffn())


class TestLayers:
    @pytest.mark.parametrize("kind", KINDS)
    def test_zero_weights_are_identity(self, kind):
        x = make_rng(11).uniform(-1, 1, (4, 8))
        z = zero_like(layer(kind))
        assert np.array_equal(run(z, x, memory_for(kind, 4, 8)), x)

    def test_transformer_attention_only(self):
        p = layer("transformer")
        zero_sub(p.ffn)
        x = make_rng(12).uniform(-1, 1, (4, 8))
        expect = x + multi_head_attention(x, p.attention).data
        assert np.array_equal(transformer_layer_forward(x, p).data, expect)

    def test_macaron_linear_substitution(self):
        rng = make_rng(13)
        p = layer("macaron", activation="linear")
        zero_sub(p.attention)
        p.ffn_up = p.ffn_down
        x = rng.uniform(-1, 1, (3, 8))
        f = lambda v: ffn_forward(v, p.ffn_down).data
        expect = x + 0.5 * f(x) + 0.5 * f(x + 0.5 * f(x))
        np.testing.assert_allclose(macaron_layer_forward(x, p).data, expect, rtol=0, atol=1e-14)

    def test_macaron_ffns_are_independent(self):
        p = layer("macaron")
        assert not np.array_equal(p.ffn_down.w1.data, p.ffn_up.w1.data)

    def test_half_step_is_not_folded_into_weights(self):
        p = layer("macaron")
        x = make_rng(14).uniform(-1, 1, (4, 8))
        base = macaron_layer_forward(x, p).data
        folded = clone_params(p)
        folded.ffn_down.w2.data *= 2.0
        folded.ffn_down.b2.data *= 2.0
        changed = macaron_layer_forward(x, folded).data
        assert np.max(np.abs(changed - base)) > 1e-3
        # doubling the down FFN turns its half step into a full step
        full = x + ffn_forward(x, p.ffn_down).data
        h = full + multi_head_attention(full, p.attention).data
        np.testing.assert_allclose(changed, h + 0.5 * ffn_forward(h, p.ffn_up).data, rtol=0, atol=1e-14)

    @pytest.mark.parametrize("fwd", [transformer_layer_forward, macaron_layer_forward])
    def test_wrong_kind(self, fwd):
        with pytest.raises(ContractError):
            fwd(np.ones((2, 8)), layer("macaron-decoder"))

    def test_decoder_needs_memory(self):
        with pytest.raises(ContractError):
            macaron_decoder_layer_forward(np.ones((2, 8)), layer("macaron-decoder"), None)

    @pytest.mark.parametrize("kind", ["macaron-decoder", "transformer-decoder"])
    def test_decoder_causality(self, kind):
        p = layer(kind)
        for name in ("ffn", "ffn_down", "ffn_up"):
            if getattr(p, name) is not None:
                zero_sub(getattr(p, name))
        rng = make_rng(15)
        x, mem = rng.uniform(-1, 1, (5, 8)), rng.uniform(-1, 1, (6, 8))
        y = x.copy()
        y[3:] += rng.uniform(-1, 1, (2, 8))
        a, b = run(p, x, mem), run(p, y, mem)
        assert np.array_equal(a[:3], b[:3])
        assert not np.allclose(a[3:], b[3:])

    def test_decoder_without_cross_attention_reduces_to_macaron(self):
        p = layer("macaron-decoder")
        zero_sub(p.cross_attention)
        enc = LayerParams("macaron", p.attention, ffn_down=p.ffn_down, ffn_up=p.ffn_up)
        rng = make_rng(16)
        x = rng.uniform(-1, 1, (5, 8))
        out = macaron_decoder_layer_forward(x, p, rng.uniform(-1, 1, (3, 8))).data
        assert np.array_equal(out, macaron_layer_forward(x, enc, causal_mask(5)).data)

    @pytest.mark.parametrize("kind", ["transformer", "macaron"])
    def test_permutation_equivariance(self, kind):
        p = layer(kind)
        rng = make_rng(17)
        x = rng.uniform(-1, 1, (6, 8))
        perm = rng.permutation(6)
        assert np.array_equal(run(p, x)[perm], run(p, x[perm]))
        assert np.array_equal(multi_head_attention(x, p.attention).data[perm],
                              multi_head_attention(x[perm], p.attention).data)
        batch = rng.uniform(-1, 1, (3, 6, 8))
        assert np.array_equal(run(p, batch)[:, perm], run(p, batch[:, perm]))

    def test_weights_reported_in_input_order(self):
        rng = make_rng(19)
        p = init_attention(4, 2, rng)
        x = rng.uniform(-1, 1, (5, 4))
        _, w = multi_head_attention(x, p, return_weights=True)
        q, k = x @ p.query[1].data, x @ p.key[1].data
        np.testing.assert_allclose(w.scores[1], q @ k.T / 2.0, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("kind", KINDS)
    def test_layer_norm_zero_weights_identity(self, kind):
        x = make_rng(18).uniform(-1, 1, (4, 8))
        z = zero_like(layer(kind, layer_norm=True))
        assert np.array_equal(run(z, x, memory_for(kind, 4, 8)), x)


class TestParamCount:
    def test_published_width(self):
        t = param_count(init_layer("transformer", 512, 8, make_rng(0)))
        m = param_count(init_layer("macaron", 512, 8, make_rng(0)))
        t_ffn = t.by_sublayer["ffn"]
        m_ffn = m.by_sublayer["ffn_down"] + m.by_sublayer["ffn_up"]
        # counting oracle: sum of matrix and vector sizes
        assert t_ffn == 512 * 2048 + 2048 + 2048 * 512 + 512 == 2_099_712
        assert m_ffn == 2 * (512 * 1024 + 1024 + 1024 * 512 + 512) == 2_100_224
        assert m_ffn - t_ffn == 512
        assert m.total - t.total == 512
        assert t.by_sublayer["attention"] == m.by_sublayer["attention"] == 4 * 512 * 512

    @pytest.mark.parametrize("d,heads", [(4, 1), (64, 4), (512, 8)])
    def test_weight_matrices_match(self, d, heads):
        t = param_count(init_layer("transformer", d, heads, make_rng(0)))
        m = param_count(init_layer("macaron", d, heads, make_rng(0)))
        assert t.weights == m.weights
        assert m.total - t.total == d

    def test_default_widths(self):
        assert default_d_ff("transformer", 8) == 32
        assert default_d_ff("macaron", 8) == 16
        assert layer("macaron", d_ff=5).ffn_down.d_ff == 5


class TestPositions:
    def test_position_zero(self):
        assert sinusoidal_positions(1, 6)[0].tolist() == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]

    def test_range_and_distinct_rows(self):
        table = sinusoidal_positions(10_000, 16)
        assert np.all(np.abs(table) <= 1.0)
        assert len(np.unique(table, axis=0)) == 10_000

    def test_odd_width(self):
        with pytest.raises(ContractError):
            sinusoidal_positions(3, 5)


class TestSerialization:
    @pytest.mark.parametrize("kind", KINDS)
    def test_round_trip_is_bit_exact(self, kind):
        p = layer(kind, layer_norm=True)
        buf = io.BytesIO()
        save_params(p, buf)
        buf.seek(0)
        q = load_params(buf)
        assert q.kind == kind
        assert [n for n, _ in q.named_parameters()] == [n for n, _ in p.named_parameters()]
        for (_, a), (_, b) in zip(p.named_parameters(), q.named_parameters()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_rejects_foreign_bytes(self):
        with pytest.raises(ContractError):
            load_params(io.BytesIO(b"NOPE" + bytes(16)))


class TestGradients:
    @pytest.mark.parametrize("layer_norm", [False, True])
    @pytest.mark.parametrize("kind", KINDS)
    def test_all_parameters(self, kind, layer_norm):
        results = gradcheck_layer(kind, d_model=8, n=4, heads=2, seed=3, layer_norm=layer_norm)
        worst = max(results, key=lambda r: r.rel_error)
        assert worst.rel_error < 1e-5, worst

    def test_broken_adjoint_is_detected(self):
        results = gradcheck_layer("transformer", break_grad=True)
        assert max(r.rel_error for r in results) > 1e-2
