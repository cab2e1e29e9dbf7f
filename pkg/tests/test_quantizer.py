"""Tests for group quantization, bit packing, and the quantized GEMV."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hybridkv.errors import EmptyCacheError, EncodingError, ParameterError, ShapeError
from hybridkv.kv_model import LayerKV
from hybridkv.quantizer import (
    GroupAxis,
    GroupQuantizedTensor,
    QuantParams,
    dequantize_group,
    pack_bits,
    packed_size,
    qgemv_output,
    qgemv_scores,
    quant_params,
    quantize_group,
    quantize_layer_kv,
    unpack_bits,
)

f16_grid = st.floats(
    min_value=-8.0, max_value=8.0, allow_nan=False, width=16
)


def scalar_quantize(values, z, s, bits):
    """Scalar reference: round half away from zero, then clamp."""
    out = []
    for x in values:
        t = (x - z) / s
        r = np.floor(abs(t) + 0.5) * (1 if t >= 0 else -1)
        out.append(int(min(max(r, 0), 2**bits - 1)))
    return out


class TestQuantParams:
    def test_simple_grid(self):
        p = quant_params(np.array([0.0, 1.0, 2.0, 3.0]), bits=2)
        assert p.zero_point == 0.0 and p.scale == 1.0

    def test_two_point_range(self):
        p = quant_params(np.array([-1.0, 3.0]), bits=1)
        assert p.zero_point == -1.0 and p.scale == 4.0

    def test_degenerate_group(self):
        p = quant_params(np.array([5.0, 5.0, 5.0]), bits=1)
        assert p.zero_point == 5.0 and p.scale == 1.0

    def test_errors(self):
        with pytest.raises(ParameterError):
            quant_params(np.array([]), bits=1)
        with pytest.raises(ParameterError):
            quant_params(np.array([1.0]), bits=3)
        from hybridkv.errors import NumericError

        with pytest.raises(NumericError):
            quant_params(np.array([np.nan]), bits=1)


class TestQuantizeGroup:
    def test_identity_grid(self):
        p = QuantParams(0.0, 1.0, 2, 4)
        assert quantize_group(np.array([0.0, 1.0, 2.0, 3.0]), p).tolist() == [0, 1, 2, 3]

    def test_two_point(self):
        p = QuantParams(-1.0, 4.0, 1, 2)
        assert quantize_group(np.array([-1.0, 3.0]), p).tolist() == [0, 1]

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(0)
        values = rng.uniform(-4, 4, size=64)
        p = quant_params(values, bits=2)
        expected = scalar_quantize(values, p.zero_point, p.scale, 2)
        assert quantize_group(values, p).tolist() == expected

    def test_dequantize_endpoints_exact(self):
        p = QuantParams(-1.0, 4.0, 1, 2)
        assert dequantize_group(np.array([0, 1]), p).tolist() == [-1.0, 3.0]

    def test_dequantize_all_zero_codes(self):
        p = QuantParams(2.5, 1.0, 1, 3)
        assert dequantize_group(np.zeros(3, dtype=np.uint8), p).tolist() == [2.5] * 3

    def test_dequantize_rejects_out_of_range(self):
        p = QuantParams(0.0, 1.0, 1, 2)
        with pytest.raises(EncodingError):
            dequantize_group(np.array([0, 2]), p)

    @given(
        values=hnp.arrays(np.float16, st.integers(2, 64), elements=f16_grid),
        bits=st.sampled_from([1, 2]),
    )
    @settings(deadline=None, max_examples=200)
    def test_roundtrip_bound(self, values, bits):
        values = values.astype(np.float64)
        p = quant_params(values, bits)
        recon = dequantize_group(quantize_group(values, p), p)
        assert np.all(np.abs(recon - values) <= p.scale / 2 + 1e-6)

    @given(values=hnp.arrays(np.float16, st.integers(1, 32), elements=f16_grid))
    @settings(deadline=None, max_examples=200)
    def test_one_bit_two_point_exactness(self, values):
        # a group holding at most two distinct values reconstructs exactly at 1 bit
        values = values.astype(np.float64)
        distinct = np.unique(values)[:2]
        group = distinct[np.arange(values.size) % distinct.size]
        p = quant_params(group, 1)
        recon = dequantize_group(quantize_group(group, p), p)
        assert np.array_equal(recon, group)


class TestBitPacking:
    def test_one_bit_layout(self):
        packed = pack_bits(np.array([1, 0, 1, 1, 0, 0, 0, 1]), bits=1)
        assert packed.tolist() == [0b10001101]

    def test_two_bit_layout(self):
        packed = pack_bits(np.array([3, 0, 1, 2]), bits=2)
        assert packed.tolist() == [0b10010011]

    def test_roundtrip_10k(self):
        rng = np.random.default_rng(1)
        for bits in (1, 2):
            codes = rng.integers(0, 2**bits, size=10_000).astype(np.uint8)
            packed = pack_bits(codes, bits)
            assert packed.size == packed_size(10_000, bits)
            assert np.array_equal(unpack_bits(packed, bits, 10_000), codes)

    @given(
        codes=hnp.arrays(np.uint8, st.integers(0, 257), elements=st.integers(0, 1)),
        bits=st.sampled_from([1, 2]),
    )
    @settings(deadline=None)
    def test_roundtrip_property(self, codes, bits):
        packed = pack_bits(codes, bits)
        assert packed.size == packed_size(codes.size, bits)
        assert np.array_equal(unpack_bits(packed, bits, codes.size), codes)

    def test_length_mismatch(self):
        with pytest.raises(EncodingError):
            unpack_bits(np.zeros(2, dtype=np.uint8), 1, 20)

    def test_code_out_of_range(self):
        with pytest.raises(EncodingError):
            pack_bits(np.array([2]), bits=1)


class TestQuantizeLayerKV:
    def test_group_counts_exact_fit(self):
        rng = np.random.default_rng(2)
        d_h = 16
        cache = LayerKV.from_arrays(
            rng.normal(size=(1, 64, d_h)), rng.normal(size=(1, 64, d_h))
        )
        q = quantize_layer_kv(cache, bits=1, group_size=64)
        assert q.keys[0].num_groups == d_h
        assert q.values[0].num_groups == 64 * ((d_h + 63) // 64)
        assert q.keys[0].residual.shape[0] == 0

    def test_residual_token(self):
        rng = np.random.default_rng(3)
        cache = LayerKV.from_arrays(
            rng.normal(size=(1, 65, 8)), rng.normal(size=(1, 65, 8))
        )
        q = quantize_layer_kv(cache, bits=1, group_size=64)
        assert q.keys[0].residual.shape[0] == 1
        assert q.values[0].residual.shape[0] == 0

    def test_roundtrip_bound_128x128(self):
        rng = np.random.default_rng(4)
        keys = rng.normal(size=(1, 128, 128)).astype(np.float16).astype(np.float64)
        values = rng.normal(size=(1, 128, 128)).astype(np.float16).astype(np.float64)
        cache = LayerKV.from_arrays(keys, values)
        q = quantize_layer_kv(cache, bits=2, group_size=64)
        kt = q.keys[0]
        recon = kt.dequantize()
        err = np.abs(recon - keys[0])
        blocks = kt.num_complete_rows // kt.group_size
        grid = err[: blocks * kt.group_size].reshape(blocks, kt.group_size, -1)
        assert np.all(grid <= kt._scales[:, None, :] / 2 + 1e-6)
        vt = q.values[0]
        verr = np.abs(vt.dequantize() - values[0])
        for b in range(vt._scales.shape[1]):
            sl = slice(b * 64, min((b + 1) * 64, 128))
            assert np.all(verr[:, sl] <= vt._scales[:, b : b + 1] / 2 + 1e-6)

    def test_empty_cache_rejected(self):
        with pytest.raises(EmptyCacheError):
            quantize_layer_kv(LayerKV(num_heads=1, head_dim=4), bits=1, group_size=4)

    def test_key_group_order_is_block_then_channel(self):
        # token block 0's channel groups come first in the packed stream
        matrix = np.arange(8.0).reshape(4, 2)  # n=4, d_h=2, g=2 -> 4 groups
        t = GroupQuantizedTensor.from_matrix(matrix, GroupAxis.PER_CHANNEL, 1, 2)
        stream = unpack_bits(t.packed_codes(), 1, 8)
        # groups: (block0,ch0) tokens 0,1 -> [0,1]; (block0,ch1) -> [0,1]; then block1
        assert stream.tolist() == [0, 1, 0, 1, 0, 1, 0, 1]

    def test_incremental_append_matches_batch(self):
        rng = np.random.default_rng(5)
        keys = rng.normal(size=(1, 70, 8)).astype(np.float16).astype(np.float64)
        values = rng.normal(size=(1, 70, 8)).astype(np.float16).astype(np.float64)
        prefix = LayerKV.from_arrays(keys[:, :69, :], values[:, :69, :])
        q = quantize_layer_kv(prefix, bits=1, group_size=16)
        q.append_token(keys[:, 69, :], values[:, 69, :])
        full = quantize_layer_kv(
            LayerKV.from_arrays(keys, values), bits=1, group_size=16
        )
        query = rng.normal(size=8)
        assert np.array_equal(
            qgemv_scores(query, q.keys[0]), qgemv_scores(query, full.keys[0])
        )
        weights = rng.uniform(0, 1, size=70)
        weights /= weights.sum()
        assert np.array_equal(
            qgemv_output(weights, q.values[0]), qgemv_output(weights, full.values[0])
        )


class TestQgemv:
    def test_zero_codes_zero_zero_point(self):
        t = GroupQuantizedTensor.from_matrix(
            np.zeros((8, 4)), GroupAxis.PER_CHANNEL, 1, 4
        )
        logits = qgemv_scores(np.ones(4), t)
        assert np.array_equal(logits, np.zeros(8))

    def test_scalar_case(self):
        # d_h = 1, one group: logit = q * (code*s + z)
        t = GroupQuantizedTensor.from_matrix(
            np.array([[-1.0], [3.0]]), GroupAxis.PER_CHANNEL, 1, 2
        )
        logits = qgemv_scores(np.array([2.0]), t)
        assert np.allclose(logits, [2.0 * -1.0, 2.0 * 3.0])

    def test_scores_match_dequant_oracle(self):
        rng = np.random.default_rng(6)
        keys = rng.normal(size=(32, 16))
        t = GroupQuantizedTensor.from_matrix(keys, GroupAxis.PER_CHANNEL, 1, 8)
        q = rng.normal(size=16)
        expected = t.dequantize() @ q
        got = qgemv_scores(q, t)
        assert np.allclose(got, expected, rtol=1e-3, atol=1e-9)

    def test_output_one_hot_weights(self):
        rng = np.random.default_rng(7)
        values = rng.normal(size=(6, 8))
        t = GroupQuantizedTensor.from_matrix(values, GroupAxis.PER_TOKEN, 2, 4)
        w = np.zeros(6)
        w[3] = 1.0
        assert np.allclose(qgemv_output(w, t), t.dequantize()[3], atol=1e-12)

    def test_output_uniform_weights_identical_tokens(self):
        row = np.arange(8.0)
        values = np.tile(row, (5, 1))
        t = GroupQuantizedTensor.from_matrix(values, GroupAxis.PER_TOKEN, 1, 4)
        out = qgemv_output(np.full(5, 0.2), t)
        assert np.allclose(out, t.dequantize()[0], atol=1e-12)

    def test_output_matches_dequant_oracle(self):
        rng = np.random.default_rng(8)
        values = rng.normal(size=(24, 12))
        t = GroupQuantizedTensor.from_matrix(values, GroupAxis.PER_TOKEN, 2, 8)
        w = rng.uniform(0, 1, size=24)
        w /= w.sum()
        expected = w @ t.dequantize()
        assert np.allclose(qgemv_output(w, t), expected, rtol=1e-3, atol=1e-9)

    def test_axis_mismatch(self):
        t = GroupQuantizedTensor.from_matrix(np.ones((4, 4)), GroupAxis.PER_TOKEN, 1, 4)
        with pytest.raises(ShapeError):
            qgemv_scores(np.ones(4), t)
        t2 = GroupQuantizedTensor.from_matrix(np.ones((4, 4)), GroupAxis.PER_CHANNEL, 1, 4)
        with pytest.raises(ShapeError):
            qgemv_output(np.ones(4), t2)

    @given(
        n=st.integers(2, 40),
        d_h=st.integers(1, 24),
        g=st.integers(1, 48),
        bits=st.sampled_from([1, 2]),
        seed=st.integers(0, 10_000),
    )
    @settings(deadline=None, max_examples=120)
    def test_equivalence_property(self, n, d_h, g, bits, seed):
        rng = np.random.default_rng(seed)
        keys = rng.normal(size=(n, d_h))
        values = rng.normal(size=(n, d_h))
        q = rng.normal(size=d_h)
        w = rng.uniform(0, 1, size=n)
        w /= w.sum()
        kt = GroupQuantizedTensor.from_matrix(keys, GroupAxis.PER_CHANNEL, bits, g)
        vt = GroupQuantizedTensor.from_matrix(values, GroupAxis.PER_TOKEN, bits, g)
        assert np.allclose(qgemv_scores(q, kt), kt.dequantize() @ q, rtol=1e-3, atol=1e-9)
        assert np.allclose(qgemv_output(w, vt), w @ vt.dequantize(), rtol=1e-3, atol=1e-9)


class TestSerialization:
    @pytest.mark.parametrize("axis", [GroupAxis.PER_CHANNEL, GroupAxis.PER_TOKEN])
    @pytest.mark.parametrize("bits", [1, 2])
    def test_roundtrip(self, axis, bits):
        rng = np.random.default_rng(9)
        matrix = rng.normal(size=(21, 10)).astype(np.float16).astype(np.float64)
        t = GroupQuantizedTensor.from_matrix(matrix, axis, bits, 4)
        back = GroupQuantizedTensor.from_bytes(t.to_bytes())
        assert back.logical_shape == t.logical_shape
        assert np.array_equal(back._codes, t._codes)
        assert np.array_equal(back.residual, t.residual)
        # zero/scale persist at 16-bit storage precision; runtime params are wider
        assert np.array_equal(back._scales, t._scales.astype(np.float16).astype(np.float64))
        assert np.array_equal(
            back._zero_points, t._zero_points.astype(np.float16).astype(np.float64)
        )
        assert np.allclose(back.dequantize(), t.dequantize(), rtol=2e-3, atol=1e-2)

    def test_truncated_blob_rejected(self):
        t = GroupQuantizedTensor.from_matrix(np.ones((4, 4)), GroupAxis.PER_TOKEN, 1, 4)
        blob = t.to_bytes()
        with pytest.raises(EncodingError):
            GroupQuantizedTensor.from_bytes(blob[: len(blob) // 2])

    def test_group_params_accessor(self):
        t = GroupQuantizedTensor.from_matrix(
            np.arange(12.0).reshape(4, 3), GroupAxis.PER_TOKEN, 2, 2
        )
        p = t.group_params(1)  # token 0, channel block 1 (ragged, size 1)
        assert p.group_size == 1
        with pytest.raises(ParameterError):
            t.group_params(t.num_groups)
