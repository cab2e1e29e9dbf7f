"""Tests for the sparse error, dense preference score, and calibration."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridkv.errors import ParameterError
from hybridkv.identifier import (
    LayerKind,
    SparsityProbe,
    calibrate,
    classify_layer,
    default_probe_k,
    dense_preference_score,
    profiles_to_dict,
    sparse_error,
)
from hybridkv.kv_model import attention_weights
from hybridkv.trace import AttentionMode, SyntheticSpec, gen_trace


def naive_residual_mass(queries, keys, k):
    """Sort-and-sum oracle for the normalized dense preference score."""
    total = 0.0
    for q in queries:
        w = sorted(attention_weights(q, keys), reverse=True)
        total += 1.0 - sum(w[:k])
    return total / len(queries)


class TestSparseError:
    def test_definition(self):
        assert sparse_error(np.array([0.5, 0.3, 0.2]), k=1) == pytest.approx(0.5)

    def test_full_retention(self):
        w = np.full(7, 1 / 7)
        assert sparse_error(w, k=7) == pytest.approx(0.0, abs=1e-6)

    def test_uniform(self):
        w = np.full(20, 0.05)
        assert sparse_error(w, k=5) == pytest.approx(0.75, abs=1e-9)

    def test_k_out_of_range(self):
        with pytest.raises(ParameterError):
            sparse_error(np.array([1.0]), k=2)
        with pytest.raises(ParameterError):
            sparse_error(np.array([1.0]), k=0)

    @given(seed=st.integers(0, 10_000), n=st.integers(2, 30))
    @settings(deadline=None)
    def test_non_increasing_in_k(self, seed, n):
        rng = np.random.default_rng(seed)
        w = rng.uniform(0, 1, size=n)
        w /= w.sum()
        errors = [sparse_error(w, k) for k in range(1, n + 1)]
        assert all(a >= b - 1e-12 for a, b in zip(errors, errors[1:]))
        assert errors[-1] == pytest.approx(0.0, abs=1e-9)


class TestDensePreferenceScore:
    def test_identical_keys(self):
        rng = np.random.default_rng(0)
        keys = np.tile(rng.normal(size=8), (100, 1))
        queries = rng.normal(size=(3, 8))
        score = dense_preference_score(queries, keys, k=20)
        assert score == pytest.approx(0.8, abs=1e-9)

    def test_one_dominant_key(self):
        rng = np.random.default_rng(1)
        q = np.ones(4)
        keys = rng.normal(size=(50, 4)) * 0.01
        keys[17] = q * 1000.0 * 2.0 / (q @ q)  # +1000 logit after scaling
        score = dense_preference_score(np.tile(q, (2, 1)), keys, k=1)
        assert score <= 1e-6

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(2)
        queries = rng.normal(size=(4, 8))
        keys = rng.normal(size=(64, 8))
        got = dense_preference_score(queries, keys, k=8)
        assert got == pytest.approx(naive_residual_mass(queries, keys, 8), abs=1e-6)

    @given(seed=st.integers(0, 5000), n_q=st.integers(1, 6))
    @settings(deadline=None, max_examples=60)
    def test_uniform_attention_closed_form(self, seed, n_q):
        rng = np.random.default_rng(seed)
        n, k = 40, 7
        keys = np.tile(rng.normal(size=5), (n, 1))
        queries = rng.normal(size=(n_q, 5))
        assert dense_preference_score(queries, keys, k) == pytest.approx(
            1 - k / n, abs=1e-6
        )

    @given(shift=st.floats(-30, 30), seed=st.integers(0, 5000))
    @settings(deadline=None, max_examples=60)
    def test_logit_shift_invariance(self, shift, seed):
        rng = np.random.default_rng(seed)
        q = rng.normal(size=6)
        keys = rng.normal(size=(32, 6))
        base = dense_preference_score(q[None, :], keys, k=5)
        shifted = keys + shift * q * np.sqrt(6) / (q @ q)
        assert dense_preference_score(q[None, :], shifted, k=5) == pytest.approx(
            base, abs=1e-6
        )


class TestClassifyLayer:
    def test_mean_then_threshold(self):
        profile = classify_layer(0, [0.25, 0.35], tau=0.2)
        assert profile.score == pytest.approx(0.3)
        assert profile.label is LayerKind.QUANTIZATION_FRIENDLY

    def test_all_zero_scores(self):
        assert classify_layer(1, [0.0, 0.0], tau=0.2).label is LayerKind.SPARSITY_FRIENDLY

    def test_tie_is_sparsity_friendly(self):
        assert classify_layer(2, [0.2, 0.2], tau=0.2).label is LayerKind.SPARSITY_FRIENDLY

    def test_empty_scores_rejected(self):
        with pytest.raises(ParameterError):
            classify_layer(0, [], tau=0.2)

    @given(
        scores=st.lists(st.floats(0.001, 0.999), min_size=1, max_size=8),
        c=st.floats(0.1, 5.0),
    )
    @settings(deadline=None)
    def test_scaling_moves_label_only_across_tau(self, scores, c):
        tau = 0.3
        base = classify_layer(0, scores, tau)
        scaled = classify_layer(0, [min(s * c, 1.0) for s in scores], tau)
        crossed = (base.score > tau) != (scaled.score > tau)
        assert (base.label != scaled.label) == crossed


@pytest.fixture(scope="module")
def four_layer_trace():
    spec = SyntheticSpec(
        modes=(
            AttentionMode("dense"),
            AttentionMode("sparse", 4, 0.99),
            AttentionMode("sparse", 4, 0.99),
            AttentionMode("sparse", 2, 0.98),
        ),
        num_query_heads=4,
        num_kv_heads=2,
        head_dim=32,
        prefill_len=256,
        num_steps=2,
        seed=11,
    )
    return gen_trace(spec)


class TestCalibrate:
    def test_constructed_trace_labels(self, four_layer_trace):
        probe = SparsityProbe(k=default_probe_k(256), n_q=32, tau=0.2)
        profiles = calibrate(four_layer_trace, probe)
        labels = [p.label for p in profiles]
        assert labels == [
            LayerKind.QUANTIZATION_FRIENDLY,
            LayerKind.SPARSITY_FRIENDLY,
            LayerKind.SPARSITY_FRIENDLY,
            LayerKind.SPARSITY_FRIENDLY,
        ]
        assert profiles[0].score > 0.9
        assert all(p.score < 0.05 for p in profiles[1:])

    def test_tau_one_all_sparse(self, four_layer_trace):
        probe = SparsityProbe(k=13, n_q=8, tau=1.0)
        assert all(
            p.label is LayerKind.SPARSITY_FRIENDLY
            for p in calibrate(four_layer_trace, probe)
        )

    def test_tau_zero_all_quantization(self, four_layer_trace):
        # every layer keeps nonzero residual mass, so any positive score wins
        probe = SparsityProbe(k=1, n_q=8, tau=0.0)
        assert all(
            p.label is LayerKind.QUANTIZATION_FRIENDLY
            for p in calibrate(four_layer_trace, probe)
        )

    def test_trace_too_short(self, four_layer_trace):
        with pytest.raises(ParameterError):
            calibrate(four_layer_trace, SparsityProbe(k=4, n_q=10_000, tau=0.2))
        with pytest.raises(ParameterError):
            calibrate(four_layer_trace, SparsityProbe(k=10_000, n_q=4, tau=0.2))

    def test_deterministic(self, four_layer_trace):
        probe = SparsityProbe(k=13, n_q=16, tau=0.2)
        a = profiles_to_dict(calibrate(four_layer_trace, probe), probe)
        b = profiles_to_dict(calibrate(four_layer_trace, probe), probe)
        assert a == b

    def test_probe_validation(self):
        with pytest.raises(ParameterError):
            SparsityProbe(k=0, n_q=1, tau=0.2)
        with pytest.raises(ParameterError):
            SparsityProbe(k=1, n_q=0, tau=0.2)
        with pytest.raises(ParameterError):
            SparsityProbe(k=1, n_q=1, tau=1.5)
