"""Offline classification of layers by compression preference.

A layer whose attention spreads broadly (high residual mass outside each
query's top-k) tolerates aggressive quantization; a layer that
concentrates on few tokens is better served by Top-K retrieval. The
dense preference score measures that residual mass over the most recent
prefill queries, and a threshold ``tau`` splits the two regimes.

Scores here are normalized by the number of probe queries so ``tau`` is
a per-query residual-mass fraction in ``[0, 1)`` and does not depend on
how many recent queries the probe uses.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from hybridkv.errors import ParameterError, ShapeError
from hybridkv.kv_model import attention_weights

if TYPE_CHECKING:  # pragma: no cover
    from hybridkv.trace import Trace


class LayerKind(str, enum.Enum):
    QUANTIZATION_FRIENDLY = "quantization_friendly"
    SPARSITY_FRIENDLY = "sparsity_friendly"


@dataclass(frozen=True)
class SparsityProbe:
    """Probe settings for offline identification.

    Attributes:
        k: top-k size used when measuring retained attention mass.
        n_q: number of most recent prefill queries evaluated.
        tau: classification threshold on the normalized score; a layer is
            quantization-friendly iff its score strictly exceeds ``tau``.
    """

    k: int
    n_q: int = 32
    tau: float = 0.2

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")
        if self.n_q < 1:
            raise ParameterError(f"n_q must be >= 1, got {self.n_q}")
        if not 0.0 <= self.tau <= 1.0:
            raise ParameterError(f"tau must lie in [0, 1], got {self.tau}")


def default_probe_k(seq_len: int) -> int:
    """Default top-k: 5% of the sequence, at least one token."""
    return max(1, int(np.ceil(0.05 * seq_len)))


@dataclass(frozen=True)
class LayerProfile:
    """Per-layer classification result."""

    layer_index: int
    per_head_scores: tuple[float, ...]
    score: float
    label: LayerKind

    def to_dict(self) -> dict:
        # per-head scores are mean residual masses, i.e. mean sparse errors
        # of the probe queries at the probe's k; the summary is what a
        # per-layer sparse-error plot consumes
        return {
            "layer": self.layer_index,
            "per_head_scores": list(self.per_head_scores),
            "score": self.score,
            "label": self.label.value,
            "sparse_error_summary": {
                "mean": self.score,
                "min": min(self.per_head_scores),
                "max": max(self.per_head_scores),
            },
        }


def sparse_error(weights: np.ndarray, k: int) -> float:
    """Attention mass lost by keeping only the k largest weights.

    Args:
        weights: ``[n]`` probability vector.
        k: number of weights retained, ``1 <= k <= n``.

    Returns:
        ``1 - sum(top-k weights)`` in ``[0, 1]``.
    """
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    n = weights.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k must lie in [1, {n}], got {k}")
    if n == k:
        kept = weights.sum()
    else:
        kept = np.partition(weights, n - k)[n - k :].sum()
    return float(1.0 - kept)


def dense_preference_score(recent_queries: np.ndarray, keys: np.ndarray, k: int) -> float:
    """Mean residual attention mass outside each recent query's top-k.

    Row-wise softmax attention of the recent queries against the full key
    cache, minus each row's top-k mass, averaged over the queries. High
    values mean attention is spread out (dense); the result lies in
    ``[0, 1)``.

    Args:
        recent_queries: ``[n_q, head_dim]`` most recent prefill queries.
        keys: ``[n, head_dim]`` prefill keys, ``n >= n_q``.
        k: per-row top-k size.
    """
    recent_queries = np.asarray(recent_queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if recent_queries.ndim != 2 or keys.ndim != 2 or recent_queries.shape[1] != keys.shape[1]:
        raise ShapeError(
            f"query/key shapes incompatible: {recent_queries.shape} vs {keys.shape}"
        )
    total = 0.0
    for row in recent_queries:
        total += sparse_error(attention_weights(row, keys), k)
    return total / recent_queries.shape[0]


def classify_layer(
    layer_index: int, head_scores: Sequence[float], tau: float
) -> LayerProfile:
    """Aggregate per-head scores (mean) and threshold at ``tau``.

    A tie at exactly ``tau`` classifies as sparsity-friendly: the
    quantization label requires a strictly greater score.
    """
    scores = tuple(float(s) for s in head_scores)
    if not scores:
        raise ParameterError("classify_layer needs at least one head score")
    mean = float(np.mean(scores))
    label = (
        LayerKind.QUANTIZATION_FRIENDLY if mean > tau else LayerKind.SPARSITY_FRIENDLY
    )
    return LayerProfile(layer_index=layer_index, per_head_scores=scores, score=mean, label=label)


def calibrate(trace: "Trace", probe: SparsityProbe) -> list[LayerProfile]:
    """Classify every layer of a trace from its prefill.

    For each layer, the score of each query head is the dense preference
    of its most recent ``probe.n_q`` prefill queries against the layer's
    prefill keys (the KV head shared by that query head's group); the
    layer score is the mean over query heads.

    Args:
        trace: a loaded trace with prefill keys and prefill queries.
        probe: probe settings; ``probe.k`` is clamped nowhere — it must
            satisfy ``k <= prefill length``.

    Returns:
        One :class:`LayerProfile` per layer, in layer order.
    """
    config = trace.config
    n = trace.prefill_len
    if n < probe.n_q:
        raise ParameterError(
            f"trace prefill length {n} is shorter than probe n_q {probe.n_q}"
        )
    if probe.k > n:
        raise ParameterError(f"probe k {probe.k} exceeds prefill length {n}")
    profiles = []
    for layer in range(config.num_layers):
        cache = trace.prefill[layer]
        queries = trace.prefill_queries[layer]  # [num_query_heads, n, head_dim]
        head_scores = []
        for qh in range(config.num_query_heads):
            kv = config.kv_head_for(qh)
            recent = queries[qh, n - probe.n_q :, :]
            head_scores.append(dense_preference_score(recent, cache.keys[kv], probe.k))
        profiles.append(classify_layer(layer, head_scores, probe.tau))
    return profiles


def profiles_to_dict(profiles: Sequence[LayerProfile], probe: SparsityProbe) -> dict:
    """JSON-ready profile document consumed by the pipeline and reports."""
    return {
        "probe": {"k": probe.k, "n_q": probe.n_q, "tau": probe.tau},
        "layers": [p.to_dict() for p in profiles],
    }
