"""Two-stage dynamic Top-K token retrieval for sparsity-friendly layers.

Stage 1 runs a step ahead of the layer: the layer's query is estimated
from the previous layer's hidden state, channel importance is scored as
``|q_hat_i| * max_j |K[j, i]|``, and the winning channels' key columns
are prefetched from the host. Stage 2 uses the true query restricted to
those channels to rank tokens, keeps the recent-token budget plus the
Top-K of the remainder, fetches the winners' full rows, and runs exact
softmax attention over just that subset.

Scoring omits softmax and the ``sqrt(d)`` factor: both are monotone per
head, so the Top-K ranking is unchanged and the comparison stays cheap.

Under grouped-query attention both the channel scores and the token
ranking are per KV head, with each group's query-head contributions
summed, so one fetched set serves the whole group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hybridkv.errors import EmptyCacheError, ParameterError, ShapeError
from hybridkv.kv_model import attention_weights

__all__ = [
    "RetrievalConfig",
    "CriticalChannelSet",
    "QueryEstimate",
    "estimate_query",
    "channel_scores",
    "channel_scores_from_max",
    "group_channel_scores",
    "select_critical_channels",
    "approx_scores",
    "select_topk_tokens",
    "sparse_attention",
    "top_weight_tokens",
    "recall_at_k",
]


@dataclass(frozen=True)
class RetrievalConfig:
    """Token and channel budgets for one sparsity-friendly layer.

    Attributes:
        n_local: most recent tokens always resident on the device.
        n_topk: tokens fetched on demand per decode step.
        d_s: critical channels used for approximate scoring.
    """

    n_local: int = 64
    n_topk: int = 128
    d_s: int = 8

    def __post_init__(self) -> None:
        if self.n_local < 0:
            raise ParameterError(f"n_local must be >= 0, got {self.n_local}")
        if self.n_topk < 1:
            raise ParameterError(f"n_topk must be >= 1, got {self.n_topk}")
        if self.d_s < 1:
            raise ParameterError(f"d_s must be >= 1, got {self.d_s}")


@dataclass(frozen=True)
class CriticalChannelSet:
    """Channel scores plus the selected top-``d_s`` channel indices."""

    channel_scores: np.ndarray  # [head_dim]
    selected: np.ndarray        # sorted ascending, size d_s


@dataclass(frozen=True)
class QueryEstimate:
    """Next layer's query approximated from the previous hidden state."""

    q_hat: np.ndarray  # [num_query_heads, head_dim]
    source_layer: int


def estimate_query(w_q: np.ndarray, hidden_state: np.ndarray, source_layer: int) -> QueryEstimate:
    """Project a hidden state through a layer's query weights.

    Adjacent layers' hidden states are nearly parallel (residual stream),
    so ``hidden_state`` taken from layer ``l-1`` yields a usable estimate
    of layer ``l``'s query; feeding layer ``l``'s own input reproduces the
    true query bit for bit.

    Args:
        w_q: ``[num_query_heads, hidden_dim, head_dim]`` query projection.
        hidden_state: ``[hidden_dim]`` residual-stream vector.
        source_layer: layer the hidden state came from (bookkeeping only).

    Returns:
        :class:`QueryEstimate` with ``q_hat`` of shape
        ``[num_query_heads, head_dim]``.
    """
    w_q = np.asarray(w_q, dtype=np.float64)
    hidden_state = np.asarray(hidden_state, dtype=np.float64).reshape(-1)
    if w_q.ndim != 3 or w_q.shape[1] != hidden_state.shape[0]:
        raise ShapeError(
            f"w_q shape {w_q.shape} incompatible with hidden dim {hidden_state.shape[0]}"
        )
    q_hat = np.einsum("d,hdk->hk", hidden_state, w_q)
    return QueryEstimate(q_hat=q_hat, source_layer=source_layer)


def channel_scores_from_max(q_hat: np.ndarray, channel_abs_max: np.ndarray) -> np.ndarray:
    """``|q_hat_i| * max_j |K[j, i]|`` given a running per-channel maximum."""
    q_hat = np.asarray(q_hat, dtype=np.float64).reshape(-1)
    channel_abs_max = np.asarray(channel_abs_max, dtype=np.float64).reshape(-1)
    if q_hat.shape != channel_abs_max.shape:
        raise ShapeError(
            f"query dim {q_hat.shape[0]} != channel max dim {channel_abs_max.shape[0]}"
        )
    return np.abs(q_hat) * channel_abs_max


def channel_scores(q_hat: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Per-channel contribution scores of an estimated query against keys.

    Args:
        q_hat: ``[head_dim]`` estimated query for one head.
        keys: ``[n, head_dim]`` key cache, ``n >= 1``.

    Returns:
        ``[head_dim]`` non-negative scores.
    """
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise EmptyCacheError("channel scores need a non-empty key cache")
    return channel_scores_from_max(q_hat, np.abs(keys).max(axis=0))


def group_channel_scores(q_hat_group: np.ndarray, channel_abs_max: np.ndarray) -> np.ndarray:
    """Channel scores for a KV head shared by several query heads.

    Magnitudes of the group's estimated queries are summed per channel
    before multiplying by the running key maximum, so the selected
    channels serve every query head in the group.
    """
    q_hat_group = np.asarray(q_hat_group, dtype=np.float64)
    if q_hat_group.ndim == 1:
        q_hat_group = q_hat_group[None, :]
    return channel_scores_from_max(np.abs(q_hat_group).sum(axis=0), channel_abs_max)


def select_critical_channels(scores: np.ndarray, d_s: int) -> CriticalChannelSet:
    """Pick the ``d_s`` highest-scoring channels.

    Ties break toward the lower channel index; the selection is returned
    sorted ascending.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 1 <= d_s <= scores.shape[0]:
        raise ParameterError(f"d_s must lie in [1, {scores.shape[0]}], got {d_s}")
    # lexsort: primary key last -> descending score, then ascending index
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    selected = np.sort(order[:d_s])
    return CriticalChannelSet(channel_scores=scores, selected=selected)


def approx_scores(query_critical: np.ndarray, critical_keys: np.ndarray) -> np.ndarray:
    """Token logits from the critical channels only.

    ``logit_j = sum_i q_i * K[j, i]`` over the selected channels, using
    the true current query restricted to those channels. For a query-head
    group, rows are summed so ranking reflects the whole group.

    Args:
        query_critical: ``[d_s]`` or ``[group, d_s]`` query slice.
        critical_keys: ``[n, d_s]`` prefetched key columns.

    Returns:
        ``[n]`` approximate logits.
    """
    query_critical = np.asarray(query_critical, dtype=np.float64)
    critical_keys = np.asarray(critical_keys, dtype=np.float64)
    if query_critical.ndim == 1:
        query_critical = query_critical[None, :]
    if critical_keys.ndim != 2 or critical_keys.shape[1] != query_critical.shape[1]:
        raise ShapeError(
            f"critical keys shape {critical_keys.shape} incompatible with query slice "
            f"{query_critical.shape}"
        )
    return critical_keys @ query_critical.sum(axis=0)


def select_topk_tokens(scores: np.ndarray, config: RetrievalConfig) -> np.ndarray:
    """Resident recent tokens plus the Top-K of the remainder.

    The ``n_local`` most recent tokens are always included. Among the
    older tokens the ``n_topk`` highest approximate scores win, ties
    breaking toward the more recent token. The result is sorted ascending
    and has ``min(n, n_local + n_topk)`` entries.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = scores.shape[0]
    if n == 0:
        raise EmptyCacheError("token selection over an empty cache")
    if n <= config.n_local + config.n_topk:
        return np.arange(n)
    local_start = n - config.n_local
    candidates = np.arange(local_start)
    # descending score, then descending index (more recent first)
    order = np.lexsort((-candidates, -scores[candidates]))
    picked = candidates[order[: config.n_topk]]
    return np.sort(np.concatenate([picked, np.arange(local_start, n)]))


def sparse_attention(
    query: np.ndarray, keys: np.ndarray, values: np.ndarray, selected: np.ndarray
) -> np.ndarray:
    """Exact softmax attention computed over only the selected rows."""
    selected = np.asarray(selected, dtype=np.intp).reshape(-1)
    if selected.size == 0:
        raise EmptyCacheError("sparse attention needs a non-empty selection")
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if selected.min() < 0 or selected.max() >= keys.shape[0]:
        raise ParameterError("selected indices out of range")
    weights = attention_weights(query, keys[selected])
    return weights @ values[selected]


def top_weight_tokens(weights: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest attention weights, recency-tie-broken.

    This is the exact-oracle counterpart of :func:`select_topk_tokens`:
    same tie rule, applied to true attention weights (which rank tokens
    identically to true logits).
    """
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    n = weights.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k must lie in [1, {n}], got {k}")
    idx = np.arange(n)
    order = np.lexsort((-idx, -weights))
    return np.sort(idx[order[:k]])


def recall_at_k(selected: np.ndarray, exact_topk: np.ndarray) -> float:
    """Fraction of the exact top-k token set covered by the selection."""
    selected = np.asarray(selected).reshape(-1)
    exact_topk = np.asarray(exact_topk).reshape(-1)
    if selected.size == 0 or exact_topk.size == 0:
        raise ParameterError("recall needs non-empty index sets")
    hits = np.intersect1d(selected, exact_topk).size
    return hits / exact_topk.size
