"""Reference KV-cache data model and exact attention.

This module holds the uncompressed ground truth. Every approximate path
in the package (quantized GEMV, critical-channel retrieval, sparse
attention over fetched tokens) is measured against the operations here,
inside the same run.

Storage semantics are 16-bit float (``ModelConfig.element_bytes == 2``
drives all memory accounting), but arithmetic runs in float64 so the
oracles themselves add no meaningful rounding noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hybridkv.errors import ConfigError, EmptyCacheError, NumericError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of the attention subsystem being simulated.

    Attributes:
        num_layers: Transformer layer count.
        num_query_heads: Query heads per layer.
        num_kv_heads: Key/value heads per layer. Query heads are grouped
            onto KV heads (grouped-query attention); with equal counts the
            model is plain multi-head attention.
        head_dim: Channels per head.
        hidden_dim: Residual-stream width; must equal
            ``num_query_heads * head_dim``.
        element_bytes: Bytes per stored cache element (16-bit float
            storage semantics; accounting always uses this even though
            arithmetic widens).
    """

    num_layers: int
    num_query_heads: int
    num_kv_heads: int
    head_dim: int
    hidden_dim: int
    element_bytes: int = 2

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.head_dim < 1:
            raise ConfigError(f"head_dim must be >= 1, got {self.head_dim}")
        if self.num_kv_heads < 1 or self.num_query_heads < 1:
            raise ConfigError("head counts must be >= 1")
        if self.num_query_heads % self.num_kv_heads != 0:
            raise ConfigError(
                f"num_query_heads ({self.num_query_heads}) must be divisible by "
                f"num_kv_heads ({self.num_kv_heads})"
            )
        if self.hidden_dim != self.num_query_heads * self.head_dim:
            raise ConfigError(
                f"hidden_dim ({self.hidden_dim}) must equal "
                f"num_query_heads * head_dim ({self.num_query_heads * self.head_dim})"
            )
        if self.element_bytes != 2:
            raise ConfigError("storage is 16-bit float semantics; element_bytes must be 2")

    @property
    def queries_per_kv_head(self) -> int:
        return self.num_query_heads // self.num_kv_heads

    def kv_head_for(self, query_head: int) -> int:
        """KV head whose cache the given query head reads."""
        return query_head // self.queries_per_kv_head


class LayerKV:
    """Per-layer, per-KV-head key/value token matrices.

    Rows are append-only: existing token rows never change once written.
    Buffers grow geometrically so a long decode loop stays amortized O(1)
    per append. Reads are safe to share; appends need exclusive access.
    """

    def __init__(self, num_heads: int, head_dim: int) -> None:
        if num_heads < 1 or head_dim < 1:
            raise ConfigError("num_heads and head_dim must be >= 1")
        self.num_heads = num_heads
        self.head_dim = head_dim
        self._n = 0
        self._keys = np.empty((num_heads, 0, head_dim), dtype=np.float64)
        self._values = np.empty((num_heads, 0, head_dim), dtype=np.float64)

    @classmethod
    def from_arrays(cls, keys: np.ndarray, values: np.ndarray) -> "LayerKV":
        """Build a cache from stacked ``[num_heads, n, head_dim]`` arrays."""
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if keys.ndim != 3 or keys.shape != values.shape:
            raise ShapeError(
                f"keys/values must share shape [heads, n, head_dim], got "
                f"{keys.shape} and {values.shape}"
            )
        if not (np.isfinite(keys).all() and np.isfinite(values).all()):
            raise NumericError("cache contents must be finite")
        cache = cls(keys.shape[0], keys.shape[2])
        cache._keys = keys.copy()
        cache._values = values.copy()
        cache._n = keys.shape[1]
        return cache

    @property
    def seq_len(self) -> int:
        return self._n

    @property
    def keys(self) -> np.ndarray:
        """View of shape ``[num_heads, seq_len, head_dim]``."""
        return self._keys[:, : self._n, :]

    @property
    def values(self) -> np.ndarray:
        return self._values[:, : self._n, :]

    def _grow(self, min_capacity: int) -> None:
        capacity = self._keys.shape[1]
        if capacity >= min_capacity:
            return
        new_capacity = max(16, capacity * 2)
        while new_capacity < min_capacity:
            new_capacity *= 2
        for name in ("_keys", "_values"):
            old = getattr(self, name)
            fresh = np.empty((self.num_heads, new_capacity, self.head_dim), dtype=np.float64)
            fresh[:, : self._n, :] = old[:, : self._n, :]
            setattr(self, name, fresh)

    def append(self, new_key: np.ndarray, new_value: np.ndarray) -> None:
        """Append one token row per head.

        Args:
            new_key: ``[num_heads, head_dim]`` key row.
            new_value: ``[num_heads, head_dim]`` value row.
        """
        new_key = np.asarray(new_key, dtype=np.float64)
        new_value = np.asarray(new_value, dtype=np.float64)
        expected = (self.num_heads, self.head_dim)
        if new_key.shape != expected or new_value.shape != expected:
            raise ShapeError(
                f"appended rows must have shape {expected}, got "
                f"{new_key.shape} and {new_value.shape}"
            )
        if not (np.isfinite(new_key).all() and np.isfinite(new_value).all()):
            raise NumericError("appended rows must be finite")
        self._grow(self._n + 1)
        self._keys[:, self._n, :] = new_key
        self._values[:, self._n, :] = new_value
        self._n += 1


def append_kv(cache: LayerKV, new_key: np.ndarray, new_value: np.ndarray) -> LayerKV:
    """Append one token to ``cache`` and return it.

    The prefix ``0..n-1`` is untouched; ``seq_len`` increments by one.
    """
    cache.append(new_key, new_value)
    return cache


def attention_weights(query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Softmax attention weights of one head's query against its keys.

    Computes ``softmax(q K^T / sqrt(head_dim))`` with max-subtraction for
    numerical stability; the result is non-negative and sums to one.

    Args:
        query: ``[head_dim]`` query vector.
        keys: ``[n, head_dim]`` cached keys, ``n >= 1``.

    Returns:
        ``[n]`` probability vector.
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[1] != query.shape[0]:
        raise ShapeError(f"keys shape {keys.shape} incompatible with query dim {query.shape[0]}")
    if keys.shape[0] == 0:
        raise EmptyCacheError("attention over an empty cache")
    if not np.isfinite(query).all() or not np.isfinite(keys).all():
        raise NumericError("attention inputs must be finite")
    logits = keys @ query / np.sqrt(query.shape[0])
    logits -= logits.max()
    weights = np.exp(logits)
    weights /= weights.sum()
    return weights


def exact_attention(query: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Exact single-head attention output ``softmax(qK^T/sqrt(d)) V``.

    Args:
        query: ``[head_dim]`` query vector.
        keys: ``[n, head_dim]`` cached keys.
        values: ``[n, head_dim]`` cached values, same shape as keys.

    Returns:
        ``[head_dim]`` output vector.
    """
    values = np.asarray(values, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if values.shape != keys.shape:
        raise ShapeError(f"values shape {values.shape} must match keys shape {keys.shape}")
    weights = attention_weights(query, keys)
    return weights @ values


def layer_attention(queries: np.ndarray, cache: LayerKV) -> np.ndarray:
    """All-head exact attention against a layer cache.

    Each group of ``num_query_heads / num_kv_heads`` query heads reads the
    same KV head's cache (grouped-query broadcast).

    Args:
        queries: ``[num_query_heads, head_dim]``.
        cache: the layer's KV cache.

    Returns:
        ``[num_query_heads, head_dim]`` per-query-head outputs.
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != cache.head_dim:
        raise ShapeError(f"queries shape {queries.shape} incompatible with head_dim {cache.head_dim}")
    num_query_heads = queries.shape[0]
    if num_query_heads % cache.num_heads != 0:
        raise ShapeError(
            f"{num_query_heads} query heads not divisible by {cache.num_heads} KV heads"
        )
    group = num_query_heads // cache.num_heads
    out = np.empty_like(queries)
    for qh in range(num_query_heads):
        kv = qh // group
        out[qh] = exact_attention(queries[qh], cache.keys[kv], cache.values[kv])
    return out
