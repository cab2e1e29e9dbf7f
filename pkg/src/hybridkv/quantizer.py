"""Uniform low-bit group quantization of the KV cache.

Keys are quantized per channel (groups of ``group_size`` consecutive
tokens within one channel), values per token (groups of ``group_size``
consecutive channels within one token). Codes are stored bit-packed,
little-endian within each byte, in row-major group order.

The quantized matrix-vector products here never materialize a
dequantized matrix: they fold each group's scale into the query/weight
vector and accumulate over the integer codes, mirroring how a fused
low-bit GEMV kernel behaves. ``dequantize``-then-multiply is kept as the
independent check in the test suite, not as the implementation.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from hybridkv.errors import (
    EmptyCacheError,
    EncodingError,
    NumericError,
    ParameterError,
    ShapeError,
)
from hybridkv.kv_model import LayerKV

SUPPORTED_BITS = (1, 2)


class GroupAxis(enum.Enum):
    """Which logical axis the quantization groups run along."""

    PER_CHANNEL = "per_channel"  # key layout: g consecutive tokens within a channel
    PER_TOKEN = "per_token"      # value layout: g consecutive channels within a token


@dataclass(frozen=True)
class QuantParams:
    """Zero-point/scale pair for one group.

    ``zero_point`` is the group minimum and ``scale`` spans the group
    range over the ``2**bits - 1`` code steps. A degenerate group
    (max == min) stores ``scale = 1.0`` so every code is zero and
    reconstruction stays exact.
    """

    zero_point: float
    scale: float
    bits: int
    group_size: int

    def __post_init__(self) -> None:
        if self.bits not in SUPPORTED_BITS:
            raise ParameterError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.group_size < 1:
            raise ParameterError(f"group_size must be >= 1, got {self.group_size}")
        if self.scale < 0:
            raise ParameterError(f"scale must be non-negative, got {self.scale}")


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # np.round ties to even; the codec fixes ties away from zero.
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quant_params(values: np.ndarray, bits: int) -> QuantParams:
    """Derive zero-point and scale for one group of values.

    ``zero_point = min(values)`` and
    ``scale = (max(values) - min(values)) / (2**bits - 1)``.

    Args:
        values: non-empty, finite group contents.
        bits: code width, 1 or 2.

    Returns:
        The group's :class:`QuantParams`.
    """
    if bits not in SUPPORTED_BITS:
        raise ParameterError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ParameterError("cannot derive quantization parameters from an empty group")
    if not np.isfinite(values).all():
        raise NumericError("group contains non-finite values")
    lo = float(values.min())
    hi = float(values.max())
    scale = (hi - lo) / (2**bits - 1)
    if scale == 0.0:
        scale = 1.0
    return QuantParams(zero_point=lo, scale=scale, bits=bits, group_size=values.size)


def quantize_group(values: np.ndarray, params: QuantParams) -> np.ndarray:
    """Quantize one group: ``clamp(round((x - z) / s), 0, 2**b - 1)``.

    Rounding is half away from zero.
    """
    values = np.asarray(values, dtype=np.float64)
    scaled = (values - params.zero_point) / params.scale
    codes = np.clip(_round_half_away(scaled), 0, 2**params.bits - 1)
    return codes.astype(np.uint8)


def dequantize_group(codes: np.ndarray, params: QuantParams) -> np.ndarray:
    """Reconstruct ``code * scale + zero_point`` for one group."""
    codes = np.asarray(codes)
    if codes.size and int(codes.max()) >= 2**params.bits:
        raise EncodingError(
            f"code {int(codes.max())} out of range for {params.bits}-bit quantization"
        )
    return codes.astype(np.float64) * params.scale + params.zero_point


# ---------------------------------------------------------------------------
# Bit packing
# ---------------------------------------------------------------------------


def packed_size(count: int, bits: int) -> int:
    """Packed byte length for ``count`` codes of ``bits`` each."""
    return (count * bits + 7) // 8


def pack_bits(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack codes into bytes, little-endian within each byte.

    The first code occupies the least-significant bits of byte 0; with
    ``bits == 2`` four codes share a byte.

    Returns:
        ``uint8`` array of length ``ceil(count * bits / 8)``.
    """
    if bits not in SUPPORTED_BITS:
        raise ParameterError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
    if codes.size and int(codes.max()) >= 2**bits:
        raise EncodingError(f"code {int(codes.max())} does not fit in {bits} bits")
    if bits == 1:
        return np.packbits(codes, bitorder="little")
    per_byte = 4
    padded = np.zeros(((codes.size + per_byte - 1) // per_byte) * per_byte, dtype=np.uint8)
    padded[: codes.size] = codes
    quads = padded.reshape(-1, per_byte)
    shifts = np.array([0, 2, 4, 6], dtype=np.uint8)
    return (quads << shifts).sum(axis=1).astype(np.uint8)


def unpack_bits(data: np.ndarray, bits: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_bits`.

    Args:
        data: packed bytes.
        bits: code width used at pack time.
        count: number of codes to recover.

    Returns:
        ``uint8`` array of length ``count``.
    """
    if bits not in SUPPORTED_BITS:
        raise ParameterError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    data = np.frombuffer(bytes(data), dtype=np.uint8) if isinstance(data, (bytes, bytearray)) else np.asarray(data, dtype=np.uint8)
    if count < 0:
        raise ParameterError("count must be non-negative")
    if data.size != packed_size(count, bits):
        raise EncodingError(
            f"packed length {data.size} does not match {count} codes at {bits} bits "
            f"(expected {packed_size(count, bits)})"
        )
    if bits == 1:
        return np.unpackbits(data, count=count, bitorder="little")
    shifts = np.array([0, 2, 4, 6], dtype=np.uint8)
    codes = ((data[:, None] >> shifts) & 0x3).reshape(-1)
    return codes[:count].astype(np.uint8)


# ---------------------------------------------------------------------------
# Grouped tensors
# ---------------------------------------------------------------------------


class GroupQuantizedTensor:
    """One head's quantized ``[n x head_dim]`` matrix.

    Complete groups live as bit-packed codes plus per-group zero/scale
    grids; for the per-channel (key) layout, trailing token rows that do
    not yet fill a group stay in the float residual until enough rows
    arrive. The per-token (value) layout has no residual: a token's
    channels are all present the moment the row is appended.

    Group grids are row-major: per-channel groups are indexed
    ``(token_block, channel)``, per-token groups ``(token, channel_block)``.
    The packed code stream follows the same group order with each group's
    codes contiguous.
    """

    def __init__(self, head_dim: int, bits: int, group_size: int, axis: GroupAxis) -> None:
        if bits not in SUPPORTED_BITS:
            raise ParameterError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
        if group_size < 1:
            raise ParameterError("group_size must be >= 1")
        self.head_dim = head_dim
        self.bits = bits
        self.group_size = group_size
        self.axis = axis
        self._rows = 0  # complete (quantized) token rows
        self._codes = np.empty((0, head_dim), dtype=np.uint8)  # [rows, head_dim]
        grid_cols = head_dim if axis is GroupAxis.PER_CHANNEL else self._channel_blocks(head_dim, group_size)
        self._zero_points = np.empty((0, grid_cols), dtype=np.float64)
        self._scales = np.empty((0, grid_cols), dtype=np.float64)
        self.residual = np.empty((0, head_dim), dtype=np.float64)

    @staticmethod
    def _channel_blocks(head_dim: int, group_size: int) -> int:
        return (head_dim + group_size - 1) // group_size

    # -- construction ------------------------------------------------------

    @classmethod
    def from_matrix(
        cls, matrix: np.ndarray, axis: GroupAxis, bits: int, group_size: int
    ) -> "GroupQuantizedTensor":
        """Quantize a full ``[n, head_dim]`` matrix at once."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ShapeError(f"expected a 2-D matrix, got shape {matrix.shape}")
        if not np.isfinite(matrix).all():
            raise NumericError("matrix contains non-finite values")
        tensor = cls(matrix.shape[1], bits, group_size, axis)
        tensor.append_rows(matrix)
        return tensor

    def append_rows(self, rows: np.ndarray) -> None:
        """Append token rows, quantizing whatever groups become complete."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.shape[1] != self.head_dim:
            raise ShapeError(f"rows have {rows.shape[1]} channels, expected {self.head_dim}")
        if not np.isfinite(rows).all():
            raise NumericError("rows contain non-finite values")
        if self.axis is GroupAxis.PER_TOKEN:
            self._append_per_token(rows)
        else:
            self._append_per_channel(rows)

    def _append_per_token(self, rows: np.ndarray) -> None:
        n = rows.shape[0]
        if n == 0:
            return
        g = self.group_size
        blocks = self._channel_blocks(self.head_dim, g)
        zp = np.empty((n, blocks), dtype=np.float64)
        sc = np.empty((n, blocks), dtype=np.float64)
        codes = np.empty((n, self.head_dim), dtype=np.uint8)
        for b in range(blocks):
            sl = slice(b * g, min((b + 1) * g, self.head_dim))
            chunk = rows[:, sl]
            lo = chunk.min(axis=1)
            hi = chunk.max(axis=1)
            scale = (hi - lo) / (2**self.bits - 1)
            scale[scale == 0.0] = 1.0
            zp[:, b] = lo
            sc[:, b] = scale
            q = _round_half_away((chunk - lo[:, None]) / scale[:, None])
            codes[:, sl] = np.clip(q, 0, 2**self.bits - 1).astype(np.uint8)
        self._codes = np.concatenate([self._codes, codes], axis=0)
        self._zero_points = np.concatenate([self._zero_points, zp], axis=0)
        self._scales = np.concatenate([self._scales, sc], axis=0)
        self._rows += n

    def _append_per_channel(self, rows: np.ndarray) -> None:
        pending = np.concatenate([self.residual, rows], axis=0)
        g = self.group_size
        complete = (pending.shape[0] // g) * g
        if complete:
            block = pending[:complete].reshape(-1, g, self.head_dim)
            lo = block.min(axis=1)  # [blocks, head_dim]
            hi = block.max(axis=1)
            scale = (hi - lo) / (2**self.bits - 1)
            scale[scale == 0.0] = 1.0
            q = _round_half_away((block - lo[:, None, :]) / scale[:, None, :])
            codes = np.clip(q, 0, 2**self.bits - 1).astype(np.uint8)
            self._codes = np.concatenate([self._codes, codes.reshape(-1, self.head_dim)], axis=0)
            self._zero_points = np.concatenate([self._zero_points, lo], axis=0)
            self._scales = np.concatenate([self._scales, scale], axis=0)
            self._rows += complete
        self.residual = pending[complete:].copy()

    # -- inspection --------------------------------------------------------

    @property
    def logical_shape(self) -> tuple[int, int]:
        return (self._rows + self.residual.shape[0], self.head_dim)

    @property
    def num_complete_rows(self) -> int:
        return self._rows

    @property
    def num_groups(self) -> int:
        return self._zero_points.size

    def group_params(self, index: int) -> QuantParams:
        """Parameters of the ``index``-th group in row-major group order."""
        flat_z = self._zero_points.reshape(-1)
        flat_s = self._scales.reshape(-1)
        if not 0 <= index < flat_z.size:
            raise ParameterError(f"group index {index} out of range ({flat_z.size} groups)")
        if self.axis is GroupAxis.PER_CHANNEL:
            size = self.group_size
        else:
            block = index % self._scales.shape[1]
            start = block * self.group_size
            size = min(self.group_size, self.head_dim - start)
        return QuantParams(float(flat_z[index]), float(flat_s[index]), self.bits, size)

    def packed_codes(self) -> np.ndarray:
        """Bit-packed code stream in row-major group order."""
        return pack_bits(self._code_stream(), self.bits)

    def _code_stream(self) -> np.ndarray:
        if self.axis is GroupAxis.PER_TOKEN:
            # channel blocks are contiguous within each row already
            return self._codes.reshape(-1)
        blocks = self._rows // self.group_size
        grid = self._codes.reshape(blocks, self.group_size, self.head_dim)
        return grid.transpose(0, 2, 1).reshape(-1)

    def dequantize(self) -> np.ndarray:
        """Reconstruct the full ``[n, head_dim]`` matrix (residual included)."""
        if self.axis is GroupAxis.PER_TOKEN:
            g = self.group_size
            blocks = self._channel_blocks(self.head_dim, g)
            out = np.empty((self._rows, self.head_dim), dtype=np.float64)
            for b in range(blocks):
                sl = slice(b * g, min((b + 1) * g, self.head_dim))
                out[:, sl] = (
                    self._codes[:, sl].astype(np.float64) * self._scales[:, b : b + 1]
                    + self._zero_points[:, b : b + 1]
                )
        else:
            blocks = self._rows // self.group_size
            codes = self._codes.reshape(blocks, self.group_size, self.head_dim).astype(np.float64)
            out = codes * self._scales[:, None, :] + self._zero_points[:, None, :]
            out = out.reshape(self._rows, self.head_dim)
        return np.concatenate([out, self.residual], axis=0)

    # -- serialization -----------------------------------------------------

    _MAGIC = b"GQT1"

    def to_bytes(self) -> bytes:
        """Bit-exact serialized form: header, packed codes, params, residual.

        Zero-points and scales are stored as 16-bit floats (their storage
        format); the residual rows likewise.
        """
        stream = self._code_stream()
        packed = pack_bits(stream, self.bits).tobytes()
        zp = self._zero_points.astype("<f2").tobytes()
        sc = self._scales.astype("<f2").tobytes()
        res = self.residual.astype("<f2").tobytes()
        header = struct.pack(
            "<4sBBHIIII",
            self._MAGIC,
            self.bits,
            1 if self.axis is GroupAxis.PER_CHANNEL else 2,
            self.group_size,
            self._rows,
            self.head_dim,
            self.residual.shape[0],
            len(packed),
        )
        return header + packed + zp + sc + res

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GroupQuantizedTensor":
        header_size = struct.calcsize("<4sBBHIIII")
        if len(blob) < header_size:
            raise EncodingError("quantized tensor blob truncated")
        magic, bits, axis_code, group_size, rows, head_dim, res_rows, packed_len = struct.unpack(
            "<4sBBHIIII", blob[:header_size]
        )
        if magic != cls._MAGIC:
            raise EncodingError("bad quantized tensor magic")
        axis = GroupAxis.PER_CHANNEL if axis_code == 1 else GroupAxis.PER_TOKEN
        tensor = cls(head_dim, bits, group_size, axis)
        if axis is GroupAxis.PER_CHANNEL:
            grid_rows, grid_cols = rows // group_size, head_dim
        else:
            grid_rows, grid_cols = rows, cls._channel_blocks(head_dim, group_size)
        offset = header_size
        packed = np.frombuffer(blob[offset : offset + packed_len], dtype=np.uint8)
        offset += packed_len
        count = rows * head_dim
        if packed.size != packed_size(count, bits):
            raise EncodingError("packed code section has the wrong length")
        param_bytes = grid_rows * grid_cols * 2
        zp = np.frombuffer(blob[offset : offset + param_bytes], dtype="<f2")
        offset += param_bytes
        sc = np.frombuffer(blob[offset : offset + param_bytes], dtype="<f2")
        offset += param_bytes
        res = np.frombuffer(blob[offset : offset + res_rows * head_dim * 2], dtype="<f2")
        if zp.size != grid_rows * grid_cols or sc.size != zp.size or res.size != res_rows * head_dim:
            raise EncodingError("parameter or residual section truncated")
        stream = unpack_bits(packed, bits, count)
        if axis is GroupAxis.PER_CHANNEL:
            grid = stream.reshape(grid_rows, head_dim, group_size)
            tensor._codes = grid.transpose(0, 2, 1).reshape(rows, head_dim).copy()
        else:
            tensor._codes = stream.reshape(rows, head_dim).copy()
        tensor._zero_points = zp.astype(np.float64).reshape(grid_rows, grid_cols)
        tensor._scales = sc.astype(np.float64).reshape(grid_rows, grid_cols)
        tensor.residual = res.astype(np.float64).reshape(res_rows, head_dim)
        tensor._rows = rows
        return tensor


# ---------------------------------------------------------------------------
# Layer-level quantization
# ---------------------------------------------------------------------------


@dataclass
class QuantizedLayerKV:
    """Quantized cache for one layer: per-head key and value tensors."""

    keys: list[GroupQuantizedTensor]    # PER_CHANNEL
    values: list[GroupQuantizedTensor]  # PER_TOKEN

    @property
    def num_heads(self) -> int:
        return len(self.keys)

    @property
    def seq_len(self) -> int:
        return self.keys[0].logical_shape[0]

    def append_token(self, new_key: np.ndarray, new_value: np.ndarray) -> None:
        """Append one decoded token's rows (``[num_heads, head_dim]`` each)."""
        new_key = np.asarray(new_key, dtype=np.float64)
        new_value = np.asarray(new_value, dtype=np.float64)
        for head in range(self.num_heads):
            self.keys[head].append_rows(new_key[head])
            self.values[head].append_rows(new_value[head])


def roundtrip_bound_satisfied(
    tensor: GroupQuantizedTensor, source: np.ndarray, slack: float = 1e-6
) -> bool:
    """Whether every reconstructed element sits within its group's half-scale.

    The quantization contract: ``|dequant(quant(x)) - x| <= scale/2 + slack``
    for every element of a complete group (residual rows are stored
    verbatim and always satisfy it).
    """
    source = np.asarray(source, dtype=np.float64)
    err = np.abs(tensor.dequantize() - source)
    if tensor.axis is GroupAxis.PER_CHANNEL:
        blocks = tensor.num_complete_rows // tensor.group_size
        if blocks == 0:
            return True
        grid = err[: blocks * tensor.group_size].reshape(blocks, tensor.group_size, -1)
        return bool(np.all(grid <= tensor._scales[:, None, :] / 2 + slack))
    g = tensor.group_size
    for b in range(tensor._scales.shape[1]):
        sl = slice(b * g, min((b + 1) * g, tensor.head_dim))
        if not np.all(err[:, sl] <= tensor._scales[:, b : b + 1] / 2 + slack):
            return False
    return True


def quantize_layer_kv(cache: LayerKV, bits: int, group_size: int) -> QuantizedLayerKV:
    """Quantize a layer cache: keys per channel, values per token.

    Key groups span ``group_size`` consecutive tokens within each channel;
    tokens that do not complete a key group remain in the float residual.
    Value groups span ``group_size`` consecutive channels within each
    token and never leave a residual.
    """
    if cache.seq_len == 0:
        raise EmptyCacheError("cannot quantize an empty cache")
    keys = [
        GroupQuantizedTensor.from_matrix(cache.keys[h], GroupAxis.PER_CHANNEL, bits, group_size)
        for h in range(cache.num_heads)
    ]
    values = [
        GroupQuantizedTensor.from_matrix(cache.values[h], GroupAxis.PER_TOKEN, bits, group_size)
        for h in range(cache.num_heads)
    ]
    return QuantizedLayerKV(keys=keys, values=values)


# ---------------------------------------------------------------------------
# Quantized matrix-vector products
# ---------------------------------------------------------------------------


def qgemv_scores(query: np.ndarray, qkeys: GroupQuantizedTensor) -> np.ndarray:
    """Attention logits ``q K^T`` over a per-channel quantized key tensor.

    Per token block the group scale is folded into the query
    (``codes @ (q * s) + q . z``); residual rows multiply at full
    precision. No dequantized key matrix is formed.

    Returns:
        ``[n]`` unnormalized logits (no softmax, no ``sqrt(d)`` scaling).
    """
    if qkeys.axis is not GroupAxis.PER_CHANNEL:
        raise ShapeError("qgemv_scores requires a per-channel quantized tensor")
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != qkeys.head_dim:
        raise ShapeError(f"query dim {query.shape[0]} != head_dim {qkeys.head_dim}")
    g = qkeys.group_size
    blocks = qkeys.num_complete_rows // g
    parts = []
    if blocks:
        codes = qkeys._codes.reshape(blocks, g, qkeys.head_dim).astype(np.float64)
        scaled_q = qkeys._scales * query[None, :]          # [blocks, head_dim]
        offsets = qkeys._zero_points @ query               # [blocks]
        logits = np.einsum("bgd,bd->bg", codes, scaled_q) + offsets[:, None]
        parts.append(logits.reshape(-1))
    if qkeys.residual.shape[0]:
        parts.append(qkeys.residual @ query)
    if not parts:
        return np.empty(0, dtype=np.float64)
    return np.concatenate(parts)


def qgemv_output(weights: np.ndarray, qvalues: GroupQuantizedTensor) -> np.ndarray:
    """Attention output ``w V`` over a per-token quantized value tensor.

    Per channel block the per-token scales fold into the weights
    (``(w * s) @ codes + w . z``).

    Returns:
        ``[head_dim]`` output vector.
    """
    if qvalues.axis is not GroupAxis.PER_TOKEN:
        raise ShapeError("qgemv_output requires a per-token quantized tensor")
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    n = qvalues.logical_shape[0]
    if weights.shape[0] != n:
        raise ShapeError(f"weights length {weights.shape[0]} != token count {n}")
    g = qvalues.group_size
    out = np.empty(qvalues.head_dim, dtype=np.float64)
    codes = qvalues._codes.astype(np.float64)
    for b in range(qvalues._scales.shape[1]):
        sl = slice(b * g, min((b + 1) * g, qvalues.head_dim))
        out[sl] = (weights * qvalues._scales[:, b]) @ codes[:, sl]
        out[sl] += weights @ qvalues._zero_points[:, b]
    return out
