"""Hybrid KV-cache compression engine.

Layers whose attention spreads broadly keep a bit-packed low-bit
quantized cache on the device; layers whose attention concentrates on a
few tokens offload their cache to the host and pull back a recent
window plus the Top-K tokens each decode step, ranked through
dynamically selected critical channels. A discrete-event simulator
models the compute/transfer overlap of that decode loop, and exact
attention oracles score every approximation.
"""

from hybridkv.identifier import LayerKind, SparsityProbe, calibrate, dense_preference_score, sparse_error
from hybridkv.kv_model import LayerKV, ModelConfig, attention_weights, exact_attention, layer_attention
from hybridkv.memsim import LinkModel, memory_footprint, simulate
from hybridkv.pipeline import PipelineConfig, RunReport, emit_report, run_pipeline
from hybridkv.quantizer import GroupQuantizedTensor, quantize_layer_kv
from hybridkv.retriever import RetrievalConfig, select_topk_tokens
from hybridkv.trace import SyntheticSpec, gen_trace, read_trace, write_trace

__version__ = "0.1.0"

__all__ = [
    "LayerKind",
    "SparsityProbe",
    "calibrate",
    "dense_preference_score",
    "sparse_error",
    "LayerKV",
    "ModelConfig",
    "attention_weights",
    "exact_attention",
    "layer_attention",
    "LinkModel",
    "memory_footprint",
    "simulate",
    "PipelineConfig",
    "RunReport",
    "emit_report",
    "run_pipeline",
    "GroupQuantizedTensor",
    "quantize_layer_kv",
    "RetrievalConfig",
    "select_topk_tokens",
    "SyntheticSpec",
    "gen_trace",
    "read_trace",
    "write_trace",
    "__version__",
]
