"""End-to-end decode replay: classify, compress, retrieve, measure.

``run_pipeline`` replays a trace's decode steps through the full hybrid
scheme. Quantization-friendly layers serve attention from the bit-packed
cache via the quantized GEMV path; sparsity-friendly layers offload to
the host pool and fetch a recent-window-plus-Top-K subset each step via
the two-stage retriever, with every transfer's size recorded and fed to
the timeline simulator. Every approximate output is scored against the
exact-attention oracle computed in the same run.

Reports are deterministic: identical trace plus config yields
byte-identical JSON and CSV output.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from hybridkv.errors import ConfigError
from hybridkv.identifier import (
    LayerKind,
    SparsityProbe,
    calibrate,
    default_probe_k,
    profiles_to_dict,
)
from hybridkv.kv_model import LayerKV, attention_weights, layer_attention
from hybridkv.memsim import (
    DeviceBuffers,
    HostPool,
    LayerCosts,
    LinkModel,
    build_timeline,
    fetch_topk,
    hybrid_footprint_rows,
    prefetch_critical_keys,
    simulate,
)
from hybridkv.quantizer import (
    qgemv_output,
    qgemv_scores,
    quantize_layer_kv,
    roundtrip_bound_satisfied,
)
from hybridkv.retriever import (
    RetrievalConfig,
    approx_scores,
    estimate_query,
    group_channel_scores,
    recall_at_k,
    select_critical_channels,
    select_topk_tokens,
    top_weight_tokens,
)
from hybridkv.trace import Trace

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of one pipeline run; defaults are the published operating point.

    ``bits == 16`` keeps quantization-friendly layers in full precision
    (a passthrough used for degenerate-configuration checks);
    ``q_layers`` pins the quantization-friendly set instead of using the
    calibrated labels.
    """

    tau: float = 0.2
    bits: int = 1
    group_size: int = 64
    n_local: int = 64
    n_topk: int = 128
    critical_channels: int = 8
    n_q: int = 32
    probe_k: int | None = None
    q_layers: tuple[int, ...] | None = None
    bandwidth: float = 4e9
    base_latency: float = 0.0
    compute_seconds: float = 1e-3
    estimate_seconds: float = 2e-5
    score_seconds: float = 5e-5
    executor: str = "serial"

    def validate(self) -> None:
        if self.bits not in (1, 2, 16):
            raise ConfigError(f"bits must be 1, 2, or 16, got {self.bits}")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        if self.n_local < 0 or self.n_topk < 1 or self.critical_channels < 1:
            raise ConfigError("token/channel budgets out of range")
        if self.n_q < 1:
            raise ConfigError("n_q must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.executor not in ("serial", "pipelined"):
            raise ConfigError(f"unknown executor {self.executor!r}")
        if self.bandwidth <= 0 or self.base_latency < 0:
            raise ConfigError("link parameters out of range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["q_layers"] = list(self.q_layers) if self.q_layers is not None else None
        return d


@dataclass
class RunReport:
    """Everything a run measured, in JSON-ready plain types."""

    schema_version: int
    config: dict
    trace_info: dict
    profiles: dict
    labels: list
    recall: list          # [layer][step]
    cosine: list
    max_abs_err: list
    selected_mass: list
    retrieval: list       # per-step records of offloaded layers
    quant_stats: list
    footprint: list
    timeline: dict

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(**{f.name: data[f.name] for f in fields(cls)})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    weights = np.exp(shifted)
    return weights / weights.sum()


def _quant_roundtrip_stats(layer: int, cache: LayerKV, qcache) -> dict:
    key_err = 0.0
    value_err = 0.0
    bound_ok = True
    for head in range(cache.num_heads):
        key_err = max(
            key_err, float(np.abs(qcache.keys[head].dequantize() - cache.keys[head]).max())
        )
        value_err = max(
            value_err,
            float(np.abs(qcache.values[head].dequantize() - cache.values[head]).max()),
        )
        bound_ok = bound_ok and roundtrip_bound_satisfied(qcache.keys[head], cache.keys[head])
        bound_ok = bound_ok and roundtrip_bound_satisfied(
            qcache.values[head], cache.values[head]
        )
    return {
        "layer": layer,
        "key_max_abs_err": key_err,
        "value_max_abs_err": value_err,
        "bound_ok": bound_ok,
    }


class _SparseLayerState:
    """Device-side bookkeeping for one offloaded layer."""

    def __init__(self, trace: Trace, layer: int, pool: HostPool, n_local: int) -> None:
        cache = trace.prefill[layer]
        self.layer = layer
        self.buffers = DeviceBuffers(cache.num_heads, cache.head_dim)
        self.local_offset = max(0, cache.seq_len - n_local)
        self.buffers.local = LayerKV.from_arrays(
            cache.keys[:, self.local_offset :, :], cache.values[:, self.local_offset :, :]
        )

    def local_rows(self, head: int, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rel = np.asarray(indices, dtype=np.intp) - self.local_offset
        return (
            self.buffers.local.keys[head][rel],
            self.buffers.local.values[head][rel],
        )


def run_pipeline(
    trace: Trace, config: PipelineConfig, dump_quantized_dir=None
) -> RunReport:
    """Replay a trace through the hybrid scheme and measure everything.

    Args:
        trace: loaded trace (prefill longer than ``config.n_q``).
        config: run configuration; ``q_layers=()`` forces every layer
            through the sparse path, ``q_layers=None`` uses calibration.
        dump_quantized_dir: when given, the final bit-packed caches of
            the quantized layers are written there, one file per layer,
            head, and tensor.

    Returns:
        A :class:`RunReport` with per-layer/per-step recall, fidelity,
        selected-set mass, retrieval records, quantization stats,
        footprint rows, and the simulated transfer timeline.
    """
    config.validate()
    cfg = trace.config
    L, T = cfg.num_layers, trace.num_steps
    n0 = trace.prefill_len
    group = cfg.queries_per_kv_head

    probe_k = config.probe_k if config.probe_k is not None else default_probe_k(n0)
    probe = SparsityProbe(k=probe_k, n_q=config.n_q, tau=config.tau)
    profiles = calibrate(trace, probe)

    if config.q_layers is not None:
        q_set = set(config.q_layers)
        bad = [l for l in q_set if not 0 <= l < L]
        if bad:
            raise ConfigError(f"q_layers out of range for {L} layers: {sorted(bad)}")
        labels = [
            LayerKind.QUANTIZATION_FRIENDLY if l in q_set else LayerKind.SPARSITY_FRIENDLY
            for l in range(L)
        ]
    else:
        labels = [p.label for p in profiles]

    retrieval = RetrievalConfig(
        n_local=config.n_local, n_topk=config.n_topk, d_s=min(config.critical_channels, cfg.head_dim)
    )
    link = LinkModel(bandwidth=config.bandwidth, base_latency=config.base_latency)

    exact = [LayerKV.from_arrays(trace.prefill[l].keys, trace.prefill[l].values) for l in range(L)]
    pool = HostPool()
    sparse_state: dict[int, _SparseLayerState] = {}
    qcaches: dict[int, object] = {}
    quant_stats: list[dict] = []
    for l in range(L):
        if labels[l] is LayerKind.SPARSITY_FRIENDLY:
            pool.offload_layer(l, trace.prefill[l])
            sparse_state[l] = _SparseLayerState(trace, l, pool, config.n_local)
        elif config.bits == 16:
            qcaches[l] = LayerKV.from_arrays(trace.prefill[l].keys, trace.prefill[l].values)
        else:
            qcaches[l] = quantize_layer_kv(trace.prefill[l], config.bits, config.group_size)
            quant_stats.append(_quant_roundtrip_stats(l, trace.prefill[l], qcaches[l]))

    recall = [[0.0] * T for _ in range(L)]
    cosine = [[0.0] * T for _ in range(L)]
    max_abs = [[0.0] * T for _ in range(L)]
    mass = [[0.0] * T for _ in range(L)]
    retrieval_records: list[dict] = []
    prefetch_bytes = [[0] * L for _ in range(T)]
    fetch_bytes = [[0] * L for _ in range(T)]

    def stage1(l: int, t: int, step) -> None:
        """Estimate the layer's query, pick channels, prefetch key columns."""
        hid = step.hidden[l - 1] if l >= 1 else step.hidden[0]
        est = estimate_query(trace.w_q[l], hid, source_layer=max(l - 1, 0))
        maxima = pool.channel_abs_max(l)
        channel_sets = []
        for kvh in range(cfg.num_kv_heads):
            scores = group_channel_scores(
                est.q_hat[kvh * group : (kvh + 1) * group], maxima[kvh]
            )
            channel_sets.append(select_critical_channels(scores, retrieval.d_s).selected)
        req = prefetch_critical_keys(
            pool, l, channel_sets, sparse_state[l].buffers, step=t,
            element_bytes=cfg.element_bytes,
        )
        prefetch_bytes[t][l] = req.nbytes

    workers = ThreadPoolExecutor(max_workers=1) if config.executor == "pipelined" else None
    try:
        for t, step in enumerate(trace.steps):
            pending: dict[int, object] = {}

            def submit(l: int) -> None:
                if workers is not None and l < L and labels[l] is LayerKind.SPARSITY_FRIENDLY:
                    pending[l] = workers.submit(stage1, l, t, step)

            first_sparse = next(
                (l for l in range(L) if labels[l] is LayerKind.SPARSITY_FRIENDLY), None
            )
            if first_sparse is not None:
                submit(first_sparse)

            for l in range(L):
                nxt = next(
                    (
                        j
                        for j in range(l + 1, L)
                        if labels[j] is LayerKind.SPARSITY_FRIENDLY and j not in pending
                    ),
                    None,
                )
                if nxt is not None:
                    submit(nxt)

                queries = step.queries[l]
                exact_weights = [
                    attention_weights(queries[qh], exact[l].keys[cfg.kv_head_for(qh)])
                    for qh in range(cfg.num_query_heads)
                ]
                exact_out = np.stack(
                    [
                        exact_weights[qh] @ exact[l].values[cfg.kv_head_for(qh)]
                        for qh in range(cfg.num_query_heads)
                    ]
                )

                if labels[l] is LayerKind.QUANTIZATION_FRIENDLY:
                    if config.bits == 16:
                        out = layer_attention(queries, qcaches[l])
                    else:
                        qc = qcaches[l]
                        out = np.empty_like(queries)
                        for qh in range(cfg.num_query_heads):
                            kvh = cfg.kv_head_for(qh)
                            logits = qgemv_scores(queries[qh], qc.keys[kvh])
                            weights = _stable_softmax(logits / np.sqrt(cfg.head_dim))
                            out[qh] = qgemv_output(weights, qc.values[kvh])
                    recall[l][t] = 1.0
                    mass[l][t] = 1.0
                else:
                    if l in pending:
                        pending.pop(l).result()
                    else:
                        stage1(l, t, step)
                    state = sparse_state[l]
                    slot = state.buffers.read_slot(t)
                    n_now = exact[l].seq_len
                    local_start = max(0, n_now - retrieval.n_local)
                    sel_per_head = []
                    fetch_per_head = []
                    for kvh in range(cfg.num_kv_heads):
                        channels, critical = slot[kvh]
                        q_group = queries[kvh * group : (kvh + 1) * group]
                        logits = approx_scores(q_group[:, channels], critical)
                        sel = select_topk_tokens(logits, retrieval)
                        sel_per_head.append(sel)
                        fetch_per_head.append(sel[sel < local_start])
                    fetched, req = fetch_topk(
                        pool, l, fetch_per_head, state.buffers, step=t,
                        element_bytes=cfg.element_bytes,
                    )
                    fetch_bytes[t][l] = req.nbytes

                    out = np.empty_like(queries)
                    head_recall = []
                    head_mass = []
                    for kvh in range(cfg.num_kv_heads):
                        sel = sel_per_head[kvh]
                        k_fetch, v_fetch = fetched[kvh]
                        local_idx = sel[sel >= local_start]
                        k_local, v_local = state.local_rows(kvh, local_idx)
                        k_sel = np.concatenate([k_fetch, k_local], axis=0)
                        v_sel = np.concatenate([v_fetch, v_local], axis=0)
                        for qh in range(kvh * group, (kvh + 1) * group):
                            w = attention_weights(queries[qh], k_sel)
                            out[qh] = w @ v_sel
                        group_w = np.sum(
                            [exact_weights[qh] for qh in range(kvh * group, (kvh + 1) * group)],
                            axis=0,
                        )
                        exact_topk = top_weight_tokens(group_w, min(retrieval.n_topk, n_now))
                        head_recall.append(recall_at_k(sel, exact_topk))
                        head_mass.append(float(group_w[sel].sum()) / group)
                    recall[l][t] = float(np.mean(head_recall))
                    mass[l][t] = float(np.mean(head_mass))
                    retrieval_records.append(
                        {
                            "layer": l,
                            "step": t,
                            "per_head": [
                                {
                                    "channels": [int(c) for c in slot[kvh][0]],
                                    "selected": [int(j) for j in sel_per_head[kvh]],
                                    "fetched": int(fetch_per_head[kvh].size),
                                    "recall": head_recall[kvh],
                                }
                                for kvh in range(cfg.num_kv_heads)
                            ],
                        }
                    )

                cosine[l][t] = _cosine(out.reshape(-1), exact_out.reshape(-1))
                max_abs[l][t] = float(np.abs(out - exact_out).max())

                exact[l].append(step.new_keys[l], step.new_values[l])
                if labels[l] is LayerKind.QUANTIZATION_FRIENDLY:
                    if config.bits == 16:
                        qcaches[l].append(step.new_keys[l], step.new_values[l])
                    else:
                        qcaches[l].append_token(step.new_keys[l], step.new_values[l])
                else:
                    pool.append(l, step.new_keys[l], step.new_values[l])
                    sparse_state[l].buffers.local.append(step.new_keys[l], step.new_values[l])
    finally:
        if workers is not None:
            workers.shutdown(wait=True)

    if dump_quantized_dir is not None and config.bits in (1, 2):
        dump_dir = Path(dump_quantized_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
        for l, qc in sorted(qcaches.items()):
            for head in range(cfg.num_kv_heads):
                (dump_dir / f"layer{l}_head{head}_keys.bin").write_bytes(
                    qc.keys[head].to_bytes()
                )
                (dump_dir / f"layer{l}_head{head}_values.bin").write_bytes(
                    qc.values[head].to_bytes()
                )

    label_values = [lab.value for lab in labels]
    footprint = hybrid_footprint_rows(
        labels,
        seq_len=n0 + T,
        num_kv_heads=cfg.num_kv_heads,
        head_dim=cfg.head_dim,
        bits=config.bits if config.bits in (1, 2) else 2,
        group_size=config.group_size,
        num_critical_channels=retrieval.d_s,
        n_local=retrieval.n_local,
        element_bytes=cfg.element_bytes,
    )
    costs = LayerCosts(
        compute=tuple([config.compute_seconds] * L),
        estimate=config.estimate_seconds,
        score=config.score_seconds,
    )
    timeline = build_timeline(labels, costs, link, prefetch_bytes, fetch_bytes)
    sim = simulate(timeline)
    timeline_dict = sim.to_dict()
    timeline_dict["events"] = [e.to_dict() for e in timeline.events]

    return RunReport(
        schema_version=REPORT_SCHEMA_VERSION,
        config=config.to_dict(),
        trace_info={
            "num_layers": L,
            "num_query_heads": cfg.num_query_heads,
            "num_kv_heads": cfg.num_kv_heads,
            "head_dim": cfg.head_dim,
            "prefill_len": n0,
            "num_steps": T,
            "labels_source": "config" if config.q_layers is not None else "calibration",
        },
        profiles=profiles_to_dict(profiles, probe),
        labels=label_values,
        recall=recall,
        cosine=cosine,
        max_abs_err=max_abs,
        selected_mass=mass,
        retrieval=retrieval_records,
        quant_stats=quant_stats,
        footprint=footprint,
        timeline=timeline_dict,
    )


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def emit_report(report: RunReport, out_dir, formats=("json", "csv")) -> list[Path]:
    """Write the report as JSON and/or per-metric CSV tables.

    The JSON file round-trips: parsing it and rebuilding a
    :class:`RunReport` compares equal to the original. CSV tables have
    one recall/fidelity row per layer and step.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if "json" in formats:
        path = out_dir / "report.json"
        path.write_text(report.to_json())
        written.append(path)
    if "csv" in formats:
        L = len(report.labels)
        T = len(report.recall[0]) if L else 0

        def table(name: str, header: list[str], rows) -> None:
            path = out_dir / name
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(header)
                writer.writerows(rows)
            written.append(path)

        table(
            "recall.csv",
            ["layer", "step", "recall"],
            [(l, t, report.recall[l][t]) for l in range(L) for t in range(T)],
        )
        table(
            "fidelity.csv",
            ["layer", "step", "cosine", "max_abs_err"],
            [
                (l, t, report.cosine[l][t], report.max_abs_err[l][t])
                for l in range(L)
                for t in range(T)
            ],
        )
        table(
            "footprint.csv",
            ["method", "layer", "bytes"],
            [(row["method"], row["layer"], row["bytes"]) for row in report.footprint],
        )
        table(
            "profiles.csv",
            ["layer", "head", "head_score", "layer_score", "label"],
            [
                (p["layer"], head, score, p["score"], p["label"])
                for p in report.profiles["layers"]
                for head, score in enumerate(p["per_head_scores"])
            ],
        )
        table(
            "timeline.csv",
            ["id", "kind", "layer", "step", "label", "start", "duration", "depends_on"],
            [
                (
                    e["id"],
                    e["kind"],
                    e["layer"],
                    e["step"],
                    e["label"],
                    e["start"],
                    e["duration"],
                    ";".join(str(d) for d in e["depends_on"]),
                )
                for e in report.timeline["events"]
            ],
        )
    return written
