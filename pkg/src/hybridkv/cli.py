"""Command-line interface.

Subcommands: ``gen-trace`` (synthesize a trace file), ``calibrate``
(offline layer classification), ``run`` (full pipeline replay with
report emission), ``footprint`` (closed-form memory table), and
``timeline`` (build and simulate a transfer/compute schedule without a
trace).

Exit codes: 0 on success, 2 for invalid configuration, 3 for a
malformed trace file.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from hybridkv.errors import (
    ConfigError,
    EncodingError,
    NumericError,
    ParameterError,
    SchedulingError,
    ShapeError,
    TraceFormatError,
)
from hybridkv.identifier import SparsityProbe, calibrate, default_probe_k, profiles_to_dict
from hybridkv.memsim import (
    FootprintMethod,
    LayerCosts,
    LinkModel,
    build_timeline,
    memory_footprint,
    simulate,
)
from hybridkv.pipeline import PipelineConfig, emit_report, run_pipeline
from hybridkv.trace import (
    AttentionMode,
    ChannelOutlierSpec,
    SyntheticSpec,
    gen_trace,
    read_trace,
    write_trace,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRACE = 3

_CONFIG_ERRORS = (
    ConfigError,
    ParameterError,
    ShapeError,
    NumericError,
    EncodingError,
    SchedulingError,
)


def _parse_modes(text: str) -> tuple[AttentionMode, ...]:
    """Parse ``dense,sparse:4:0.99`` style per-layer mode lists."""
    modes = []
    for chunk in text.split(","):
        parts = chunk.strip().split(":")
        if parts[0] == "dense":
            if len(parts) != 1:
                raise ConfigError(f"dense mode takes no parameters: {chunk!r}")
            modes.append(AttentionMode(kind="dense"))
        elif parts[0] == "sparse":
            if len(parts) != 3:
                raise ConfigError(f"sparse mode needs num_dominant and mass: {chunk!r}")
            modes.append(
                AttentionMode(kind="sparse", num_dominant=int(parts[1]), mass=float(parts[2]))
            )
        else:
            raise ConfigError(f"unknown layer mode {parts[0]!r}")
    return tuple(modes)


def _parse_q_layers(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    text = text.strip()
    if text in ("", "none"):
        return ()
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad q-layers list {text!r}") from exc


def _link_from(args) -> LinkModel:
    presets = {"pcie1": 4e9, "pcie4": 32e9}
    bandwidth = presets.get(args.link, None) if hasattr(args, "link") else None
    if getattr(args, "bandwidth", None) is not None:
        bandwidth = args.bandwidth
    if bandwidth is None:
        bandwidth = 4e9
    return LinkModel(bandwidth=bandwidth, base_latency=getattr(args, "base_latency", 0.0))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridkv",
        description="Hybrid KV-cache compression: quantize broad-attention layers, "
        "offload and Top-K-retrieve the rest.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-trace", help="synthesize a trace file")
    g.add_argument("--output", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--layers", type=int, default=4)
    g.add_argument(
        "--modes",
        default=None,
        help="comma list, e.g. 'dense,sparse:4:0.99'; default: dense layer 0, sparse rest",
    )
    g.add_argument("--query-heads", type=int, default=4)
    g.add_argument("--kv-heads", type=int, default=4)
    g.add_argument("--head-dim", type=int, default=32)
    g.add_argument("--prefill-len", type=int, default=256)
    g.add_argument("--steps", type=int, default=4)
    g.add_argument("--outlier-channels", type=int, default=8)
    g.add_argument("--magnitude-ratio", type=float, default=0.95)
    g.add_argument("--drift", action="store_true")

    c = sub.add_parser("calibrate", help="classify layers from a trace's prefill")
    c.add_argument("trace")
    c.add_argument("--tau", type=float, default=0.2)
    c.add_argument("--n-q", type=int, default=32)
    c.add_argument("--probe-k", type=int, default=None)
    c.add_argument("--output", default=None, help="write the JSON profile here (default stdout)")

    r = sub.add_parser("run", help="replay a trace through the full pipeline")
    r.add_argument("trace")
    r.add_argument("--report-dir", required=True)
    r.add_argument("--format", default="json,csv", help="comma list of json,csv")
    r.add_argument("--tau", type=float, default=0.2)
    r.add_argument("--bits", type=int, default=1)
    r.add_argument("--group-size", type=int, default=64)
    r.add_argument("--n-local", type=int, default=64)
    r.add_argument("--n-topk", type=int, default=128)
    r.add_argument("--critical-channels", type=int, default=8)
    r.add_argument("--n-q", type=int, default=32)
    r.add_argument("--probe-k", type=int, default=None)
    r.add_argument("--q-layers", default=None, help="comma list; empty string forces all-sparse")
    r.add_argument("--link", choices=("pcie1", "pcie4"), default="pcie1")
    r.add_argument("--bandwidth", type=float, default=None, help="bytes/s, overrides --link")
    r.add_argument("--base-latency", type=float, default=0.0)
    r.add_argument("--compute-ms", type=float, default=1.0)
    r.add_argument("--executor", choices=("serial", "pipelined"), default="serial")
    r.add_argument(
        "--dump-quantized",
        default=None,
        help="directory for the bit-packed caches of quantized layers",
    )

    f = sub.add_parser("footprint", help="closed-form memory table")
    f.add_argument("--seq-len", type=int, required=True)
    f.add_argument("--layers", type=int, required=True)
    f.add_argument("--kv-heads", type=int, required=True)
    f.add_argument("--head-dim", type=int, required=True)
    f.add_argument("--alpha", type=float, default=None, help="token-budget fraction baseline")
    f.add_argument("--beta", type=float, default=None, help="page-size baseline")
    f.add_argument("--bits", type=int, default=1)
    f.add_argument("--group-size", type=int, default=64)
    f.add_argument("--critical-channels", type=int, default=8)
    f.add_argument("--q-layers", default="0", help="comma list of quantized layers")
    f.add_argument("--output", default=None, help="CSV path (default stdout)")

    t = sub.add_parser("timeline", help="build and simulate a decode timeline")
    t.add_argument("--labels", required=True, help="per-layer letters, e.g. QSSS")
    t.add_argument("--steps", type=int, default=1)
    t.add_argument("--seq-len", type=int, default=4096)
    t.add_argument("--kv-heads", type=int, default=8)
    t.add_argument("--head-dim", type=int, default=128)
    t.add_argument("--n-topk", type=int, default=128)
    t.add_argument("--critical-channels", type=int, default=8)
    t.add_argument("--compute-ms", type=float, default=1.0)
    t.add_argument("--estimate-ms", type=float, default=0.02)
    t.add_argument("--score-ms", type=float, default=0.05)
    t.add_argument("--link", choices=("pcie1", "pcie4"), default="pcie1")
    t.add_argument("--bandwidth", type=float, default=None)
    t.add_argument("--base-latency", type=float, default=0.0)
    t.add_argument("--output", default=None, help="JSON path (default stdout)")

    return parser


def _cmd_gen_trace(args) -> int:
    if args.modes is not None:
        # an explicit mode list fixes the layer count
        modes = _parse_modes(args.modes)
    else:
        modes = tuple(
            [AttentionMode(kind="dense")]
            + [AttentionMode(kind="sparse", num_dominant=4, mass=0.99)] * (args.layers - 1)
        )
    spec = SyntheticSpec(
        modes=modes,
        num_query_heads=args.query_heads,
        num_kv_heads=args.kv_heads,
        head_dim=args.head_dim,
        prefill_len=args.prefill_len,
        num_steps=args.steps,
        seed=args.seed,
        outliers=ChannelOutlierSpec(
            num_outlier_channels=args.outlier_channels,
            magnitude_ratio=args.magnitude_ratio,
            drift=args.drift,
        ),
    )
    write_trace(gen_trace(spec), args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    trace = read_trace(args.trace)
    probe = SparsityProbe(
        k=args.probe_k if args.probe_k is not None else default_probe_k(trace.prefill_len),
        n_q=args.n_q,
        tau=args.tau,
    )
    doc = profiles_to_dict(calibrate(trace, probe), probe)
    text = json.dumps(doc, indent=2)
    if args.output:
        Path(args.output).write_text(text)
        print(f"wrote {args.output}")
    else:
        print(text)
    return EXIT_OK


def _cmd_run(args) -> int:
    trace = read_trace(args.trace)
    link = _link_from(args)
    config = PipelineConfig(
        tau=args.tau,
        bits=args.bits,
        group_size=args.group_size,
        n_local=args.n_local,
        n_topk=args.n_topk,
        critical_channels=args.critical_channels,
        n_q=args.n_q,
        probe_k=args.probe_k,
        q_layers=_parse_q_layers(args.q_layers),
        bandwidth=link.bandwidth,
        base_latency=link.base_latency,
        compute_seconds=args.compute_ms * 1e-3,
        executor=args.executor,
    )
    report = run_pipeline(trace, config, dump_quantized_dir=args.dump_quantized)
    formats = tuple(x.strip() for x in args.format.split(",") if x.strip())
    unknown = set(formats) - {"json", "csv"}
    if unknown:
        raise ConfigError(f"unknown report formats: {sorted(unknown)}")
    written = emit_report(report, args.report_dir, formats=formats)
    for path in written:
        print(f"wrote {path}")
    mean_recall = sum(sum(row) for row in report.recall) / max(
        1, len(report.recall) * len(report.recall[0])
    )
    worst_cos = min(min(row) for row in report.cosine)
    print(f"labels: {','.join(report.labels)}")
    print(f"mean recall: {mean_recall:.4f}  worst cosine: {worst_cos:.6f}")
    print(f"simulated step time: {report.timeline['total_seconds']:.6f}s")
    return EXIT_OK


def _cmd_footprint(args) -> int:
    q_layers = set(_parse_q_layers(args.q_layers) or ())
    common = dict(seq_len=args.seq_len, num_kv_heads=args.kv_heads, head_dim=args.head_dim)
    rows = [
        (
            "original",
            "all",
            memory_footprint(FootprintMethod.ORIGINAL, num_layers=args.layers, **common),
        )
    ]
    if args.alpha is not None:
        rows.append(
            (
                "snapkv",
                "all",
                memory_footprint(
                    FootprintMethod.SNAPKV, num_layers=args.layers, alpha=args.alpha, **common
                ),
            )
        )
    if args.beta is not None:
        rows.append(
            (
                "quest",
                "all",
                memory_footprint(
                    FootprintMethod.QUEST, num_layers=args.layers, beta=args.beta, **common
                ),
            )
        )
    for layer in range(args.layers):
        if layer in q_layers:
            value = memory_footprint(
                FootprintMethod.HYBRID_QUANT,
                num_quant_layers=1,
                bits=args.bits,
                group_size=args.group_size,
                **common,
            )
            rows.append((FootprintMethod.HYBRID_QUANT.value, layer, value))
        else:
            value = memory_footprint(
                FootprintMethod.HYBRID_SPARSE,
                num_critical_channels=args.critical_channels,
                **common,
            )
            rows.append((FootprintMethod.HYBRID_SPARSE.value, layer, value))

    if args.output:
        with open(args.output, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "layer", "bytes"])
            writer.writerows(rows)
        print(f"wrote {args.output}")
    else:
        print("method,layer,bytes")
        for method, layer, value in rows:
            print(f"{method},{layer},{value}")
    return EXIT_OK


def _cmd_timeline(args) -> int:
    label_map = {"Q": "quantization_friendly", "S": "sparsity_friendly"}
    try:
        labels = [label_map[ch] for ch in args.labels.upper()]
    except KeyError as exc:
        raise ConfigError(f"labels must be Q/S letters, got {args.labels!r}") from exc
    link = _link_from(args)
    eb = 2
    prefetch = [
        [
            args.seq_len * args.critical_channels * args.kv_heads * eb
            if lab == "sparsity_friendly"
            else 0
            for lab in labels
        ]
        for _ in range(args.steps)
    ]
    fetch = [
        [
            2 * args.n_topk * args.head_dim * args.kv_heads * eb
            if lab == "sparsity_friendly"
            else 0
            for lab in labels
        ]
        for _ in range(args.steps)
    ]
    costs = LayerCosts(
        compute=tuple([args.compute_ms * 1e-3] * len(labels)),
        estimate=args.estimate_ms * 1e-3,
        score=args.score_ms * 1e-3,
    )
    timeline = build_timeline(labels, costs, link, prefetch, fetch)
    result = simulate(timeline)
    doc = result.to_dict()
    doc["events"] = [e.to_dict() for e in timeline.events]
    text = json.dumps(doc, indent=2)
    if args.output:
        Path(args.output).write_text(text)
        print(f"wrote {args.output}")
    else:
        print(text)
    return EXIT_OK


_COMMANDS = {
    "gen-trace": _cmd_gen_trace,
    "calibrate": _cmd_calibrate,
    "run": _cmd_run,
    "footprint": _cmd_footprint,
    "timeline": _cmd_timeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except TraceFormatError as exc:
        print(f"error: malformed trace: {exc}", file=sys.stderr)
        return EXIT_TRACE
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
