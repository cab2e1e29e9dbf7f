#!/usr/bin/env python3
"""Generate a mixed dense/sparse trace, run the full pipeline, print a summary.

Usage: python3 scripts/demo_pipeline.py [seed]
"""

import sys

import numpy as np

from hybridkv.pipeline import PipelineConfig, run_pipeline
from hybridkv.trace import SyntheticSpec, dense, gen_trace, sparse


def main() -> None:
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    spec = SyntheticSpec(
        modes=(dense(), sparse(4, 0.99), sparse(4, 0.99), sparse(4, 0.99)),
        num_query_heads=4,
        num_kv_heads=4,
        head_dim=32,
        prefill_len=512,
        num_steps=8,
        seed=seed,
    )
    trace = gen_trace(spec)
    report = run_pipeline(trace, PipelineConfig())

    print(f"seed={seed}  prefill={trace.prefill_len}  steps={trace.num_steps}")
    print(f"{'layer':>5} {'label':>22} {'score':>7} {'recall':>7} {'cosine':>7} {'mass':>6}")
    for l, label in enumerate(report.labels):
        score = report.profiles["layers"][l]["score"]
        print(
            f"{l:>5} {label:>22} {score:>7.3f} "
            f"{np.mean(report.recall[l]):>7.4f} "
            f"{np.mean(report.cosine[l]):>7.4f} "
            f"{np.mean(report.selected_mass[l]):>6.3f}"
        )
    tl = report.timeline
    print(
        f"simulated step time {tl['total_seconds']*1e3/trace.num_steps:.3f} ms/step, "
        f"transfer overlap {tl['overlap_fraction']:.0%}, "
        f"stalls {tl['stall_seconds']*1e3:.3f} ms"
    )


if __name__ == "__main__":
    main()
