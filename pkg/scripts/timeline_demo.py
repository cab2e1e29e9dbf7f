#!/usr/bin/env python3
"""Simulate one decode step of a 32-layer model on slow and fast links.

Shows which transfers hide under compute: critical-key prefetches overlap
the previous layer, while each layer's Top-K fetch serializes between its
scoring and its attention.

Usage: python3 scripts/timeline_demo.py
"""

from hybridkv.memsim import (
    PCIE_GEN1_X16,
    PCIE_GEN4_X16,
    LayerCosts,
    build_timeline,
    simulate,
)


def main() -> None:
    num_layers = 32
    labels = ["quantization_friendly"] + ["sparsity_friendly"] * (num_layers - 1)
    seq_len, kv_heads, head_dim, d_s, n_topk = 131_072, 8, 128, 8, 128
    eb = 2
    prefetch = [
        [seq_len * d_s * kv_heads * eb if lab == "sparsity_friendly" else 0 for lab in labels]
    ]
    fetch = [
        [2 * n_topk * head_dim * kv_heads * eb if lab == "sparsity_friendly" else 0 for lab in labels]
    ]
    costs = LayerCosts(compute=tuple([1e-3] * num_layers), estimate=2e-5, score=5e-5)

    for name, link in (("4 GB/s link", PCIE_GEN1_X16), ("32 GB/s link", PCIE_GEN4_X16)):
        result = simulate(build_timeline(labels, costs, link, prefetch, fetch))
        compute = sum(parts["compute"] for parts in result.per_layer.values())
        transfer = sum(parts["transfer"] for parts in result.per_layer.values())
        print(
            f"{name}: step {result.total_seconds*1e3:7.3f} ms  "
            f"(compute {compute*1e3:.3f} ms, transfers {transfer*1e3:.3f} ms, "
            f"overlap {result.overlap_fraction:.0%}, stalls {result.stall_seconds*1e3:.3f} ms)"
        )


if __name__ == "__main__":
    main()
