#!/usr/bin/env python3
"""Print the closed-form cache-memory comparison at long-context scale.

Covers a 512k-token 32-layer MHA model (where the full cache reaches
256 GiB) and a 128k-token grouped-query model, for the full cache, the
token-budget and paged baselines, and both hybrid rows.

Usage: python3 scripts/memory_table.py
"""

from hybridkv.memsim import FootprintMethod, compression_factor, memory_footprint


def gib(nbytes: float) -> str:
    return f"{nbytes / 2**30:9.3f} GiB"


def main() -> None:
    print("512k tokens, 32 layers, 32 KV heads, head_dim 128 (MHA):")
    common = dict(seq_len=524_288, num_kv_heads=32, head_dim=128)
    original = memory_footprint(FootprintMethod.ORIGINAL, num_layers=32, **common)
    print(f"  full cache          {gib(original)}  ({original:,} bytes)")
    print(
        f"  token budget 25%    {gib(memory_footprint(FootprintMethod.SNAPKV, num_layers=32, alpha=0.25, **common))}"
    )
    print(
        f"  paged, page 16      {gib(memory_footprint(FootprintMethod.QUEST, num_layers=32, beta=16, **common))}"
    )
    q2 = memory_footprint(
        FootprintMethod.HYBRID_QUANT, num_quant_layers=2, bits=1, group_size=64, **common
    )
    s30 = 30 * memory_footprint(
        FootprintMethod.HYBRID_SPARSE, num_critical_channels=8, **common
    )
    print(f"  hybrid (2 Q layers) {gib(q2 + s30)}  = quantized {gib(q2)} + sparse buffers {gib(s30)}")
    print(
        f"  per-layer shrink of a 1-bit g=64 quantized layer: "
        f"{compression_factor(1, 64)} = {float(compression_factor(1, 64)):.2f}x"
    )

    print()
    print("128k tokens, 32 layers, 8 KV heads, head_dim 128 (grouped queries):")
    common = dict(seq_len=131_072, num_kv_heads=8, head_dim=128)
    original = memory_footprint(FootprintMethod.ORIGINAL, num_layers=32, **common)
    q1 = memory_footprint(
        FootprintMethod.HYBRID_QUANT, num_quant_layers=1, bits=1, group_size=64, **common
    )
    s31 = 31 * memory_footprint(
        FootprintMethod.HYBRID_SPARSE, num_critical_channels=8, **common
    )
    print(f"  full cache          {gib(original)}")
    print(f"  hybrid (1 Q layer)  {gib(q1 + s31)}")
    print(f"  reduction           {1 - (q1 + s31) / original:.1%}")


if __name__ == "__main__":
    main()
