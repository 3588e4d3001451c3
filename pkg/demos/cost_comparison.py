"""Prefix tokens vs routed cross-attention: where the flops and cache bytes go.

Run: python demos/cost_comparison.py
"""

from slidecompress.cost_model import CostScenario, compare, instrumented_flops

report = compare(CostScenario.paper())
for metric, llava, cara, pct in report.csv_rows():
    print(f"{metric:15s} prefix {int(llava):>16,d}  routed {int(cara):>16,d}  -{float(pct):.1f}%")

print("\nvision encoder flops after s x s merging:")
for row in report.stm_table:
    print(f"  window {row['window']}: {row['tokens']:6d} tokens, -{row['reduction_percent']:.1f}%")

# the closed forms match a counted forward pass of a small decoder
toy = CostScenario.toy()
for style in ("llava", "cara"):
    pre, dec = instrumented_flops(toy, style)
    print(f"toy {style}: counted prefill {pre:,d}, decode {dec:,d}")
