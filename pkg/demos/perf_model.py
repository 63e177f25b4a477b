"""Explore the analytic compute/communication model.

Run: python3 demos/perf_model.py
"""

from caatsim import perf

# A mid-size layer: hidden 768, sequence 1024, eight-way tensor parallel,
# 1000 FLOPs of compute capacity per communicated element.
h, s, r, c = 768, 1024, 8, 1000

print(f"h={h}, s={s}, tensor-parallel r={r}, capacity C={c} FLOP/element\n")
print(f"{'p':>5s} {'compute G':>14s} {'payload P':>12s} {'time T':>14s} {'speedup':>8s}")
for p in [0.0, 0.25, 0.5, 0.75, 1.0]:
    print(
        f"{p:5.2f} {perf.gemm_ops(h, s, r):14.3e} {perf.payload(h, s, p):12.3e} "
        f"{perf.total_time(h, s, r, c, p):14.3e} {perf.speedup(h, s, r, c, p):8.4f}"
    )

print("\ncomponent view of G:", perf.gemm_ops_breakdown(h, s, r))

# p* is the largest synchronization factor whose payload still hides
# behind compute; beyond the clamp there is no reason to shrink p.
for r_i in (4, 8, 16, 32):
    print(f"r={r_i:2d}: p* = {perf.optimal_p(h, s, r_i, c):.4f}")

caat, mask = perf.mask_comm_reduction(0.5)
print(f"\nat p=0.5, partial channel-reduce cuts total TP traffic by {caat:.0%};")
print(f"a forward-only mask cuts it by {mask:.1%} (reduce-scatter half of one pass).")
