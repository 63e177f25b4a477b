"""Walk through the partial channel-reduce collective and its accounting.

Run: python3 demos/partial_reduce_basics.py
"""

import numpy as np

from caatsim.collectives import (
    CommLedger,
    PartialReduceSpec,
    RankSet,
    all_reduce,
    partial_channel_reduce,
)

# Two simulated ranks, one token each, hidden size 4.
rank0 = np.array([[1.0, 2.0, 3.0, 4.0]])
rank1 = np.array([[10.0, 20.0, 30.0, 40.0]])
rs = RankSet([rank0, rank1])

print("per-rank inputs:")
print("  rank0:", rank0[0])
print("  rank1:", rank1[0])

# A full all-reduce leaves every rank with the sum.
full = all_reduce(rs)
print("\nfull all-reduce -> every rank holds", full[0][0])

# With p=0.5 only the first floor(4 * 0.5) = 2 channels are summed and
# replicated; the final two channels stay private to each rank.
spec = PartialReduceSpec(p=0.5, h=4)
ledger = CommLedger()
partial = partial_channel_reduce(rs, spec, ledger=ledger)
print(f"\npartial reduce at p=0.5 (shared_count={spec.shared_count}):")
print("  rank0:", partial[0][0], " <- shared sums, private kept")
print("  rank1:", partial[1][0])

# The ledger counts elements sent plus received per rank: one token,
# two shared channels -> 2 * 1 * 2 = 4 elements, versus 8 for the full
# all-reduce.
print("\nledger after one partial reduce:")
print(ledger.to_csv())

# Private channels have half the variance of shared ones (one addend
# instead of two); scaling them by sqrt(2) evens the channels out.
rng = np.random.default_rng(0)
big = RankSet([rng.standard_normal((100_000, 4)) for _ in range(2)])
plain = partial_channel_reduce(big, PartialReduceSpec(p=0.5, h=4))
scaled = partial_channel_reduce(
    big, PartialReduceSpec(p=0.5, h=4, scale_private=True, r=2)
)
print("variance ratio shared/private without scaling:",
      round(float(np.var(plain[0][:, :2]) / np.var(plain[0][:, 2:])), 3))
print("variance ratio shared/private with sqrt(2) scaling:",
      round(float(np.var(scaled[0][:, :2]) / np.var(scaled[0][:, 2:])), 3))
