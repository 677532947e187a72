"""
Cost against sequence length
============================

One Mamba layer does a fixed amount of work per position. Causal attention
compares every position with every earlier one. Both show up in multiply-add
counts before they show up in wall time.
"""

from ssm4rec.bench import run_bench

res = run_bench(lengths=(32, 64, 128, 256, 512), batch=2, d_model=32, state_dim=16, reps=3,
                fit_min=64, fit_max=512)
print(res.markdown())

# %%
# Doubling L doubles the layer's multiply-adds exactly; attention grows faster than that.
for L, m, a in zip(res.lengths[1:], res.mamba_macs[1:], res.attention_macs[1:]):
    prev = res.lengths.index(L) - 1
    print(f"L={L:4d}  mamba x{m / res.mamba_macs[prev]:.2f}  attention x{a / res.attention_macs[prev]:.2f}")
