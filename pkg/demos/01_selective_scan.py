"""
A selective scan, step by step
==============================

A diagonal linear recurrence h_t = a_t * h_(t-1) + b_t, read out through c_t,
where every coefficient may depend on the input at step t.
"""

import numpy as np

from ssm4rec import numerics as nx
from ssm4rec.ssm import discretize, init_state_matrix, scan_chunked, scan_loop, selective_scan

nx.set_default_dtype(np.float64)
rng = np.random.default_rng(0)

# The continuous state matrix is diagonal and negative: -1, -2, ..., -N per channel.
sm = init_state_matrix(channels=3, state_dim=4)
print("A for channel 0:", sm.A[0])

# A larger step size forgets faster. With delta = log 2 the first mode halves each step.
a_bar, b_bar = discretize(np.full((1, 1, 3), np.log(2)), sm.A, np.ones((1, 1, 4)))
print("A-bar for channel 0:", a_bar.data[0, 0, 0].round(4))

# %%
# Running the recurrence: a plain loop and the chunked tree scan give the same states.
a = rng.uniform(0.0, 1.0, (2, 300, 5))
b = rng.standard_normal((2, 300, 5))
h_loop = scan_loop(a, b)
h_tree = scan_chunked(a, b)
print("max |loop - tree|:", np.abs(h_loop - h_tree).max())

# %%
# The fused op discretizes and scans in one pass. Here is the input-dependent part:
# a spike on one input at step 10 should only change outputs from step 10 on.
B, L, C, N = 1, 30, 3, 4
x = rng.standard_normal((B, L, C))
delta = rng.uniform(0.1, 1.0, (B, L, C))
b_in, c_in = rng.standard_normal((B, L, N)), rng.standard_normal((B, L, N))
y = selective_scan(x, delta, sm.A, b_in, c_in).data
x[:, 10] += 5.0
y2 = selective_scan(x, delta, sm.A, b_in, c_in).data
changed = np.abs(y2 - y).max(axis=(0, 2)) > 0
print("first changed step:", int(np.argmax(changed)), "| steps before it untouched:", not changed[:10].any())

# %%
# Shrinking delta at one step makes the state keep its memory and nearly ignore that input.
delta[:, 20] = 1e-4
y3 = selective_scan(x, delta, sm.A, b_in, c_in).data
x[:, 20] += 5.0
y4 = selective_scan(x, delta, sm.A, b_in, c_in).data
print("effect of a +5 input at a tiny step:", float(np.abs(y4[:, 20] - y3[:, 20]).max()))
