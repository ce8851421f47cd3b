"""Scratch: calibrate SMIC training budget/thresholds for the fusion oracle."""
import time

import numpy as np

from spikegraph.fusion import SmicNet, make_joint, make_marginal, mi_lower_bound
from spikegraph.module import Adam
from spikegraph.neurons import LifConfig
from spikegraph.tensor import Tape, Tensor, backward, scale

S, D, V, T, B = 4, 4, 3, 6, 64
LIF = LifConfig()


def draw_stream(rng, copied):
    rates = rng.choice([0.25, 0.75], size=(B, S))
    pa = (rng.uniform(size=(S, B, D, V, T)) < rates.T[:, :, None, None, None]).astype(np.float32)
    if copied:
        pb = pa.copy()
    else:
        rates_b = rng.choice([0.25, 0.75], size=(B, S))
        pb = (rng.uniform(size=(S, B, D, V, T)) < rates_b.T[:, :, None, None, None]).astype(np.float32)
    return Tensor(pa), Tensor(pb)


def run(copied, seed, steps, lr=3e-3, hidden=32, gain=1.0, forget_bias=0.0):
    rng = np.random.default_rng(seed)
    net = SmicNet(2 * D, hidden, LIF, np.random.default_rng(seed + 1000))
    net.w_ih.data *= gain
    net.w_hh.data *= gain
    net.b_ih.data[hidden:2 * hidden] = forget_bias
    opt = Adam(net.parameters(), lr=lr)
    for step in range(steps):
        pa, pb = draw_stream(rng, copied)
        with Tape() as tape:
            t_vals = net(make_joint(pa, pb))
            et_vals = net(make_marginal(pa, pb, seed * 100000 + step), exponential=True)
            bound = mi_lower_bound(t_vals, et_vals)
            backward(scale(bound, -1.0), tape)
        opt.step()
        opt.zero_grad()
    # eval on fresh batches
    evals = []
    for k in range(5):
        pa, pb = draw_stream(rng, copied)
        t_vals = net(make_joint(pa, pb))
        et_vals = net(make_marginal(pa, pb, seed * 999983 + k), exponential=True)
        evals.append(float(mi_lower_bound(t_vals, et_vals).data))
    return float(np.mean(evals))


for gain, fb in ((2.0, 1.0), (3.0, 1.0), (4.0, 1.0)):
    t0 = time.time()
    for steps in (150,):
        for seed in (0, 1, 2):
            ind = run(False, seed, steps, gain=gain, forget_bias=fb)
            cop = run(True, seed, steps, gain=gain, forget_bias=fb)
            print(f"gain={gain} fb={fb} steps={steps} seed={seed}: "
                  f"independent={ind:+.3f} copied={cop:+.3f} gap={cop-ind:+.3f}")
    print(f"  ({time.time()-t0:.1f}s)")
