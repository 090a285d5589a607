"""Inside one differential graph attention head.

Each head computes two attention maps over the stocks of a single day.  The
first is gated element-wise by the prior graph, the second is scaled by a
learned balance lambda and subtracted.  This script checks the pieces by
hand: the value of lambda at initialization, the collapse to ordinary
attention when both maps coincide, and gradients against finite differences.
"""
import math

import numpy as np

from dgt import autodiff as ad
from dgt.autodiff import Tape
from dgt.model import ModelConfig, forward, graph_attention_heads, init_params, lambda_value

cfg = ModelConfig("dgt", n_stocks=4, window_len=6, d=8, heads=2)
params = init_params(cfg, seed=0)

# %% lambda starts at its offset
# The paired vectors are drawn equal, so the two exponentials cancel exactly.
print("lambda at init:", lambda_value(params.bind(Tape()), cfg).value)

# %% Tied maps collapse to scaled ordinary attention
dh = cfg.head_dim
for name in ("graph.0.wq", "graph.0.wk"):
    params.tensors[name][..., dh:] = params.tensors[name][..., :dh]
rng = np.random.default_rng(1)
x = rng.normal(size=(4, 8))
tape = Tape()
heads, lam = graph_attention_heads(tape.constant(x), np.ones((2, 4, 4)), params.bind(tape), cfg)
q = x @ params["graph.0.wq"][0][:, :dh]
k = x @ params["graph.0.wk"][0][:, :dh]
s = np.exp(q @ k.T / math.sqrt(dh))
plain = (s / s.sum(axis=1, keepdims=True)) @ (x @ params["graph.0.wv"][0])
print("max |head - (1 - lambda) * attention|:", np.abs(heads.value[0] - (1 - lam.value[0]) * plain).max())

# %% Gradients of the whole model
params = init_params(cfg, seed=2)
prices, target = rng.normal(size=(1, 4, 6)), rng.normal(size=(1, 4, 6))
graph = rng.uniform(-1, 1, size=(2, 4, 4))
names = list(params.tensors)


def loss(*leaves):
    t = leaves[0].tape
    return ad.mse(forward(t.constant(prices), graph, dict(zip(names, leaves)), cfg), t.constant(target))


print("relative gradient error vs central differences:",
      f"{ad.grad_check(loss, [params.tensors[n] for n in names]):.2e}")
