"""The four correlation measures side by side, on a panel where we know the answer.

Each measure turns a window of prices into an N x N matrix that the graph
attention stage can use as its prior.  Here we compare what each one says
about the same leader/follower panel, and how a local (per-window) graph
drifts over time.
"""
import numpy as np

from dgt.corr import METRICS, correlation_matrix, delta_graph, top_correlated
from dgt.synthetic import planted_graph_matrix, planted_panel

panel = planted_panel(n_days=400, seed=3)
prices = panel.prices[:, :320]

# %% Global matrices
truth = planted_graph_matrix()
for metric in METRICS:
    m = correlation_matrix(metric, prices, panel.tickers)
    same = m.values[truth == 1].mean()
    other = m.values[truth == 0].mean()
    print(f"{metric:8s} mean within group {same:6.3f}   across groups {other:6.3f}")

# %% Who moves with L0?
for metric in METRICS:
    m = correlation_matrix(metric, prices, panel.tickers)
    print(f"{metric:8s}", ", ".join(f"{t} {v:.2f}" for t, v in top_correlated(m, "L0", 3)))

# %% Local graphs and their day-to-day change
# Two 64-day windows one day apart differ only slightly; the delta graph
# isolates that change.
a = correlation_matrix("kendall", panel.prices[:, 100:164], panel.tickers, (100, 164), "local")
b = correlation_matrix("kendall", panel.prices[:, 101:165], panel.tickers, (101, 165), "local")
delta = delta_graph(b, a, t=101)
print("largest |delta| entry:", float(np.abs(delta.values).max()))
