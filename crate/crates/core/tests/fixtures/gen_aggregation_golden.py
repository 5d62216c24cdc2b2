"""Regenerates aggregation_golden.json with 50-digit arithmetic.

Straight-line evaluation: origin lift, Lorentzian distance to the lifted
row mean, softmax over negative distances, weighted sum, lift.
"""
import json

from mpmath import acosh, cosh, exp, mp, mpf, sinh, sqrt

mp.dps = 50
rows = [(mpf(1), mpf(0)), (mpf(0), mpf(1)), (mpf(10), mpf(10))]
c = mpf(1)


def lift(v):
    n = sqrt(sum(x * x for x in v))
    r = sqrt(c) * n
    s = sinh(r) / r if r != 0 else mpf(1)
    return [s * x for x in v] + [cosh(r) / sqrt(c)]


def inner(u, v):
    return sum(a * b for a, b in zip(u[:-1], v[:-1])) - u[-1] * v[-1]


def dist(u, v):
    return acosh(-c * inner(u, v)) / sqrt(c)


mean = [sum(r[i] for r in rows) / len(rows) for i in range(2)]
anchor = lift(mean)
ds = [dist(lift(r), anchor) for r in rows]
e = [exp(-d) for d in ds]
w = [x / sum(e) for x in e]
pooled = [sum(w[k] * rows[k][i] for k in range(len(rows))) for i in range(2)]
root = lift(pooled)
out = {
    "rows": [[float(x) for x in r] for r in rows],
    "alpha": 1.0,
    "c": 1.0,
    "distances": [float(x) for x in ds],
    "weights": [float(x) for x in w],
    "pooled": [float(x) for x in pooled],
    "root": [float(x) for x in root],
}
with open("aggregation_golden.json", "w") as f:
    json.dump(out, f, indent=2)
