"""Perturb the steady state at half the energy threshold and watch the energy decay.

Run:  python3 demos/decay_below_threshold.py [out.csv]
"""
import sys

import numpy as np

from fsihopf import evolution as ev
from fsihopf.discretization import MeshSpec, build_mesh, operators
from fsihopf.model import Params
from fsihopf.steady import compute_thresholds, solve_steady

mesh = build_mesh(MeshSpec(box=(-6.0, 3.0, -3.0, 3.0), h=0.25))
p = Params(lam=1.0, omega_n_sq=4.0, varpi=0.5)
# lambda2 depends on the state, so iterate lam = lambda2(lam) / 2
for _ in range(6):
    s = solve_steady(p, mesh)
    th = compute_thresholds(s)
    p = p.replace(lam=0.5 * th.lambda2)
s = solve_steady(p, mesh)
th = compute_thresholds(s)
print(f"lam = {p.lam:.4f}, lambda2 at this state = {th.lambda2:.4f}")

rng = np.random.default_rng(0)
u = operators(mesh).project(rng.standard_normal(mesh.nz), p.varpi)[0]
st = ev.initial_state(mesh, p, u=0.01 * u, chi=np.array([0.01, -0.02]))
final, log, _ = ev.evolve(st, s, p, 20.0, 0.04)
t, E = log.arrays()["t"], log.arrays()["E"]
for k in range(0, len(t), 50):
    print(f"t = {t[k]:6.2f}  E = {E[k]:.3e}")
m = ev.decay_metrics(log, p, th)
print(f"slope of log E {m['rate']:.3f}, monotone after transient: {m['eventually_monotone']}")
if len(sys.argv) > 1:
    log.to_csv(sys.argv[1])
