"""Steady flow past the body, spring displacement and the two energy thresholds.

Run:  python3 demos/steady_and_thresholds.py
"""
import numpy as np

from fsihopf.discretization import MeshSpec, build_mesh
from fsihopf.model import Params
from fsihopf.steady import compute_thresholds, solve_steady

mesh = build_mesh(MeshSpec(box=(-6.0, 3.0, -3.0, 3.0), h=0.25))
print(f"mesh {mesh.nx} x {mesh.ny}, {mesh.nz} coupled unknowns")

guess = None
print(f"{'lam':>6} {'chi0_x':>10} {'chi0_y':>10} {'lambda1':>9} {'lambda2':>9}")
for lam in (0.5, 1.0, 2.0, 5.0, 10.0):
    s = solve_steady(Params(lam=lam, omega_n_sq=4.0, varpi=0.5), mesh, initial_guess=guess)
    guess = s
    th = compute_thresholds(s)
    print(f"{lam:6.2f} {s.chi0[0]:10.5f} {s.chi0[1]:10.1e} {th.lambda1:9.4f} {th.lambda2:9.4f}")

# the spring balances the fluid force exactly
F = s.force()
print("closure residual", np.max(np.abs(s.params.omega_n_sq * s.chi0 + s.params.varpi * F)))
