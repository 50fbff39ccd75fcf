"""Locate the oscillatory instability on a small box and trace the periodic branch.

Takes about half a minute on one core.
Run:  python3 demos/hopf_branch.py
"""
from fsihopf import bifurcation as bf
from fsihopf.discretization import MeshSpec, build_mesh
from fsihopf.model import Params

mesh = build_mesh(MeshSpec(box=(-6.0, 3.0, -3.0, 3.0), h=0.25))
hp = bf.locate_crossing((40.0, 60.0), Params(lam=40.0, omega_n_sq=1.0, varpi=1.0), mesh)
print(f"crossing at lam0 = {hp.lambda0:.5f}, frequency {hp.zeta0:.4f}, "
      f"crossing speed {hp.crossing.nu_prime:.4f}")

bs = bf.BranchSystem(hp, K_trunc=6)
br = bf.trace_branch(bs, [-0.04, -0.02, -0.01, 0.01, 0.02, 0.04])
print(f"{'eps':>7} {'mu':>12} {'mu/eps^2':>9} {'zeta':>10} {'newton':>6}")
for p in br.points:
    print(f"{p.epsilon:7.3f} {p.mu:12.4e} {p.mu / p.epsilon ** 2:9.4f} {p.zeta:10.5f} {p.iterations:6d}")
print("branch is", br.classification)
