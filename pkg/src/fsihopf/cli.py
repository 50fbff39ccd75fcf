"""Command line entry point.

    fsihopf <subcommand> [--config FILE] [--set section.key=value ...] [--out DIR]

Subcommands: steady, thresholds, evolve, spectrum, resonance, periodic,
branch, pipeline.  Every run writes ``effective.cfg`` (the merged
configuration) into the output directory; running again from that file
reproduces the numeric outputs.  Exit codes: 0 ok, 2 invalid input,
3 solver failure, 64 unknown subcommand.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .discretization import MeshSpec, build_mesh
from .discretization.snapshot import atomic_write_text
from .model import Params, SolverError, ValidationError, format_config, parse_config_text, read_config, validate

SUBCOMMANDS = ("steady", "thresholds", "evolve", "spectrum", "resonance", "periodic", "branch", "pipeline")
OUT_ENV = "FSIHOPF_OUT"

SCHEMA = {
    "params": {"lam": ("float", 1.0), "omega_n_sq": ("float", 1.0), "varpi": ("float", 1.0)},
    "mesh": {"box": ("floats", (-16.0, 8.0, -8.0, 8.0)), "body": ("floats", (-0.5, 0.5, -0.5, 0.5)),
             "h": ("float", 0.25), "outflow": ("str", "natural")},
    "solver": {"tol": ("float", 1e-10), "max_iter": ("int", 30), "seed": ("int", 0)},
    "output": {"dir": ("str", "out")},
    "evolve": {"T": ("float", 10.0), "dt": ("float", 0.02), "amplitude": ("float", 0.1),
               "linear": ("bool", False)},
    "spectrum": {"shifts_im": ("floats", (0.0,)), "shift_re": ("float", 0.0), "n": ("int", 6)},
    "resonance": {"k_min": ("int", 1), "k_max": ("int", 16), "varpi": ("floats", (0.0, 1e-2, 0.5)),
                  "zeta0": ("float", 1.0)},
    "periodic": {"k_trunc": ("int", 8), "zeta": ("float", 1.0), "amplitude": ("float", 1e-3)},
    "branch": {"lambda_min": ("float", 40.0), "lambda_max": ("float", 60.0), "k_trunc": ("int", 6),
               "eps": ("floats", (-0.04, -0.02, -0.01, 0.01, 0.02, 0.04))},
}

log = logging.getLogger("fsihopf")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

def _apply_overrides(cfg: dict, items) -> dict:
    if not items:
        return cfg
    lines = {}
    for item in items:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValidationError(f"override must look like section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        sec, key = k.split(".", 1)
        lines.setdefault(sec, []).append(f"{key} = {v}")
    text = "\n".join(f"[{sec}]\n" + "\n".join(body) for sec, body in lines.items())
    over = parse_config_text(text, SCHEMA, source="--set")
    for sec, body in lines.items():
        for line in body:
            key = line.split("=", 1)[0].strip()
            cfg[sec][key] = over[sec][key]
    return cfg


def load_run_config(path, overrides=(), out=None) -> dict:
    cfg = read_config(path, SCHEMA) if path else parse_config_text("", SCHEMA)
    cfg = _apply_overrides(cfg, overrides)
    env = os.environ.get(OUT_ENV)
    if env and not out:
        cfg["output"]["dir"] = env
    if out:
        cfg["output"]["dir"] = str(out)
    return cfg


def params_of(cfg) -> Params:
    p = cfg["params"]
    return Params(lam=p["lam"], omega_n_sq=p["omega_n_sq"], varpi=p["varpi"])


def mesh_of(cfg):
    m = cfg["mesh"]
    return build_mesh(MeshSpec(box=tuple(m["box"]), body=tuple(m["body"]), h=m["h"], outflow=m["outflow"]))


class Run:
    """Output directory, effective config echo and JSON writer for one invocation."""

    def __init__(self, cfg: dict, command: str):
        self.cfg = cfg
        self.command = command
        self.dir = Path(cfg["output"]["dir"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config_text = format_config(cfg)
        self.hash = hashlib.sha256(self.config_text.encode()).hexdigest()
        atomic_write_text(self.dir / "effective.cfg", self.config_text)

    def write_json(self, name: str, data: dict) -> Path:
        payload = {"version": __version__, "config_hash": self.hash, "command": self.command, **data}
        path = self.dir / name
        atomic_write_text(path, json.dumps(_plain(payload), indent=2, sort_keys=True, ensure_ascii=False) + "\n")
        return path


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, complex):
        return [x.real, x.imag]
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    return x


# ---------------------------------------------------------------------------
# workflows

def _steady(cfg, run: Run, sensitivity=False):
    from .steady import save_state, solve_steady
    p = params_of(cfg)
    validate(p)
    mesh = mesh_of(cfg)
    s = solve_steady(p, mesh, tol=cfg["solver"]["tol"], max_iter=cfg["solver"]["max_iter"],
                     sensitivity=sensitivity)
    info = save_state(s, run.dir / "steady")
    return s, info


def _thresholds_of(s):
    from .steady import compute_thresholds
    th = compute_thresholds(s)
    return th, th.as_dict()


def cmd_steady(cfg, run):
    s, info = _steady(cfg, run)
    _, th = _thresholds_of(s)
    summary = {"lambda": s.params.lam, "chi0": info["chi0"], "drag": info["drag"], "residual": s.residual,
               "lambda1": th["lambda1"], "lambda2": th["lambda2"], "snapshot": str(run.dir / "steady")}
    run.write_json("summary.json", summary)
    return summary


def cmd_thresholds(cfg, run):
    from .steady import check_H1prime
    s, _ = _steady(cfg, run)
    th, d = _thresholds_of(s)
    d.update({"lambda": s.params.lam, "ordered": th.ordered(), "gamma": th.gamma(s.params.lam),
              "H1": check_H1prime(s).as_dict()})
    run.write_json("thresholds.json", d)
    return d


def cmd_evolve(cfg, run):
    from .evolution import decay_metrics, evolve, initial_state
    s, _ = _steady(cfg, run)
    p = s.params
    e = cfg["evolve"]
    rng = np.random.default_rng(cfg["solver"]["seed"])
    u = rng.standard_normal(s.mesh.nz)
    st0 = initial_state(s.mesh, p, u=u, chidot=rng.standard_normal(2))
    scale = e["amplitude"] / max(np.linalg.norm(st0.z) / np.sqrt(s.mesh.nz), 1e-300)
    st0.z *= scale
    _, elog, _ = evolve(st0, s, p, e["T"], e["dt"], linear=e["linear"])
    elog.to_csv(run.dir / "energy.csv")
    th, _ = _thresholds_of(s)
    m = decay_metrics(elog, p, th)
    run.write_json("evolve.json", {"lambda": p.lam, "steps": len(elog) - 1, "metrics": m,
                                   "energy_csv": str(run.dir / "energy.csv")})
    return m


def cmd_spectrum(cfg, run):
    from .spectral import assemble_linearization, eigs
    s, _ = _steady(cfg, run)
    L = assemble_linearization(s)
    sp_ = cfg["spectrum"]
    seen = []
    for im in sp_["shifts_im"]:
        for ep in eigs(L, sp_["shift_re"] + 1j * im, sp_["n"]):
            if not any(abs(ep.nu - q.nu) < 1e-9 * max(1.0, abs(ep.nu)) for q in seen):
                seen.append(ep)
    seen.sort(key=lambda e: (e.nu.real, e.nu.imag))
    rows = ["re_nu,im_nu,growth,residual"] + [f"{e.nu.real!r},{e.nu.imag!r},{e.growth!r},{e.residual!r}"
                                              for e in seen]
    atomic_write_text(run.dir / "spectrum.csv", "\n".join(rows) + "\n")
    out = {"lambda": s.params.lam, "count": len(seen),
           "least_stable": [seen[0].nu.real, seen[0].nu.imag] if seen else None}
    run.write_json("spectrum.json", out)
    return out


def cmd_resonance(cfg, run):
    from .periodic import resonance_scan, scan_to_csv
    r = cfg["resonance"]
    p = params_of(cfg)
    mesh = mesh_of(cfg)
    if r["k_min"] < 1 or r["k_max"] < r["k_min"]:
        raise ValidationError("resonance needs 1 <= k_min <= k_max")
    rows = resonance_scan(range(r["k_min"], r["k_max"] + 1), r["varpi"], r["zeta0"], p, mesh)
    atomic_write_text(run.dir / "resonance.csv", scan_to_csv(rows))
    out = {"rows": len(rows), "min_sigma": min(row["sigma_min"] for row in rows)}
    run.write_json("resonance.json", out)
    return out


def cmd_periodic(cfg, run):
    from .periodic import HarmonicSystem, newton_harmonic, random_modes
    s, _ = _steady(cfg, run)
    pr = cfg["periodic"]
    hs = HarmonicSystem(s, pr["k_trunc"])
    rng = np.random.default_rng(cfg["solver"]["seed"])
    X0 = random_modes(hs, rng, pr["amplitude"])
    res = newton_harmonic(hs, X0, pr["zeta"], tol=cfg["solver"]["tol"], max_iter=cfg["solver"]["max_iter"])
    out = {"lambda": s.params.lam, "zeta": res.zeta, "norm": res.norm, "residual": res.residual,
           "iterations": res.iterations, "trivial": res.trivial,
           "mode_norms": [float(np.sqrt(np.sum(hs.L.Bdiag * np.abs(x) ** 2))) for x in res.X]}
    run.write_json("periodic.json", out)
    return out


def _branch(cfg, run, report: dict):
    from .bifurcation import BranchSystem, full_periodic_residual, locate_crossing, trace_branch
    b = cfg["branch"]
    p = params_of(cfg)
    mesh = mesh_of(cfg)
    hopf = locate_crossing((b["lambda_min"], b["lambda_max"]), p, mesh)
    report["hopf"] = hopf.as_dict()
    bs = BranchSystem(hopf, b["k_trunc"])
    br = trace_branch(bs, b["eps"])
    for bp in br.points:
        bp.residuals["full_periodic"] = full_periodic_residual(bs, bp)["max"]
    report["branch"] = json.loads(br.to_json(Bd=bs.Bd))
    atomic_write_text(run.dir / "branch.json", json.dumps(_plain({"version": __version__,
                                                                   "config_hash": run.hash,
                                                                   **report["branch"]}),
                                                          indent=2, sort_keys=True) + "\n")
    return report


def cmd_branch(cfg, run):
    report = _branch(cfg, run, {})
    run.write_json("report.json", report)
    return report


def cmd_pipeline(cfg, run):
    report = {"steady": cmd_steady(cfg, run), "thresholds": cmd_thresholds(cfg, run)}
    _branch(cfg, run, report)
    run.write_json("report.json", report)
    return report


COMMANDS = {"steady": cmd_steady, "thresholds": cmd_thresholds, "evolve": cmd_evolve,
            "spectrum": cmd_spectrum, "resonance": cmd_resonance, "periodic": cmd_periodic,
            "branch": cmd_branch, "pipeline": cmd_pipeline}


def _parser():
    ap = argparse.ArgumentParser(prog="fsihopf", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="key=value configuration file")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override a configuration value (repeatable)")
    ap.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and [output] dir)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
        print(f"fsihopf: unknown subcommand {argv[0]!r} (choose from {', '.join(SUBCOMMANDS)})",
              file=sys.stderr)
        return 64
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args.set, args.out)
        r = Run(cfg, args.command)
        COMMANDS[args.command](cfg, r)
    except ValidationError as exc:
        print(f"fsihopf: error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"fsihopf: solver failure: {exc}", file=sys.stderr)
        return 3
    return 0


def main():
    sys.exit(run())
