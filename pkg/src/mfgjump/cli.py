"""Command-line interface: ``mfgjump <command> --scenario FILE [options]``.

Commands write ``manifest.json``, CSV outputs and ``summary.txt`` into
``--out``.  Exit codes: 0 all checks pass, 1 a check failed, 2 configuration
error, 3 solver or internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import checks
from .basis import bundle_state, simulate_bundle
from .errors import ConfigurationError, MfgJumpError, SolverError
from .scenario import load_scenario
from .stats import estimate

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


class Run:
    """Collects CSV tables, checks and diagnostics for one invocation."""

    def __init__(self, out: Path):
        self.out = out
        self.tables: dict[str, tuple] = {}
        self.checks: list = []
        self.diagnostics: dict = {}

    def table(self, name, header, rows):
        self.tables[name] = (list(header), [list(r) for r in rows])

    def write(self, sc, args, started):
        self.out.mkdir(parents=True, exist_ok=True)
        digests = {}
        for name, (header, rows) in self.tables.items():
            path = self.out / name
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for r in rows:
                    w.writerow([_fmt(v) for v in r])
            digests[name] = hashlib.sha256(path.read_bytes()).hexdigest()
        if self.checks:
            path = self.out / "checks.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["suite", "name", "value", "threshold", "passed", "detail"])
                for c in self.checks:
                    w.writerow([c.suite, c.name, _fmt(c.value), _fmt(c.threshold), _fmt(c.passed), c.detail])
            digests["checks.csv"] = hashlib.sha256(path.read_bytes()).hexdigest()
        lines = [f"scenario: {sc.name}", f"command: {args.command}", f"seed: {args.seed}",
                 f"backend: {sc.solver.backend}"]
        for k in sorted(self.diagnostics):
            lines.append(f"{k}: {_fmt(self.diagnostics[k])}")
        lines += [c.line() for c in self.checks]
        n_fail = sum(not c.passed for c in self.checks)
        lines.append(f"result: {'PASS' if n_fail == 0 else 'FAIL'} ({len(self.checks) - n_fail}/{len(self.checks)} checks)")
        (self.out / "summary.txt").write_text("\n".join(lines) + "\n")
        manifest = {
            "command": args.command,
            "scenario_source": sc.source,
            "scenario": sc.raw,
            "seed": args.seed,
            "backend": sc.solver.backend,
            "solver": dict(sc.solver.__dict__),
            "oracle": dict(sc.oracle.__dict__),
            "workers": args.workers,
            "versions": _versions(),
            "wall_time_s": round(time.perf_counter() - started, 3),
            "outputs": digests,
            "checks_passed": n_fail == 0,
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_fmt) + "\n")
        return EXIT_OK if n_fail == 0 else EXIT_CHECK


def _versions():
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "mfgjump": pkg}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_simulate(sc, args, run: Run):
    s = sc.solver
    from .projection import sample_types

    types = sample_types(sc.laws, s.agents, args.seed)
    b = simulate_bundle(sc.grid, sc.jumps, sc.market.d, s.paths, s.agents, args.seed,
                        extra_state=types.state(), workers=args.workers)
    n, dt = sc.grid.n_steps, sc.grid.dt
    P, M, K = b.n_paths, b.n_agents, b.n_atoms
    rows = []
    for k in range(K):
        common = bool(sc.jumps.common[k])
        counts = b.common_counts[..., k] if common else b.idio_counts[..., k]
        per_path = counts.reshape(P, -1, n).sum(axis=-1)  # (P, 1 or M)
        comp = np.zeros((P, 1 if common else M))
        for i in range(n):
            st = bundle_state(b, i, sc.jumps.loss_sizes, types.state())
            r = sc.jumps.rates(i * dt, st, (P, M, K))[..., k] * dt
            comp += r[:, :1] if common else r
        e = estimate(per_path - comp, axis_clusters=True)
        rows.append((k, "common" if common else "idiosyncratic", float(per_path.mean()), float(comp.mean()), e.se))
        run.checks.append(checks._le("simulate", f"compensator[atom{k}]", abs(e.mean), max(4 * e.se, 1e-12),
                                     f"counts {per_path.mean():.6g} compensator {comp.mean():.6g}"))
    run.table("jump_counts.csv", ["atom", "split", "mean_count", "mean_compensator", "se"], rows)
    for j in range(b.d):
        e = estimate(b.dW[..., j].sum(axis=1))
        run.checks.append(checks._le("simulate", f"brownian_mean[{j}]", abs(e.mean), 4 * e.se))
        v = estimate(b.dW[..., j].sum(axis=1) ** 2)
        run.checks.append(checks._le("simulate", f"brownian_var[{j}]", abs(v.mean - sc.grid.horizon), 4 * v.se))
    W = b.w_levels()
    rows = [(i, j, float(W[:, i, j].mean()), float(W[:, i, j].var())) for i in range(n + 1) for j in range(b.d)]
    run.table("brownian.csv", ["node", "coord", "mean_w", "var_w"], rows)
    ev = b.events
    run.table("events.csv", ["path", "agent", "cell", "atom", "time"],
              ((int(e["path"]), int(e["agent"]), int(e["cell"]), int(e["atom"]), float(e["time"])) for e in ev))
    run.diagnostics.update({"paths": P, "agents": M, "events": len(ev)})


def _lattice_reference_rows(model, eq):
    dist = model.distributions()
    rows = []
    for t, ref in enumerate(eq.references):
        a, r = eq.types.alpha[t], eq.types.rho[t]
        th = ref.theta_star()
        for i in range(model.n_steps):
            p = dist[i]
            row = [a, r, i, float(np.sum(p * ref.Y[i])), float(np.sum(p * np.abs(ref.Z[i]))), float(np.sum(p * th[i]))]
            for k in range(model.n_atoms):
                row.append(float(np.sum(p * ref.U[i, k])))
            rows.append(row)
    return rows


def cmd_solve_single(sc, args, run: Run):
    K = sc.jumps.n_atoms
    header = ["alpha", "rho", "cell", "y_mean", "abs_z_mean", "theta_mean"] + [f"u_mean_atom{k}" for k in range(K)]
    if sc.solver.backend == "lattice":
        model, eq = checks.lattice_equilibrium(sc)
        run.table("reference.csv", header, _lattice_reference_rows(model, eq))
        for t, ref in enumerate(eq.references):
            run.diagnostics[f"y0[alpha={eq.types.alpha[t]:g},rho={eq.types.rho[t]:g}]"] = ref.y0
            run.diagnostics[f"bmo_energy[alpha={eq.types.alpha[t]:g},rho={eq.types.rho[t]:g}]"] = ref.diagnostics["bmo_energy"]
            u_bound = 2 * ref.diagnostics["terminal_oscillation"]
            run.checks.append(checks._le("solve_single", f"u_bound[alpha={eq.types.alpha[t]:g}]",
                                         ref.diagnostics["max_abs_u"], u_bound + 1e-12, "sup|U| vs 2 osc(terminal)"))
            run.checks.append(checks._le("solve_single", f"terminal_mismatch[alpha={eq.types.alpha[t]:g}]",
                                         ref.diagnostics["terminal_mismatch"], 1e-12))
        run.checks.extend(checks.identity_suite(sc, args.seed, args.workers))
    else:
        mc = _lsmc(sc, args)
        ref, types = mc.reference, mc.population.types
        rows = []
        th = mc.theta_b[..., 0]
        for a, r in _type_pairs(types):
            sel = (types.alpha == a) & (types.rho == r)
            for i in range(sc.grid.n_steps):
                row = [a, r, i, float(ref.Y[:, sel, i].mean()), float(np.abs(ref.Z[:, sel, i]).mean()),
                       float(th[:, sel, i].mean())]
                row += [float(ref.U[:, sel, i, k].mean()) for k in range(K)]
                rows.append(row)
        run.table("reference.csv", header, rows)
        run.diagnostics.update({"y0": ref.y0, "y0_se": ref.diagnostics["y0_se"],
                                "ridge_fallbacks": len(ref.diagnostics["ridge_fallbacks"])})
        run.checks.append(_check_finite("solve_single", "finite", ref.Y))


def _check_finite(suite, name, arr):
    ok = bool(np.all(np.isfinite(arr)))
    return checks.Check(suite, name, float(ok), 1.0, ok, "all values finite")


def _type_pairs(types):
    return sorted({(float(a), float(r)) for a, r in zip(types.alpha, types.rho)})


def _lsmc(sc, args):
    from .equilibrium import solve_mfg_lsmc

    s = sc.solver
    return solve_mfg_lsmc(sc.grid, sc.market, sc.jumps, sc.laws, sc.claim, s.paths, s.agents, args.seed,
                          checks.lsmc_basis(sc), s.u_max, args.workers)


def cmd_solve_mfg(sc, args, run: Run):
    header = ["alpha", "rho", "cell", "theta_b_mean", "theta_tilde_mean", "pi_theta_tilde_mean"]
    if sc.solver.backend == "lattice":
        model, eq = checks.lattice_equilibrium(sc)
        dist = model.distributions()
        rows = []
        for t in range(eq.types.size):
            for i in range(model.n_steps):
                p = dist[i]
                rows.append([eq.types.alpha[t], eq.types.rho[t], i, float(np.sum(p * eq.theta_b[t, i])),
                             float(np.sum(p * eq.theta_tilde[t, i])), float(np.sum(p * eq.pi_theta_tilde[i]))])
        run.table("strategies.csv", header, rows)
        d = eq.diagnostics
        run.diagnostics.update({"roundtrip_max": d["roundtrip_max"], "best_response_gap_max": d["best_response_gap_max"],
                                "aux_max_abs_z": d["aux_max_abs_z"]})
        run.checks.append(checks._le("solve_mfg", "roundtrip", d["roundtrip_max"], 1e-12))
        run.checks.append(checks._le("solve_mfg", "best_response_gap", d["best_response_gap_max"], 1e-10))
        run.checks.extend(checks.fixed_point_suite(sc, args.seed, args.workers))
    else:
        mc = _lsmc(sc, args)
        types = mc.population.types
        rows = []
        pi_tt = mc.pi_theta_tilde.values[..., 0]
        for a, r in _type_pairs(types):
            sel = (types.alpha == a) & (types.rho == r)
            for i in range(sc.grid.n_steps):
                rows.append([a, r, i, float(mc.theta_b[:, sel, i].mean()), float(mc.theta_tilde[:, sel, i].mean()),
                             float(pi_tt[:, i].mean())])
        run.table("strategies.csv", header, rows)
        d = mc.diagnostics
        run.diagnostics.update({k: d[k] for k in ("roundtrip_max", "roundtrip_pi_se_max", "reference_y0",
                                                  "reference_y0_se", "aux_max_abs_z", "ridge_fallbacks")})
        tol = max(d["roundtrip_pi_se_max"], 1e-12) if math.isfinite(d["roundtrip_pi_se_max"]) else 1e-12
        run.checks.append(checks._le("solve_mfg", "roundtrip", d["roundtrip_max"], tol, "within the projection SE"))
        # mean field consistency on the simulated population
        F = mc.moments.mean_x0 + np.einsum("pnd,pnd->p", pi_tt[..., None], mc.d_w_hat) - mc.claim_projection
        e = estimate((mc.wealth_T() - mc.claim).mean(axis=1) - F)
        run.checks.append(checks._le("solve_mfg", "mean_field", abs(e.mean), max(4 * e.se, 1e-12)))


def cmd_verify(sc, args, run: Run):
    suites = args.suites.split(",") if args.suites else None
    run.checks.extend(checks.run_suites(sc, args.seed, args.workers, suites))


def cmd_oracle(sc, args, run: Run):
    rows = []
    run.checks.extend(checks.oracle_suite(sc, args.seed, args.workers, rows=rows))
    K = sc.jumps.n_atoms
    run.table("oracle.csv", ["depth", "node", "w"] + [f"count_atom{k}" for k in range(K)] + ["theta_dp", "theta_bsde"], rows)


COMMANDS = {
    "simulate": cmd_simulate,
    "solve-single": cmd_solve_single,
    "solve-mfg": cmd_solve_mfg,
    "verify": cmd_verify,
    "oracle": cmd_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfgjump", description="Mean-field investment games with jumps.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--scenario", required=True, help="scenario TOML file or shipped scenario name")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--paths", type=int, default=None, help="override solver.paths")
        s.add_argument("--agents", type=int, default=None, help="override solver.agents")
        s.add_argument("--backend", choices=("lattice", "lsmc"), default=None)
        s.add_argument("--out", default=None, help="output directory (default runs/<scenario>-<command>)")
        s.add_argument("--workers", type=int, default=1, help="threads for path simulation")
        if name == "verify":
            s.add_argument("--suites", default=None, help="comma-separated suites (default: scenario list)")
    return p


def _error(out, kind, exc, code):
    report = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, SolverError) and exc.cell is not None:
        report["cell"] = exc.cell
    print(f"mfgjump: {kind}: {exc}", file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    out = None
    try:
        sc = load_scenario(args.scenario)
        sc = sc.with_overrides(paths=args.paths, agents=args.agents, backend=args.backend)
        out = Path(args.out) if args.out else Path("runs") / f"{sc.name}-{args.command}"
        if args.workers < 1:
            raise ConfigurationError("--workers must be >= 1")
        run = Run(out)
        COMMANDS[args.command](sc, args, run)
        return run.write(sc, args, started)
    except ConfigurationError as e:
        return _error(out, "configuration error", e, EXIT_CONFIG)
    except MfgJumpError as e:
        return _error(out, "solver error", e, EXIT_INTERNAL)
    except Exception as e:  # noqa: BLE001
        return _error(out, "internal error", e, EXIT_INTERNAL)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
