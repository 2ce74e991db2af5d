"""Command-line scenario runner.

Subcommands::

    qbsde run --config FILE|BUILTIN [--seed S] [--paths N] [--steps M] [--out-dir D] [--threads K]
    qbsde certify --config FILE|BUILTIN
    qbsde dual-check --config FILE|BUILTIN
    qbsde list

Exit status: 0 when every certification passes, 2 on a validation error,
3 on a numerical failure, 4 when a certification fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import traceback

import numpy as np

from . import __version__
from .bsde import (
    alpha_path_integrals,
    solve_bsde_lsmc,
    solve_lipschitz_sequence,
    solve_partitioned,
    sandwich_lower_bound,
    uniqueness_class_check,
    write_solution_csv,
)
from .control import (
    admissibility_check,
    constant_control,
    control_battery,
    duality_gap,
    evaluate_control,
    optimal_control_from_solution,
    partition_count,
)
from .errors import InadmissibleControlError, NumericalError, QBSDEError, ValidationError, WeightDegeneracyError
from .fenchel import DualGeneratorView
from .generator import PURE_QUADRATIC
from .paths import TimeGrid, simulate_forward, write_paths_csv
from .pde import PdeGrid, PdeSpec, bsde_runner, check_A4, cole_hopf_oracle, feynman_kac_compare, solve_pde_fd, \
    sup_norm_error, write_pde_csv
from .scenario import ScenarioConfig, list_builtin_scenarios, load_config

__all__ = ["run_scenario", "list_builtin_scenarios", "main", "EXIT_OK", "EXIT_VALIDATION", "EXIT_NUMERIC",
           "EXIT_CERTIFICATION"]

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_CERTIFICATION = 0, 2, 3, 4


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def _fmt(v):
    return repr(float(v))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


class _Run:
    """State shared by the pipeline stages of one scenario."""

    def __init__(self, cfg, out_dir, threads):
        self.cfg = cfg
        self.out_dir = out_dir
        self.threads = threads
        self.results = {}
        self.certs = {}
        self.artifacts = []
        self.gen = cfg.generator()
        self.sde = cfg.sde()
        self.term = cfg.terminal()
        self.basis = cfg.basis()
        self.opts = cfg.solver_options()
        self.grid = TimeGrid(cfg["horizon"], cfg["grid"]["steps"])
        self.bundle = None
        self.sol = None

    def artifact(self, name):
        self.artifacts.append(name)
        return os.path.join(self.out_dir, name)

    # -- stages --------------------------------------------------------

    def solve(self):
        cfg = self.cfg
        self.bundle = simulate_forward(self.sde, 0.0, cfg["x0"], self.grid, cfg["grid"]["paths"], cfg["seed"],
                                       threads=self.threads)
        self.sol = sol = solve_bsde_lsmc(self.gen, self.term, self.bundle, self.basis, self.opts)
        res = sol.summary()
        self.certs["clamp_free"] = sol.clamp_count == 0
        oracle = cfg["oracle"]
        if oracle is not None:
            res["oracle"] = oracle["y0"]
            res["oracle_error"] = abs(sol.y0 - oracle["y0"])
            self.certs["oracle"] = res["oracle_error"] <= oracle["tolerance"]
        self.results["solve"] = res
        k = cfg["csv_paths"]
        write_paths_csv(self.bundle, self.artifact("paths.csv"), max_paths=k)
        write_solution_csv(sol, self.artifact("solution.csv"), max_paths=k)
        d = sol.Z.shape[2]
        rows = []
        for j in range(sol.steps + 1):
            zs = [_fmt(v) for v in sol.Z[:, j].mean(axis=0)] if j < sol.steps else [""] * d
            extra = ([int(sol.clamp_counts[j]), _fmt(sol.dp_residual[j]), _fmt(sol.reg_stderr[j])]
                     if j < sol.steps else ["", "", ""])
            rows.append([j, _fmt(sol.nodes[j]), _fmt(sol.Y[:, j].mean())] + zs + extra)
        _write_rows(self.artifact("nodes.csv"),
                    ["k", "t", "mean_Y"] + [f"mean_Z{j}" for j in range(d)] + ["clamps", "dp_residual", "reg_stderr"],
                    rows)

    def sandwich(self):
        gen, sol = self.gen, self.sol
        xi = self.term(self.bundle.X[:, -1])
        integrals = alpha_path_integrals(gen, self.bundle, 0, gen.monotonicity_beta)
        bound, se = sandwich_lower_bound(gen, xi, integrals, 0.0, self.cfg["horizon"], return_stderr=True)
        combined = math.hypot(se, sol.y0_stderr)
        self.results["sandwich"] = {"lower_bound": bound, "lower_bound_stderr": se, "y0": sol.y0,
                                    "combined_stderr": combined}
        self.certs["sandwich"] = sol.y0 >= bound - 3.0 * combined

    def moments(self):
        p = self.cfg["partition"]
        rep = uniqueness_class_check(self.sol, self.gen, p["p"], p["epsilon"])
        self.results["moments"] = rep.as_dict()
        self.certs["moments"] = not rep.flagged

    def dual(self):
        cfg, sol, bundle = self.cfg, self.sol, self.bundle
        c = cfg["controls"]
        view = DualGeneratorView(self.gen)
        qstar = optimal_control_from_solution(view, sol)
        cost = evaluate_control(view, qstar, self.term, bundle, self.basis, self.opts)
        gap = duality_gap(sol, cost, c["tolerance"])
        res = {"optimal": {**cost.as_dict(), **gap.as_dict()}}
        self.certs["duality_attained"] = gap.attained
        rows = [["optimal", "feedback", _fmt(cost.y0), _fmt(cost.stderr), _fmt(gap.node0_gap),
                 _fmt(gap.node0_combined_stderr), gap.comparison_holds, True, ""]]

        controls = [constant_control(np.full(bundle.w_dim, v), bundle) for v in c["constants"]]
        if c["battery_size"]:
            seen = {ctl.label for ctl in controls}
            controls += [ctl for ctl in control_battery(bundle, qstar, size=c["battery_size"], seed=cfg["seed"])
                         if ctl.label not in seen]
        entries = []
        admissible = 0
        holds = True
        for ctl in controls:
            entry = {"label": ctl.label, "kind": ctl.kind}
            try:
                adm = admissibility_check(view, ctl, self.term, bundle)
                entry["admissibility"] = adm.as_dict()
                if not adm.admissible:
                    entry["skipped"] = "; ".join(adm.reasons)
                else:
                    cp = evaluate_control(view, ctl, self.term, bundle, self.basis, self.opts)
                    g = duality_gap(sol, cp, c["tolerance"])
                    entry.update(cp.as_dict())
                    entry.update(g.as_dict())
                    admissible += 1
                    holds = holds and g.comparison_holds
            except (InadmissibleControlError, WeightDegeneracyError) as exc:
                entry["skipped"] = str(exc)
            entries.append(entry)
            if "skipped" in entry:
                rows.append([entry["label"], ctl.kind, "", "", "", "", "", False, entry["skipped"]])
            else:
                rows.append([entry["label"], ctl.kind, _fmt(entry["y0"]), _fmt(entry["stderr"]),
                             _fmt(entry["node0_gap"]), _fmt(entry["node0_combined_stderr"]),
                             entry["comparison_holds"], True, ""])
        res["controls"] = entries
        res["admissible_evaluated"] = admissible
        self.certs["duality_comparison"] = holds
        if c["min_admissible"]:
            self.certs["battery_coverage"] = admissible >= c["min_admissible"]
        self.results["dual"] = res
        _write_rows(self.artifact("controls.csv"),
                    ["label", "kind", "y0", "stderr", "gap0", "combined_stderr", "comparison_holds", "admissible",
                     "note"], rows)

    def ladder(self):
        cfg = self.cfg
        lad = solve_lipschitz_sequence(self.gen, self.term, self.bundle, cfg["ladder"]["n_list"], self.basis,
                                       self.opts)
        res = lad.as_dict()
        ok = all(b <= a + 3.0 * math.hypot(sa, sb)
                 for a, b, sa, sb in zip(lad.y0, lad.y0[1:], lad.y0_stderr, lad.y0_stderr[1:]))
        self.certs["ladder_monotone"] = ok
        if cfg["oracle"] is not None:
            res["last_oracle_error"] = abs(lad.y0[-1] - cfg["oracle"]["y0"])
            self.certs["ladder_limit"] = res["last_oracle_error"] <= cfg["oracle"]["tolerance"]
        self.results["ladder"] = res
        _write_rows(self.artifact("ladder.csv"), ["n", "y0", "stderr"],
                    [[n, _fmt(y), _fmt(s)] for n, y, s in zip(lad.n_list, lad.y0, lad.y0_stderr)])

    def partition(self):
        cfg = self.cfg
        p = cfg["partition"]
        pp = partition_count(p["p"], p["epsilon"], self.gen.gamma_bar, self.gen.beta_bar, cfg["horizon"])
        n_int = p["n_intervals"] or pp.N
        if cfg["grid"]["steps"] % n_int:
            raise ValidationError(f"partition: {cfg['grid']['steps']} steps do not split into {n_int} intervals")
        ps = solve_partitioned(self.gen, self.term, self.sde, cfg["x0"], self.grid, n_int, cfg["grid"]["paths"],
                               cfg["seed"] + 1, self.basis, self.opts, self.threads)
        combined = math.hypot(ps.y0_stderr, self.sol.y0_stderr)
        self.results["partition"] = {"rule_N": pp.N, "step_bound": pp.step_bound, "n_intervals": n_int,
                                     "boundary_nodes": ps.boundary_nodes, "y0": ps.y0, "y0_stderr": ps.y0_stderr,
                                     "whole_y0": self.sol.y0, "combined_stderr": combined}
        self.certs["partition_consistent"] = abs(ps.y0 - self.sol.y0) <= 3.0 * combined

    def pde(self):
        cfg = self.cfg
        pd = cfg["pde"]
        if self.sde.x_dim != 1 or self.sde.w_dim != 1:
            raise ValidationError("pde: the finite-difference stage needs a one-dimensional state")
        spec = PdeSpec(self.sde, self.gen, self.term, cfg["horizon"], pd["r"], self.gen.K_gy, self.gen.gamma_bar,
                       pd["alpha"], pd["alpha_prime"], cfg["name"])
        grid = PdeGrid(pd["time_nodes"], pd["space_nodes"], pd["radius"], pd["theta"])
        a4 = check_A4(spec)
        fd = solve_pde_fd(spec, grid)
        res = {"assumptions": a4.as_dict(), "u_fd_00": float(fd.at(0.0, 0.0)), "newton_iterations": fd.iterations}
        self.certs["pde_assumptions"] = a4.passed
        if self.gen.kind == PURE_QUADRATIC and self.sde.drift_free:
            oracle = cole_hopf_oracle(self.gen.params["gamma"], self.term, self.sde, grid, cfg["horizon"])
            res["cole_hopf_sup_error"] = sup_norm_error(fd, oracle)
            self.certs["cole_hopf"] = res["cole_hopf_sup_error"] <= 5e-3
        x0 = float(cfg["x0"][0])
        other = bsde_runner(spec, cfg["grid"]["steps"], cfg["grid"]["paths"], cfg["seed"], self.basis, self.opts,
                            self.threads)

        def runner(t, x):
            if t == 0.0 and x == x0:
                return self.sol.y0, self.sol.y0_stderr
            return other(t, x)

        table = feynman_kac_compare(fd, runner, [tuple(q) for q in pd["points"]], pd["tolerance"])
        res["feynman_kac"] = table.as_dict()
        self.certs["feynman_kac"] = table.passed
        self.results["pde"] = res
        write_pde_csv(fd, self.artifact("pde.csv"), pd["csv_time_stride"], pd["csv_space_stride"])
        _write_rows(self.artifact("fk.csv"), ["t", "x", "u_fd", "y0", "stderr", "difference", "tolerance"],
                    [[_fmt(r.t), _fmt(r.x), _fmt(r.u_fd), _fmt(r.y0), _fmt(r.stderr), _fmt(r.difference),
                      _fmt(r.tolerance)] for r in table.rows])


def run_scenario(config, out_dir=None, threads=None, stages=None):
    """Execute the scenario pipeline and write ``report.json`` plus CSV artifacts.

    Returns ``(report, exit_status)``.  Validation and numerical errors
    propagate as exceptions.
    """
    cfg = config if isinstance(config, ScenarioConfig) else ScenarioConfig(config)
    out_dir = out_dir or cfg["output_dir"]
    threads = threads or cfg["threads"]
    pipeline = list(cfg["pipeline"]) if stages is None else ["solve"] + [s for s in stages if s != "solve"]
    os.makedirs(out_dir, exist_ok=True)
    run = _Run(cfg, out_dir, threads)
    for stage in pipeline:
        getattr(run, stage.replace("-", "_"))()
    status = EXIT_OK if all(run.certs.values()) else EXIT_CERTIFICATION
    embedded = cfg.to_dict()
    embedded.pop("threads", None)
    embedded["pipeline"] = pipeline
    report = _jsonable({
        "version": __version__,
        "config": embedded,
        "results": run.results,
        "certifications": run.certs,
        "verdict": "certified" if status == EXIT_OK else "certification-failed",
        "duality": ("attained" if run.certs.get("duality_attained") else "not-attained")
        if "duality_attained" in run.certs else "not-run",
        "artifacts": sorted(run.artifacts),
        "exit_status": status,
    })
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return report, status


def _provenance(exc):
    for frame in reversed(traceback.extract_tb(exc.__traceback__)):
        name = os.path.splitext(os.path.basename(frame.filename))[0]
        if os.sep + "qbsde" + os.sep in frame.filename:
            return name
    return "qbsde"


def _parser():
    ap = argparse.ArgumentParser(prog="qbsde", description="Quadratic BSDE solver and duality certifier")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run the configured pipeline"),
                        ("certify", "solve, sandwich bound and duality certification"),
                        ("dual-check", "solve and check the duality gap only")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON config file or builtin scenario name")
        p.add_argument("--out-dir")
        p.add_argument("--threads", type=int)
        if name == "run":
            p.add_argument("--seed", type=int)
            p.add_argument("--paths", type=int)
            p.add_argument("--steps", type=int)
    sub.add_parser("list", help="list builtin scenarios")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "list":
        for name, desc in list_builtin_scenarios():
            print(f"{name}\t{desc}")
        return EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.command == "run":
            cfg = cfg.with_overrides(seed=args.seed, paths=args.paths, steps=args.steps)
            stages = None
        elif args.command == "certify":
            stages = ["sandwich", "dual"]
        else:
            stages = ["dual"]
        if args.threads is not None and args.threads < 1:
            raise ValidationError("--threads must be >= 1")
        report, status = run_scenario(cfg, args.out_dir, args.threads, stages)
    except ValidationError as exc:
        print(f"validation error [{_provenance(exc)}]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, QBSDEError) as exc:
        print(f"numerical failure [{_provenance(exc)}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    failed = sorted(k for k, v in report["certifications"].items() if not v)
    y0 = report["results"]["solve"]["y0"]
    print(f"{report['config']['name']}: y0={y0:.6f} verdict={report['verdict']}"
          + (f" failed={','.join(failed)}" if failed else ""))
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
