"""Command-line driver: steady state, snapshots, verification, experiments.

Every command works on one run directory (``output_dir`` of the config, or
``--out``).  Exit codes: 0 success, 1 identity/acceptance failure, 2 config
or missing-artifact error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .config import ConfigError, RunConfig, control_signal, load_config
from .linalg import NotPositiveDefinite
from .mesh_fem import assemble_operators, build_grid, default_control_shape, grid_to_json, trajectory_norm
from .newton_pipeline import (
    convolve,
    first_newton_step,
    linearize,
    second_newton_step,
    second_step_coefficients,
    verify_convolution_second,
)
from .ocp_solver import run_comparison_experiment
from .pod_core import EmptyBasisError, PodBasis, reconstruction_error
from .rom_galerkin import reduce_model, solve_reduced_semilinear
from .snapshot_gen import (
    FirstStage,
    SecondStage,
    combine_bases,
    nonlinearity_candidates,
    run_pipeline,
)
from .theta_stepper import FullOrderSystem, SolverError, TimeGrid, compute_steady_state, solve_semilinear

log = logging.getLogger("newtonpod")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
OCP_HEADER = ["size", "relobj", "time", "iterations"]


class MissingArtifact(FileNotFoundError):
    pass


class Run:
    """Lazily built operators plus the run directory of one configuration."""

    def __init__(self, cfg: RunConfig, out: Optional[Path] = None, threads: int = 1,
                 truncate_b12: Optional[int] = None):
        self.cfg = cfg
        self.out = Path(out) if out is not None else cfg.output_dir
        self.threads = threads
        self.truncate_b12 = truncate_b12
        self._ops = None
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.yaml").write_text(cfg.to_yaml())

    @property
    def params(self):
        return self.cfg.params

    @property
    def tg(self) -> TimeGrid:
        return self.cfg.time_grid

    @property
    def ops(self):
        if self._ops is None:
            g = self.cfg.grid
            try:
                grid = build_grid(g["dimension"], g["cells_per_side"], g["mask"])
            except ValueError as exc:
                raise ConfigError(f"grid: {exc}") from exc
            shape = default_control_shape(grid.dimension, sigma=self.cfg.raw["control_shape"]["sigma"])
            self._ops = assemble_operators(grid, shape)
            (self.out / "grid.json").write_text(grid_to_json(grid) + "\n")
        return self._ops

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def need(self, *parts) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise MissingArtifact(f"missing artifact {p}; run the producing command first")
        return p

    def norm(self, values) -> float:
        return trajectory_norm(self.ops, values, self.tg.dt, "W")

    # -- artifacts ---------------------------------------------------------
    def ybar(self) -> np.ndarray:
        if not self.path("ybar.txt").exists():
            cmd_steady(self)
        y = io.load_vector(self.path("ybar.txt"))
        if y.shape != (self.ops.n_dof,):
            raise ConfigError(f"ybar.txt has {y.size} entries but the grid has {self.ops.n_dof} dofs")
        return y

    def basis(self, name: str) -> PodBasis:
        self.need("bases", f"{name}.json")
        return io.load_basis(self.path("bases"), name)

    def combined(self, ybar, n_second: Optional[int]) -> PodBasis:
        B1 = self.basis("B1")
        B2 = self.basis("B2") if n_second != 0 else None
        return combine_bases(ybar, B1, B2, self.ops.G_W, self.cfg.pipeline.cutoff_combined,
                             n_second=n_second, include_ybar=self.cfg.pipeline.include_ybar)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_steady(run: Run) -> int:
    ops, p = run.ops, run.params
    u_bar = float(run.cfg.raw["steady"]["u_bar"])
    ybar = compute_steady_state(ops, p, u_bar)
    system = FullOrderSystem(ops, p)
    res = system.dual_norm(system.diffusion @ ybar + system.nonlinear(ybar) - system.load * u_bar)
    io.save_vector(run.path("ybar.txt"), ybar)
    io.write_json(run.path("steady_report.json"),
                  {"u_bar": u_bar, "residual_H": res, "n_dof": ops.n_dof, "max": float(ybar.max(initial=0.0))})
    log.info("steady state: %d dofs, residual %.3e", ops.n_dof, res)
    return EXIT_OK


def cmd_snapshots(run: Run) -> int:
    ybar = run.ybar()
    lin = linearize(run.ops, run.params, ybar, run.tg)
    t0 = time.perf_counter()
    res = run_pipeline(lin, ybar, run.cfg.pipeline, run.threads)
    elapsed = time.perf_counter() - t0
    snap, bases = run.path("snapshots"), run.path("bases")
    snap.mkdir(exist_ok=True)
    bases.mkdir(exist_ok=True)
    io.save_trajectory(snap / "v.txt", res.first.v)
    io.save_trajectory(snap / "w.txt", res.first.w)
    io.save_trajectory(snap / "r.txt", res.second.r)
    # thousands of impulse rows: binary is far smaller than text here
    np.save(snap / "beta.npy", res.second.beta)
    np.save(snap / "gamma.npy", res.second.gamma)
    io.write_json(snap / "weights.json", {
        "beta": None if res.second.beta_weights is None else res.second.beta_weights.tolist(),
        "gamma": None if res.second.gamma_weights is None else res.second.gamma_weights.tolist(),
    })
    manifest = {"n_dof": run.ops.n_dof, "K_steps": run.tg.K_steps, "seconds": elapsed,
                "weighting": run.cfg.pipeline.weighting, "bases": {}, "files": {}}
    for name, basis in (("B1", res.first.B1), ("c", res.nonlin), ("B2", res.second.B2),
                        ("B12", res.B12)):
        io.save_basis(bases, name, basis)
        manifest["bases"][name] = {"size": basis.size, "gram_tag": basis.gram_tag,
                                   "cutoff": basis.cutoff_used, "eigenvalue_tail": basis.tail_sum(),
                                   "n_eigenvalues": int(basis.eigenvalues.size)}
    for f in sorted(p for p in run.out.rglob("*") if p.is_file() and p.name != "manifest.json"):
        manifest["files"][str(f.relative_to(run.out))] = f.stat().st_size
    io.write_json(run.path("manifest.json"), manifest)
    log.info("bases: |B1|=%d |c|=%d |B2|=%d |B12|=%d (%.1fs)", res.first.B1.size,
             res.nonlin.size, res.second.B2.size, res.B12.size, elapsed)
    return EXIT_OK


def _tail_check(basis: PodBasis, S, G) -> float:
    total = basis.eigenvalues.sum()
    worst = 0.0
    for k in sorted({0, basis.size // 2, basis.size}):
        err = abs(reconstruction_error(basis.truncated(k), S, G) - basis.tail_sum(k))
        worst = max(worst, err / total if total > 0 else err)
    return worst


def cmd_verify(run: Run) -> int:
    ops, tg = run.ops, run.tg
    ybar = run.ybar()
    lin = linearize(ops, run.params, ybar, tg)
    v = io.load_trajectory(run.need("snapshots", "v.txt"))
    w = io.load_trajectory(run.need("snapshots", "w.txt"))
    r = io.load_trajectory(run.need("snapshots", "r.txt"))
    beta = np.load(run.need("snapshots", "beta.npy"))
    gamma = np.load(run.need("snapshots", "gamma.npy"))
    weights = io.read_json(run.need("snapshots", "weights.json"))
    B1, c, B2 = run.basis("B1"), run.basis("c"), run.basis("B2")
    tol = float(run.cfg.raw["verify"]["tolerance"])
    rng = np.random.default_rng(run.cfg.raw["seed"])
    u_bar = float(run.cfg.raw["steady"]["u_bar"])

    err1 = err2 = 0.0
    for _ in range(run.cfg.raw["verify"]["n_controls"]):
        u = u_bar + 0.5 * rng.standard_normal(tg.K_steps)
        d1 = first_newton_step(lin, u, ybar)
        conv = v.values + convolve(w.values[None], u[:, None], tg.dt)
        err1 = max(err1, _rel_h(ops, d1.values, conv))
        cu, cv = second_step_coefficients(lin, d1, B1.vectors, c.vectors)
        rep = verify_convolution_second(lin, cu, cv, B1.vectors, c.vectors, parts=(r, beta, gamma))
        err2 = max(err2, rep["max_rel_err"])

    first = FirstStage(v, w, B1)
    factors = B1.vectors
    if run.cfg.pipeline.weighting == "coefficient":
        factors = factors * first.coefficient_scales[None, :]
    cand = nonlinearity_candidates(ops, ybar, factors, run.cfg.pipeline.include_ybar,
                                   run.cfg.pipeline.max_candidates)
    second = SecondStage(r, beta, gamma, B2,
                         None if weights["beta"] is None else np.asarray(weights["beta"]),
                         None if weights["gamma"] is None else np.asarray(weights["gamma"]))
    rows = [
        ("convolution_first", err1),
        ("convolution_second", err2),
        ("pod_tail_B1", _tail_check(B1, np.concatenate([v.values, w.values]).T, ops.G_W)),
        ("pod_tail_c", _tail_check(c, cand, ops.M)),
        ("pod_tail_B2", _tail_check(B2, second.snapshots(), ops.G_W) if B2.size else 0.0),
    ]
    _write_csv(run.path("verify.csv"), ["identity", "max_rel_err", "tolerance", "pass"],
               [(name, f"{e:.6e}", f"{tol:g}", int(e <= tol)) for name, e in rows])
    failed = [name for name, e in rows if not e <= tol]
    for name, e in rows:
        log.info("%-20s %.3e %s", name, e, "ok" if e <= tol else "FAILED")
    if failed:
        print(f"identity check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def _rel_h(ops, A, B) -> float:
    """Largest per-step H-norm of ``A - B`` over the largest H-norm of ``A``."""
    D = A - B
    num = np.sqrt(max(np.einsum("ki,ki->k", D, (ops.M @ D.T).T).max(), 0.0))
    den = np.sqrt(max(np.einsum("ki,ki->k", A, (ops.M @ A.T).T).max(), 0.0))
    return float(num / den) if den > 0 else float(num)


def cmd_forward_errors(run: Run) -> int:
    ops, p, tg = run.ops, run.params, run.tg
    ybar = run.ybar()
    u = control_signal(run.cfg.raw["forward"]["test_control"], tg)
    y = solve_semilinear(ops, p, u, ybar, tg).values
    lin = linearize(ops, p, ybar, tg)
    d1 = first_newton_step(lin, u, ybar)
    d2 = second_newton_step(lin, d1)
    y1 = ybar + d1.values
    y2 = y1 + d2.values
    B1m = run.combined(ybar, 0)
    B12 = run.combined(ybar, run.truncate_b12) if run.truncate_b12 is not None else run.basis("B12")
    results, sizes = [], {}
    for label, approx in (("y1", y1), ("y2", y2)):
        results.append((label, approx))
    for label, basis in (("yB1", B1m), ("yB12", B12)):
        rm = reduce_model(ops, p, basis)
        results.append((label, rm.lift(solve_reduced_semilinear(rm, u, ybar, tg).values)))
        sizes[label] = basis.size
    ny = run.norm(y)
    rows = [(label, f"{run.norm(y - approx) / ny:.6e}") for label, approx in results]
    _write_csv(run.path("forward_errors.csv"), ["quantity", "relerr"], rows)
    io.write_json(run.path("forward_errors.json"), {"basis_sizes": sizes, "norm_y": ny})
    for label, val in rows:
        log.info("relerr %-5s %s", label, val)
    return EXIT_OK


def cmd_ocp(run: Run) -> int:
    ops, p, tg = run.ops, run.params, run.tg
    ybar = run.ybar()
    o = run.cfg.ocp
    B2 = run.basis("B2")
    models = [("B1", reduce_model(ops, p, run.combined(ybar, 0)))]
    if run.truncate_b12 is not None:
        counts = [run.truncate_b12]
    else:
        counts = [j for j in o["sweep"] if 0 < j < B2.size]
        if o["include_full_b12"] and B2.size:
            counts.append(B2.size)
    for j in sorted(set(counts)):
        if j > 0:
            models.append((f"B12+{j}", reduce_model(ops, p, run.combined(ybar, j))))
    ref = control_signal(o["reference_control"], tg)

    def progress(row):
        log.info("ocp %-8s size %4d relobj %.3e time %.1fs iterations %d", row["label"],
                 row["size"], row["relobj"], row["time"], row["iterations"])

    rows = run_comparison_experiment(ops, p, ybar, models, gamma=float(o["gamma"]), reference=ref,
                                     tol=float(o["tol"]), max_iter=o["max_iter"],
                                     relobj=o["relobj"], progress=progress)
    _write_csv(run.path("ocp.csv"), OCP_HEADER,
               [(r["size"], f"{r['relobj']:.6e}", f"{r['time']:.3f}", r["iterations"]) for r in rows])
    _write_csv(run.path("ocp_detail.csv"),
               ["label", "size", "relobj_model", "relobj_fem", "J", "time", "iterations", "converged"],
               [(r["label"], r["size"], f"{r['relobj_model']:.6e}", f"{r['relobj_fem']:.6e}",
                 f"{r['J']:.17g}", f"{r['time']:.3f}",
                 r["iterations"], int(r["converged"])) for r in rows])
    np.save(run.path("ocp_controls.npy"), np.array([r["u_opt"] for r in rows]))
    return EXIT_OK


COMMANDS = {
    "steady": cmd_steady,
    "snapshots": cmd_snapshots,
    "verify": cmd_verify,
    "forward-errors": cmd_forward_errors,
    "ocp": cmd_ocp,
}


def cmd_all(run: Run) -> int:
    code = EXIT_OK
    for name in ("steady", "snapshots", "verify", "forward-errors", "ocp"):
        log.info("== %s", name)
        code = max(code, COMMANDS[name](run))
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="newtonpod", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=[*COMMANDS, "all"])
    ap.add_argument("--config", required=True, help="YAML run configuration")
    ap.add_argument("--out", help="run directory (overrides output_dir)")
    ap.add_argument("--threads", type=int, default=1, help="workers for impulse responses")
    ap.add_argument("--truncate-b12", type=int, default=None, metavar="N",
                    help="use B12 with only the leading N second-stage vectors")
    ap.add_argument("-q", "--quiet", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        if args.truncate_b12 is not None and args.truncate_b12 < 0:
            raise ConfigError("--truncate-b12 must be non-negative")
        cfg = load_config(args.config)
        run = Run(cfg, args.out, args.threads, args.truncate_b12)
        handler = cmd_all if args.command == "all" else COMMANDS[args.command]
        return handler(run)
    except (ConfigError, MissingArtifact) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, NotPositiveDefinite, EmptyBasisError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
