"""Command line interface.

Subcommands: run (one experiment), sweep (table of basis-count variants),
gen-field (write a synthetic permeability file), fine-ref (reference solve
only), check (quick invariant suite).

Exit codes: 0 success, 2 configuration error, 3 solver non-convergence,
4 IO error.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness
from .errors import ConfigError, FieldFileError, MsflowError, NewtonConvergenceError
from .harness import ExperimentConfig
from .model import generate_channel_field, save_field_to_file


def _load_config(args):
    cfg = (
        ExperimentConfig.from_file(args.config)
        if args.config
        else ExperimentConfig.default()
    )
    if getattr(args, "snapshot", None):
        cfg.set("basis.snapshot", args.snapshot)
    if getattr(args, "offline", None) is not None:
        cfg.set("basis.offline", args.offline)
    if getattr(args, "online", None) is not None:
        cfg.set("online.count", args.online)
    if getattr(args, "updates", None):
        cfg.set("online.updates", args.updates)
    if getattr(args, "out", None):
        cfg.set("output.dir", args.out)
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", args.seed)
    return cfg


def _add_common(p):
    p.add_argument("--config", metavar="PATH", help="config file (key = value lines)")
    p.add_argument("--snapshot", choices=["v1", "v2"])
    p.add_argument("--offline", type=int, metavar="N")
    p.add_argument("--online", type=int, metavar="M")
    p.add_argument("--updates", metavar="s1,s2,...")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--vtk", metavar="steps", default="",
                   help="comma-separated step indices to export as VTK")


def _vtk_steps(args):
    raw = getattr(args, "vtk", "") or ""
    if not raw.strip():
        return ()
    try:
        return tuple(int(s) for s in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --vtk list: {raw!r}") from exc


def cmd_run(args):
    cfg = _load_config(args)
    report = harness.run_experiment(cfg, vtk_steps=_vtk_steps(args))
    print(harness.CSV_HEADER)
    print(report.csv_row())
    return 0


def cmd_sweep(args):
    cfg = _load_config(args)
    variants = [v.strip() for v in args.nb.split(",") if v.strip()]
    if not variants:
        raise ConfigError("sweep needs at least one variant in --nb")
    reports = harness.sweep(cfg, variants)
    print(harness.CSV_HEADER)
    for r in reports:
        print(r.csv_row())
    fine = reports[0]
    for r in reports[1:]:
        if fine.t_solve > 0:
            print(
                f"# {r.nb_label}: T_solve(coarse)/T_solve(fine) = "
                f"{r.t_solve / fine.t_solve:.4f}"
            )
    return 0


def cmd_gen_field(args):
    cfg = _load_config(args)
    mesh = cfg.build_mesh()
    field = generate_channel_field(
        mesh.fine,
        seed=cfg["seed"],
        background=cfg["field.background"],
        channel=cfg["field.channel"],
        n_channels=cfg["field.n_channels"],
        n_inclusions=cfg["field.n_inclusions"],
    )
    try:
        save_field_to_file(field, args.path)
    except OSError as exc:
        raise FieldFileError(f"cannot write field file {args.path}: {exc}") from exc
    print(f"wrote {field.values.size} cell values to {args.path} "
          f"(contrast {field.contrast:.3g})")
    return 0


def cmd_fine_ref(args):
    cfg = _load_config(args)
    (states, iters, t_ass, t_solve), problem, mesh = harness.fine_reference(
        cfg, force=args.force
    )
    print(
        f"fine reference: {mesh.fine.n_nodes} DOFs, {len(states) - 1} steps, "
        f"{int(sum(iters))} Newton iterations, "
        f"t_ass={t_ass:.3f}s t_solve={t_solve:.3f}s"
    )
    for step in _vtk_steps(args):
        harness.export_vtk(
            mesh.fine, states[step],
            Path(cfg["output.dir"]) / f"fine_step{step:03d}.vtk",
        )
    return 0


def cmd_check(args):
    """Quick invariant suite on small grids: partition of unity, Jacobian
    finite differences, identity-projection equivalence."""
    from .fem import newton_jacobian, newton_residual, solve_fine
    from .grid import build_two_scale_mesh
    from .model import FluidProps, PermeabilityField, TimeGrid, make_problem
    from .offline import build_partition_of_unity
    import scipy.sparse as sp
    from .coarse import solve_gmsfem
    from .offline import OfflineSpace, ProjectionMatrix

    failures = 0

    def report(name, ok, detail=""):
        nonlocal failures
        print(f"[{'PASS' if ok else 'FAIL'}] {name} {detail}")
        if not ok:
            failures += 1

    mesh = build_two_scale_mesh(8, 8, 8, r=4)
    pou = build_partition_of_unity(mesh)
    total = np.zeros(mesh.fine.n_nodes)
    for i in range(mesh.n_neighborhoods):
        total += pou.chi_global(i)
    err = float(np.abs(total - 1.0).max())
    report("partition-of-unity sum", err < 1e-14, f"max dev {err:.2e}")

    fine4 = build_two_scale_mesh(4, 4, 4, r=2).fine
    fluid = FluidProps()
    perm = PermeabilityField(np.ones(fine4.n_cells))
    rng = np.random.default_rng(0)
    p = fluid.p_ref * (1 + 0.01 * rng.standard_normal(fine4.n_nodes))
    p_prev = fluid.p_ref * np.ones(fine4.n_nodes)
    J = newton_jacobian(p, fluid, perm, 1.0, fine4).toarray()
    delta = 1e-6 * np.abs(p).max()
    worst = 0.0
    for i in rng.choice(fine4.n_nodes, 10, replace=False):
        e = np.zeros(fine4.n_nodes)
        e[i] = delta
        fd = (
            newton_residual(p + e, p_prev, fluid, perm, 1.0, np.zeros(fine4.n_nodes), fine4)
            - newton_residual(p - e, p_prev, fluid, perm, 1.0, np.zeros(fine4.n_nodes), fine4)
        ) / (2 * delta)
        denom = max(1.0, np.abs(J[:, i]).max())
        worst = max(worst, float(np.abs(fd - J[:, i]).max() / denom))
    report("Jacobian finite differences", worst < 1e-6, f"max rel {worst:.2e}")

    mesh8 = build_two_scale_mesh(8, 8, 8, r=4)
    perm8 = PermeabilityField(np.ones(mesh8.fine.n_cells))
    problem = make_problem(
        mesh8.fine, fluid, perm8, TimeGrid(dt=2.5e-5, n_steps=3), "mixed-bc"
    )
    ref = solve_fine(problem)
    R = sp.identity(mesh8.fine.n_nodes, format="csr")
    pm = ProjectionMatrix(
        mesh8.fine.n_nodes, R, [0] * mesh8.fine.n_nodes,
        problem.boundary.dirichlet_nodes,
    )
    space = OfflineSpace(
        mesh=mesh8, projection=pm, n_basis=[],
        lambda_next=np.ones(mesh8.n_neighborhoods),
    )
    res = solve_gmsfem(problem, space)
    dev = float(
        np.abs(np.asarray(res.states) - np.asarray(ref.states)).max()
        / np.abs(np.asarray(ref.states)).max()
    )
    report("identity-projection equivalence", dev < 1e-10, f"max rel {dev:.2e}")

    return 1 if failures else 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="msflow",
        description="Two-scale multiscale FEM for compressible flow in "
        "heterogeneous porous media",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a table of basis-count variants")
    _add_common(p_sweep)
    p_sweep.add_argument(
        "--nb", required=True, metavar="4+0,8+0,4+1u3",
        help="comma-separated variants: <offline>+<online>[u<updates>]",
    )
    p_sweep.set_defaults(func=cmd_sweep)

    p_gen = sub.add_parser("gen-field", help="write a synthetic permeability file")
    _add_common(p_gen)
    p_gen.add_argument("path", help="output file (.txt for text, else raw f64)")
    p_gen.set_defaults(func=cmd_gen_field)

    p_ref = sub.add_parser("fine-ref", help="fine reference solve only")
    _add_common(p_ref)
    p_ref.add_argument("--force", action="store_true", help="ignore the cache")
    p_ref.set_defaults(func=cmd_fine_ref)

    p_check = sub.add_parser("check", help="quick invariant suite")
    p_check.set_defaults(func=cmd_check)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NewtonConvergenceError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3
    except (FieldFileError, OSError) as exc:
        print(f"IO error: {exc}", file=sys.stderr)
        return 4
    except MsflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
