"""Command-line front end.

Every subcommand takes a single positional config path (the JSON schema of
harness.ExperimentConfig) plus --out / --seed-override / --threads.

Exit codes: 0 all pass flags true, 2 completed with failing flags,
1 pipeline error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import corrector as corr
from . import families, pde_fd
from .harness import ConfigError, ExperimentConfig, PipelineError, \
    _avg_stage, _eps_stage, _y_bound, emit, run_convergence, split_seed
from .simulate import simulate_avg, simulate_eps


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed_override is not None:
        cfg.seed = int(args.seed_override)
    if args.out is not None:
        cfg.out_dir = args.out
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg


def _write_json(cfg, name, doc):
    path = os.path.join(cfg.out_dir, name)
    with open(path, "w", newline="") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(path)
    return path


def cmd_average(args) -> int:
    cfg = _load(args)
    fam = cfg.family()
    avg = families.build_averaged(fam, tol=cfg.avg_tol)
    x2g = np.linspace(-3.0, 3.0, 25)
    avg.save_json(os.path.join(cfg.out_dir, "averaged.json"), x2g)
    print(os.path.join(cfg.out_dir, "averaged.json"))
    return 0


def cmd_simulate(args) -> int:
    cfg = _load(args)
    fam = cfg.family()
    for i, eps in enumerate(cfg.eps_list):
        bundle = simulate_eps(fam, eps, cfg.x0, cfg.grid(), cfg.n_paths,
                              seed=split_seed(cfg.seed, "eps", i),
                              block_size=cfg.block_size)
        bundle.save(os.path.join(cfg.out_dir, f"paths_eps{i}.bin"))
    avg = families.build_averaged(fam, tol=cfg.avg_tol)
    simulate_avg(avg, cfg.x0, cfg.grid(), cfg.n_paths,
                 seed=split_seed(cfg.seed, "avg"),
                 block_size=cfg.block_size).save(
        os.path.join(cfg.out_dir, "paths_avg.bin"))
    print(cfg.out_dir)
    return 0


def cmd_bsde(args) -> int:
    cfg = _load(args)
    fam = cfg.family()
    avg = families.build_averaged(fam, tol=cfg.avg_tol)
    summary = {"eps": []}
    for i, eps in enumerate(cfg.eps_list):
        _, sol = _eps_stage(cfg, fam, eps, i)
        sol.save(os.path.join(cfg.out_dir, f"bsde_eps{i}.bin"),
                 cfg.grid().dt)
        summary["eps"].append({"eps": eps, "Y0": sol.Y0,
                               "stderr": sol.Y0_stderr})
    _, sol = _avg_stage(cfg, fam, avg)
    sol.save(os.path.join(cfg.out_dir, "bsde_avg.bin"), cfg.grid().dt)
    summary["averaged"] = {"Y0": sol.Y0, "stderr": sol.Y0_stderr}
    _write_json(cfg, "bsde_summary.json", summary)
    return 0


def cmd_corrector(args) -> int:
    cfg = _load(args)
    fam = cfg.family()
    avg = families.build_averaged(fam, tol=cfg.avg_tol)
    cc = cfg.corrector or {}
    table = corr.decay_table(
        fam, avg, cfg.eps_list, cc.get("box", [[-2, 2], [-1, 1]]),
        cc.get("y_box", [-1, 1]), n_grid=tuple(cc.get("n_grid", [21, 9, 9])),
        csv_path=os.path.join(cfg.out_dir, "decay.csv"))
    field = corr.CorrectorField(fam, avg, cfg.eps_list[0])
    rep = corr.residual_check(field, {
        "box": [[-2, 2]] + [[-1, 1]] * fam.d + [[-1, 1]],
        "n_samples": int(cc.get("n_samples", 50)),
        "seed": split_seed(cfg.seed, "corrector")})
    _write_json(cfg, "corrector.json", {
        "decay": [{"eps": r.eps, "sup_V": r.sup_V, "sup_beta": r.sup_beta,
                   "sup_alpha": r.sup_alpha} for r in table.rows],
        "monotone_V": table.monotone_V,
        "residual": {"max": rep.max_residual, "scaled": rep.max_scaled,
                     "n_failed": rep.n_failed, "h": rep.h}})
    return 0 if rep.passed and table.monotone_V else 2


def cmd_pde(args) -> int:
    cfg = _load(args)
    if cfg.fd is None:
        raise ConfigError("pde subcommand needs an fd block in the config")
    fam = cfg.family()
    avg = families.build_averaged(fam, tol=cfg.avg_tol)
    fd = cfg.fd
    grid = pde_fd.Grid2D(float(fd["L1"]), float(fd["L2"]), int(fd["n1"]),
                         int(fd["n2"]), float(fd["dt_fd"]), cfg.t_end)
    model = pde_fd.PdeModel.from_averaged(avg, fam.terminal)
    sol = pde_fd.solve_pde(model, grid, scheme=fd.get("scheme", "centered"))
    sol.save_csv(os.path.join(cfg.out_dir, "pde.csv"))
    _write_json(cfg, "pde_summary.json",
                {"value_at_x0": sol.at(cfg.x0[0], cfg.x0[1]),
                 "richardson_error": pde_fd.richardson_error(
                     model, grid, scheme=fd.get("scheme", "centered"))})
    return 0


def cmd_converge(args) -> int:
    cfg = _load(args)
    report = run_convergence(cfg, n_threads=args.threads)
    emit(report, cfg.out_dir, cfg.formats)
    print(os.path.join(cfg.out_dir, "report.json"))
    return 0 if report.all_pass() else 2


def cmd_audit(args) -> int:
    cfg = _load(args)
    fam = cfg.family()
    box = [[-5.0, 5.0]] + [[-2.0, 2.0]] * fam.d + [[-2.0, 2.0]]
    rep = families.audit_assumptions(
        fam, {"box": box, "n_samples": 256,
              "seed": split_seed(cfg.seed, "audit")})
    doc = {aid: {"status": e.status, "residual": e.residual,
                 "witness": list(e.witness) if e.witness else None,
                 "detail": e.detail}
           for aid, e in rep.entries.items()}
    _write_json(cfg, "audit.json", doc)
    return 0 if not rep.violated() else 2


_COMMANDS = {"average": cmd_average, "simulate": cmd_simulate,
             "bsde": cmd_bsde, "corrector": cmd_corrector, "pde": cmd_pde,
             "converge": cmd_converge, "audit": cmd_audit}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="homoglab",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", help="path to the JSON experiment config")
        sp.add_argument("--out", default=None, help="output directory override")
        sp.add_argument("--seed-override", default=None, type=int)
        sp.add_argument("--threads", default=1, type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
