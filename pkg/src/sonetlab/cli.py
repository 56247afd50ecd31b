"""Command line entry point: ``sonetlab <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import RobustReport
from .blocks import SkewOdeBlockParams, load_checkpoint
from .experiment import (LAYOUTS, DataConfig, ExperimentConfig, desk_spec, emit_table,
                         load_data, parse_attack_list, run_experiment, solver_ablation)
from .solvers import SolverConfig
from .stability import certify, lyapunov_probe, transition_orthogonality_check
from .training import TrainConfig

MNIST_ATTACKS = {k: {"epsilon": 0.3, "step": 0.03} for k in ("pgd_linf", "cw_linf", "spsa")}
MNIST_ATTACKS["cw_linf"]["step"] = 0.01


def default_config() -> ExperimentConfig:
    """Desk-scale MNIST profile: 14x14 digits, 8-channel SOBlock analog."""
    return ExperimentConfig(
        desk_spec(SolverConfig("dopri5", tol=0.1)),
        TrainConfig(epochs=10, batch_size=50, lr=0.05, milestones=(8,)),
        parse_attack_list("pgd_linf:20", MNIST_ATTACKS),
        DataConfig("mnist", n_train=4000, n_test=1000, eval_examples=200),
        out="runs/default")


def build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else default_config()
    spec, tcfg = cfg.model, cfg.train
    if args.model:
        spec = replace(spec, architecture=args.model)
    if args.channels:
        widths = spec.widths and tuple(args.channels * w // spec.channels for w in spec.widths)
        spec = replace(spec, channels=args.channels, widths=widths)
    if args.solver or args.tol is not None:
        solver = spec.solver
        solver = replace(solver, method=args.solver or solver.method,
                         tol=args.tol if args.tol is not None else solver.tol)
        spec = replace(spec, solver=solver)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    cfg.model, cfg.train = spec, tcfg
    if args.attack is not None:
        base = MNIST_ATTACKS if cfg.data.name == "mnist" else None
        cfg.attacks = parse_attack_list(args.attack, base)
    if args.out:
        cfg.out = args.out
    return cfg.apply_seed(args.seed if args.seed is not None else cfg.seed)


def _common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--model", choices=("sonet", "soblock", "resnet10", "odenet"))
    p.add_argument("--solver", choices=("euler", "rk4", "dopri5"))
    p.add_argument("--tol", type=float)
    p.add_argument("--attack", help="comma list, e.g. pgd_linf:20,cw_linf,spsa")
    p.add_argument("--epochs", type=int)
    p.add_argument("--channels", type=int)


def cmd_train(args) -> int:
    cfg = build_config(args)
    cfg.attacks = []
    rep = run_experiment(cfg)
    print(json.dumps({"out": cfg.out, "A_nat": rep.a_nat}))
    return 0


def cmd_attack(args) -> int:
    cfg = build_config(args)
    model = load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    rep = run_experiment(cfg, model=model)
    sys.stdout.write(rep.to_csv())
    return 0


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    tr, te = load_data(cfg.data, cfg.seed)
    res = solver_ablation(tr, te, cfg.train, cfg.attacks, channels=cfg.model.channels,
                          eval_examples=cfg.data.eval_examples, seed=cfg.seed,
                          step_gradients=args.step_gradients)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    (out / "report.json").write_text(json.dumps([r.to_dict() for r in res.reports],
                                                sort_keys=True) + "\n")
    with open(out / "steps.jsonl", "w") as fh:
        for r in res.step_rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    (out / "table2.csv").write_text(res.table2())
    (out / "table4.csv").write_text(res.table4())
    sys.stdout.write(res.table2() + "\n" + res.table4())
    return 0


def cmd_stability(args) -> int:
    rng = np.random.default_rng(args.seed or 0)
    certs, orth = [], []
    for _ in range(args.blocks):
        m, n = rng.integers(1, args.dim + 1, size=2)
        p = SkewOdeBlockParams(rng.standard_normal((m, n)), args.gamma, 1.0, args.activation)
        c = certify(p, rng.standard_normal(n), rng.standard_normal(m))
        certs.append(c)
    for _ in range(min(args.blocks, 5)):
        k = int(rng.integers(1, 9))
        orth.append(transition_orthogonality_check(rng.standard_normal((k, k)), 1.0, 1e-9))
    W = rng.standard_normal((4, 4))
    probe = lyapunov_probe(SkewOdeBlockParams(W, 0.0, 1.0, "identity"), rng.standard_normal(4),
                           [0.0, 0.01, 0.1], [1.0, 5.0, 10.0])
    out = {"certificates": {"count": len(certs),
                            "stable": sum(c.verdict == "stable" for c in certs),
                            "worst_bound": max(c.abscissa_bound for c in certs),
                            "worst_eigen_gap": max(c.max_symmetric_eigenvalue - c.abscissa_bound
                                                   for c in certs)},
           "orthogonality_max_deviation": max(orth),
           "lyapunov_probe": probe}
    print(json.dumps(out, indent=2))
    ok = out["certificates"]["stable"] == len(certs) if args.gamma > 0 else True
    return 0 if ok else 1


def _load_reports(paths):
    reports, rows = [], []
    for p in map(Path, paths):
        if p.is_dir():
            for name in ("report.json", "steps.jsonl"):
                if (p / name).exists():
                    r, s = _load_reports([p / name])
                    reports += r
                    rows += s
        elif p.suffix == ".jsonl":
            rows += [json.loads(line) for line in p.read_text().splitlines() if line.strip()]
        else:
            d = json.loads(p.read_text())
            for item in d if isinstance(d, list) else [d]:
                reports.append(RobustReport.from_dict(item))
    return reports, rows


def cmd_report(args) -> int:
    reports, rows = _load_reports(args.inputs)
    sys.stdout.write(emit_table(rows if args.layout == "table4" else reports, args.layout))
    return 0


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sonetlab", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write its artifacts")
    _common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="train (or load) a model and run the attack list")
    _common(p)
    p.add_argument("--checkpoint", help="attack this checkpoint instead of training")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("ablate-solvers", help="euler / rk4 / dopri5 at three tolerances")
    _common(p)
    p.add_argument("--step-gradients", action="store_true",
                   help="differentiate through the dopri5 step-size controller")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("stability-check", help="certificates, orthogonality and probes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", type=int, default=100)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--activation", default="tanh")
    p.set_defaults(fn=cmd_stability)

    p = sub.add_parser("report", help="emit a table from report.json / steps.jsonl files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--layout", choices=LAYOUTS, default="table1")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
