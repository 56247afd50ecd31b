"""Experiment configuration, end-to-end runs and table emission."""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import traceback
from dataclasses import dataclass, field, fields, replace
from pathlib import Path


from . import data as D
from .attacks import KINDS, AttackConfig, RobustReport, robust_eval, run_attack
from .blocks import NetworkSpec, assemble_network, load_checkpoint, save_checkpoint
from .solvers import SolverConfig, StepTrace
from .training import TrainConfig, TrainResult, train

logger = logging.getLogger(__name__)

ARTIFACTS = ("config.ini", "train_log.csv", "checkpoint.bin", "report.json", "report.csv",
             "steps.jsonl", "manifest.json")


@dataclass(frozen=True)
class DataConfig:
    name: str = "mnist"  # mnist, cifar, blobs or rings
    path: str = ""
    n_train: int = 4000
    n_test: int = 1000
    downsample: bool = True
    eval_examples: int = 200

    def __post_init__(self):
        if self.name not in ("mnist", "cifar", "blobs", "rings"):
            raise ValueError(f"unknown dataset {self.name!r}")


@dataclass
class ExperimentConfig:
    model: NetworkSpec = field(default_factory=NetworkSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    attacks: list[AttackConfig] = field(default_factory=list)
    data: DataConfig = field(default_factory=DataConfig)
    out: str = "runs/default"
    seed: int = 0
    trace_examples: int = 1

    def __post_init__(self):
        self.apply_seed(self.seed)

    def apply_seed(self, seed: int) -> "ExperimentConfig":
        """Route the single run seed into model init, training and attacks."""
        self.seed = int(seed)
        self.model = replace(self.model, seed=self.seed)
        self.train = replace(self.train, seed=self.seed)
        self.attacks = [replace(a, seed=self.seed) for a in self.attacks]
        return self

    # -- key = value serialization ---------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"seed": str(self.seed), "out": self.out,
                     "trace_examples": str(self.trace_examples)}
        m = self.model
        cp["model"] = {
            "architecture": m.architecture, "channels": str(m.channels),
            "layers": str(m.layers), "classes": str(m.classes),
            "in_channels": str(m.in_channels), "activation": m.activation,
            "gamma": repr(m.gamma), "t_end": repr(m.t_end),
            "widths": ",".join(str(w) for w in m.widths) if m.widths else "",
            "kernel_scale": repr(m.kernel_scale),
        }
        s = m.solver
        cp["solver"] = {f.name: _fmt(getattr(s, f.name)) for f in fields(s)}
        t = self.train
        cp["train"] = {f.name: _fmt(getattr(t, f.name)) for f in fields(t) if f.name != "seed"}
        cp["data"] = {f.name: _fmt(getattr(self.data, f.name)) for f in fields(self.data)}
        cp["attacks"] = {"list": ",".join(f"{a.kind}:{a.iterations}" for a in self.attacks)}
        for i, a in enumerate(self.attacks):
            cp[f"attack.{i}"] = {f.name: _fmt(getattr(a, f.name))
                                 for f in fields(a) if f.name != "seed"}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_string(text)
        run = cp["run"] if cp.has_section("run") else {}
        model_kw = {}
        if cp.has_section("model"):
            sec = cp["model"]
            for key, conv in (("architecture", str), ("channels", int), ("layers", int),
                              ("classes", int), ("in_channels", int), ("activation", str),
                              ("gamma", float), ("t_end", float), ("kernel_scale", float)):
                if key in sec:
                    model_kw[key] = conv(sec[key])
            if sec.get("widths", "").strip():
                model_kw["widths"] = tuple(int(w) for w in sec["widths"].split(","))
        solver = _load_section(cp, "solver", SolverConfig)
        tcfg = _load_section(cp, "train", TrainConfig)
        dcfg = _load_section(cp, "data", DataConfig)
        attacks = []
        if cp.has_section("attacks"):
            n = len([x for x in cp["attacks"].get("list", "").split(",") if x.strip()])
            for i in range(n):
                attacks.append(_load_section(cp, f"attack.{i}", AttackConfig))
        spec = NetworkSpec(solver=solver, **model_kw)
        return cls(spec, tcfg, attacks, dcfg, run.get("out", "runs/default"),
                   int(run.get("seed", 0)), int(run.get("trace_examples", 1)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _load_section(cp, name, cls):
    if not cp.has_section(name):
        return cls(**({"kind": "pgd_linf", "epsilon": 0.031, "step": 0.003, "iterations": 20}
                      if cls is AttackConfig else {}))
    sec = cp[name]
    kw = {}
    for f in fields(cls):
        if f.name not in sec:
            continue
        kind = str(f.type)
        raw = sec[f.name]
        if kind.startswith("bool"):
            kw[f.name] = sec.getboolean(f.name)
        elif kind.startswith("tuple"):
            kw[f.name] = tuple(int(x) for x in raw.split(",") if x.strip())
        elif kind.startswith("int"):
            kw[f.name] = int(raw)
        elif kind.startswith("float"):
            kw[f.name] = float(raw)
        else:
            kw[f.name] = raw
    return cls(**kw)


def parse_attack_list(text: str, base: dict | None = None) -> list[AttackConfig]:
    """``"pgd_linf:20,spsa"`` -> attack configs; ``base`` overrides per-kind defaults."""
    out = []
    for item in (s.strip() for s in text.split(",")):
        if not item:
            continue
        kind, _, iters = item.partition(":")
        if kind not in KINDS:
            raise ValueError(f"unknown attack {kind!r}; choose from {KINDS}")
        kw = dict((base or {}).get(kind, {}))
        if iters:
            kw["iterations"] = int(iters)
        out.append(AttackConfig.default(kind, **kw))
    return out


# ---------------------------------------------------------------------------
# data


def load_data(cfg: DataConfig, seed: int = 0) -> tuple[D.Dataset, D.Dataset]:
    if cfg.name == "mnist":
        return D.mnist_subset(cfg.n_train, cfg.n_test, seed, cfg.downsample)
    if cfg.name == "cifar":
        root = Path(cfg.path)
        tr = D.load_cifar_binary(root / "data_batch_1.bin").head(cfg.n_train)
        te = D.load_cifar_binary(root / "test_batch.bin", split="test").head(cfg.n_test)
        if cfg.downsample:
            tr = D.Dataset(D.downsample2(tr.images), tr.labels, "train")
            te = D.Dataset(D.downsample2(te.images), te.labels, "test")
        return tr, te
    full = D.make_synthetic(cfg.name, cfg.n_train + cfg.n_test, seed, image=True)
    return (full.subset(slice(0, cfg.n_train), "train"),
            full.subset(slice(cfg.n_train, None), "test"))


# ---------------------------------------------------------------------------
# runs


def _ode_traces(model, x) -> list[StepTrace]:
    for name, traces in model.step_traces(x):
        if traces and traces[0].method == "dopri5":
            return traces
    return []


def step_rows(model, x, y, attack: AttackConfig, iterations, examples: int = 1) -> list[dict]:
    """Step traces of the first adaptive block at PGD iterates (Table 4 layout)."""
    rows = []
    x, y = x[:examples], y[:examples]
    solver = model.spec.solver
    for k in iterations:
        xa = x if k == 0 else run_attack(model, x, y, replace(attack, iterations=int(k)))
        for i, tr in enumerate(_ode_traces(model, xa)):
            rows.append({"solver": solver.label, "tol": solver.tol, "pgd_iterations": int(k),
                         "example": i, "accepted_times": [round(t, 6) for t in
                                                          tr.accepted_times],
                         "rejected": tr.rejected_count})
    return rows


class _Manifest:
    def __init__(self, out: Path):
        self.path = out / "manifest.json"
        self.state = {"status": "running", "completed": [], "error": None}
        self.flush()

    def done(self, stage: str) -> None:
        self.state["completed"].append(stage)
        self.flush()

    def finish(self, status: str, error: str | None = None) -> None:
        self.state["status"] = status
        self.state["error"] = error
        self.flush()

    def flush(self) -> None:
        self.path.write_text(json.dumps(self.state, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, model=None, out=None) -> RobustReport:
    """Train (or reuse ``model``), attack, and write every artifact under ``cfg.out``.

    On failure the artifacts written so far are kept and the manifest records
    the error and the stages that completed.
    """
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    man = _Manifest(out)
    try:
        cfg.save(out / "config.ini")
        man.done("config")
        tr_data, te_data = load_data(cfg.data, cfg.seed)
        man.done("data")
        if model is None:
            spec = replace(cfg.model, in_channels=tr_data.images.shape[1],
                           classes=max(tr_data.classes, te_data.classes, 2))
            model = assemble_network(spec)
            result = train(model, tr_data, cfg.train)
        else:
            result = TrainResult(model)
        result.write_csv(out / "train_log.csv")
        save_checkpoint(model, out / "checkpoint.bin", {"seed": cfg.seed})
        man.done("train")
        n = min(cfg.data.eval_examples, len(te_data))
        x, y = te_data.images[:n], te_data.labels[:n]
        report = robust_eval(model, x, y, cfg.attacks, seed=cfg.seed,
                             solver=model.spec.solver.label)
        (out / "report.json").write_text(report.to_json() + "\n")
        (out / "report.csv").write_text(report.to_csv())
        man.done("attack")
        rows = []
        if model.spec.solver.method == "dopri5":
            pgd = [a for a in cfg.attacks if a.kind == "pgd_linf"]
            iters = sorted({0, 1} | {a.iterations for a in pgd})
            rows = step_rows(model, x, y, pgd[0] if pgd else AttackConfig.default("pgd_linf"),
                             iters, cfg.trace_examples)
        with open(out / "steps.jsonl", "w") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        man.done("steps")
    except Exception as exc:
        man.finish("failed", f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}")
        raise
    man.finish("complete")
    return report


def load_model(path):
    return load_checkpoint(path)[0]


# ---------------------------------------------------------------------------
# tables

LAYOUTS = ("table1", "table2", "table3", "table4")


def _pct(v) -> str:
    return "" if v is None else f"{100 * v:.2f}"


def emit_table(reports, layout: str) -> str:
    """CSV in a fixed column order; rows sorted so input order never matters.

    ``table1``/``table3``: model, channels, A_nat, one A_rob column per attack.
    ``table2``: model, solver, A_nat, one A_rob column per attack.
    ``table4``: ``reports`` are step rows (solver, pgd_iterations, accepted_times).
    Missing cells are left blank.
    """
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; choose from {LAYOUTS}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if layout == "table4":
        w.writerow(["solver", "pgd_iterations", "accepted_times"])
        rows = sorted(reports, key=lambda r: (float(r.get("tol") or 0) * -1, r["solver"],
                                              int(r["pgd_iterations"]), r.get("example", 0)))
        for r in rows:
            times = ", ".join(f"{t:.1f}" if t in (0.0, 1.0) else f"{t:.3f}"
                              for t in r["accepted_times"])
            w.writerow([r["solver"], r["pgd_iterations"], f"[{times}]"])
        return buf.getvalue()
    reports = [r if isinstance(r, RobustReport) else RobustReport.from_dict(r) for r in reports]
    attacks = sorted({res.attack for r in reports for res in r.results})
    second = "solver" if layout == "table2" else "channels"
    w.writerow(["model", second, "A_nat"] + attacks)
    keyed = sorted(reports, key=lambda r: (r.model, str(getattr(r, second)), r.a_nat, r.seed))
    for r in keyed:
        by = {res.attack: res.a_rob for res in r.results}
        w.writerow([r.model, getattr(r, second), _pct(r.a_nat)] + [_pct(by.get(a))
                                                                   for a in attacks])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# desk-scale solver ablation


ABLATION_SOLVERS = (("euler", None), ("rk4", None), ("dopri5", 0.1), ("dopri5", 0.01),
                    ("dopri5", 0.001))


@dataclass
class AblationResult:
    reports: list[RobustReport]
    models: dict
    step_rows: list[dict]

    def table2(self) -> str:
        return emit_table(self.reports, "table2")

    def table4(self) -> str:
        return emit_table(self.step_rows, "table4")


def desk_spec(solver: SolverConfig, channels: int = 8, seed: int = 0,
              architecture: str = "soblock") -> NetworkSpec:
    """8-channel SOBlock analog for 1x14x14 digits: ODE stem plus two basic blocks."""
    return NetworkSpec(architecture, channels=channels, in_channels=1, classes=10,
                       widths=(channels, 2 * channels), solver=solver, seed=seed)


def solver_ablation(tr_data, te_data, train_cfg: TrainConfig, attacks, channels: int = 8,
                    solvers=ABLATION_SOLVERS, eval_examples: int = 200, seed: int = 0,
                    step_gradients: bool = False, trace_iterations=(1, 20, 100)
                    ) -> AblationResult:
    """Train one model per solver and evaluate each under ``attacks``."""
    reports, models, rows = [], {}, []
    x, y = te_data.images[:eval_examples], te_data.labels[:eval_examples]
    for method, tol in solvers:
        solver = SolverConfig(method, tol=tol or 0.1, step_gradients=step_gradients)
        model = assemble_network(desk_spec(solver, channels, seed))
        train(model, tr_data, replace(train_cfg, seed=seed))
        rep = robust_eval(model, x, y, attacks, seed=seed, name="soblock",
                          solver=solver.label)
        logger.info("%s A_nat %.3f %s", solver.label, rep.a_nat,
                    [(r.attack, r.a_rob) for r in rep.results])
        reports.append(rep)
        models[solver.label] = model
        if method == "dopri5":
            pgd = next((a for a in attacks if a.kind == "pgd_linf"),
                       AttackConfig.default("pgd_linf"))
            rows += step_rows(model, x, y, pgd, trace_iterations, 1)
    return AblationResult(reports, models, rows)
