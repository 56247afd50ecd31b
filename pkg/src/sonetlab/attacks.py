"""White-box PGD and CW attacks, the gradient-free SPSA attack, and robust accuracy.

All attacks take a batch ``x`` in ``[0, 1]`` with integer labels ``y`` and
return ``x_adv`` inside the threat ball intersected with ``[0, 1]^n`` after
every iteration. Non-finite input gradients are zeroed coordinate-wise and
counted in ``stats["nonfinite_grad"]``; they are the visible trace of a
masked gradient.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .blocks import Context, Model
from .tensor import Tape, grad

logger = logging.getLogger(__name__)

KINDS = ("pgd_linf", "pgd_l2", "cw_linf", "spsa")

_DEFAULTS = {
    "pgd_linf": dict(epsilon=0.031, step=0.003, iterations=20),
    "pgd_l2": dict(epsilon=0.5, step=0.1, iterations=20),
    "cw_linf": dict(epsilon=0.031, step=0.003, iterations=100),
    "spsa": dict(epsilon=0.031, step=0.003, iterations=20),
}


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    epsilon: float
    step: float
    iterations: int
    spsa_samples: int = 32
    spsa_delta: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; choose from {KINDS}")
        if self.epsilon < 0 or self.step <= 0 or self.iterations < 1:
            raise ValueError("need epsilon >= 0, step > 0, iterations >= 1")

    @classmethod
    def default(cls, kind: str, **overrides) -> "AttackConfig":
        """CIFAR-10 settings: l_inf eps 0.031 / step 0.003, l2 eps 0.5 / step 0.1,
        CW K=100, SPSA K=20 with 32 samples."""
        params = dict(_DEFAULTS[kind])
        params.update(overrides)
        return cls(kind, **params)

    @property
    def label(self) -> str:
        return f"{self.kind}^{self.iterations}"


def _check_input(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("attack inputs must lie in [0, 1]")
    return x


def project_linf(x_adv, x, eps):
    return np.clip(x_adv, np.maximum(x - eps, 0.0), np.minimum(x + eps, 1.0))


def _flat_norm(v):
    return np.sqrt((v.reshape(v.shape[0], -1) ** 2).sum(axis=1))


def _bcast(v, ndim):
    return v.reshape(v.shape + (1,) * (ndim - 1))


def project_l2(x_adv, x, eps):
    d = x_adv - x
    n = _flat_norm(d)
    scale = np.where(n > eps, eps / np.maximum(n, 1e-300), 1.0)
    return np.clip(x + d * _bcast(scale, d.ndim), 0.0, 1.0)


def input_gradient(model, x, y, loss: str = "ce", stats: dict | None = None):
    """Loss values per example and d(sum loss)/dx, non-finite entries zeroed."""
    tape = Tape()
    xt = tape.leaf(x)
    ctx = Context(tape, training=False, param_grad=False)
    logits = model.forward(xt, ctx)
    if loss == "ce":
        per = F.cross_entropy_logits(logits, y)
    elif loss == "margin":
        per = F.cw_margin(logits, y)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    (g,) = grad(per.sum(), xt)
    bad = ~np.isfinite(g)
    if bad.any():
        logger.info("zeroing %d non-finite gradient entries", int(bad.sum()))
        if stats is not None:
            stats["nonfinite_grad"] = stats.get("nonfinite_grad", 0) + int(bad.sum())
        g = np.where(bad, 0.0, g)
    return per.data, g, logits.data


def pgd_linf(model, x, y, cfg: AttackConfig, stats: dict | None = None) -> np.ndarray:
    """``x' <- Proj(x' + step * sign(grad CE))`` starting from ``x``."""
    x = _check_input(x)
    x_adv = x.copy()
    for _ in range(cfg.iterations):
        _, g, _ = input_gradient(model, x_adv, y, "ce", stats)
        x_adv = project_linf(x_adv + cfg.step * np.sign(g), x, cfg.epsilon)
    return x_adv


def pgd_l2(model, x, y, cfg: AttackConfig, stats: dict | None = None) -> np.ndarray:
    """Normalized-gradient steps projected onto the l2 ball; zero gradients skip."""
    x = _check_input(x)
    x_adv = x.copy()
    for _ in range(cfg.iterations):
        _, g, _ = input_gradient(model, x_adv, y, "ce", stats)
        n = _flat_norm(g)
        unit = g / _bcast(np.where(n > 0, n, 1.0), g.ndim)
        x_adv = project_l2(x_adv + cfg.step * unit, x, cfg.epsilon)
    return x_adv


def cw_linf(model, x, y, cfg: AttackConfig, stats: dict | None = None) -> np.ndarray:
    """Margin-loss sign descent inside the l_inf box.

    An example is frozen as soon as its margin turns negative, so inputs the
    model already gets wrong come back unchanged.
    """
    x = _check_input(x)
    x_adv = x.copy()
    y = np.asarray(y)
    active = np.ones(len(x), dtype=bool)
    for _ in range(cfg.iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        m, g, _ = input_gradient(model, x_adv[idx], y[idx], "margin", stats)
        won = m < 0
        step = project_linf(x_adv[idx] - cfg.step * np.sign(g), x[idx], cfg.epsilon)
        x_adv[idx[~won]] = step[~won]
        active[idx[won]] = False
    if active.any():
        idx = np.flatnonzero(active)
        m = F.cw_margin(model.logits(x_adv[idx]), y[idx]).data
        active[idx[m < 0]] = False
    return x_adv


def margin_values(model, x, y, chunk: int = 512) -> np.ndarray:
    out = [F.cw_margin(model.logits(x[i:i + chunk]), y[i:i + chunk]).data
           for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def spsa_gradient(objective, x, samples: int, delta: float, rng) -> np.ndarray:
    """Two-point SPSA estimate of the gradient of ``objective`` at each example.

    ``objective`` maps a batch to one value per row. Directions are Rademacher
    vectors; returns ``mean_v (m(x+dv) - m(x-dv)) / (2d) * v``.
    """
    B = x.shape[0]
    v = rng.choice(np.array([-1.0, 1.0]), size=(B, samples) + x.shape[1:])
    xs = x[:, None]
    pts = np.concatenate([xs + delta * v, xs - delta * v], axis=1)
    vals = objective(pts.reshape((-1,) + x.shape[1:])).reshape(B, 2 * samples)
    diff = (vals[:, :samples] - vals[:, samples:]) / (2 * delta)
    return (diff.reshape(diff.shape + (1,) * (x.ndim - 1)) * v).mean(axis=1)


def spsa(model, x, y, cfg: AttackConfig, stats: dict | None = None) -> np.ndarray:
    """Gradient-free sign descent on the margin with SPSA estimates.

    Examples are frozen once misclassified. Randomness comes from ``cfg.seed``.
    """
    x = _check_input(x)
    y = np.asarray(y)
    rng = np.random.default_rng(cfg.seed)
    x_adv = x.copy()
    active = margin_values(model, x_adv, y) >= 0
    for _ in range(cfg.iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        yi = np.repeat(y[idx], 2 * cfg.spsa_samples)
        g = spsa_gradient(lambda pts: margin_values(model, pts, yi), x_adv[idx],
                          cfg.spsa_samples, cfg.spsa_delta, rng)
        x_adv[idx] = project_linf(x_adv[idx] - cfg.step * np.sign(g), x[idx], cfg.epsilon)
        m = margin_values(model, x_adv[idx], y[idx])
        active[idx[m < 0]] = False
    return x_adv


ATTACKS = {"pgd_linf": pgd_linf, "pgd_l2": pgd_l2, "cw_linf": cw_linf, "spsa": spsa}


def run_attack(model, x, y, cfg: AttackConfig, stats: dict | None = None) -> np.ndarray:
    return ATTACKS[cfg.kind](model, x, y, cfg, stats)


@dataclass
class AttackResult:
    attack: str
    epsilon: float
    steps: int
    a_rob: float
    nonfinite_grad: int = 0


@dataclass
class RobustReport:
    model: str
    channels: int
    a_nat: float
    n: int
    seed: int
    results: list[AttackResult] = field(default_factory=list)
    solver: str = ""

    def a_rob(self, attack: str) -> float:
        for r in self.results:
            if r.attack == attack:
                return r.a_rob
        raise KeyError(attack)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RobustReport":
        d = dict(d)
        d["results"] = [AttackResult(**r) for r in d.get("results", [])]
        return cls(**d)

    CSV_FIELDS = ("model", "channels", "solver", "attack", "epsilon", "steps", "A_nat", "A_rob",
                  "seed")

    def csv_rows(self) -> list[dict]:
        base = dict(model=self.model, channels=self.channels, solver=self.solver,
                    A_nat=f"{self.a_nat:.6f}", seed=self.seed)
        if not self.results:
            return [dict(base, attack="", epsilon="", steps="", A_rob="")]
        return [dict(base, attack=r.attack, epsilon=f"{r.epsilon:g}", steps=r.steps,
                     A_rob=f"{r.a_rob:.6f}") for r in self.results]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.csv_rows())
        return buf.getvalue()


def robust_eval(model: Model, x, y, cfgs, seed: int = 0, batch_size: int = 100,
                name: str = "", channels: int = 0, solver: str = "") -> RobustReport:
    """Natural accuracy and per-attack robust accuracy on ``(x, y)``."""
    x = _check_input(x)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("robust_eval needs a non-empty dataset")
    pred = np.concatenate([model.predict(x[i:i + batch_size])
                           for i in range(0, len(x), batch_size)])
    report = RobustReport(name or model.spec.architecture, channels or model.spec.channels,
                          float((pred == y).mean()), len(x), seed, solver=solver)
    for cfg in cfgs:
        stats: dict = {}
        correct = 0
        for i in range(0, len(x), batch_size):
            xa = run_attack(model, x[i:i + batch_size], y[i:i + batch_size], cfg, stats)
            correct += int((model.predict(xa) == y[i:i + batch_size]).sum())
        report.results.append(AttackResult(cfg.label, cfg.epsilon, cfg.iterations,
                                           correct / len(x), stats.get("nonfinite_grad", 0)))
    return report
