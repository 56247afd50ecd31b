"""Natural and TRADES training with SGD momentum and a step learning-rate schedule."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .attacks import project_linf
from .blocks import Context, Model, Parameter
from .tensor import Tape, backprop

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient turns non-finite; carries the last finite state."""

    def __init__(self, msg, state=None, epoch=None):
        super().__init__(msg)
        self.state = state
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 350
    batch_size: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    milestones: tuple[int, ...] = (150, 300)
    decay: float = 0.1
    method: str = "natural"
    beta: float = 6.0
    trades_steps: int = 10
    trades_step: float = 0.007
    trades_eps: float = 0.031
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("natural", "trades"):
            raise ValueError(f"unknown training method {self.method!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("need epochs >= 0, batch_size >= 1, lr >= 0")
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Initial lr times ``decay`` for every milestone already passed."""
    return cfg.lr * cfg.decay ** sum(epoch >= m for m in cfg.milestones)


def sgd_momentum_step(params: list[Parameter], grads, lr: float, state: dict,
                      momentum: float = 0.9) -> None:
    """``v <- momentum*v + g; p <- p - lr*v`` in place; no weight decay."""
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise ValueError(f"{p.name}: gradient shape {g.shape} != {p.value.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {p.name}")
    for p, g in zip(params, grads):
        v = state.get(p.name)
        v = g.copy() if v is None else momentum * v + g
        state[p.name] = v
        p.value -= lr * v


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    acc: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochLog] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h.loss for h in self.history]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lr", "loss", "acc"])
            for h in self.history:
                w.writerow([h.epoch, f"{h.lr:.6g}", f"{h.loss:.6f}", f"{h.acc:.6f}"])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def param_gradients(model: Model, loss_fn) -> tuple[float, np.ndarray, list[np.ndarray]]:
    """Record ``loss_fn(ctx)`` on a fresh tape; return loss, logits, parameter grads.

    ``loss_fn`` returns ``(scalar_loss, logits)``.
    """
    tape = Tape()
    ctx = Context(tape, training=True)
    loss, logits = loss_fn(ctx)
    params = model.parameters()
    gmap = backprop(tape, loss)
    grads = []
    for p in params:
        i = tape.param_index(p)
        grads.append(np.zeros_like(p.value) if i is None
                     else gmap.get(i, np.zeros_like(p.value)))
    return float(loss.data), logits, grads


def trades_inner_max(model: Model, x, cfg: TrainConfig, rng=None, history=None) -> np.ndarray:
    """Sign ascent on ``KL(f(x) || f(x'))`` inside the l_inf ball of radius ``trades_eps``.

    Starts from ``x`` plus 0.001 Gaussian noise (at ``x'`` = ``x`` the KL
    gradient vanishes identically). Examples whose gradient stays exactly zero
    on every step found no ascent direction and are returned as ``x``.
    When ``history`` is a list, the mean objective after each step is appended.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.trades_eps == 0:
        return x.copy()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    nat = model.logits(x).data
    x_adv = project_linf(x + 0.001 * rng.standard_normal(x.shape), x, cfg.trades_eps)
    moved = np.zeros(len(x), dtype=bool)
    for _ in range(cfg.trades_steps):
        tape = Tape()
        xt = tape.leaf(x_adv)
        kl = F.kl_consistency(model.forward(xt, Context(tape, param_grad=False)), nat)
        g = backprop(tape, kl.sum()).get(xt.index, np.zeros_like(x_adv))
        g = np.where(np.isfinite(g), g, 0.0)
        moved |= np.any(g.reshape(len(x), -1) != 0, axis=1)
        x_adv = project_linf(x_adv + cfg.trades_step * np.sign(g), x, cfg.trades_eps)
        if history is not None:
            history.append(float(F.kl_consistency(model.logits(x_adv), nat).data.mean()))
    x_adv[~moved] = x[~moved]
    return x_adv


def trades_loss(model: Model, x, x_adv, y, beta: float, ctx: Context):
    """``mean CE(f(x'), y) + beta * mean KL(f(x) || f(x'))``; returns (loss, adv logits)."""
    adv = model.forward(x_adv, ctx)
    loss = F.cross_entropy_logits(adv, y).mean()
    if beta:
        nat = model.forward(x, ctx)
        loss = loss + beta * F.kl_consistency(adv, nat).mean()
    return loss, adv


def _train(model: Model, data, cfg: TrainConfig, log_every: int = 1) -> TrainResult:
    x_all, y_all = data.images, data.labels
    rng = np.random.default_rng(cfg.seed)
    state: dict = {}
    result = TrainResult(model)
    params = model.parameters()
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        last_good = {k: v.copy() for k, v in model.state().items()}
        total, correct, count = 0.0, 0, 0
        for idx in _batches(len(y_all), cfg.batch_size, rng):
            x, y = x_all[idx], y_all[idx]
            if cfg.method == "trades":
                x_adv = trades_inner_max(model, x, cfg, rng)

                def fn(ctx, x=x, x_adv=x_adv, y=y):
                    return trades_loss(model, x, x_adv, y, cfg.beta, ctx)
            else:
                def fn(ctx, x=x, y=y):
                    logits = model.forward(x, ctx)
                    return F.cross_entropy_logits(logits, y).mean(), logits
            loss, logits, grads = param_gradients(model, fn)
            if not np.isfinite(loss):
                model.load_state(last_good)
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", last_good, epoch)
            try:
                sgd_momentum_step(params, grads, lr, state, cfg.momentum)
            except TrainingDiverged as exc:
                model.load_state(last_good)
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good, epoch) from None
            total += loss * len(idx)
            correct += int((F.predict_logits(logits.data) == y).sum())
            count += len(idx)
        entry = EpochLog(epoch, lr, total / max(count, 1), correct / max(count, 1))
        result.history.append(entry)
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d lr %.4g loss %.4f acc %.4f", epoch, lr, entry.loss, entry.acc)
    return result


def natural_train(model: Model, data, cfg: TrainConfig) -> TrainResult:
    """Minimize mean cross-entropy over shuffled minibatches."""
    if cfg.method != "natural":
        cfg = TrainConfig(**{**cfg.to_dict(), "method": "natural"})
    return _train(model, data, cfg)


def trades_train(model: Model, data, cfg: TrainConfig) -> TrainResult:
    """TRADES with the cross-entropy term at the adversarial point."""
    if cfg.method != "trades":
        cfg = TrainConfig(**{**cfg.to_dict(), "method": "trades"})
    return _train(model, data, cfg)


def train(model: Model, data, cfg: TrainConfig) -> TrainResult:
    return _train(model, data, cfg)
