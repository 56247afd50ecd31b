import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from toy import LinearModel, MLPModel

from sonetlab import functional as F
from sonetlab import tensor as T
from sonetlab.attacks import (AttackConfig, RobustReport, cw_linf, input_gradient, pgd_l2,
                              pgd_linf, project_l2, robust_eval, run_attack, spsa,
                              spsa_gradient)
from sonetlab.blocks import Context
from sonetlab.tensor import Tape, grad

KINDS = ["pgd_linf", "pgd_l2", "cw_linf", "spsa"]


def _cfg(kind, **kw):
    return AttackConfig.default(kind, **kw)


def test_defaults():
    assert _cfg("pgd_linf") == AttackConfig("pgd_linf", 0.031, 0.003, 20)
    assert _cfg("pgd_l2") == AttackConfig("pgd_l2", 0.5, 0.1, 20)
    assert _cfg("cw_linf").iterations == 100
    assert _cfg("spsa").spsa_samples == 32 and _cfg("spsa").iterations == 20
    assert _cfg("pgd_linf").label == "pgd_linf^20"
    with pytest.raises(ValueError):
        AttackConfig("pgd_linf", 0.1, 0.0, 10)
    with pytest.raises(ValueError):
        AttackConfig("fgsm", 0.1, 0.1, 1)


@pytest.mark.parametrize("kind", KINDS)
def test_constant_model_is_fixed_point(kind):
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(5, 1, 3, 3))
    model = LinearModel(np.zeros((3, 9)), [0.5, 0.1, -0.2])
    out = run_attack(model, x, np.zeros(5, dtype=int), _cfg(kind, epsilon=0.2, step=0.05,
                                                             iterations=5))
    assert np.array_equal(out, x)


def test_pgd_linf_single_step_direction():
    # class 1 logit grows with x; the true class 0 is hurt by increasing x
    model = LinearModel([[0.0], [2.0]])
    x = np.array([[0.5]])
    out = pgd_linf(model, x, np.array([0]), AttackConfig("pgd_linf", 0.1, 0.03, 1))
    assert out[0, 0] == pytest.approx(0.53)
    out = pgd_linf(model, x, np.array([0]), AttackConfig("pgd_linf", 0.1, 0.03, 10))
    assert out[0, 0] == pytest.approx(0.6)


def test_pgd_l2_quadratic_direction():
    # CE gradient of this 2-class model is proportional to x itself
    x = np.array([[0.3, 0.4]])
    model = LinearModel(np.stack([np.zeros(2), x[0]]))
    _, g, _ = input_gradient(model, x, np.array([0]))
    assert np.allclose(g / np.linalg.norm(g), x / np.linalg.norm(x))
    out = pgd_l2(model, x, np.array([0]), AttackConfig("pgd_l2", 1.0, 0.1, 1))
    assert np.allclose(out - x, 0.1 * x / np.linalg.norm(x))


def test_project_l2_keeps_small_steps():
    x = np.zeros((1, 3))
    assert np.array_equal(project_l2(x + 0.1, x, 1.0), x + 0.1)
    assert np.linalg.norm(project_l2(x + 1.0, x, 0.5)) == pytest.approx(0.5)


def test_cw_leaves_misclassified_inputs():
    model = LinearModel([[1.0, 0.0], [0.0, 1.0]])
    x = np.array([[0.2, 0.9]])
    out = cw_linf(model, x, np.array([0]), _cfg("cw_linf", epsilon=0.3))
    assert np.array_equal(out, x)


def test_cw_matches_vertex_search():
    rng = np.random.default_rng(1)
    d = 8
    for trial in range(20):
        w = rng.standard_normal((2, d))
        x = rng.uniform(size=(1, d))
        y = int(np.argmax(w @ x[0]))
        eps = 0.1
        model = LinearModel(w)
        out = cw_linf(model, x, np.array([y]), AttackConfig("cw_linf", eps, eps / 5, 50))
        best = min(float((w[y] - w[1 - y]) @ np.clip(x[0] + eps * np.array(s), 0, 1))
                   for s in itertools.product((-1, 1), repeat=d))
        flipped = model.predict(out)[0] != y
        assert flipped == (best < 0)


def test_spsa_estimate_aligns_with_gradient():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 8))
    g = spsa_gradient(lambda p: 0.5 * (p ** 2).sum(axis=1), x, 256, 0.01, rng)
    cos = (g * x).sum() / (np.linalg.norm(g) * np.linalg.norm(x))
    assert cos > 0.9


def test_spsa_estimator_is_unbiased_on_cubic():
    rng = np.random.default_rng(3)
    x = np.array([[0.3, -0.5, 0.8]])

    def f(p):
        return (p ** 3).sum(axis=1) + p[:, 0] * p[:, 1] * p[:, 2]

    true = 3 * x[0] ** 2 + np.array([x[0, 1] * x[0, 2], x[0, 0] * x[0, 2], x[0, 0] * x[0, 1]])
    est = spsa_gradient(f, x, 200_000, 1e-3, rng)[0]
    assert np.abs(est - true).max() < 0.01


def test_spsa_is_deterministic():
    model = MLPModel(4, 6, 3, seed=4)
    x = np.random.default_rng(5).uniform(size=(6, 4))
    y = model.predict(x)
    cfg = _cfg("spsa", epsilon=0.2, step=0.05, iterations=5, seed=9)
    assert np.array_equal(spsa(model, x, y, cfg), spsa(model, x, y, cfg))


@pytest.mark.parametrize("kind", KINDS)
@given(seed=st.integers(0, 2**31), eps=st.floats(0.01, 0.6))
def test_outputs_stay_in_threat_set(kind, seed, eps):
    rng = np.random.default_rng(seed)
    model = MLPModel(6, 5, 3, seed=seed % 1000)
    x = rng.uniform(size=(4, 6))
    y = rng.integers(0, 3, 4)
    out = run_attack(model, x, y, AttackConfig(kind, eps, eps / 3, 3, spsa_samples=4))
    assert out.min() >= 0 and out.max() <= 1
    if kind == "pgd_l2":
        assert np.linalg.norm(out - x, axis=1).max() <= eps + 1e-9
    else:
        assert np.abs(out - x).max() <= eps + 1e-12


def test_more_pgd_steps_never_help_the_defender():
    model = MLPModel(10, 16, 3, seed=6)
    x = np.random.default_rng(7).uniform(size=(200, 10))
    y = model.predict(x)
    cfg = AttackConfig("pgd_linf", 0.05, 0.005, 20)
    rep = robust_eval(model, x, y, [cfg, AttackConfig("pgd_linf", 0.05, 0.005, 200)],
                      name="mlp", channels=1)
    assert rep.a_nat == 1.0
    assert rep.a_rob("pgd_linf^200") <= rep.a_rob("pgd_linf^20") + 0.02


def test_robust_eval_examples():
    rng = np.random.default_rng(8)
    x = rng.uniform(size=(50, 4))
    model = LinearModel(rng.standard_normal((2, 4)))
    y = model.predict(x)
    rep = robust_eval(model, x, y, [AttackConfig("pgd_linf", 0.0, 0.01, 5)], name="lin",
                      channels=1)
    assert rep.a_nat == 1.0 and rep.a_rob("pgd_linf^5") == rep.a_nat

    x = rng.uniform(size=(2000, 4))
    y = np.arange(2000) % 2
    rep = robust_eval(model, x, y, [], name="lin", channels=1)
    assert abs(rep.a_nat - 0.5) < 0.05
    with pytest.raises(ValueError):
        robust_eval(model, x[:0], y[:0], [], name="lin", channels=1)


def test_report_serialization():
    rng = np.random.default_rng(9)
    model = MLPModel(4, 4, 2, seed=1)
    x = rng.uniform(size=(10, 4))
    rep = robust_eval(model, x, model.predict(x), [_cfg("pgd_linf", iterations=2)],
                      name="mlp", channels=4, solver="euler(h=1)")
    back = RobustReport.from_dict(rep.to_dict())
    assert back == rep
    lines = rep.to_csv().splitlines()
    assert lines[0] == "model,channels,solver,attack,epsilon,steps,A_nat,A_rob,seed"
    assert lines[1].startswith("mlp,4,euler(h=1),pgd_linf^2,0.031,2,1.000000,")


def test_nonfinite_gradients_are_zeroed_and_counted():
    class NanGrad(LinearModel):
        def forward(self, x, ctx):
            out = super().forward(x, ctx)
            return out * (0.0 * T.sqrt(T.as_tensor(x) * 0.0).sum() + 1.0)

    model = NanGrad([[1.0, 0.0], [0.0, 1.0]])
    stats = {}
    x = np.array([[0.3, 0.6]])
    with np.errstate(invalid="ignore", divide="ignore"):
        out = pgd_linf(model, x, np.array([1]), AttackConfig("pgd_linf", 0.1, 0.05, 2), stats)
    assert stats["nonfinite_grad"] > 0
    assert np.all(np.isfinite(out))


def test_input_gradient_matches_tape():
    model = MLPModel(3, 4, 2, seed=2)
    x = np.random.default_rng(10).uniform(size=(2, 3))
    y = np.array([0, 1])
    _, g, _ = input_gradient(model, x, y)
    tape = Tape()
    xt = tape.leaf(x)
    (ref,) = grad(F.cross_entropy_logits(model.forward(xt, Context(tape)), y).sum(), xt)
    assert np.allclose(g, ref)
