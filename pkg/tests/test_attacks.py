import json

import numpy as np
import pytest

from snnrobust import attacks
from snnrobust.attacks import (
    AttackConfig,
    AttackOutcome,
    ensemble_attack,
    ensemble_configs,
    fgsm,
    pgd,
    project_linf,
    run_attack,
    surrogate_grid,
    transfer_attack,
)
from snnrobust.autodiff import ContractError, DimensionError, SurrogateSpec
from snnrobust.model import Linear, SnnModel
from snnrobust.training import evaluate

EPS = 8 / 255


def _fixed_gradient(monkeypatch, g):
    def fake(model, x, y, surrogate=None, frames=False):
        x = np.asarray(x)
        return np.zeros(len(x)), np.broadcast_to(np.asarray(g, dtype=np.float32), x.shape).copy()

    monkeypatch.setattr(attacks, "loss_and_grad", fake)


def _tiny_model():
    return SnnModel([Linear(np.array([[1.0, -1.0]]), np.zeros(2))], timesteps=2)


def test_config_validation():
    with pytest.raises(ContractError):
        AttackConfig("pgd", epsilon=0.0)
    with pytest.raises(ContractError):
        AttackConfig("pgd", epsilon=0.01, alpha=0.02)
    with pytest.raises(ContractError):
        AttackConfig("pgd", steps=0)
    assert AttackConfig("fgsm", alpha=1.0).name == "FGSM"
    assert AttackConfig("pgd", steps=7).name == "PGD7"


def test_config_round_trip():
    cfg = AttackConfig("pgd", 0.05, 0.01, 3, surrogates=(SurrogateSpec("arctan", 2.0),), random_start=True, seed=4)
    assert AttackConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_fgsm_step_arithmetic(monkeypatch):
    _fixed_gradient(monkeypatch, [-2.0])
    out = fgsm(_tiny_model(), np.array([[0.5]]), [0], AttackConfig("fgsm", EPS))
    assert out.x_adv[0, 0] == pytest.approx(0.5 - 8 / 255, abs=1e-7)
    assert out.x_adv[0, 0] == pytest.approx(0.46863, abs=1e-5)


def test_fgsm_clips_at_box(monkeypatch):
    _fixed_gradient(monkeypatch, [1.0])
    out = fgsm(_tiny_model(), np.array([[1.0]]), [0], AttackConfig("fgsm", EPS))
    assert out.x_adv[0, 0] == 1.0


@pytest.mark.parametrize("family", ["fgsm", "pgd"])
def test_zero_gradient_leaves_input(monkeypatch, family):
    _fixed_gradient(monkeypatch, [0.0])
    x = np.array([[0.2], [0.7]], dtype=np.float32)
    out = run_attack(_tiny_model(), x, [0, 1], AttackConfig(family, EPS))
    np.testing.assert_array_equal(out.x_adv, x)


def test_project_examples():
    c = np.array([0.5])
    assert project_linf(np.array([0.6]), c, EPS)[0] == pytest.approx(0.5 + 8 / 255)
    assert project_linf(np.array([0.6]), c, EPS)[0] == pytest.approx(0.53137, abs=1e-5)
    np.testing.assert_array_equal(project_linf(np.array([0.51]), c, EPS), [0.51])
    assert project_linf(c + 2 * EPS, c, EPS)[0] == pytest.approx(0.5 + EPS)
    with pytest.raises(DimensionError):
        project_linf(np.ones(2), np.ones(3), EPS)


def test_project_idempotent(rng):
    center = rng.random((20, 5))
    cand = center + rng.normal(scale=0.2, size=center.shape)
    once = project_linf(cand, center, 0.1)
    np.testing.assert_array_equal(project_linf(once, center, 0.1), once)
    assert np.all(np.abs(once - center) <= 0.1 + 1e-12)
    assert once.min() >= 0 and once.max() <= 1


def test_fgsm_equals_single_full_pgd_step(desk_model, desk_data):
    _, te = desk_data
    a = fgsm(desk_model, te.x, te.y, AttackConfig("fgsm", EPS))
    b = pgd(desk_model, te.x, te.y, AttackConfig("pgd", EPS, alpha=EPS, steps=1))
    np.testing.assert_array_equal(a.x_adv, b.x_adv)
    np.testing.assert_array_equal(a.success, b.success)


@pytest.mark.parametrize(
    "cfg",
    [
        AttackConfig("fgsm", 0.1),
        AttackConfig("pgd", 0.1, 0.01, 10),
        AttackConfig("pgd", 0.05, 0.02, 5, random_start=True, seed=3),
    ],
)
def test_outputs_stay_in_ball_and_box(desk_model, desk_data, cfg):
    _, te = desk_data
    out = run_attack(desk_model, te.x, te.y, cfg)
    assert np.all(np.abs(out.x_adv.astype(np.float64) - te.x) <= cfg.epsilon + 1e-6)
    assert out.x_adv.min() >= 0 and out.x_adv.max() <= 1
    assert np.all(out.linf <= cfg.epsilon + 1e-6)


def test_pgd_does_not_mutate_input(desk_model, desk_data):
    _, te = desk_data
    x = te.x.copy()
    pgd(desk_model, x, te.y, AttackConfig("pgd", 0.1, 0.01, 3))
    np.testing.assert_array_equal(x, te.x)


def test_attack_lowers_accuracy(desk_model, desk_data):
    _, te = desk_data
    clean = evaluate(desk_model, te).accuracy
    adv = evaluate(desk_model, te, AttackConfig("pgd", 0.1, 0.01, 10)).accuracy
    assert adv < clean


def test_ensemble_not_above_any_member(desk_model, desk_data):
    _, te = desk_data
    members = ensemble_configs(AttackConfig("fgsm", 0.08)) + ensemble_configs(AttackConfig("pgd", 0.08, 0.01, 5))
    ens = evaluate(desk_model, te, members)
    singles = [evaluate(desk_model, te, m).accuracy for m in members]
    assert ens.accuracy <= min(singles)
    assert np.all(np.abs(ens.outcome.x_adv - te.x) <= 0.08 + 1e-6)


def _canned(success, loss, tag):
    n = len(success)
    return AttackOutcome(np.full((n, 1), tag, dtype=np.float32), np.array(success), np.array(loss, dtype=float), np.array(["X"] * n, dtype=object), [SurrogateSpec()] * n)


def test_ensemble_selection_rule(monkeypatch):
    canned = iter([_canned([False, False, True], [1.0, 5.0, 0.1], 1.0), _canned([False, True, True], [3.0, 0.2, 0.1], 2.0)])
    monkeypatch.setattr(attacks, "run_attack", lambda *a, **k: next(canned))
    out = ensemble_attack(_tiny_model(), np.zeros((3, 1)), [0, 0, 0], [AttackConfig("fgsm"), AttackConfig("fgsm")])
    np.testing.assert_array_equal(out.success, [False, True, True])
    # all fail: highest-loss member; one succeeds: that member; both succeed: the first
    np.testing.assert_array_equal(out.x_adv[:, 0], [2.0, 2.0, 1.0])


def test_report_lines_schema(desk_model, desk_data):
    _, te = desk_data
    out = run_attack(desk_model, te.x[:4], te.y[:4], AttackConfig("fgsm", 0.05))
    recs = [json.loads(l) for l in out.report_lines()]
    assert [r["sample_id"] for r in recs] == [0, 1, 2, 3]
    assert set(recs[0]) == {"sample_id", "family", "surrogate", "gamma", "success", "linf_norm", "loss"}


def test_surrogate_grid():
    assert len(surrogate_grid("triangle", 0.1, 3.0, 0.1)) == 30
    one = surrogate_grid("sigmoid", 1.0, 1.0, 0.1)
    assert len(one) == 1 and one[0].gamma == 1.0
    with pytest.raises(ContractError):
        surrogate_grid("triangle", 2.0, 1.0, 0.1)


def test_transfer_same_model_is_white_box(desk_model, desk_data):
    _, te = desk_data
    cfg = AttackConfig("pgd", 0.1, 0.02, 5)
    a = transfer_attack(desk_model, desk_model, te.x, te.y, cfg)
    b = run_attack(desk_model, te.x, te.y, cfg)
    np.testing.assert_array_equal(a.success, b.success)


class ConstantClassifier:
    input_shape = None

    def __init__(self, k, n_classes):
        self.k, self.n = k, n_classes

    def counts(self, x, frames=False):
        c = np.zeros((len(x), self.n))
        c[:, self.k] = 4
        return c


def test_transfer_to_constant_target(desk_model, desk_data):
    _, te = desk_data
    out = transfer_attack(desk_model, ConstantClassifier(1, 3), te.x, te.y, AttackConfig("fgsm", 0.1))
    np.testing.assert_array_equal(out.success, te.y != 1)


def test_black_box_weaker_than_white_box(desk_model, sr_model, desk_data):
    _, te = desk_data
    cfg = AttackConfig("pgd", 0.1, 0.01, 10)
    white = 1 - run_attack(desk_model, te.x, te.y, cfg).success.mean()
    black = 1 - transfer_attack(sr_model, desk_model, te.x, te.y, cfg).success.mean()
    assert black >= white


def test_transfer_shape_mismatch(desk_model):
    other = SnnModel([Linear(np.ones((5, 3)), np.zeros(3))], timesteps=2, input_shape=(5,))
    with pytest.raises(DimensionError):
        transfer_attack(desk_model, other, np.zeros((1, 16)), [0], AttackConfig("fgsm"))


def test_frame_attack_keeps_each_frame_in_ball():
    from snnrobust.data import synth_frames
    from snnrobust.model import mlp

    ds = synth_frames(30, 3, 6, 2, seed=0)
    m = mlp(6, [8], 2, timesteps=3, seed=0, gain=2.0)
    out = run_attack(m, ds.x, ds.y, AttackConfig("pgd", 0.05, 0.01, 3), frames=True)
    assert out.x_adv.shape == ds.x.shape
    assert np.all(np.abs(out.x_adv - ds.x) <= 0.05 + 1e-6)
