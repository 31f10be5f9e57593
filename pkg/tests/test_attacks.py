import numpy as np
import pytest

from workbench import autodiff as ad
from workbench import models
from workbench.attacks import (
    AttackBudget,
    AttackOutcome,
    ThreatModel,
    apgd,
    apgd_checkpoints,
    eot_gradient,
    fgsm,
    pgd,
    read_jsonl,
    transfer_attack,
    worst_case_ensemble,
)
from workbench.attacks.losses import as_loss
from workbench.defenses import DefendedModel, default_config
from workbench.defenses.fixtures import NoisyInputModel


def linear_model(w, b=0.0):
    # two logits: class 1 score is w.x + b, class 0 score is 0
    W = np.stack([np.zeros_like(w), w], axis=1)
    return models.Classifier((len(w),), 2, params=[W, np.array([0.0, b])])


def robust_acc(out, model, x, y):
    return float(np.mean((model.predict(x) == y) & ~out.success))


class Bowl:
    """Two-class toy whose CE for class 0 peaks at ``c``."""

    n_classes = 2

    def __init__(self, c):
        self.c = c

    def __call__(self, x):
        d = x - self.c
        z1 = ad.neg(ad.sum(d * d, axis=1, keepdims=True)) * 5.0
        return ad.concat([ad.mul(0.0, z1) - 1.0, z1], axis=1)


def test_threat_validation():
    with pytest.raises(ValueError):
        ThreatModel("1", 0.1)
    with pytest.raises(ValueError):
        ThreatModel("inf", -0.1)
    with pytest.raises(ValueError):
        AttackBudget(n_eot=0)


def test_fgsm_closed_form_linear():
    w = np.array([0.7, -1.3, 0.2])
    m = linear_model(w)
    x = np.full((2, 3), 0.5)
    y = np.array([0, 1])
    out = fgsm(m, x, y, ThreatModel("inf", 0.1))
    # class 0 is pushed towards class 1 along +w, class 1 the other way
    np.testing.assert_allclose(out.delta[0], 0.1 * np.sign(w))
    np.testing.assert_allclose(out.delta[1], -0.1 * np.sign(w))
    assert out.forwards[0] == 1 and out.backwards[0] == 1


def test_fgsm_zero_eps_and_l2(rings_model, rings):
    _, test = rings
    out = fgsm(rings_model, test.x, test.y, ThreatModel("inf", 0.0))
    assert np.all(out.delta == 0)
    assert np.array_equal(out.success, rings_model.predict(test.x) != test.y)
    with pytest.raises(ValueError, match="l-inf"):
        fgsm(rings_model, test.x, test.y, ThreatModel("2", 0.1))


def test_fgsm_not_stronger_than_pgd(rings_model, rings, threat):
    _, test = rings
    f = fgsm(rings_model, test.x, test.y, threat)
    p = pgd(rings_model, "ce", test.x, test.y, threat, AttackBudget(iterations=10))
    assert f.success_rate <= p.success_rate


@pytest.mark.parametrize("restarts,n", [(1, 0), (1, 7), (3, 4)])
def test_pgd_counts(rings_model, rings, threat, restarts, n):
    _, test = rings
    out = pgd(rings_model, "ce", test.x[:10], test.y[:10], threat, AttackBudget(iterations=n, restarts=restarts))
    assert out.forwards[0] == restarts * (n + 1) and out.backwards[0] == restarts * n
    assert out.eval_forwards == 2


def test_pgd_zero_steps_is_random_start(rings_model, rings, threat):
    _, test = rings
    x, y = test.x[:20], test.y[:20]
    out = pgd(rings_model, "ce", x, y, threat, AttackBudget(iterations=0, seed=4))
    from workbench.attacks.threat import example_rngs

    start = threat.random_start(x, example_rngs(4, np.arange(20)))
    clean = np.asarray(as_loss("ce", 2).per_example(rings_model(x), y))
    took = out.best_loss > clean
    np.testing.assert_allclose(out.delta[took], (start - x)[took], atol=1e-15)
    assert np.all(out.delta[~took] == 0)


def test_pgd_finds_interior_maximum():
    c = np.array([[0.3, 0.7, 0.45]])
    x = np.array([[0.5, 0.5, 0.5]])
    out = pgd(Bowl(c), "ce", x, np.array([0]), ThreatModel("inf", 1.0), AttackBudget(iterations=300), step=0.005)
    assert np.max(np.abs(x + out.delta - c)) <= 0.006


def test_apgd_schedule_and_counts(robust_model, rings, threat):
    _, test = rings
    assert apgd_checkpoints(100) == [22, 41, 57, 70, 80, 87, 93, 99]
    with pytest.raises(ValueError):
        apgd(robust_model, "ce", test.x, test.y, threat, AttackBudget(iterations=4))
    out = apgd(robust_model, "ce", test.x[:30], test.y[:30], threat, AttackBudget(iterations=25, restarts=2))
    assert out.forwards[0] == 2 * 26 and out.backwards[0] == 2 * 25
    steps = out.extra["step_sizes"]
    first = np.vstack([np.full((1, 30), 2 * threat.eps), steps])
    ratio = first[1:] / first[:-1]
    # every change of the step size is an exact halving (the restart resets to 2 eps)
    assert np.all(np.isin(np.round(ratio[:4], 12), [0.5, 1.0]))
    assert np.all(np.diff(out.trace, axis=0) >= 0)


def test_apgd_l2_feasible(rings_model, rings):
    _, test = rings
    t = ThreatModel("2", 0.1)
    out = apgd(rings_model, "ce", test.x, test.y, t, AttackBudget(iterations=10))
    assert not t.violations(test.x, out.delta).any()


def test_never_clean_and_determinism(rings_model, rings, threat):
    _, test = rings
    lf = as_loss("ce", 2)
    clean = np.asarray(lf.per_example(rings_model(test.x), test.y))
    for attack in (
        lambda: pgd(rings_model, "ce", test.x, test.y, threat, AttackBudget(iterations=5, seed=3)),
        lambda: apgd(rings_model, "ce", test.x, test.y, threat, AttackBudget(iterations=5, seed=3)),
        lambda: fgsm(rings_model, test.x, test.y, threat),
    ):
        a, b = attack(), attack()
        assert np.array_equal(a.delta, b.delta)
        at = np.asarray(lf.per_example(rings_model(test.x + a.delta), test.y))
        assert np.all(at >= clean - 1e-12)


def test_eot_gradient(rings_model, rings):
    _, test = rings
    x, y = test.x[:5], test.y[:5]
    g1 = eot_gradient(rings_model, "ce", x, y, 1, seed=0)
    assert np.array_equal(g1, eot_gradient(rings_model, "ce", x, y, 7, seed=0))
    with pytest.raises(ValueError):
        eot_gradient(rings_model, "ce", x, y, 0, seed=0)
    noisy = NoisyInputModel(rings_model, sigma=0.05)

    def spread(n):
        return np.var([eot_gradient(noisy, "ce", x, y, n, seed=s) for s in range(50)], axis=0).sum()

    assert spread(16) < spread(1)


def test_eot_n1_is_plain_attack_distributionally(rings_model, rings, threat):
    _, test = rings
    noisy = NoisyInputModel(rings_model, sigma=0.05, policy="seeded")
    a = pgd(noisy, "ce", test.x, test.y, threat, AttackBudget(iterations=5, n_eot=1))
    b = pgd(noisy, "ce", test.x, test.y, threat, AttackBudget(iterations=5, n_eot=4))
    # seeded randomness is not free: EOT collapses to one draw
    assert np.array_equal(a.delta, b.delta) and a.forwards[0] == b.forwards[0]


def test_transfer_policies(rings_model, robust_model, rings, threat):
    _, test = rings
    inner = lambda m, x, y, ids: pgd(m, "ce", x, y, threat, AttackBudget(iterations=10))  # noqa: E731
    direct = inner(rings_model, test.x, test.y, None)
    same = transfer_attack(rings_model, rings_model, inner, test.x, test.y)
    assert np.array_equal(same.success, direct.success)
    lm = transfer_attack(rings_model, robust_model, inner, test.x, test.y, policy="loss-max")
    cf = transfer_attack(rings_model, robust_model, inner, test.x, test.y, policy="clean-on-failure")
    assert robust_acc(lm, robust_model, test.x, test.y) <= robust_acc(cf, robust_model, test.x, test.y)
    assert lm.forwards[0] == 1 and lm.extra["surrogate_forwards"][0] == 11
    with pytest.raises(ValueError):
        transfer_attack(rings_model, robust_model, inner, test.x, test.y, policy="whatever")
    wide = models.init_classifier((3, 4), 2, seed=0)
    with pytest.raises(ValueError, match="inputs"):
        transfer_attack(rings_model, wide, inner, test.x, test.y)


def test_transfer_through_anti_equals_static(rings_model, rings, threat):
    _, test = rings
    anti = DefendedModel(rings_model, default_config("anti", threat.eps))
    src = pgd(rings_model, "ce", test.x, test.y, threat, AttackBudget(iterations=10))
    tr = transfer_attack(rings_model, anti, None, test.x, test.y, source=src)
    assert np.array_equal(tr.success, src.success)


def test_worst_case_ensemble(rings_model, rings, threat):
    _, test = rings
    outs = [pgd(rings_model, lf, test.x, test.y, threat, AttackBudget(iterations=5)) for lf in ("ce", "cw")]
    outs.append(fgsm(rings_model, test.x, test.y, threat))
    single = worst_case_ensemble(outs[:1])
    assert np.array_equal(single.delta, outs[0].delta) and np.array_equal(single.success, outs[0].success)
    ens = worst_case_ensemble(outs)
    accs = [robust_acc(o, rings_model, test.x, test.y) for o in outs]
    assert robust_acc(ens, rings_model, test.x, test.y) <= min(accs)
    assert np.array_equal(ens.success, np.logical_or.reduce([o.success for o in outs]))
    shifted = pgd(rings_model, "ce", test.x, test.y, threat, AttackBudget(iterations=1), ids=np.arange(len(test)) + 1)
    with pytest.raises(ValueError):
        worst_case_ensemble([outs[0], shifted])


def test_outcome_jsonl(rings_model, rings, threat):
    _, test = rings
    out = pgd(rings_model, "ce", test.x[:4], test.y[:4], threat, AttackBudget(iterations=2))
    recs = read_jsonl(out.to_jsonl(threat))
    assert len(recs) == 4
    assert set(recs[0]) == {"example_id", "best_loss", "success", "delta_norm", "forwards", "backwards", "queries"}
    assert all(r["delta_norm"] <= threat.eps + 1e-9 for r in recs)
    with pytest.raises(ValueError):
        AttackOutcome(np.arange(2), np.zeros((3, 2)), np.zeros(2), np.zeros(2), 0, 0)
