import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trendlab import nncore
from trendlab.attacks import AttackConfig, pgd
from trendlab.ensattack import (
    METHODS,
    Ensemble,
    EnsembleSpec,
    agd_direction,
    dag_direction,
    direction_state,
    domination_report,
    empir_direction,
    ensemble_attack,
    ensemble_predict,
    resolve_votes,
    ugd_direction,
)
from trendlab.errors import ConfigError
from trendlab.nncore import Model


def py_sign(v):
    return (v > 0) - (v < 0)


def oracle(method, column, voters=None):
    """Direction for one coordinate from plain Python arithmetic."""
    signs = [py_sign(g) for g in column]
    if method == "dag":
        return py_sign(sum(column))
    if method == "ugd":
        if all(s == 1 for s in signs):
            return 1
        if all(s == -1 for s in signs):
            return -1
        return 0
    if method == "agd":
        return py_sign(sum(signs))
    chosen = [g for g, v in zip(column, voters) if v] or list(column)
    return py_sign(sum(chosen))


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_directions_match_enumeration(n, rng):
    patterns = np.array(list(itertools.product((-1, 0, 1), repeat=n)), dtype=float).T  # (n, 3^n)
    grads = patterns * rng.uniform(0.1, 10.0, patterns.shape)
    for method, fn in (("dag", dag_direction), ("ugd", ugd_direction), ("agd", agd_direction)):
        got = fn(grads)
        want = [oracle(method, grads[:, c].tolist()) for c in range(grads.shape[1])]
        np.testing.assert_array_equal(got, want, err_msg=method)
    # empir: every voter subset, one image per coordinate
    for voters in itertools.product((False, True), repeat=n):
        votes = np.where(np.array(voters)[:, None], 0, 1) * np.ones((n, grads.shape[1]), int)
        pred = np.zeros(grads.shape[1], int)
        got = empir_direction(grads[:, :, None], votes, pred)[:, 0]
        want = [oracle("empir", grads[:, c].tolist(), voters) for c in range(grads.shape[1])]
        np.testing.assert_array_equal(got, want)


def test_hand_example_dag_versus_agd():
    g = np.array([[2.0], [-1.0], [-0.5]])
    assert dag_direction(g)[0] == 1
    assert agd_direction(g)[0] == -1


def test_ugd_keeps_negative_unanimity():
    assert ugd_direction(np.array([[-1.0], [-2.0], [-3.0]]))[0] == -1
    assert ugd_direction(np.array([[1.0], [2.0], [-3.0]]))[0] == 0


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_ugd_nonzero_fraction(n):
    r = np.random.default_rng(n)
    g = r.choice([-1.0, 1.0], size=(n, 100_000)) * r.uniform(0.5, 2.0, (n, 100_000))
    frac = np.count_nonzero(ugd_direction(g)) / g.shape[1]
    assert abs(frac - 2.0 ** (1 - n)) <= 0.01


def test_agd_agreement_with_iid_members_is_three_quarters():
    r = np.random.default_rng(0)
    g = r.choice([-1.0, 1.0], size=(3, 100_000))
    rep = domination_report(direction_state(g, "agd"))
    np.testing.assert_allclose(rep["agreement"], 0.75, atol=0.01)


def test_dominant_member_controls_dag():
    r = np.random.default_rng(5)
    g = r.standard_normal((3, 50_000))
    g[0] *= 100
    dag = domination_report(direction_state(g, "dag"))["agreement"]
    agd = domination_report(direction_state(g, "agd"))["agreement"]
    assert dag[0] > 0.98
    assert dag[0] - agd[0] >= 0.1


def test_single_member_agreement_is_one():
    g = np.random.default_rng(1).standard_normal((1, 100))
    for m in ("dag", "ugd", "agd"):
        assert domination_report(direction_state(g, m))["agreement"] == [1.0]


def test_dag_disagrees_with_no_member_for_odd_n():
    g = np.random.default_rng(2).standard_normal((3, 1000))
    assert domination_report(direction_state(g, "dag"))["disagree_all"] == 0.0


# magnitudes stay well above underflow so rescaling cannot create zeros
grad_values = st.one_of(st.just(0.0), st.floats(1e-3, 5), st.floats(-5, -1e-3))


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 20)), elements=grad_values),
    st.floats(0.01, 100),
)
def test_direction_properties(g, scale):
    u, a, d = ugd_direction(g), agd_direction(g), dag_direction(g)
    for v in (u, a, d):
        assert set(np.unique(v)) <= {-1.0, 0.0, 1.0}
    nz = u != 0
    assert np.all(a[nz] == u[nz])
    s = g.copy()
    s[0] *= scale
    np.testing.assert_array_equal(ugd_direction(s), u)
    np.testing.assert_array_equal(agd_direction(s), a)
    if len(g) == 1:
        for v in (u, a, d):
            np.testing.assert_array_equal(v, np.sign(g[0]))


def test_dag_not_scale_invariant():
    g = np.array([[1.0], [-0.6]])
    s = g.copy()
    s[1] *= 10
    assert dag_direction(g)[0] != dag_direction(s)[0]


def test_votes_majority_and_tie_break():
    votes = np.array([[0, 3, 1], [0, 3, 2], [1, 4, 3]])
    out = resolve_votes(votes, 5, tie_seed=11, indices=np.array([0, 1, 2]))
    assert out[0] == 0 and out[1] == 3
    assert out[2] in (1, 2, 3)
    again = resolve_votes(votes, 5, tie_seed=11, indices=np.array([0, 1, 2]))
    np.testing.assert_array_equal(out, again)
    picks = {int(resolve_votes(votes[:, 2:], 5, tie_seed=s)[0]) for s in range(40)}
    assert picks == {1, 2, 3}


def test_unanimous_votes():
    votes = np.full((4, 6), 2)
    np.testing.assert_array_equal(resolve_votes(votes, 3), np.full(6, 2))


def test_spec_validation():
    with pytest.raises(ConfigError):
        EnsembleSpec(())
    with pytest.raises(ConfigError):
        EnsembleSpec(("a", "a"))
    assert EnsembleSpec(("a", "b")).to_dict()["N"] == 2


def _mlp(seed, d=6):
    return Model.build(nncore.dense_spec(d, 3, hidden=(10,), seed=seed), bounds=(-3.0, 3.0))


def test_unknown_method_rejected(rng):
    ens = Ensemble.of([_mlp(0)], ids=["a"])
    with pytest.raises(ConfigError):
        ensemble_attack(ens, rng.standard_normal((2, 6)), np.zeros(2, int), AttackConfig(), "sum")
    with pytest.raises(ConfigError):
        direction_state(np.ones((1, 3)), "sum")


def test_single_member_attack_equals_pgd(rng):
    m = _mlp(3)
    x = rng.standard_normal((30, 6))
    y = m.predict(x)
    cfg = AttackConfig(eps=0.3, step_size=0.05, iterations=8, seed=2)
    ref = pgd(m, x, y, cfg)
    for method in METHODS:
        adv, rate = ensemble_attack(Ensemble.of([m], ids=["a"]), x, y, cfg, method)
        np.testing.assert_array_equal(adv.adv, ref.adv)
        assert rate == ref.success_rate


def test_identical_members_give_identical_trajectories(rng):
    m = _mlp(4)
    ens = Ensemble.of([m, m.copy(), m.copy()], ids=["a", "b", "c"])
    x = rng.standard_normal((25, 6))
    y = ensemble_predict(ens, x)
    cfg = AttackConfig(eps=0.4, step_size=0.1, iterations=5)
    runs = [ensemble_attack(ens, x, y, cfg, method)[0].adv for method in METHODS]
    for r in runs[1:]:
        np.testing.assert_array_equal(r, runs[0])


def test_attack_bounds_and_states(rng):
    ens = Ensemble.of([_mlp(s) for s in (1, 2, 3)], ids=["a", "b", "c"])
    x = rng.standard_normal((40, 6))
    y = ensemble_predict(ens, x)
    cfg = AttackConfig(eps=0.5, step_size=0.1, iterations=6)
    states = []
    adv, rate = ensemble_attack(ens, x, y, cfg, "empir", states=states)
    assert len(states) == 6
    assert np.all(adv.linf <= 0.5 + 1e-6)
    assert np.all(np.abs(adv.adv) <= 3.0)
    assert 0.0 <= rate <= 1.0
    st0 = states[0]
    np.testing.assert_array_equal(st0.signs, np.sign(st0.grads))
    np.testing.assert_array_equal(st0.avg_sign, st0.signs.mean(axis=0))
    again, _ = ensemble_attack(ens, x, y, cfg, "empir")
    assert again.adv.tobytes() == adv.adv.tobytes()
