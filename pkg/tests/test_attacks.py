import numpy as np
import pytest

from trendlab import nncore
from trendlab.attacks import (
    AdvBatch,
    AttackConfig,
    _assemble,
    archive_name,
    boundary_raster,
    cw_l2,
    deepfool,
    margin,
    perturbation_stats,
    pgd,
    random_start,
    run_attack,
)
from trendlab.errors import ConfigError
from trendlab.nncore import Model

BOUNDS = (-2.0, 2.0)


@pytest.fixture
def toy(rng):
    """Small trained MLP on 3 Gaussian classes with inputs in [-2, 2]."""
    n, d = 150, 6
    centers = rng.normal(0, 1.0, (3, d))
    y = np.arange(n) % 3
    x = np.clip(centers[y] + rng.normal(0, 0.4, (n, d)), *BOUNDS)
    from trendlab.data import Dataset

    ds = Dataset(x, y)
    m = Model.build(nncore.dense_spec(d, 3, hidden=(16,), seed=0), bounds=BOUNDS)
    m = nncore.train(m, ds, ds, nncore.TrainConfig(epochs=15, batch_size=16, lr=0.05))
    return m, x, y


def test_config_validation():
    AttackConfig.reference_pgd()
    for bad in (dict(eps=-0.1), dict(iterations=0), dict(step_size=0.0), dict(kind="fgsm"), dict(kappa=-1)):
        with pytest.raises(ConfigError):
            AttackConfig(**bad)
    for k in (0, 15, 30):
        AttackConfig(kind="cw_l2", kappa=k)


def test_reference_pgd_values():
    c = AttackConfig.reference_pgd()
    assert (c.eps, c.step_size, c.iterations) == (8 / 255, 0.01, 40)


def test_pgd_zero_eps_is_identity(toy):
    m, x, y = toy
    adv = pgd(m, x, y, AttackConfig(eps=0.0, step_size=0.1, iterations=5))
    np.testing.assert_array_equal(adv.adv, adv.clean)
    assert adv.success_rate == 0.0


def test_pgd_respects_ball_and_box(toy):
    m, x, y = toy
    eps = 0.4
    adv = pgd(m, x, y, AttackConfig(eps=eps, step_size=0.1, iterations=10))
    assert np.all(adv.linf <= eps + 1e-6)
    assert np.all((adv.adv >= BOUNDS[0]) & (adv.adv <= BOUNDS[1]))
    assert adv.generated <= adv.attacked.sum()
    assert adv.success_rate > 0
    assert not np.any(adv.success & ~adv.attacked)
    s = perturbation_stats(adv)
    assert s["max_linf"] <= eps + 1e-6


def test_pgd_only_attacks_correct_images(toy):
    m, x, y = toy
    wrong = (y + 1) % 3
    adv = pgd(m, x, wrong, AttackConfig(eps=0.3, step_size=0.1, iterations=3))
    assert adv.attacked.sum() == (m.predict(x) == wrong).sum()
    np.testing.assert_array_equal(adv.adv[~adv.attacked], x[~adv.attacked])


def test_pgd_deterministic_and_batch_independent(toy):
    m, x, y = toy
    cfg = AttackConfig(eps=0.3, step_size=0.1, iterations=5, seed=7)
    a = pgd(m, x, y, cfg)
    b = pgd(m, x, y, cfg)
    assert a.adv.tobytes() == b.adv.tobytes()
    half = pgd(m, x[50:], y[50:], cfg, indices=np.arange(50, len(y)))
    np.testing.assert_array_equal(half.adv, a.adv[50:])


def test_random_start_streams(rng):
    cfg = AttackConfig(seed=3)
    k = random_start(cfg, (4, 5), indices=[10, 11, 12, 13])
    assert np.all(np.abs(k) <= 1)
    np.testing.assert_array_equal(random_start(cfg, (1, 5), indices=[12])[0], k[2])
    assert not np.array_equal(random_start(cfg, (1, 5), indices=[12], batch_id=1)[0], k[2])


def test_margin():
    logits = np.array([[1.0, 3.0, 2.0], [5.0, 0.0, 1.0]])
    m, j = margin(logits, np.array([1, 0]))
    np.testing.assert_array_equal(m, [-1.0, -4.0])
    np.testing.assert_array_equal(j, [2, 2])


@pytest.mark.parametrize("kappa", [0.0, 2.0])
def test_cw_margin_property(toy, kappa):
    m, x, y = toy
    adv = cw_l2(m, x[:40], y[:40], kappa=kappa, iterations=60)
    assert np.all(np.isfinite(adv.adv))
    s = adv.success
    assert s.any()
    mg, _ = margin(m.forward(adv.adv), y[:40])
    assert np.all(mg[s] >= kappa)
    if kappa == 0:
        assert np.all(mg[s] > 0)
    np.testing.assert_array_equal(adv.adv[~s], x[:40][~s])


def test_cw_larger_kappa_costs_more_l2(toy):
    m, x, y = toy
    a0 = cw_l2(m, x[:40], y[:40], kappa=0.0, iterations=60)
    a5 = cw_l2(m, x[:40], y[:40], kappa=5.0, iterations=60)
    both = a0.success & a5.success
    assert both.sum() > 5
    assert a5.l2[both].mean() > a0.l2[both].mean()


def test_cw_excludes_misclassified(toy):
    m, x, y = toy
    wrong = (m.predict(x[:10]) + 1) % 3
    adv = cw_l2(m, x[:10], wrong, iterations=5)
    assert not adv.attacked.any() and adv.generated == 0


def test_cw_needs_bounds(toy):
    m, x, y = toy
    free = Model(m.spec, m.params)
    with pytest.raises(ConfigError):
        cw_l2(free, x[:3], y[:3])


def test_deepfool_linear_binary_closed_form(rng):
    d = 5
    spec = nncore.dense_spec(d, 2)
    m = Model.build(spec)
    W = rng.standard_normal((2, d))
    b = rng.standard_normal(2)
    m.params = {"L0.weight": W, "L0.bias": b}
    x = rng.standard_normal((8, d))
    y = m.predict(x)
    os_ = 0.02
    adv = deepfool(m, x, y, overshoot=os_, max_iter=10)
    w = W[1] - W[0]
    f = x @ w + (b[1] - b[0])
    expect = -(f / (w @ w))[:, None] * w[None, :] * (1 + os_)
    np.testing.assert_allclose(adv.adv - x, expect, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(adv.l2, np.abs(f) / np.linalg.norm(w) * (1 + os_), rtol=1e-10)
    assert adv.success.all()


def test_deepfool_skips_misclassified(toy):
    m, x, y = toy
    wrong = (m.predict(x[:6]) + 1) % 3
    adv = deepfool(m, x[:6], wrong)
    assert not adv.attacked.any()
    assert np.all(adv.l2 == 0)


def test_perturbation_stats_hand_norms():
    x = np.zeros((1, 2))
    adv = _assemble(x, np.array([0]), np.array([True]), np.array([[0.3, -0.4]]), np.array([True]))
    s = perturbation_stats(adv)
    assert s["mean_l2"] == pytest.approx(0.5, abs=1e-15)
    assert s["mean_linf"] == pytest.approx(0.4, abs=1e-15)
    none = _assemble(x, np.array([0]), np.array([True]), x, np.array([False]))
    assert perturbation_stats(none) is None
    assert np.all(none.l2 == 0) and np.all(none.linf == 0)


def test_advbatch_archive_roundtrip(toy, tmp_path):
    m, x, y = toy
    adv = run_attack(m, x[:20], y[:20], AttackConfig(eps=0.3, step_size=0.1, iterations=3))
    path = tmp_path / archive_name("m", "pgd", 0.3)
    adv.save(path)
    back = AdvBatch.load(path)
    for f in ("clean", "adv", "labels", "attacked", "success", "l2", "linf", "failed"):
        np.testing.assert_array_equal(getattr(back, f), getattr(adv, f))
    assert back.meta == adv.meta


def test_boundary_raster(toy):
    m, x, y = toy
    g = nncore.input_gradient(m, x[:1], y[:1])[0]
    grid, u, v = boundary_raster(m, x[0], g, extent=2.0, resolution=65)
    assert grid.shape == (65, 65)
    assert grid[32, 32] == m.predict(x[:1])[0]
    assert abs(np.linalg.norm(u) - 1) < 1e-12 and abs(np.linalg.norm(v) - 1) < 1e-12
    assert abs(float(u.ravel() @ v.ravel())) <= 1e-6
    with pytest.raises(ConfigError):
        boundary_raster(m, x[0], np.zeros_like(g))
    with pytest.raises(ConfigError):
        boundary_raster(m, x[0], g, resolution=64)
