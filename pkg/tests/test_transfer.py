import csv
import io
import json

import numpy as np
import pytest
from scipy.optimize import curve_fit

from trendlab import nncore
from trendlab.attacks import AttackConfig, pgd
from trendlab.data import Dataset
from trendlab.nncore import Model
from trendlab.transfer import (
    ConfusionMatrix,
    FitError,
    FitParams,
    TransferRecord,
    UndefinedTransferError,
    common_correct_subset,
    confusion_matrix,
    fit_exponential,
    fit_transfer_curves,
    intersect_masks,
    predict_tm,
    saturating,
    transferability,
)


def test_intersect_masks_hand_example():
    np.testing.assert_array_equal(intersect_masks([1, 1, 0, 1], [1, 0, 0, 1]), [0, 3])
    assert len(intersect_masks([1, 0], [0, 1])) == 0


def test_record_tm_and_invariants():
    r = TransferRecord("s", "t", "pgd", 0.03, 10000, 9085, 8166)
    assert r.tm == 8166 / 9085
    assert abs(r.tm - 0.8989) < 1e-4
    assert TransferRecord("s", "t", "pgd", 0.1, 5, 3, 0).tm == 0.0
    undefined = TransferRecord("s", "t", "pgd", 0.1, 5, 0, 0)
    assert undefined.tm is None and not undefined.defined
    with pytest.raises(ValueError):
        TransferRecord("s", "t", "pgd", 0.1, 5, 2, 3)
    with pytest.raises(ValueError):
        TransferRecord("s", "t", "pgd", 0.1, 5, 6, 1)


@pytest.fixture
def three(rng):
    """Three small trained MLPs sharing one 3-class toy task."""
    n, d = 120, 5
    centers = rng.normal(0, 1.2, (3, d))
    y = np.arange(n) % 3
    x = np.clip(centers[y] + rng.normal(0, 0.5, (n, d)), -3, 3)
    ds = Dataset(x, y)
    models = []
    for s in range(3):
        m = Model.build(nncore.dense_spec(d, 3, hidden=(12,), seed=s), bounds=(-3.0, 3.0))
        m = nncore.train(m, ds, ds, nncore.TrainConfig(epochs=10, batch_size=16, lr=0.05, seed=s))
        m.provenance["id"] = f"m{s}"
        models.append(m)
    return models, ds


CFG = AttackConfig(eps=0.6, step_size=0.15, iterations=10)


def test_self_transfer_is_one(three):
    models, ds = three
    r = transferability(models[0], models[0], CFG, ds)
    assert r.f_ss > 0 and r.tm == 1.0
    np.testing.assert_array_equal(common_correct_subset(models[0], models[0], ds), np.flatnonzero(nncore.evaluate(models[0], ds)[1]))


def test_empty_subset_signalled(three):
    models, ds = three
    with pytest.raises(UndefinedTransferError):
        transferability(models[0], models[1], CFG, ds, subset=[])


def test_confusion_matrix_matches_brute_force(three):
    models, ds = three
    cm = confusion_matrix(models, CFG, ds)
    correct = {m.model_id: nncore.evaluate(m, ds)[1] for m in models}
    for i, s in enumerate(models):
        sidx = np.flatnonzero(correct[s.model_id])
        adv = pgd(s, ds.x[sidx], ds.y[sidx], CFG, indices=sidx)
        for j, t in enumerate(models):
            f_ss = f_st = 0
            for row, img in enumerate(sidx):
                if not correct[t.model_id][img] or not adv.success[row]:
                    continue
                f_ss += 1
                f_st += int(t.predict(adv.adv[row : row + 1])[0] != ds.y[img])
            want = f_st / f_ss if f_ss else np.nan
            np.testing.assert_equal(cm.grid[i, j], want)
    assert np.all(np.diag(cm.grid) == 1.0)
    finite = cm.grid[np.isfinite(cm.grid)]
    assert np.all((finite >= 0) & (finite <= 1))


def test_single_model_catalog(three):
    models, ds = three
    cm = confusion_matrix(models[:1], CFG, ds)
    assert cm.grid.shape == (1, 1) and cm.grid[0, 0] == 1.0


def test_cache_reuse_and_order_independence(three):
    models, ds = three
    cache = {}
    a = confusion_matrix(models, CFG, ds, cache=cache)
    assert set(cache) == {"m0", "m1", "m2"}
    b = confusion_matrix(models, CFG, ds, cache=cache)
    np.testing.assert_array_equal(a.grid, b.grid)
    rev = confusion_matrix(models[::-1], CFG, ds)
    np.testing.assert_array_equal(rev.grid, a.grid[::-1, ::-1])


def test_averages_exclude_diagonal_and_missing():
    g = np.array([[1.0, 0.2, 0.4], [0.6, 1.0, np.nan], [0.0, 0.8, 1.0]])
    cm = ConfusionMatrix(["a", "b", "c"], g)
    np.testing.assert_allclose(cm.row_avg, [0.3, 0.6, 0.4])
    np.testing.assert_allclose(cm.col_avg, [0.3, 0.5, 0.4])
    np.testing.assert_allclose(cm.asymmetry()[0, 1], 0.4)
    rows = list(csv.reader(io.StringIO(cm.to_csv())))
    assert rows[0] == ["source\\target", "a", "b", "c", "row_avg"]
    assert rows[2][3] == ""
    assert rows[-1][0] == "col_avg"
    doc = json.loads(cm.to_json())
    assert doc["grid"][1][2] is None


def test_lm_recovers_synthetic_parameters():
    eps = np.array([0.002, 0.01, 0.02, 0.04])
    y = saturating(eps, 1000.0, -100.0)
    fit = fit_exponential(eps, y)
    assert abs(fit.a - 1000) / 1000 <= 0.01
    assert abs(fit.b + 100) / 100 <= 0.01
    assert fit.trace[-1] <= fit.trace[0]


def test_lm_agrees_with_scipy_on_noisy_data(rng):
    eps = np.linspace(0.01, 0.2, 12)
    y = saturating(eps, 500.0, -15.0) + rng.normal(0, 10, eps.shape)
    ours = fit_exponential(eps, y)
    ref, _ = curve_fit(lambda e, a, b: a * (1 - np.exp(b * e)), eps, y, p0=[y.max(), -1 / np.median(eps)])
    np.testing.assert_allclose([ours.a, ours.b], ref, rtol=1e-5)


def test_four_point_fit_predicts_twenty_point_curve():
    grid = np.linspace(0.005, 0.1, 20)
    truth = saturating(grid, 800.0, -40.0)
    sel = [0, 6, 13, 19]
    fit = fit_exponential(grid[sel], truth[sel])
    rmse = np.sqrt(np.mean((fit(grid) - truth) ** 2))
    assert rmse < 0.05 * truth.max()


def test_degenerate_and_invalid_inputs():
    fit = fit_exponential([0.1, 0.2, 0.3], [0, 0, 0])
    assert fit.degenerate and fit.a == 0.0
    with pytest.raises(ValueError):
        fit_exponential([0.1, 0.1, 0.2], [1, 2, 3])
    with pytest.raises(ValueError):
        fit_exponential([0.1, 0.2, 0.3], [1, -2, 3])


def test_non_convergence_reports_last_iterate():
    eps = np.array([0.1, 0.2, 0.3, 0.4])
    with pytest.raises(FitError) as ei:
        fit_exponential(eps, [1.0, 2.0, 3.0, 4.0], max_iter=3)
    assert ei.value.last is not None and ei.value.last.iterations == 3


def test_predict_tm_properties():
    same = FitParams(300, -20, 300, -20)
    np.testing.assert_allclose(predict_tm(same, np.array([0.01, 0.1, 1.0])), 1.0)
    fp = FitParams(200, -10, 400, -30)
    assert predict_tm(fp, 1e6) == pytest.approx(0.5)
    assert predict_tm(fp, 0.0) == pytest.approx((200 * -10) / (400 * -30))
    vals = predict_tm(fp, np.linspace(0, 1, 50))
    assert np.all((vals >= 0) & (vals <= 1))
    with pytest.raises(ValueError):
        predict_tm(FitParams(1, -1, 0, -1), 0.5)


def test_fitted_curves_are_monotone():
    eps = np.array([0.01, 0.03, 0.06, 0.1])
    fp = fit_transfer_curves(eps, [40, 90, 140, 170], [100, 200, 260, 290], holdout=([0.08], [160], [280]))
    assert fp.b < 0 and fp.b2 < 0 and fp.a > 0 and fp.a2 > 0
    grid = np.linspace(0, 0.2, 100)
    assert np.all(np.diff(saturating(grid, fp.a, fp.b)) >= 0)
    assert fp.holdout_rmse_st is not None
