"""Transferability metric, confusion matrices and the exponential strength model.

TM for a (source, target) pair is ``f_st / f_ss``: of the adversarial images
generated on the source (``f_ss``), the share that also fool the target
(``f_st``). Both counts are taken over test images that source and target
each classify correctly.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import AdvBatch, AttackConfig, run_attack
from .errors import ConfigError, NumericError
from .nncore import evaluate

logger = logging.getLogger(__name__)


class UndefinedTransferError(ValueError):
    """The pair has no common correct images, or the source produced no adversarials."""


# ---------------------------------------------------------------------------
# metric
# ---------------------------------------------------------------------------


def intersect_masks(source_mask, target_mask) -> np.ndarray:
    return np.flatnonzero(np.asarray(source_mask, bool) & np.asarray(target_mask, bool))


def common_correct_subset(source, target, testset) -> np.ndarray:
    """Indices of test images both models classify correctly (may be empty)."""
    _, ms = evaluate(source, testset)
    _, mt = evaluate(target, testset)
    return intersect_masks(ms, mt)


@dataclass
class TransferRecord:
    source: str
    target: str
    attack: str
    eps: float
    subset_size: int
    f_ss: int
    f_st: int

    def __post_init__(self):
        if not 0 <= self.f_st <= self.f_ss <= self.subset_size:
            raise ValueError(f"need 0 <= f_st <= f_ss <= subset ({self.f_st}, {self.f_ss}, {self.subset_size})")

    @property
    def defined(self) -> bool:
        return self.f_ss > 0

    @property
    def tm(self) -> float | None:
        """``f_st / f_ss``, or ``None`` when the source generated nothing."""
        return self.f_st / self.f_ss if self.f_ss else None

    def to_dict(self) -> dict:
        return {**asdict(self), "tm": self.tm}


def transfer_counts(adv: AdvBatch, target_fooled: np.ndarray, subset_mask: np.ndarray):
    """``(f_ss, f_st)`` restricted to ``subset_mask`` (aligned with ``adv``)."""
    gen = adv.success & subset_mask
    return int(gen.sum()), int((gen & target_fooled).sum())


def target_fooled(target, adv: AdvBatch) -> np.ndarray:
    """Which of the source's attacked images the target misclassifies.

    The target sees the attacked images as one batch, the same batch the
    source scored, so self-transfer is exact even for batch-quantized models.
    """
    fooled = np.zeros(len(adv.labels), dtype=bool)
    if adv.attacked.any():
        fooled[adv.attacked] = target.predict(adv.adv[adv.attacked]) != adv.labels[adv.attacked]
    return fooled


def transferability(source, target, cfg: AttackConfig, testset, subset=None) -> TransferRecord:
    """Attack ``source`` on the common correct subset and count transfers to ``target``."""
    if subset is None:
        subset = common_correct_subset(source, target, testset)
    subset = np.asarray(subset, dtype=int)
    if len(subset) == 0:
        raise UndefinedTransferError(f"{source.model_id} and {target.model_id} share no correct images")
    adv = run_attack(source, testset.x[subset], testset.y[subset], cfg, indices=subset)
    f_ss, f_st = transfer_counts(adv, target_fooled(target, adv), np.ones(len(subset), bool))
    rec = TransferRecord(source.model_id, target.model_id, cfg.attack_id, cfg.eps, len(subset), f_ss, f_st)
    if not rec.defined:
        logger.info("TM undefined for %s -> %s: source generated no adversarials", rec.source, rec.target)
    return rec


# ---------------------------------------------------------------------------
# confusion matrices
# ---------------------------------------------------------------------------


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6f}"


def _mean_excluding(values):
    vals = [v for v in values if v is not None and not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class ConfusionMatrix:
    """TM grid indexed ``grid[source, target]``.

    Row averages summarize a source (how well its adversarials travel),
    column averages a target (how easily it is fooled by transfers). Both
    leave out the diagonal and any undefined cell.
    """

    ids: list
    grid: np.ndarray
    records: list = field(default_factory=list)
    attack: str = ""
    provenance: dict = field(default_factory=dict)

    @property
    def row_avg(self) -> np.ndarray:
        n = len(self.ids)
        return np.array([_mean_excluding([self.grid[i, j] for j in range(n) if j != i]) for i in range(n)])

    @property
    def col_avg(self) -> np.ndarray:
        n = len(self.ids)
        return np.array([_mean_excluding([self.grid[i, j] for i in range(n) if i != j]) for j in range(n)])

    def tm(self, source: str, target: str) -> float:
        return float(self.grid[self.ids.index(source), self.ids.index(target)])

    def asymmetry(self) -> np.ndarray:
        """``|TM(s, t) - TM(t, s)|`` for every pair."""
        return np.abs(self.grid - self.grid.T)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source\\target"] + list(self.ids) + ["row_avg"])
        ra, ca = self.row_avg, self.col_avg
        for i, sid in enumerate(self.ids):
            w.writerow([sid] + [_fmt(float(v)) for v in self.grid[i]] + [_fmt(float(ra[i]))])
        w.writerow(["col_avg"] + [_fmt(float(v)) for v in ca] + [""])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "ids": list(self.ids),
            "attack": self.attack,
            "grid": [[None if np.isnan(v) else float(v) for v in row] for row in self.grid],
            "row_avg": [None if np.isnan(v) else float(v) for v in self.row_avg],
            "col_avg": [None if np.isnan(v) else float(v) for v in self.col_avg],
            "records": [r.to_dict() for r in self.records],
            "provenance": self.provenance,
        }
        return json.dumps(doc, indent=1, sort_keys=True)


def confusion_matrix(models, cfg: AttackConfig, testset, cache=None) -> ConfusionMatrix:
    """All-pairs TM over ``models`` under one attack.

    Each source is attacked once, on every test image it classifies
    correctly; ``cache`` (a dict keyed by model id) holds those AdvBatches and
    is filled on a miss. Cells are then counted over each pair's common
    correct subset. Undefined cells are NaN.
    """
    if not models:
        raise ConfigError("empty model catalog")
    ids = [m.model_id for m in models]
    if len(set(ids)) != len(ids):
        raise ConfigError("model ids in a catalog must be unique")
    cache = {} if cache is None else cache
    masks = {m.model_id: evaluate(m, testset)[1] for m in models}
    n = len(models)
    grid = np.full((n, n), np.nan)
    records = []
    for i, src in enumerate(models):
        sidx = np.flatnonzero(masks[src.model_id])
        adv = cache.get(src.model_id)
        if adv is None:
            adv = run_attack(src, testset.x[sidx], testset.y[sidx], cfg, indices=sidx)
            cache[src.model_id] = adv
        for j, tgt in enumerate(models):
            common = masks[tgt.model_id][sidx]
            f_ss, f_st = transfer_counts(adv, target_fooled(tgt, adv), common)
            rec = TransferRecord(src.model_id, tgt.model_id, cfg.attack_id, cfg.eps, int(common.sum()), f_ss, f_st)
            records.append(rec)
            if rec.defined:
                grid[i, j] = rec.tm
    return ConfusionMatrix(ids, grid, records, cfg.attack_id)


# ---------------------------------------------------------------------------
# exponential strength model  y(eps) = a * (1 - exp(b * eps))
# ---------------------------------------------------------------------------


class FitError(NumericError):
    """Levenberg-Marquardt did not converge; ``last`` holds the final iterate."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


def saturating(eps, a, b):
    return a * (1.0 - np.exp(b * np.asarray(eps, dtype=np.float64)))


@dataclass
class ExpFit:
    a: float
    b: float
    rmse: float
    converged: bool = True
    degenerate: bool = False
    iterations: int = 0
    trace: list = field(default_factory=list)

    def __call__(self, eps):
        return saturating(eps, self.a, self.b)

    def to_dict(self) -> dict:
        return asdict(self)


def _rmse(eps, y, a, b):
    return float(np.sqrt(np.mean((saturating(eps, a, b) - y) ** 2)))


def fit_exponential(eps, counts, max_iter=200, tol=1e-12, init=None) -> ExpFit:
    """Least-squares fit of ``a * (1 - exp(b * eps))`` by Levenberg-Marquardt.

    Starts from ``a = max(counts)``, ``b = -1 / median(eps)``. All-zero
    counts give the degenerate fit ``a = 0``.

    Raises:
        FitError: no convergence within ``max_iter`` iterations.
    """
    eps = np.asarray(eps, dtype=np.float64)
    y = np.asarray(counts, dtype=np.float64)
    if eps.shape != y.shape or eps.ndim != 1:
        raise ValueError("eps and counts must be matching 1-D sequences")
    if len(np.unique(eps)) < 3:
        raise ValueError("need at least three distinct eps values")
    if np.any(y < 0):
        raise ValueError("counts must be non-negative")
    b0 = -1.0 / float(np.median(eps[eps > 0])) if np.any(eps > 0) else -1.0
    if not np.any(y > 0):
        return ExpFit(0.0, b0, 0.0, degenerate=True)
    a, b = init if init is not None else (float(y.max()), b0)
    lam = 1e-3
    sse = float(np.sum((saturating(eps, a, b) - y) ** 2))
    trace = [sse]
    for it in range(1, max_iter + 1):
        e = np.exp(b * eps)
        r = a * (1.0 - e) - y
        jac = np.column_stack([1.0 - e, -a * eps * e])
        jtj = jac.T @ jac
        g = jac.T @ r
        improved = False
        while lam < 1e16:
            step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj) + 1e-300), -g)
            a_new, b_new = a + step[0], b + step[1]
            sse_new = float(np.sum((saturating(eps, a_new, b_new) - y) ** 2))
            if np.isfinite(sse_new) and sse_new < sse:
                improved = True
                break
            lam *= 10.0
        if not improved:
            # no descent direction left: a (local) minimum
            return ExpFit(a, b, _rmse(eps, y, a, b), True, False, it, trace)
        rel = (sse - sse_new) / max(sse, 1e-300)
        a, b, sse = a_new, b_new, sse_new
        trace.append(sse)
        lam = max(lam / 10.0, 1e-12)
        if rel < tol or sse == 0.0:
            return ExpFit(a, b, _rmse(eps, y, a, b), True, False, it, trace)
    last = ExpFit(a, b, _rmse(eps, y, a, b), False, False, max_iter, trace)
    raise FitError(f"no convergence after {max_iter} iterations", last)


@dataclass
class FitParams:
    """Fits of the transferred (``a, b``) and generated (``a2, b2``) count curves."""

    a: float
    b: float
    a2: float
    b2: float
    rmse_st: float = float("nan")
    rmse_ss: float = float("nan")
    holdout_rmse_st: float | None = None
    holdout_rmse_ss: float | None = None
    trace_st: list = field(default_factory=list)
    trace_ss: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def fit_transfer_curves(eps, f_st, f_ss, holdout=None) -> FitParams:
    """Fit both count curves; ``holdout`` is an optional ``(eps, f_st, f_ss)`` triple."""
    st = fit_exponential(eps, f_st)
    ss = fit_exponential(eps, f_ss)
    fp = FitParams(st.a, st.b, ss.a, ss.b, st.rmse, ss.rmse, trace_st=st.trace, trace_ss=ss.trace)
    if holdout is not None:
        he, hst, hss = (np.asarray(v, dtype=np.float64) for v in holdout)
        fp.holdout_rmse_st = _rmse(he, hst, st.a, st.b)
        fp.holdout_rmse_ss = _rmse(he, hss, ss.a, ss.b)
    return fp


def predict_tm(fit: FitParams, eps):
    """Model TM at ``eps``: the ratio of the two fitted curves, clamped to [0, 1].

    At ``eps == 0`` both curves vanish and the limit ``a*b / (a2*b2)`` is used.
    """
    if fit.a2 == 0:
        raise ValueError("generated-count curve is degenerate (a2 = 0)")
    eps = np.asarray(eps, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = saturating(eps, fit.a, fit.b) / saturating(eps, fit.a2, fit.b2)
    limit = (fit.a * fit.b) / (fit.a2 * fit.b2)
    ratio = np.where(eps == 0, limit, ratio)
    out = np.clip(ratio, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out
