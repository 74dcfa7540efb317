"""Low-transferability ensemble selection and robustness evaluation."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig
from .ensattack import METHODS, Ensemble, EnsembleSpec, domination_report, ensemble_attack, ensemble_predict
from .errors import ConfigError

EXHAUSTIVE_LIMIT = 15


class IncompleteTableError(ConfigError):
    """A pairwise score needed for selection is missing."""


@dataclass
class SymmetricTMTable:
    """Pairwise scores ``s(i, j) = (TM(i->j) + TM(j->i)) / 2`` with ``s(i, i) = 1``."""

    ids: list
    scores: np.ndarray

    @classmethod
    def from_confusion(cls, cm) -> SymmetricTMTable:
        g = np.asarray(cm.grid, dtype=np.float64)
        s = (g + g.T) / 2.0
        np.fill_diagonal(s, 1.0)
        return cls(list(cm.ids), s)

    @classmethod
    def from_pairs(cls, pairs: dict) -> SymmetricTMTable:
        """Build from ``{(i, j): score}``; missing pairs become NaN."""
        ids = sorted({k for pair in pairs for k in pair})
        s = np.full((len(ids), len(ids)), np.nan)
        np.fill_diagonal(s, 1.0)
        for (i, j), v in pairs.items():
            a, b = ids.index(i), ids.index(j)
            s[a, b] = s[b, a] = v
        return cls(ids, s)

    def score(self, i: str, j: str) -> float:
        return float(self.scores[self.ids.index(i), self.ids.index(j)])

    def excerpt(self, members) -> dict:
        return {f"{a}|{b}": self.score(a, b) for a, b in itertools.combinations(members, 2)}


def mean_pairwise(table: SymmetricTMTable, members) -> float:
    """Objective of a subset; 0 for a single member (no pairs)."""
    pairs = list(itertools.combinations(members, 2))
    if not pairs:
        return 0.0
    return float(np.mean([table.score(a, b) for a, b in pairs]))


def _candidates(catalog, table, accuracy, floor):
    ids = sorted(catalog)
    missing = [i for i in ids if i not in table.ids]
    if missing:
        raise IncompleteTableError(f"no scores for {missing}")
    if floor is not None:
        if accuracy is None:
            raise ConfigError("an accuracy floor needs per-model accuracies")
        ids = [i for i in ids if accuracy[i] >= floor]
    sub = [[table.score(a, b) for b in ids] for a in ids]
    if np.any(np.isnan(sub)):
        raise IncompleteTableError("pairwise table has missing cells over the catalog")
    return ids


def exhaustive_select(ids, k, table, maximize=False):
    best, best_val = None, None
    for combo in itertools.combinations(sorted(ids), k):
        v = mean_pairwise(table, combo)
        if best is None or (v > best_val if maximize else v < best_val):
            best, best_val = combo, v
    return best


def greedy_select(ids, k, table, maximize=False):
    """Seed with the best pair, then add whichever member keeps the mean best."""
    ids = sorted(ids)
    if k == 1:
        return (ids[0],)
    chosen = list(exhaustive_select(ids, 2, table, maximize))
    while len(chosen) < k:
        best, best_val = None, None
        for c in ids:
            if c in chosen:
                continue
            v = mean_pairwise(table, chosen + [c])
            if best is None or (v > best_val if maximize else v < best_val):
                best, best_val = c, v
        chosen.append(best)
    return tuple(sorted(chosen))


def select_ensemble(catalog, k, table, accuracy=None, floor=None, maximize=False, tie_seed=0, method=None):
    """Pick the size-``k`` subset with the lowest mean pairwise score.

    Exhaustive search up to 15 candidates, greedy growth beyond that; ties
    go to the lexicographically first subset. ``floor`` drops candidates
    whose clean accuracy (from ``accuracy``) is below it. ``maximize`` picks
    the most-transferable subset instead, which is useful as a baseline.
    """
    ids = _candidates(catalog, table, accuracy, floor)
    if not 1 <= k <= len(ids):
        raise ConfigError(f"k must be between 1 and {len(ids)}")
    method = method or ("exhaustive" if len(ids) <= EXHAUSTIVE_LIMIT else "greedy")
    pick = exhaustive_select(ids, k, table, maximize) if method == "exhaustive" else greedy_select(ids, k, table, maximize)
    return EnsembleSpec(tuple(pick), tie_seed=tie_seed)


def _by_eps(d):
    return {m: {f"{e:g}": v for e, v in sorted(by.items())} for m, by in sorted(d.items())}


@dataclass
class RobustnessReport:
    members: list
    clean_accuracy: float
    adversarial: dict = field(default_factory=dict)  # method -> {eps: accuracy}
    success: dict = field(default_factory=dict)  # method -> {eps: success rate}
    agreement: dict = field(default_factory=dict)  # method -> {eps: per-member agreement}
    table_excerpt: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def strongest(self) -> dict:
        """Lowest accuracy over methods at each eps, with the method that achieved it."""
        out = {}
        eps_values = sorted({e for by_eps in self.adversarial.values() for e in by_eps})
        for e in eps_values:
            m = min(self.adversarial, key=lambda k: (self.adversarial[k][e], k))
            out[e] = {"method": m, "accuracy": self.adversarial[m][e]}
        return out

    def to_json(self) -> str:
        doc = {
            "members": self.members,
            "clean_accuracy": self.clean_accuracy,
            "adversarial": _by_eps(self.adversarial),
            "success_rate": _by_eps(self.success),
            "agreement": _by_eps(self.agreement),
            "strongest": {f"{e:g}": v for e, v in self.strongest().items()},
            "table_excerpt": self.table_excerpt,
            "provenance": self.provenance,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    def comparison_rows(self) -> list:
        """``[method, eps, success rate, agreement...]`` per attacked cell."""
        rows = []
        for m, d in sorted(self.success.items()):
            for e, v in sorted(d.items()):
                rows.append([m, e, v] + list(self.agreement.get(m, {}).get(e, [])))
        return rows

    def to_csv(self) -> str:
        lines = ["ensemble,method,eps,accuracy"]
        eid = "+".join(self.members)
        for m, d in sorted(self.adversarial.items()):
            for e, v in sorted(d.items()):
                lines.append(f"{eid},{m},{e:g},{v:.6f}")
        for e, v in self.strongest().items():
            lines.append(f"{eid},strongest,{e:g},{v['accuracy']:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_robustness(
    ens: Ensemble, methods, eps_grid, testset, base_cfg: AttackConfig | None = None, step_fraction=0.25
) -> RobustnessReport:
    """Clean and adversarial ensemble accuracy under each method and eps.

    Adversarial accuracy is the share of the whole test set still classified
    correctly after the attack, i.e. clean accuracy times one minus the
    success rate. Step size is ``step_fraction * eps``.
    """
    base_cfg = base_cfg or AttackConfig()
    methods = list(methods or METHODS)
    n = len(testset.y)
    idx = np.arange(n)
    clean = float((ensemble_predict(ens, testset.x, idx) == testset.y).mean())
    report = RobustnessReport(list(ens.spec.members), clean)
    for m in methods:
        report.adversarial[m], report.success[m], report.agreement[m] = {}, {}, {}
        for e in eps_grid:
            cfg = AttackConfig(
                kind="pgd",
                eps=float(e),
                step_size=max(step_fraction * float(e), 1e-12),
                iterations=base_cfg.iterations,
                seed=base_cfg.seed,
            )
            states = []
            adv, rate = ensemble_attack(ens, testset.x, testset.y, cfg, m, indices=idx, states=states)
            report.adversarial[m][float(e)] = float((adv.attacked & ~adv.success).sum() / n)
            report.success[m][float(e)] = float(rate)
            agree = [domination_report(st)["agreement"] for st in states]
            report.agreement[m][float(e)] = np.mean(agree, axis=0).tolist() if agree else []
    return report
