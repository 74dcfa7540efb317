"""Command-line orchestration for training, attacks, transfer sweeps and TREND ensembles.

Every subcommand reads a JSON experiment config; command-line flags
override individual fields and ``TRENDLAB_OUT`` overrides the output root.
Reports carry no timestamps, so reruns with the same config are
byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, nncore, trend
from .attacks import AttackConfig, boundary_raster, perturbation_stats, run_attack
from .checkpoint import atomic_write_bytes, load_model, save_model
from .ensattack import METHODS, Ensemble
from .errors import CheckpointError, ConfigError, DataError, InputShapeError, NumericError
from .quant import QuantConfig
from .transfer import (
    ConfusionMatrix,
    FitError,
    TransferRecord,
    common_correct_subset,
    confusion_matrix,
    fit_transfer_curves,
    predict_tm,
    transferability,
)

logger = logging.getLogger("trendlab")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
FAMILIES = {"plain": nncore.plain_spec, "residual": nncore.residual_spec}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class CatalogEntry:
    id: str
    family: str = "plain"
    seed: int = 0
    quant: QuantConfig | None = None
    train: nncore.TrainConfig = field(default_factory=nncore.TrainConfig)
    channels: int = 8
    hidden: int = 64

    @classmethod
    def from_dict(cls, d: dict) -> CatalogEntry:
        if "id" not in d:
            raise ConfigError("catalog entry without an id")
        if d.get("family", "plain") not in FAMILIES:
            raise ConfigError(f"{d['id']}: unknown family {d.get('family')!r}")
        try:
            tc = nncore.TrainConfig.from_dict({"seed": d.get("seed", 0), **d.get("train", {})})
            q = QuantConfig.from_dict(d.get("quant"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{d['id']}: {exc}") from exc
        return cls(d["id"], d.get("family", "plain"), int(d.get("seed", 0)), q, tc, d.get("channels", 8), d.get("hidden", 64))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "family": self.family,
            "seed": self.seed,
            "quant": self.quant.to_dict() if self.quant else None,
            "train": self.train.to_dict(),
            "channels": self.channels,
            "hidden": self.hidden,
        }

    def spec(self, input_shape, classes) -> nncore.ModelSpec:
        return FAMILIES[self.family](input_shape, classes, self.seed, self.channels, self.hidden)


def _attack(d: dict) -> AttackConfig:
    try:
        return AttackConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad attack config {d}: {exc}") from exc


@dataclass
class ExperimentConfig:
    dataset: dict
    catalog: list
    attacks: list = field(default_factory=list)
    eps_grid: list = field(default_factory=list)
    fit: dict = field(default_factory=dict)
    trend: dict = field(default_factory=dict)
    output: str = "out"
    seed: int = 0
    workers: int = 1
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> ExperimentConfig:
        known = {"dataset", "catalog", "attacks", "eps_grid", "fit", "trend", "output", "seed", "workers"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields {sorted(extra)}")
        if "dataset" not in d:
            raise ConfigError("config needs a dataset section")
        cfg = cls(
            dataset=dict(d["dataset"]),
            catalog=[CatalogEntry.from_dict(e) for e in d.get("catalog", [])],
            attacks=[_attack(a) for a in d.get("attacks", [])],
            eps_grid=[float(e) for e in d.get("eps_grid", [])],
            fit=dict(d.get("fit", {})),
            trend=dict(d.get("trend", {})),
            output=d.get("output", "out"),
            seed=int(d.get("seed", 0)),
            workers=int(d.get("workers", 1)),
            base_dir=str(base_dir),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not self.catalog:
            raise ConfigError("model catalog is empty")
        ids = [e.id for e in self.catalog]
        if len(set(ids)) != len(ids):
            raise ConfigError("catalog ids must be unique")
        ds = self.dataset
        if "path" not in ds:
            raise ConfigError("dataset.path is required")
        if ds.get("format", "idx") not in ("idx", "csv"):
            raise ConfigError(f"unknown dataset format {ds.get('format')!r}")
        tr, va = ds.get("train_frac", 0.72), ds.get("val_frac", 0.08)
        if tr <= 0 or va <= 0 or tr + va >= 1:
            raise ConfigError("train_frac + val_frac must leave a held-out test share")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        for pair in self.fit.get("pairs", []):
            if any(p not in ids for p in pair):
                raise ConfigError(f"fit pair {pair} names unknown models")
        if self.fit and len(self.eps_grid) < self.fit.get("fit_points", 4):
            raise ConfigError("eps_grid must have at least fit_points values")
        k = self.trend.get("k")
        if k is not None and not 1 <= k <= len(ids):
            raise ConfigError(f"trend.k must be between 1 and {len(ids)}")
        for m in self.trend.get("methods", []):
            if m not in METHODS:
                raise ConfigError(f"unknown ensemble attack method {m!r}")

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out(self) -> Path:
        return self.path(os.environ.get("TRENDLAB_OUT") or self.output)

    def entry(self, model_id) -> CatalogEntry:
        for e in self.catalog:
            if e.id == model_id:
                return e
        raise ConfigError(f"no catalog model {model_id!r}")


def load_config(path, overrides=None) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    for k, v in (overrides or {}).items():
        if v is not None:
            d[k] = v
    return ExperimentConfig.from_dict(d, base_dir=Path(path).resolve().parent)


def desk_config(data_dir, output="out", epochs=30) -> dict:
    """The desk experiment: two families x {FP, Q1, Q2, Q4} x {SGD, Adam} on 8x8 digits."""
    catalog = []
    for fam, short in (("plain", "plain"), ("residual", "res")):
        for opt in ("sgd", "adam"):
            for bits in (None, 1, 2, 4):
                tag = f"Q{bits}" if bits else "FP"
                catalog.append(
                    {
                        "id": f"{short}-{opt}-{tag}",
                        "family": fam,
                        "seed": 1,
                        "quant": {"kind": "input", "bits": bits} if bits else None,
                        "train": {"optimizer": opt, "epochs": epochs},
                    }
                )
    return {
        "dataset": {
            "path": str(Path(data_dir) / "digits-images.idx"),
            "labels_path": str(Path(data_dir) / "digits-labels.idx"),
            "format": "idx",
            "train_frac": 0.72,
            "val_frac": 0.08,
        },
        "catalog": catalog,
        "attacks": [{"kind": "pgd", "eps": 0.5, "step_size": 0.125, "iterations": 40}],
        "eps_grid": [round(0.05 * i, 2) for i in range(1, 21)],
        "fit": {"pairs": [["plain-sgd-FP", "res-sgd-FP"]], "fit_points": 4, "step_fraction": 0.25, "iterations": 40},
        "trend": {"k": 3, "methods": list(METHODS), "eps_grid": [0.1, 0.2, 0.3], "iterations": 40, "baseline": True},
        "output": output,
        "seed": 0,
        "workers": 1,
    }


# ---------------------------------------------------------------------------
# runtime context
# ---------------------------------------------------------------------------


def _write_text(path: Path, text: str) -> Path:
    atomic_write_bytes(path, text.encode())
    return path


def _json(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _short(h: str) -> str:
    return h[:12]


class Context:
    """Loaded dataset plus lazily trained or cached catalog models."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        ds = cfg.dataset
        self.split = data.ingest_dataset(
            cfg.path(ds["path"]),
            ds.get("format", "idx"),
            cfg.path(ds["labels_path"]) if ds.get("labels_path") else None,
            classes=ds.get("classes"),
            train_frac=ds.get("train_frac", 0.72),
            val_frac=ds.get("val_frac", 0.08),
            seed=cfg.seed,
        )
        self.models: dict = {}

    @property
    def dataset_hash(self) -> str:
        return _short(self.split.digest)

    def cache_key(self, entry: CatalogEntry) -> str:
        doc = {
            "entry": entry.to_dict(),
            "spec": entry.spec(self.split.input_shape, self.split.classes).to_dict(),
            "dataset": self.split.digest,
            "normalizer": self.split.normalizer.to_dict(),
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def checkpoint_path(self, entry) -> Path:
        return self.cfg.out / "checkpoints" / f"{entry.id}.json"

    def _train(self, entry: CatalogEntry, key: str):
        spec = entry.spec(self.split.input_shape, self.split.classes)
        m = nncore.Model.build(spec, quant=entry.quant, bounds=self.split.bounds)
        m.provenance["id"] = entry.id
        m = nncore.train(m, self.split.train, self.split.val, entry.train)
        m.provenance["cache_key"] = key
        m.provenance["dataset_hash"] = self.split.digest
        save_model(m, self.checkpoint_path(entry))
        return m

    def model(self, entry: CatalogEntry, force=False):
        """Cached model for ``entry``; retrains on a missing, corrupt or stale checkpoint."""
        if entry.id in self.models and not force:
            return self.models[entry.id]
        key = self.cache_key(entry)
        path = self.checkpoint_path(entry)
        m = None
        if path.exists() and not force:
            try:
                m = load_model(path)
                if m.provenance.get("cache_key") != key:
                    logger.warning("%s: checkpoint does not match config (hash mismatch); retraining", entry.id)
                    m = None
            except CheckpointError as exc:
                logger.warning("%s: %s; retraining", entry.id, exc)
        if m is None:
            m = self._train(entry, key)
        self.models[entry.id] = m
        return m

    def all_models(self, ids=None, force=False) -> list:
        entries = [self.cfg.entry(i) for i in ids] if ids else self.cfg.catalog
        with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
            return list(pool.map(lambda e: self.model(e, force), entries))

    def provenance(self, model, attack: AttackConfig | None = None) -> dict:
        return {
            "model_hash": _short(model.content_hash()),
            "attack_hash": attack.digest() if attack else "",
            "dataset_hash": self.dataset_hash,
        }


# ---------------------------------------------------------------------------
# pipeline steps
# ---------------------------------------------------------------------------


def step_train(ctx: Context, ids=None, force=False) -> Path:
    models = ctx.all_models(ids, force)
    rows = []
    for m in models:
        e = ctx.cfg.entry(m.model_id)
        acc, _ = nncore.evaluate(m, ctx.split.test)
        rows.append(
            [e.id, e.family, e.train.optimizer, e.quant.tag if e.quant else "FP", f"{acc:.6f}",
             f"{m.provenance.get('val_accuracy', float('nan')):.6f}", m.provenance.get("best_epoch", ""),
             _short(m.content_hash()), "", ctx.dataset_hash]
        )
    header = ["model", "family", "optimizer", "quant", "test_acc", "val_acc", "best_epoch", "model_hash", "attack_hash", "dataset_hash"]
    return _write_text(ctx.cfg.out / "models.csv", _csv(rows, header))


def _attacks(ctx, index=None) -> list:
    atk = ctx.cfg.attacks or [AttackConfig(kind="pgd", eps=0.5, step_size=0.125, iterations=40)]
    if index is not None:
        if not 0 <= index < len(atk):
            raise ConfigError(f"attack index {index} out of range (have {len(atk)})")
        atk = [atk[index]]
    return atk


def step_attack(ctx: Context, ids=None, index=None, save_adv=False) -> Path:
    """Attack-comparison table: every configured attack against each model's correct test images."""
    rows = []
    for m in ctx.all_models(ids):
        _, mask = nncore.evaluate(m, ctx.split.test)
        sidx = np.flatnonzero(mask)
        for cfg in _attacks(ctx, index):
            adv = run_attack(m, ctx.split.test.x[sidx], ctx.split.test.y[sidx], cfg, indices=sidx)
            st = perturbation_stats(adv) or {}
            p = ctx.provenance(m, cfg)
            rows.append(
                [m.model_id, cfg.attack_id, f"{cfg.eps:g}", adv.generated, int(adv.attacked.sum()),
                 f"{adv.success_rate:.6f}", f"{st.get('mean_l2', float('nan')):.6f}",
                 f"{st.get('mean_linf', float('nan')):.6f}", int(adv.failed.sum()),
                 p["model_hash"], p["attack_hash"], p["dataset_hash"]]
            )
            if save_adv:
                adv.save(ctx.cfg.out / "adversarial" / f"{m.model_id}-{cfg.attack_id}.npz")
    header = ["model", "attack", "eps", "generated", "attacked", "success_rate", "mean_l2", "mean_linf", "failed",
              "model_hash", "attack_hash", "dataset_hash"]
    return _write_text(ctx.cfg.out / "attack" / "comparison.csv", _csv(rows, header))


def _record_rows(cm: ConfusionMatrix, ctx, models, cfg):
    by_id = {m.model_id: m for m in models}
    rows = []
    for r in cm.records:
        rows.append(
            [r.source, r.target, r.attack, f"{r.eps:g}", r.subset_size, r.f_ss, r.f_st,
             "" if r.tm is None else f"{r.tm:.6f}", _short(by_id[r.source].content_hash()),
             _short(by_id[r.target].content_hash()), cfg.digest(), ctx.dataset_hash]
        )
    return rows


def compute_matrix(ctx: Context, cfg: AttackConfig) -> ConfusionMatrix:
    models = ctx.all_models()
    cm = confusion_matrix(models, cfg, ctx.split.test)
    cm.provenance = {
        "models": {m.model_id: _short(m.content_hash()) for m in models},
        "attack_hash": cfg.digest(),
        "dataset_hash": ctx.dataset_hash,
    }
    return cm


def step_transfer(ctx: Context, index=None) -> list:
    written = []
    for cfg in _attacks(ctx, index):
        cm = compute_matrix(ctx, cfg)
        base = ctx.cfg.out / "transfer" / cfg.attack_id
        written.append(_write_text(base.parent / f"{base.name}.csv", cm.to_csv()))
        written.append(_write_text(base.parent / f"{base.name}.json", cm.to_json() + "\n"))
        header = ["source", "target", "attack", "eps", "subset", "f_ss", "f_st", "tm",
                  "source_hash", "target_hash", "attack_hash", "dataset_hash"]
        rows = _record_rows(cm, ctx, ctx.all_models(), cfg)
        written.append(_write_text(base.parent / f"{cfg.attack_id}-records.csv", _csv(rows, header)))
    return written


def _load_matrix(ctx, cfg: AttackConfig) -> ConfusionMatrix | None:
    """A previously written matrix, if its provenance still matches the catalog."""
    path = ctx.cfg.out / "transfer" / f"{cfg.attack_id}.json"
    if not path.exists():
        return None
    doc = json.loads(path.read_text())
    want = {
        "models": {m.model_id: _short(m.content_hash()) for m in ctx.all_models()},
        "attack_hash": cfg.digest(),
        "dataset_hash": ctx.dataset_hash,
    }
    if doc.get("provenance") != want:
        return None
    grid = np.array([[np.nan if v is None else v for v in row] for row in doc["grid"]], dtype=np.float64)
    recs = [TransferRecord(**{k: r[k] for k in ("source", "target", "attack", "eps", "subset_size", "f_ss", "f_st")})
            for r in doc["records"]]
    return ConfusionMatrix(doc["ids"], grid, recs, doc["attack"], doc["provenance"])


def transfer_curve(ctx, source, target, eps_grid, step_fraction=0.25, iterations=40, seed=0):
    """``(f_ss, f_st)`` for ``source -> target`` at each eps, over their common correct subset."""
    subset = common_correct_subset(source, target, ctx.split.test)
    f_ss, f_st = [], []
    for e in eps_grid:
        cfg = AttackConfig(kind="pgd", eps=float(e), step_size=step_fraction * float(e), iterations=iterations, seed=seed)
        r = transferability(source, target, cfg, ctx.split.test, subset)
        f_ss.append(r.f_ss)
        f_st.append(r.f_st)
    return np.array(f_ss, dtype=np.float64), np.array(f_st, dtype=np.float64), len(subset)


def fit_indices(n, k) -> np.ndarray:
    """``k`` evenly spread positions in a grid of ``n`` (always including both ends)."""
    return np.unique(np.round(np.linspace(0, n - 1, k)).astype(int))


def _fit_failure(exc: FitError, eps, f_st, f_ss) -> dict:
    last = exc.last
    return {
        "error": str(exc),
        "last_iterate": None if last is None else {"a": last.a, "b": last.b, "rmse": last.rmse, "iterations": last.iterations},
        "f_st": f_st.tolist(),
        "f_ss": f_ss.tolist(),
        "eps": eps.tolist(),
    }


def step_fit(ctx: Context, pairs=None) -> list:
    """Fit each configured pair; a non-converged fit is reported and then raised once all pairs are written."""
    fc = ctx.cfg.fit
    pairs = pairs or fc.get("pairs", [])
    if not pairs:
        raise ConfigError("no fit pairs configured")
    eps = np.array(ctx.cfg.eps_grid, dtype=np.float64)
    if len(eps) < fc.get("fit_points", 4):
        raise ConfigError("eps_grid is shorter than fit_points")
    written, failed = [], []
    for src_id, tgt_id in pairs:
        src, tgt = ctx.model(ctx.cfg.entry(src_id)), ctx.model(ctx.cfg.entry(tgt_id))
        f_ss, f_st, n = transfer_curve(
            ctx, src, tgt, eps, fc.get("step_fraction", 0.25), fc.get("iterations", 40), ctx.cfg.seed
        )
        sel = fit_indices(len(eps), fc.get("fit_points", 4))
        rest = np.setdiff1d(np.arange(len(eps)), sel)
        p = {"source_hash": _short(src.content_hash()), "target_hash": _short(tgt.content_hash()),
             "attack_hash": AttackConfig(kind="pgd", iterations=fc.get("iterations", 40), seed=ctx.cfg.seed).digest(),
             "dataset_hash": ctx.dataset_hash}
        name = f"{src_id}__{tgt_id}"
        doc = {"source": src_id, "target": tgt_id, "subset_size": n, "fit_eps": eps[sel].tolist(), "provenance": p}
        try:
            fp = fit_transfer_curves(eps[sel], f_st[sel], f_ss[sel], holdout=(eps[rest], f_st[rest], f_ss[rest]))
        except FitError as exc:
            logger.warning("%s: %s", name, exc)
            doc["failure"] = _fit_failure(exc, eps, f_st, f_ss)
            written.append(_write_text(ctx.cfg.out / "fit" / f"{name}.json", _json(doc)))
            failed.append(name)
            continue
        try:
            doc["full_grid_fit"] = fit_transfer_curves(eps, f_st, f_ss).to_dict()
        except FitError as exc:
            doc["full_grid_fit"] = _fit_failure(exc, eps, f_st, f_ss)
        pred_st = fp.a * (1 - np.exp(fp.b * eps))
        pred_ss = fp.a2 * (1 - np.exp(fp.b2 * eps))
        defined = f_ss > 0
        tm = np.where(defined, f_st / np.where(defined, f_ss, 1), np.nan)
        tm_pred = predict_tm(fp, eps) if fp.a2 != 0 else np.full(len(eps), np.nan)
        doc.update(
            fit=fp.to_dict(),
            rmse_st_all=float(np.sqrt(np.mean((pred_st - f_st) ** 2))),
            rmse_ss_all=float(np.sqrt(np.mean((pred_ss - f_ss) ** 2))),
            max_count=float(max(f_ss.max(), f_st.max())),
            mean_abs_tm_error=float(np.nanmean(np.abs(tm_pred - tm)[defined])) if defined.any() else None,
        )
        written.append(_write_text(ctx.cfg.out / "fit" / f"{name}.json", _json(doc)))
        rows = [
            [f"{e:g}", int(a), int(b), "" if np.isnan(t) else f"{t:.6f}", "" if np.isnan(q) else f"{q:.6f}",
             f"{ps:.6f}", f"{pt:.6f}", int(i in sel), p["source_hash"], p["target_hash"], p["attack_hash"], p["dataset_hash"]]
            for i, (e, a, b, t, q, ps, pt) in enumerate(zip(eps, f_ss, f_st, tm, tm_pred, pred_ss, pred_st))
        ]
        header = ["eps", "f_ss", "f_st", "tm", "tm_pred", "f_ss_pred", "f_st_pred", "fit_point",
                  "source_hash", "target_hash", "attack_hash", "dataset_hash"]
        written.append(_write_text(ctx.cfg.out / "fit" / f"{name}.csv", _csv(rows, header)))
    if failed:
        raise FitError(f"fit did not converge for {', '.join(failed)}")
    return written


def _trend_base(ctx) -> AttackConfig:
    return AttackConfig(kind="pgd", iterations=ctx.cfg.trend.get("iterations", 40), seed=ctx.cfg.seed)


def evaluate_ensemble(ctx: Context, members, table=None, name=None) -> trend.RobustnessReport:
    tc = ctx.cfg.trend
    models = [ctx.model(ctx.cfg.entry(i)) for i in members]
    ens = Ensemble.of(models, tie_seed=ctx.cfg.seed, ids=list(members))
    methods = tc.get("methods") or list(METHODS)
    grid = tc.get("eps_grid") or [0.1]
    base = _trend_base(ctx)
    cells = [(m, e) for m in methods for e in grid]

    def cell(me):
        return trend.evaluate_robustness(ens, [me[0]], [me[1]], ctx.split.test, base, tc.get("step_fraction", 0.25))

    with ThreadPoolExecutor(max_workers=ctx.cfg.workers) as pool:
        parts = list(pool.map(cell, cells))
    rep = trend.RobustnessReport(list(members), parts[0].clean_accuracy if parts else float("nan"))
    for (m, e), part in zip(cells, parts):
        for mine, theirs in ((rep.adversarial, part.adversarial), (rep.success, part.success), (rep.agreement, part.agreement)):
            mine.setdefault(m, {})[float(e)] = theirs[m][float(e)]
    if table is not None:
        rep.table_excerpt = table.excerpt(members)
        rep.table_excerpt["mean"] = trend.mean_pairwise(table, members)
    rep.provenance = {
        "models": {i: _short(m.content_hash()) for i, m in zip(members, models)},
        "attack_hash": base.digest(),
        "dataset_hash": ctx.dataset_hash,
    }
    return rep


def _write_report(ctx, rep: trend.RobustnessReport, name: str) -> list:
    base = ctx.cfg.out / "ensemble" / name
    csv_text = rep.to_csv()
    p = rep.provenance
    lines = csv_text.splitlines()
    hashes = ";".join(f"{k}:{v}" for k, v in sorted(p["models"].items()))
    lines = [lines[0] + ",model_hashes,attack_hash,dataset_hash"] + [
        f"{ln},{hashes},{p['attack_hash']},{p['dataset_hash']}" for ln in lines[1:]
    ]
    eid = "+".join(rep.members)
    comp = [[eid, m, f"{e:g}", f"{sr:.6f}"] + [f"{a:.6f}" for a in agree] + [hashes, p["attack_hash"], p["dataset_hash"]]
            for m, e, sr, *agree in rep.comparison_rows()]
    header = ["ensemble", "method", "eps", "success_rate"] + [f"agree_{i}" for i in rep.members]
    header += ["model_hashes", "attack_hash", "dataset_hash"]
    return [
        _write_text(base.parent / f"{base.name}.json", rep.to_json() + "\n"),
        _write_text(base.parent / f"{base.name}.csv", "\n".join(lines) + "\n"),
        _write_text(base.parent / f"{base.name}-attacks.csv", _csv(comp, header)),
    ]


def build_table(ctx) -> trend.SymmetricTMTable:
    cfg = AttackConfig(**{**_attacks(ctx)[0].to_dict(), **ctx.cfg.trend.get("table_attack", {})})
    cm = _load_matrix(ctx, cfg) or compute_matrix(ctx, cfg)
    return trend.SymmetricTMTable.from_confusion(cm)


def step_trend(ctx: Context) -> list:
    tc = ctx.cfg.trend
    k = tc.get("k", 3)
    table = build_table(ctx)
    ids = [e.id for e in ctx.cfg.catalog]
    accuracy = None
    if tc.get("floor") is not None:
        accuracy = {m.model_id: nncore.evaluate(m, ctx.split.test)[0] for m in ctx.all_models()}
    low = trend.select_ensemble(ids, k, table, accuracy, tc.get("floor"), tie_seed=ctx.cfg.seed)
    written = _write_report(ctx, evaluate_ensemble(ctx, low.members, table), "trend-low")
    summary = {"k": k, "low": {"members": list(low.members), "mean_tm": trend.mean_pairwise(table, low.members)}}
    if tc.get("baseline", True):
        high = trend.select_ensemble(ids, k, table, accuracy, tc.get("floor"), maximize=True, tie_seed=ctx.cfg.seed)
        written += _write_report(ctx, evaluate_ensemble(ctx, high.members, table), "trend-high")
        summary["high"] = {"members": list(high.members), "mean_tm": trend.mean_pairwise(table, high.members)}
    written.append(_write_text(ctx.cfg.out / "ensemble" / "trend-summary.json", _json(summary)))
    return written


def step_raster(ctx: Context, model_id, index=0, extent=2.0, resolution=65) -> Path:
    m = ctx.model(ctx.cfg.entry(model_id))
    test = ctx.split.test
    if not 0 <= index < len(test.y):
        raise ConfigError(f"test index {index} out of range")
    x, y = test.x[index : index + 1], test.y[index : index + 1]
    g = nncore.input_gradient(m, x, y)[0]
    grid, _, _ = boundary_raster(m, x[0], g, extent, resolution, ctx.cfg.seed)
    half = resolution // 2
    a = extent * (np.arange(resolution) - half) / half
    p = ctx.provenance(m)
    rows = [[f"{a[i]:.6f}", f"{a[j]:.6f}", int(grid[i, j]), p["model_hash"], "", p["dataset_hash"]]
            for i in range(resolution) for j in range(resolution)]
    header = ["v", "u", "label", "model_hash", "attack_hash", "dataset_hash"]
    return _write_text(ctx.cfg.out / "raster" / f"{model_id}-{index}.csv", _csv(rows, header))


def run_experiment(cfg: ExperimentConfig) -> list:
    """Train or load the catalog, then run every configured sweep."""
    ctx = Context(cfg)
    written = [step_train(ctx)]
    written += step_transfer(ctx)
    fit_error = None
    if cfg.fit.get("pairs"):
        try:
            written += step_fit(ctx)
        except FitError as exc:
            fit_error = exc
    if cfg.trend:
        written += step_trend(ctx)
    if fit_error is not None:
        raise fit_error
    return written


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trendlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="experiment config (JSON)")
        s.add_argument("--out", help="output directory (overrides config)")
        s.add_argument("--seed", type=int, help="global seed (overrides config)")
        s.add_argument("--workers", type=int, help="worker threads (overrides config)")
        return s

    s = sub.add_parser("export-digits", help="write the bundled 8x8 digits as IDX files")
    s.add_argument("--out", required=True)
    s = sub.add_parser("desk-config", help="write the default desk experiment config")
    s.add_argument("--data", required=True, help="directory holding the digits IDX files")
    s.add_argument("--out", required=True, help="config file to write")
    s.add_argument("--epochs", type=int, default=30)

    s = cmd("train", "train (or load cached) catalog models")
    s.add_argument("--model", action="append", help="only this model id (repeatable)")
    s.add_argument("--force", action="store_true", help="retrain even if a valid checkpoint exists")
    s = cmd("attack", "compare configured attacks on catalog models")
    s.add_argument("--model", action="append")
    s.add_argument("--attack-index", type=int)
    s.add_argument("--save-adv", action="store_true", help="archive adversarial batches as .npz")
    s = cmd("transfer-matrix", "transferability confusion matrix per configured attack")
    s.add_argument("--attack-index", type=int)
    s = cmd("fit", "sweep eps and fit the exponential transfer model")
    s.add_argument("--pair", nargs=2, action="append", metavar=("SOURCE", "TARGET"))
    cmd("trend-build", "select the lowest-transferability ensemble and evaluate it")
    s = cmd("ensemble-eval", "robustness of a given ensemble under the ensemble attacks")
    s.add_argument("--members", required=True, help="comma-separated model ids")
    s.add_argument("--name", help="report name (default: members joined by '+')")
    s = cmd("boundary-raster", "decision regions on a plane through a test image")
    s.add_argument("--model", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--extent", type=float, default=2.0)
    s.add_argument("--resolution", type=int, default=65)
    cmd("run", "the whole pipeline")
    return p


def _dispatch(args) -> list:
    if args.command == "export-digits":
        return list(data.export_digits(args.out))
    if args.command == "desk-config":
        return [_write_text(Path(args.out), _json(desk_config(Path(args.data).resolve(), epochs=args.epochs)))]
    cfg = load_config(args.config, {"output": args.out, "seed": args.seed, "workers": args.workers})
    if args.command == "run":
        return run_experiment(cfg)
    ctx = Context(cfg)
    if args.command == "train":
        return [step_train(ctx, args.model, args.force)]
    if args.command == "attack":
        return [step_attack(ctx, args.model, args.attack_index, args.save_adv)]
    if args.command == "transfer-matrix":
        return step_transfer(ctx, args.attack_index)
    if args.command == "fit":
        return step_fit(ctx, args.pair)
    if args.command == "trend-build":
        return step_trend(ctx)
    if args.command == "ensemble-eval":
        members = [m for m in args.members.split(",") if m]
        cm = _load_matrix(ctx, _attacks(ctx)[0])
        table = trend.SymmetricTMTable.from_confusion(cm) if cm is not None else None
        rep = evaluate_ensemble(ctx, members, table)
        return _write_report(ctx, rep, args.name or "+".join(members))
    if args.command == "boundary-raster":
        return [step_raster(ctx, args.model, args.index, args.extent, args.resolution)]
    raise ConfigError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        for path in _dispatch(args):
            print(path)
    except (ConfigError, InputShapeError) as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        logger.error("numeric error: %s", exc)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
