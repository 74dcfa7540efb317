"""White-box attacks on a single model: PGD, Carlini-Wagner L2 and DeepFool.

Every attack works only on images the model already classifies correctly;
the rest are carried through untouched and flagged in ``AdvBatch.attacked``.
Gradients flow through quantizers straight-through, so quantized models are
attacked with the same code path.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .nncore import Model, input_gradient


def sgn(a: np.ndarray) -> np.ndarray:
    """Elementwise sign with ``sgn(0) == 0``."""
    return np.sign(a)


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    eps: float = 8 / 255
    step_size: float = 0.01
    iterations: int = 40
    kappa: float = 0.0
    overshoot: float = 0.02
    seed: int = 0
    # carlini-wagner search knobs
    c_init: float = 1.0
    search_steps: int = 5
    cw_lr: float = 0.1

    def __post_init__(self):
        if self.kind not in ("pgd", "cw_l2", "deepfool"):
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.eps < 0:
            raise ConfigError("eps must be non-negative")
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if self.kind == "pgd" and not self.step_size > 0:
            raise ConfigError("pgd step size must be positive")
        if self.kappa < 0:
            raise ConfigError("kappa must be non-negative")

    @classmethod
    def reference_pgd(cls, seed=0) -> AttackConfig:
        return cls(kind="pgd", eps=8 / 255, step_size=0.01, iterations=40, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def attack_id(self) -> str:
        if self.kind == "pgd":
            return f"pgd-e{self.eps:g}-s{self.step_size:g}-i{self.iterations}"
        if self.kind == "cw_l2":
            return f"cw-k{self.kappa:g}-i{self.iterations}"
        return f"deepfool-o{self.overshoot:g}-i{self.iterations}"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class AdvBatch:
    clean: np.ndarray
    adv: np.ndarray
    labels: np.ndarray
    attacked: np.ndarray
    success: np.ndarray
    l2: np.ndarray
    linf: np.ndarray
    failed: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.failed is None:
            self.failed = np.zeros(len(self.labels), dtype=bool)

    @property
    def generated(self) -> int:
        return int(self.success.sum())

    @property
    def success_rate(self) -> float:
        """Fraction of attacked images that were flipped."""
        n = int(self.attacked.sum())
        return self.generated / n if n else 0.0

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            path,
            clean=self.clean,
            adv=self.adv,
            labels=self.labels,
            attacked=self.attacked,
            success=self.success,
            l2=self.l2,
            linf=self.linf,
            failed=self.failed,
            meta=np.array(json.dumps(self.meta, sort_keys=True)),
        )

    @classmethod
    def load(cls, path) -> AdvBatch:
        with np.load(path) as z:
            return cls(
                clean=z["clean"],
                adv=z["adv"],
                labels=z["labels"],
                attacked=z["attacked"],
                success=z["success"],
                l2=z["l2"],
                linf=z["linf"],
                failed=z["failed"],
                meta=json.loads(str(z["meta"])),
            )


def archive_name(model_id: str, attack_id: str, eps: float) -> str:
    return f"{model_id}__{attack_id}__e{eps:g}.npz"


def _norms(delta):
    flat = delta.reshape(len(delta), -1)
    return np.linalg.norm(flat, axis=1), (np.abs(flat).max(axis=1) if flat.shape[1] else np.zeros(len(flat)))


def _assemble(x, y, attacked, adv_sub, success_sub, failed_sub=None, meta=None):
    adv = x.copy()
    adv[attacked] = adv_sub
    success = np.zeros(len(y), dtype=bool)
    success[attacked] = success_sub
    failed = np.zeros(len(y), dtype=bool)
    if failed_sub is not None:
        failed[attacked] = failed_sub
    l2, linf = _norms(adv - x)
    return AdvBatch(x, adv, y, attacked, success, l2, linf, failed, meta or {})


def _prep(model, batch, labels):
    x = np.asarray(batch, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    attacked = model.predict(x) == y if len(y) else np.zeros(0, dtype=bool)
    return x, y, attacked


def random_start(cfg: AttackConfig, shape, indices=None, batch_id=0) -> np.ndarray:
    """Uniform(-1, 1) start offsets, one stream per (seed, batch id, image index).

    Keying on the image index keeps an image's start independent of which
    other images share its batch.
    """
    if indices is None:
        indices = range(shape[0])
    out = np.empty(shape)
    for row, i in enumerate(indices):
        out[row] = np.random.default_rng([cfg.seed, batch_id, int(i)]).uniform(-1.0, 1.0, size=shape[1:])
    return out


def project(adv, x, eps, clip):
    return clip(np.clip(adv, x - eps, x + eps))


# ---------------------------------------------------------------------------
# PGD
# ---------------------------------------------------------------------------


def pgd(model: Model, batch, labels, cfg: AttackConfig, indices=None, batch_id=0) -> AdvBatch:
    """L-infinity PGD with a uniform random start inside the eps-ball.

    ``indices`` are the images' positions in the full test set; they key the
    random start so results do not depend on how the set was batched.
    """
    if cfg.eps < 0:
        raise ConfigError("eps must be non-negative")
    x, y, attacked = _prep(model, batch, labels)
    k = random_start(cfg, x.shape, indices, batch_id)[attacked]
    xa, ya = x[attacked], y[attacked]
    meta = {"attack": cfg.attack_id, "eps": cfg.eps, "model": model.model_id}
    if len(ya) == 0:
        return _assemble(x, y, attacked, xa, np.zeros(0, bool), meta=meta)
    adv = project(xa + cfg.eps * k, xa, cfg.eps, model.clip)
    for _ in range(cfg.iterations):
        g = input_gradient(model, adv, ya)
        adv = project(adv + cfg.step_size * sgn(g), xa, cfg.eps, model.clip)
    success = model.predict(adv) != ya
    return _assemble(x, y, attacked, adv, success, meta=meta)


# ---------------------------------------------------------------------------
# Carlini-Wagner L2
# ---------------------------------------------------------------------------


def margin(logits, y):
    """Best wrong logit minus the true logit, per row."""
    rows = np.arange(len(y))
    other = logits.copy()
    other[rows, y] = -np.inf
    return other.max(axis=1) - logits[rows, y], other.argmax(axis=1)


def cw_l2(model: Model, batch, labels, kappa=0.0, iterations=100, cfg: AttackConfig | None = None) -> AdvBatch:
    """Carlini-Wagner L2 in tanh space with a binary search over the trade-off constant.

    An image counts as adversarial only once its best wrong logit beats the
    true one by at least ``kappa`` (strictly, when ``kappa == 0``). Among all
    such iterates the one with the smallest L2 distance is kept.
    """
    if kappa < 0:
        raise ConfigError("kappa must be non-negative")
    cfg = cfg or AttackConfig(kind="cw_l2", kappa=kappa, iterations=iterations)
    if model.bounds is None:
        raise ConfigError("cw_l2 needs model input bounds for its tanh box")
    lo_b, hi_b = (np.broadcast_to(b, model.spec.input_shape) for b in model.bounds)
    half = (hi_b - lo_b) / 2.0
    mid = (hi_b + lo_b) / 2.0

    x, y, attacked = _prep(model, batch, labels)
    xa, ya = x[attacked], y[attacked]
    n = len(ya)
    meta = {"attack": f"cw-k{kappa:g}-i{iterations}", "kappa": kappa, "model": model.model_id}
    if n == 0:
        return _assemble(x, y, attacked, xa, np.zeros(0, bool), meta=meta)

    w0 = np.arctanh(np.clip((xa - mid) / half, -1 + 1e-6, 1 - 1e-6))
    c = np.full(n, float(cfg.c_init))
    c_lo = np.zeros(n)
    c_hi = np.full(n, np.inf)
    best_l2 = np.full(n, np.inf)
    best_adv = xa.copy()
    failed = np.zeros(n, dtype=bool)
    rows = np.arange(n)

    def succeeded(m):
        return (m >= kappa) & (m > 0) if kappa == 0 else m >= kappa

    for _ in range(cfg.search_steps):
        w = w0.copy()
        m1 = np.zeros_like(w)
        m2 = np.zeros_like(w)
        hit = np.zeros(n, dtype=bool)
        for t in range(1, iterations + 1):
            th = np.tanh(w)
            adv = mid + half * th
            logits = model.forward(adv)
            mg, j = margin(logits, ya)
            ok = succeeded(mg) & np.isfinite(mg)
            l2 = np.sqrt(((adv - xa) ** 2).reshape(n, -1).sum(axis=1))
            better = ok & (l2 < best_l2)
            best_l2[better] = l2[better]
            best_adv[better] = adv[better]
            hit |= ok
            # hinge on (true - best wrong + kappa); gradient only while it is active
            active = (-mg + kappa) > 0
            dlog = np.zeros_like(logits)
            dlog[rows, ya] = c * active
            dlog[rows, j] -= c * active
            g_adv = 2.0 * (adv - xa) + model.input_vjp(adv, dlog)
            g = g_adv * half * (1.0 - th**2)
            m1 = 0.9 * m1 + 0.1 * g
            m2 = 0.999 * m2 + 0.001 * g * g
            step = cfg.cw_lr * (m1 / (1 - 0.9**t)) / (np.sqrt(m2 / (1 - 0.999**t)) + 1e-8)
            w_new = w - step
            bad = ~np.all(np.isfinite(w_new.reshape(n, -1)), axis=1)
            if np.any(bad):
                failed |= bad
                w_new[bad] = w0[bad]
                m1[bad] = 0.0
                m2[bad] = 0.0
            w = w_new
        # binary search on c, per image
        c_hi = np.where(hit, np.minimum(c_hi, c), c_hi)
        c_lo = np.where(hit, c_lo, np.maximum(c_lo, c))
        c = np.where(np.isfinite(c_hi), (c_lo + c_hi) / 2.0, c * 10.0)
    # re-score the returned batch as a whole (input quantization is batch-wide)
    final_margin, _ = margin(model.forward(best_adv), ya)
    success = np.isfinite(best_l2) & succeeded(final_margin)
    best_adv[~success] = xa[~success]
    failed &= ~success
    return _assemble(x, y, attacked, best_adv, success, failed, meta=meta)


# ---------------------------------------------------------------------------
# DeepFool
# ---------------------------------------------------------------------------


def deepfool(model: Model, batch, labels, overshoot=0.02, max_iter=50) -> AdvBatch:
    """Multiclass DeepFool: repeatedly step to the nearest linearized boundary.

    The accumulated step is scaled by ``1 + overshoot`` before it is applied.
    Images still classified correctly after ``max_iter`` rounds are flagged
    as failures.
    """
    if model.spec.classes < 2:
        raise ConfigError("deepfool needs at least two classes")
    x, y, attacked = _prep(model, batch, labels)
    xa, ya = x[attacked], y[attacked]
    n = len(ya)
    meta = {"attack": f"deepfool-o{overshoot:g}-i{max_iter}", "model": model.model_id}
    if n == 0:
        return _assemble(x, y, attacked, xa, np.zeros(0, bool), meta=meta)
    classes = model.spec.classes
    r_tot = np.zeros_like(xa)
    adv = xa.copy()
    done = np.zeros(n, dtype=bool)
    for _ in range(max_iter):
        live = np.flatnonzero(~done)
        if len(live) == 0:
            break
        xl, yl = adv[live], ya[live]
        logits = model.forward(xl)
        grads = np.stack([model.input_vjp(xl, np.eye(classes)[np.full(len(live), k)]) for k in range(classes)], 1)
        lr_rows = np.arange(len(live))
        f = logits - logits[lr_rows, yl][:, None]
        wk = grads - grads[lr_rows, yl][:, None]
        wnorm = np.linalg.norm(wk.reshape(len(live), classes, -1), axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.abs(f) / wnorm
        dist[lr_rows, yl] = np.inf
        dist[~np.isfinite(dist)] = np.inf
        best = dist.argmin(axis=1)
        wl = wk[lr_rows, best]
        fl = np.abs(f[lr_rows, best])
        nl = wnorm[lr_rows, best]
        scale = np.where(nl > 0, fl / np.where(nl > 0, nl, 1.0) ** 2, 0.0)
        r_tot[live] += scale.reshape((-1,) + (1,) * (xa.ndim - 1)) * wl
        adv[live] = model.clip(xa[live] + (1.0 + overshoot) * r_tot[live])
        done[live] = model.predict(adv[live]) != yl
    success = model.predict(adv) != ya
    return _assemble(x, y, attacked, adv, success, ~success, meta=meta)


def run_attack(model: Model, batch, labels, cfg: AttackConfig, indices=None, batch_id=0) -> AdvBatch:
    if cfg.kind == "pgd":
        return pgd(model, batch, labels, cfg, indices, batch_id)
    if cfg.kind == "cw_l2":
        return cw_l2(model, batch, labels, cfg.kappa, cfg.iterations, cfg)
    return deepfool(model, batch, labels, cfg.overshoot, cfg.iterations)


# ---------------------------------------------------------------------------
# statistics and visualization
# ---------------------------------------------------------------------------


def perturbation_stats(adv: AdvBatch) -> dict | None:
    """Mean and max L2 / L-infinity over successful images; ``None`` if there are none."""
    s = adv.success
    if not np.any(s):
        return None
    return {
        "count": int(s.sum()),
        "mean_l2": float(adv.l2[s].mean()),
        "max_l2": float(adv.l2[s].max()),
        "mean_linf": float(adv.linf[s].mean()),
        "max_linf": float(adv.linf[s].max()),
    }


def boundary_raster(model: Model, image, direction, extent=2.0, resolution=65, seed=0):
    """Predicted classes on a plane through ``image``.

    The first axis is the normalized ``direction`` (typically a PGD gradient),
    the second a random unit vector orthogonal to it. ``grid[i, j]`` is the
    label at ``image + a[j] * u + a[i] * v`` with ``a`` spanning
    ``[-extent, extent]``; the centre cell sits exactly on ``image``.
    """
    if resolution < 3 or resolution % 2 == 0:
        raise ConfigError("resolution must be an odd integer >= 3")
    image = np.asarray(image, dtype=np.float64)
    g = np.asarray(direction, dtype=np.float64).ravel()
    gn = np.linalg.norm(g)
    if gn == 0:
        raise ConfigError("zero gradient direction; cannot build a basis")
    u = g / gn
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(u.shape)
    v -= (v @ u) * u
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    half = resolution // 2
    a = extent * (np.arange(resolution) - half) / half
    pts = image.ravel()[None, None, :] + a[None, :, None] * u + a[:, None, None] * v
    pts = pts.reshape((resolution * resolution,) + image.shape)
    if model.batch_dependent:
        # input quantization ranges over the minibatch; score each point alone
        labels = np.array([model.predict(p[None])[0] for p in pts])
    else:
        labels = model.predict(pts, batch_size=1024)
    return labels.reshape(resolution, resolution), u.reshape(image.shape), v.reshape(image.shape)
