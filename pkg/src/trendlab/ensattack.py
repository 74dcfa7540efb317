"""Majority-vote ensembles and sign-based ensemble attacks.

Four rules turn per-member input gradients into one step direction:

* ``dag``   sign of the mean gradient
* ``ugd``   +1 / -1 only where every member's gradient sign agrees, else 0
* ``agd``   sign of the mean gradient sign (a per-coordinate sign vote)
* ``empir`` sign of the mean gradient over members that voted for the
  ensemble's current prediction

``dag`` lets a member with large gradients dictate the direction; the two
sign-vote rules give every member one vote per coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, _assemble, project, random_start, sgn
from .errors import ConfigError
from .nncore import input_gradient

METHODS = ("dag", "ugd", "agd", "empir")


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple
    vote_rule: str = "majority"
    tie_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ConfigError("an ensemble needs at least one member")
        if len(set(self.members)) != len(self.members):
            raise ConfigError("ensemble member ids must be distinct")
        if self.vote_rule != "majority":
            raise ConfigError(f"unsupported vote rule {self.vote_rule!r}")

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def ensemble_id(self) -> str:
        return "+".join(self.members)

    def to_dict(self) -> dict:
        return {"members": list(self.members), "vote_rule": self.vote_rule, "tie_seed": self.tie_seed, "N": self.size}


@dataclass
class Ensemble:
    spec: EnsembleSpec
    models: list

    @classmethod
    def of(cls, models, tie_seed=0, ids=None) -> Ensemble:
        ids = ids or [m.model_id for m in models]
        return cls(EnsembleSpec(tuple(ids), tie_seed=tie_seed), list(models))

    def __len__(self):
        return len(self.models)

    @property
    def classes(self) -> int:
        return self.models[0].spec.classes

    def clip(self, x):
        return self.models[0].clip(x)


# ---------------------------------------------------------------------------
# voting
# ---------------------------------------------------------------------------


def member_votes(ens: Ensemble, batch) -> np.ndarray:
    """Per-member predicted labels, shape ``(N, batch)``."""
    if len(ens) == 0:
        raise ConfigError("empty ensemble")
    return np.stack([m.predict(batch) for m in ens.models])


def tie_pick(tie_seed: int, stream: int, index: int, n: int) -> int:
    """Member chosen to break a tie; a pure function of its arguments."""
    return int(np.random.default_rng([tie_seed, stream, int(index)]).integers(n))


def resolve_votes(votes: np.ndarray, classes: int, tie_seed=0, indices=None, stream=0) -> np.ndarray:
    """Plurality label per column of ``votes``; ties go to a randomly chosen member.

    A label wins if strictly more members voted for it than for any other.
    Otherwise one member is drawn uniformly from a stream keyed on
    ``(tie_seed, stream, image index)`` and its vote is used.
    """
    n, b = votes.shape
    if indices is None:
        indices = np.arange(b)
    counts = np.zeros((b, classes), dtype=int)
    np.add.at(counts, (np.repeat(np.arange(b)[None], n, 0), votes), 1)
    top = counts.max(axis=1)
    out = counts.argmax(axis=1)
    tied = (counts == top[:, None]).sum(axis=1) > 1
    for col in np.flatnonzero(tied):
        out[col] = votes[tie_pick(tie_seed, stream, indices[col], n), col]
    return out


def ensemble_predict(ens: Ensemble, batch, indices=None, stream=0) -> np.ndarray:
    votes = member_votes(ens, batch)
    return resolve_votes(votes, ens.classes, ens.spec.tie_seed, indices, stream)


# ---------------------------------------------------------------------------
# direction rules
# ---------------------------------------------------------------------------


def _stack(grads):
    g = np.asarray(grads, dtype=np.float64)
    if g.ndim == 0 or len(g) == 0:
        raise ConfigError("need at least one member gradient")
    return g


def dag_direction(grads) -> np.ndarray:
    return sgn(_stack(grads).mean(axis=0))


def _avg_sign(grads):
    return sgn(_stack(grads)).mean(axis=0)


def ugd_direction(grads) -> np.ndarray:
    """Unanimity mask: +1 or -1 where every member's sign agrees, 0 elsewhere.

    Zero gradients carry sign 0 and therefore break unanimity.
    """
    a = _avg_sign(grads)
    return np.floor(np.abs(a)) * sgn(a)


def agd_direction(grads) -> np.ndarray:
    return sgn(_avg_sign(grads))


def empir_direction(grads, votes, prediction) -> np.ndarray:
    """Sign of the gradient averaged over members whose vote matches ``prediction``.

    ``grads`` has shape ``(N, batch, ...)`` and ``votes`` ``(N, batch)``.
    Images where no member voted for the prediction (possible after a random
    tie-break) fall back to all members.
    """
    g = _stack(grads)
    votes = np.asarray(votes)
    agree = votes == np.asarray(prediction)[None, :]
    none = ~agree.any(axis=0)
    agree[:, none] = True
    w = agree.astype(np.float64).reshape(agree.shape + (1,) * (g.ndim - 2))
    return sgn((g * w).sum(axis=0) / w.sum(axis=0))


@dataclass
class DirectionState:
    """One attack step's intermediate quantities."""

    grads: np.ndarray
    signs: np.ndarray
    avg_sign: np.ndarray
    unanimity: np.ndarray
    direction: np.ndarray
    method: str = ""


def direction_state(grads, method, votes=None, prediction=None) -> DirectionState:
    g = _stack(grads)
    s = sgn(g)
    a = s.mean(axis=0)
    m = np.floor(np.abs(a)) * sgn(a)
    if method == "dag":
        d = dag_direction(g)
    elif method == "ugd":
        d = m
    elif method == "agd":
        d = sgn(a)
    elif method == "empir":
        if votes is None or prediction is None:
            raise ConfigError("empir direction needs member votes and the ensemble prediction")
        d = empir_direction(g, votes, prediction)
    else:
        raise ConfigError(f"unknown ensemble attack method {method!r}")
    return DirectionState(g, s, a, m, d, method)


def domination_report(state: DirectionState) -> dict:
    """How often the ensemble direction matches each member's own gradient sign.

    Returns per-member agreement fractions and the fraction of coordinates
    where the direction differs from every member.
    """
    d = state.direction
    agree = state.signs == d[None]
    return {
        "agreement": [float(a.mean()) for a in agree],
        "disagree_all": float((~agree).all(axis=0).mean()),
    }


# ---------------------------------------------------------------------------
# attack loop
# ---------------------------------------------------------------------------


def ensemble_attack(
    ens: Ensemble, batch, labels, cfg: AttackConfig, method: str, indices=None, batch_id=0, states=None
):
    """Iterative sign attack on a majority-vote ensemble.

    Starts from a uniform random point in the eps-ball, then takes
    ``cfg.iterations`` steps of ``cfg.step_size`` along the chosen direction,
    projecting back into the ball and the input box after each step. Only
    images the ensemble gets right are attacked.

    Returns:
        ``(AdvBatch, success_rate)``; the rate is the fraction of attacked
        images whose ensemble label changed. When ``states`` is a list, each
        step's :class:`DirectionState` is appended to it.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown ensemble attack method {method!r}")
    x = np.asarray(batch, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    idx = np.arange(len(y)) if indices is None else np.asarray(indices)
    attacked = ensemble_predict(ens, x, idx) == y
    k = random_start(cfg, x.shape, idx, batch_id)[attacked]
    xa, ya, ia = x[attacked], y[attacked], idx[attacked]
    meta = {"attack": f"ens-{method}-e{cfg.eps:g}-s{cfg.step_size:g}-i{cfg.iterations}", "ensemble": ens.spec.ensemble_id}
    if len(ya) == 0:
        return _assemble(x, y, attacked, xa, np.zeros(0, bool), meta=meta), 0.0
    adv = project(xa + cfg.eps * k, xa, cfg.eps, ens.clip)
    for t in range(cfg.iterations):
        grads = np.stack([input_gradient(m, adv, ya) for m in ens.models])
        votes = pred = None
        if method == "empir":
            votes = member_votes(ens, adv)
            pred = resolve_votes(votes, ens.classes, ens.spec.tie_seed, ia, stream=t + 1)
        st = direction_state(grads, method, votes, pred)
        if states is not None:
            states.append(st)
        adv = project(adv + cfg.step_size * st.direction, xa, cfg.eps, ens.clip)
    success = ensemble_predict(ens, adv, ia) != ya
    result = _assemble(x, y, attacked, adv, success, meta=meta)
    return result, result.success_rate
