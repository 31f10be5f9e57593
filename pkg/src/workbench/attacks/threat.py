"""Threat models, attack budgets and attack outcomes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from workbench import kernels

FEAS_TOL = 1e-9
DEFAULT_QUERY_CAP = 10_000

_P_ALIASES = {"inf": "inf", "linf": "inf", np.inf: "inf", "2": "2", "l2": "2", 2: "2"}


def _norm_p(p):
    try:
        return _P_ALIASES[p.lower() if isinstance(p, str) else p]
    except (KeyError, TypeError):
        raise ValueError(f"p must be 2 or inf, got {p!r}") from None


@dataclass(frozen=True)
class ThreatModel:
    """An lp ball of radius ``eps`` intersected with the [0, 1] box."""

    p: str = "inf"
    eps: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "p", _norm_p(self.p))
        if not np.isfinite(self.eps) or self.eps < 0:
            raise ValueError(f"eps must be a finite non-negative number, got {self.eps}")
        object.__setattr__(self, "eps", float(self.eps))

    def project(self, x_adv, x):
        return kernels.project(x_adv, x, self.p, self.eps)

    def norms(self, delta):
        delta = np.asarray(delta).reshape(len(delta), -1)
        if self.p == "inf":
            return np.abs(delta).max(axis=1) if delta.shape[1] else np.zeros(len(delta))
        return np.sqrt((delta * delta).sum(axis=1))

    def violations(self, x, delta, tol=FEAS_TOL):
        """Boolean mask of rows whose perturbation leaves the threat set."""
        xa = x + delta
        out_box = (xa < -tol).any(axis=1) | (xa > 1 + tol).any(axis=1)
        return (self.norms(delta) > self.eps + tol) | out_box

    def random_start(self, x, rngs):
        """One uniform draw per row from the ball, projected into the box."""
        n, d = x.shape
        noise = np.empty_like(x)
        for i, rng in enumerate(rngs):
            if self.p == "inf":
                noise[i] = rng.uniform(-self.eps, self.eps, size=d)
            else:
                v = rng.standard_normal(d)
                v /= max(np.linalg.norm(v), 1e-12)
                noise[i] = v * self.eps * rng.uniform() ** (1.0 / d)
        return self.project(x + noise, x)

    def as_dict(self):
        return {"p": self.p, "eps": self.eps}


@dataclass(frozen=True)
class AttackBudget:
    iterations: int = 10
    restarts: int = 1
    n_eot: int = 1
    seed: int | tuple = 0
    query_cap: int = DEFAULT_QUERY_CAP

    def __post_init__(self):
        if self.iterations < 0 or self.restarts < 1 or self.n_eot < 1 or self.query_cap < 1:
            raise ValueError("iterations must be >= 0; restarts, n_eot and query cap >= 1")

    def replace(self, **kw):
        d = {k: getattr(self, k) for k in ("iterations", "restarts", "n_eot", "seed", "query_cap")}
        d.update(kw)
        return AttackBudget(**d)


def example_rngs(seed, ids):
    """Independent generators per example, derived from (seed, example id)."""
    base = list(seed) if isinstance(seed, (tuple, list)) else [seed]
    return [np.random.default_rng(base + [int(i)]) for i in ids]


@dataclass
class AttackOutcome:
    """Per-example results of one attack on one set of examples.

    ``best_loss`` is the attack objective at ``delta`` (higher is more
    adversarial); decision-based attacks report the negated radius.
    ``forwards``/``backwards`` count calls of the attacked model made by
    the attack itself; the verification forward is kept apart in
    ``eval_forwards``.
    """

    example_ids: np.ndarray
    delta: np.ndarray
    best_loss: np.ndarray
    success: np.ndarray
    forwards: np.ndarray
    backwards: np.ndarray
    queries: np.ndarray = None
    eval_forwards: int = 0
    trace: np.ndarray | None = None
    name: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.example_ids)
        self.example_ids = np.asarray(self.example_ids, dtype=np.int64)
        self.delta = np.asarray(self.delta, dtype=np.float64)
        self.best_loss = np.asarray(self.best_loss, dtype=np.float64)
        self.success = np.asarray(self.success, dtype=bool)
        self.forwards = np.broadcast_to(np.asarray(self.forwards, dtype=np.int64), (n,)).copy()
        self.backwards = np.broadcast_to(np.asarray(self.backwards, dtype=np.int64), (n,)).copy()
        q = 0 if self.queries is None else self.queries
        self.queries = np.broadcast_to(np.asarray(q, dtype=np.int64), (n,)).copy()
        if self.delta.shape[0] != n or self.best_loss.shape != (n,) or self.success.shape != (n,):
            raise ValueError("outcome fields disagree on the number of examples")

    def __len__(self):
        return len(self.example_ids)

    @property
    def success_rate(self):
        return float(self.success.mean()) if len(self) else float("nan")

    def records(self, threat):
        norms = threat.norms(self.delta)
        for i in range(len(self)):
            yield {
                "example_id": int(self.example_ids[i]),
                "best_loss": float(self.best_loss[i]) if np.isfinite(self.best_loss[i]) else None,
                "success": bool(self.success[i]),
                "delta_norm": float(norms[i]),
                "forwards": int(self.forwards[i]),
                "backwards": int(self.backwards[i]),
                "queries": int(self.queries[i]),
            }

    def to_jsonl(self, threat):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records(threat))


def read_jsonl(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]
