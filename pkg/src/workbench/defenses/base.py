"""The defended-model wrapper, defense configurations and shared purification loops."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields

import numpy as np

from workbench import autodiff as ad
from workbench import kernels
from workbench.autodiff import BackwardOverride, CostRecord, Var, track_cost

POLICIES = ("deterministic", "seeded", "free")
GRAD_MODES = ("unrolled", "bpda-identity", "bpda-trajectory")


# --------------------------------------------------------------------------
# configurations
# --------------------------------------------------------------------------


def _check_nonneg(cfg, *names):
    for n in names:
        v = getattr(cfg, n)
        if not np.isfinite(v) or v < 0:
            raise ValueError(f"{cfg.kind}: {n} must be finite and non-negative, got {v}")


def _check_count(cfg, *names, minimum=1):
    for n in names:
        if int(getattr(cfg, n)) < minimum:
            raise ValueError(f"{cfg.kind}: {n} must be at least {minimum}")


@dataclass(frozen=True)
class NoDefense:
    kind: str = "none"


@dataclass(frozen=True)
class HedgeConfig:
    radius: float
    step: float
    steps: int = 20
    random_start: bool = True
    kind: str = "hedge"

    def __post_init__(self):
        _check_nonneg(self, "radius", "step")
        _check_count(self, "steps", minimum=0)


@dataclass(frozen=True)
class AntiConfig:
    step: float
    steps: int = 2
    kind: str = "anti"

    def __post_init__(self):
        _check_nonneg(self, "step")
        _check_count(self, "steps")


@dataclass(frozen=True)
class SoapConfig:
    radii: tuple
    steps: int = 5
    noise: float = 0.05
    dropout: float = 0.1
    step_scale: float = 0.25
    kind: str = "soap"

    def __post_init__(self):
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        if len(self.radii) != 11 or 0.0 not in self.radii:
            raise ValueError("soap: the radius grid must have eleven values including 0")
        if any(r < 0 for r in self.radii):
            raise ValueError("soap: radii must be non-negative")
        _check_nonneg(self, "noise", "step_scale")
        if not 0 <= self.dropout < 1:
            raise ValueError("soap: dropout rate must be in [0, 1)")
        _check_count(self, "steps")


@dataclass(frozen=True)
class AidConfig:
    radius: float
    step: float
    steps: int = 10
    kind: str = "aid"

    def __post_init__(self):
        _check_nonneg(self, "radius", "step")
        _check_count(self, "steps")


@dataclass(frozen=True)
class AdpConfig:
    T: int = 10
    S: int = 10
    sigma: float = 0.25
    c: float = 1.0
    kind: str = "adp"

    def __post_init__(self):
        _check_count(self, "T", "S")
        if not self.sigma > 0:
            raise ValueError("adp: sigma must be positive")
        _check_nonneg(self, "c")


@dataclass(frozen=True)
class ImfConfig:
    radius: float
    steps: int = 1
    kind: str = "imf"

    def __post_init__(self):
        _check_nonneg(self, "radius")
        _check_count(self, "steps")


@dataclass(frozen=True)
class ClcConfig:
    iterations: int = 5
    lr: float = 5e-3
    kind: str = "clc"

    def __post_init__(self):
        _check_nonneg(self, "lr")
        _check_count(self, "iterations", minimum=0)


@dataclass(frozen=True)
class ContrastiveConfig:
    radius: float
    step: float
    steps: int = 40
    noise: float = 0.05
    dropout: float = 0.1
    temperature: float = 0.1
    kind: str = "contrastive"

    def __post_init__(self):
        _check_nonneg(self, "radius", "step", "noise")
        if not self.temperature > 0:
            raise ValueError("contrastive: temperature must be positive")
        _check_count(self, "steps")


CONFIGS = {
    "none": NoDefense,
    "hedge": HedgeConfig,
    "anti": AntiConfig,
    "soap": SoapConfig,
    "aid": AidConfig,
    "adp": AdpConfig,
    "imf": ImfConfig,
    "clc": ClcConfig,
    "contrastive": ContrastiveConfig,
}


def default_config(kind, eps, **overrides):
    """Defaults for ``kind`` at attack radius ``eps``; any field can be overridden."""
    base = {
        "none": {},
        "hedge": {"radius": eps, "step": eps / 2},
        "anti": {"step": 0.01},
        "soap": {"radii": tuple(np.linspace(0.0, 2.0 * eps, 11))},
        "aid": {"radius": eps, "step": eps / 4},
        "adp": {},
        "imf": {"radius": 2.0 * eps},
        "clc": {},
        "contrastive": {"radius": 2.0 * eps, "step": 2.0 * eps / 8},
    }
    if kind not in CONFIGS:
        raise ValueError(f"unknown defense {kind!r}; expected one of {sorted(CONFIGS)}")
    params = dict(base[kind])
    known = {f.name for f in fields(CONFIGS[kind])} - {"kind"}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"{kind}: unknown config keys {sorted(unknown)}")
    params.update(overrides)
    return CONFIGS[kind](**params)


def config_dict(cfg):
    out = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in out.items()}


# --------------------------------------------------------------------------
# negative bank
# --------------------------------------------------------------------------

PROVENANCE = ("fixed-set", "batch-derived")


@dataclass(frozen=True)
class NegativeBank:
    images: np.ndarray | None
    provenance: str = "fixed-set"

    def __post_init__(self):
        if self.provenance not in PROVENANCE:
            raise ValueError(f"provenance must be one of {PROVENANCE}")
        if self.provenance == "fixed-set":
            if self.images is None or len(self.images) == 0:
                raise ValueError("a fixed-set negative bank needs at least one image")
            object.__setattr__(self, "images", np.ascontiguousarray(self.images, dtype=np.float64))

    def check_disjoint(self, x):
        if self.provenance != "fixed-set":
            return
        bank = {row.tobytes() for row in self.images}
        if any(row.tobytes() in bank for row in np.ascontiguousarray(x, dtype=np.float64)):
            raise ValueError("evaluated inputs overlap the fixed negative bank")


# --------------------------------------------------------------------------
# purification paths
# --------------------------------------------------------------------------


@dataclass
class Purified:
    """Output of one purification run.

    ``jac`` is the diagonal of d(x_out)/d(x) for sign-step purifiers (the
    sign of a gradient has zero derivative, so only projections matter).
    ``trace`` is the per-iteration objective being optimized.
    """

    x: np.ndarray
    iterates: list = field(default_factory=list)
    jac: np.ndarray | None = None
    trace: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def project_with_jac(v, x, radius, jac_prev):
    """l-inf projection around ``x`` plus the propagated diagonal Jacobian."""
    out = kernels.project_linf(v, x, radius)
    lo, hi = x - radius, x + radius
    ball = (v < lo) | (v > hi)
    w = np.minimum(np.maximum(v, lo), hi)
    box = (w < 0.0) | (w > 1.0)
    jac = np.where(box, 0.0, np.where(ball, 1.0, jac_prev))
    return out, jac


def sign_ascent(objective, x, radius, step, steps, start=None):
    """Plain projected sign steps; the final iterate is returned."""
    cur, jac = project_with_jac(x if start is None else start, x, radius, np.ones_like(x))
    iterates = [cur]
    for _ in range(steps):
        _, g = objective(cur)
        cur, jac = project_with_jac(cur + step * kernels.sign(g), x, radius, jac)
        iterates.append(cur)
    return Purified(cur, iterates, jac)


def sign_descent(objective, x, radius, step, steps):
    """Projected sign descent that keeps the best evaluated point.

    A step that fails to improve an example halves that example's step and
    restarts it from its best point, so the best objective is monotone
    and the output never scores worse than the input.
    """
    n = len(x)
    cur, jac = x.copy(), np.ones_like(x)
    best, best_jac = cur.copy(), jac.copy()
    best_val = np.full(n, np.inf)
    best_grad = np.zeros_like(x)
    eta = np.full((n, 1), float(step))
    iterates, trace = [], []
    for _ in range(steps):
        val, g = objective(cur)
        iterates.append(cur)
        better = val < best_val
        best[better], best_jac[better], best_val[better], best_grad[better] = cur[better], jac[better], val[better], g[better]
        eta[~better] *= 0.5
        trace.append(best_val.copy())
        cur, jac = project_with_jac(best + -eta * kernels.sign(best_grad), x, radius, best_jac)
    return Purified(best, iterates, best_jac, trace)


# --------------------------------------------------------------------------
# the wrapper
# --------------------------------------------------------------------------


class DefendedModel:
    """A static classifier behind a test-time defense.

    Calling the model on an array returns defended logits. Calling it on a
    graph variable records the defense according to ``grad_mode``; the
    forward values are the same in every mode. Randomness comes from
    ``seed`` on every call; under the ``free`` policy attacks re-seed the
    model for each gradient draw (that is what EOT averages over).
    """

    def __init__(self, static, defense=None, policy="seeded", grad_mode=None, seed=0, aux=None):
        from workbench.defenses import registry

        self.static = static
        self.config = defense if defense is not None else NoDefense()
        self.impl = registry(self.config.kind)
        if policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        self.policy = policy
        self.grad_mode = grad_mode or self.impl.default_mode
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"gradient mode must be one of {GRAD_MODES}")
        self.seed = seed
        self.aux = dict(aux or {})
        self.impl.validate(self)

    # -- properties ----------------------------------------------------------

    @property
    def kind(self):
        return self.config.kind

    @property
    def n_classes(self):
        return self.static.n_classes

    @property
    def n_in(self):
        return self.static.n_in

    @property
    def randomized(self):
        return self.impl.randomized and self.policy != "deterministic"

    def _copy(self, **kw):
        other = copy.copy(self)
        other.__dict__.update(kw)
        return other

    def reseed(self, seed):
        return self._copy(seed=seed)

    def with_mode(self, grad_mode):
        if grad_mode not in GRAD_MODES:
            raise ValueError(f"gradient mode must be one of {GRAD_MODES}")
        other = self._copy(grad_mode=grad_mode)
        self.impl.validate(other)
        return other

    def with_policy(self, policy):
        if policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        return self._copy(policy=policy)

    def with_config(self, **overrides):
        params = config_dict(self.config)
        params.pop("kind")
        params.update(overrides)
        return self._copy(config=CONFIGS[self.kind](**params))

    def rng(self):
        seed = 0 if self.policy == "deterministic" else self.seed
        return np.random.default_rng(list(np.atleast_1d(seed)) + [0x5EED])

    def __repr__(self):
        return f"DefendedModel({self.kind}, policy={self.policy}, grad_mode={self.grad_mode})"

    # -- evaluation ------------------------------------------------------------

    def __call__(self, x):
        if self.kind == "none":
            return self.static(x)
        rng = self.rng()
        if not isinstance(x, Var):
            x = np.asarray(x, dtype=np.float64)
            res = self.impl.purify(self, x, rng)
            return self.impl.classify(self, res.x, res)
        return self._taped(x, rng)

    def _taped(self, x, rng):
        impl = self.impl
        if impl.direct:
            return impl.forward(self, x, rng)
        holder = {}

        def run(v):
            holder["res"] = res = impl.purify(self, v, rng)
            if self.grad_mode == "bpda-trajectory":
                if not res.iterates:
                    raise ValueError(f"{self.kind} records no purification iterates")
                return res.x, res.iterates
            return res.x

        if self.grad_mode == "unrolled":
            ov = BackwardOverride.linear(lambda g: g * holder["res"].jac)
        elif self.grad_mode == "bpda-identity":
            ov = BackwardOverride.identity()
        else:
            ov = BackwardOverride.trajectory()
        xp = ad.composite(run, x, override=ov, op=f"purify[{self.kind}]", with_iterates=self.grad_mode == "bpda-trajectory")
        return impl.classify(self, xp, holder["res"])

    def purify(self, x):
        """Purified inputs (or the input itself for model-adapting defenses)."""
        if self.kind == "none":
            return Purified(np.asarray(x, dtype=np.float64))
        return self.impl.purify(self, np.asarray(x, dtype=np.float64), self.rng())

    def predict(self, x):
        return np.argmax(self(x), axis=1)


@dataclass
class Prediction:
    labels: np.ndarray
    logits: np.ndarray
    cost: CostRecord

    def call_units(self, role=None):
        return self.cost.total(role)


def defended_predict(dm, x, seed=None):
    """Labels, logits and exact pass counts for one defended inference."""
    model = dm.reseed(seed) if seed is not None and isinstance(dm, DefendedModel) else dm
    with track_cost() as cost:
        logits = np.asarray(model(np.asarray(x, dtype=np.float64)))
    return Prediction(np.argmax(logits, axis=1), logits, cost)


class DefenseImpl:
    """Interface implemented by each defense module."""

    kind = "none"
    randomized = False
    default_mode = "unrolled"
    modes = GRAD_MODES
    direct = False
    needs = ()

    def validate(self, dm):
        if dm.grad_mode not in self.modes:
            raise ValueError(f"{self.kind} does not support gradient mode {dm.grad_mode!r}; use one of {self.modes}")
        for name in self.needs:
            if dm.aux.get(name) is None:
                raise ValueError(f"{self.kind} needs an auxiliary {name!r}")

    def purify(self, dm, x, rng):
        return Purified(x)

    def classify(self, dm, xp, res):
        return dm.static(xp)

    def forward(self, dm, x, rng):
        raise NotImplementedError


def input_gradient(fn, x):
    """Per-example values and the input gradient of their sum."""
    per = {}

    def wrapped(v):
        per["v"] = fn(v)
        return ad.sum(per["v"])

    graph = ad.Graph(wrapped)
    ad.forward_eval(graph, [x])
    g = ad.backward_grad(graph, 0)
    return np.array(ad.value_of(per["v"])), g
