"""White-box attacks: FGSM, PGD, APGD and the EOT gradient estimator."""

from __future__ import annotations

import numpy as np

from workbench import autodiff as ad
from workbench import kernels
from workbench.attacks.losses import as_loss
from workbench.attacks.threat import AttackOutcome, example_rngs

APGD_MOMENTUM = 0.75
APGD_RHO = 0.75


def n_classes_of(model):
    return getattr(model, "n_classes", None)


def is_free(model):
    return bool(getattr(model, "randomized", False)) and getattr(model, "policy", "seeded") == "free"


def realize(model, rng):
    """A draw of the model's randomness; deterministic models pass through."""
    if is_free(model):
        return model.reseed(int(rng.integers(2**63 - 1)))
    return model


def logits_of(model, x):
    return np.asarray(model(np.asarray(x, dtype=np.float64)))


def predict(model, x):
    return np.argmax(logits_of(model, x), axis=1)


class _Objective:
    """Loss/gradient oracle that keeps the pass counts of one attack run."""

    def __init__(self, model, loss, y, n_eot=1, rng=None, eval_model=None):
        self.model = model
        self.eval_model = eval_model
        self.loss = as_loss(loss, n_classes_of(model))
        self.y = np.asarray(y, dtype=np.int64)
        self.n_eot = n_eot if is_free(model) else 1
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.targets = None
        self.forwards = 0
        self.backwards = 0

    def _one(self, x, grad):
        model = realize(self.model, self.rng)
        per = {}

        def fn(v):
            logits = model(v)
            if self.targets is None and self.loss.kind == "targeted-dlr":
                self.targets = self.loss.pick_targets(logits, self.y)
            per["logits"] = logits
            per["v"] = self.loss.per_example(logits, self.y, self.targets)
            return ad.sum(per["v"])

        self.forwards += 1
        if not grad:
            fn(np.asarray(x, dtype=np.float64))
            g = None
        else:
            graph = ad.Graph(fn)
            ad.forward_eval(graph, [x])
            g = ad.backward_grad(graph, 0)
            self.backwards += 1
        fooled = np.argmax(ad.value_of(per["logits"]), axis=1) != self.y
        return np.array(ad.value_of(per["v"])), g, fooled

    def value(self, x):
        """Mean loss over the draws and whether every draw misclassified."""
        runs = [self._one(x, False) for _ in range(self.n_eot)]
        if len(runs) == 1:
            return runs[0][0], runs[0][2]
        return np.mean([r[0] for r in runs], axis=0), np.all([r[2] for r in runs], axis=0)

    def value_and_grad(self, x):
        runs = [self._one(x, True) for _ in range(self.n_eot)]
        if len(runs) == 1:
            return runs[0]
        return (
            np.mean([r[0] for r in runs], axis=0),
            np.mean([r[1] for r in runs], axis=0),
            np.all([r[2] for r in runs], axis=0),
        )


class _Best:
    """Per-example choice of the returned point, seeded with the clean input.

    Misclassifying points win over the rest (so successes only accumulate
    as the budget grows); within each group the highest loss wins. A
    misclassifying point must also score at least the clean loss.
    The trace holds the running maximum of the objective, which only
    differs from the returned point's loss when a misclassifying point
    scores below a correctly classified one (possible for CE with K > 2).
    """

    def __init__(self, x, clean):
        clean_loss, clean_fooled = clean
        self.delta = np.zeros_like(x)
        self.loss = clean_loss.copy()
        self.clean_loss = clean_loss.copy()
        self.fooled = clean_fooled.copy()
        self.is_clean = np.ones(len(x), dtype=bool)
        self.peak = clean_loss.copy()
        self.trace = [self.peak.copy()]

    def update(self, x, x_adv, loss, fooled):
        fooled = fooled & (loss >= self.clean_loss)
        higher = (loss > self.loss) | ((loss == self.loss) & self.is_clean)
        take = (fooled & ~self.fooled) | (fooled & self.fooled & higher) | (~fooled & ~self.fooled & higher)
        self.delta[take] = (x_adv - x)[take]
        self.loss[take] = loss[take]
        self.fooled |= fooled
        self.is_clean[take] = False
        self.peak = np.maximum(self.peak, loss)
        self.trace.append(self.peak.copy())
        return take


def _ids(ids, n):
    return np.arange(n) if ids is None else np.asarray(ids, dtype=np.int64)


def _finish(name, model, x, y, best, obj, ids, threat, extra=None):
    delta = threat.project(x + best.delta, x) - x
    success = predict(model if getattr(obj, "eval_model", None) is None else obj.eval_model, x + delta) != y
    return AttackOutcome(
        example_ids=ids,
        delta=delta,
        best_loss=best.loss,
        success=success,
        forwards=obj.forwards,
        backwards=obj.backwards,
        eval_forwards=2,
        trace=np.array(best.trace),
        name=name,
        extra=extra or {},
    )


def _direction(g, p):
    if p == "inf":
        return kernels.sign(g)
    n = np.sqrt((g * g).sum(axis=1, keepdims=True))
    return g / np.maximum(n, 1e-12)


def _clean_loss(model, loss, x, y):
    """Loss and misclassification at the clean point (one verification forward)."""
    obj = _Objective(model, loss, y)
    return obj.value(x)


def fgsm(model, x, y, threat, loss="ce", ids=None):
    """One signed-gradient step of size eps: one forward and one backward."""
    if threat.p != "inf":
        raise ValueError("fgsm is defined for the l-inf threat; use pgd with one step for l2")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    obj = _Objective(model, loss, y)
    clean, g, fooled = obj.value_and_grad(x)
    best = _Best(x, (clean, fooled))
    x_adv = threat.project(x + threat.eps * kernels.sign(g), x)
    # the candidate's loss comes from the verification forward
    best.update(x, x_adv, *_clean_loss(model, obj.loss, x_adv, y))
    out = _finish("fgsm", model, x, y, best, obj, _ids(ids, len(x)), threat)
    out.eval_forwards = 2
    return out


def pgd(model, loss, x, y, threat, budget, step=None, random_start=True, ids=None, eval_model=None):
    """Projected gradient ascent with a fixed step, keeping the best-loss point.

    Each restart costs N+1 forwards and N backwards (times n_eot for
    models with free randomness). ``eval_model``, when given, judges
    success instead of the attacked model (e.g. a cheaper gradient proxy).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    ids = _ids(ids, len(x))
    step = threat.eps / 4 if step is None else step
    rngs = example_rngs(budget.seed, ids)
    obj = _Objective(model, loss, y, budget.n_eot, np.random.default_rng([*np.atleast_1d(budget.seed), 1]), eval_model)
    best = _Best(x, _clean_loss(model, obj.loss, x, y))
    for _ in range(budget.restarts):
        x_adv = threat.random_start(x, rngs) if random_start else x.copy()
        for _ in range(budget.iterations):
            val, g, fooled = obj.value_and_grad(x_adv)
            best.update(x, x_adv, val, fooled)
            x_adv = threat.project(x_adv + step * _direction(g, threat.p), x)
        best.update(x, x_adv, *obj.value(x_adv))
    return _finish("pgd", model, x, y, best, obj, ids, threat, {"loss": obj.loss.name})


def apgd_checkpoints(n_iter):
    """Iterations (1-based) at which APGD reconsiders its step size."""
    k = max(int(0.22 * n_iter), 1)
    k_min = max(int(0.06 * n_iter), 1)
    decr = max(int(0.03 * n_iter), 1)
    points, at = [], 0
    while True:
        at += k
        if at > n_iter:
            return points
        points.append(at)
        k = max(k - decr, k_min)


def apgd(model, loss, x, y, threat, budget, ids=None, eval_model=None):
    """APGD with momentum and step-size halving at checkpoints.

    ``budget.iterations`` counts gradient steps, so the pass counts equal
    those of :func:`pgd` with the same budget.
    """
    n_iter = budget.iterations
    if n_iter < 5:
        raise ValueError("apgd needs at least 5 iterations")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    ids = _ids(ids, len(x))
    n = len(x)
    rngs = example_rngs(budget.seed, ids)
    obj = _Objective(model, loss, y, budget.n_eot, np.random.default_rng([*np.atleast_1d(budget.seed), 1]), eval_model)
    best = _Best(x, _clean_loss(model, obj.loss, x, y))
    checks = set(apgd_checkpoints(n_iter))
    step_log = []
    for _ in range(budget.restarts):
        eta = np.full((n, 1), 2.0 * threat.eps)
        x_cur = threat.random_start(x, rngs)
        f_cur, g, fooled = obj.value_and_grad(x_cur)
        best.update(x, x_cur, f_cur, fooled)
        x_rb, f_rb, g_rb = x_cur.copy(), f_cur.copy(), g.copy()
        x_old = x_cur.copy()
        f_hist = [f_cur.copy()]
        f_rb_last = f_rb.copy()
        reduced_last = np.ones(n, dtype=bool)
        since = 0
        for it in range(1, n_iter + 1):
            a = 1.0 if it == 1 else APGD_MOMENTUM
            z = threat.project(x_cur + eta * _direction(g, threat.p), x)
            x_new = threat.project(x_cur + a * (z - x_cur) + (1 - a) * (x_cur - x_old), x)
            x_old = x_cur
            x_cur = x_new
            if it == n_iter:
                best.update(x, x_cur, *obj.value(x_cur))
                break
            f_cur, g, fooled = obj.value_and_grad(x_cur)
            best.update(x, x_cur, f_cur, fooled)
            f_hist.append(f_cur.copy())
            imp = f_cur > f_rb
            x_rb[imp], f_rb[imp], g_rb[imp] = x_cur[imp], f_cur[imp], g[imp]
            since += 1
            if it in checks:
                h = np.array(f_hist[-(since + 1):])
                increases = (h[1:] > h[:-1]).sum(axis=0)
                osc = increases <= since * APGD_RHO
                stalled = ~reduced_last & (f_rb_last >= f_rb)
                red = osc | stalled
                reduced_last = red
                f_rb_last = f_rb.copy()
                if red.any():
                    eta[red] /= 2.0
                    x_cur = x_cur.copy()
                    x_cur[red] = x_rb[red]
                    g = g.copy()
                    g[red] = g_rb[red]
                step_log.append(eta[:, 0].copy())
                since = 0
    extra = {"loss": obj.loss.name, "step_sizes": np.array(step_log)}
    return _finish("apgd", model, x, y, best, obj, ids, threat, extra)


def eot_gradient(model, loss, x, y, n_eot, seed):
    """Mean input gradient over ``n_eot`` independent draws of the model's randomness."""
    if n_eot < 1:
        raise ValueError("n_eot must be at least 1")
    obj = _Objective(model, loss, y, n_eot, np.random.default_rng(seed))
    return obj.value_and_grad(np.asarray(x, dtype=np.float64))[1]
