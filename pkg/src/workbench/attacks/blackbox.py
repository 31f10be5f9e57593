"""Black-box attacks: a RayS-style decision attack and a Square-style score attack.

Both run one small state machine per example (a generator that yields
query points and receives the oracle's answer). A driver advances all
live examples in lockstep so queries are batched, while every example
keeps its own query count and random stream.
"""

from __future__ import annotations

import math

import numpy as np

from workbench.attacks.gradient import logits_of
from workbench.attacks.losses import as_loss
from workbench.attacks.threat import DEFAULT_QUERY_CAP, AttackOutcome, example_rngs


def _drive(gens, oracle):
    """Run per-example generators, batching their pending queries."""
    results = [None] * len(gens)
    pending = {}
    for i, g in enumerate(gens):
        try:
            pending[i] = next(g)
        except StopIteration as stop:
            results[i] = stop.value
    while pending:
        idx = list(pending)
        answers = oracle(idx, np.stack([pending[i] for i in idx]))
        nxt = {}
        for i, a in zip(idx, answers):
            try:
                nxt[i] = gens[i].send(a)
            except StopIteration as stop:
                results[i] = stop.value
        pending = nxt
    return results


def _rays_one(x, y, eps, cap, rng, tol):
    queries = 0

    def fooled(r, d):
        nonlocal queries
        queries += 1
        label = yield np.clip(x + r * d, 0.0, 1.0)
        return label != y

    if (yield from fooled(0.0, np.zeros_like(x))):
        return 0.0, np.zeros_like(x), queries
    dim = x.size
    d_best = rng.choice([-1.0, 1.0], size=dim)
    r_best = math.inf

    def search(d, hi):
        nonlocal r_best, d_best
        lo = 0.0
        while hi - lo > tol and queries < cap:
            mid = 0.5 * (lo + hi)
            if (yield from fooled(mid, d)):
                hi = mid
            else:
                lo = mid
        r_best, d_best = hi, d

    if (yield from fooled(1.0, d_best)):
        yield from search(d_best, 1.0)
    stage = 0
    while queries < cap and r_best > eps:
        size = max(1, math.ceil(dim / 2**stage))
        improved = False
        for start in range(0, dim, size):
            if queries >= cap or r_best <= eps:
                break
            d = d_best.copy()
            d[start : start + size] *= -1.0
            hi = r_best if math.isfinite(r_best) else 1.0
            if (yield from fooled(hi, d)):
                before = r_best
                yield from search(d, hi)
                improved |= r_best < before
        if size == 1:
            if not improved:
                break
            stage = 0
        else:
            stage += 1
    return r_best, d_best, queries


def ray_search_attack(model, x, y, threat, query_cap=DEFAULT_QUERY_CAP, seed=0, ids=None, tol=None):
    """Label-only search for the smallest l-inf radius along sign directions.

    Success means a flipping point was found within eps; the reported
    loss is the negated radius found (-inf when none).
    """
    if threat.p != "inf":
        raise ValueError("ray search is an l-inf attack")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    tol = max(threat.eps, 1e-3) * 1e-3 if tol is None else tol
    rngs = example_rngs(seed, ids)
    gens = [_rays_one(x[i], y[i], threat.eps, query_cap, rngs[i], tol) for i in range(len(x))]
    res = _drive(gens, lambda idx, pts: np.argmax(logits_of(model, pts), axis=1))
    radius = np.array([r for r, _, _ in res])
    dirs = np.stack([d for _, d, _ in res]) if len(res) else np.zeros_like(x)
    queries = np.array([q for _, _, q in res], dtype=np.int64)
    r_use = np.where(radius <= threat.eps, radius, threat.eps)[:, None]
    delta = threat.project(x + r_use * dirs, x) - x
    success = np.argmax(logits_of(model, x + delta), axis=1) != y
    return AttackOutcome(
        example_ids=ids,
        delta=delta,
        best_loss=-radius,
        success=success,
        forwards=queries,
        backwards=0,
        queries=queries,
        eval_forwards=1,
        name="rays",
        extra={"radius": radius},
    )


def square_schedule(it, cap, p_init):
    """Fraction of coordinates changed per step, halving over the budget."""
    it = int(it / cap * 10_000) if cap else it
    for bound, div in ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16), (2000, 32), (4000, 64), (6000, 128), (8000, 256)):
        if it <= bound:
            return p_init / div
    return p_init / 512


def _square_one(x, eps, cap, rng, p_init):
    dim = x.size
    clean, fooled = yield x
    queries = 1
    trace = [clean]
    if fooled:
        return np.zeros_like(x), clean, queries, 0, trace
    delta = np.clip(x + eps * rng.choice([-1.0, 1.0], size=dim), 0.0, 1.0) - x
    cur, fooled = yield x + delta
    queries += 1
    best_delta, best = (delta, cur) if cur >= clean else (np.zeros_like(x), clean)
    trace.append(best)
    accepted = 0
    it = 0
    while queries < cap and not fooled:
        size = max(1, int(round(square_schedule(it, cap, p_init) * dim)))
        start = rng.integers(0, dim - size + 1)
        cand = delta.copy()
        cand[start : start + size] = rng.choice([-1.0, 1.0]) * eps
        cand = np.clip(x + cand, 0.0, 1.0) - x
        val, hit = yield x + cand
        queries += 1
        it += 1
        if val > cur:
            delta, cur = cand, val
            accepted += 1
            fooled = hit
            if cur > best or fooled:
                best_delta, best = delta, cur
        trace.append(best)
    return best_delta, best, queries, accepted, trace


def score_random_search(model, loss, x, y, threat, query_cap=DEFAULT_QUERY_CAP, seed=0, ids=None, p_init=0.3):
    """Random search over blocks of coordinates set to +-eps, accepted iff the loss rises."""
    if threat.p != "inf":
        raise ValueError("score random search is an l-inf attack")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    lossf = as_loss(loss if loss is not None else "cw", getattr(model, "n_classes", None))

    def oracle(idx, pts):
        logits = logits_of(model, pts)
        vals = np.asarray(lossf.per_example(logits, y[idx]))
        return list(zip(vals.tolist(), (np.argmax(logits, axis=1) != y[idx]).tolist()))

    rngs = example_rngs(seed, ids)
    gens = [_square_one(x[i], threat.eps, query_cap, rngs[i], p_init) for i in range(len(x))]
    res = _drive(gens, oracle)
    delta = np.stack([r[0] for r in res]) if res else np.zeros_like(x)
    delta = threat.project(x + delta, x) - x
    queries = np.array([r[2] for r in res], dtype=np.int64)
    success = np.argmax(logits_of(model, x + delta), axis=1) != y
    return AttackOutcome(
        example_ids=ids,
        delta=delta,
        best_loss=np.array([r[1] for r in res]),
        success=success,
        forwards=queries,
        backwards=0,
        queries=queries,
        eval_forwards=1,
        name="square",
        extra={"accepted": np.array([r[3] for r in res]), "traces": [r[4] for r in res]},
    )
