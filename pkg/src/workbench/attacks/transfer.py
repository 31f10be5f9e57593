"""Transfer attacks and the per-example worst-case ensemble."""

from __future__ import annotations

import numpy as np

from workbench.attacks.gradient import logits_of
from workbench.attacks.losses import as_loss
from workbench.attacks.threat import AttackOutcome

POLICIES = ("loss-max", "clean-on-failure")


def _input_dim(model):
    for attr in ("n_in", "input_dim"):
        v = getattr(model, attr, None)
        if v is not None:
            return v
    static = getattr(model, "static", None)
    return None if static is None else _input_dim(static)


def transfer_attack(surrogate, target, inner, x, y, policy="loss-max", ids=None, loss="ce", source=None):
    """Craft on ``surrogate`` with ``inner`` and evaluate the perturbation on ``target``.

    Under ``loss-max`` the surrogate's loss-maximizing point is transferred
    whether or not it fooled the surrogate. ``clean-on-failure`` replays
    the flawed practice of sending the unperturbed input for examples the
    surrogate attack did not flip; it exists to measure that gap.
    ``source`` reuses an outcome already computed on the surrogate.
    """
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    da, db = _input_dim(surrogate), _input_dim(target)
    x = np.asarray(x, dtype=np.float64)
    if (da is not None and db is not None and da != db) or (da is not None and x.shape[1] != da):
        raise ValueError(f"surrogate expects {da} inputs, target {db}, data has {x.shape[1]}")
    y = np.asarray(y, dtype=np.int64)
    src = source if source is not None else inner(surrogate, x, y, ids)
    delta = src.delta.copy()
    if policy == "clean-on-failure":
        delta[~src.success] = 0.0
    logits = logits_of(target, x + delta)
    lossf = as_loss(loss, logits.shape[1])
    return AttackOutcome(
        example_ids=src.example_ids,
        delta=delta,
        best_loss=np.asarray(lossf.per_example(logits, y)),
        success=np.argmax(logits, axis=1) != y,
        forwards=1,
        backwards=0,
        eval_forwards=0,
        name=f"transfer[{src.name}:{policy}]",
        extra={
            "policy": policy,
            "surrogate_forwards": src.forwards,
            "surrogate_backwards": src.backwards,
            "surrogate_success": src.success.copy(),
        },
    )


def worst_case_ensemble(outcomes, target=None):
    """Per-example union of successes over attacks on the same examples.

    The reported perturbation is the first succeeding one, else the one
    with the highest recorded loss. Losses from different objectives are
    compared as-is, so only the success union is objective-agnostic.
    """
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("need at least one outcome")
    ids = outcomes[0].example_ids
    for o in outcomes[1:]:
        if not np.array_equal(o.example_ids, ids) or o.delta.shape != outcomes[0].delta.shape:
            raise ValueError("outcomes cover different examples")
    if len(outcomes) == 1:
        return outcomes[0]
    succ = np.stack([o.success for o in outcomes])
    loss = np.stack([o.best_loss for o in outcomes])
    loss = np.where(np.isnan(loss), -np.inf, loss)
    first_success = np.argmax(succ, axis=0)
    max_loss = np.argmax(loss, axis=0)
    pick = np.where(succ.any(axis=0), first_success, max_loss)
    cols = np.arange(len(ids))
    deltas = np.stack([o.delta for o in outcomes])
    return AttackOutcome(
        example_ids=ids,
        delta=deltas[pick, cols],
        best_loss=np.stack([o.best_loss for o in outcomes])[pick, cols],
        success=succ.any(axis=0),
        forwards=sum(o.forwards for o in outcomes),
        backwards=sum(o.backwards for o in outcomes),
        queries=sum(o.queries for o in outcomes),
        eval_forwards=sum(o.eval_forwards for o in outcomes),
        name="worst-case[" + ",".join(o.name for o in outcomes) + "]",
        extra={"members": [o.name for o in outcomes], "picked": pick},
    )
