"""Hedge defense: ascend the cross-entropy summed over all classes."""

import numpy as np

from workbench import autodiff as ad
from workbench.defenses.base import GRAD_MODES, DefenseImpl, input_gradient, sign_ascent


def summed_ce(logits):
    """Per-example sum over k of CE(logits, k) = -sum_k log p_k."""
    return ad.neg(ad.sum(ad.log_softmax(logits), axis=1))


class Hedge(DefenseImpl):
    kind = "hedge"
    randomized = True
    default_mode = "unrolled"
    modes = GRAD_MODES

    def purify(self, dm, x, rng):
        cfg = dm.config
        start = None
        if cfg.random_start:
            start = x + rng.uniform(-cfg.radius, cfg.radius, size=x.shape)
        static = dm.static
        return sign_ascent(lambda v: input_gradient(lambda u: summed_ce(static(u)), v), x, cfg.radius, cfg.step, cfg.steps, start)


def hedge_defend(dm, x):
    return dm.purify(x).x
