"""Score-based purification with a noisy start and an ensemble over restarts."""

import numpy as np

from workbench import autodiff as ad
from workbench.defenses.base import DefenseImpl, Purified

SCORE_FLOOR = 0.0


class Adp(DefenseImpl):
    """Deterministic score steps from S noisy starts; outputs log mean softmax.

    The step size is ``c * |xi| / |s(x_i + xi)|`` for a fresh reference draw
    xi ~ N(0, sigma^2 I); near the data the score of a noised point is about
    -xi/sigma^2, so the step is close to sigma^2 (one denoising step). The
    reference evaluation is the second score call per step.
    """

    kind = "adp"
    randomized = True
    default_mode = "unrolled"
    modes = ("unrolled",)
    direct = True
    needs = ("score",)

    def forward(self, dm, x, rng):
        cfg = dm.config
        score = dm.aux["score"]
        sigma = cfg.sigma
        total = None
        n, d = ad.value_of(x).shape
        for _ in range(cfg.S):
            xs = ad.clamp(x + sigma * rng.standard_normal((n, d)), 0.0, 1.0)
            for _ in range(cfg.T):
                grad = score(xs)
                ref = sigma * rng.standard_normal((n, d))
                ref_norm = np.sqrt((ref * ref).sum(axis=1, keepdims=True))
                alpha = ad.div(cfg.c * ref_norm, ad.l2_norm(score(xs + ref), axis=1, keepdims=True))
                xs = ad.clamp(xs + alpha * grad, 0.0, 1.0)
            p = ad.softmax(dm.static(xs))
            total = p if total is None else total + p
        return ad.log(total * (1.0 / cfg.S))

    def purify(self, dm, x, rng):
        return Purified(x, extra={"logits": self.forward(dm, x, rng)})

    def classify(self, dm, xp, res):
        return res.extra["logits"]


def adp_defend(dm, x, seed=None):
    """Averaged class probabilities of the purified ensemble."""
    model = dm if seed is None else dm.reseed(seed)
    return np.exp(model(np.asarray(x, dtype=np.float64)))
