"""Label-consistency purification: agree across two augmented views, best of eleven radii."""

import numpy as np

from workbench import autodiff as ad
from workbench.defenses.base import GRAD_MODES, DefenseImpl, Purified, input_gradient, sign_descent


def augmentations(x, rng, noise, dropout):
    """Additive uniform noise and a coordinate-dropout mask, fixed for one call."""
    shift = rng.uniform(-noise, noise, size=x.shape) if noise > 0 else np.zeros_like(x)
    keep = (rng.random(x.shape) >= dropout).astype(np.float64) if dropout > 0 else np.ones_like(x)
    return shift, keep


def aux_loss(static, v, shift, keep):
    p1 = ad.softmax(static(v + shift))
    p2 = ad.softmax(static(v * keep))
    return ad.l2_norm(p1 - p2, axis=1)


class Soap(DefenseImpl):
    kind = "soap"
    randomized = True
    default_mode = "unrolled"
    modes = GRAD_MODES

    def purify(self, dm, x, rng):
        cfg = dm.config
        shift, keep = augmentations(x, rng, cfg.noise, cfg.dropout)
        static = dm.static

        def objective(v):
            return input_gradient(lambda u: aux_loss(static, u, shift, keep), v)

        order = np.argsort(cfg.radii, kind="stable")
        branches = [sign_descent(objective, x, cfg.radii[j], cfg.step_scale * cfg.radii[j], cfg.steps) for j in order]
        best = np.stack([b.trace[-1] for b in branches])
        pick = np.argmin(best, axis=0)
        rows = np.arange(len(x))
        out = np.stack([b.x for b in branches])[pick, rows]
        jac = np.stack([b.jac for b in branches])[pick, rows]
        iterates = [np.stack([b.iterates[k] for b in branches])[pick, rows] for k in range(cfg.steps)]
        trace = [np.stack([b.trace[k] for b in branches])[pick, rows] for k in range(cfg.steps)]
        radii = np.asarray(cfg.radii)[order][pick]
        return Purified(out, iterates, jac, trace, extra={"branch_losses": best, "radius": radii})


def soap_defend(dm, x):
    return dm.purify(x).x
