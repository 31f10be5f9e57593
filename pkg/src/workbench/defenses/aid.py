"""Discriminator-guided purification: lower the detector's adversarial logit."""

from workbench import autodiff as ad
from workbench.defenses.base import GRAD_MODES, DefenseImpl, input_gradient, sign_descent


class Aid(DefenseImpl):
    kind = "aid"
    default_mode = "unrolled"
    modes = GRAD_MODES
    needs = ("discriminator",)

    def validate(self, dm):
        super().validate(dm)
        dm.aux["discriminator"].check_mode("aid")

    def purify(self, dm, x, rng):
        cfg = dm.config
        disc = dm.aux["discriminator"]
        return sign_descent(lambda v: input_gradient(lambda u: ad.column(disc(u), 0), v), x, cfg.radius, cfg.step, cfg.steps)


def aid_defend(dm, x):
    return dm.purify(x).x
