"""Inference-time repair toward the detector's clean side (single signed step by default)."""

from workbench import autodiff as ad
from workbench.defenses.base import GRAD_MODES, DefenseImpl, input_gradient, sign_ascent


def adversarial_log_prob(disc_out):
    return ad.column(ad.log_softmax(disc_out), 0)


class Imf(DefenseImpl):
    kind = "imf"
    default_mode = "unrolled"
    modes = GRAD_MODES
    needs = ("discriminator",)

    def validate(self, dm):
        super().validate(dm)
        dm.aux["discriminator"].check_mode("atld")

    def purify(self, dm, x, rng):
        cfg = dm.config
        disc = dm.aux["discriminator"]
        step = cfg.radius / cfg.steps

        def descend(v):
            val, g = input_gradient(lambda u: adversarial_log_prob(disc(u)), v)
            return val, -g

        return sign_ascent(descend, x, cfg.radius, step, cfg.steps)


def imf_defend(dm, x):
    return dm.purify(x).x
