"""Deliberately broken models used to exercise the red-flag detectors and EOT."""

import numpy as np

from workbench import autodiff as ad
from workbench.autodiff import BackwardOverride, Var

LATTICE = 255


class _Wrapper:
    randomized = False
    policy = "deterministic"

    def __init__(self, static):
        self.static = static

    @property
    def n_classes(self):
        return self.static.n_classes

    @property
    def n_in(self):
        return self.static.n_in

    def predict(self, x):
        return np.argmax(self(x), axis=1)


class GradientMaskedModel(_Wrapper):
    """Exact forward; the input gradient is zeroed for rows off the 8-bit lattice.

    Clean data quantized to the lattice still gets true gradients, so a
    single step from the clean point works while random starts stall.
    """

    def __init__(self, static, levels=LATTICE):
        super().__init__(static)
        self.levels = levels

    def on_lattice(self, x):
        q = np.round(x * self.levels) / self.levels
        return np.all(np.abs(x - q) < 1e-12, axis=1)

    def __call__(self, x):
        if not isinstance(x, Var):
            return self.static(x)
        mask = self.on_lattice(x.value)[:, None].astype(np.float64)
        gate = ad.composite(lambda v: v, x, override=BackwardOverride.linear(lambda g: g * mask), op="mask")
        return self.static(gate)


def quantize(x, levels=LATTICE):
    return np.round(np.asarray(x) * levels) / levels


class ConfidenceFlattenedModel(_Wrapper):
    """Outputs softmax(T * z): same argmax, saturated scores and vanishing gradients."""

    def __init__(self, static, temperature=1e4):
        super().__init__(static)
        self.temperature = temperature

    def __call__(self, x):
        return ad.softmax(self.static(x) * self.temperature)


class NoisyInputModel(_Wrapper):
    """Gaussian input noise drawn from ``seed``; re-seeded per draw under ``free``."""

    randomized = True

    def __init__(self, static, sigma=0.05, seed=0, policy="free"):
        super().__init__(static)
        self.sigma = sigma
        self.seed = seed
        self.policy = policy

    def reseed(self, seed):
        return NoisyInputModel(self.static, self.sigma, seed, self.policy)

    def __call__(self, x):
        rng = np.random.default_rng(self.seed)
        noise = self.sigma * rng.standard_normal(ad.value_of(x).shape)
        return self.static(x + noise)
