"""Contrastive purification: make two views of the input agree under an InfoNCE loss."""

import numpy as np

from workbench import autodiff as ad
from workbench.defenses.base import GRAD_MODES, DefenseImpl, input_gradient, sign_descent
from workbench.defenses.soap import augmentations

NORM_EPS = 1e-12


def _unit(z):
    return z / (ad.l2_norm(z, axis=1, keepdims=True) + NORM_EPS)


def info_nce(z1, z2, negatives, temperature):
    """Per-example InfoNCE with cosine similarity.

    With ``negatives=None`` the other batch members (both views) are the
    negatives and the loss is averaged over the two anchor views.
    """
    inv_t = 1.0 / temperature
    a, b = _unit(z1), _unit(z2)
    if negatives is None:
        n = ad.value_of(a).shape[0]
        if n < 2:
            raise ValueError("batch-derived negatives need a batch of at least two")
        both = ad.transpose(ad.concat([a, b], axis=0))
        mask = np.zeros((n, 2 * n))
        mask[np.arange(n), np.arange(n)] = -1e9
        s1 = ad.matmul(a, both) * inv_t + mask
        s2 = ad.matmul(b, both) * inv_t + np.roll(mask, n, axis=1)
        l1 = ad.neg(ad.take(ad.log_softmax(s1), np.arange(n) + n))
        l2 = ad.neg(ad.take(ad.log_softmax(s2), np.arange(n)))
        return (l1 + l2) * 0.5
    neg = np.asarray(negatives, dtype=np.float64)
    neg = neg / (np.sqrt((neg * neg).sum(axis=1, keepdims=True)) + NORM_EPS)
    pos = ad.sum(a * b, axis=1, keepdims=True) * inv_t
    logits = ad.concat([pos, ad.matmul(a, neg.T) * inv_t], axis=1)
    return ad.neg(ad.column(ad.log_softmax(logits), 0))


def default_views(x, rng, which, noise=0.05, dropout=0.1):
    shift, keep = augmentations(x, rng, noise, dropout)
    return x + shift if which == 0 else x * keep


class Contrastive(DefenseImpl):
    kind = "contrastive"
    randomized = True
    default_mode = "unrolled"
    modes = GRAD_MODES
    needs = ("encoder", "bank")

    def purify(self, dm, x, rng):
        cfg = dm.config
        enc = dm.aux["encoder"]
        bank = dm.aux["bank"]
        if len(x) == 0:
            raise ValueError("contrastive purification needs a non-empty batch")
        if bank.provenance == "batch-derived" and len(x) < 2:
            raise ValueError("batch-derived negatives need a batch of at least two")
        bank.check_disjoint(x)
        shift, _ = augmentations(x, rng, cfg.noise, 0.0)
        _, keep = augmentations(x, rng, 0.0, cfg.dropout)
        negatives = None
        if bank.provenance == "fixed-set":
            negatives = enc(bank.images + rng.uniform(-cfg.noise, cfg.noise, size=bank.images.shape))

        def loss(u):
            return info_nce(enc(u + shift), enc(u * keep), negatives, cfg.temperature)

        res = sign_descent(lambda v: input_gradient(loss, v), x, cfg.radius, cfg.step, cfg.steps)
        res.extra["negatives"] = 0 if negatives is None else len(negatives)
        return res


def contrastive_defend(dm, x):
    return dm.purify(x).x
