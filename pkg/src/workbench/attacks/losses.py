"""Surrogate losses for attacks; every one is "higher is more adversarial"."""

from __future__ import annotations

import logging

import numpy as np

from workbench import autodiff as ad

logger = logging.getLogger(__name__)
_warned = set()

KINDS = ("ce", "cw", "dlr", "targeted-dlr")
_ALIASES = {"cross-entropy": "ce", "cw-margin": "cw", "margin": "cw"}
DLR_EPS = 1e-12


class SurrogateLoss:
    """A per-example attack objective.

    DLR variants divide by gaps between sorted logits and need K >= 4.
    With ``fallback=True`` they degrade to the CW margin (with a warning)
    instead of raising. ``target_rank`` picks the targeted-DLR class as
    the ``target_rank``-th highest non-true logit at the first evaluation.
    """

    def __init__(self, kind="ce", n_classes=None, target_rank=1, fallback=False):
        kind = _ALIASES.get(kind, kind)
        if kind not in KINDS:
            raise ValueError(f"unknown loss {kind!r}; expected one of {KINDS}")
        self.requested = kind
        if kind in ("dlr", "targeted-dlr") and n_classes is not None and n_classes < 4:
            if not fallback:
                raise ValueError(f"{kind} needs at least 4 classes, got {n_classes}")
            if (kind, n_classes) not in _warned:
                _warned.add((kind, n_classes))
                logger.warning("%s needs K >= 4 (K=%d); using the cw margin instead", kind, n_classes)
            kind = "cw"
        self.kind = kind
        self.n_classes = n_classes
        if target_rank < 1:
            raise ValueError("target rank starts at 1")
        self.target_rank = target_rank

    def __repr__(self):
        return f"SurrogateLoss({self.kind!r})"

    @property
    def name(self):
        return self.kind if self.kind == self.requested else f"{self.requested}->{self.kind}"

    def pick_targets(self, logits, y):
        z = np.array(ad.value_of(logits), dtype=np.float64)
        z[np.arange(len(y)), y] = -np.inf
        order = np.argsort(-z, axis=1, kind="stable")
        return order[:, self.target_rank - 1]

    def per_example(self, logits, y, targets=None):
        y = np.asarray(y, dtype=np.int64)
        k = ad.value_of(logits).shape[1]
        if self.kind in ("dlr", "targeted-dlr") and k < 4:
            raise ValueError(f"{self.kind} needs at least 4 classes, got {k}")
        if self.kind == "ce":
            return ad.neg(ad.take(ad.log_softmax(logits), y))
        zy = ad.take(logits, y)
        if self.kind == "cw":
            return ad.max_except(logits, y) - zy
        srt = ad.sort_desc(logits)
        if self.kind == "dlr":
            denom = ad.column(srt, 0) - ad.column(srt, 2) + DLR_EPS
            return ad.neg(zy - ad.max_except(logits, y)) / denom
        if targets is None:
            targets = self.pick_targets(logits, y)
        zt = ad.take(logits, targets)
        denom = ad.column(srt, 0) - (ad.column(srt, 2) + ad.column(srt, 3)) * 0.5 + DLR_EPS
        return ad.neg(zy - zt) / denom

    def __call__(self, logits, y, targets=None):
        return ad.sum(self.per_example(logits, y, targets))


def as_loss(loss, n_classes=None, fallback=True):
    if isinstance(loss, SurrogateLoss):
        return loss
    return SurrogateLoss(loss, n_classes, fallback=fallback)


def eval_loss(loss, logits, y, targets=None):
    """Scalar loss for one example (1-D logits) or summed over a batch."""
    loss = as_loss(loss, fallback=False)
    if isinstance(logits, np.ndarray) and logits.ndim == 1:
        logits = logits[None, :]
        y = np.atleast_1d(y)
    if not isinstance(logits, ad.Var):
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    out = loss(logits, y, targets)
    return float(out) if not isinstance(out, ad.Var) else out
