"""Offsets on hidden activations that pull each layer onto its principal subspace."""

import numpy as np

from workbench import autodiff as ad
from workbench.defenses.base import DefenseImpl, Purified


def reconstruction_error(static, embeddings, x, offsets):
    """Per-example sum over layers of |h + u - dec(enc(h + u))|^2, plus logits."""
    taps = {}
    logits = static.layers(x, offsets=offsets, taps=taps)
    total = None
    for name, h in taps.items():
        r = h - embeddings[name].reconstruct(h)
        e = ad.sum(r * r, axis=1)
        total = e if total is None else total + e
    return total, logits


class Clc(DefenseImpl):
    kind = "clc"
    default_mode = "bpda-identity"
    modes = ("bpda-identity",)
    needs = ("embeddings",)

    def validate(self, dm):
        super().validate(dm)
        missing = [t for t in dm.static.tap_names if t not in dm.aux["embeddings"]]
        if missing:
            raise ValueError(f"clc: no embedding for layers {missing}")

    def purify(self, dm, x, rng):
        cfg = dm.config
        static = dm.static
        emb = dm.aux["embeddings"]
        n = len(x)
        layers = list(range(1, static.n_hidden + 1))
        u = [np.zeros((n, static.widths[i])) for i in layers]
        trace = []
        logits = None
        for it in range(cfg.iterations + 1):
            ad.count_forward(static.role)
            if it == cfg.iterations:
                err, logits = reconstruction_error(static, emb, x, dict(zip(layers, u)))
                trace.append(np.asarray(err))
                break
            keep = {}

            def fn(*us):
                keep["err"], keep["logits"] = reconstruction_error(static, emb, x, dict(zip(layers, us)))
                return ad.sum(keep["err"])

            graph = ad.Graph(fn)
            ad.forward_eval(graph, u)
            grads = ad.backward_grad(graph, list(range(len(u))))
            ad.count_backward(static.role)
            trace.append(np.array(ad.value_of(keep["err"])))
            u = [ui - cfg.lr * gi for ui, gi in zip(u, grads)]
        offsets = dict(zip(layers, u))
        return Purified(x, [], None, trace, extra={"offsets": offsets, "logits": logits})

    def classify(self, dm, xp, res):
        if isinstance(xp, ad.Var):
            return dm.static(xp, offsets=res.extra["offsets"])
        return res.extra["logits"]


def clc_defend(dm, x):
    return dm.predict(x)
