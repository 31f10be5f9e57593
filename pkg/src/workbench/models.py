"""Dense networks used by the defenses, their training loops and checkpoints.

Every network is a plain multi-layer perceptron; the classes below only add
the role-specific bits (output size checks, the score network's noise
scale, the discriminator's mode). Calling a network on a graph variable
records a single composite node tagged with the network's role, which is
how per-network pass counts stay exact.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from workbench import autodiff as ad
from workbench.autodiff import NonFiniteError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh")
CHECKPOINT_FORMAT = "workbench-model"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class MLP:
    role = "network"

    def __init__(self, widths, n_out, activation="relu", params=None, seed=0):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 1 or any(w < 1 for w in widths):
            raise ValueError("widths must be non-empty positive integers")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.widths = widths
        self.n_out = int(n_out)
        self.activation = activation
        self.seed = seed
        self.meta = {}
        if params is None:
            params = self._init_params(seed)
        self.params = [np.ascontiguousarray(p, dtype=np.float64) for p in params]
        shapes = self.param_shapes()
        if [p.shape for p in self.params] != shapes:
            raise ValueError(f"parameter shapes {[p.shape for p in self.params]} do not match {shapes}")

    # -- structure -----------------------------------------------------------

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_hidden(self):
        return len(self.widths) - 1

    @property
    def tap_names(self):
        return [f"h{i}" for i in range(1, self.n_hidden + 1)]

    def param_shapes(self):
        dims = list(self.widths) + [self.n_out]
        shapes = []
        for a, b in zip(dims[:-1], dims[1:]):
            shapes += [(a, b), (b,)]
        return shapes

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        gain = 2.0 if self.activation == "relu" else 1.0
        params = []
        dims = list(self.widths) + [self.n_out]
        for a, b in zip(dims[:-1], dims[1:]):
            params.append(rng.standard_normal((a, b)) * np.sqrt(gain / a))
            params.append(np.zeros(b))
        return params

    def copy(self, params=None):
        other = type(self).__new__(type(self))
        other.__dict__.update(self.__dict__)
        other.params = [p.copy() for p in (self.params if params is None else params)]
        other.meta = dict(self.meta)
        return other

    # -- evaluation ------------------------------------------------------------

    def layers(self, x, params=None, offsets=None, taps=None):
        """Inline forward pass; works on arrays or graph variables.

        ``offsets`` maps a hidden-layer number (1-based) to a vector added to
        that layer's activation; ``taps`` receives each hidden output.
        """
        params = self.params if params is None else params
        act = ad.relu if self.activation == "relu" else ad.tanh
        h = x
        last = len(params) // 2 - 1
        for i in range(last + 1):
            h = ad.affine(h, params[2 * i], params[2 * i + 1])
            if i < last:
                h = act(h)
                if offsets is not None and (i + 1) in offsets:
                    h = h + offsets[i + 1]
                if taps is not None:
                    taps[f"h{i + 1}"] = h
        return h

    def __call__(self, x, offsets=None):
        """Counted forward pass (one composite node under a graph)."""
        if not offsets:
            return ad.composite(lambda v: self.layers(v), x, role=self.role, op=self.role)
        keys = sorted(offsets)

        def fn(v, *us):
            return self.layers(v, offsets=dict(zip(keys, us)))

        return ad.composite(fn, x, *[offsets[k] for k in keys], role=self.role, op=self.role)

    def hidden(self, x):
        """Untaped hidden activations by tap name (counted as one forward)."""
        taps = {}
        ad.count_forward(self.role)
        self.layers(np.asarray(x, dtype=np.float64), taps=taps)
        return taps

    def digest(self):
        h = hashlib.sha256()
        for p in self.params:
            h.update(p.tobytes())
        return h.hexdigest()

    def __repr__(self):
        return f"{type(self).__name__}(widths={self.widths}, n_out={self.n_out}, activation={self.activation!r})"


class Classifier(MLP):
    role = "static"

    def __init__(self, widths, n_classes, activation="relu", params=None, seed=0):
        if n_classes < 2:
            raise ValueError("a classifier needs at least two classes")
        super().__init__(widths, n_classes, activation, params, seed)

    @property
    def n_classes(self):
        return self.n_out

    def logits(self, x):
        return self(np.asarray(x, dtype=np.float64))

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)


def init_classifier(widths, n_classes, seed, activation="relu"):
    return Classifier(widths, n_classes, activation=activation, seed=seed)


class Discriminator(MLP):
    """Clean-vs-adversarial detector.

    ``aid`` mode has one output, the logit of the input being perturbed.
    ``atld`` mode has K+1 outputs: index 0 scores "adversarial", the rest
    are class logits.
    """

    role = "discriminator"
    MODES = ("aid", "atld")

    def __init__(self, widths, mode, n_classes=None, activation="relu", params=None, seed=0):
        if mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}")
        if mode == "atld" and (n_classes is None or n_classes < 2):
            raise ValueError("atld mode needs the class count")
        n_out = 1 if mode == "aid" else n_classes + 1
        self.mode = mode
        self.n_classes = n_classes
        super().__init__(widths, n_out, activation, params, seed)

    def check_mode(self, mode):
        if mode != self.mode:
            raise ValueError(f"discriminator is in {self.mode!r} mode, {mode!r} requested")


class ScoreNetwork(MLP):
    role = "score"

    def __init__(self, widths, sigma, activation="tanh", params=None, seed=0):
        if not sigma > 0:
            raise ValueError("score network noise scale must be positive")
        self.sigma = float(sigma)
        super().__init__(widths, widths[0], activation, params, seed)


class Encoder(MLP):
    role = "encoder"


@dataclass
class LinearEmbedding:
    """Top principal directions of a set of activations.

    ``components`` is (r, d) with orthonormal rows; encoding subtracts the
    mean and projects, decoding maps back to the full space.
    """

    components: np.ndarray
    mean: np.ndarray
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def rank(self):
        return self.components.shape[0]

    def encode(self, h):
        return ad.affine(ad.sub(h, self.mean), self.components.T, np.zeros(self.rank))

    def decode(self, z):
        return ad.affine(z, self.components, self.mean)

    def reconstruct(self, h):
        return self.decode(self.encode(h))


def fit_pca_embedding(activations, r, rtol=1e-10):
    acts = np.asarray(activations, dtype=np.float64)
    n, d = acts.shape
    if not 1 <= r <= d:
        raise ValueError(f"rank must be in [1, {d}], got {r}")
    if n < r:
        raise ValueError(f"need at least {r} samples, got {n}")
    mu = acts.mean(axis=0)
    centered = acts - mu
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    eig = s**2 / n
    rank = int(np.sum(s > rtol * max(s[0], 1e-300))) if s.size else 0
    if r > rank and r < d:
        raise ValueError(f"activations have rank {rank}, cannot fit {r} components")
    if r == d and rank < d:
        # full-rank request on degenerate data: complete the basis
        comps = np.linalg.qr(np.vstack([vt, np.eye(d)]).T)[0].T[:d]
        return LinearEmbedding(comps, mu, np.pad(eig, (0, d - eig.size)))
    return LinearEmbedding(vt[:r].copy(), mu, eig)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.05
    seed: int = 0
    momentum: float = 0.9
    attack_steps: int = 10
    attack_eps: float | None = None
    attack_step: float | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch size and learning rate positive")

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _cross_entropy(logits, y):
    return -ad.mean(ad.take(ad.log_softmax(logits), y))


def _sgd(model, cfg, n, batch_loss, on_epoch=None):
    """Momentum SGD over shuffled minibatches of ``n`` examples."""
    params = [p.copy() for p in model.params]
    vel = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(cfg.seed)
    last = float("nan")
    for epoch in range(cfg.epochs):
        if on_epoch is not None:
            on_epoch(epoch, params)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            graph = ad.Graph(lambda *ps: batch_loss(ps, idx))
            try:
                loss = ad.forward_eval(graph, params)
                grads = ad.backward_grad(graph, list(range(len(params))))
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}") from exc
            for p, v, g in zip(params, vel, grads):
                v *= cfg.momentum
                v -= cfg.lr * g
                p += v
            last = float(loss)
        if not all(np.isfinite(p).all() for p in params):
            raise TrainingDiverged(f"parameters diverged in epoch {epoch}")
    return params, last


def accuracy(model, ds):
    return float(np.mean(model.predict(ds.x) == ds.y)) if len(ds) else float("nan")


def train_standard(model, ds, cfg):
    def batch_loss(ps, idx):
        return _cross_entropy(model.layers(ds.x[idx], params=ps), ds.y[idx])

    params, loss = _sgd(model, cfg, len(ds), batch_loss)
    trained = model.copy(params)
    trained.meta = {"train_accuracy": accuracy(trained, ds), "final_loss": loss, "train_config": cfg.digest()}
    logger.info("standard training: accuracy %.4f", trained.meta["train_accuracy"])
    return trained


def _pgd_batch(model, x, y, threat, cfg, seed):
    from workbench.attacks import AttackBudget, pgd

    budget = AttackBudget(iterations=cfg.attack_steps, restarts=1, seed=seed)
    step = cfg.attack_step if cfg.attack_step is not None else threat.eps / 4
    out = pgd(model, "ce", x, y, threat, budget, step=step)
    return x + out.delta


def train_adversarial(model, ds, threat, cfg):
    """Madry-style training on PGD points regenerated for every minibatch."""
    if cfg.attack_steps < 1:
        raise ValueError("adversarial training needs an inner attack budget")
    frozen = model.copy()
    counter = [0]

    def batch_loss(ps, idx):
        xb = ds.x[idx]
        if threat.eps > 0:
            frozen.params = [np.asarray(p.value if isinstance(p, ad.Var) else p) for p in ps]
            counter[0] += 1
            xb = _pgd_batch(frozen, xb, ds.y[idx], threat, cfg, seed=(cfg.seed, counter[0]))
        return _cross_entropy(model.layers(xb, params=ps), ds.y[idx])

    params, loss = _sgd(model, cfg, len(ds), batch_loss)
    trained = model.copy(params)
    trained.meta = {
        "train_accuracy": accuracy(trained, ds),
        "final_loss": loss,
        "train_config": cfg.digest(),
        "threat": threat.as_dict(),
    }
    logger.info("adversarial training: clean accuracy %.4f", trained.meta["train_accuracy"])
    return trained


def train_discriminator(static, ds, threat, mode, cfg, widths=None):
    """Train a clean-vs-PGD detector against a frozen static classifier.

    Perturbed negatives are regenerated at the start of every epoch.
    """
    widths = (ds.dim, 32, 32) if widths is None else widths
    disc = Discriminator(widths, mode, n_classes=ds.n_classes, seed=cfg.seed)
    adv = {"x": ds.x}

    def on_epoch(epoch, params):
        adv["x"] = _pgd_batch(static, ds.x, ds.y, threat, cfg, seed=(cfg.seed, 7919, epoch))

    def batch_loss(ps, idx):
        xb = np.concatenate([ds.x[idx], adv["x"][idx]])
        out = disc.layers(xb, params=ps)
        m = len(idx)
        if mode == "aid":
            z = ad.sum(out, axis=1)
            target = np.concatenate([np.zeros(m), np.ones(m)])
            # logistic loss: softplus(z) - t*z
            return ad.mean(ad.softplus(z) - ad.mul(target, z))
        labels = np.concatenate([ds.y[idx] + 1, np.zeros(m, dtype=np.int64)])
        return _cross_entropy(out, labels)

    params, loss = _sgd(disc, cfg, len(ds), batch_loss, on_epoch=on_epoch)
    trained = disc.copy(params)
    trained.meta = {"final_loss": loss, "train_config": cfg.digest(), "threat": threat.as_dict()}
    return trained


def discriminator_scores(disc, x):
    """Probability of "adversarial" for each row, from either mode."""
    out = disc(np.asarray(x, dtype=np.float64))
    if disc.mode == "aid":
        return 1.0 / (1.0 + np.exp(-out[:, 0]))
    z = out - out.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p[:, 0] / p.sum(axis=1)


def train_score_network(ds, sigma, cfg, widths=None):
    """Denoising score matching at a single noise level."""
    if not sigma > 0:
        raise ValueError("noise scale must be positive")
    widths = (ds.dim, 64, 64) if widths is None else widths
    net = ScoreNetwork(widths, sigma, seed=cfg.seed)
    noise_rng = np.random.default_rng([cfg.seed, 104729])

    def batch_loss(ps, idx):
        xi = noise_rng.standard_normal((len(idx), ds.dim))
        s = net.layers(ds.x[idx] + sigma * xi, params=ps)
        # sigma^2 * |s - (x - x_noisy)/sigma^2|^2 == |sigma*s + xi|^2
        r = ad.mul(sigma, s) + xi
        return ad.mean(ad.sum(r * r, axis=1))

    params, loss = _sgd(net, cfg, len(ds), batch_loss)
    trained = net.copy(params)
    trained.meta = {"final_loss": loss, "train_config": cfg.digest()}
    return trained


def denoising_objective(net, x, seed=0, draws=4):
    """Held-out score-matching loss, averaged over fixed noise draws."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(draws):
        xi = rng.standard_normal(x.shape)
        r = net.sigma * net(x + net.sigma * xi) + xi
        total += float(np.mean(np.sum(r * r, axis=1)))
    return total / draws


def train_encoder(ds, cfg, augment, widths=None, dim=16, temperature=0.1):
    """SimCLR-style encoder: two augmented views per example, InfoNCE loss."""
    from workbench.defenses.contrastive import info_nce

    widths = (ds.dim, 64) if widths is None else widths
    enc = Encoder(widths, dim, seed=cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, 15485863])

    def batch_loss(ps, idx):
        xb = ds.x[idx]
        v1 = augment(xb, aug_rng, 0)
        v2 = augment(xb, aug_rng, 1)
        z1 = enc.layers(v1, params=ps)
        z2 = enc.layers(v2, params=ps)
        return ad.mean(info_nce(z1, z2, None, temperature))

    params, loss = _sgd(enc, cfg, len(ds), batch_loss)
    trained = enc.copy(params)
    trained.meta = {"final_loss": loss, "train_config": cfg.digest()}
    return trained


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _pack(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unpack(d):
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


_KINDS = {"classifier": Classifier, "discriminator": Discriminator, "score": ScoreNetwork, "encoder": Encoder}


def checkpoint_record(model, config_digest=""):
    if isinstance(model, LinearEmbedding):
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": "embedding",
            "components": _pack(model.components),
            "mean": _pack(model.mean),
            "eigenvalues": _pack(model.eigenvalues),
            "config_digest": config_digest,
        }
    kind = next(k for k, cls in _KINDS.items() if type(model) is cls)
    rec = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "widths": list(model.widths),
        "n_out": model.n_out,
        "activation": model.activation,
        "seed": model.seed if isinstance(model.seed, int) else None,
        "params": [_pack(p) for p in model.params],
        "train_config_digest": model.meta.get("train_config", ""),
        "config_digest": config_digest,
        "meta": {k: v for k, v in model.meta.items() if isinstance(v, (int, float, str, dict))},
    }
    if kind == "discriminator":
        rec["mode"] = model.mode
        rec["n_classes"] = model.n_classes
    if kind == "score":
        rec["sigma"] = model.sigma
    return rec


def from_record(rec):
    if rec.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a workbench checkpoint")
    if rec.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {rec.get('version')}")
    kind = rec["kind"]
    if kind == "embedding":
        return LinearEmbedding(_unpack(rec["components"]), _unpack(rec["mean"]), _unpack(rec["eigenvalues"]))
    params = [_unpack(p) for p in rec["params"]]
    widths, act, seed = rec["widths"], rec["activation"], rec.get("seed")
    if kind == "classifier":
        model = Classifier(widths, rec["n_out"], act, params, seed)
    elif kind == "discriminator":
        model = Discriminator(widths, rec["mode"], rec["n_classes"], act, params, seed)
    elif kind == "score":
        model = ScoreNetwork(widths, rec["sigma"], act, params, seed)
    elif kind == "encoder":
        model = Encoder(widths, rec["n_out"], act, params, seed)
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    model.meta = dict(rec.get("meta", {}))
    return model


def save_checkpoint(path, model, config_digest=""):
    with open(path, "w") as fh:
        json.dump(checkpoint_record(model, config_digest), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path, with_digest=False):
    with open(path) as fh:
        rec = json.load(fh)
    model = from_record(rec)
    return (model, rec.get("config_digest", "")) if with_digest else model
