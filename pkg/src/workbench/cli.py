"""Command-line front end: ``workbench gen-data | train | evaluate | report``.

Exit codes: 0 success, 2 configuration or usage error, 3 missing or
mismatched data/checkpoint, 4 attack or numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


from workbench import data, harness, models
from workbench.attacks import ThreatModel
from workbench.autodiff import NonFiniteError
from workbench.config import ConfigError, RunConfig
from workbench.defenses import DefendedModel, NegativeBank, default_config
from workbench.defenses.contrastive import default_views

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_ATTACK = 0, 2, 3, 4

logger = logging.getLogger("workbench")

# which aux model each defense needs, and the discriminator flavour
_NEEDS = {
    "aid": {"discriminator": {"mode": "aid"}},
    "imf": {"discriminator": {"mode": "atld"}},
    "adp": {"score": {}},
    "clc": {"embeddings": {}},
    "contrastive": {"encoder": {}, "bank": {}},
}


class CheckpointError(RuntimeError):
    pass


class AttackFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------
# paths
# --------------------------------------------------------------------------


def output_dir(cfg):
    return Path(os.environ.get("WORKBENCH_OUT") or cfg["output_dir"])


def _paths(cfg):
    out = output_dir(cfg)
    return {
        "out": out,
        "train": out / "data" / "train.wbds",
        "test": out / "data" / "test.wbds",
        "ckpt": out / "checkpoints",
        "log": out / "train.log",
        "report": out / "report.json",
        "md": out / "report.md",
        "meta": out / "report.meta.json",
    }


def aux_specs(cfg):
    """Aux models to train: the config's explicit block plus what the defense needs."""
    specs = {k: dict(v) for k, v in _NEEDS.get(cfg["defense"]["kind"], {}).items()}
    for k, v in cfg["aux"].items():
        specs[k] = {**specs.get(k, {}), **v}
    return specs


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(cfg):
    p = _paths(cfg)
    spec = cfg["dataset"]
    p["train"].parent.mkdir(parents=True, exist_ok=True)
    train = data.make_dataset(spec["kind"], spec["n_train"], spec["seed"])
    # the test split draws from a different stream so the two never share points
    test = data.make_dataset(spec["kind"], spec["n_test"], [spec["seed"], 1])
    data.save_dataset(p["train"], train, cfg.digest)
    data.save_dataset(p["test"], test, cfg.digest)
    logger.info("wrote %d train and %d test %s examples to %s", len(train), len(test), spec["kind"], p["train"].parent)
    return p["train"], p["test"]


def _load_data(path):
    if not path.exists():
        raise CheckpointError(f"dataset {path} not found; run gen-data first")
    try:
        return data.load_dataset(path)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc


def _threat(cfg):
    return ThreatModel(cfg["threat"]["p"], float(cfg["threat"]["eps"]))


def _log(fh, **rec):
    fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _tagged(model, cfg):
    model.meta["run_config_digest"] = cfg.digest
    return model


def cmd_train(cfg):
    p = _paths(cfg)
    train = _load_data(p["train"])
    test = _load_data(p["test"])
    threat = _threat(cfg)
    p["ckpt"].mkdir(parents=True, exist_ok=True)
    mspec = cfg["model"]
    widths = (train.dim, *mspec["widths"])
    tc = cfg.train_config()
    base = models.init_classifier(widths, train.n_classes, mspec["seed"], mspec["activation"])
    if mspec["training"] == "adversarial":
        clf = models.train_adversarial(base, train, threat, tc)
    else:
        clf = models.train_standard(base, train, tc)
    digest = cfg.train_digest
    written = []

    def save(name, model):
        path = p["ckpt"] / f"{name}.json"
        models.save_checkpoint(path, _tagged(model, cfg), digest)
        written.append(path)

    with open(p["log"], "w") as log:
        test_acc = models.accuracy(clf, test)
        save("classifier", clf)
        _log(log, model="classifier", training=mspec["training"], train_accuracy=clf.meta["train_accuracy"],
             clean_accuracy=test_acc, final_loss=clf.meta["final_loss"])
        for name, spec in sorted(aux_specs(cfg).items()):
            atc = cfg.train_config(name)
            aw = spec.get("widths")
            aw = None if aw is None else (train.dim, *aw)
            if name == "discriminator":
                disc = models.train_discriminator(clf, train, threat, spec.get("mode", "aid"), atc, aw)
                save("discriminator", disc)
                _log(log, model="discriminator", mode=disc.mode, final_loss=disc.meta["final_loss"])
            elif name == "score":
                net = models.train_score_network(train, float(spec.get("sigma", 0.25)), atc, aw)
                save("score", net)
                _log(log, model="score", sigma=net.sigma, final_loss=net.meta["final_loss"])
            elif name == "encoder":
                enc = models.train_encoder(train, atc, default_views, aw, int(spec.get("dim", 16)))
                save("encoder", enc)
                _log(log, model="encoder", final_loss=enc.meta["final_loss"])
            elif name == "embeddings":
                rank = int(spec.get("rank", 8))
                for tap, acts in sorted(clf.hidden(train.x).items()):
                    emb = models.fit_pca_embedding(acts, min(rank, acts.shape[1]))
                    path = p["ckpt"] / f"embedding_{tap}.json"
                    models.save_checkpoint(path, emb, digest)
                    written.append(path)
                _log(log, model="embeddings", rank=rank, taps=clf.tap_names)
        _log(log, model="summary", clean_accuracy=test_acc, config_digest=cfg.digest)
    logger.info("trained classifier: clean accuracy %.4f", test_acc)
    return written


def _load_ckpt(path, cfg, force):
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found; run train first")
    try:
        model, digest = models.load_checkpoint(path, with_digest=True)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if digest != cfg.train_digest:
        if not force:
            raise CheckpointError(f"{path} was trained under a different config (digest {digest[:12]}); use --force")
        logger.warning("%s: config digest mismatch ignored (--force)", path)
    return model


def build_defended(cfg, static, train, force=False):
    p = _paths(cfg)
    dspec = cfg["defense"]
    kind = dspec["kind"]
    try:
        dcfg = default_config(kind, float(cfg["threat"]["eps"]), **dspec.get("overrides", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    aux = {}
    specs = aux_specs(cfg)
    for name, spec in specs.items():
        if name in ("discriminator", "score", "encoder"):
            aux[name] = _load_ckpt(p["ckpt"] / f"{name}.json", cfg, force)
        elif name == "embeddings":
            aux[name] = {t: _load_ckpt(p["ckpt"] / f"embedding_{t}.json", cfg, force) for t in static.tap_names}
        elif name == "bank":
            provenance = spec.get("provenance", "fixed-set")
            images = train.x[: int(spec.get("size", 64))] if provenance == "fixed-set" else None
            aux[name] = NegativeBank(images, provenance)
    try:
        return DefendedModel(static, dcfg, dspec.get("policy", "seeded"), dspec.get("grad_mode"), dspec.get("seed", 0), aux)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _plan(cfg):
    spec = dict(cfg["plan"])
    spec.pop("n_eval", None)
    kw = {k: spec[k] for k in ("budgets", "hedge_gradient_steps", "wallclock_repeats") if k in spec}
    if "stages" in spec:
        kw["stages"] = tuple(spec["stages"])
    if "losses" in spec:
        kw["losses"] = tuple(spec["losses"])
    try:
        plan = harness.EvaluationPlan(**kw)
        for s in plan.stages:
            plan.budget(s)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad plan block: {exc}") from exc
    seed = cfg["seed"]
    plan.budgets = {s: _reseeded(plan.budget(s), seed) for s in plan.stages}
    return plan


def _reseeded(b, seed):
    return harness.StageBudget(b.iterations, b.restarts, b.n_eot, b.query_cap, [seed, b.seed] if seed else b.seed)


def cmd_evaluate(cfg, force=False):
    p = _paths(cfg)
    train = _load_data(p["train"])
    test = _load_data(p["test"])
    static = _load_ckpt(p["ckpt"] / "classifier.json", cfg, force)
    defended = build_defended(cfg, static, train, force)
    plan = _plan(cfg)
    n_eval = int(cfg["plan"].get("n_eval", 1000))
    x, y = test.x[:n_eval], test.y[:n_eval]
    report_cfg = {"digest": cfg.digest, "defense": {"kind": defended.kind, **_jsonable(cfg["defense"])}}
    try:
        report, meta = harness.run_plan(static, defended, x, y, _threat(cfg), plan, report_cfg, seed=cfg["seed"])
    except (NonFiniteError, FloatingPointError) as exc:
        raise AttackFailure(str(exc)) from exc
    report["threat"] = _jsonable(cfg["threat"])
    report["n_eval"] = len(x)
    write_report(p, report, meta)
    return report


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=str))


def write_report(p, report, meta):
    p["out"].mkdir(parents=True, exist_ok=True)
    with open(p["report"], "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    p["md"].write_text(harness.render_markdown(report))
    with open(p["meta"], "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def cmd_report(path_json, path_md=None):
    path_json = Path(path_json)
    if not path_json.exists():
        raise CheckpointError(f"report {path_json} not found; run evaluate first")
    report = json.loads(path_json.read_text())
    md = harness.render_markdown(report)
    (Path(path_md) if path_md else path_json.with_suffix(".md")).write_text(md)
    return md


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be at least 1")
    os.environ["OMP_NUM_THREADS"] = str(n)
    try:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass


def build_parser():
    ap = argparse.ArgumentParser(prog="workbench", description="Evaluate adaptive test-time defenses on toy tasks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="run config (JSON)")
        sp.add_argument("--seed", type=int, help="override the config's run seed")
        sp.add_argument("--threads", type=int, help="upper bound on worker threads")
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    g = sub.add_parser("gen-data", help="write the seeded train/test dataset files")
    common(g)
    t = sub.add_parser("train", help="train the classifier and any aux models")
    common(t)
    e = sub.add_parser("evaluate", help="run the evaluation plan and write reports")
    common(e)
    e.add_argument("--force", action="store_true", help="accept checkpoints trained under another config")
    r = sub.add_parser("report", help="re-render report.md from report.json")
    r.add_argument("--config", help="run config; the report is read from its output directory")
    r.add_argument("--input", help="path to report.json")
    r.add_argument("--output", help="markdown path (default: next to the JSON)")
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            if args.input:
                src = args.input
            elif args.config:
                src = _paths(RunConfig.load(args.config))["report"]
            else:
                raise ConfigError("report needs --config or --input")
            print(cmd_report(src, args.output), end="")
            return EXIT_OK
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        _set_threads(args.threads)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        else:
            report = cmd_evaluate(cfg, force=args.force)
            print(f"worst-case robust accuracy {report['worst_case_robust_accuracy']:.4f}")
            for f in report["red_flags"]:
                print(f"red flag: {f['rule']}: {f['detail']}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (AttackFailure, models.TrainingDiverged) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_ATTACK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
