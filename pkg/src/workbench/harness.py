"""The evaluation checklist: staged attacks on a defended model and the resulting report.

Stages, in order:

1. ``transfer``: APGD on the static surrogate with several losses, the
   per-example worst case transferred under both transfer policies.
2. ``blackbox``: decision- and score-based attacks on the static and the
   defended model with identical budgets.
3. ``whitebox``: APGD through the full defense when it is differentiable.
4. ``bpda-identity`` / ``bpda-trajectory``: APGD with a backward override.
5. ``randomness``: EOT against free randomness and a fixed-seed attack.
6. ``custom``: registered defense-specific attacks.

Robust accuracy everywhere is per example: an example counts as robust only
when the defended model classifies it correctly and no attack of the stage
flipped it. The worst case intersects robustness across stages.
"""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from workbench.attacks import (
    AttackBudget,
    AttackOutcome,
    SurrogateLoss,
    apgd,
    fgsm,
    pgd,
    ray_search_attack,
    score_random_search,
    transfer_attack,
    worst_case_ensemble,
)
from workbench.autodiff import NonFiniteError
from workbench.defenses import DefendedModel, defended_predict

logger = logging.getLogger(__name__)

STAGES = ("transfer", "blackbox", "whitebox", "bpda-identity", "bpda-trajectory", "randomness", "custom")
OBFUSCATION_MARGIN = 0.05


@dataclass
class StageBudget:
    iterations: int = 20
    restarts: int = 1
    n_eot: int = 4
    query_cap: int = 1000
    seed: int = 0

    def attack_budget(self, **kw):
        b = AttackBudget(iterations=self.iterations, restarts=self.restarts, seed=self.seed, query_cap=self.query_cap)
        return b.replace(**kw) if kw else b


@dataclass
class EvaluationPlan:
    stages: tuple = ("transfer", "blackbox", "whitebox", "bpda-identity", "bpda-trajectory", "randomness")
    budgets: dict = field(default_factory=dict)
    losses: tuple = ("ce", "cw", "targeted-dlr")
    hedge_gradient_steps: int = 5
    custom: tuple = ()
    wallclock_repeats: int = 30

    def __post_init__(self):
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ValueError(f"unknown stages {unknown}; expected a subset of {STAGES}")
        self.stages = tuple(s for s in STAGES if s in self.stages)

    def budget(self, stage):
        b = self.budgets.get(stage)
        if b is None:
            return StageBudget()
        return b if isinstance(b, StageBudget) else StageBudget(**b)


@dataclass
class StageResult:
    name: str
    robust: np.ndarray | None = None
    attacks: dict = field(default_factory=dict)
    skipped: bool = False
    note: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def robust_accuracy(self):
        return None if self.robust is None else float(self.robust.mean())

    def as_dict(self):
        return {
            "robust_accuracy": self.robust_accuracy,
            "attacks": {k: float(v) for k, v in sorted(self.attacks.items())},
            "skipped": self.skipped,
            "note": self.note,
            **{k: v for k, v in sorted(self.extra.items())},
        }


def _robust(correct, outcome):
    return correct & ~outcome.success


def _losses(names, k):
    return [SurrogateLoss(n, k, fallback=True) for n in names]


def evaluate_clean(model, x, y, seed=0):
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if isinstance(model, DefendedModel):
        labels = defended_predict(model, x, seed).labels
    else:
        labels = np.argmax(np.asarray(model(np.asarray(x, dtype=np.float64))), axis=1)
    return float(np.mean(labels == y))


def clean_correct(model, x, y, seed=None):
    if isinstance(model, DefendedModel):
        return defended_predict(model, x, seed).labels == y
    return np.argmax(np.asarray(model(x)), axis=1) == y


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def run_stage_transfer(static, defended, x, y, threat, budget=None, losses=("ce", "cw", "targeted-dlr")):
    budget = budget or StageBudget()
    ab = budget.attack_budget()
    correct_d = clean_correct(defended, x, y)
    correct_s = clean_correct(static, x, y)
    sources = [apgd(static, lf, x, y, threat, ab) for lf in _losses(losses, static.n_classes)]
    res = StageResult("transfer")
    per_policy = {}
    for policy in ("loss-max", "clean-on-failure"):
        outs = [transfer_attack(static, defended, None, x, y, policy=policy, source=s) for s in sources]
        ens = worst_case_ensemble(outs)
        per_policy[policy] = ens
        res.attacks[f"transfer-{policy}"] = _robust(correct_d, ens).mean()
    static_ens = worst_case_ensemble(sources)
    res.robust = _robust(correct_d, per_policy["loss-max"])
    res.extra = {
        "static_robust_accuracy": float(_robust(correct_s, static_ens).mean()),
        "policy_gap": float(res.attacks["transfer-clean-on-failure"] - res.attacks["transfer-loss-max"]),
        "losses": [s.extra["loss"] for s in sources],
    }
    res.outcome = per_policy["loss-max"]
    return res


def run_stage_blackbox(static, defended, x, y, threat, budget=None):
    budget = budget or StageBudget()
    res = StageResult("blackbox")
    correct = {"static": clean_correct(static, x, y), "defended": clean_correct(defended, x, y)}
    outs = {}
    for name, model in (("static", static), ("defended", defended)):
        if threat.p == "inf":
            outs[name, "decision"] = ray_search_attack(model, x, y, threat, budget.query_cap, seed=budget.seed)
        outs[name, "score"] = score_random_search(model, "cw", x, y, threat, budget.query_cap, seed=budget.seed)
    for (name, kind), o in outs.items():
        res.attacks[f"{kind}-{name}"] = _robust(correct[name], o).mean()
    dmembers = [o for (name, _), o in outs.items() if name == "defended"]
    smembers = [o for (name, _), o in outs.items() if name == "static"]
    res.robust = _robust(correct["defended"], worst_case_ensemble(dmembers))
    res.extra = {"static_robust_accuracy": float(_robust(correct["static"], worst_case_ensemble(smembers)).mean())}
    return res


def _attack_model(defended, mode, plan=None):
    dm = defended.with_mode(mode)
    if plan is not None and dm.kind == "hedge" and mode.startswith("bpda"):
        dm = dm.with_config(steps=plan.hedge_gradient_steps)
    return dm


def _apgd_suite(grad_model, eval_model, x, y, threat, budget, losses):
    outs = []
    for lf in losses:
        outs.append(apgd(grad_model, lf, x, y, threat, budget.attack_budget(), eval_model=eval_model))
    return outs


def run_stage_whitebox(defended, x, y, threat, budget=None, losses=("ce", "targeted-dlr")):
    budget = budget or StageBudget()
    res = StageResult("whitebox")
    if isinstance(defended, DefendedModel) and "unrolled" not in defended.impl.modes:
        res.skipped = True
        res.note = f"{defended.kind} is not differentiable end to end; deferred to bpda"
        return res
    model = defended.with_mode("unrolled") if isinstance(defended, DefendedModel) else defended
    correct = clean_correct(defended, x, y)
    try:
        outs = _apgd_suite(model, defended, x, y, threat, budget, _losses(losses, defended.n_classes))
        pg = pgd(model, "ce", x, y, threat, budget.attack_budget(iterations=10), eval_model=defended)
        fg = fgsm(model, x, y, threat) if threat.p == "inf" else None
    except NonFiniteError as exc:
        res.skipped = True
        res.note = f"gradient failure: {exc}; deferred to bpda"
        return res
    for o in outs:
        res.attacks[f"apgd-{o.extra['loss']}"] = _robust(correct, o).mean()
    members = outs + [pg]
    if fg is not None:
        # FGSM ran on the gradient model; judge it on the defended one like the rest
        fg = transfer_attack(model, defended, None, x, y, policy="loss-max", source=fg)
        res.attacks["fgsm"] = _robust(correct, fg).mean()
        members.append(fg)
    res.attacks["pgd10"] = _robust(correct, pg).mean()
    res.robust = _robust(correct, worst_case_ensemble(members))
    return res


def run_stage_bpda(defended, x, y, threat, budget=None, mode="identity", plan=None, losses=("ce",)):
    if mode not in ("identity", "trajectory"):
        raise ValueError("bpda mode must be identity or trajectory")
    budget = budget or StageBudget()
    name = f"bpda-{mode}"
    res = StageResult(name)
    if not isinstance(defended, DefendedModel) or defended.kind == "none":
        res.skipped = True
        res.note = "no defense to approximate"
        return res
    if name not in defended.impl.modes:
        if mode == "trajectory":
            raise ValueError(f"{defended.kind} records no purification iterates")
        res.skipped = True
        res.note = f"{defended.kind} does not support {name}"
        return res
    grad_model = _attack_model(defended, name, plan)
    correct = clean_correct(defended, x, y)
    outs = _apgd_suite(grad_model, defended, x, y, threat, budget, _losses(losses, defended.n_classes))
    for o in outs:
        res.attacks[f"apgd-{o.extra['loss']}"] = _robust(correct, o).mean()
    res.robust = _robust(correct, worst_case_ensemble(outs))
    return res


def run_stage_randomness(defended, x, y, threat, budget=None):
    budget = budget or StageBudget()
    res = StageResult("randomness")
    if not getattr(defended, "randomized", False):
        res.skipped = True
        res.note = "deterministic defense"
        return res
    mode = defended.impl.default_mode
    eot_model = defended.with_policy("free").with_mode(mode)
    fixed_model = defended.with_policy("seeded").with_mode(mode)
    correct = clean_correct(defended, x, y)
    n_eot = max(budget.n_eot, 2)
    eot = apgd(eot_model, "ce", x, y, threat, budget.attack_budget(n_eot=n_eot), eval_model=defended)
    fixed = apgd(fixed_model, "ce", x, y, threat, budget.attack_budget(), eval_model=defended)
    res.attacks[f"eot{n_eot}"] = _robust(correct, eot).mean()
    res.attacks["fixed-seed"] = _robust(correct, fixed).mean()
    res.robust = _robust(correct, worst_case_ensemble([eot, fixed]))
    res.extra = {"randomness_gap": float(res.attacks[f"eot{n_eot}"] - res.attacks["fixed-seed"])}
    return res


def run_stage_custom(defended, x, y, threat, hooks):
    res = StageResult("custom")
    if not hooks:
        res.skipped = True
        res.note = "no custom attacks registered"
        return res
    correct = clean_correct(defended, x, y)
    outs = []
    for hook in hooks:
        o = hook(defended, x, y, threat)
        if not isinstance(o, AttackOutcome):
            raise TypeError("custom attack hooks must return an AttackOutcome")
        outs.append(o)
        res.attacks[o.name or getattr(hook, "__name__", "custom")] = _robust(correct, o).mean()
    res.robust = _robust(correct, worst_case_ensemble(outs))
    return res


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def red_flags(stages):
    """Symptoms of overestimated robustness, as (rule, message) pairs."""
    by = {s.name: s for s in stages if not s.skipped}
    flags = []
    wb = by.get("whitebox")
    if wb is not None and "fgsm" in wb.attacks and wb.attacks["fgsm"] < wb.attacks["pgd10"]:
        flags.append(("fgsm-stronger-than-pgd", f"FGSM robust accuracy {wb.attacks['fgsm']:.3f} < PGD {wb.attacks['pgd10']:.3f}"))
    bb = by.get("blackbox")
    white = [by[n] for n in ("whitebox", "bpda-identity", "bpda-trajectory") if n in by]
    if bb is not None and white:
        best_white = min(s.robust_accuracy for s in white)
        if bb.robust_accuracy < best_white:
            flags.append(("blackbox-stronger-than-whitebox", f"black-box {bb.robust_accuracy:.3f} < white-box {best_white:.3f}"))
    if bb is not None:
        dec = bb.attacks.get("decision-defended")
        sco = bb.attacks.get("score-defended")
        if dec is not None and sco is not None and sco - dec > OBFUSCATION_MARGIN:
            flags.append(("obfuscation-suspected", f"score-based {sco:.3f} vs decision-based {dec:.3f} on the defended model"))
        if dec is not None and dec < bb.attacks.get("decision-static", dec):
            flags.append(("defense-weaker-than-static", f"decision-based: defended {dec:.3f} < static {bb.attacks['decision-static']:.3f}"))
    tr = by.get("transfer")
    if tr is not None and white:
        direct = min(s.robust_accuracy for s in white)
        if tr.robust_accuracy < direct:
            flags.append(("transfer-stronger-than-adaptive", f"transfer {tr.robust_accuracy:.3f} < direct {direct:.3f}"))
    return flags


def call_unit_ratio(defended, x, seed=None):
    """Defended inference cost in network passes over one static forward."""
    pred = defended_predict(defended, x, seed) if isinstance(defended, DefendedModel) else None
    return 1.0 if pred is None else float(pred.cost.total())


def wallclock_ratio(static, defended, x, repeats=30):
    def median_time(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return statistics.median(times)

    ts = median_time(lambda: static(x))
    td = median_time(lambda: defended(x))
    return td / max(ts, 1e-12), ts, td


def _rounded(v):
    if isinstance(v, float):
        return float(f"{v:.12g}")
    if isinstance(v, dict):
        return {k: _rounded(w) for k, w in v.items()}
    if isinstance(v, (list, tuple)):
        return [_rounded(w) for w in v]
    return v


def compile_report(stages, timings=None, config=None, clean=None, overhead=None, seeds=None):
    """Assemble the report dict; worst case intersects per-example robustness."""
    ran = [s for s in stages if not s.skipped and s.robust is not None]
    if not ran:
        raise ValueError("no stage produced results")
    worst = np.logical_and.reduce([s.robust for s in ran])
    flags = red_flags(stages)
    config = config or {}
    digest = config.get("digest") or hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()
    report = {
        "config_digest": digest,
        "defense": config.get("defense", {}),
        "seeds": seeds or {},
        "clean_accuracy": clean or {},
        "stages": {s.name: s.as_dict() for s in stages},
        "worst_case_robust_accuracy": float(worst.mean()),
        "worst_case_robust": worst.astype(int).tolist(),
        "overhead": {"call_units": overhead} if overhead is not None else {},
        "red_flags": [{"rule": r, "detail": m} for r, m in flags],
    }
    meta = {"timings": timings or {}}
    return _rounded(report), meta


def render_markdown(report):
    """Human table: defense, per-stage accuracies, worst case, overhead, red flags."""
    d = report.get("defense", {})
    name = d.get("kind", "none") if isinstance(d, dict) else str(d)
    clean = report.get("clean_accuracy", {})
    lines = [f"# Evaluation report: {name}", "", f"Config digest: `{report['config_digest']}`", ""]
    lines += ["| defense | clean (static) | clean (defended) | stage | robust accuracy | worst case | overhead (call units) |"]
    lines += ["|---|---|---|---|---|---|---|"]
    oh = report.get("overhead", {}).get("call_units")
    for stage, s in report["stages"].items():
        acc = "skipped" if s["skipped"] else f"{s['robust_accuracy']:.3f}"
        lines.append(
            f"| {name} | {clean.get('static', float('nan')):.3f} | {clean.get('defended', float('nan')):.3f} "
            f"| {stage} | {acc} | {report['worst_case_robust_accuracy']:.3f} | {'' if oh is None else f'{oh:g}x'} |"
        )
    lines += ["", "## Attacks", ""]
    for stage, s in report["stages"].items():
        if s["skipped"]:
            lines.append(f"- {stage}: skipped ({s['note']})")
            continue
        parts = ", ".join(f"{k} {v:.3f}" for k, v in s["attacks"].items())
        lines.append(f"- {stage}: {parts}")
    lines += ["", "## Red flags", ""]
    if report["red_flags"]:
        lines += [f"- **{f['rule']}**: {f['detail']}" for f in report["red_flags"]]
    else:
        lines.append("- none")
    lines.append("")
    return "\n".join(lines)


def run_plan(static, defended, x, y, threat, plan=None, config=None, seed=0, measure_wallclock=True):
    """Run every enabled stage and compile the report (plus timing metadata)."""
    plan = plan or EvaluationPlan()
    stages, timings = [], {}
    for name in plan.stages:
        b = plan.budget(name)
        t0 = time.perf_counter()
        if name == "transfer":
            st = run_stage_transfer(static, defended, x, y, threat, b, plan.losses)
        elif name == "blackbox":
            st = run_stage_blackbox(static, defended, x, y, threat, b)
        elif name == "whitebox":
            st = run_stage_whitebox(defended, x, y, threat, b, ("ce", "targeted-dlr"))
        elif name in ("bpda-identity", "bpda-trajectory"):
            mode = name.split("-")[1]
            try:
                st = run_stage_bpda(defended, x, y, threat, b, mode, plan)
            except ValueError as exc:
                st = StageResult(name, skipped=True, note=str(exc))
        elif name == "randomness":
            st = run_stage_randomness(defended, x, y, threat, b)
        else:
            st = run_stage_custom(defended, x, y, threat, plan.custom)
        timings[name] = time.perf_counter() - t0
        logger.info("stage %s: %s", name, "skipped" if st.skipped else f"{st.robust_accuracy:.3f}")
        stages.append(st)
    clean = {"static": evaluate_clean(static, x, y), "defended": evaluate_clean(defended, x, y, seed)}
    overhead = call_unit_ratio(defended, x[:1]) if isinstance(defended, DefendedModel) else 1.0
    if measure_wallclock:
        ratio, ts, td = wallclock_ratio(static, defended, x[:1], plan.wallclock_repeats)
        timings["wallclock_ratio"] = ratio
        timings["static_seconds"] = ts
        timings["defended_seconds"] = td
    seeds = {name: plan.budget(name).seed for name in plan.stages}
    seeds["evaluation"] = seed
    return compile_report(stages, timings, config, clean, overhead, seeds)
