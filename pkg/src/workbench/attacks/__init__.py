"""Attacks against static and defended classifiers."""

from workbench.attacks.blackbox import ray_search_attack, score_random_search
from workbench.attacks.gradient import apgd, apgd_checkpoints, eot_gradient, fgsm, logits_of, pgd, predict
from workbench.attacks.losses import SurrogateLoss, as_loss, eval_loss
from workbench.attacks.threat import AttackBudget, AttackOutcome, ThreatModel, example_rngs, read_jsonl
from workbench.attacks.transfer import POLICIES, transfer_attack, worst_case_ensemble

__all__ = [
    "AttackBudget",
    "AttackOutcome",
    "POLICIES",
    "SurrogateLoss",
    "ThreatModel",
    "apgd",
    "apgd_checkpoints",
    "as_loss",
    "eot_gradient",
    "eval_loss",
    "example_rngs",
    "fgsm",
    "logits_of",
    "pgd",
    "predict",
    "ray_search_attack",
    "read_jsonl",
    "score_random_search",
    "transfer_attack",
    "worst_case_ensemble",
]
