"""Adaptive test-time defenses behind one wrapper."""

from workbench.defenses.adp import Adp, adp_defend
from workbench.defenses.aid import Aid, aid_defend
from workbench.defenses.anti import AntiAdversary, anti_adversary_defend
from workbench.defenses.base import (
    CONFIGS,
    GRAD_MODES,
    POLICIES,
    DefendedModel,
    DefenseImpl,
    NegativeBank,
    Prediction,
    Purified,
    config_dict,
    default_config,
    defended_predict,
)
from workbench.defenses.clc import Clc, clc_defend
from workbench.defenses.contrastive import Contrastive, contrastive_defend, info_nce
from workbench.defenses.hedge import Hedge, hedge_defend, summed_ce
from workbench.defenses.imf import Imf, imf_defend
from workbench.defenses.soap import Soap, soap_defend

_IMPLS = {
    "none": DefenseImpl(),
    "hedge": Hedge(),
    "anti": AntiAdversary(),
    "soap": Soap(),
    "aid": Aid(),
    "adp": Adp(),
    "imf": Imf(),
    "clc": Clc(),
    "contrastive": Contrastive(),
}


def registry(kind):
    try:
        return _IMPLS[kind]
    except KeyError:
        raise ValueError(f"unknown defense {kind!r}") from None


__all__ = [
    "CONFIGS",
    "GRAD_MODES",
    "POLICIES",
    "DefendedModel",
    "NegativeBank",
    "Prediction",
    "Purified",
    "adp_defend",
    "aid_defend",
    "anti_adversary_defend",
    "clc_defend",
    "config_dict",
    "contrastive_defend",
    "default_config",
    "defended_predict",
    "hedge_defend",
    "imf_defend",
    "info_nce",
    "registry",
    "soap_defend",
    "summed_ce",
]
