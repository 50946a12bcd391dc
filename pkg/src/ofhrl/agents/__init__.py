"""Hierarchical and flat learners that treat the synthetic environment as online."""

from .bc import BcConfig, BcPolicy, bc_train
from .common import EpisodeRunner, evaluate
from .flat import FlatAgent, FlatConfig, flat_train
from .moc import MocConfig, OptionSet, moc_train
from .uof import UofAgent, UofConfig, uof_train

__all__ = [
    "BcConfig", "BcPolicy", "bc_train",
    "EpisodeRunner", "evaluate",
    "FlatAgent", "FlatConfig", "flat_train",
    "MocConfig", "OptionSet", "moc_train",
    "UofAgent", "UofConfig", "uof_train",
]
