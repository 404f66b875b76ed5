"""OSME attention branches and MAMC metric constraints on a numpy autodiff core."""

from .errors import OsmeMamcError
from .mamc import BatchFeatures, count_constraints, mamc_loss, npair_loss
from .osme import OsmeConfig, init_params, osme_forward
from .synth import SynthSpec, gen_dataset
from .tensor import Tensor, backward
from .trainer import TrainConfig, Trainer, evaluate

__all__ = [
    "BatchFeatures", "OsmeConfig", "OsmeMamcError", "SynthSpec", "Tensor", "TrainConfig", "Trainer",
    "backward", "count_constraints", "evaluate", "gen_dataset", "init_params", "mamc_loss",
    "npair_loss", "osme_forward",
]
