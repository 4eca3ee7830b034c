"""Evolutionary BC->RL training: phylogeny, point-mass terrains, Gaussian policies, trainer, scheduler."""

from .environment import EnvConfig, Terrain, make_terrain, terrain_score
from .phylogeny import EvolutionState, SpeciesNode, add_species, select_reproduction, validate_dag
from .policy import Architecture, PolicyParams, forward, init_params, load_checkpoint, save_checkpoint
from .schedules import TransitionSchedule, bc_weight, transition_step
from .trainer import TrainerConfig, TrainReport, train_child

__version__ = "0.1.0"

__all__ = [
    "Architecture", "EnvConfig", "EvolutionState", "PolicyParams", "SpeciesNode", "Terrain",
    "TrainReport", "TrainerConfig", "TransitionSchedule", "add_species", "bc_weight", "forward",
    "init_params", "load_checkpoint", "make_terrain", "save_checkpoint", "select_reproduction",
    "terrain_score", "train_child", "transition_step", "validate_dag",
]
