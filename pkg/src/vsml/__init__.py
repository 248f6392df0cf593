"""Variable shared meta learning with numpy."""
from .core import Dims, LayerSpec, MetaParams, init_states, inner_step, run_episode
from .es import EsConfig, TaskDistribution, VsmlLearner, meta_train
from .tasks import Episode, TaskSpec, make_episode

__version__ = "0.1.0"

__all__ = ["Dims", "LayerSpec", "MetaParams", "init_states", "inner_step", "run_episode",
           "EsConfig", "TaskDistribution", "VsmlLearner", "meta_train",
           "Episode", "TaskSpec", "make_episode"]
