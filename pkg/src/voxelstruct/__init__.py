"""Structure-aware voxel shape generation.

A voxel VAE and a landmark detector trained together so generated chairs
keep parts where the detector expects them.

Modules: ``tensor`` (reverse-mode autodiff), ``nets``, ``losses``,
``dataset`` (procedural chairs), ``training``, ``eval`` and ``cli``.
"""
from .kernels import BACKEND
from .nets import NetConfig
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = ["BACKEND", "NetConfig", "TrainConfig", "__version__"]
