"""Connect Four explainability workbench.

Trains policy/value agents by PPO self-play under a hidden-colour
curriculum, exposes their outputs as cooperative-game characteristic
functions, and compares attribution methods (Shapley sampling,
Frank-Wolfe masks, backprop saliency) through ground-truth checks and
masker tournaments.
"""

__version__ = "0.1.0"

from . import attribution, charfn, engine, fwmask, harness, mcts, network, training

__all__ = [
    "attribution",
    "charfn",
    "engine",
    "fwmask",
    "harness",
    "mcts",
    "network",
    "training",
]
