"""Weakly coupled MDPs: exact Lagrangian bounds, tabular WCQL, and a
desk-scale WCDQN built on a self-contained dense network.

Subpackages:
    core     -- factored model, feasibility, sampling, transition splitting
    envs     -- benchmark environments (EV charging, inventory, ad matching)
    exact    -- value iteration, exact subproblem solves, bound assembly
    tabular  -- Q-learning family agents including WCQL with bound projection
    neural   -- DQN / Double DQN / WCDQN on a hand-rolled MLP
    harness  -- experiment orchestration, metrics, CSV/SVG emission, CLI
"""

from wcmdp.core import (
    FactoredAction,
    FullState,
    SubTransition,
    Transition,
    WcmdpSpec,
)

__all__ = [
    "FactoredAction",
    "FullState",
    "SubTransition",
    "Transition",
    "WcmdpSpec",
]

__version__ = "0.1.0"
