"""Rapidly-exploring random tree exploration for sparse-reward RL.

Exploration grows a kinodynamic tree in state space with a learned local
steering policy, successful branches become demonstrations, a policy is
initialised by behaviour cloning and then refined with a KL-constrained
policy gradient.
"""

__version__ = "0.1.0"
