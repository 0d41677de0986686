"""qdistlab: how data distributions shape tabular and deep Q-learning.

Subpackages/modules:
    mdp          exact tabular MDP machinery (solvers, policies, occupancies)
    distmetrics  distribution diagnostics and concentrability coefficients
    fourstate    four-state linear-approximation diagnostic MDP
    envs         gridworlds, a multi-path chain, classic-control simulators
    datasets     dataset forging, coverage patching, dataset metrics
    approx       linear and MLP Q heads with hand-rolled backprop and Adam
    training     offline DQN/CQL, online Q-learning, evaluation
    experiments  experiment grids, result persistence, report generation
"""

__version__ = "0.1.0"
