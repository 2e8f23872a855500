"""Delay-optimal transmission scheduling under an average power budget
over a finite-state Markov channel."""
from .evaluate import MixedPolicy, enumerate_thresholds, exact_evaluate, policy_transition_matrix
from .exceptions import (
    DelaySchedError,
    Infeasible,
    InfeasibleBudget,
    InvalidInput,
    NumericalFailure,
    TooLarge,
)
from .markov import is_ergodic, stationary_distribution
from .model import (
    ChannelModel,
    EvalResult,
    JointDistribution,
    PolicyTable,
    ProblemConfig,
    ThresholdPolicy,
    threshold_to_policy,
    validate_channel_model,
)
from .sim import GreedyRule, SimResult, greedy_decision_rule, simulate

__version__ = "0.1.0"

__all__ = [
    "ChannelModel",
    "DelaySchedError",
    "EvalResult",
    "GreedyRule",
    "Infeasible",
    "InfeasibleBudget",
    "InvalidInput",
    "JointDistribution",
    "MixedPolicy",
    "NumericalFailure",
    "PolicyTable",
    "ProblemConfig",
    "SimResult",
    "ThresholdPolicy",
    "TooLarge",
    "enumerate_thresholds",
    "exact_evaluate",
    "greedy_decision_rule",
    "is_ergodic",
    "policy_transition_matrix",
    "simulate",
    "stationary_distribution",
    "threshold_to_policy",
    "validate_channel_model",
]
