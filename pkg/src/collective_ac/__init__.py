"""Actor-critic planning for collective decentralized POMDPs."""

from .countsim import (
    count_log_prob,
    empirical_return,
    evaluate_policy,
    sample_agents_oracle,
    sample_batch,
    sample_counts,
)
from .domains import GridParams, TaxiParams, make_grid_domain, make_taxi_domain
from .model import CountBatch, CountTrajectory, ModelSpec, ObservationModel, observe, validate_trajectory
from .nets import CriticNet, PolicyNet
from .trainer import VARIANTS, TrainConfig, TrainingAborted, train
from .values import individual_values

__version__ = "0.1.0"
