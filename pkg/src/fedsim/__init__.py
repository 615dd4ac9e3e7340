"""Desk-scale federated learning simulator.

Implements FedAvg and FedFish (Fisher-weighted aggregation) over small
dense networks on synthetic federated datasets, with an evaluation suite
covering global performance, personalization, the client-server barrier,
and communication cost.
"""

from .nn_core import (Batch, DivergenceError, ModelSpec, batch_loss, forward,
                      init_params, loss_and_grad, param_count, predict_metric)
from .datasets import (ClientDataset, FederatedDataset, gen_dirichlet_classification,
                       gen_toy_regression, dump_federated_dataset,
                       load_federated_dataset, split_for_personalization)
from .local_training import ClientUpdate, LocalTrainConfig, fed_local_train, fisher_diag
from .aggregation import (AggregatorConfig, CommCost, ServerState, aggregate,
                          closed_form_merge, comm_cost, server_step)
from .evaluation import (RoundMetrics, client_server_barrier, function_space_distance,
                         global_performance, personalize_and_eval)
from .runner import (DatasetConfig, ExperimentConfig, RunRecord, build_dataset,
                     config_from_dict, config_to_dict, default_dirichlet_config,
                     default_toy_config, fixed_compute_rounds, run_ab,
                     run_experiment, sample_cohort)

__version__ = "0.1.0"

__all__ = [
    "Batch", "DivergenceError", "ModelSpec", "batch_loss", "forward",
    "init_params", "loss_and_grad", "param_count", "predict_metric",
    "ClientDataset", "FederatedDataset", "gen_dirichlet_classification",
    "gen_toy_regression", "dump_federated_dataset", "load_federated_dataset",
    "split_for_personalization",
    "ClientUpdate", "LocalTrainConfig", "fed_local_train", "fisher_diag",
    "AggregatorConfig", "CommCost", "ServerState", "aggregate",
    "closed_form_merge", "comm_cost", "server_step",
    "RoundMetrics", "client_server_barrier", "function_space_distance",
    "global_performance", "personalize_and_eval",
    "DatasetConfig", "ExperimentConfig", "RunRecord", "build_dataset",
    "config_from_dict", "config_to_dict", "default_dirichlet_config",
    "default_toy_config", "fixed_compute_rounds", "run_ab", "run_experiment",
    "sample_cohort",
    "__version__",
]
