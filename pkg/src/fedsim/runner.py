"""Multi-round federated training driver.

Each round samples a client cohort, trains every cohort member locally
from the broadcast parameters, aggregates the updates into a
pseudo-gradient, and applies one server optimizer step. All randomness is
derived from the experiment seed through tagged seed sequences; cohort and
batch-order draws never depend on the aggregation algorithm, so runs that
differ only in algo see identical client sequences and data iteration.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .nn_core import DivergenceError, ModelSpec, init_params
from .datasets import (FederatedDataset, PERSONALIZE_FRACTIONS,
                       gen_dirichlet_classification, gen_toy_regression,
                       load_federated_dataset, split_for_personalization)
from .local_training import LocalTrainConfig, fed_local_train
from .aggregation import AggregatorConfig, ServerState, aggregate, comm_cost, server_step
from .evaluation import (CSB_METRIC_KINDS, RoundMetrics, client_server_barrier,
                         function_space_distance, global_performance,
                         personalize_and_eval)

_SEED_MASK = (1 << 64) - 1
# Tags namespacing the per-purpose seed streams derived from the master seed.
_TAG_INIT, _TAG_DATA, _TAG_COHORT, _TAG_LOCAL, _TAG_P13N = range(5)

DATASET_NAMES = ("toy_regression", "dirichlet_classification", "json_file")
_DATASET_PARAMS = {
    "toy_regression": ({"overlap", "n_per_client", "noise_sd"}, {"seed"}),
    "dirichlet_classification": ({"num_clients", "num_classes", "alpha",
                                  "examples_per_client", "input_dim"}, {"seed"}),
    "json_file": ({"path"}, set()),
}


def _derived_seed(master: int, *tags: int) -> int:
    ss = np.random.SeedSequence([master & _SEED_MASK, *tags])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class DatasetConfig:
    """Generator name plus its keyword parameters; a missing 'seed' param
    is derived from the experiment seed at build time."""

    name: str
    params: dict

    def __post_init__(self) -> None:
        if self.name not in DATASET_NAMES:
            raise ValueError(f"unknown dataset {self.name!r}, expected one of {DATASET_NAMES}")
        required, optional = _DATASET_PARAMS[self.name]
        keys = set(self.params)
        missing = required - keys
        if missing:
            raise ValueError(f"dataset params missing {sorted(missing)}")
        extra = keys - required - optional
        if extra:
            raise ValueError(f"unknown dataset param {sorted(extra)[0]!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    model: ModelSpec
    rounds: int
    clients_per_round: int
    local: LocalTrainConfig
    agg: AggregatorConfig
    eval_every: int = 1
    personalize_fractions: tuple[float, ...] = ()
    personalize_epochs: int = 1
    csb_metric: str = "loss"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "personalize_fractions",
                           tuple(float(f) for f in self.personalize_fractions))
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.clients_per_round < 1:
            raise ValueError("clients_per_round must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.personalize_epochs < 1:
            raise ValueError("personalize_epochs must be >= 1")
        for f in self.personalize_fractions:
            if f not in PERSONALIZE_FRACTIONS:
                raise ValueError(f"personalize fraction {f} not in {PERSONALIZE_FRACTIONS}")
        if self.csb_metric not in CSB_METRIC_KINDS:
            raise ValueError(f"unknown csb_metric {self.csb_metric!r}")


@dataclass
class RunRecord:
    """Everything one run produced: config, evaluated-round metrics, final
    parameters (plus digest), the final round's client end points, the full
    cohort log, and the total count of extra Fisher passes."""

    config: ExperimentConfig
    per_round: list[RoundMetrics]
    final_params_digest: str
    final_params: np.ndarray
    final_round_client_params: list[np.ndarray] = field(default_factory=list)
    cohorts: list[list[int]] = field(default_factory=list)
    fisher_passes: int = 0


def build_dataset(cfg: ExperimentConfig) -> FederatedDataset:
    params = dict(cfg.dataset.params)
    if cfg.dataset.name == "json_file":
        return load_federated_dataset(params["path"])
    params.setdefault("seed", _derived_seed(cfg.seed, _TAG_DATA))
    if cfg.dataset.name == "toy_regression":
        return gen_toy_regression(**params)
    return gen_dirichlet_classification(**params)


def sample_cohort(seed: int, round_index: int, num_train_clients: int,
                  cohort_size: int) -> list[int]:
    """Uniform without-replacement draw, ascending ids; a pure function of
    (seed, round, num_train_clients, cohort_size) and nothing else."""
    rng = np.random.default_rng([seed & _SEED_MASK, _TAG_COHORT, round_index])
    ids = rng.choice(num_train_clients, size=cohort_size, replace=False)
    return sorted(int(i) for i in ids)


def fixed_compute_rounds(total_local_epochs: int, local_epochs: int) -> int:
    """Rounds for a fixed total-epoch budget; the budget must divide evenly."""
    rounds = total_local_epochs // local_epochs
    if rounds * local_epochs != total_local_epochs:
        raise ValueError(
            f"local_epochs {local_epochs} does not divide budget {total_local_epochs}")
    return rounds


def _worker_count(num_tasks: int) -> int:
    env = os.environ.get("FEDSIM_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(num_tasks, cap))


def _map_clients(fn, cohort: list[int]):
    workers = _worker_count(len(cohort))
    if workers == 1:
        return [fn(cid) for cid in cohort]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cohort))


def _personalization_summary(cfg: ExperimentConfig, data: FederatedDataset,
                             params: np.ndarray, round_index: int
                             ) -> dict[float, tuple[float, float]]:
    out: dict[float, tuple[float, float]] = {}
    for frac in cfg.personalize_fractions:
        befores, afters = [], []
        for client in data.heldout_clients:
            prepared = split_for_personalization(client, frac)
            seed = _derived_seed(cfg.seed, _TAG_P13N, round_index,
                                 client.client_id, int(frac * 100))
            before, after = personalize_and_eval(
                cfg.model, params, prepared, cfg.personalize_epochs,
                cfg.local.lr_local, frac, batch_size=cfg.local.batch_size, seed=seed)
            befores.append(before)
            afters.append(after)
        out[frac] = (float(np.mean(befores)), float(np.mean(afters)))
    return out


def run_experiment(cfg: ExperimentConfig,
                   dataset: FederatedDataset | None = None) -> RunRecord:
    """Run the full federated loop and return the record of the run."""
    data = dataset if dataset is not None else build_dataset(cfg)
    num_train = len(data.train_clients)
    if cfg.clients_per_round > num_train:
        raise ValueError(
            f"clients_per_round {cfg.clients_per_round} exceeds {num_train} train clients")
    spec = cfg.model
    state = ServerState(init_params(spec, _derived_seed(cfg.seed, _TAG_INIT)))

    per_round: list[RoundMetrics] = []
    cohorts: list[list[int]] = []
    final_client_params: list[np.ndarray] = []
    fisher_passes = 0
    cum_up = cum_down = 0
    for r in range(1, cfg.rounds + 1):
        cohort = sample_cohort(cfg.seed, r, num_train, cfg.clients_per_round)
        cohorts.append(cohort)
        broadcast = state.params

        def train_one(cid: int):
            return fed_local_train(spec, broadcast, data.train_clients[cid].train,
                                   cfg.local, _derived_seed(cfg.seed, _TAG_LOCAL, r, cid),
                                   client_id=cid)

        try:
            updates = _map_clients(train_one, cohort)
            pseudo_grad, fallback = aggregate(updates, cfg.agg)
            state = server_step(state, pseudo_grad, cfg.agg)
        except DivergenceError as err:
            raise DivergenceError(f"round {r}: {err}") from err
        fisher_passes += sum(u.fisher_passes for u in updates)
        cost = comm_cost(updates, cfg.agg)
        cum_up += cost.up_bits
        cum_down += cost.down_bits

        if r % cfg.eval_every == 0 or r == cfg.rounds:
            client_params = [broadcast - u.delta for u in updates]
            cohort_clients = [data.train_clients[c] for c in cohort]
            g_loss, g_metric = global_performance(spec, state.params, data.train_clients)
            csb = client_server_barrier(spec, state.params, client_params,
                                        cohort_clients, cfg.csb_metric)
            fsd = float(np.mean([
                function_space_distance(spec, state.params, theta, c.train.inputs)
                for theta, c in zip(client_params, cohort_clients)
            ]))
            p13n = (_personalization_summary(cfg, data, state.params, r)
                    if cfg.personalize_fractions else None)
            per_round.append(RoundMetrics(
                round=r, global_loss=g_loss, global_metric=g_metric, csb=csb,
                fallback_coords=fallback, comm_bits_up=cost.up_bits,
                comm_bits_down=cost.down_bits, comm_bits_up_cum=cum_up,
                comm_bits_down_cum=cum_down, personalization=p13n, fsd_kl=fsd))
            if r == cfg.rounds:
                final_client_params = client_params

    digest = hashlib.sha256(state.params.tobytes()).hexdigest()
    return RunRecord(config=cfg, per_round=per_round, final_params_digest=digest,
                     final_params=state.params, final_round_client_params=final_client_params,
                     cohorts=cohorts, fisher_passes=fisher_passes)


def run_ab(cfg: ExperimentConfig,
           dataset: FederatedDataset | None = None) -> tuple[RunRecord, RunRecord]:
    """Run fedavg and fedfish under identical seeds (same dataset, same
    initialization, same cohorts, same batch orders)."""
    data = dataset if dataset is not None else build_dataset(cfg)
    rec_avg = run_experiment(replace(cfg, agg=replace(cfg.agg, algo="fedavg")), data)
    rec_fish = run_experiment(replace(cfg, agg=replace(cfg.agg, algo="fedfish")), data)
    return rec_avg, rec_fish


# Default configurations for the two built-in study setups. The toy values
# are chosen so one round of heavy local training exposes the merge
# quality; the classification values keep a 5-seed sweep under a minute.

def default_toy_config(overlap: str, algo: str = "fedfish", seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig(
        dataset=DatasetConfig("toy_regression",
                              {"overlap": overlap, "n_per_client": 128, "noise_sd": 0.1}),
        model=ModelSpec((1, 32, 32, 1), activation="relu", head="regression_mse"),
        rounds=1,
        clients_per_round=2,
        # relu plus small minibatches keeps per-client Fisher masks sharp on
        # the split supports; lr_global 0.5 limits cross-client interference.
        # Mid-descent training length: client readout weights diverge more
        # the closer each client gets to convergence, eroding any merge.
        local=LocalTrainConfig(epochs=100, batch_size=2, lr_local=0.005),
        agg=AggregatorConfig(algo=algo, lr_global=0.5, fisher_eps=0.0, server_opt="sgd"),
        eval_every=1,
        personalize_fractions=(),
        personalize_epochs=1,
        csb_metric="loss",
        seed=seed,
    )


DIRICHLET_EPOCH_BUDGET = 48


def default_dirichlet_config(local_epochs: int, algo: str = "fedfish",
                             seed: int = 0) -> ExperimentConfig:
    # Fixed total compute: rounds shrink as local epochs grow, so sweeping
    # local_epochs compares equal amounts of client-side training.
    rounds = fixed_compute_rounds(DIRICHLET_EPOCH_BUDGET, local_epochs)
    return ExperimentConfig(
        dataset=DatasetConfig("dirichlet_classification",
                              {"num_clients": 20, "num_classes": 10, "alpha": 0.05,
                               "examples_per_client": 100, "input_dim": 16}),
        model=ModelSpec((16, 32, 10), activation="relu", head="classification_softmax_ce"),
        rounds=rounds,
        clients_per_round=10,
        local=LocalTrainConfig(epochs=local_epochs, batch_size=10, lr_local=0.05),
        agg=AggregatorConfig(algo=algo, lr_global=1.0, fisher_eps=0.0, server_opt="sgd"),
        eval_every=rounds,
        personalize_fractions=(),
        personalize_epochs=1,
        csb_metric="loss",
        seed=seed,
    )


# JSON-facing config conversion. Dict keys are exactly the field names
# above; unknown keys are rejected by name so typos in files or overrides
# surface as config errors.

def _check_keys(obj: dict, allowed: tuple[str, ...], context: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ValueError(f"unknown config key {context}{key!r}")


def config_from_dict(obj: dict) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ValueError("config must be a JSON object")
    _check_keys(obj, ("dataset", "model", "rounds", "clients_per_round", "local",
                      "agg", "eval_every", "personalize_fractions",
                      "personalize_epochs", "csb_metric", "seed"), "")
    for section in ("dataset", "model", "rounds", "clients_per_round", "local", "agg"):
        if section not in obj:
            raise ValueError(f"config missing required key {section!r}")

    ds = obj["dataset"]
    _check_keys(ds, ("name", "params"), "dataset.")
    dataset = DatasetConfig(ds.get("name", ""), dict(ds.get("params", {})))

    md = obj["model"]
    _check_keys(md, ("layer_sizes", "activation", "head"), "model.")
    model = ModelSpec(tuple(md["layer_sizes"]), md.get("activation", "tanh"),
                      md.get("head", "regression_mse"))

    lc = obj["local"]
    _check_keys(lc, ("epochs", "batch_size", "lr_local", "fisher_mode",
                     "fisher_normalize", "shuffle_each_epoch"), "local.")
    local = LocalTrainConfig(
        epochs=int(lc["epochs"]), batch_size=int(lc["batch_size"]),
        lr_local=float(lc["lr_local"]), fisher_mode=lc.get("fisher_mode", "extra_pass"),
        fisher_normalize=lc.get("fisher_normalize", "sum"),
        shuffle_each_epoch=bool(lc.get("shuffle_each_epoch", True)))

    ag = obj["agg"]
    _check_keys(ag, ("algo", "lr_global", "fisher_eps", "server_opt"), "agg.")
    agg = AggregatorConfig(
        algo=ag.get("algo", ""), lr_global=float(ag["lr_global"]),
        fisher_eps=float(ag.get("fisher_eps", 0.0)),
        server_opt=ag.get("server_opt", "sgd"))

    return ExperimentConfig(
        dataset=dataset, model=model, rounds=int(obj["rounds"]),
        clients_per_round=int(obj["clients_per_round"]), local=local, agg=agg,
        eval_every=int(obj.get("eval_every", 1)),
        personalize_fractions=tuple(obj.get("personalize_fractions", ())),
        personalize_epochs=int(obj.get("personalize_epochs", 1)),
        csb_metric=obj.get("csb_metric", "loss"), seed=int(obj.get("seed", 0)))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "dataset": {"name": cfg.dataset.name, "params": dict(cfg.dataset.params)},
        "model": {"layer_sizes": list(cfg.model.layer_sizes),
                  "activation": cfg.model.activation, "head": cfg.model.head},
        "rounds": cfg.rounds,
        "clients_per_round": cfg.clients_per_round,
        "local": {"epochs": cfg.local.epochs, "batch_size": cfg.local.batch_size,
                  "lr_local": cfg.local.lr_local, "fisher_mode": cfg.local.fisher_mode,
                  "fisher_normalize": cfg.local.fisher_normalize,
                  "shuffle_each_epoch": cfg.local.shuffle_each_epoch},
        "agg": {"algo": cfg.agg.algo, "lr_global": cfg.agg.lr_global,
                "fisher_eps": cfg.agg.fisher_eps, "server_opt": cfg.agg.server_opt},
        "eval_every": cfg.eval_every,
        "personalize_fractions": list(cfg.personalize_fractions),
        "personalize_epochs": cfg.personalize_epochs,
        "csb_metric": cfg.csb_metric,
        "seed": cfg.seed,
    }
