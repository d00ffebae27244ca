"""Experiment configuration, setup and the round loop."""

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import (
    dirichlet_partition,
    generate_synthetic,
    iid_partition,
    read_csv,
    split_shard,
    train_test_split,
)
from .errors import ConfigError
from .federation import (
    ALGORITHMS,
    LOWRANK_ALGORITHMS,
    ClientState,
    FederatedData,
    RoundConfig,
    ServerState,
    step,
)
from .lowrank import DEFAULT_ALPHA
from .model import logistic_model, mlp_model, with_updates
from .seeding import derive_seed, make_rng

SCHEMA_VERSION = 1


@dataclass
class TrainConfig:
    """Everything needed to reproduce one federated run.

    ``tau=None`` disables accumulation; FedLoRA forces it. ``rank`` is either a
    single rank for all layers or one per layer. Dataset keys select either a
    synthetic cluster problem or a CSV file (``data_path``).
    """

    algorithm: str = "fedloru"
    clients: int = 20
    sampling_rate: float = 0.5
    rounds: int = 100
    tau: int | None = 10
    local_epochs: int = 5
    e_per: int = 1
    e_global: int = 4
    batch_size: int = 32
    lr: float = 0.05
    lr_min: float = 0.0
    momentum: float = 0.9
    cycle: int | None = None
    rank: int | list = 4
    personal_rank: int | list = 2
    alpha: float = DEFAULT_ALPHA
    alpha_personal: float = DEFAULT_ALPHA
    alpha_nested: float = 1.0
    init_scale: float | None = None
    reinit: str = "random"
    nested_fraction: float = 0.5
    nested_rank_a: int | None = None
    nested_rank_b: int | None = None
    client_nested_ranks: list | None = None
    model: str = "logistic"
    hidden: int = 32
    data_path: str | None = None
    n_samples: int = 2000
    n_features: int = 20
    n_classes: int = 5
    cluster_spread: float = 0.5
    partition: str = "iid"
    dirichlet_alpha: float = 0.5
    seed: int = 0
    label: str | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {', '.join(ALGORITHMS)}")
        if self.clients < 1:
            raise ConfigError("clients must be positive")
        if self.rounds < 0:
            raise ConfigError("rounds must be non-negative")
        if self.model not in ("logistic", "mlp"):
            raise ConfigError("model must be 'logistic' or 'mlp'")
        if self.partition not in ("iid", "dirichlet"):
            raise ConfigError("partition must be 'iid' or 'dirichlet'")
        if self.reinit not in ("random", "momentum"):
            raise ConfigError("reinit must be 'random' or 'momentum'")
        if self.tau is not None and self.tau < 1:
            raise ConfigError("tau must be positive or null")
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ConfigError("sampling_rate must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)

    def dump(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def effective_tau(self):
        if self.algorithm in ("fedlora", "fedavg", "pfedlora1", "pfedlora2"):
            return None
        return self.tau

    def round_config(self):
        return RoundConfig(
            sampling_rate=self.sampling_rate, local_epochs=self.local_epochs, e_per=self.e_per,
            e_global=self.e_global, batch_size=self.batch_size, lr=self.lr, lr_min=self.lr_min,
            momentum=self.momentum, cycle=self.cycle or max(self.rounds, 1),
            nested_alpha=self.alpha_nested, seed=self.seed,
        )


@dataclass
class Experiment:
    config: TrainConfig
    server: ServerState
    clients: list
    data: FederatedData
    round_config: RoundConfig
    history: list = field(default_factory=list)


def load_dataset(config):
    if config.data_path:
        return read_csv(config.data_path)
    return generate_synthetic(config.n_samples, config.n_features, config.n_classes,
                              config.cluster_spread, derive_seed(config.seed, "data"))


def initial_model(config, d_x, n_classes):
    if config.model == "logistic":
        return logistic_model(d_x, n_classes)
    return mlp_model(d_x, config.hidden, n_classes, make_rng(config.seed, "model-init"))


def _nested_assignment(config, model):
    """Per-client nested ranks (or None) for mFedLoRU."""
    k = config.clients
    if config.client_nested_ranks is not None:
        if len(config.client_nested_ranks) != k:
            raise ConfigError(f"client_nested_ranks needs {k} entries")
        return [None if r is None else tuple((int(r[0]), int(r[1])) for _ in model.layers)
                for r in config.client_nested_ranks]
    n_nested = int(math.floor(config.nested_fraction * k + 0.5))
    chosen = set(make_rng(config.seed, "nested-clients").permutation(k)[:n_nested].tolist())
    out = []
    for cid in range(k):
        if cid not in chosen:
            out.append(None)
            continue
        ranks = []
        for layer in model.layers:
            r = layer.update.rank
            ra = config.nested_rank_a if config.nested_rank_a is not None else max(1, r // 2)
            rb = config.nested_rank_b if config.nested_rank_b is not None else max(1, r // 2)
            ranks.append((ra, rb))
        out.append(tuple(ranks))
    return out


def build_experiment(config, dataset=None, partition=None):
    """Data split, partition, initial shared model and per-client states."""
    dataset = dataset if dataset is not None else load_dataset(config)
    train, test = train_test_split(dataset)
    if partition is None:
        if config.partition == "iid":
            partition = iid_partition(len(train), config.clients, derive_seed(config.seed, "partition"))
        else:
            partition = dirichlet_partition(train.labels, config.clients, config.dirichlet_alpha,
                                            derive_seed(config.seed, "partition"))
    if len(partition) != config.clients:
        raise ConfigError(f"partition has {len(partition)} shards for {config.clients} clients")
    partition.validate(len(train))

    model = initial_model(config, train.n_features, train.n_classes)
    if config.algorithm in LOWRANK_ALGORITHMS:
        model = with_updates(model, config.rank, config.alpha, derive_seed(config.seed, "pair-init"),
                             config.init_scale)
    server = ServerState(config.algorithm, model, tau=config.effective_tau(),
                         total_rounds=config.rounds, reinit=config.reinit)

    nested = _nested_assignment(config, model) if config.algorithm == "mfedloru" else [None] * config.clients
    clients = []
    for cid, shard in enumerate(partition.shards):
        cm = model
        if config.algorithm in ("pfedloru", "pfedlora1", "pfedlora2"):
            cm = with_updates(model, config.personal_rank, config.alpha_personal,
                              derive_seed(config.seed, "personal-init", cid), config.init_scale, kind="personal")
        tr, te = split_shard(shard)
        clients.append(ClientState(cid, cm, tr, te, nested[cid]))
    return Experiment(config, server, clients, FederatedData(train, test), config.round_config())


def run_rounds(exp, rounds=None, map_fn=map, callback=None):
    """Advance ``exp`` by ``rounds`` rounds (default: the configured total)."""
    rounds = exp.config.rounds - exp.server.round if rounds is None else rounds
    for _ in range(rounds):
        exp.server, exp.clients, rec = step(exp.server, exp.clients, exp.data, exp.round_config, map_fn)
        exp.history.append(rec)
        if callback is not None:
            callback(rec)
    return exp


def simulate(config, map_fn=map, dataset=None, partition=None, callback=None):
    return run_rounds(build_experiment(config, dataset, partition), map_fn=map_fn, callback=callback)


# -- metrics files -----------------------------------------------------------------

def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating, np.integer)):
        return _clean(v.item())
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def metrics_header(config):
    return {"schema_version": SCHEMA_VERSION, "config": config.to_dict()}


def write_metrics(path, config, records):
    with open(path, "w") as f:
        f.write(json.dumps(metrics_header(config), sort_keys=True) + "\n")
        for rec in records:
            d = {k: _clean(v) for k, v in rec.as_dict().items()}
            f.write(json.dumps(d, sort_keys=True) + "\n")


def read_metrics(path):
    """Return ``(config, records)``; raises ``ConfigError`` on a bad header."""
    with open(path) as f:
        lines = [(i, l) for i, l in enumerate(f.read().splitlines(), start=1) if l.strip()]
    if not lines:
        raise ConfigError(f"{path}: empty metrics file")
    parsed = []
    for i, line in lines:
        try:
            parsed.append(json.loads(line))
        except json.JSONDecodeError:
            raise ConfigError(f"{path}:{i}: malformed JSON") from None
        if not isinstance(parsed[-1], dict):
            raise ConfigError(f"{path}:{i}: expected an object")
    header = parsed[0]
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}:1: unsupported schema version {header.get('schema_version')!r}")
    return TrainConfig.from_dict(header["config"]), parsed[1:]
