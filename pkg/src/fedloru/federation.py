"""Federated protocol simulation for full-rank and low-rank update algorithms.

One round of every algorithm follows the same skeleton:

1. the server samples ``M`` clients and sends them its current shared state
   (full weights for FedAvg / pFedLoRA, the pair ``(A, B)`` otherwise);
2. each sampled client trains locally on its shard;
3. the server averages the uploads with shard-size weights renormalised over
   the sampled subset, reducing in ascending client-id order;
4. for accumulating algorithms, every ``tau`` rounds all clients fold
   ``alpha A B`` into their local base and the pair is re-initialised.

Every parameter that crosses the simulated network is counted in the
round's :class:`CommRecord`.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .errors import RankError, ShapeError
from .lowrank import (
    LowRankPair,
    comm_cost_full,
    comm_cost_lowrank,
    comm_cost_nested,
    init_momentum,
    init_nested,
    init_random,
    recover_nested,
)
from .model import CosineSchedule, accuracy, cross_entropy, train_epochs
from .seeding import derive_seed, make_rng

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedlora", "fedloru", "pfedloru", "mfedloru", "pfedlora1", "pfedlora2")
LOWRANK_ALGORITHMS = ("fedlora", "fedloru", "pfedloru", "mfedloru")
PERSONALIZED = ("pfedloru", "pfedlora1", "pfedlora2")


@dataclass(frozen=True)
class RoundConfig:
    sampling_rate: float = 0.5
    local_epochs: int = 5
    e_per: int = 1
    e_global: int = 4
    batch_size: int = 32
    lr: float = 0.05
    lr_min: float = 0.0
    momentum: float = 0.9
    cycle: int = 50
    nested_alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ValueError("sampling_rate must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if min(self.local_epochs, self.e_per, self.e_global) < 0:
            raise ValueError("epoch counts must be non-negative")

    def selected_count(self, k):
        return max(1, int(math.floor(self.sampling_rate * k + 0.5)))

    def schedule(self):
        return CosineSchedule(self.lr, self.lr_min, self.cycle)


@dataclass(frozen=True)
class ClientState:
    """One client's persistent state.

    ``model`` holds the client's local base weights and biases, its most
    recent copy of the shared pair and, for personalised algorithms, its
    personal pair ``(L, U)``.
    """

    id: int
    model: object
    train_idx: np.ndarray
    test_idx: np.ndarray
    nested_ranks: tuple | None = None

    @property
    def n_train(self):
        return len(self.train_idx)


@dataclass(frozen=True)
class ServerState:
    """Server view: shared model, round counter and accumulation schedule.

    For low-rank algorithms ``model`` carries the accumulated base plus the
    current global pair ``(A_t, B_t)``; for full-rank algorithms its bases are
    the global weights. ``tau=None`` disables accumulation.
    """

    algorithm: str
    model: object
    round: int = 0
    tau: int | None = None
    total_rounds: int = 1
    reinit: str = "random"
    accumulated: tuple = ()

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.tau is not None and self.tau < 1:
            raise ValueError("accumulation cycle must be positive")
        if self.reinit not in ("random", "momentum"):
            raise ValueError("reinit must be 'random' or 'momentum'")

    def accumulates_at(self, t):
        return self.tau is not None and t % self.tau == 0


@dataclass(frozen=True)
class FederatedData:
    train: Dataset
    test: Dataset


@dataclass
class ClientComm:
    client: int
    downlink: int
    uplink: int


@dataclass
class CommRecord:
    round: int
    downlink_params: int = 0
    uplink_params: int = 0
    per_client: list = field(default_factory=list)
    broadcast_params: int = 0

    def add(self, client, down, up):
        self.per_client.append(ClientComm(client, down, up))
        self.downlink_params += down
        self.uplink_params += up


@dataclass
class MetricsRecord:
    round: int
    train_loss: float
    test_acc: float
    uplink_params: int
    downlink_params: int
    local_loss: float = float("nan")
    personalized_acc: float | None = None
    client_global_acc: float | None = None
    selected: tuple = ()
    skipped: tuple = ()
    lr: float = float("nan")
    accumulated: bool = False
    comm: CommRecord | None = None

    def as_dict(self):
        out = {
            "round": self.round,
            "train_loss": self.train_loss,
            "test_acc": self.test_acc,
            "uplink_params": self.uplink_params,
            "downlink_params": self.downlink_params,
            "local_loss": self.local_loss,
            "lr": self.lr,
            "accumulated": self.accumulated,
            "selected": list(self.selected),
            "skipped": list(self.skipped),
        }
        if self.personalized_acc is not None:
            out["personalized_acc"] = self.personalized_acc
            out["client_global_acc"] = self.client_global_acc
        if self.comm is not None:
            out["per_client"] = [[c.client, c.downlink, c.uplink] for c in self.comm.per_client]
            out["broadcast_params"] = self.comm.broadcast_params
        return out


# -- primitives -------------------------------------------------------------------

def sample_clients(k, sampling_rate, round_idx, seed):
    """Uniform sample of ``M = max(1, round(rate K))`` ids without replacement.

    A Fisher-Yates shuffle of ``0..K-1`` driven by a generator derived from
    ``(seed, round)``; the first ``M`` ids are returned in ascending order.
    """
    if k < 1:
        raise ValueError("need at least one client")
    m = max(1, int(math.floor(sampling_rate * k + 0.5)))
    ids = list(range(k))
    if m == k:
        return ids
    rng = make_rng(seed, "sample-clients", round_idx)
    draws = rng.random(k)
    for i in range(k - 1, 0, -1):
        j = int(draws[i] * (i + 1))
        ids[i], ids[j] = ids[j], ids[i]
    return sorted(ids[:m])


def normalized_weights(sizes):
    sizes = np.asarray(sizes, dtype=np.float64)
    total = sizes.sum()
    if total <= 0:
        raise ValueError("weights must have a positive sum")
    return sizes / total


def weighted_mean(arrays, weights):
    """``sum_k w_k X_k`` with ``sum w = 1``, written as offsets from the first array.

    The offset form returns the common value exactly when all inputs agree.
    """
    if len(arrays) != len(weights) or not arrays:
        raise ShapeError("need one weight per array")
    ref = np.asarray(arrays[0], dtype=np.float64)
    out = ref.copy()
    for w, x in zip(weights[1:], arrays[1:]):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != ref.shape:
            raise ShapeError(f"cannot average shapes {ref.shape} and {x.shape}")
        out += w * (x - ref)
    return out


def aggregate(pairs, weights):
    """Entrywise weighted mean of the A factors and of the B factors."""
    if not pairs:
        raise ValueError("nothing to aggregate")
    shape = (pairs[0].a.shape, pairs[0].b.shape)
    for p in pairs[1:]:
        if (p.a.shape, p.b.shape) != shape:
            raise ShapeError("pairs differ in shape")
    w = np.asarray(weights, dtype=np.float64)
    if not math.isclose(float(w.sum()), 1.0, rel_tol=0, abs_tol=1e-12):
        w = w / w.sum()
    a = weighted_mean([p.a for p in pairs], w)
    b = weighted_mean([p.b for p in pairs], w)
    return LowRankPair(a, b, pairs[0].alpha)


def ratio_metric(acc_fedavg, acc_fedloru, denominator="fedavg"):
    """Relative accuracy difference ``(loru - avg) / ref``.

    ``denominator="fedavg"`` (default) divides by the FedAvg accuracy;
    ``"fedloru"`` divides by the FedLoRU accuracy instead.
    """
    if denominator not in ("fedavg", "fedloru"):
        raise ValueError("denominator must be 'fedavg' or 'fedloru'")
    ref = acc_fedavg if denominator == "fedavg" else acc_fedloru
    if ref == 0:
        raise ZeroDivisionError(f"{denominator} accuracy must be nonzero")
    return (acc_fedloru - acc_fedavg) / ref


# -- cost helpers -------------------------------------------------------------------

def _bias_cost(model):
    return sum(l.bias.shape[0] for l in model.layers)


def full_model_cost(model):
    return sum(comm_cost_full(*l.shape) for l in model.layers) + _bias_cost(model)


def lowrank_cost(model):
    """Pair plus biases, as sent in either direction by FedLoRU-style clients."""
    return sum(comm_cost_lowrank(*l.shape, l.update.rank) for l in model.layers) + _bias_cost(model)


def pair_cost(model):
    return sum(comm_cost_lowrank(*l.shape, l.update.rank) for l in model.layers)


def nested_upload_cost(model, nested_ranks):
    total = _bias_cost(model)
    for layer, (ra, rb) in zip(model.layers, nested_ranks):
        total += comm_cost_nested(*layer.shape, layer.update.rank, ra, rb)
    return total


# -- local training helpers ---------------------------------------------------------

def _client_rng(seed, client, t, phase):
    return make_rng(seed, f"batches-{phase}", client, t)


def _train(model, data, client, selector, epochs, config, lr, t, phase):
    x = data.train.inputs[client.train_idx]
    y = data.train.labels[client.train_idx]
    return train_epochs(model, x, y, selector, epochs, config.batch_size, lr, config.momentum,
                        _client_rng(config.seed, client.id, t, phase))


def _with_shared_pairs(model, server_model):
    """Client model carrying the server's pairs and biases on its own bases."""
    return model.map_layers(lambda i, l: l.replace(update=server_model.layers[i].update,
                                                   bias=server_model.layers[i].bias, nested=None))


def _with_global_weights(model, server_model):
    return model.map_layers(lambda i, l: l.replace(base=server_model.layers[i].base,
                                                   bias=server_model.layers[i].bias))


def _fresh_pair(layer, reinit, seed, t, i):
    if reinit == "momentum":
        return init_momentum(layer.update)
    m, n = layer.shape
    return init_random(m, n, layer.update.rank, layer.update.alpha, seed=derive_seed(seed, "reinit", t, i))


def _accumulate_everywhere(server, clients, config, t):
    """Fold the server's pair into every base (server and all K clients)."""
    pairs = tuple(l.update for l in server.model.layers)

    def fold(model):
        return model.map_layers(lambda i, l: l.replace(base=l.base + pairs[i].alpha * (pairs[i].a @ pairs[i].b)))

    new_server_model = fold(server.model).map_layers(
        lambda i, l: l.replace(update=_fresh_pair(server.model.layers[i], server.reinit, config.seed, t, i)))
    new_clients = [replace(c, model=fold(c.model)) for c in clients]
    server = replace(server, model=new_server_model, accumulated=server.accumulated + ((t, pairs),))
    return server, new_clients


def _personal_eval(clients, data, build):
    """Mean personalised and shared-model accuracy on client test slices."""
    per, glob = [], []
    for c in clients:
        if len(c.test_idx) == 0:
            continue
        x, y = data.train.inputs[c.test_idx], data.train.labels[c.test_idx]
        personal_model, global_model = build(c)
        per.append(accuracy(personal_model, x, y))
        glob.append(accuracy(global_model, x, y))
    if not per:
        return float("nan"), float("nan")
    return float(np.mean(per)), float(np.mean(glob))


def _train_indices(clients):
    return np.concatenate([c.train_idx for c in clients]) if clients else np.array([], dtype=np.int64)


def _metrics(server, clients, data, t, comm, local_losses, weights, selected, skipped, lr, accumulated,
             personal=None):
    idx = _train_indices(clients)
    train_loss = cross_entropy(server.model, data.train.inputs[idx], data.train.labels[idx]) if len(idx) else float("nan")
    test_acc = accuracy(server.model, data.test.inputs, data.test.labels)
    finite = [(w, l) for w, l in zip(weights, local_losses) if math.isfinite(l)]
    local = float(sum(w * l for w, l in finite) / sum(w for w, _ in finite)) if finite else float("nan")
    rec = MetricsRecord(
        round=t, train_loss=train_loss, test_acc=test_acc,
        uplink_params=comm.uplink_params, downlink_params=comm.downlink_params,
        local_loss=local, selected=tuple(selected), skipped=tuple(skipped), lr=lr,
        accumulated=accumulated, comm=comm,
    )
    if personal is not None:
        rec.personalized_acc, rec.client_global_acc = personal
    return rec


def _select(server, clients, config, t):
    ids = sample_clients(len(clients), config.sampling_rate, t, config.seed)
    chosen, skipped = [], []
    for i in ids:
        if clients[i].n_train == 0:
            log.warning("round %d: client %d has an empty shard; skipped", t, i)
            skipped.append(i)
        else:
            chosen.append(i)
    return ids, chosen, skipped


def _finish_lowrank(server, clients, config, t, uploads, weights, comm):
    """Aggregate pair uploads, install them on the server, accumulate if due."""
    if uploads:
        n_layers = len(server.model.layers)
        new_pairs = [aggregate([u[0][i] for u in uploads], weights) for i in range(n_layers)]
        new_bias = [weighted_mean([u[1][i] for u in uploads], weights) for i in range(n_layers)]
        server = replace(server, model=server.model.map_layers(
            lambda i, l: l.replace(update=new_pairs[i], bias=new_bias[i])))
    server = replace(server, round=t)
    accumulated = server.accumulates_at(t)
    if accumulated:
        broadcast = pair_cost(server.model)
        comm.broadcast_params = broadcast * len(clients)
        comm.downlink_params += comm.broadcast_params
        server, clients = _accumulate_everywhere(server, clients, config, t)
    return server, clients, accumulated


# -- rounds -----------------------------------------------------------------------

def run_round(server, clients, data, config, map_fn=map):
    """One FedAvg, FedLoRA or FedLoRU round. Returns ``(server, clients, record)``."""
    if server.algorithm == "fedavg":
        return _run_fedavg_round(server, clients, data, config, map_fn)
    if server.algorithm not in ("fedlora", "fedloru"):
        raise ValueError(f"run_round does not handle {server.algorithm!r}")
    t = server.round + 1
    lr = config.schedule()(t - 1)
    ids, chosen, skipped = _select(server, clients, config, t)
    comm = CommRecord(t)

    def local(i):
        c = clients[i]
        model = _with_shared_pairs(c.model, server.model)
        model, loss = _train(model, data, c, "lowrank", config.local_epochs, config, lr, t, "lowrank")
        return model, loss

    results = list(map_fn(local, chosen))
    clients = list(clients)
    uploads, losses = [], []
    for i, (model, loss) in zip(chosen, results):
        clients[i] = replace(clients[i], model=model)
        uploads.append(([l.update for l in model.layers], [l.bias for l in model.layers]))
        losses.append(loss)
        comm.add(i, lowrank_cost(server.model), lowrank_cost(model))
    weights = normalized_weights([clients[i].n_train for i in chosen]) if chosen else []
    server, clients, accumulated = _finish_lowrank(server, clients, config, t, uploads, weights, comm)
    rec = _metrics(server, clients, data, t, comm, losses, weights, ids, skipped, lr, accumulated)
    return server, clients, rec


def _run_fedavg_round(server, clients, data, config, map_fn):
    t = server.round + 1
    lr = config.schedule()(t - 1)
    ids, chosen, skipped = _select(server, clients, config, t)
    comm = CommRecord(t)

    def local(i):
        c = clients[i]
        model = _with_global_weights(c.model, server.model)
        return _train(model, data, c, "full", config.local_epochs, config, lr, t, "full")

    results = list(map_fn(local, chosen))
    clients = list(clients)
    losses = []
    for i, (model, loss) in zip(chosen, results):
        clients[i] = replace(clients[i], model=model)
        losses.append(loss)
        comm.add(i, full_model_cost(server.model), full_model_cost(model))
    weights = normalized_weights([clients[i].n_train for i in chosen]) if chosen else []
    if chosen:
        server = replace(server, model=_average_full(server.model, [r[0] for r in results], weights))
    server = replace(server, round=t)
    rec = _metrics(server, clients, data, t, comm, losses, weights, ids, skipped, lr, False)
    return server, clients, rec


def _average_full(server_model, models, weights):
    return server_model.map_layers(lambda i, l: l.replace(
        base=weighted_mean([m.layers[i].base for m in models], weights),
        bias=weighted_mean([m.layers[i].bias for m in models], weights)))


def run_pfedloru_round(server, clients, data, config, map_fn=map):
    """Personal pair for ``e_per`` epochs, then the shared pair for ``e_global``; upload (A, B)."""
    t = server.round + 1
    lr = config.schedule()(t - 1)
    ids, chosen, skipped = _select(server, clients, config, t)
    comm = CommRecord(t)

    def local(i):
        c = clients[i]
        model = _with_shared_pairs(c.model, server.model)
        model, loss_p = _train(model, data, c, "personal", config.e_per, config, lr, t, "personal")
        model, loss_g = _train(model, data, c, "lowrank", config.e_global, config, lr, t, "lowrank")
        return model, loss_g if math.isfinite(loss_g) else loss_p

    results = list(map_fn(local, chosen))
    clients = list(clients)
    uploads, losses = [], []
    for i, (model, loss) in zip(chosen, results):
        clients[i] = replace(clients[i], model=model)
        uploads.append(([l.update for l in model.layers], [l.bias for l in model.layers]))
        losses.append(loss)
        comm.add(i, lowrank_cost(server.model), lowrank_cost(model))
    weights = normalized_weights([clients[i].n_train for i in chosen]) if chosen else []
    server, clients, accumulated = _finish_lowrank(server, clients, config, t, uploads, weights, comm)

    def build(c):
        shared = _with_shared_pairs(c.model, server.model)
        no_personal = shared.map_layers(lambda i, l: l.replace(personal=None))
        return shared, no_personal

    personal = _personal_eval(clients, data, build)
    rec = _metrics(server, clients, data, t, comm, losses, weights, ids, skipped, lr, accumulated, personal)
    return server, clients, rec


def run_mfedloru_round(server, clients, data, config, map_fn=map):
    """Nested clients train (A_d, A_u, B_d, B_u) and upload only those.

    Clients with ``nested_ranks=None`` train the rank-r pair as in FedLoRU.
    The server recovers every nested upload against the pair it distributed
    and averages the recovered rank-r pairs.
    """
    t = server.round + 1
    lr = config.schedule()(t - 1)
    ids, chosen, skipped = _select(server, clients, config, t)
    comm = CommRecord(t)
    for i in chosen:
        nr = clients[i].nested_ranks
        if nr is None:
            continue
        for layer, (ra, rb) in zip(server.model.layers, nr):
            if ra >= layer.update.rank or rb >= layer.update.rank:
                raise RankError(f"client {i}: nested ranks ({ra}, {rb}) not below rank {layer.update.rank}")

    def local(i):
        c = clients[i]
        model = _with_shared_pairs(c.model, server.model)
        if c.nested_ranks is None:
            model, loss = _train(model, data, c, "lowrank", config.local_epochs, config, lr, t, "lowrank")
            return model, loss, None
        model = model.map_layers(lambda j, l: l.replace(nested=init_nested(
            l.update, c.nested_ranks[j][0], c.nested_ranks[j][1],
            alpha_a=config.nested_alpha, alpha_b=config.nested_alpha,
            seed=derive_seed(config.seed, "nested-init", c.id, t, j))))
        model, loss = _train(model, data, c, "nested", config.local_epochs, config, lr, t, "nested")
        return model, loss, [l.nested for l in model.layers]

    results = list(map_fn(local, chosen))
    clients = list(clients)
    uploads, losses = [], []
    for i, (model, loss, nested) in zip(chosen, results):
        losses.append(loss)
        biases = [l.bias for l in model.layers]
        if nested is None:
            pairs = [l.update for l in model.layers]
            up = lowrank_cost(model)
        else:
            # server-side recovery against the distributed pair
            pairs = [recover_nested(server.model.layers[j].update, n) for j, n in enumerate(nested)]
            up = nested_upload_cost(server.model, clients[i].nested_ranks)
        clients[i] = replace(clients[i], model=model.map_layers(
            lambda j, l: l.replace(update=pairs[j], nested=None)))
        uploads.append((pairs, biases))
        comm.add(i, lowrank_cost(server.model), up)
    weights = normalized_weights([clients[i].n_train for i in chosen]) if chosen else []
    server, clients, accumulated = _finish_lowrank(server, clients, config, t, uploads, weights, comm)
    rec = _metrics(server, clients, data, t, comm, losses, weights, ids, skipped, lr, accumulated)
    return server, clients, rec


def run_pfedlora_round(variant, server, clients, data, config, map_fn=map):
    """Full-rank shared model with personal (L, U); the full model is uploaded.

    Variant 1 trains (L, U) for ``e_per`` epochs and then W for ``e_global``;
    variant 2 trains W, L and U jointly for ``e_per + e_global`` epochs.
    """
    if variant not in (1, 2):
        raise ValueError("variant must be 1 or 2")
    t = server.round + 1
    lr = config.schedule()(t - 1)
    ids, chosen, skipped = _select(server, clients, config, t)
    comm = CommRecord(t)

    def local(i):
        c = clients[i]
        model = _with_global_weights(c.model, server.model)
        if variant == 1:
            model, loss_p = _train(model, data, c, "personal", config.e_per, config, lr, t, "personal")
            model, loss = _train(model, data, c, "full", config.e_global, config, lr, t, "global")
            if not math.isfinite(loss):
                loss = loss_p
        else:
            model, loss = _train(model, data, c, ("full", "personal"), config.e_per + config.e_global,
                                 config, lr, t, "joint")
        return model, loss

    results = list(map_fn(local, chosen))
    clients = list(clients)
    losses = []
    for i, (model, loss) in zip(chosen, results):
        clients[i] = replace(clients[i], model=model)
        losses.append(loss)
        comm.add(i, full_model_cost(server.model), full_model_cost(model))
    weights = normalized_weights([clients[i].n_train for i in chosen]) if chosen else []
    if chosen:
        server = replace(server, model=_average_full(server.model, [r[0] for r in results], weights))
    server = replace(server, round=t)

    def build(c):
        personal_model = _with_global_weights(c.model, server.model)
        return personal_model, server.model

    personal = _personal_eval(clients, data, build)
    rec = _metrics(server, clients, data, t, comm, losses, weights, ids, skipped, lr, False, personal)
    return server, clients, rec


def step(server, clients, data, config, map_fn=map):
    """Dispatch one round according to ``server.algorithm``."""
    alg = server.algorithm
    if alg in ("fedavg", "fedlora", "fedloru"):
        return run_round(server, clients, data, config, map_fn)
    if alg == "pfedloru":
        return run_pfedloru_round(server, clients, data, config, map_fn)
    if alg == "mfedloru":
        return run_mfedloru_round(server, clients, data, config, map_fn)
    return run_pfedlora_round(1 if alg == "pfedlora1" else 2, server, clients, data, config, map_fn)


def final_model(server):
    """Model the run returns: accumulated base plus any not-yet-folded pair."""
    return server.model


def homogeneous_bases(clients):
    """True when every client holds bitwise-identical base weights."""
    ref = clients[0].model
    return all(
        all(np.array_equal(a.base, b.base) for a, b in zip(ref.layers, c.model.layers))
        for c in clients[1:]
    )
