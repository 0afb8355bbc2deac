"""Server and client state machines for one federated training run.

Round structure::

    server_init        w_1 from the global seed
    run_round          broadcast w_t, ClientUpdate on every client, mean of the replies
    client_update      phase A: E0 epochs of classification-only updates
                       phase B: E1 epochs of (c5) F/C step, (c6) noise draw,
                                (c7) discriminator step, (c8) generator step

Only ``w_f``, ``w_c`` and ``w_g`` segments ever cross the client/server
boundary; every message is serialised to bytes and checked against that
whitelist in both directions. Discriminator weights and the projection matrix
stay on the client.

Random streams are derived from the run seed with fixed keys so that a run
can be replayed exactly:

=====================  ==============================
global initialisation  ``default_rng([seed, 1])``
projection matrix      ``default_rng([seed, 2])``
evaluation noise       ``default_rng([seed, 3, round])``
client shuffling       ``default_rng([seed, 11, client_id])``
client noise           ``default_rng([seed, 12, client_id])``
client discriminator   ``default_rng([seed, 13, client_id])``
=====================  ==============================
"""

from __future__ import annotations

import time
from collections import deque
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .config import ExperimentConfig
from .domains import DomainDataset, batches
from .networks import (Classifier, Discriminator, DistributionGenerator, FeatureExtractor,
                       ParameterVector, decode_parameters, encode_parameters, make_projection,
                       sample_noise)
from .tensor import NonFiniteError, Tensor, no_grad

ALLOWED_PREFIXES = ("w_f", "w_c", "w_g")
_ALLOWED_HEADER_KEYS = {"direction", "round", "format_version", "segments"}
DIRECTIONS = ("server_to_client", "client_to_server")


class ProtocolViolation(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class AggregationError(RuntimeError):
    pass


def global_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


# ---------------------------------------------------------------- messages

def _check_whitelist(names: Sequence[str]) -> None:
    for name in names:
        if name.split(".")[0] not in ALLOWED_PREFIXES:
            raise ProtocolViolation(f"segment {name!r} may not leave its owner")


@dataclass(frozen=True)
class RoundMessage:
    direction: str
    round: int
    payload: bytes

    @classmethod
    def pack(cls, direction: str, round_: int, pv: ParameterVector) -> RoundMessage:
        if direction not in DIRECTIONS:
            raise ValueError(f"bad direction {direction!r}")
        _check_whitelist(pv.names)
        return cls(direction, round_, encode_parameters(pv, direction=direction, round=round_))

    def unpack(self) -> ParameterVector:
        head, pv = decode_parameters(self.payload)
        extra = set(head) - _ALLOWED_HEADER_KEYS
        if extra:
            raise ProtocolViolation(f"unexpected header fields {sorted(extra)}")
        if head["direction"] != self.direction or head["round"] != self.round:
            raise ProtocolViolation("message envelope does not match its payload header")
        _check_whitelist(pv.names)
        return pv


# ---------------------------------------------------------------- model construction

def build_models(cfg: ExperimentConfig, rng: np.random.Generator | None):
    """(F, C, G) for ``cfg``; G is None in fedavg mode. ``rng=None`` gives zero weights."""
    F = FeatureExtractor(cfg.input_dim, cfg.extractor_hidden, cfg.feature_dim, rng)
    C = Classifier(cfg.feature_dim, cfg.classifier_hidden, cfg.num_classes, rng)
    G = None
    if cfg.adversarial:
        G = DistributionGenerator(cfg.noise_dim, cfg.num_classes, cfg.feature_dim, rng,
                                  conditional=cfg.conditional)
    return F, C, G


def shared_projection(cfg: ExperimentConfig, seed: int) -> np.ndarray:
    if cfg.mode == "no_rp":
        return np.eye(cfg.feature_dim)
    return make_projection(global_rng(seed, 2), cfg.feature_dim, cfg.rp_dim)


def fixed_reference_sampler(cfg: ExperimentConfig) -> Callable[[np.ndarray, np.random.Generator], np.ndarray]:
    """Draws from the fixed reference distribution in feature space."""
    dim = cfg.feature_dim

    def draw(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = len(y)
        if cfg.reference == "gaussian":
            out = rng.standard_normal((n, dim))
        elif cfg.reference == "uniform":
            out = rng.uniform(-1.0, 1.0, (n, dim))
        elif cfg.reference == "laplace":
            out = rng.laplace(0.0, cfg.laplace_scale, (n, dim))
        else:
            raise ValueError(f"{cfg.reference!r} is not a fixed reference")
        if cfg.fixed_ref_class_offsets:
            out[np.arange(n), np.asarray(y) % dim] += 2.0
        return out

    return draw


def noise_batch_labels(rng: np.random.Generator, real_labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Labels for a generated batch: a shuffle of the real mini-batch labels."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    return rng.permutation(np.asarray(real_labels))


# ---------------------------------------------------------------- server

@dataclass
class ServerState:
    round: int
    w: ParameterVector
    roster: list[int]
    history: deque = field(default_factory=lambda: deque(maxlen=1000))
    weighted: bool = False


def server_init(cfg: ExperimentConfig, seed: int, num_clients: int | None = None) -> ServerState:
    k = cfg.num_sources if num_clients is None else num_clients
    if k < 2:
        raise ValueError(f"need at least 2 clients (source domains), got {k}")
    F, C, G = build_models(cfg, global_rng(seed, 1))
    w = F.flatten() + C.flatten()
    if G is not None:
        w = w + G.flatten()
    _check_whitelist(w.names)
    return ServerState(round=1, w=w, roster=list(range(k)),
                       history=deque(maxlen=cfg.history_limit),
                       weighted=cfg.weighted_aggregation)


def aggregate(replies: dict[int, ParameterVector], sizes: dict[int, int] | None = None) -> ParameterVector:
    """Mean of the client vectors, summed in ascending client-id order.

    Unweighted (divide by K) unless ``sizes`` is given, in which case each
    client is weighted by its sample count.
    """
    if not replies:
        raise AggregationError("no client replies to aggregate")
    ids = sorted(replies)
    ref = replies[ids[0]]
    for cid in ids[1:]:
        if replies[cid].layout != ref.layout:
            raise AggregationError(
                f"client {cid} returned layout {replies[cid].layout}, expected {ref.layout}")
    acc = np.zeros(len(ref))
    if sizes is None:
        for cid in ids:
            acc = acc + replies[cid].flat()
        acc = acc / len(ids)
    else:
        total = float(sum(sizes[cid] for cid in ids))
        for cid in ids:
            acc = acc + replies[cid].flat() * (sizes[cid] / total)
    return ref.with_flat(acc)


def run_round(server: ServerState, clients: Sequence[ClientState], *,
              executor: Executor | None = None,
              observer: Callable[[RoundMessage], None] | None = None) -> ServerState:
    """One synchronous round: every client trains on ``w_t``, then the server averages."""
    by_id = {c.client_id: c for c in clients}
    if sorted(by_id) != server.roster:
        raise ProtocolViolation(f"client ids {sorted(by_id)} do not match roster {server.roster}")
    for c in clients:
        if c.round != server.round:
            raise ProtocolViolation(f"client {c.client_id} is at round {c.round}, server at {server.round}")
    t = server.round
    start = time.perf_counter()
    down = RoundMessage.pack("server_to_client", t, server.w)
    if observer:
        observer(down)

    def work(client: ClientState) -> RoundMessage:
        received = down.unpack()
        trained = client_update(client, received)
        return RoundMessage.pack("client_to_server", t, trained)

    if executor is None:
        ups = {cid: work(by_id[cid]) for cid in server.roster}
    else:
        futures = {cid: executor.submit(work, by_id[cid]) for cid in server.roster}
        ups = {cid: futures[cid].result() for cid in server.roster}  # barrier

    replies = {}
    for cid in server.roster:
        if observer:
            observer(ups[cid])
        replies[cid] = ups[cid].unpack()
    sizes = {cid: by_id[cid].num_samples for cid in server.roster} if server.weighted else None
    w_next = aggregate(replies, sizes)

    record = {
        "round": t,
        "wall_time": time.perf_counter() - start,
        "clients": {str(cid): dict(by_id[cid].last_losses) for cid in server.roster},
    }
    history = deque(server.history, maxlen=server.history.maxlen)
    history.append(record)
    return ServerState(round=t + 1, w=w_next, roster=list(server.roster),
                       history=history, weighted=server.weighted)


# ---------------------------------------------------------------- client

StepHook = Callable[[str, "ClientState"], None]


@dataclass(eq=False)
class ClientState:
    client_id: int
    cfg: ExperimentConfig
    x: np.ndarray
    y: np.ndarray
    F: FeatureExtractor
    C: Classifier
    G: DistributionGenerator | None
    D: Discriminator | None
    shuffle_rng: np.random.Generator
    noise_rng: np.random.Generator
    reference: Callable | None = None   # fixed-reference sampler, None when adaptive
    round: int = 1
    epochs_done: int = 0
    last_losses: dict = field(default_factory=dict)
    step_hook: StepHook | None = None

    @property
    def num_samples(self) -> int:
        return len(self.y)

    def uploadable(self) -> ParameterVector:
        w = self.F.flatten() + self.C.flatten()
        if self.G is not None:
            w = w + self.G.flatten()
        return w

    def load(self, w: ParameterVector) -> None:
        self.F.unflatten(w.select(["w_f"]))
        self.C.unflatten(w.select(["w_c"]))
        if self.G is not None:
            self.G.unflatten(w.select(["w_g"]))
        elif w.select(["w_g"]).names:
            raise ProtocolViolation("received generator weights in a run without a generator")


def make_client(cfg: ExperimentConfig, client_id: int, dataset: DomainDataset, seed: int,
                projection: np.ndarray | None = None) -> ClientState:
    x, y = dataset.subset("train")
    F, C, G = build_models(cfg, None)
    D = None
    reference = None
    if cfg.adversarial:
        if projection is None:
            projection = shared_projection(cfg, seed)
        D = Discriminator(projection, cfg.num_classes, global_rng(seed, 13, client_id),
                          conditional=cfg.conditional)
        if not cfg.adaptive_reference:
            reference = fixed_reference_sampler(cfg)
    return ClientState(client_id, cfg, x, y, F, C, G, D,
                       shuffle_rng=global_rng(seed, 11, client_id),
                       noise_rng=global_rng(seed, 12, client_id),
                       reference=reference)


def make_clients(cfg: ExperimentConfig, sources: Sequence[DomainDataset], seed: int) -> list[ClientState]:
    projection = shared_projection(cfg, seed) if cfg.adversarial else None
    return [make_client(cfg, k, d, seed, projection) for k, d in enumerate(sources)]


def _zero(*modules) -> None:
    for m in modules:
        if m is not None:
            T.zero_grad(m.parameters())


def _hook(state: ClientState, step: str) -> None:
    if state.step_hook is not None:
        state.step_hook(step, state)


# the tensor layer reports overflow itself, so numpy's warnings are redundant
@np.errstate(over="ignore", invalid="ignore")
def client_update(state: ClientState, w: ParameterVector) -> ParameterVector:
    """Local training on ``w``; returns the new ``{w_f, w_c, w_g}``. ``w_d`` stays local."""
    cfg = state.cfg
    if state.num_samples == 0:
        raise ValueError(f"client {state.client_id} has an empty local dataset")
    state.load(w)
    F, C, G, D = state.F, state.C, state.G, state.D
    fc_params = F.parameters() + C.parameters()
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}

    def note(name: str, value: Tensor) -> None:
        sums[name] = sums.get(name, 0.0) + value.item()
        counts[name] = counts.get(name, 0) + 1

    where = {"round": state.round, "epoch": 0, "batch": 0, "step": ""}
    try:
        # phase A: classification only
        for _ in range(cfg.E0):
            where["epoch"] += 1
            for b, (xb, yb) in enumerate(batches(state.x, state.y, cfg.batch_size, state.shuffle_rng)):
                where.update(batch=b, step="c3")
                err = L.loss_err(C.probs(F(Tensor(xb))), yb, cfg.epsilon)
                err.backward()
                T.sgd_step(fc_params, cfg.lr)
                note("l_err_a", err)
                _hook(state, "c3")
            state.epochs_done += 1

        if cfg.adversarial:
            _adversarial_phase(state, note, where)
    except NonFiniteError as exc:
        raise TrainingDiverged(
            f"client {state.client_id}: non-finite value at round {where['round']} "
            f"epoch {where['epoch']} batch {where['batch']} step {where['step']}: {exc}") from exc

    state.last_losses = {k: sums[k] / counts[k] for k in sorted(sums)}
    state.round += 1
    return state.uploadable()


def _adversarial_phase(state: ClientState, note, where) -> None:
    cfg = state.cfg
    F, C, G, D = state.F, state.C, state.G, state.D
    weights = L.LossWeights(cfg.lambda0, cfg.lambda1)
    fc_params = F.parameters() + C.parameters()
    d_params = D.parameters()
    for _ in range(cfg.E1):
        where["epoch"] += 1
        for b, (xb, yb) in enumerate(batches(state.x, state.y, cfg.batch_size, state.shuffle_rng)):
            where.update(batch=b, step="c5")
            # c5: F and C against lambda0 * L_adv_f + lambda1 * L_err, D held fixed
            h = F(Tensor(xb))
            err = L.loss_err(C.probs(h), yb, cfg.epsilon)
            adv_f = L.loss_adv_f(D.discriminate(h, yb))
            (weights.lambda0 * adv_f + weights.lambda1 * err).backward()
            T.sgd_step(fc_params, cfg.lr)
            _zero(D, G)
            note("l_err", err)
            note("l_adv_f", adv_f)
            _hook(state, "c5")

            # c6: noise mini-batch and the labels it is paired with
            where["step"] = "c6"
            y_gen = noise_batch_labels(state.noise_rng, yb, cfg.num_classes)
            if state.reference is None:
                z = sample_noise(state.noise_rng, len(yb), cfg.noise_dim)
            else:
                fixed = state.reference(y_gen, state.noise_rng)

            # c7: discriminator on extracted (negative) vs reference (positive) features
            where["step"] = "c7"
            with no_grad():
                h_real = F(Tensor(xb)).detach()
                h_ref = G.generate(z, y_gen).detach() if state.reference is None else Tensor(fixed)
            adv_d = L.loss_adv_d(D.discriminate(h_real, yb), D.discriminate(h_ref, y_gen))
            adv_d.backward()
            T.sgd_step(d_params, cfg.lr_adv)
            note("l_adv_d", adv_d)
            _hook(state, "c7")

            # c8: generator on the same noise, D held fixed; skipped for fixed references
            if state.reference is None:
                where["step"] = "c8"
                adv_g = L.loss_adv_g(D.discriminate(G.generate(z, y_gen), y_gen))
                adv_g.backward()
                T.sgd_step(G.parameters(), cfg.lr_adv)
                _zero(D)
                note("l_adv_g", adv_g)
                _hook(state, "c8")
        state.epochs_done += 1
