"""Synchronous FedAvg federation over encrypted (or, for comparison,
plaintext) model exchange.

Parties:

* ``KeyAuthority`` generates the key pair, hands the public key to everyone
  and the secret key to learners only. It also produces the encrypted initial
  community model.
* ``Controller`` holds the public key and the registered contributions. It
  aggregates whatever model payloads arrive and never decrypts.
* ``Learner`` decrypts the community model, trains locally, re-encrypts.

Every model crosses a ``wire.Connection`` as framed bytes, both for the
in-process queue transport and for TCP loopback.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import ckks, wire
from .audit import acting_as
from .data import DEFAULT_EVAL_SIZE, DEFAULT_TRAIN_SIZE, LabeledDataset, PartitionScheme, partition, train_eval_split
from .errors import ConfigError, LayoutMismatchError, RoundAbortedError
from .fedavg import (
    DEFAULT_MLP_SIZES,
    AggregationWeights,
    TrainerSpec,
    aggregate_encrypted,
    aggregate_plain,
    init_mlp,
    local_sgd,
    mlp_predict,
)
from .modelpack import PackedModel, decrypt_model, encrypt_model, flatten, unflatten

CONTROLLER = "controller"
EVALUATOR = "evaluator"


def learner_party(k: int) -> str:
    return f"learner{k}"


@dataclass(frozen=True)
class FederationConfig:
    learner_count: int = 8
    rounds: int = 25
    trainer: TrainerSpec = field(default_factory=TrainerSpec)
    ckks: ckks.CkksParams | None = None
    scheme: str = "uniform_iid"
    seed: int = 0
    transport: str = "inproc"
    encrypted: bool = True
    listen: str = "127.0.0.1:0"
    mlp_sizes: tuple[int, ...] = DEFAULT_MLP_SIZES
    train_size: int = DEFAULT_TRAIN_SIZE
    eval_size: int = DEFAULT_EVAL_SIZE
    noise_sigma: float = 1.0

    def __post_init__(self):
        if self.learner_count < 1:
            raise ConfigError("learner_count must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.transport not in ("inproc", "tcp"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        try:
            PartitionScheme.parse(self.scheme)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.learner_count > self.train_size:
            raise ConfigError("more learners than training examples")
        if self.eval_size < 1:
            raise ConfigError("evaluation set must be non-empty")

    @property
    def mode(self) -> str:
        return "encrypted" if self.encrypted else "plaintext"

    def ckks_params(self) -> ckks.CkksParams:
        return self.ckks if self.ckks is not None else ckks.CkksParams.create()


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    mode: str
    env: str
    loss: float
    mae: float
    t_train_ms: float
    t_encrypt_ms: float
    t_aggregate_ms: float
    t_decrypt_ms: float
    t_transfer_ms: float
    bytes: int


def evaluate_community(model, eval_set: LabeledDataset) -> tuple[float, float]:
    """Mean squared error and mean absolute error on the held-out set."""
    if len(eval_set) == 0:
        raise ValueError("evaluation set is empty")
    err = mlp_predict(model, eval_set.features) - eval_set.targets
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


class KeyAuthority:
    """Trusted setup: key generation and the encrypted initial model."""

    def __init__(self, params: ckks.CkksParams, rng: np.random.Generator):
        self.params = params
        self._keys = ckks.keygen(params, rng)

    @property
    def public_key(self) -> ckks.PublicKey:
        return self._keys.public_key

    def learner_keys(self) -> ckks.KeyPair:
        return self._keys


class ModelCodec:
    """Turns models into wire payloads and back for one mode."""

    def __init__(self, params: ckks.CkksParams | None, public_key: ckks.PublicKey | None,
                 secret_key: ckks.SecretKey | None = None):
        self.params = params
        self.public_key = public_key
        self._secret_key = secret_key

    @property
    def encrypted(self) -> bool:
        return self.public_key is not None

    def encode(self, model, rng: np.random.Generator | None) -> bytes:
        if self.encrypted:
            return wire.serialize_packed_model(encrypt_model(model, self.public_key, self.params, rng))
        layout, flat = flatten(model)
        return wire.serialize_plain_model(layout, flat)

    def decode(self, payload: bytes) -> dict[str, np.ndarray]:
        if self.encrypted:
            if self._secret_key is None:
                raise PermissionError("this party holds no secret key")
            return decrypt_model(wire.deserialize_packed_model(payload, self.params), self._secret_key)
        layout, flat = wire.deserialize_plain_model(payload)
        return unflatten(layout, flat)


@dataclass
class LearnerState:
    learner_id: int
    dataset: LabeledDataset
    keys: ckks.KeyPair | None
    model: dict | None = None

    @property
    def contribution(self) -> int:
        return len(self.dataset)


def learner_opt(community: PackedModel, state: LearnerState, trainer: TrainerSpec,
                params: ckks.CkksParams, train_rng: np.random.Generator,
                enc_rng: np.random.Generator, epochs: int | None = None,
                timings: dict | None = None) -> PackedModel:
    """Decrypt the community model, train on local data, encrypt the result."""
    timings = {} if timings is None else timings
    t0 = time.perf_counter()
    model = decrypt_model(community, state.keys.secret_key)
    t1 = time.perf_counter()
    if state.model is not None and list(state.model) != list(model):
        raise LayoutMismatchError("community model does not match the local architecture")
    state.model = local_sgd(model, state.dataset.features, state.dataset.targets, trainer,
                            train_rng, epochs=epochs)
    t2 = time.perf_counter()
    packed = encrypt_model(state.model, state.keys.public_key, params, enc_rng)
    t3 = time.perf_counter()
    timings.update(decrypt=t1 - t0, train=t2 - t1, encrypt=t3 - t2)
    return packed


class Learner:
    def __init__(self, learner_id: int, dataset: LabeledDataset, trainer: TrainerSpec,
                 codec: ModelCodec, seed: int, epochs: int | None = None):
        self.state = LearnerState(learner_id, dataset,
                                  ckks.KeyPair(codec.public_key, codec._secret_key) if codec.encrypted else None)
        self.trainer = trainer
        self.codec = codec
        self.epochs = epochs
        self.train_rng = np.random.default_rng([seed, 10, learner_id])
        self.enc_rng = np.random.default_rng([seed, 11, learner_id])
        self.timings: dict[str, float] = {}
        self.error: BaseException | None = None

    @property
    def learner_id(self) -> int:
        return self.state.learner_id

    def handle(self, payload: bytes) -> bytes:
        with acting_as(learner_party(self.learner_id)):
            if self.codec.encrypted:
                community = wire.deserialize_packed_model(payload, self.codec.params)
                timings = {}
                packed = learner_opt(community, self.state, self.trainer, self.codec.params,
                                     self.train_rng, self.enc_rng, self.epochs, timings)
                self.timings = timings
                return wire.serialize_packed_model(packed)
            t0 = time.perf_counter()
            model = self.codec.decode(payload)
            t1 = time.perf_counter()
            self.state.model = local_sgd(model, self.state.dataset.features, self.state.dataset.targets,
                                         self.trainer, self.train_rng, epochs=self.epochs)
            t2 = time.perf_counter()
            out = self.codec.encode(self.state.model, None)
            self.timings = dict(decrypt=t1 - t0, train=t2 - t1, encrypt=time.perf_counter() - t2)
            return out

    def serve(self, conn: wire.Connection) -> None:
        """Register, then answer every CommunityModel until Shutdown."""
        try:
            conn.send(wire.Register(self.learner_id, self.state.contribution))
            while True:
                msg = conn.recv()
                if isinstance(msg, wire.Shutdown):
                    break
                if isinstance(msg, wire.MetricsAck):
                    continue
                if not isinstance(msg, wire.CommunityModel):
                    raise wire.WireError(f"unexpected {type(msg).__name__}")
                reply = self.handle(msg.model)
                conn.send(wire.LocalModel(msg.round, self.learner_id, reply))
        except BaseException as exc:  # surfaced to the controller as a closed connection
            self.error = exc
        finally:
            conn.close()


class Controller:
    """Ciphertext-only aggregator. Holds the public parameters, never a
    secret key."""

    def __init__(self, params: ckks.CkksParams | None, public_key: ckks.PublicKey | None):
        self.params = params
        self.public_key = public_key
        self.round = 0
        self.community: bytes | None = None
        self.registered: dict[int, int] = {}
        self.barrier_pending: set[int] = set()

    @property
    def encrypted(self) -> bool:
        return self.public_key is not None

    def register(self, learner_id: int, contribution: int) -> None:
        if learner_id in self.registered:
            raise RoundAbortedError(f"learner {learner_id} registered twice")
        if contribution < 1:
            raise RoundAbortedError(f"learner {learner_id} registered an empty dataset")
        self.registered[learner_id] = contribution

    @property
    def weights(self) -> AggregationWeights:
        return AggregationWeights.from_sizes([self.registered[k] for k in sorted(self.registered)])

    def aggregate(self, payloads: dict[int, bytes]) -> bytes:
        order = sorted(self.registered)
        if sorted(payloads) != order:
            raise RoundAbortedError("aggregation needs exactly one model per registered learner")
        with acting_as(CONTROLLER):
            if self.encrypted:
                models = [wire.deserialize_packed_model(payloads[k], self.params) for k in order]
                agg = aggregate_encrypted(models, self.weights, self.params)
                self.community = wire.serialize_packed_model(agg)
            else:
                decoded = [wire.deserialize_plain_model(payloads[k]) for k in order]
                layout = decoded[0][0]
                models = [unflatten(lay, flat) for lay, flat in decoded]
                agg = aggregate_plain(models, self.weights)
                self.community = wire.serialize_plain_model(layout, flatten(agg)[1])
        return self.community


class Federation:
    """One configured federation; build once, then ``run()``.

    ``record_trace`` keeps every frame seen by the controller, per learner.
    ``epochs`` overrides the trainer's epoch count (0 allowed, for tests).
    """

    def __init__(self, config: FederationConfig, record_trace: bool = False,
                 epochs: int | None = None):
        self.config = config
        self.record_trace = record_trace
        self.env = PartitionScheme.parse(config.scheme).name
        self.train_set, self.eval_set = train_eval_split(
            config.seed, config.train_size, config.eval_size, config.mlp_sizes[0], config.noise_sigma)
        self.plan = partition(self.train_set, config.learner_count, config.scheme, config.seed)
        self.initial_model = init_mlp(config.mlp_sizes, np.random.default_rng([config.seed, 3]))
        if config.encrypted:
            self.params = config.ckks_params()
            authority = KeyAuthority(self.params, np.random.default_rng([config.seed, 4]))
            keys = authority.learner_keys()
            learner_codec = ModelCodec(self.params, keys.public_key, keys.secret_key)
            self.controller = Controller(self.params, authority.public_key)
            initial_payload = learner_codec.encode(self.initial_model, np.random.default_rng([config.seed, 5]))
        else:
            self.params = None
            learner_codec = ModelCodec(None, None)
            self.controller = Controller(None, None)
            initial_payload = learner_codec.encode(self.initial_model, None)
        self.controller.community = initial_payload
        self._evaluator_codec = learner_codec
        self.learners = [
            Learner(k, self.train_set.subset(ix), config.trainer, learner_codec, config.seed, epochs)
            for k, ix in enumerate(self.plan.indices)
        ]
        self.traces: dict[int, list[tuple[str, bytes]]] = {}
        self.metrics: list[RoundMetrics] = []

    def community_model(self) -> dict[str, np.ndarray]:
        """Plaintext copy of the current community model, obtained through the
        designated evaluation learner."""
        with acting_as(EVALUATOR):
            return self._evaluator_codec.decode(self.controller.community)

    def _connect(self):
        conns, threads = {}, []
        n = self.config.learner_count
        if self.config.transport == "inproc":
            pairs = [wire.inproc_pair(self.record_trace) for _ in range(n)]
            server_side = [p[0] for p in pairs]
            for learner, (_, client) in zip(self.learners, pairs):
                threads.append(threading.Thread(target=learner.serve, args=(client,), daemon=True))
        else:
            listener = wire.TcpListener(self.config.listen)
            addr = listener.address

            def dial(learner):
                try:
                    conn = wire.tcp_connect(addr)
                except BaseException as exc:
                    learner.error = exc
                    return
                learner.serve(conn)

            threads = [threading.Thread(target=dial, args=(lr,), daemon=True) for lr in self.learners]
        for t in threads:
            t.start()
        if self.config.transport == "inproc":
            accepted = server_side
        else:
            try:
                accepted = [listener.accept(self.record_trace) for _ in range(n)]
            finally:
                listener.close()
        for conn in accepted:
            msg = conn.recv()
            if not isinstance(msg, wire.Register):
                raise RoundAbortedError(f"expected Register, got {type(msg).__name__}")
            self.controller.register(msg.learner_id, msg.contribution)
            conns[msg.learner_id] = conn
            conn.send(wire.MetricsAck())
        for k, lr in enumerate(self.learners):
            if self.controller.registered.get(k) != lr.state.contribution:
                raise RoundAbortedError(f"learner {k} registered the wrong contribution")
        return conns, threads

    def _abort(self, conns, threads, t, exc):
        for c in conns.values():
            c.close()
        for th in threads:
            th.join(timeout=10)
        culprits = [f"learner {lr.learner_id}: {lr.error!r}" for lr in self.learners if lr.error is not None]
        detail = "; ".join(culprits) if culprits else repr(exc)
        raise RoundAbortedError(f"round {t} aborted ({detail})") from exc

    def run(self) -> list[RoundMetrics]:
        cfg = self.config
        if cfg.rounds == 0:
            return []
        conns, threads = self._connect()
        order = sorted(conns)
        try:
            for t in range(cfg.rounds):
                before = sum(c.bytes_sent + c.bytes_received for c in conns.values())
                start = time.perf_counter()
                self.controller.round = t
                self.controller.barrier_pending = set(order)
                payloads = {}
                try:
                    for k in order:
                        conns[k].send(wire.CommunityModel(t, self.controller.community))
                    for k in order:
                        msg = conns[k].recv()
                        if not isinstance(msg, wire.LocalModel) or msg.round != t or msg.learner_id != k:
                            raise RoundAbortedError(f"unexpected reply from learner {k}: {type(msg).__name__}")
                        payloads[k] = msg.model
                        self.controller.barrier_pending.discard(k)
                except (wire.WireError, RoundAbortedError) as exc:
                    self._abort(conns, threads, t, exc)
                exchange = time.perf_counter() - start
                t0 = time.perf_counter()
                self.controller.aggregate(payloads)
                t_agg = time.perf_counter() - t0
                loss, mae = evaluate_community(self.community_model(), self.eval_set)
                busy = max(sum(lr.timings.values()) for lr in self.learners)
                moved = sum(c.bytes_sent + c.bytes_received for c in conns.values()) - before
                self.metrics.append(RoundMetrics(
                    round=t, mode=cfg.mode, env=self.env, loss=loss, mae=mae,
                    t_train_ms=1e3 * max(lr.timings["train"] for lr in self.learners),
                    t_encrypt_ms=1e3 * max(lr.timings["encrypt"] for lr in self.learners),
                    t_aggregate_ms=1e3 * t_agg,
                    t_decrypt_ms=1e3 * max(lr.timings["decrypt"] for lr in self.learners),
                    t_transfer_ms=1e3 * max(exchange - busy, 0.0),
                    bytes=moved,
                ))
            for k in order:
                conns[k].send(wire.Shutdown())
        finally:
            for th in threads:
                th.join(timeout=30)
            for k, c in conns.items():
                if c.trace is not None:
                    self.traces[k] = c.trace
                c.close()
        return self.metrics


def run_federation(config: FederationConfig) -> list[RoundMetrics]:
    return Federation(config).run()
