"""End-to-end federated training with DMCFE secure aggregation.

A :class:`Federation` wires three kinds of entities over a transport:

* the **key server** publishes public parameters and the directory of
  Diffie-Hellman shares, then leaves;
* each **party** trains locally, adds its share of DP noise, encodes and
  encrypts its model under the round label, and hands out key fragments
  only for a participation matrix it accepted;
* the **aggregator** negotiates the matrix, queries every party each round,
  checks the quorum against the agreed row, rebuilds the round key from the
  fragment table and decrypts the weighted aggregate as the new global model.

``protocol="plaintext"`` runs the same round structure with raw model
vectors and no key server, as the General-FL reference.
"""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import dmcfe
from . import group as gm
from .config import PLAINTEXT, SECURE, SIM, RunConfig
from .dp import dp_smc_noise
from .dtc import (
    ABORT as DTC_ABORT,
    ConsensusAggregator,
    DtcParty,
    ExpectationPolicy,
    KeyFragmentMatrix,
    row_fusion_tag,
)
from .encoding import EncodingStats, decode, encode
from .errors import (
    DecryptionFailure,
    DlogNotFound,
    PreconditionError,
    QuorumFailure,
)
from .participation import ParticipationMatrix, propose_matrix
from .trainer import (
    DatasetShard,
    evaluate,
    init_model,
    load_csv_shard,
    local_train,
    make_blobs,
    split_shards,
)
from .transport import (
    AGGREGATOR,
    KEY_SERVER,
    Envelope,
    MsgType,
    SimTransport,
    TcpTransport,
    party_entity,
)

logger = logging.getLogger(__name__)

CONSENSUS = "consensus"


def _seed(*parts) -> np.random.SeedSequence:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return np.random.SeedSequence(int.from_bytes(digest[:16], "big"))


def model_hash(model: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(model, dtype=np.float64).tobytes()).hexdigest()[:16]


def ciphertext_id(ct: dmcfe.Ciphertext) -> str:
    h = hashlib.sha256()
    h.update(f"{ct.party_id}|".encode() + ct.label)
    for c in ct.coords:
        h.update(b"|" + str(c).encode())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    participants: tuple[int, ...]
    ciphertext_ids: tuple[str, ...]
    key_id: str | None
    model_hash: str
    wall_ms: float

    def to_json(self) -> dict:
        return {
            "round": self.round_index,
            "participants": list(self.participants),
            "ciphertext_ids": list(self.ciphertext_ids),
            "key_id": self.key_id,
            "model_hash": self.model_hash,
            "wall_ms": self.wall_ms,
        }


# --- key server ---------------------------------------------------------------

class KeyServer:
    """Publishes ``pp`` and brokers the one-time Diffie-Hellman share directory."""

    def __init__(self, pp: dmcfe.PublicParams):
        self.pp = pp
        self.directory: dict[int, dict] = {}

    def handle(self, env: Envelope):
        if env.msg_type != MsgType.KEYSETUP:
            return MsgType.ABORT, {"reason": f"key server cannot handle {env.msg_type.value}"}
        p = env.payload
        if p.get("role") == "aggregator":
            return MsgType.KEYSETUP, {"pp": self.pp.to_json(),
                                      "directory": {str(j): v for j, v in sorted(self.directory.items())}}
        j = int(p["party"])
        self.directory[j] = {"dh_public": p["dh_public"], "samples": int(p["samples"])}
        return MsgType.KEYSETUP, {"pp": self.pp.to_json()}


# --- party --------------------------------------------------------------------

UpdateOverride = Callable[[int, int, np.ndarray], np.ndarray]


class Party:
    def __init__(self, party_id: int, shard: DatasetShard, cfg: RunConfig, n_classes: int, *,
                 policy: ExpectationPolicy | None = None, deterministic_keys: bool = True,
                 update_override: UpdateOverride | None = None, session: bytes = b"",
                 dtc_cls: type[DtcParty] = DtcParty):
        self.party_id = party_id
        self.dtc_cls = dtc_cls
        self.entity = party_entity(party_id)
        self.shard = shard
        self.cfg = cfg
        self.n_classes = n_classes
        self.policy = policy or ExpectationPolicy()
        self.session = session
        self.update_override = update_override
        self._key_rng = dmcfe.seeded_rng(cfg.seed, "party-keys", party_id) if deterministic_keys else None
        self.pp: dmcfe.PublicParams | None = None
        self.sk: dmcfe.PartySecretKey | None = None
        self.dtc: DtcParty | None = None
        self._dh_secret: int | None = None
        self.sample_counts: dict[int, int] | None = None
        self.used_labels: set[bytes] = set()
        self.aborts: list[str] = []
        self.stats = EncodingStats()
        self.last_plain_update: np.ndarray | None = None

    # setup: P <-> K
    def key_setup(self, transport) -> None:
        if self.cfg.protocol == PLAINTEXT:
            return
        # the group is public configuration; a throwaway pp lets us draw the DH share
        group_pp = self._bootstrap_pp()
        self._dh_secret, dh_public = dmcfe.dh_keypair(group_pp, self._key_rng)
        reply = transport.request(self.entity, KEY_SERVER, MsgType.KEYSETUP, {
            "party": self.party_id, "dh_public": str(dh_public), "samples": len(self.shard),
        })
        self.pp = dmcfe.PublicParams.from_json(reply.payload["pp"], allow_insecure=self.cfg.allow_insecure)

    def _bootstrap_pp(self) -> dmcfe.PublicParams:
        return dmcfe.PublicParams(group=federation_group(self.cfg), n=self.cfg.n,
                                  payload_bound=1, max_weight_scale=1, dlog_bound=1)

    def _register(self, payload: dict):
        directory = {int(j): v for j, v in payload["directory"].items()}
        self.sample_counts = {j: int(v["samples"]) for j, v in directory.items()}
        if self.cfg.protocol == SECURE:
            if set(directory) != set(range(1, self.cfg.n + 1)):
                raise PreconditionError(f"party {self.party_id}: incomplete key directory")
            seeds = {j: dmcfe.pairwise_seed(self.pp, self.party_id, self._dh_secret, j, int(v["dh_public"]))
                     for j, v in directory.items() if j != self.party_id}
            self.sk = dmcfe.PartySecretKey(self.party_id, dmcfe.secret_scalars(self.pp, self._key_rng), seeds)
            self._dh_secret = None
            self.dtc = self.dtc_cls(self.party_id, self.pp, self.sk, self.cfg.thresholds[self.party_id],
                                policy=self.policy, encoding=self.cfg.encoding, session=self.session,
                                sample_counts=self.sample_counts if self.cfg.fusion_mode == "weighted" else None)
        return MsgType.REGISTER, {"party": self.party_id, "samples": len(self.shard)}

    def _train(self, round_index: int, global_model: np.ndarray) -> np.ndarray:
        seq = _seed(self.cfg.seed, "train", round_index, self.party_id)
        model = local_train(self.shard, global_model, self.n_classes, self.cfg.hyperparams,
                            seed=seq.generate_state(1)[0])
        if self.cfg.dp.enabled:
            rng = np.random.default_rng(_seed(self.cfg.seed, "dp", round_index, self.party_id))
            model = dp_smc_noise(self.cfg.dp, model, rng, reference=global_model)
        if self.update_override is not None:
            model = np.asarray(self.update_override(round_index, self.party_id, model), dtype=np.float64)
        return model

    def _enrolled(self, round_index: int) -> bool:
        if self.cfg.protocol == SECURE:
            matrix = self.dtc.agreed_matrix if self.dtc else None
            if matrix is None:
                return False
            return self.party_id in matrix.support(round_index - 1)
        return True

    def _train_query(self, payload: dict):
        i = int(payload["round"])
        if self.cfg.protocol == PLAINTEXT and not payload.get("enrolled", True):
            return None
        if not self._enrolled(i):
            return None
        global_model = np.asarray(payload["model"], dtype=np.float64)
        model = self._train(i, global_model)
        self.last_plain_update = model
        if self.cfg.protocol == PLAINTEXT:
            return MsgType.TRAIN_REPLY, {"party": self.party_id, "round": i, "model": model.tolist()}
        label = dmcfe.round_label(i, self.session)
        if label in self.used_labels:
            return MsgType.ABORT, {"party": self.party_id, "reason": f"already encrypted under round {i}"}
        self.used_labels.add(label)
        x = encode(self.cfg.encoding, model, self.stats)
        ct = dmcfe.encrypt(self.pp, self.sk, x.tolist(), label)
        return MsgType.TRAIN_REPLY, {"party": self.party_id, "round": i, "ciphertext": ct.to_json()}

    def handle(self, env: Envelope):
        t = env.msg_type
        if t == MsgType.REGISTER:
            return self._register(env.payload)
        if t == MsgType.TRAIN_QUERY:
            return self._train_query(env.payload)
        if t == MsgType.ABORT:
            self.aborts.append(env.payload.get("reason", ""))
            return None
        if t == MsgType.GLOBAL_MODEL:
            return None
        if t.value.startswith("DTC_"):
            rtype, payload = self.dtc.handle(t.value, env.payload)
            return MsgType(rtype), payload
        return MsgType.ABORT, {"reason": f"party cannot handle {t.value}"}


# --- aggregator ---------------------------------------------------------------

class Aggregator:
    """Round driver. Attack harnesses subclass it and override the hook methods."""

    consensus_cls: type[ConsensusAggregator] = ConsensusAggregator

    def __init__(self, cfg: RunConfig, test_set: tuple[np.ndarray, np.ndarray], n_classes: int,
                 session: bytes = b""):
        self.cfg = cfg
        self.X_test, self.y_test = test_set
        self.n_classes = n_classes
        self.session = session
        self.pp: dmcfe.PublicParams | None = None
        self.sample_counts: dict[int, int] = {}
        self.directory: dict[int, dict] = {}
        self.matrix: ParticipationMatrix | None = None
        self.fragments: KeyFragmentMatrix | None = None
        self.consensus: ConsensusAggregator | None = None
        self.records: list[RoundRecord] = []

    # setup: A <-> K, then A <-> P registration
    def key_setup(self, transport) -> None:
        reply = transport.request(AGGREGATOR, KEY_SERVER, MsgType.KEYSETUP, {"role": "aggregator"})
        self.pp = dmcfe.PublicParams.from_json(reply.payload["pp"], allow_insecure=self.cfg.allow_insecure)
        self.directory = {int(j): v for j, v in reply.payload["directory"].items()}

    def register(self, transport) -> None:
        directory = {str(j): v for j, v in sorted(self.directory.items())}
        for j in range(1, self.cfg.n + 1):
            reply = transport.request(AGGREGATOR, party_entity(j), MsgType.REGISTER, {"directory": directory})
            self.sample_counts[j] = int(reply.payload["samples"])

    def make_consensus(self) -> ConsensusAggregator:
        cfg = self.cfg
        return self.consensus_cls(
            cfg.n, cfg.m, t_bp=cfg.t_bp, fusion_mode=cfg.fusion_mode,
            sample_counts=self.sample_counts if cfg.fusion_mode == "weighted" else None,
            seed=cfg.seed, max_negotiation_rounds=cfg.max_negotiation_rounds,
        )

    def run_consensus(self, transport) -> ParticipationMatrix:
        def exchange(j: int, msg_type: str, payload: dict):
            expect = msg_type != DTC_ABORT
            reply = transport.request(AGGREGATOR, party_entity(j), MsgType(msg_type), payload,
                                      channel=CONSENSUS, expect_reply=expect)
            if reply is None:
                return DTC_ABORT, {}
            return reply.msg_type.value, reply.payload

        self.consensus = self.make_consensus()
        self.matrix, self.fragments = self.consensus.run(exchange)
        return self.matrix

    def plaintext_matrix(self) -> ParticipationMatrix:
        cfg = self.cfg
        self.matrix = propose_matrix(cfg.m, cfg.n, cfg.trust, cfg.fusion_mode, cfg.seed,
                                     sample_counts=self.sample_counts if cfg.fusion_mode == "weighted" else None)
        return self.matrix

    # --- per-round hooks ------------------------------------------------------

    def query(self, transport, round_index: int, global_model: np.ndarray) -> dict[int, dict]:
        row = self.matrix.rows[round_index - 1]
        replies: dict[int, dict] = {}
        for j in range(1, self.cfg.n + 1):
            enrolled = row[j - 1] != 0
            reply = transport.request(AGGREGATOR, party_entity(j), MsgType.TRAIN_QUERY, {
                "round": round_index, "model": global_model.tolist(), "enrolled": enrolled,
            }, expect_reply=enrolled)
            if reply is not None and reply.msg_type == MsgType.TRAIN_REPLY:
                replies[j] = reply.payload
        return replies

    def check_quorum(self, round_index: int, replies: Mapping[int, dict]) -> None:
        support = self.matrix.support(round_index - 1)
        got = set(replies)
        if got != support:
            raise QuorumFailure(round_index, sorted(support - got), sorted(got - support))

    def tamper_ciphertexts(self, round_index: int, cts: list[dmcfe.Ciphertext]) -> list[dmcfe.Ciphertext]:
        return cts

    def fragments_for_round(self, round_index: int) -> list[dmcfe.PartialDecryptionKey]:
        return self.fragments.row(round_index - 1)

    def fuse_and_decrypt(self, round_index: int, cts: list[dmcfe.Ciphertext],
                         fragments_row: list[dmcfe.PartialDecryptionKey]) -> tuple[np.ndarray, str]:
        """Combine the round key, decrypt the aggregate and decode it to floats."""
        y, _ = row_fusion_tag(self.matrix, round_index - 1, self.cfg.encoding, self.session)
        dk = dmcfe.key_der_comb(self.pp, fragments_row)
        label = dmcfe.round_label(round_index, self.session)
        values = dmcfe.decrypt(self.pp, dk, cts, y, label)
        return decode(self.cfg.encoding, values, total_weight_scale=sum(y)), dk.key_id

    def plaintext_fuse(self, round_index: int, replies: Mapping[int, dict]) -> np.ndarray:
        row = self.matrix.rows[round_index - 1]
        total = sum(row)
        acc = None
        for j, payload in sorted(replies.items()):
            v = np.asarray(payload["model"], dtype=np.float64) * float(row[j - 1] / total)
            acc = v if acc is None else acc + v
        return acc

    def run_round(self, transport, round_index: int, global_model: np.ndarray) -> np.ndarray:
        t0 = time.perf_counter()
        replies = self.query(transport, round_index, global_model)
        self.check_quorum(round_index, replies)
        if self.cfg.protocol == PLAINTEXT:
            new_model = self.plaintext_fuse(round_index, replies)
            key_id, ids = None, ()
        else:
            cts = [dmcfe.Ciphertext.from_json(replies[j]["ciphertext"]) for j in sorted(replies)]
            cts = self.tamper_ciphertexts(round_index, cts)
            ids = tuple(ciphertext_id(ct) for ct in cts)
            try:
                new_model, key_id = self.fuse_and_decrypt(round_index, cts, self.fragments_for_round(round_index))
            except DlogNotFound as exc:
                raise DecryptionFailure(f"round {round_index}: {exc}") from exc
        self.records.append(RoundRecord(
            round_index, tuple(sorted(replies)), ids, key_id, model_hash(new_model),
            (time.perf_counter() - t0) * 1000.0,
        ))
        return new_model


# --- federation ---------------------------------------------------------------

def federation_group(cfg: RunConfig) -> gm.GroupParams:
    if cfg.lambda_bits == gm.PRODUCTION_BITS and cfg.group_seed is None:
        return gm.modp_group()
    return gm.setup_group(cfg.lambda_bits, cfg.group_seed if cfg.group_seed is not None else cfg.seed,
                          allow_insecure=cfg.allow_insecure)


def load_data(cfg: RunConfig) -> tuple[list[DatasetShard], tuple[np.ndarray, np.ndarray], int]:
    ds = cfg.dataset
    if ds.kind == "csv":
        shards = [load_csv_shard(p, j) for j, p in enumerate(ds.party_paths, start=1)]
        if ds.test_path:
            test = load_csv_shard(ds.test_path)
            X_test, y_test = test.features, test.labels
        else:
            X_test = np.concatenate([s.features for s in shards])
            y_test = np.concatenate([s.labels for s in shards])
        n_classes = int(max(int(s.labels.max()) for s in shards) + 1)
        n_classes = max(n_classes, int(y_test.max()) + 1)
        return shards, (X_test, y_test), n_classes
    X, y = make_blobs(ds.n_samples, ds.n_features, ds.n_classes, separation=ds.separation, seed=cfg.seed)
    n_test = int(round(len(y) * ds.test_fraction))
    X_test, y_test = X[:n_test], y[:n_test]
    shards = split_shards(X[n_test:], y[n_test:], cfg.n, partition=ds.partition, seed=cfg.seed)
    return shards, (X_test, y_test), ds.n_classes


@dataclass
class FederationResult:
    config: RunConfig
    final_model: np.ndarray
    metrics: list[dict]
    timings: list[dict]
    records: list[RoundRecord]
    matrix: ParticipationMatrix
    meter: dict
    table_interactions: int
    consensus_rounds: int = 0
    clipped: int = 0
    trace: list[bytes] = field(default_factory=list, repr=False)


class Federation:
    """One configured federation: entities, transport and data."""

    def __init__(self, cfg: RunConfig, *, aggregator_cls: type[Aggregator] = Aggregator,
                 policies: Mapping[int, ExpectationPolicy] | None = None,
                 update_override: UpdateOverride | None = None,
                 party_dtc: Mapping[int, type[DtcParty]] | None = None,
                 data=None, keep_trace: bool = True):
        self.cfg = cfg.validate()
        self.session = f"run-{cfg.seed}".encode()
        shards, test_set, n_classes = data if data is not None else load_data(cfg)
        self.n_classes = n_classes
        self.test_set = test_set
        if cfg.mode == SIM:
            self.transport = SimTransport(keep_trace=keep_trace)
        else:
            self.transport = TcpTransport(keep_trace=keep_trace)
        deterministic = cfg.mode == SIM
        self.parties = {
            s.party_id: Party(s.party_id, s, cfg, n_classes, policy=(policies or {}).get(s.party_id),
                              deterministic_keys=deterministic, update_override=update_override,
                              session=self.session, dtc_cls=(party_dtc or {}).get(s.party_id, DtcParty))
            for s in shards
        }
        self.aggregator = aggregator_cls(cfg, test_set, n_classes, session=self.session)
        self.key_server: KeyServer | None = None
        self.global_model = init_model(shards[0].features.shape[1], n_classes)

    def _address(self, entity: str):
        host = self.cfg.hosts.get(entity)
        return (host[0], int(host[1])) if host else ("127.0.0.1", 0)

    def _register(self, entity: str, handler) -> None:
        if isinstance(self.transport, TcpTransport):
            self.transport.register(entity, handler, *self._address(entity))
        else:
            self.transport.register(entity, handler)

    def setup_keys(self) -> None:
        """Key setup with the key server, then registration at the aggregator."""
        cfg = self.cfg
        for party in self.parties.values():
            self._register(party.entity, party.handle)
        self._register(AGGREGATOR, lambda env: None)
        if cfg.protocol == SECURE:
            ed = cfg.encoding
            pp = dmcfe.setup(cfg.lambda_bits, cfg.n, ed.payload_bound, ed.max_weight_scale(cfg.fusion_mode),
                             group=federation_group(cfg))
            self.key_server = KeyServer(pp)
            self._register(KEY_SERVER, self.key_server.handle)
            for j in sorted(self.parties):
                self.parties[j].key_setup(self.transport)
            self.aggregator.key_setup(self.transport)
            # the key server takes part in setup only
            self.transport.unregister(KEY_SERVER)
            self.key_server = None
        self.aggregator.register(self.transport)

    def negotiate(self) -> ParticipationMatrix:
        if self.cfg.protocol == SECURE:
            return self.aggregator.run_consensus(self.transport)
        return self.aggregator.plaintext_matrix()

    def setup(self) -> None:
        """Key setup, registration and (secure protocol) trust consensus."""
        self.setup_keys()
        self.negotiate()

    def train(self) -> FederationResult:
        cfg = self.cfg
        meter = self.transport.meter
        metrics, timings = [], []
        model = self.global_model
        X_test, y_test = self.test_set
        for i in range(1, cfg.m + 1):
            t0 = time.perf_counter()
            model = self.aggregator.run_round(self.transport, i, model)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            acc, loss = evaluate(model, X_test, y_test, self.n_classes)
            metrics.append({
                "round": i, "accuracy": round(acc, 6), "loss": round(loss, 6),
                "bytes_tx": meter.total_bytes(), "interactions": meter.table_total(),
            })
            timings.append({"round": i, "wall_ms": round(wall_ms, 3)})
            logger.info("round %d: accuracy %.4f loss %.4f", i, acc, loss)
        self.global_model = model
        consensus = self.aggregator.consensus
        return FederationResult(
            config=cfg, final_model=model, metrics=metrics, timings=timings,
            records=list(self.aggregator.records), matrix=self.aggregator.matrix,
            meter=meter.snapshot(), table_interactions=meter.table_total(),
            consensus_rounds=consensus.state.negotiation_round if consensus else 0,
            clipped=sum(p.stats.clipped for p in self.parties.values()),
            trace=list(self.transport.trace),
        )

    def close(self) -> None:
        self.transport.close()

    def run(self) -> FederationResult:
        try:
            self.setup()
            return self.train()
        finally:
            self.close()


def run_training(cfg: RunConfig, **kwargs) -> FederationResult:
    """Set up, negotiate and train one federation; returns the final global model and logs."""
    return Federation(cfg, **kwargs).run()


def plaintext_reference(cfg: RunConfig, **kwargs) -> FederationResult:
    return run_training(cfg.replace(protocol=PLAINTEXT), **kwargs)

