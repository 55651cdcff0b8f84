"""Synchronous federated training of the per-generator controllers (FedAvg).

Every exchange between a client and the server goes through the framed wire
format below, whether the transport is in-process or a loopback socket:

    4-byte little-endian length | UTF-8 JSON
    {"schema_version", "type": "params"|"global", "round", "client_id",
     "param_len", "params": [...]}
"""
from __future__ import annotations

import json
import logging
import socket
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ArchitectureMismatch, EmptyClientSet, LengthMismatch
from .kan import ChebyKanLayer, ChebyKanModel, Dataset, TrainHyper, loss_mse, train_local

logger = logging.getLogger(__name__)

WIRE_VERSION = 1
_INIT_STREAM = 2**32 - 1


def serialize_params(model: ChebyKanModel) -> np.ndarray:
    """Flatten in (layer, input, output, degree) order."""
    return np.concatenate([l.coeffs.ravel() for l in model.layers]) if model.layers else np.zeros(0)


def architecture_of(model: ChebyKanModel) -> list:
    return [l.coeffs.shape for l in model.layers]


def deserialize_params(vector, architecture) -> ChebyKanModel:
    vector = np.asarray(vector, dtype=float).reshape(-1)
    shapes = [tuple(s) for s in architecture]
    need = sum(int(np.prod(s)) for s in shapes)
    if vector.size != need:
        raise LengthMismatch(f"parameter vector has {vector.size} entries, architecture needs {need}")
    layers, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        layers.append(ChebyKanLayer(vector[pos : pos + size].reshape(s).copy()))
        pos += size
    return ChebyKanModel(layers)


def fedavg_aggregate(models) -> ChebyKanModel:
    """Unweighted coefficient mean, accumulated in ascending client order.

    A running mean ``m += (theta_k - m) / k`` is used rather than sum-then-divide
    so that averaging identical models returns them bit for bit.
    """
    models = list(models)
    if not models:
        raise EmptyClientSet("nothing to aggregate")
    arch = architecture_of(models[0])
    for m in models[1:]:
        if architecture_of(m) != arch:
            raise ArchitectureMismatch("client models differ in architecture")
    layers = []
    for k in range(len(arch)):
        acc = models[0].layers[k].coeffs.copy()
        for count, m in enumerate(models[1:], start=2):
            acc += (m.layers[k].coeffs - acc) / count
        layers.append(ChebyKanLayer(acc))
    return ChebyKanModel(layers)


def derive_seed(master_seed: int, *keys: int) -> int:
    """Deterministic 63-bit seed from the master seed and integer keys."""
    state = np.random.SeedSequence([int(master_seed), *[int(k) for k in keys]]).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def client_seed(master_seed: int, client: int, round_index: int) -> int:
    return derive_seed(master_seed, client, round_index)


def init_seed(master_seed: int) -> int:
    return derive_seed(master_seed, _INIT_STREAM)


# -- wire format -------------------------------------------------------------

def encode_frame(kind: str, round_index: int, client_id: int, params) -> bytes:
    params = [float(v) for v in np.asarray(params, dtype=float).reshape(-1)]
    body = json.dumps(
        {
            "schema_version": WIRE_VERSION,
            "type": kind,
            "round": int(round_index),
            "client_id": int(client_id),
            "param_len": len(params),
            "params": params,
        },
        separators=(",", ":"),
    ).encode()
    return struct.pack("<I", len(body)) + body


def decode_frame(frame: bytes) -> dict:
    if len(frame) < 4:
        raise ValueError("truncated frame header")
    (length,) = struct.unpack("<I", frame[:4])
    if len(frame) - 4 != length:
        raise ValueError(f"frame length {length} does not match payload of {len(frame) - 4} bytes")
    msg = json.loads(frame[4:].decode())
    if msg.get("schema_version") != WIRE_VERSION:
        raise ValueError(f"unsupported wire version {msg.get('schema_version')!r}")
    if msg.get("type") not in ("params", "global"):
        raise ValueError(f"unknown message type {msg.get('type')!r}")
    if msg["param_len"] != len(msg["params"]):
        raise LengthMismatch("param_len disagrees with params")
    msg["params"] = np.array(msg["params"], dtype=float)
    return msg


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("socket closed mid-frame")
        buf += chunk
    return bytes(buf)


def send_frame(sock, frame: bytes):
    sock.sendall(frame)


def recv_frame(sock) -> dict:
    head = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", head)
    return decode_frame(head + _recv_exact(sock, length))


class InProcessChannel:
    """Queue-free channel: each message is encoded and immediately decoded."""

    def exchange(self, frame: bytes) -> dict:
        return decode_frame(frame)

    def close(self):
        pass


class LoopbackChannel:
    """One connected socket pair per client; frames really cross a socket."""

    def __init__(self):
        self.client, self.server = socket.socketpair()

    def exchange(self, frame: bytes) -> dict:
        # payloads are small but may exceed the socket buffer, so send from a helper thread
        with ThreadPoolExecutor(max_workers=1) as pool:
            pending = pool.submit(send_frame, self.client, frame)
            msg = recv_frame(self.server)
            pending.result()
        return msg

    def close(self):
        self.client.close()
        self.server.close()


TRANSPORTS = {"inproc": InProcessChannel, "loopback": LoopbackChannel}


# -- orchestration -----------------------------------------------------------

@dataclass
class FederatedConfig:
    dims: list = field(default_factory=lambda: [3, 32, 1])
    degree: int = 5
    rounds: int = 20
    lr: float = 1e-3
    batch_size: int = 1024
    local_epochs: int = 1
    optimizer: str = "adam"
    master_seed: int = 0
    strategy: str = "FEDAVG"
    transport: str = "inproc"
    jobs: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.strategy.upper() != "FEDAVG":
            raise ValueError(f"unsupported aggregation strategy {self.strategy!r}")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"unknown transport {self.transport!r}")

    def hyper(self, seed: int) -> TrainHyper:
        return TrainHyper(lr=self.lr, batch_size=self.batch_size, epochs=self.local_epochs,
                          seed=seed, optimizer=self.optimizer)


@dataclass
class RoundReport:
    round: int
    client_losses: list
    probe_loss_before: float
    probe_loss: float
    duration_s: float


def run_federated_training(cfg: FederatedConfig, shards, probe: Dataset | None = None, initial=None,
                           on_round=None):
    """Run ``cfg.rounds`` synchronous FedAvg rounds over one shard per client.

    Each round every client copies the broadcast global model, trains on its
    own shard with a seed derived from ``(master_seed, client, round)``, and
    sends its parameters back; the server averages them in client order.
    ``probe`` defaults to the union of all shards.  ``on_round(report, model)``
    is called after each aggregation.  Returns ``(global_model, reports)``.
    """
    shards = list(shards)
    if not shards:
        raise EmptyClientSet("no client shards")
    for i, s in enumerate(shards):
        if len(s) == 0:
            raise ValueError(f"client {i} has an empty shard")
    if probe is None:
        probe = Dataset.concat(shards)
    global_model = initial.copy() if initial is not None else ChebyKanModel.init(
        cfg.dims, cfg.degree, init_seed(cfg.master_seed))
    arch = architecture_of(global_model)
    channels = [TRANSPORTS[cfg.transport]() for _ in shards]

    def client_task(i, round_index, broadcast):
        # client side: decode the broadcast, train, reply with its parameters
        local = deserialize_params(broadcast["params"], arch)
        trained, loss = train_local(local, shards[i], cfg.hyper(client_seed(cfg.master_seed, i, round_index)))
        reply = encode_frame("params", round_index, i, serialize_params(trained))
        return channels[i].exchange(reply), loss

    reports = []
    probe_loss = loss_mse(global_model, probe)
    try:
        with ThreadPoolExecutor(max_workers=max(1, cfg.jobs)) as pool:
            for r in range(cfg.rounds):
                started = time.perf_counter()
                before = probe_loss
                broadcasts = [
                    channels[i].exchange(encode_frame("global", r, i, serialize_params(global_model)))
                    for i in range(len(shards))
                ]
                futures = [pool.submit(client_task, i, r, broadcasts[i]) for i in range(len(shards))]
                results = [f.result() for f in futures]
                for i, (msg, _) in enumerate(results):
                    if msg["client_id"] != i or msg["round"] != r:
                        raise RuntimeError(f"out-of-order message from client {msg['client_id']}")
                local_models = [deserialize_params(msg["params"], arch) for msg, _ in results]
                global_model = fedavg_aggregate(local_models)
                probe_loss = loss_mse(global_model, probe)
                report = RoundReport(
                    round=r + 1,
                    client_losses=[loss for _, loss in results],
                    probe_loss_before=before,
                    probe_loss=probe_loss,
                    duration_s=time.perf_counter() - started,
                )
                logger.info("round %d probe loss %.6g (%.2fs)", report.round, report.probe_loss, report.duration_s)
                reports.append(report)
                if on_round is not None:
                    on_round(report, global_model)
    finally:
        for ch in channels:
            ch.close()
    return global_model, reports
