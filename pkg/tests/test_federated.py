"""FedAvg aggregation, the wire format and the round loop."""
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flcgrid.errors import ArchitectureMismatch, EmptyClientSet, LengthMismatch
from flcgrid.federated import (
    FederatedConfig,
    InProcessChannel,
    LoopbackChannel,
    architecture_of,
    client_seed,
    decode_frame,
    deserialize_params,
    encode_frame,
    fedavg_aggregate,
    init_seed,
    run_federated_training,
    serialize_params,
)
from flcgrid.kan import ChebyKanLayer, ChebyKanModel, Dataset, TrainHyper, export_edges, loss_mse, train_local


def flat_mean_oracle(models):
    vecs = [np.concatenate([l.coeffs.reshape(-1) for l in m.layers]) for m in models]
    mean = sum(vecs[1:], vecs[0].copy()) / len(vecs)
    return deserialize_params(mean, architecture_of(models[0]))


def shards_for(n, seed=0, size=200):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = rng.normal(size=(size, 3)) * [0.05, 0.1, 0.0] + [0, 0, 0.5]
        out.append(Dataset(x, 0.3 * np.tanh(5 * x[:, 0]) + 0.1 * i))
    return out


def same(a, b):
    return all(np.array_equal(p.coeffs, q.coeffs) for p, q in zip(a.layers, b.layers))


# -- aggregation ----------------------------------------------------------------------

def test_mean_of_two_small_models():
    a = ChebyKanModel([ChebyKanLayer(np.array([[[1.0, 2.0]]]))])
    b = ChebyKanModel([ChebyKanLayer(np.array([[[3.0, 4.0]]]))])
    np.testing.assert_array_equal(fedavg_aggregate([a, b]).layers[0].coeffs.reshape(-1), [2.0, 3.0])


@pytest.mark.parametrize("n", [1, 3, 7])
def test_identical_models_are_fixed(n):
    m = ChebyKanModel.init([3, 32, 1], 5, seed=1)
    assert same(fedavg_aggregate([m] * n), m)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_aggregate_matches_flat_oracle(seed, n):
    models = [ChebyKanModel.init([3, 8, 2], 3, seed=seed + k) for k in range(n)]
    got, want = serialize_params(fedavg_aggregate(models)), serialize_params(flat_mean_oracle(models))
    assert np.max(np.abs(got - want)) <= 1e-15


def test_aggregate_is_permutation_invariant_up_to_rounding():
    models = [ChebyKanModel.init([3, 8, 1], 3, seed=k) for k in range(5)]
    a = serialize_params(fedavg_aggregate(models))
    b = serialize_params(fedavg_aggregate(models[::-1]))
    np.testing.assert_allclose(a, b, atol=1e-16)


def test_aggregate_errors():
    with pytest.raises(EmptyClientSet):
        fedavg_aggregate([])
    with pytest.raises(ArchitectureMismatch):
        fedavg_aggregate([ChebyKanModel.zeros([3, 4, 1], 2), ChebyKanModel.zeros([3, 5, 1], 2)])


# -- serialization ---------------------------------------------------------------------

def test_serialize_round_trip_and_length():
    m = ChebyKanModel.init([3, 32, 1], 5, seed=2)
    vec = serialize_params(m)
    assert vec.shape == (768,)
    assert same(deserialize_params(vec, architecture_of(m)), m)
    with pytest.raises(LengthMismatch):
        deserialize_params(vec[:-1], architecture_of(m))


def test_serialize_order_matches_edge_export():
    m = ChebyKanModel.init([2, 3, 1], 2, seed=0)
    from_edges = np.concatenate([e.coefficients for e in export_edges(m)])
    np.testing.assert_array_equal(serialize_params(m), from_edges)


# -- wire format -----------------------------------------------------------------------

def test_frame_layout():
    frame = encode_frame("params", 3, 1, [0.5, -1.25])
    (length,) = struct.unpack("<I", frame[:4])
    assert length == len(frame) - 4
    msg = decode_frame(frame)
    assert msg["type"] == "params" and msg["round"] == 3 and msg["client_id"] == 1
    assert msg["param_len"] == 2 and msg["schema_version"] == 1
    np.testing.assert_array_equal(msg["params"], [0.5, -1.25])


def test_frame_is_lossless_for_doubles():
    vec = np.random.default_rng(0).normal(size=768) * 1e-3
    assert np.array_equal(decode_frame(encode_frame("global", 0, 0, vec))["params"], vec)


def test_frame_rejections():
    frame = encode_frame("global", 0, 0, [1.0])
    with pytest.raises(ValueError):
        decode_frame(frame[:-1])
    with pytest.raises(ValueError):
        decode_frame(b"\x01")
    bad = frame.replace(b'"global"', b'"gossip"')
    with pytest.raises(ValueError):
        decode_frame(bad)


@pytest.mark.parametrize("channel", [InProcessChannel, LoopbackChannel])
def test_channels_deliver_large_frames(channel):
    ch = channel()
    try:
        vec = np.arange(20_000, dtype=float) / 7
        msg = ch.exchange(encode_frame("params", 2, 5, vec))
        assert msg["client_id"] == 5 and np.array_equal(msg["params"], vec)
    finally:
        ch.close()


# -- round loop -------------------------------------------------------------------------

def test_seed_derivation_is_stable_and_distinct():
    assert client_seed(7, 0, 0) == client_seed(7, 0, 0)
    seeds = {client_seed(7, c, r) for c in range(4) for r in range(5)}
    assert len(seeds) == 20
    assert init_seed(7) not in seeds


def test_single_client_equals_local_training():
    shard = shards_for(1)[0]
    cfg = FederatedConfig(dims=[3, 8, 1], degree=3, rounds=1, lr=1e-2, batch_size=32, master_seed=11)
    fed, reports = run_federated_training(cfg, [shard])
    start = ChebyKanModel.init(cfg.dims, cfg.degree, init_seed(11))
    local, loss = train_local(start, shard, cfg.hyper(client_seed(11, 0, 0)))
    assert same(fed, local)
    assert reports[0].client_losses == [loss]


def test_lr_zero_keeps_initial_model():
    cfg = FederatedConfig(dims=[3, 4, 1], degree=2, rounds=3, lr=0.0, master_seed=1)
    model, _ = run_federated_training(cfg, shards_for(2))
    assert same(model, ChebyKanModel.init([3, 4, 1], 2, init_seed(1)))


def test_identical_clients_average_to_either():
    shard = shards_for(1)[0]
    cfg = FederatedConfig(dims=[3, 4, 1], degree=2, rounds=1, lr=1e-2, batch_size=50, master_seed=3)
    start = ChebyKanModel.init([3, 4, 1], 2, init_seed(3))
    # same data and same seed on both clients
    hyper = TrainHyper(lr=1e-2, batch_size=50, seed=99)
    a, _ = train_local(start, shard, hyper)
    b, _ = train_local(start, shard, hyper)
    assert same(fedavg_aggregate([a, b]), a)
    # through the full loop the two clients draw different seeds, so only the shapes agree
    model, reports = run_federated_training(cfg, [shard, shard])
    assert len(reports[0].client_losses) == 2 and model.same_architecture(start)


@pytest.mark.parametrize("transport", ["inproc", "loopback"])
def test_training_is_deterministic_and_transport_neutral(transport):
    shards = shards_for(3)
    base = FederatedConfig(dims=[3, 8, 1], degree=3, rounds=4, lr=1e-2, batch_size=64, master_seed=5)
    ref, ref_reports = run_federated_training(base, shards)
    cfg = FederatedConfig(**{**base.__dict__, "transport": transport, "jobs": 3})
    got, reports = run_federated_training(cfg, shards)
    assert same(got, ref)
    assert [r.probe_loss for r in reports] == [r.probe_loss for r in ref_reports]


def test_reports_and_probe_loss_fall():
    shards = shards_for(3)
    cfg = FederatedConfig(dims=[3, 8, 1], degree=3, rounds=6, lr=1e-2, batch_size=32, master_seed=0)
    seen = []
    model, reports = run_federated_training(cfg, shards, on_round=lambda r, m: seen.append(r.round))
    assert seen == [1, 2, 3, 4, 5, 6]
    assert [r.round for r in reports] == seen
    assert all(len(r.client_losses) == 3 and r.duration_s >= 0 for r in reports)
    for prev, cur in zip(reports, reports[1:]):
        assert cur.probe_loss_before == prev.probe_loss
    assert reports[-1].probe_loss < reports[0].probe_loss_before
    assert reports[-1].probe_loss == pytest.approx(loss_mse(model, Dataset.concat(shards)))


def test_config_and_input_validation():
    with pytest.raises(ValueError):
        FederatedConfig(rounds=0)
    with pytest.raises(ValueError):
        FederatedConfig(strategy="FEDPROX")
    with pytest.raises(ValueError):
        FederatedConfig(transport="carrier-pigeon")
    with pytest.raises(EmptyClientSet):
        run_federated_training(FederatedConfig(rounds=1), [])
    with pytest.raises(ValueError):
        run_federated_training(FederatedConfig(rounds=1), [Dataset(np.zeros((0, 3)), np.zeros(0))])
