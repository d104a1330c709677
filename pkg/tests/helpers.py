"""Shared builders for federation-level tests."""

from fedmarket.data import dirichlet_partition, holdout_reference, synth_blobs, uniform_holdout
from fedmarket.federation import (
    TAG_CLIENT,
    TAG_SERVER,
    ClientState,
    RoundPlan,
    ServerState,
    derive_rng,
)
from fedmarket.market import MarketPolicy
from fedmarket.nncore import MlpModel, OptimizerState


def make_world(
    seed=0,
    classes=3,
    dim=4,
    per_class=40,
    spread=0.5,
    clients=3,
    alpha=0.5,
    ref_size=24,
    test_size=24,
    hidden=(8,),
    batchnorm=False,
    optimizer="adam",
    lr=1e-3,
    input_dim=None,
):
    """Small synthetic federation: returns (train_pool, ref, test, clients, server)."""
    full = synth_blobs(classes, dim, per_class, spread, seed)
    test_idx, rest_idx = uniform_holdout(full, test_size, seed + 1)
    test_data = full.subset(test_idx)
    pool = full.subset(rest_idx)
    ref, train_pool = holdout_reference(pool, ref_size, seed + 2)
    part = dirichlet_partition(train_pool, clients, alpha, seed + 3)
    states = []
    for i in range(clients):
        rng = derive_rng(seed, TAG_CLIENT, i)
        model = MlpModel(input_dim or dim, hidden, classes, batchnorm=batchnorm, rng=rng)
        opt = OptimizerState.for_model(optimizer, lr, model.param_count)
        states.append(ClientState(i, model, opt, part.client_shards[i], rng))
    server_model = MlpModel(input_dim or dim, hidden, classes, batchnorm=batchnorm,
                            rng=derive_rng(seed, TAG_SERVER))
    server = ServerState(server_model.get_params())
    return train_pool, ref.dataset, test_data, states, server


def make_plan(algorithm="kta_v2", **overrides):
    defaults = dict(
        algorithm=algorithm,
        rounds_total=2,
        e_local=1,
        e_distill=2,
        batch_size=16,
        lam=0.5,
        temperature=2.0,
        prox_mu=0.01,
        optimizer="adam",
        lr=1e-3,
        market=MarketPolicy(),
    )
    defaults.update(overrides)
    return RoundPlan(**defaults)
