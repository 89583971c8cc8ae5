"""Benchmark assembly and the comparison suites (ablation, communication
sweep) shared by the command line and the verification suite."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .federation import (
    FederationConfig,
    TrainResult,
    evaluate,
    make_clients,
    run_federation,
    run_localized,
)
from .network import MenuNet, NetworkConfig
from .synthdata import make_benchmark

ABLATION_VARIANTS = ("baseline", "menu", "menu_ald", "menu_agd")


def build_benchmark(config: ExperimentConfig):
    """Generate the federation's client datasets and the held-out dataset."""
    return make_benchmark(
        num_organs=config.network.num_organs,
        num_clients=config.federation.num_clients,
        seed=config.seed,
        num_samples=config.data.num_samples,
        full_client_samples=config.data.full_client_samples,
        image_size=tuple(config.data.image_size),
        noise_sigma=config.data.noise_sigma,
        shift_range=tuple(config.data.shift_range),
        oof_shift=config.data.oof_shift,
    )


def _trained_count(net: NetworkConfig) -> int:
    """Parameter count excluding the auxiliary decoder (unused in the
    baseline/plain variants)."""
    params = MenuNet(net).build(0)
    return sum(t.size for gid, _, t in params.named_tensors() if gid != "agd")


def variant_network(config: ExperimentConfig, variant: str) -> NetworkConfig:
    """Network for an ablation variant. The baseline is a single-encoder
    U-shape at the smallest width whose parameter count slightly exceeds the
    multi-encoder's (auxiliary decoder excluded on both sides)."""
    net = config.network
    if variant == "baseline":
        target = _trained_count(dataclasses.replace(net, num_encoders=None))
        width = net.base_channels
        while True:
            candidate = dataclasses.replace(net, num_encoders=1,
                                            base_channels=width)
            if _trained_count(candidate) > target:
                return candidate
            width += 1
    if variant in ABLATION_VARIANTS:
        return dataclasses.replace(net, num_encoders=None)
    raise ValueError(f"unknown variant {variant!r}")


def variant_federation(config: ExperimentConfig, variant: str, seed: int,
                       rounds: int | None = None,
                       epochs: int | None = None) -> FederationConfig:
    agd_mode = {"baseline": "none", "menu": "none",
                "menu_ald": "ald", "menu_agd": "agd"}[variant]
    return dataclasses.replace(
        config.federation, agd_mode=agd_mode, seed=seed,
        rounds=config.federation.rounds if rounds is None else rounds,
        local_epochs=config.federation.local_epochs if epochs is None else epochs)


@dataclass
class VariantResult:
    variant: str
    seed: int
    in_fed_dsc: float
    in_fed_asd: float
    oof_dsc: float
    oof_asd: float
    result: TrainResult


def run_federated_variant(config: ExperimentConfig, variant: str, seed: int,
                          client_datasets: list, oof_dataset,
                          rounds: int | None = None,
                          epochs: int | None = None) -> VariantResult:
    """Train one federated variant and score it on the in-federation test
    splits and the out-of-federation test split."""
    net = MenuNet(variant_network(config, variant))
    fed_cfg = variant_federation(config, variant, seed, rounds, epochs)
    clients = make_clients(fed_cfg, client_datasets)
    val_sets = [(c.client_id, c.dataset) for c in clients]
    result = run_federation(net, fed_cfg, clients, val_sets,
                            loss_cfg=config.loss)
    in_fed = evaluate(net, result.params, val_sets, "test")
    oof = evaluate(net, result.params, [(0, oof_dataset)], "test")
    return VariantResult(variant=variant, seed=seed,
                         in_fed_dsc=in_fed.global_dsc,
                         in_fed_asd=in_fed.global_asd,
                         oof_dsc=oof.global_dsc, oof_asd=oof.global_asd,
                         result=result)


def run_localized_suite(config: ExperimentConfig, seed: int,
                        client_datasets: list) -> list:
    """Train one model per client on its own data; each is scored on its own
    labeled organs only."""
    net = MenuNet(variant_network(config, "menu_agd"))
    fed_cfg = variant_federation(config, "menu_agd", seed)
    clients = make_clients(fed_cfg, client_datasets)
    results = []
    for client in clients:
        res = run_localized(net, fed_cfg, client, loss_cfg=config.loss)
        score = evaluate(net, res.params,
                         [(client.client_id, client.dataset)], "test")
        results.append((client.client_id, score.global_dsc, score.global_asd))
    return results


def sweep_pairs(budget: int) -> list:
    """(rounds, epochs) pairs with rounds*epochs == budget, epochs running
    over the powers of two dividing the budget."""
    pairs = []
    e = 1
    while budget % e == 0 and budget // e >= 1:
        pairs.append((budget // e, e))
        e *= 2
        if e > budget:
            break
    return sorted(pairs)


def seed_list(base_seed: int, count: int = 3) -> list:
    return [base_seed + i for i in range(count)]


def mean_sd(values) -> tuple:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
