"""Federation protocol: optimizer, aggregation, round loop invariants."""

import dataclasses

import numpy as np
import pytest

import fedmenu.federation as fed
from fedmenu.federation import (
    FederationConfig,
    ProtocolError,
    TrainingDivergedError,
    aggregate,
    evaluate,
    local_train,
    make_clients,
    poly_lr,
    run_centralized,
    run_federation,
    run_localized,
    sgd_step,
)
from fedmenu.losses import LossConfig
from fedmenu.network import GROUP_AGD, MenuNet, NetworkConfig, ParameterSet
from fedmenu.synthdata import make_benchmark
from fedmenu.tensor import Tensor


def tiny_network():
    return NetworkConfig(num_organs=2, levels=2, base_channels=2,
                         agd_levels=(1, 2))


def tiny_setup(rounds=2, **kw):
    config = FederationConfig(num_clients=2, num_organs=2, rounds=rounds,
                              batch_size=4, base_lr=0.05, seed=0, **kw)
    clients_data, oof = make_benchmark(num_organs=2, num_clients=2, seed=1,
                                       num_samples=8, full_client_samples=8)
    net = MenuNet(tiny_network())
    clients = make_clients(config, clients_data)
    return net, config, clients, oof


def scalar_params(value):
    return ParameterSet({"g": {"w": Tensor(np.array([float(value)]))}})


class TestOptimizer:
    def test_sgd_step_quadratic(self):
        # loss (w - 2)^2 at w=0: grad -4, lr 0.1 -> w = 0.4
        w = Tensor(np.array([0.0]))
        v = sgd_step(w, np.array([-4.0]), np.zeros(1), lr=0.1, momentum=0.9)
        assert np.allclose(w.data, [0.4])
        assert np.allclose(v, [0.4])

    def test_momentum_accumulates(self):
        w = Tensor(np.array([0.0]))
        v = np.zeros(1)
        v = sgd_step(w, np.array([1.0]), v, lr=0.1, momentum=0.5)
        v = sgd_step(w, np.array([1.0]), v, lr=0.1, momentum=0.5)
        assert np.allclose(v, [-0.15])
        assert np.allclose(w.data, [-0.25])

    def test_poly_lr_endpoints(self):
        config = FederationConfig(rounds=40, base_lr=0.01)
        assert poly_lr(0, config) == 0.01
        assert poly_lr(40, config) == 0.0
        assert 0.0 < poly_lr(39, config) < poly_lr(1, config) < 0.01


class TestAggregate:
    def test_closed_form_example(self):
        out = aggregate([scalar_params(1.0), scalar_params(3.0)], [1, 3])
        assert abs(out.groups["g"]["w"].data[0] - 2.5) <= 1e-12

    def test_equal_sizes_unweighted_mean(self):
        models = [scalar_params(v) for v in (1.0, 2.0, 6.0)]
        out = aggregate(models, [5, 5, 5])
        assert abs(out.groups["g"]["w"].data[0] - 3.0) <= 1e-12

    def test_identical_inputs_exact_fixed_point(self):
        net = MenuNet(tiny_network())
        base = net.build(3)
        models = [base.copy() for _ in range(3)]
        out = aggregate(models, [7, 13, 29])
        assert out.checksum() == base.checksum()

    def test_permutation_symmetry(self):
        a, b = scalar_params(1.0), scalar_params(5.0)
        x = aggregate([a, b], [1, 3]).groups["g"]["w"].data[0]
        y = aggregate([b, a], [3, 1]).groups["g"]["w"].data[0]
        assert abs(x - y) <= 1e-12

    def test_linearity_on_dyadic_weights(self):
        # integer values with power-of-two weights keep all arithmetic exact
        a, b = scalar_params(8.0), scalar_params(4.0)
        out = aggregate([a, b], [1, 3]).groups["g"]["w"].data[0]
        assert out == 8.0 + 0.75 * (4.0 - 8.0)

    def test_does_not_mutate_inputs(self):
        a, b = scalar_params(1.0), scalar_params(3.0)
        aggregate([a, b], [1, 1])
        assert a.groups["g"]["w"].data[0] == 1.0
        assert b.groups["g"]["w"].data[0] == 3.0

    def test_excluded_group_keeps_first_model_values(self):
        net = MenuNet(tiny_network())
        models = [net.build(0), net.build(1)]
        out = aggregate(models, [1, 1], exclude_groups=frozenset({GROUP_AGD}))
        for name, t in out.groups[GROUP_AGD].items():
            assert np.array_equal(t.data, models[0].groups[GROUP_AGD][name].data)

    def test_expert_mode_averages_over_labelers_only(self):
        models = [None, None, None]
        for i, v in enumerate((1.0, 5.0, 9.0)):
            models[i] = ParameterSet(
                {"subenc1": {"w": Tensor(np.array([v]))},
                 "decoder": {"w": Tensor(np.array([v]))}})
        out = aggregate(models, [1, 1, 2],
                        expert_organs=[{1}, {2}, {1, 2}])
        # subenc1: clients 0 and 2 label organ 1, sizes 1 and 2 -> (1+18)/3
        assert abs(out.groups["subenc1"]["w"].data[0] - (1.0 + 18.0) / 3) <= 1e-12
        # decoder: all clients -> (1 + 5 + 18) / 4
        assert abs(out.groups["decoder"]["w"].data[0] - 6.0) <= 1e-12

    def test_validation(self):
        with pytest.raises(ProtocolError):
            aggregate([], [])
        with pytest.raises(ProtocolError):
            aggregate([scalar_params(1.0)], [0])
        with pytest.raises(ProtocolError):
            aggregate([scalar_params(1.0), scalar_params(2.0)], [1])


class TestConfigValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ProtocolError):
            FederationConfig(num_clients=0)
        with pytest.raises(ProtocolError):
            FederationConfig(strategy="gossip")
        with pytest.raises(ProtocolError):
            FederationConfig(strategy="fedprox", fedprox_mu=-1.0)
        with pytest.raises(ProtocolError):
            FederationConfig(agd_mode="maybe")


class TestLocalTrain:
    def test_frozen_groups_bit_identical(self):
        net, config, clients, _ = tiny_setup()
        global_params = net.build(config.seed)
        before = {name: t.data.copy()
                  for name, t in global_params.groups["subenc2"].items()}
        local, reports = local_train(global_params, clients[0], 1, 0, net,
                                     config)
        # client 1 labels organ 1 only: subenc2 must come back untouched
        for name, t in local.groups["subenc2"].items():
            assert np.array_equal(t.data, before[name])
        assert any(not np.array_equal(t.data, global_params.groups["subenc1"][n].data)
                   for n, t in local.groups["subenc1"].items())

    def test_global_params_not_mutated(self):
        net, config, clients, _ = tiny_setup()
        global_params = net.build(config.seed)
        checksum = global_params.checksum()
        local_train(global_params, clients[0], 1, 0, net, config)
        assert global_params.checksum() == checksum

    def test_reports_match_epochs(self):
        net, config, clients, _ = tiny_setup()
        global_params = net.build(config.seed)
        _, reports = local_train(global_params, clients[1], 2, 0, net, config)
        # 5 train samples, batch 4 -> 2 batches per epoch, 2 epochs
        assert len(reports) == 4

    def test_divergence_detection(self, monkeypatch):
        net, config, clients, _ = tiny_setup()
        global_params = net.build(config.seed)

        class FakeReport:
            total = float("nan")

        def bad_loss(probs, labels, agd_probs, cfg, tape):
            from fedmenu.losses import training_loss
            total, report = training_loss(probs, labels, agd_probs, cfg, tape)
            return total, FakeReport()

        monkeypatch.setattr(fed, "training_loss", bad_loss)
        with pytest.raises(TrainingDivergedError):
            local_train(global_params, clients[0], 1, 3, net, config)


class TestRoundLoop:
    def test_zero_rounds_is_initialization(self):
        net, config, clients, _ = tiny_setup(rounds=0)
        result = run_federation(net, config, clients)
        assert result.params.checksum() == net.build(config.seed).checksum()
        assert result.logs == []

    def test_round_log_weights_normalized(self):
        net, config, clients, _ = tiny_setup(rounds=1)
        result = run_federation(net, config, clients)
        assert abs(sum(result.logs[0].weights) - 1.0) <= 1e-12
        assert len(result.logs[0].clients) == 2

    def test_deterministic_given_seed(self):
        checksums = []
        for _trial in range(2):
            net, config, clients, _ = tiny_setup(rounds=2)
            checksums.append(run_federation(net, config, clients)
                             .params.checksum())
        assert checksums[0] == checksums[1]

    def test_fedprox_mu_zero_equals_fedavg(self):
        net, config, clients, _ = tiny_setup(rounds=2)
        avg = run_federation(net, config, clients).params.checksum()
        net, config, clients, _ = tiny_setup(rounds=2)
        config = dataclasses.replace(config, strategy="fedprox",
                                     fedprox_mu=0.0)
        prox = run_federation(net, config, clients).params.checksum()
        assert avg == prox

    def test_fedprox_positive_mu_changes_result(self):
        net, config, clients, _ = tiny_setup(rounds=2)
        avg = run_federation(net, config, clients).params.checksum()
        net, config, clients, _ = tiny_setup(rounds=2)
        config = dataclasses.replace(config, strategy="fedprox",
                                     fedprox_mu=0.5)
        prox = run_federation(net, config, clients).params.checksum()
        assert avg != prox

    def test_ald_keeps_global_agd_at_initial_values(self):
        net, config, clients, _ = tiny_setup(rounds=2, agd_mode="ald")
        init = net.build(config.seed)
        result = run_federation(net, config, clients)
        for name, t in result.params.groups[GROUP_AGD].items():
            assert np.array_equal(t.data, init.groups[GROUP_AGD][name].data)
        # clients hold their own trained head copies
        assert clients[0].retained_agd is not None
        assert any(not np.array_equal(clients[0].retained_agd[n],
                                      clients[1].retained_agd[n])
                   for n in clients[0].retained_agd)

    def test_agd_mode_none_skips_heads(self):
        net, config, clients, _ = tiny_setup(rounds=1, agd_mode="none")
        init = net.build(config.seed)
        result = run_federation(net, config, clients)
        for name, t in result.params.groups[GROUP_AGD].items():
            assert np.array_equal(t.data, init.groups[GROUP_AGD][name].data)

    def test_single_client_equals_centralized(self):
        net, config, clients, _ = tiny_setup(rounds=3)
        config = dataclasses.replace(config, num_clients=1)
        fed_result = run_federation(net, config, [clients[1]])
        net2, config2, clients2, _ = tiny_setup(rounds=3)
        config2 = dataclasses.replace(config2, num_clients=1)
        cent_result = run_centralized(net2, config2, [clients2[1]])
        assert fed_result.params.checksum() == cent_result.params.checksum()

    def test_localized_is_single_client_centralized(self):
        net, config, clients, _ = tiny_setup(rounds=2)
        loc = run_localized(net, config, clients[0], validate=False)
        net2, config2, clients2, _ = tiny_setup(rounds=2)
        cent = run_centralized(net2, config2, [clients2[0]])
        assert loc.params.checksum() == cent.params.checksum()


class TestEvaluate:
    def test_scores_labeled_organs_only(self):
        net, config, clients, _ = tiny_setup()
        params = net.build(0)
        result = evaluate(net, params, [(1, clients[0].dataset)], "val")
        organs = {organ for (_, organ) in result.per_client_organ}
        assert organs == {1}

    def test_result_structure(self):
        net, config, clients, _ = tiny_setup()
        ds = clients[1].dataset
        result = evaluate(net, net.build(0), [(2, ds)], "test")
        assert 0.0 <= result.global_dsc <= 1.0
        assert result.global_asd >= 0.0
        assert len(result.per_case) == len(ds.splits["test"]) * 2
