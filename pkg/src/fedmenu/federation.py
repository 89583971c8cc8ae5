"""Federated round loop: broadcast, selective local training, dataset-size
weighted aggregation, and the centralized/localized reference modes.

Aggregation follows the literal size-weighted parameter mean over all groups,
including sub-encoders a client never trained (those contribute the broadcast
value back). An optional expert-weighted mode averages each sub-encoder only
over the clients that label its organ.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .losses import LossConfig, training_loss
from .metrics import CaseRecord, EvalResult, asd, dsc, hierarchical_summary
from .network import GROUP_AGD, MenuNet, ParameterSet, subenc_group
from .synthdata import ClientDataset, augment
from .tensor import GradTape, NonFiniteError, Tensor

STRATEGIES = ("fedavg", "fedprox")
AGD_MODES = ("agd", "ald", "none")


class ProtocolError(RuntimeError):
    """The federation protocol contract was violated."""


class TrainingDivergedError(RuntimeError):
    """Local training produced a non-finite loss."""

    def __init__(self, round_index: int, batch_index: int, message: str):
        super().__init__(f"round {round_index}, batch {batch_index}: {message}")
        self.round_index = round_index
        self.batch_index = batch_index


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 4
    num_organs: int = 3
    rounds: int = 40
    local_epochs: int = 1
    base_lr: float = 0.3
    poly_exponent: float = 0.9
    sgd_momentum: float = 0.9
    batch_size: int = 4
    strategy: str = "fedavg"
    fedprox_mu: float = 0.0
    agd_mode: str = "agd"
    seed: int = 0
    eval_every: int = 5
    expert_weighted: bool = False
    augment: bool = False

    def __post_init__(self):
        if self.num_clients < 1 or self.rounds < 0 or self.local_epochs < 1:
            raise ProtocolError("invalid federation sizes")
        if self.strategy not in STRATEGIES:
            raise ProtocolError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "fedprox" and self.fedprox_mu < 0:
            raise ProtocolError("fedprox mu must be >= 0")
        if self.agd_mode not in AGD_MODES:
            raise ProtocolError(f"unknown agd mode {self.agd_mode!r}")


@dataclass
class ClientState:
    client_id: int
    dataset: ClientDataset
    rng: np.random.Generator
    retained_agd: dict | None = None   # ald mode keeps local head weights


@dataclass
class ClientRoundStats:
    client_id: int
    samples: int
    checksum: str
    loss_total: float
    loss_sup: float
    loss_margin: float
    loss_excl: float
    loss_aux: float
    lr: float


@dataclass
class RoundLog:
    round_index: int
    clients: list
    weights: list
    duration: float
    val_dsc: float | None = None


def poly_lr(t: int, config: FederationConfig, epoch: int = 0) -> float:
    """Poly decay base_lr * (1 - s)^exponent over cumulative local epochs,
    s = (t*E + epoch) / (T*E), so runs trading rounds for local epochs at a
    fixed T*E budget see the same schedule. At E=1 this is (1 - t/T)^exp."""
    total = config.rounds * config.local_epochs
    if total <= 0:
        return config.base_lr
    frac = 1.0 - (t * config.local_epochs + epoch) / total
    return config.base_lr * frac ** config.poly_exponent


def make_clients(config: FederationConfig, datasets: list) -> list:
    return [ClientState(client_id=k + 1, dataset=ds,
                        rng=np.random.default_rng((config.seed, k + 1)))
            for k, ds in enumerate(datasets)]


# ---------------------------------------------------------------------------
# optimization

def sgd_step(param: Tensor, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float) -> np.ndarray:
    """One SGD-with-momentum update; returns the new velocity."""
    velocity = momentum * velocity - lr * grad
    param.data = param.data + velocity
    return velocity


def _mean_report(reports: list, field_name: str) -> float:
    return float(np.mean([getattr(r, field_name) for r in reports]))


def _round_stats(client_id: int, samples: int, checksum: str, lr: float,
                 reports: list) -> ClientRoundStats:
    return ClientRoundStats(
        client_id=client_id, samples=samples, checksum=checksum, lr=lr,
        loss_total=_mean_report(reports, "total"),
        loss_sup=_mean_report(reports, "sup_term"),
        loss_margin=_mean_report(reports, "marginal_term"),
        loss_excl=_mean_report(reports, "exclusion_term"),
        loss_aux=_mean_report(reports, "aux_term"))


def _train_one_epoch(net: MenuNet, params: ParameterSet, client: ClientState,
                     lr: float, round_index: int, config: FederationConfig,
                     loss_cfg: LossConfig, velocity: dict,
                     reference: ParameterSet | None) -> list:
    """Run one epoch of mini-batch SGD on ``params`` in place; returns the
    per-batch LossReports."""
    trainable = net.trainable_groups(client.dataset.labeled_set)
    frozen_encoders = frozenset(
        m for m in range(1, net.config.encoders + 1)
        if subenc_group(m) not in trainable)
    train_idx = client.dataset.splits["train"]
    order = [train_idx[i] for i in client.rng.permutation(len(train_idx))]
    with_agd = config.agd_mode != "none"
    ref_flat = reference.flat() if reference is not None else None
    reports = []
    for b0 in range(0, len(order), config.batch_size):
        batch = order[b0:b0 + config.batch_size]
        x, labels = client.dataset.batch(batch)
        if config.augment:
            imgs, labs = [], []
            for i in range(len(batch)):
                img, lab = augment(x.data[i], labels.classes[i], client.rng)
                imgs.append(img)
                labs.append(lab)
            x = Tensor(np.stack(imgs))
            labels.classes = np.stack(labs).astype(np.int64)
        tape = GradTape()
        try:
            out = net.forward(params, x, with_agd=with_agd, tape=tape,
                              agd_organs=labels.labeled_set,
                              frozen_encoders=frozen_encoders)
            agd_probs = {key: t for key, t in out.agd_probs.items()
                         if key[0] in labels.labeled_set} or None
            total, report = training_loss(out.probabilities, labels, agd_probs,
                                          loss_cfg, tape)
        except NonFiniteError as exc:
            raise TrainingDivergedError(round_index, b0 // config.batch_size,
                                        str(exc)) from exc
        if not np.isfinite(report.total):
            raise TrainingDivergedError(round_index, b0 // config.batch_size,
                                        "non-finite training loss")
        tape.backward(total)
        for gid in sorted(trainable):
            for name, t in params.groups[gid].items():
                if t.grad is None:
                    continue
                grad = t.grad
                if ref_flat is not None and config.fedprox_mu > 0:
                    grad = grad + config.fedprox_mu * \
                        (t.data - ref_flat[f"{gid}/{name}"].data)
                key = f"{gid}/{name}"
                if key not in velocity:
                    velocity[key] = np.zeros_like(t.data)
                velocity[key] = sgd_step(t, grad, velocity[key], lr,
                                         config.sgd_momentum)
        params.clear_grads()
        reports.append(report)
    return reports


def local_train(global_params: ParameterSet, client: ClientState, epochs: int,
                round_index: int, net: MenuNet, config: FederationConfig,
                loss_cfg: LossConfig | None = None) -> tuple:
    """Train a private copy of the global model for ``epochs`` epochs.

    Frozen groups come back bit-identical to the broadcast values. Returns
    (trained ParameterSet, list of per-batch LossReports).
    """
    if epochs < 1:
        raise ProtocolError("epochs must be >= 1")
    if not client.dataset.splits["train"]:
        raise ProtocolError(f"client {client.client_id} has no training data")
    loss_cfg = loss_cfg or LossConfig()
    local = global_params.copy()
    if config.agd_mode == "ald" and client.retained_agd is not None:
        for name, arr in client.retained_agd.items():
            local.groups[GROUP_AGD][name].data = arr.copy()
    velocity: dict = {}
    reference = global_params if config.strategy == "fedprox" else None
    reports = []
    for e in range(epochs):
        lr = poly_lr(round_index, config, e)
        reports.extend(_train_one_epoch(net, local, client, lr, round_index,
                                        config, loss_cfg, velocity, reference))
    if config.agd_mode == "ald":
        client.retained_agd = {name: t.data.copy()
                               for name, t in local.groups[GROUP_AGD].items()}
    return local, reports


# ---------------------------------------------------------------------------
# aggregation

def aggregate(locals_: list, sizes: list, exclude_groups: frozenset = frozenset(),
              expert_organs: list | None = None) -> ParameterSet:
    """Size-weighted parameter mean.

    Computed as theta_ref + sum_k w_k (theta_k - theta_ref) so identical
    inputs are an exact bitwise fixed point for any sizes. ``exclude_groups``
    keeps the first model's values untouched by averaging (the caller
    restores them; used for the ald ablation). ``expert_organs`` (one labeled
    set per client) switches each sub-encoder to averaging only over the
    clients that label its organ.
    """
    if not locals_ or len(locals_) != len(sizes):
        raise ProtocolError("aggregate: models and sizes must match and be non-empty")
    if any(s <= 0 for s in sizes):
        raise ProtocolError("aggregate: sizes must be positive")
    base = locals_[0]
    for other in locals_[1:]:
        base.require_same_structure(other)
    total = float(sum(sizes))
    result = base.copy()
    for gid, tensors in result.groups.items():
        if gid in exclude_groups:
            continue
        if expert_organs is not None and gid.startswith("subenc"):
            organ = int(gid[len("subenc"):])
            members = [k for k, labeled in enumerate(expert_organs)
                       if organ in labeled]
            if not members:
                continue
        else:
            members = list(range(len(locals_)))
        member_total = float(sum(sizes[k] for k in members))
        for name, t in tensors.items():
            ref = locals_[members[0]].groups[gid][name].data
            acc = ref.copy()
            for k in members:
                acc += (sizes[k] / member_total) * \
                    (locals_[k].groups[gid][name].data - ref)
            t.data = acc
    return result


# ---------------------------------------------------------------------------
# evaluation

def predict_masks(net: MenuNet, params: ParameterSet, image: np.ndarray) -> np.ndarray:
    """Argmax class map for one image [1,H,W]; ties take the lowest class id."""
    out = net.forward(params, Tensor(image[None]), with_agd=False)
    return out.probabilities.data[0].argmax(axis=0)


def evaluate(net: MenuNet, params: ParameterSet, datasets: list,
             split: str = "val", organs: dict | None = None) -> EvalResult:
    """Evaluate on the given split of each (client_id, ClientDataset) pair.

    ``organs`` optionally maps client id to the organ ids to score; defaults
    to each dataset's labeled set.
    """
    records = []
    labeled_sets = {}
    for client_id, ds in datasets:
        score_organs = sorted(organs[client_id]) if organs else sorted(ds.labeled_set)
        labeled_sets[client_id] = set(score_organs)
        cases = list(ds.splits[split])
        if not cases:
            continue
        batch = Tensor(np.stack([ds.images[c] for c in cases]))
        out = net.forward(params, batch, with_agd=False)
        preds = out.probabilities.data.argmax(axis=1)
        for pred, case in zip(preds, cases):
            gt = ds.full_labels[case]
            for organ in score_organs:
                pm = pred == organ
                gm = gt == organ
                records.append(CaseRecord(
                    client=client_id, case=case, organ=organ,
                    dsc=dsc(pm, gm), asd=asd(pm, gm),
                    pred_empty=not pm.any(), gt_empty=not gm.any()))
    return hierarchical_summary(records, labeled_sets)


# ---------------------------------------------------------------------------
# training modes

@dataclass
class TrainResult:
    params: ParameterSet
    logs: list
    best_round: int = -1
    best_dsc: float = float("nan")


def run_federation(net: MenuNet, config: FederationConfig, clients: list,
                   val_datasets: list | None = None, checkpoint_dir=None,
                   loss_cfg: LossConfig | None = None) -> TrainResult:
    """Synchronous-barrier round loop; returns the validation-best model (or
    the final one when no validation sets are given) plus round logs."""
    from . import io as fio

    loss_cfg = loss_cfg or LossConfig()
    global_params = net.build(config.seed)
    logs: list = []
    best_params = None
    best_dsc = -np.inf
    best_round = -1
    sizes = [len(c.dataset.splits["train"]) for c in clients]
    total_size = sum(sizes)
    for t in range(config.rounds):
        start = time.monotonic()
        trained = []
        stats = []
        lr = poly_lr(t, config)
        for client, size in zip(clients, sizes):
            local, reports = local_train(global_params, client,
                                         config.local_epochs, t, net, config,
                                         loss_cfg)
            trained.append(local)
            stats.append(_round_stats(client.client_id, size,
                                      local.checksum(), lr, reports))
        if config.agd_mode == "ald":
            # heads stay local: restore the broadcast values after averaging
            old_agd = {name: tensor.data.copy() for name, tensor
                       in global_params.groups[GROUP_AGD].items()}
            global_params = aggregate(trained, sizes,
                                      exclude_groups=frozenset({GROUP_AGD}))
            for name, tensor in global_params.groups[GROUP_AGD].items():
                tensor.data = old_agd[name]
        else:
            expert = [c.dataset.labeled_set for c in clients] \
                if config.expert_weighted else None
            global_params = aggregate(trained, sizes, expert_organs=expert)
        val_dsc = None
        if val_datasets and ((t + 1) % config.eval_every == 0
                             or t == config.rounds - 1):
            val_dsc = evaluate(net, global_params, val_datasets, "val").global_dsc
            if val_dsc > best_dsc:
                best_dsc = val_dsc
                best_round = t
                best_params = global_params.copy()
                if checkpoint_dir is not None:
                    fio.write_checkpoint(checkpoint_dir / f"round_{t}.ckpt",
                                         best_params.to_arrays())
                    fio.write_checkpoint(checkpoint_dir / "best.ckpt",
                                         best_params.to_arrays())
        logs.append(RoundLog(round_index=t, clients=stats,
                             weights=[s / total_size for s in sizes],
                             duration=time.monotonic() - start, val_dsc=val_dsc))
    if best_params is None:
        best_params = global_params
        best_dsc = float("nan")
    return TrainResult(params=best_params, logs=logs, best_round=best_round,
                       best_dsc=best_dsc)


def run_centralized(net: MenuNet, config: FederationConfig, clients: list,
                    val_datasets: list | None = None,
                    loss_cfg: LossConfig | None = None) -> TrainResult:
    """Pooled training with the same schedule: each round visits every
    client's shuffled batches in client-id order on one shared model. Batches
    keep their sample's own labeled set for the partial loss."""
    loss_cfg = loss_cfg or LossConfig()
    params = net.build(config.seed)
    logs: list = []
    best_params = None
    best_dsc = -np.inf
    best_round = -1
    sizes = [len(c.dataset.splits["train"]) for c in clients]
    total_size = sum(sizes)
    for t in range(config.rounds):
        start = time.monotonic()
        velocity: dict = {}
        stats = []
        for e in range(config.local_epochs):
            lr = poly_lr(t, config, e)
            for client, size in zip(clients, sizes):
                reports = _train_one_epoch(net, params, client, lr, t, config,
                                           loss_cfg, velocity, None)
                stats.append(_round_stats(client.client_id, size, "", lr,
                                          reports))
        val_dsc = None
        if val_datasets and ((t + 1) % config.eval_every == 0
                             or t == config.rounds - 1):
            val_dsc = evaluate(net, params, val_datasets, "val").global_dsc
            if val_dsc > best_dsc:
                best_dsc, best_round = val_dsc, t
                best_params = params.copy()
        logs.append(RoundLog(round_index=t, clients=stats,
                             weights=[s / total_size for s in sizes],
                             duration=time.monotonic() - start, val_dsc=val_dsc))
    if best_params is None:
        best_params = params
        best_dsc = float("nan")
    return TrainResult(params=best_params, logs=logs, best_round=best_round,
                       best_dsc=best_dsc)


def run_localized(net: MenuNet, config: FederationConfig, client: ClientState,
                  validate: bool = True,
                  loss_cfg: LossConfig | None = None) -> TrainResult:
    """Train on a single client only, same optimizer and schedule. The model
    is evaluated only on the client's own labeled organs."""
    val_sets = [(client.client_id, client.dataset)] if validate else None
    return run_centralized(net, config, [client], val_sets, loss_cfg)
