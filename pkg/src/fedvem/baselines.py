"""Reference schemes: Local, FedAvg, FedProx.

All three share the MLP, the partition object, the seeded initialization,
and the reporter/straggler semantics of the federated protocol, so paired
comparisons isolate the objective and aggregation differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics, rng as rng_mod
from .data import Dataset, Partition, pm_test_indices
from .federation import aggregate_base, select_reporters
from .nn import (InputError, MlpParams, backward, flatten_head, forward,
                 init_mlp, sgd_step, zeros_like)

SCHEMES = ("local", "fedavg", "fedprox")


@dataclass
class BaselineConfig:
    scheme: str = "fedavg"
    lr: float = 1e-2
    epochs: int = 5            # R, local epochs per round (Local: total epochs)
    batch: int = 50
    mu_prox: float = 0.0       # FedProx proximal constant
    T: int = 100
    s: float = 0.1
    seed: int = 0
    hidden: tuple = (100,)

    def violations(self) -> list[str]:
        out = []
        if self.scheme not in SCHEMES:
            out.append(f"BaselineConfig.scheme: unknown scheme {self.scheme!r}")
        if self.lr < 0:
            out.append("BaselineConfig.lr: must be >= 0")
        if self.epochs < 1:
            out.append("BaselineConfig.epochs: must be >= 1")
        if self.batch < 1:
            out.append("BaselineConfig.batch: must be >= 1")
        if self.mu_prox < 0:
            out.append("BaselineConfig.mu_prox: must be >= 0")
        if self.scheme != "local" and not 0 < self.s <= 1:
            out.append(f"BaselineConfig.s: must satisfy 0 < s <= 1, got {self.s}")
        return out


def proximal_grads(params: MlpParams, anchor: MlpParams,
                   mu_prox: float) -> MlpParams:
    """Gradient of (mu_prox / 2) * ||params - anchor||^2."""
    out = zeros_like(params)
    for (gw, gb), (pw, pb), (aw, ab) in zip(out.base, params.base, anchor.base):
        gw += mu_prox * (pw - aw)
        gb += mu_prox * (pb - ab)
    out.head[0][...] = mu_prox * (params.head[0] - anchor.head[0])
    out.head[1][...] = mu_prox * (params.head[1] - anchor.head[1])
    return out


def _sgd_epochs(params: MlpParams, x: np.ndarray, y: np.ndarray,
                lr: float, epochs: int, batch: int,
                rng: np.random.Generator,
                mu_prox: float = 0.0,
                anchor: MlpParams | None = None) -> MlpParams:
    n = len(x)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch):
            ix = perm[start:start + batch]
            extra = (proximal_grads(params, anchor, mu_prox)
                     if mu_prox > 0 and anchor is not None else None)
            grads = backward(params, x[ix], y[ix], extra_loss_grads=extra)
            params = sgd_step(params, grads, lr)
    return params


def local_train(x: np.ndarray, y: np.ndarray, params: MlpParams,
                cfg: BaselineConfig, rng: np.random.Generator) -> MlpParams:
    """Standalone per-client training; no communication."""
    if len(x) == 0:
        raise InputError("client dataset is empty")
    return _sgd_epochs(params.copy(), x, y, cfg.lr, cfg.epochs, cfg.batch, rng)


def _client_sgd(theta_full: MlpParams, x, y, cfg: BaselineConfig,
                rng: np.random.Generator, proximal: bool) -> MlpParams:
    anchor = theta_full.copy() if proximal else None
    return _sgd_epochs(theta_full.copy(), x, y, cfg.lr, cfg.epochs, cfg.batch,
                       rng, mu_prox=cfg.mu_prox if proximal else 0.0,
                       anchor=anchor)


def _aggregate_full(models: list[MlpParams], ns: list[int]) -> MlpParams:
    base = aggregate_base([m.base for m in models], ns)
    head = aggregate_base([[m.head] for m in models], ns)[0]
    return MlpParams(base=base, head=head)


def fedavg_round(theta_full: MlpParams, clients_xy: list[tuple[np.ndarray, np.ndarray]],
                 cfg: BaselineConfig, t: int, proximal: bool = False) -> MlpParams:
    """One round: reporters run local SGD from the broadcast, server averages.

    Reporter selection uses the same seeded stream layout as the federated
    protocol, so straggler draws match across schemes for a given seed.
    Non-reporting clients are stateless here, so their training is skipped.
    """
    reporters = select_reporters(len(clients_xy), cfg.s,
                                 rng_mod.stream(cfg.seed, rng_mod.TAG_REPORTERS, t))
    if len(reporters) == 0:
        return theta_full
    models, ns = [], []
    for j in reporters:
        x, y = clients_xy[j]
        rng = rng_mod.stream(cfg.seed, rng_mod.TAG_CLIENT, t, int(j))
        models.append(_client_sgd(theta_full, x, y, cfg, rng, proximal))
        ns.append(len(x))
    return _aggregate_full(models, ns)


def fedprox_round(theta_full: MlpParams, clients_xy, cfg: BaselineConfig,
                  t: int) -> MlpParams:
    """FedAvg round with the proximal penalty added to local gradients."""
    return fedavg_round(theta_full, clients_xy, cfg, t, proximal=True)


def _gm_report(t: int, params: MlpParams, clients_xy, test_ds: Dataset,
               partition: Partition, reporter_count: int) -> metrics.RoundReport:
    gm = metrics.accuracy(params, test_ds.images, test_ds.labels)
    pm = []
    for j in range(len(clients_xy)):
        idx = pm_test_indices(partition, test_ds, j)
        if len(idx) == 0:
            pm.append(None)
        else:
            pm.append(metrics.accuracy(params, test_ds.images[idx],
                                       test_ds.labels[idx]))
    J = len(clients_xy)
    return metrics.RoundReport(
        round=t, gm_accuracy=gm,
        client_ids=list(range(J)),
        client_sizes=[len(x) for x, _ in clients_xy],
        pm_accuracies=pm,
        confidence_ratios=[1.0 / J] * J,
        model_deviations=[0.0] * J,
        reporter_count=reporter_count,
        no_reporters=reporter_count == 0,
    )


def run_baseline(cfg: BaselineConfig, train_ds: Dataset, test_ds: Dataset,
                 partition: Partition) -> list[metrics.RoundReport]:
    """Run a baseline end to end and return per-round reports.

    For `local`, a single report is produced after per-client training; its
    pm_accuracies are the clients' own models on their filtered test sets.
    For `fedavg`/`fedprox`, pm_accuracies hold the global model applied to
    each client's filtered test set.
    """
    bad = cfg.violations()
    if bad:
        raise InputError("; ".join(bad))
    init_rng = rng_mod.stream(cfg.seed, rng_mod.TAG_INIT)
    params0 = init_mlp(train_ds.input_dim, tuple(cfg.hidden), train_ds.classes,
                       init_rng)
    clients_xy = [(train_ds.images[ix], train_ds.labels[ix])
                  for ix in partition.client_indices]

    if cfg.scheme == "local":
        pm = []
        for j, (x, y) in enumerate(clients_xy):
            rng = rng_mod.stream(cfg.seed, rng_mod.TAG_BASELINE, j)
            model = local_train(x, y, params0, cfg, rng)
            idx = pm_test_indices(partition, test_ds, j)
            pm.append(metrics.accuracy(model, test_ds.images[idx],
                                       test_ds.labels[idx])
                      if len(idx) else None)
        J = len(clients_xy)
        report = metrics.RoundReport(
            round=0, gm_accuracy=float("nan"),
            client_ids=list(range(J)),
            client_sizes=[len(x) for x, _ in clients_xy],
            pm_accuracies=pm,
            confidence_ratios=[1.0 / J] * J,
            model_deviations=[0.0] * J,
            reporter_count=0, no_reporters=True)
        return [report]

    proximal = cfg.scheme == "fedprox"
    params = params0
    reports = []
    for t in range(cfg.T):
        reporters = select_reporters(
            len(clients_xy), cfg.s,
            rng_mod.stream(cfg.seed, rng_mod.TAG_REPORTERS, t))
        params = fedavg_round(params, clients_xy, cfg, t, proximal=proximal)
        reports.append(_gm_report(t, params, clients_xy, test_ds, partition,
                                  len(reporters)))
    return reports
