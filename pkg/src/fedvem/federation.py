"""Server/client protocol for confidence-weighted personalized training.

Each round: the server broadcasts the latent head w and shared base theta;
every client recomputes its confidence, trains its head posterior by
full-batch gradient descent on the Monte-Carlo objective, then its base copy
by mini-batch SGD; a binomial subset reports back and the server aggregates
heads by confidence and bases by data size.  Non-reporters keep their local
state (stragglers still train).

Per-(seed, round, client) random streams make results independent of worker
scheduling; client updates within a round may run on a process pool.
"""

from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics, rng as rng_mod
from .data import Dataset, Partition, pm_test_indices
from .nn import (InputError, Layer, MlpParams, NumericError, backward,
                 flatten_head, forward_base, init_mlp, sgd_step,
                 unflatten_head)
from .variational import (IsotropicPrior, VariationalPosterior, confidence,
                          fit_posterior, head_loss_closure, sample,
                          softplus_inv)

CHECKPOINT_MAGIC = b"FVEM"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Numeric failure during a round; names the round and client."""


@dataclass
class TrainConfig:
    T: int = 100                 # communication rounds
    R: int = 10                  # local head epochs (full-batch GD steps)
    K: int = 5                   # MC samples per head step
    eta: float = 1e-3            # head learning rate
    base_lr: float = 1e-2        # base-model SGD rate
    base_epochs: int = 5
    base_batch: int = 50
    s: float = 0.1               # per-client reporting probability
    rho0_sq: float = 0.1         # initial prior variance
    confidence_mode: str = "full"
    seed: int = 0
    hidden: tuple = (100,)
    train_reporters_only: bool = False  # literal protocol trains everyone

    def violations(self) -> list[str]:
        out = []
        if not 0 < self.s <= 1:
            out.append(f"TrainConfig.s: must satisfy 0 < s <= 1, got {self.s}")
        if self.K < 1:
            out.append(f"TrainConfig.K: must be >= 1, got {self.K}")
        if self.R < 1:
            out.append(f"TrainConfig.R: must be >= 1, got {self.R}")
        if self.rho0_sq <= 0:
            out.append(f"TrainConfig.rho0_sq: must be positive, got {self.rho0_sq}")
        if self.T < 0:
            out.append(f"TrainConfig.T: must be >= 0, got {self.T}")
        if self.eta < 0:
            out.append(f"TrainConfig.eta: must be >= 0, got {self.eta}")
        if self.base_lr < 0:
            out.append(f"TrainConfig.base_lr: must be >= 0, got {self.base_lr}")
        if self.base_epochs < 0:
            out.append("TrainConfig.base_epochs: must be >= 0")
        if self.base_batch < 1:
            out.append("TrainConfig.base_batch: must be >= 1")
        if self.confidence_mode not in ("full", "uncertainty_only", "deviation_only"):
            out.append(
                f"TrainConfig.confidence_mode: unknown mode {self.confidence_mode!r}")
        if not self.hidden:
            out.append("TrainConfig.hidden: need at least one hidden layer")
        return out


@dataclass
class GlobalState:
    w: np.ndarray          # latent head vector
    theta: list[Layer]     # shared base model
    t: int = 0


@dataclass
class ClientState:
    id: int
    x: np.ndarray
    y: np.ndarray
    posterior: VariationalPosterior
    tau: float
    theta_local: list[Layer]

    @property
    def n(self) -> int:
        return len(self.x)


def select_reporters(n_clients: int, s: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Each client reports independently with probability s."""
    if not 0 <= s <= 1:
        raise InputError(f"reporting probability must lie in [0, 1], got {s}")
    return np.flatnonzero(rng.random(n_clients) < s)


def aggregate_heads(mus: list[np.ndarray], taus: list[float]) -> np.ndarray:
    """Confidence-weighted mean of reporter head means."""
    if not mus:
        raise InputError("no reporters to aggregate")
    d = mus[0].size
    if any(mu.size != d for mu in mus):
        raise InputError("reporter head dimensions disagree")
    taus = np.asarray(taus, dtype=float)
    stacked = np.stack(mus)
    return (taus[:, None] * stacked).sum(axis=0) / taus.sum()


def aggregate_base(thetas: list[list[Layer]], ns: list[int]) -> list[Layer]:
    """Data-size-weighted average of reporter base models, per parameter."""
    if not thetas:
        raise InputError("no reporters to aggregate")
    total = float(sum(ns))
    if total <= 0:
        raise InputError("total reporter data size must be positive")
    out = []
    for k in range(len(thetas[0])):
        w = sum(n * th[k][0] for n, th in zip(ns, thetas)) / total
        b = sum(n * th[k][1] for n, th in zip(ns, thetas)) / total
        out.append((w, b))
    return out


def client_update(client: ClientState, globals_: GlobalState, cfg: TrainConfig,
                  rng: np.random.Generator) -> ClientState:
    """One round of local work against the freshly received (w, theta).

    Order per the protocol: recompute the confidence against the new w
    (round 0 uses the configured initial variance), train the head posterior
    for R full-batch steps, then train the base copy with the head held as a
    posterior sample per mini-batch.
    """
    d = client.posterior.d
    if globals_.t == 0:
        tau = 1.0 / cfg.rho0_sq
    else:
        tau = confidence(client.posterior, globals_.w,
                         mode=cfg.confidence_mode).tau
    prior = IsotropicPrior(center=globals_.w, tau=tau)

    features = forward_base(globals_.theta, client.x)
    width = features.shape[1]
    classes = d // (width + 1)
    closure = head_loss_closure(features, client.y, classes)
    try:
        post = fit_posterior(client.posterior, prior, closure,
                             steps=cfg.R, lr=cfg.eta, K=cfg.K, rng=rng)
    except FloatingPointError as exc:
        raise TrainingError(
            f"round {globals_.t}, client {client.id}: {exc}") from exc

    theta = [(w.copy(), b.copy()) for w, b in globals_.theta]
    head_like = (np.zeros((classes, width)), np.zeros(classes))
    for _ in range(cfg.base_epochs):
        perm = rng.permutation(client.n)
        for start in range(0, client.n, cfg.base_batch):
            batch = perm[start:start + cfg.base_batch]
            head_vec = sample(post, rng.standard_normal(d))
            params = MlpParams(base=theta,
                               head=unflatten_head(head_vec, head_like))
            grads = backward(params, client.x[batch], client.y[batch])
            try:
                theta = sgd_step(MlpParams(base=theta, head=params.head),
                                 MlpParams(base=grads.base, head=grads.head),
                                 cfg.base_lr).base
            except NumericError as exc:
                raise TrainingError(
                    f"round {globals_.t}, client {client.id}: {exc}") from exc

    return ClientState(id=client.id, x=client.x, y=client.y,
                       posterior=post, tau=tau, theta_local=theta)


def _update_worker(args) -> ClientState:
    client, globals_, cfg = args
    rng = rng_mod.stream(cfg.seed, rng_mod.TAG_CLIENT, globals_.t, client.id)
    return client_update(client, globals_, cfg, rng)


def serialize_upload(mu: np.ndarray, tau: float, theta: list[Layer]) -> bytes:
    """Reporter payload: head mean + base parameters + exactly one scalar."""
    parts = [np.asarray(mu, dtype="<f8").tobytes()]
    for w, b in theta:
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(struct.pack("<d", tau))
    return b"".join(parts)


def deserialize_upload(buf: bytes, d: int,
                       theta_like: list[Layer]) -> tuple[np.ndarray, float, list[Layer]]:
    mu = np.frombuffer(buf, dtype="<f8", count=d).copy()
    offset = 8 * d
    theta = []
    for w, b in theta_like:
        wv = np.frombuffer(buf, dtype="<f8", count=w.size, offset=offset)
        offset += 8 * w.size
        bv = np.frombuffer(buf, dtype="<f8", count=b.size, offset=offset)
        offset += 8 * b.size
        theta.append((wv.reshape(w.shape).copy(), bv.copy()))
    (tau,) = struct.unpack_from("<d", buf, offset)
    if offset + 8 != len(buf):
        raise InputError("upload payload has trailing bytes")
    return mu, tau, theta


def run_round(globals_: GlobalState, clients: list[ClientState],
              cfg: TrainConfig, pool: ProcessPoolExecutor | None = None,
              ) -> tuple[GlobalState, list[ClientState], np.ndarray]:
    """Execute one communication round; returns (state, clients, reporter ids)."""
    reporters = select_reporters(len(clients), cfg.s,
                                 rng_mod.stream(cfg.seed, rng_mod.TAG_REPORTERS,
                                                globals_.t))
    if cfg.train_reporters_only:
        to_train = set(reporters.tolist())
    else:
        to_train = set(range(len(clients)))

    jobs = [(c, globals_, cfg) for c in clients if c.id in to_train]
    if pool is None:
        updated = list(map(_update_worker, jobs))
    else:
        updated = list(pool.map(_update_worker, jobs))
    by_id = {c.id: c for c in updated}
    new_clients = [by_id.get(c.id, c) for c in clients]

    if len(reporters) == 0:
        new_globals = GlobalState(w=globals_.w.copy(),
                                  theta=[(w.copy(), b.copy())
                                         for w, b in globals_.theta],
                                  t=globals_.t + 1)
        return new_globals, new_clients, reporters

    # route reporter state through the wire format to keep the payload honest
    d = globals_.w.size
    payloads = [serialize_upload(new_clients[j].posterior.mu,
                                 new_clients[j].tau,
                                 new_clients[j].theta_local)
                for j in reporters]
    received = [deserialize_upload(p, d, globals_.theta) for p in payloads]
    mus = [m for m, _, _ in received]
    taus = [t for _, t, _ in received]
    thetas = [th for _, _, th in received]
    ns = [new_clients[j].n for j in reporters]

    new_globals = GlobalState(w=aggregate_heads(mus, taus),
                              theta=aggregate_base(thetas, ns),
                              t=globals_.t + 1)
    return new_globals, new_clients, reporters


def init_state(cfg: TrainConfig, train_ds: Dataset,
               partition: Partition) -> tuple[GlobalState, list[ClientState]]:
    """Seeded parameter initialization and per-client posterior setup."""
    rng = rng_mod.stream(cfg.seed, rng_mod.TAG_INIT)
    params = init_mlp(train_ds.input_dim, tuple(cfg.hidden), train_ds.classes, rng)
    w0 = flatten_head(params.head)
    pi0 = float(softplus_inv(np.sqrt(cfg.rho0_sq)))
    clients = []
    for j, idx in enumerate(partition.client_indices):
        post = VariationalPosterior(mu=w0.copy(), pi=np.full(w0.size, pi0))
        clients.append(ClientState(
            id=j, x=train_ds.images[idx], y=train_ds.labels[idx],
            posterior=post, tau=1.0 / cfg.rho0_sq,
            theta_local=[(w.copy(), b.copy()) for w, b in params.base]))
    return GlobalState(w=w0, theta=params.base, t=0), clients


def _round_report(globals_: GlobalState, clients: list[ClientState],
                  test_ds: Dataset, partition: Partition,
                  reporters: np.ndarray) -> metrics.RoundReport:
    features = forward_base(globals_.theta, test_ds.images)
    d = globals_.w.size
    width = features.shape[1]
    classes = d // (width + 1)

    def head_acc(head_vec, idx):
        w = head_vec[: classes * width].reshape(classes, width)
        b = head_vec[classes * width:]
        logits = features[idx] @ w.T + b
        return float((logits.argmax(axis=1) == test_ds.labels[idx]).mean())

    gm = head_acc(globals_.w, np.arange(len(test_ds)))
    pm = []
    for c in clients:
        idx = pm_test_indices(partition, test_ds, c.id)
        pm.append(head_acc(c.posterior.mu, idx) if len(idx) else None)
    ratios, deviations = metrics.stats_snapshot(clients, globals_.w)
    return metrics.RoundReport(
        round=globals_.t - 1,
        gm_accuracy=gm,
        client_ids=[c.id for c in clients],
        client_sizes=[c.n for c in clients],
        pm_accuracies=pm,
        confidence_ratios=ratios.tolist(),
        model_deviations=deviations.tolist(),
        reporter_count=int(len(reporters)),
        no_reporters=len(reporters) == 0,
    )


def run_training(cfg: TrainConfig, train_ds: Dataset, test_ds: Dataset,
                 partition: Partition, workers: int = 1,
                 checkpoint_dir=None,
                 ) -> tuple[GlobalState, list[ClientState], list[metrics.RoundReport]]:
    """Full T-round protocol with per-round evaluation."""
    bad = cfg.violations()
    if bad:
        raise InputError("; ".join(bad))
    globals_, clients = init_state(cfg, train_ds, partition)
    reports: list[metrics.RoundReport] = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for _ in range(cfg.T):
            globals_, clients, reporters = run_round(globals_, clients, cfg, pool)
            reports.append(_round_report(globals_, clients, test_ds,
                                         partition, reporters))
            if checkpoint_dir is not None:
                write_checkpoint(
                    f"{checkpoint_dir}/round{globals_.t:04d}.fvem",
                    globals_, clients)
    finally:
        if pool is not None:
            pool.shutdown()
    return globals_, clients, reports


def write_checkpoint(path, globals_: GlobalState,
                     clients: list[ClientState]) -> None:
    """Binary snapshot: header + little-endian f64 payload.

    Layout: magic "FVEM", version u32, d u32, J u32, base layer count u32,
    per-layer (out, in) u32 pairs, round u64, then w, theta (row-major W
    then b per layer), and per client mu, pi, tau.
    """
    d = globals_.w.size
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<III", CHECKPOINT_VERSION, d, len(clients)))
        f.write(struct.pack("<I", len(globals_.theta)))
        for w, _ in globals_.theta:
            f.write(struct.pack("<II", *w.shape))
        f.write(struct.pack("<Q", globals_.t))
        f.write(np.asarray(globals_.w, dtype="<f8").tobytes())
        for w, b in globals_.theta:
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        for c in clients:
            f.write(np.asarray(c.posterior.mu, dtype="<f8").tobytes())
            f.write(np.asarray(c.posterior.pi, dtype="<f8").tobytes())
            f.write(struct.pack("<d", c.tau))


def read_checkpoint(path) -> tuple[GlobalState, list[dict]]:
    """Inverse of write_checkpoint; clients come back as plain dicts."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: bad checkpoint magic")
    version, d, n_clients = struct.unpack_from("<III", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    (n_layers,) = struct.unpack_from("<I", raw, 16)
    offset = 20
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<II", raw, offset))
        offset += 8
    (t,) = struct.unpack_from("<Q", raw, offset)
    offset += 8

    def take(count):
        nonlocal offset
        out = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).copy()
        offset += 8 * count
        return out

    w = take(d)
    theta = []
    for out_dim, in_dim in shapes:
        theta.append((take(out_dim * in_dim).reshape(out_dim, in_dim),
                      take(out_dim)))
    clients = []
    for _ in range(n_clients):
        mu = take(d)
        pi = take(d)
        tau = take(1)[0]
        clients.append({"mu": mu, "pi": pi, "tau": float(tau)})
    return GlobalState(w=w, theta=theta, t=int(t)), clients
