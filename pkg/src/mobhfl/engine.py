"""Mobility-aware hierarchical federated averaging.

One cloud epoch is ``tau_e`` edge epochs followed by a cloud aggregation; one
edge epoch is: edge distribution, ``tau_l`` local SGD steps on every vehicle,
one mobility step, edge aggregation over the (new) coverage sets. Vehicles
therefore may download from one edge server and upload to another.

Alongside the fleet the engine tracks the two virtual models used by the
convergence analysis: the data-weighted average ``u`` of all local models and
the full-gradient trajectory ``v`` that is resynchronised to ``u`` at every
cloud aggregation.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import mobility as mob
from .data import label_distribution, probability_difference
from .errors import ConfigError, ContractError, EmptyEdgeError, MobHFLError, NumericError, RunError
from .model import (evaluate_accuracy, fleet_loss_and_gradient, forward_loss, init_params,
                    loss_and_gradient, sgd_step)

log = logging.getLogger(__name__)

WEIGHT_TOL = 1e-12
CARRY_FORWARD = "carry-forward"
FAIL = "fail"

LOCAL, EDGE_AGG, CLOUD_AGG = "local", "edge_agg", "cloud_agg"


@dataclass(frozen=True)
class Scenario:
    kind: str = "static"
    Q: np.ndarray | None = field(default=None, compare=False)
    trace: mob.TrajectoryTrace | None = field(default=None, compare=False)

    @classmethod
    def static(cls):
        return cls("static")

    @classmethod
    def markov(cls, Q):
        return cls("markov", Q=mob.validate_transition(Q))

    @classmethod
    def from_trace(cls, trace):
        return cls("trace", trace=trace)

    def initial(self, M):
        if self.kind == "trace":
            return mob.assignments_at(self.trace, 0, M)
        return None

    def step(self, assignment, seed, j):
        """Assignment after the ``j``-th mobility step (``j >= 1``)."""
        if self.kind == "static":
            return assignment
        if self.kind == "markov":
            return mob.step_assignments(assignment, self.Q, seed, j)
        return mob.assignments_at(self.trace, j, len(assignment))


@dataclass
class HFLConfig:
    M: int = 32
    N: int = 4
    tau_l: int = 6
    tau_e: int = 10
    K: int = 600
    eta: float = 0.1
    batch_size: int = 20
    scenario: Scenario = field(default_factory=Scenario.static)
    full_batch: bool = False
    empty_edge_policy: str = CARRY_FORWARD
    workers: int = 1
    seed: int = 0
    log_local: bool = True

    def validate(self):
        if not self.M >= self.N >= 1:
            raise ConfigError("need M >= N >= 1")
        for key in ("tau_l", "tau_e", "K", "batch_size", "workers"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key=key)
        if not self.eta > 0:
            raise ConfigError("eta must be positive", key="eta")
        if self.empty_edge_policy not in (CARRY_FORWARD, FAIL):
            raise ConfigError(f"unknown empty-edge policy {self.empty_edge_policy!r}",
                              key="empty_edge_policy")


@dataclass
class RoundRecord:
    tau: int
    cloud_epoch: int
    edge_round: int
    event: str
    test_accuracy: float | None
    train_loss: float
    cf_difference: float
    avg_prob_difference: float
    theta: tuple


@dataclass
class RunResult:
    records: list
    cloud_models: list          # w^(k tau_l tau_e) for k = 0..K
    v_tilde_boundaries: list    # unsynchronised v~ at tau = k tau_l tau_e, k = 0..K
    assignments: list           # membership after mobility step j, j = 0..K*tau_e
    final_params: np.ndarray


def balanced_assignment(M, N, seed):
    """Random initial placement with edge loads differing by at most one."""
    base = np.arange(M) % N
    return np.random.default_rng([int(seed), 0xA551]).permutation(base)


def data_weights(sizes):
    sizes = np.asarray(sizes, dtype=np.float64)
    return sizes / sizes.sum()


def edge_weights(assignment, sizes, N):
    """``theta_n``: share of all data held by vehicles covered by edge ``n``."""
    return np.bincount(np.asarray(assignment), weights=np.asarray(sizes, dtype=np.float64),
                       minlength=N) / float(np.sum(sizes))


def edge_distribute(edge_models, assignment):
    """Every vehicle receives the model of the edge server covering it."""
    return np.array(np.asarray(edge_models)[np.asarray(assignment)], dtype=np.float64)


def edge_aggregate(params, assignment, sizes, N, previous=None, policy=CARRY_FORWARD):
    """Data-size weighted mean of the covered vehicles' models, per edge.

    Empty edges keep ``previous[n]`` under ``carry-forward`` and raise under ``fail``.
    """
    params = np.asarray(params, dtype=np.float64)
    assignment = np.asarray(assignment)
    sizes = np.asarray(sizes, dtype=np.float64)
    out = np.empty((N, params.shape[1]))
    for n in range(N):
        members = np.flatnonzero(assignment == n)
        if members.size == 0:
            if policy == FAIL or previous is None:
                raise EmptyEdgeError(f"edge {n} covers no vehicle")
            log.info("edge %d is empty; carrying its previous model forward", n)
            out[n] = previous[n]
            continue
        alpha = sizes[members] / sizes[members].sum()
        acc = np.zeros(params.shape[1])
        for a, m in zip(alpha, members):
            acc += a * params[m]
        out[n] = acc
    return out


def cloud_aggregate(edge_models, theta):
    theta = np.asarray(theta, dtype=np.float64)
    if abs(theta.sum() - 1.0) > WEIGHT_TOL or np.any(theta < 0):
        raise ContractError(f"edge weights must be nonnegative and sum to 1 (sum={theta.sum()!r})")
    acc = np.zeros(np.asarray(edge_models).shape[1])
    for t, w in zip(theta, edge_models):
        if t > 0:
            acc += t * w
    return acc


def virtual_cloud(params, sizes):
    """Data-weighted average of all local models."""
    alpha = data_weights(sizes)
    acc = np.zeros(np.asarray(params).shape[1])
    for a, w in zip(alpha, params):
        acc += a * w
    return acc


def virtual_centralized_step(v, spec, full_batch, eta):
    """One exact full-gradient step on the pooled training data."""
    _, g = loss_and_gradient(spec, v, full_batch)
    return sgd_step(v, g, eta)


def cf_difference(u, v_tilde):
    u = np.asarray(u)
    v_tilde = np.asarray(v_tilde)
    if u.shape != v_tilde.shape:
        raise ContractError("virtual models differ in shape")
    return float(np.linalg.norm(u - v_tilde))


class BatchStream:
    """Sampling without replacement over a shard, reshuffled every pass by a
    generator owned by this vehicle and keyed by ``(seed, vehicle)``."""

    def __init__(self, shard, seed, vehicle):
        self.shard = np.asarray(shard, dtype=np.int64)
        self.rng = np.random.default_rng([int(seed), 0xBA7C, int(vehicle)])
        self.passes = 0
        self.order = self.rng.permutation(self.shard)
        self.cursor = 0

    def next(self, size):
        out = []
        while size > 0:
            if self.cursor == len(self.order):
                self.passes += 1
                self.order = self.rng.permutation(self.shard)
                self.cursor = 0
            take = min(size, len(self.order) - self.cursor)
            out.append(self.order[self.cursor:self.cursor + take])
            self.cursor += take
            size -= take
        return out[0] if len(out) == 1 else np.concatenate(out)


class LocalTrainer:
    """Runs local SGD for the whole fleet.

    Mini-batch steps are computed for all vehicles in one batched call; with
    ``workers > 1`` the fleet is split into contiguous row blocks handled by a
    thread pool. Each vehicle only touches its own batch stream and row, so
    results do not depend on the number of workers. Full-batch mode (shards
    may differ in size) steps vehicles one at a time.
    """

    def __init__(self, spec, dataset, shards, eta, batch_size, seed, full_batch=False, workers=1):
        self.spec = spec
        self.inputs = dataset.inputs
        self.labels = dataset.labels
        self.eta = eta
        self.batch_size = batch_size
        self.full_batch = full_batch
        self.streams = [BatchStream(s, seed, m) for m, s in enumerate(shards)]
        self.shard_batches = [dataset.subset(s).as_batch() for s in shards] if full_batch else None
        self.workers = workers
        self._pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _block(self, rows, w, n_steps):
        traj = np.empty((n_steps, len(rows), w.shape[1]))
        for t in range(n_steps):
            if self.full_batch:
                g = np.stack([loss_and_gradient(self.spec, w[i], self.shard_batches[m])[1]
                              for i, m in enumerate(rows)])
            else:
                idx = np.stack([self.streams[m].next(self.batch_size) for m in rows])
                try:
                    _, g = fleet_loss_and_gradient(self.spec, w, self.inputs[idx], self.labels[idx])
                except NumericError as exc:
                    raise NumericError(f"vehicle {rows[exc.index]}: {exc}", index=rows[exc.index]) from exc
            w = w - self.eta * g
            traj[t] = w
        return traj

    def run(self, params, n_steps):
        """Return the ``(n_steps, M, dim)`` trajectory of all local models."""
        params = np.asarray(params, dtype=np.float64)
        M = params.shape[0]
        try:
            if self._pool is None:
                return self._block(list(range(M)), params, n_steps)
            blocks = [b.tolist() for b in np.array_split(np.arange(M), self.workers) if b.size]
            parts = list(self._pool.map(lambda b: self._block(b, params[b], n_steps), blocks))
        except MobHFLError as exc:
            raise RunError(f"local update failed: {exc}") from exc
        return np.concatenate(parts, axis=1)


def local_update_round(params, trainer):
    """One SGD step on every vehicle."""
    return trainer.run(np.asarray(params, dtype=np.float64), 1)[0]


def run_mob_hierfavg(config, dataset, plan, spec, hooks=(), test_set=None,
                     init=None, initial_assignment=None, sink=None):
    """Execute ``config.K`` cloud epochs of Mob-HierFAVG.

    ``hooks`` are called as ``hook(record, state)`` after every emitted event
    and ``sink`` receives each record as soon as it exists, so a failing run
    has already delivered everything up to the failure.
    """
    config.validate()
    if plan.num_vehicles != config.M:
        raise ConfigError(f"plan has {plan.num_vehicles} shards but M={config.M}", key="M")
    M, N = config.M, config.N
    sizes = plan.sizes
    if np.any(sizes < 1):
        raise ConfigError("every shard must be nonempty")
    alpha = data_weights(sizes)
    full = dataset.subset(plan.all_indices())
    full_batch = full.as_batch()
    C = dataset.num_classes
    global_p = label_distribution(full.labels, C) if spec.is_classifier or C else None

    assignment = config.scenario.initial(M)
    if assignment is None:
        assignment = initial_assignment
    if assignment is None:
        assignment = plan.edge_assignment
    if assignment is None:
        assignment = balanced_assignment(M, N, config.seed)
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (M,) or assignment.min() < 0 or assignment.max() >= N:
        raise ConfigError("initial assignment must map every vehicle to an edge in [0, N)")

    w0 = init_params(spec, config.seed) if init is None else np.array(init, dtype=np.float64)
    edge_models = np.tile(w0, (N, 1))
    v = w0.copy()
    u = w0.copy()
    records = []
    result = RunResult(records, [w0.copy()], [w0.copy()], [assignment.copy()], w0.copy())

    shard_labels = [dataset.labels[s] for s in plan.shards]

    def avg_prob_diff(assign):
        if global_p is None:
            return float("nan")
        diffs = []
        for n in range(N):
            members = np.flatnonzero(assign == n)
            if members.size:
                pooled = np.concatenate([shard_labels[m] for m in members])
                diffs.append(probability_difference(global_p, label_distribution(pooled, C)))
        return float(np.mean(diffs))

    def emit(event, tau, k, te, model, v_tilde, theta, apd):
        acc = evaluate_accuracy(spec, model, test_set) if (test_set is not None and spec.is_classifier) else None
        rec = RoundRecord(tau=tau, cloud_epoch=k, edge_round=te, event=event,
                          test_accuracy=acc, train_loss=forward_loss(spec, model, full_batch),
                          cf_difference=cf_difference(model, v_tilde),
                          avg_prob_difference=apd, theta=tuple(float(t) for t in theta))
        records.append(rec)
        if sink is not None:
            sink(rec)
        state = {"tau": tau, "k": k, "edge_round": te, "assignment": assignment,
                 "edge_models": edge_models, "u": model, "v_tilde": v_tilde}
        for hook in hooks:
            hook(rec, state)

    tau = 0
    j = 0
    trainer = LocalTrainer(spec, dataset, plan.shards, config.eta, config.batch_size,
                           config.seed, full_batch=config.full_batch, workers=config.workers)
    try:
        with trainer:
            theta = edge_weights(assignment, sizes, N)
            apd = avg_prob_diff(assignment)
            for k in range(1, config.K + 1):
                for te in range(1, config.tau_e + 1):
                    params = edge_distribute(edge_models, assignment)
                    traj = trainer.run(params, config.tau_l)
                    for t in range(config.tau_l):
                        tau += 1
                        u = alpha @ traj[t]
                        v = virtual_centralized_step(v, spec, full_batch, config.eta)
                        if config.log_local:
                            emit(LOCAL, tau, k, te, u, v, theta, apd)
                    params = traj[-1]
                    j += 1
                    assignment = np.asarray(config.scenario.step(assignment, config.seed, j))
                    result.assignments.append(assignment.copy())
                    theta = edge_weights(assignment, sizes, N)
                    apd = avg_prob_diff(assignment)
                    edge_models = edge_aggregate(params, assignment, sizes, N,
                                                 previous=edge_models, policy=config.empty_edge_policy)
                    u = virtual_cloud(params, sizes)
                    emit(EDGE_AGG, tau, k, te, u, v, theta, apd)
                w = cloud_aggregate(edge_models, theta)
                emit(CLOUD_AGG, tau, k, config.tau_e, w, v, theta, apd)
                result.v_tilde_boundaries.append(v.copy())
                result.cloud_models.append(w.copy())
                edge_models = np.tile(w, (N, 1))
                v = w.copy()
                u = w
    except MobHFLError as exc:
        raise RunError(f"run failed at tau={tau}: {exc}", records) from exc
    result.final_params = np.asarray(u).copy()
    return result
