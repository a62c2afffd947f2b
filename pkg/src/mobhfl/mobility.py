"""Markov mobility of vehicles between edge servers.

Covers transition-matrix constructors (ring topology), the ring spectrum, the
mixing rate of a chain, per-step vehicle reassignment, the evolution of the
edge label distributions, the speed to sojourn-probability mapping and
trajectory-trace ingestion.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import (ConfigError, ContractError, DegenerateEdgeError, NonMixingError,
                     StructureError, TraceError, TraceGapError)

log = logging.getLogger(__name__)

ROW_TOL = 1e-12
MIXING_TOL = 1e-9


@dataclass(frozen=True)
class RingParams:
    N: int
    p_s: float

    def __post_init__(self):
        if self.N < 2:
            raise ConfigError(f"ring needs N >= 2, got {self.N}", key="N")
        if not 0.0 <= self.p_s <= 1.0:
            raise ConfigError(f"sojourn probability must lie in [0, 1], got {self.p_s}", key="p_s")


def validate_transition(Q):
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ContractError(f"transition matrix must be square, got {Q.shape}")
    if np.any(Q < 0) or not np.all(np.isfinite(Q)):
        raise ContractError("transition matrix entries must be finite and nonnegative")
    if np.any(np.abs(Q.sum(axis=1) - 1.0) > ROW_TOL):
        raise ContractError("transition matrix rows must sum to 1")
    return Q


def ring_transition(params):
    """Sojourn probability on the diagonal, ``(1 - p_s)/2`` to each ring neighbour.
    For ``N = 2`` the two neighbours coincide and their shares are merged."""
    N, p_s = params.N, params.p_s
    Q = np.zeros((N, N))
    move = (1.0 - p_s) / 2.0
    for n in range(N):
        Q[n, n] = p_s
        Q[n, (n + 1) % N] += move
        Q[n, (n - 1) % N] += move
    return Q


def eigenvalues_ring(params):
    """Closed-form spectrum of the ring matrix, ``p_s + (1-p_s) cos(2 pi n / N)``."""
    n = np.arange(params.N)
    return params.p_s + (1.0 - params.p_s) * np.cos(2.0 * np.pi * n / params.N)


def ring_runner_up(params):
    """``p_s + (1 - p_s) cos(2 pi / N)``: the eigenvalue the ring mixing factor uses."""
    return float(eigenvalues_ring(params)[1])


def is_irreducible(Q):
    n_comp, _ = connected_components(np.asarray(Q) > 0, directed=True, connection="strong")
    return n_comp == 1


def lambda_star(Q):
    """Largest eigenvalue modulus once one copy of the Perron root 1 is removed.

    Raises :class:`NonMixingError` when that modulus is within 1e-9 of one and
    :class:`StructureError` when the chain is reducible.
    """
    Q = validate_transition(Q)
    eig = np.linalg.eigvals(Q)
    perron = int(np.argmin(np.abs(eig - 1.0)))
    rest = np.abs(np.delete(eig, perron))
    runner_up = float(rest.max()) if rest.size else 0.0
    if runner_up >= 1.0 - MIXING_TOL:
        raise NonMixingError(f"chain does not mix: second eigenvalue modulus {runner_up:.12g}")
    if not is_irreducible(Q):
        raise StructureError("transition matrix is reducible")
    return runner_up


def step_uniforms(seed, step, M):
    """One uniform per vehicle for mobility step ``step``.

    Vehicle ``m`` always receives element ``m`` of a stream keyed by
    ``(seed, step)``, so its draw depends only on ``(seed, vehicle, step)``.
    """
    return np.random.default_rng([int(seed), 0x30B1, int(step)]).random(M)


def step_assignments(assignment, Q, seed, step):
    """Move every vehicle independently according to its current row of ``Q``."""
    assignment = np.asarray(assignment, dtype=np.int64)
    Q = np.asarray(Q, dtype=np.float64)
    cdf = np.cumsum(Q, axis=1)
    cdf[:, -1] = 1.0
    u = step_uniforms(seed, step, len(assignment))
    rows = cdf[assignment]
    nxt = (u[:, None] >= rows).sum(axis=1)
    # zero-probability columns can never be selected, even at rounding edges
    return np.minimum(nxt, Q.shape[1] - 1)


def edge_counts(assignment, N):
    return np.bincount(np.asarray(assignment), minlength=N)


def label_evolution(P_labels, Q, theta):
    """One mobility step of the edge label distributions.

    ``P_labels`` is ``(N, C)`` with one distribution per edge. Returns the new
    distributions and the new edge weights ``theta' = Q^T theta``; the update is
    the theta-weighted mixture, so no constant-theta assumption is made.
    """
    P = np.asarray(P_labels, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if abs(theta.sum() - 1.0) > ROW_TOL:
        raise ContractError("edge weights must sum to 1")
    theta_next = Q.T @ theta
    if np.any(theta_next <= 0):
        raise DegenerateEdgeError(f"edges {np.flatnonzero(theta_next <= 0).tolist()} receive no mass")
    mass = (theta[:, None] * Q).T @ P
    P_next = mass / theta_next[:, None]
    drift = float(np.abs(theta_next - theta).max())
    if drift > 0:
        log.debug("edge weight drift %.3g over one mobility step", drift)
    return P_next, theta_next


def sojourn_from_speed(v, a, interval, slope=None, intercept=1.0):
    """Sojourn probability from speed: ``clamp(intercept - slope*v, 0, 1)``.

    The default slope is ``interval / a`` (fraction of a road side covered in
    one edge epoch).
    """
    if v < 0 or not a > 0 or not interval > 0:
        raise ConfigError("sojourn_from_speed needs v >= 0, a > 0, interval > 0")
    if slope is None:
        slope = interval / a
    return float(min(1.0, max(0.0, intercept - slope * v)))


@dataclass(frozen=True)
class TrajectoryTrace:
    """Rows of ``(step, vehicle, edge)``; at most one row per (step, vehicle)."""

    rows: np.ndarray

    @property
    def steps(self):
        return np.unique(self.rows[:, 0])

    @property
    def num_vehicles(self):
        return int(self.rows[:, 1].max()) + 1 if len(self.rows) else 0

    @property
    def num_edges(self):
        return int(self.rows[:, 2].max()) + 1 if len(self.rows) else 0


def load_trace(path, N=None):
    rows = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["step", "vehicle", "edge"]:
            raise TraceError("header must be 'step,vehicle,edge'", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise TraceError(f"expected 3 fields, got {len(row)}", line=lineno)
            try:
                step, vehicle, edge = (int(x) for x in row)
            except ValueError:
                raise TraceError(f"non-integer field in {row!r}", line=lineno) from None
            if step < 0 or vehicle < 0 or edge < 0 or (N is not None and edge >= N):
                raise TraceError(f"value out of range in {row!r}", line=lineno)
            if (step, vehicle) in seen:
                raise TraceError(f"duplicate row for step {step}, vehicle {vehicle}", line=lineno)
            seen.add((step, vehicle))
            rows.append((step, vehicle, edge))
    return TrajectoryTrace(np.array(rows, dtype=np.int64).reshape(-1, 3))


def write_trace(path, assignments, start_step=0):
    """Write a sequence of assignment vectors as a trace CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "vehicle", "edge"])
        for t, assignment in enumerate(assignments, start=start_step):
            for m, e in enumerate(assignment):
                writer.writerow([t, m, int(e)])


def assignments_at(trace, t, M=None):
    if M is None:
        M = trace.num_vehicles
    rows = trace.rows[trace.rows[:, 0] == t]
    out = np.full(M, -1, dtype=np.int64)
    out[rows[:, 1][rows[:, 1] < M]] = rows[:, 2][rows[:, 1] < M]
    missing = np.flatnonzero(out < 0)
    if missing.size:
        raise TraceGapError(t, int(missing[0]))
    return out


def trace_matrix(trace, M=None):
    """All assignments as a ``(steps, M)`` array, one row per distinct step."""
    if M is None:
        M = trace.num_vehicles
    steps, pos = np.unique(trace.rows[:, 0], return_inverse=True)
    keep = trace.rows[:, 1] < M
    out = np.full((len(steps), M), -1, dtype=np.int64)
    out[pos[keep], trace.rows[keep, 1]] = trace.rows[keep, 2]
    gaps = np.argwhere(out < 0)
    if gaps.size:
        i, m = gaps[0]
        raise TraceGapError(int(steps[i]), int(m))
    return out, steps


def empirical_transition(trace, N=None, M=None):
    """Row-normalised transition counts between consecutive trace steps;
    rows never visited become self-loops."""
    if N is None:
        N = trace.num_edges
    states, steps = trace_matrix(trace, M)
    counts = np.zeros((N, N))
    consecutive = np.flatnonzero(np.diff(steps) == 1)
    np.add.at(counts, (states[consecutive].ravel(), states[consecutive + 1].ravel()), 1.0)
    totals = counts.sum(axis=1)
    Q = np.zeros((N, N))
    for n in range(N):
        if totals[n] > 0:
            Q[n] = counts[n] / totals[n]
        else:
            Q[n, n] = 1.0
    return Q
