"""Closed-form convergence quantities for hierarchical FL with mobility, the
estimators for the constants they consume, and consistency reports.

Index conventions: ``Delta_series[j]`` is the cloud-edge gradient difference
after ``j`` mobility steps (the coverage sets used by the ``j``-th edge
aggregation), so cloud epoch ``k`` consumes entries ``(k-1)*tau_e + 1`` to
``(k-1)*tau_e + tau_e - 1``.
"""
from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import mobility as mob
from .errors import ConditionsViolatedError, ConfigError, ContractError, NonMixingError
from .model import MEAN_QUADRATIC, forward_loss, loss_and_gradient

log = logging.getLogger(__name__)

IID, EDGE_IID, EDGE_NIID = "iid", "edge_iid", "edge_niid"


@dataclass(frozen=True)
class SmoothnessParams:
    beta: float
    rho: float

    def __post_init__(self):
        for name in ("beta", "rho"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be finite and positive, got {value}", key=name)


@dataclass
class HeterogeneityEstimates:
    delta_m: np.ndarray
    delta: float
    Delta_n_series: np.ndarray      # (J+1, N)
    Delta_series: np.ndarray        # (J+1,)
    theta_series: np.ndarray        # (J+1, N)
    G: float | None = None
    L_n: np.ndarray | None = None
    L: float | None = None
    lambda_star: float | None = None


@dataclass(frozen=True)
class BoundInputs:
    eta: float
    tau_l: int
    tau_e: int
    beta: float
    delta: float
    K: int = 1
    rho: float | None = None
    epsilon: float | None = None
    phi: float | None = None
    G: float | None = None
    N: int | None = None
    L: float | None = None
    lambda_star: float | None = None

    def __post_init__(self):
        if self.tau_l < 1 or self.tau_e < 1:
            raise ConfigError("tau_l and tau_e must be >= 1")
        if not (self.eta > 0 and self.beta > 0):
            raise ConfigError("eta and beta must be positive")
        if self.eta > 1.0 / self.beta:
            log.warning("eta=%g exceeds 1/beta=%g; the loss bound's step-size condition fails",
                        self.eta, 1.0 / self.beta)


def r_term(tau, eta, delta, beta):
    """CF difference of flat FL after ``tau`` local steps:
    ``(delta/beta)((1+eta*beta)^tau - 1) - tau*eta*delta``."""
    if tau < 0:
        raise ConfigError("tau must be >= 0")
    return delta / beta * ((1.0 + eta * beta) ** tau - 1.0) - tau * eta * delta


def h_func(t, tau_l, eta, beta):
    if t < 1:
        raise ConfigError(f"h(t) needs t >= 1, got {t}")
    R = (t - 1) // tau_l
    growth = 1.0 + eta * beta
    return tau_l * (sum(growth ** r for r in range(1, R + 1)) - R)


def H_func(tau_l, tau_e, eta, beta):
    if tau_e < 1:
        raise ConfigError("tau_e must be >= 1")
    return sum(h_func(r * tau_l, tau_l, eta, beta) for r in range(1, tau_e))


def _pairs(tau_e):
    return 0.5 * tau_e * (tau_e - 1)


def u_static(inputs, Delta):
    """CF difference bound without mobility (edge gradient difference fixed at ``Delta``)."""
    if Delta > inputs.delta + 1e-12:
        warnings.warn(f"Delta={Delta} exceeds delta={inputs.delta}; bound is outside its usual regime")
    r = r_term(inputs.tau_l * inputs.tau_e, inputs.eta, inputs.delta, inputs.beta)
    H = H_func(inputs.tau_l, inputs.tau_e, inputs.eta, inputs.beta)
    return r - inputs.eta * (inputs.delta - Delta) * (_pairs(inputs.tau_e) * inputs.tau_l + H)


def _window(inputs, k, Delta_series):
    start = (k - 1) * inputs.tau_e
    need = start + inputs.tau_e - 1
    if k < 1:
        raise ConfigError("cloud epoch index k starts at 1")
    if len(Delta_series) <= need and inputs.tau_e > 1:
        raise ContractError(f"Delta series has {len(Delta_series)} entries; cloud epoch {k} needs index {need}")
    return [float(Delta_series[start + j]) for j in range(1, inputs.tau_e)]


def u_mobile(inputs, k, Delta_series):
    """CF difference bound at cloud epoch ``k`` with time-varying edge differences."""
    window = _window(inputs, k, Delta_series)
    r = r_term(inputs.tau_l * inputs.tau_e, inputs.eta, inputs.delta, inputs.beta)
    weighted = sum(j * d for j, d in enumerate(window, start=1))
    return r - inputs.eta * inputs.tau_l * (_pairs(inputs.tau_e) * inputs.delta - weighted)


def mobility_factor(U_nomob, U_mob, tau_l, tau_e):
    return (U_nomob - U_mob) / (tau_l * tau_e)


def mobility_factor_expanded(inputs, k, Delta_series):
    """The same factor written out: data-fusion sum minus model-shuffling term."""
    window = _window(inputs, k, Delta_series)
    d0 = float(Delta_series[0])
    H = H_func(inputs.tau_l, inputs.tau_e, inputs.eta, inputs.beta)
    fusion = sum(j * (d0 - d) for j, d in enumerate(window, start=1))
    return inputs.eta / inputs.tau_e * (fusion - (inputs.delta - d0) * H / inputs.tau_l)


def _edge_niid_factor(inputs, k, lam):
    for key in ("G", "N", "L"):
        if getattr(inputs, key) is None:
            raise ConfigError(f"edge non-i.i.d. mobility factor needs {key}", key=key)
    lam = abs(lam)
    if lam >= 1.0:
        raise NonMixingError(f"|lambda*| = {lam} >= 1")
    total = sum(j * (1.0 - lam ** ((k - 1) * inputs.tau_e + j)) for j in range(1, inputs.tau_e))
    return inputs.eta * inputs.G * inputs.N * inputs.L / inputs.tau_e * total


def mobility_factor_closed(case, inputs, k):
    """Mobility factor for the three initial label distributions."""
    if case == IID:
        return 0.0
    if case == EDGE_IID:
        H = H_func(inputs.tau_l, inputs.tau_e, inputs.eta, inputs.beta)
        return -inputs.eta * inputs.delta * H / (inputs.tau_l * inputs.tau_e)
    if case == EDGE_NIID:
        if inputs.lambda_star is None:
            raise ConfigError("edge non-i.i.d. mobility factor needs lambda_star", key="lambda_star")
        return _edge_niid_factor(inputs, k, inputs.lambda_star)
    raise ConfigError(f"unknown distribution case {case!r}")


def mobility_factor_ring(inputs, k, ring, literal=False):
    """Edge non-i.i.d. mobility factor on a ring of ``ring.N`` edges.

    By default ``|p_s + (1-p_s) cos(2 pi / N)|`` is substituted for ``lambda*``
    in the closed form. ``literal=True`` instead evaluates the printed ring
    expression with base ``(1-p_s)(1-cos(2 pi / N))`` and exponent ``k*tau_e + j``.
    """
    mob.lambda_star(mob.ring_transition(ring))
    if literal:
        for key in ("G", "L"):
            if getattr(inputs, key) is None:
                raise ConfigError(f"ring mobility factor needs {key}", key=key)
        base = (1.0 - ring.p_s) * (1.0 - math.cos(2.0 * math.pi / ring.N))
        total = sum(j * base ** (k * inputs.tau_e + j) for j in range(1, inputs.tau_e))
        return inputs.eta * inputs.G * ring.N * inputs.L / inputs.tau_e * total
    n_inputs = inputs if inputs.N == ring.N else _replace(inputs, N=ring.N)
    return _edge_niid_factor(n_inputs, k, mob.ring_runner_up(ring))


def _replace(inputs, **changes):
    values = asdict(inputs)
    values.update(changes)
    return BoundInputs(**values)


def delta_bound(j, G, N, L, lambda_star):
    """Upper bound ``G * lambda*^j * N * L`` on the cloud-edge gradient difference."""
    if lambda_star >= 1:
        raise NonMixingError("delta_bound needs lambda* < 1")
    return G * lambda_star ** j * N * L


def fit_L(series, lambda_star, theta=None):
    """Smallest per-edge constants with ``series[n, j] <= N * L_n * lambda*^j``.

    ``series`` is ``(N, J)``: probability difference of edge ``n`` after ``j``
    mobility steps. NaN entries (empty edges) are ignored. Returns ``(L_n, L)``
    with ``L = sum_n theta_n L_n`` (uniform theta by default).
    """
    if not 0.0 < lambda_star < 1.0:
        raise NonMixingError(f"fit_L needs lambda* in (0, 1), got {lambda_star}")
    series = np.atleast_2d(np.asarray(series, dtype=np.float64))
    if series.size == 0:
        raise ContractError("empty probability-difference series")
    N, J = series.shape
    scale = N * lambda_star ** np.arange(J)
    with np.errstate(invalid="ignore"):
        ratios = series / scale[None, :]
    L_n = np.nanmax(np.where(np.isnan(ratios), -np.inf, ratios), axis=1)
    L_n = np.maximum(L_n, 0.0)
    theta = np.full(N, 1.0 / N) if theta is None else np.asarray(theta, dtype=np.float64)
    return L_n, float(theta @ L_n)


def _shard_gradients(spec, dataset, plan, w):
    grads = np.empty((plan.num_vehicles, w.shape[0]))
    for m, shard in enumerate(plan.shards):
        if len(shard) == 0:
            raise ContractError(f"shard {m} is empty")
        _, grads[m] = loss_and_gradient(spec, w, dataset.subset(shard).as_batch())
    return grads


def _membership_weights(memberships, sizes, N):
    """Stack of ``(N, M)`` matrices of within-edge weights ``alpha_{m,n}``, plus theta."""
    memberships = np.atleast_2d(np.asarray(memberships))
    J, M = memberships.shape
    A = np.zeros((J, N, M))
    A[np.arange(J)[:, None], memberships, np.arange(M)[None, :]] = sizes[None, :]
    totals = A.sum(axis=2)
    theta = totals / sizes.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        A = np.where(totals[:, :, None] > 0, A / totals[:, :, None], 0.0)
    return A, theta


def estimate_gradient_differences(spec, dataset, plan, memberships, probes, N):
    """Per-vehicle (delta_m) and per-edge (Delta_n^[j]) gradient differences.

    Suprema over ``w`` are approximated by the maximum over ``probes``; for the
    mean-quadratic task the differences do not depend on ``w`` and one probe
    gives the exact value.
    """
    probes = [np.asarray(p, dtype=np.float64) for p in probes]
    if not probes:
        raise ContractError("probe set is empty")
    if spec.kind == MEAN_QUADRATIC:
        probes = probes[:1]
    sizes = plan.sizes.astype(np.float64)
    alpha = sizes / sizes.sum()
    A, theta = _membership_weights(memberships, sizes, N)
    delta_m = np.zeros(plan.num_vehicles)
    Delta_n = np.zeros(A.shape[:2])
    for w in probes:
        grads = _shard_gradients(spec, dataset, plan, w)
        full = alpha @ grads
        delta_m = np.maximum(delta_m, np.linalg.norm(grads - full, axis=1))
        edge = A @ grads                          # (J, N, dim)
        gaps = np.linalg.norm(edge - full, axis=2)
        gaps[theta == 0] = 0.0
        Delta_n = np.maximum(Delta_n, gaps)
    return HeterogeneityEstimates(
        delta_m=delta_m,
        delta=float(alpha @ delta_m),
        Delta_n_series=Delta_n,
        Delta_series=(theta * Delta_n).sum(axis=1),
        theta_series=theta,
    )


def estimate_G(spec, dataset, probes):
    """Running maximum over probes and classes of the per-class mean-loss gradient norm."""
    if not spec.is_classifier:
        raise ConfigError("G is defined for classification tasks")
    probes = list(probes)
    if not probes:
        raise ContractError("probe set is empty")
    G = 0.0
    for c in range(spec.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            warnings.warn(f"class {c} is absent from the dataset; skipped when estimating G")
            continue
        batch = dataset.subset(idx).as_batch()
        for w in probes:
            G = max(G, float(np.linalg.norm(loss_and_gradient(spec, np.asarray(w), batch)[1])))
    return G


def estimate_smoothness(spec, dataset, plan, probes):
    """Lower estimates of beta and rho from difference quotients over probe pairs.

    The mean-quadratic task has beta = 1 exactly.
    """
    probes = [np.asarray(p, dtype=np.float64) for p in probes]
    grads = [_shard_gradients(spec, dataset, plan, w) for w in probes]
    losses = [np.array([forward_loss(spec, w, dataset.subset(s).as_batch()) for s in plan.shards])
              for w in probes]
    rho = max(float(np.linalg.norm(g, axis=1).max()) for g in grads)
    beta = 1.0 if spec.kind == MEAN_QUADRATIC else 0.0
    for a, b in itertools.combinations(range(len(probes)), 2):
        dist = float(np.linalg.norm(probes[a] - probes[b]))
        if dist <= 1e-12:
            continue
        rho = max(rho, float(np.abs(losses[a] - losses[b]).max()) / dist)
        if spec.kind != MEAN_QUADRATIC:
            beta = max(beta, float(np.linalg.norm(grads[a] - grads[b], axis=1).max()) / dist)
    if beta <= 0:
        raise ContractError("need at least two distinct probes to estimate beta")
    return SmoothnessParams(beta=beta, rho=rho)


def phi_from_trajectory(v_tilde_boundaries, w_star, beta, eta):
    """``min_k (1 - beta*eta/2) / ||v~((k-1) tau_l tau_e) - w*||^2`` over the logged boundaries."""
    dists = [float(np.sum((np.asarray(v) - w_star) ** 2)) for v in v_tilde_boundaries]
    worst = max(dists)
    if worst == 0:
        return math.inf
    return (1.0 - beta * eta / 2.0) / worst


def prop1_bound(inputs, U_series, T):
    """Loss-gap bound ``1 / (T*eta*phi - (rho/eps^2) * sum_k U_k)`` after ``T`` local steps."""
    missing = [k for k in ("rho", "epsilon", "phi") if getattr(inputs, k) is None]
    if missing:
        raise ConfigError(f"loss bound needs {', '.join(missing)}")
    failed = []
    if inputs.eta > 1.0 / inputs.beta:
        failed.append(f"(1) eta={inputs.eta} > 1/beta={1.0 / inputs.beta}")
    per_epoch = inputs.tau_l * inputs.tau_e * inputs.epsilon ** 2
    bad = [k for k, U in enumerate(U_series, start=1)
           if not inputs.eta * inputs.phi - inputs.rho * U / per_epoch > 0]
    if bad:
        failed.append(f"(2) eta*phi - rho*U_k/(tau_l*tau_e*eps^2) <= 0 for k in {bad}")
    denom = T * inputs.eta * inputs.phi - inputs.rho / inputs.epsilon ** 2 * float(np.sum(U_series))
    if not denom > 0:
        failed.append(f"denominator {denom:.6g} <= 0")
    if failed:
        raise ConditionsViolatedError(failed)
    return 1.0 / denom


def check_prop2(case, estimates, tolerance=1e-12, scale=1.0):
    """Report ``delta - Delta^[0]``; for i.i.d. and edge non-i.i.d. plans assert it
    is within ``tolerance * scale``. Other cases are informational only."""
    diff = float(estimates.delta - estimates.Delta_series[0])
    asserted = case in (IID, EDGE_NIID)
    return {
        "case": case,
        "delta": float(estimates.delta),
        "Delta0": float(estimates.Delta_series[0]),
        "difference": diff,
        "asserted": asserted,
        "passed": (abs(diff) <= tolerance * scale) if asserted else None,
    }


@dataclass
class BoundSeries:
    """Everything needed to re-evaluate a run's bound report offline."""

    case: str
    eta: float
    tau_l: int
    tau_e: int
    K: int
    N: int
    beta: float
    rho: float
    delta: float
    Delta_series: list
    prob_diff_series: list          # (J+1) x N, None for empty edges
    theta_series: list
    cf_measured: list               # per cloud epoch, k = 1..K
    G: float | None = None
    lambda_star: float | None = None
    expected_prob_diff_series: list | None = None    # exact evolution, when Q is known
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, payload):
        return cls(**payload)


def bound_report(series):
    """Per-cloud-epoch bound quantities, keyed by ``str(k)``."""
    inputs = BoundInputs(eta=series.eta, tau_l=series.tau_l, tau_e=series.tau_e,
                         beta=series.beta, delta=series.delta, K=series.K, rho=series.rho,
                         G=series.G, N=series.N, lambda_star=series.lambda_star)
    Delta = list(series.Delta_series)
    L_n = L = None
    if series.case == EDGE_NIID and series.lambda_star is not None and 0 < series.lambda_star < 1:
        # the decay statement concerns the expected evolution; a finite fleet's
        # realised series has a noise floor that would inflate L without bound
        source = series.expected_prob_diff_series or series.prob_diff_series
        pdiff = np.array([[np.nan if x is None else x for x in row] for row in source]).T
        theta0 = np.asarray(series.theta_series[0])
        L_n, L = fit_L(pdiff, series.lambda_star, theta0)
        inputs = _replace(inputs, L=L)
    constants = {
        "eta": series.eta, "beta": series.beta, "rho": series.rho, "tau_l": series.tau_l,
        "tau_e": series.tau_e, "K": series.K, "N": series.N, "G": series.G,
        "lambda_star": series.lambda_star, "L": L,
        "L_n": None if L_n is None else [float(x) for x in L_n], "case": series.case,
        "H": H_func(series.tau_l, series.tau_e, series.eta, series.beta),
    }
    report = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        U_nomob = u_static(inputs, Delta[0])
    for k in range(1, series.K + 1):
        U_mob = u_mobile(inputs, k, Delta)
        try:
            gamma_closed = mobility_factor_closed(series.case, inputs, k)
        except (ConfigError, NonMixingError):
            gamma_closed = None
        report[str(k)] = {
            "u_static": U_nomob,
            "u_mobile": U_mob,
            "gamma_def": mobility_factor(U_nomob, U_mob, series.tau_l, series.tau_e),
            "gamma_closed": gamma_closed,
            "delta": series.delta,
            "Delta_series": Delta[(k - 1) * series.tau_e:(k - 1) * series.tau_e + series.tau_e],
            "cf_measured": series.cf_measured[k - 1] if k - 1 < len(series.cf_measured) else None,
            "constants": constants,
        }
    return report
