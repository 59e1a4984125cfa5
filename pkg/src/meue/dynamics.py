"""Day-to-day route choice dynamics, the relative gap and the run loop."""
from __future__ import annotations

import csv
import enum
import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import LOG_FLOOR, KernelBasis, entropy, kernel_basis
from .network import Network, link_costs
from .routing import RouteSet, StrategyState, check_strategy, route_cost, shortest_distances

__all__ = [
    "DynamicsKind",
    "StepSchedule",
    "RunConfig",
    "ConfigError",
    "TraceRecord",
    "Trace",
    "logit_choice",
    "log_logit_choice",
    "culo_step",
    "averaging_step",
    "best_response_step",
    "simplex_project",
    "projection_step",
    "pairwise_step",
    "relative_gap",
    "gap_from_flows",
    "estimate_lipschitz",
    "run_dynamics",
    "TRACE_HEADER",
]

TRACE_HEADER = ("day", "gap", "entropy", "used_1e4", "used_1e6", "prop_res_max", "ms")
# route sets above this size skip the exact kernel basis unless one is passed in
AUTO_BASIS_LIMIT = 5000


class ConfigError(ValueError):
    """Invalid run configuration."""


class DynamicsKind(str, enum.Enum):
    culo = "culo"
    averaging = "averaging"
    best_response = "best_response"
    projection = "projection"
    smith = "smith"
    replicator = "replicator"

    @property
    def logit_based(self) -> bool:
        return self in (DynamicsKind.culo, DynamicsKind.averaging)


@dataclass(frozen=True)
class StepSchedule:
    kind: str = "constant"
    eta0: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "harmonic"):
            raise ConfigError(f"unknown step schedule {self.kind!r}")
        if not (self.eta0 > 0 and math.isfinite(self.eta0)):
            raise ConfigError("eta0 must be positive")

    def __call__(self, t: int) -> float:
        """Step size of the update that produces day ``t`` (t >= 1)."""
        if self.kind == "constant":
            return self.eta0
        return self.eta0 / (1.0 + t)


@dataclass(frozen=True)
class RunConfig:
    """Configuration of one deterministic run.

    ``cost_scale="mean"`` measures each day's route costs in units of that
    day's mean travel cost ``<u, x> / sum(d)``. One scalar per day acts as a
    time-varying step size, so UE points and the proportionality invariant
    of the cumulative rule are unaffected, while ``r`` and ``eta`` become
    dimensionless. ``cost_scale="uniform"`` divides by one constant, the
    mean travel cost when every OD splits evenly over its routes; this is a
    plain change of time unit and keeps constant step sizes constant.
    """

    kind: DynamicsKind = DynamicsKind.culo
    r: float = 1.0
    schedule: StepSchedule = field(default_factory=StepSchedule)
    gap_tol: float = 1e-5
    max_days: int = 1000
    seed: int = 0
    cost_scale: str = "raw"
    record_time: bool = True

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", DynamicsKind(self.kind))
        except ValueError:
            raise ConfigError(f"unknown dynamics kind {self.kind!r}") from None
        if self.kind.logit_based and not (self.r > 0 and math.isfinite(self.r)):
            raise ConfigError("r must be positive for logit-based dynamics")
        if not self.gap_tol > 0:
            raise ConfigError("gap_tol must be positive")
        if self.max_days < 0:
            raise ConfigError("max_days must be non-negative")
        if self.cost_scale not in ("raw", "mean", "uniform"):
            raise ConfigError(f"unknown cost_scale {self.cost_scale!r}")
        if self.kind is DynamicsKind.averaging and self.schedule.kind == "constant" and self.schedule.eta0 > 1:
            raise ConfigError("averaging needs eta in (0, 1]")


# ---------------------------------------------------------------------------
# choice map


def log_logit_choice(s, r: float, rs: RouteSet) -> np.ndarray:
    """Per-OD log-softmax of ``-r s``, shifted by the per-OD minimum of ``s``."""
    s = np.asarray(s, dtype=float)
    if s.shape != (rs.n_routes,):
        raise ValueError(f"valuation vector must have length {rs.n_routes}")
    if not np.all(np.isfinite(s)):
        raise ValueError("valuations must be finite")
    if not r > 0:
        raise ValueError("r must be positive")
    z = -r * (s - rs.od_min(s)[rs.od_of])
    lse = np.log(rs.od_sum(np.exp(z)))
    return z - lse[rs.od_of]


def logit_choice(s, r: float, rs: RouteSet) -> np.ndarray:
    return np.exp(log_logit_choice(s, r, rs))


# ---------------------------------------------------------------------------
# step rules


def culo_step(state: StrategyState, c, eta: float, r: float, rs: RouteSet) -> StrategyState:
    """Cumulative logit: ``s <- s + eta c`` followed by the logit choice."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    s = state.s + eta * np.asarray(c, dtype=float)
    log_p = log_logit_choice(s, r, rs)
    return state.advance(p=np.exp(log_p), s=s, log_p=log_p)


def averaging_step(state: StrategyState, c, eta: float, r: float, rs: RouteSet) -> StrategyState:
    """Averaging logit: ``s <- (1 - eta) s + eta c``."""
    if not 0 < eta <= 1:
        raise ValueError("averaging step size must lie in (0, 1]")
    s = (1.0 - eta) * state.s + eta * np.asarray(c, dtype=float)
    log_p = log_logit_choice(s, r, rs)
    return state.advance(p=np.exp(log_p), s=s, log_p=log_p)


def best_response(c, rs: RouteSet) -> np.ndarray:
    """Pure best response per OD; ties go to the lowest route index."""
    c = np.asarray(c, dtype=float)
    is_min = c == rs.od_min(c)[rs.od_of]
    idx = np.where(is_min, np.arange(rs.n_routes), rs.n_routes)
    pick = np.minimum.reduceat(idx[rs._order], rs._starts)
    b = np.zeros(rs.n_routes)
    b[pick] = 1.0
    return b


def best_response_step(state: StrategyState, c, eta: float, rs: RouteSet) -> StrategyState:
    if not 0 < eta <= 1:
        raise ValueError("best-response step size must lie in (0, 1]")
    p = (1.0 - eta) * state.p + eta * best_response(c, rs)
    return state.advance(p=p)


def simplex_project(y) -> np.ndarray:
    """Euclidean projection onto the unit simplex (sort and threshold)."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("input must be finite")
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, y.size + 1)
    rho = np.flatnonzero(u - css / ind > 0)[-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(y - theta, 0.0)


def projection_step(state: StrategyState, c, eta: float, rs: RouteSet) -> StrategyState:
    if not eta > 0:
        raise ValueError("eta must be positive")
    y = state.p - eta * np.asarray(c, dtype=float)
    p = np.empty_like(y)
    for ks in rs.per_od:
        p[ks] = simplex_project(y[ks]) if ks.size > 1 else 1.0
    return state.advance(p=p)


def _od_route_pairs(rs: RouteSet) -> tuple[np.ndarray, np.ndarray]:
    cached = getattr(rs, "_pairs_cache", None)
    if cached is None:
        src, dst = [], []
        for ks in rs.per_od:
            if ks.size > 1:
                a, b = np.meshgrid(ks, ks, indexing="ij")
                off = a != b
                src.append(a[off])
                dst.append(b[off])
        if src:
            cached = (np.concatenate(src), np.concatenate(dst))
        else:
            cached = (np.zeros(0, np.int64), np.zeros(0, np.int64))
        rs._pairs_cache = cached
    return cached


def pairwise_step(kind, state: StrategyState, c, eta: float, rs: RouteSet) -> StrategyState:
    """Smith or replicator pairwise-comparison update.

    Rates from route i to j: ``eta [c_i - c_j]_+`` (smith) or
    ``eta p_j [c_i - c_j]_+`` (replicator). Raises when a stay probability
    ``1 - sum_j rate_ij`` would be negative.
    """
    kind = DynamicsKind(kind)
    if kind not in (DynamicsKind.smith, DynamicsKind.replicator):
        raise ValueError("pairwise_step handles smith and replicator only")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    c = np.asarray(c, dtype=float)
    p = state.p
    i, j = _od_route_pairs(rs)
    rate = eta * np.maximum(c[i] - c[j], 0.0)
    if kind is DynamicsKind.replicator:
        rate = rate * p[j]
    n = rs.n_routes
    stay = 1.0 - np.bincount(i, weights=rate, minlength=n)
    if np.any(stay < 0):
        k = int(np.argmin(stay))
        raise ValueError(f"step size too large: stay probability of route {k} is {stay[k]:.3g}")
    p_new = p * stay + np.bincount(j, weights=p[i] * rate, minlength=n)
    return state.advance(p=p_new)


# ---------------------------------------------------------------------------
# gap


def gap_from_flows(net: Network, u: np.ndarray, x: np.ndarray, d=None) -> float:
    d = net.demand if d is None else np.asarray(d, dtype=float)
    total = float(u @ x)
    if not total > 0:
        raise ValueError("relative gap undefined: total travel cost is zero")
    aon = float(d @ shortest_distances(net, u))
    return max((total - aon) / total, 0.0)


def relative_gap(net: Network, rs: RouteSet, p, d=None) -> float:
    """Relative gap against an all-or-nothing assignment on the full network."""
    d = net.demand if d is None else np.asarray(d, dtype=float)
    p = check_strategy(rs, p)
    x = rs.lam @ (d[rs.od_of] * p)
    return gap_from_flows(net, link_costs(net, x), x, d)


# ---------------------------------------------------------------------------
# trace


@dataclass
class TraceRecord:
    day: int
    gap: float
    entropy: float
    used_1e4: int
    used_1e6: int
    prop_res_max: float
    ms: float

    def row(self) -> tuple:
        return (self.day, self.gap, self.entropy, self.used_1e4, self.used_1e6, self.prop_res_max, self.ms)


@dataclass
class Trace:
    records: list[TraceRecord] = field(default_factory=list)
    converged: bool = False
    message: str = ""
    lipschitz: dict | None = None
    clamped_days: list[int] = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.day <= self.records[-1].day:
            raise ValueError("trace days must be strictly increasing")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def final_gap(self) -> float:
        return self.records[-1].gap if self.records else math.nan

    def fingerprint(self) -> str:
        """Hash of every deterministic column (wall time excluded)."""
        h = hashlib.sha256()
        for r in self.records:
            h.update(np.array(r.row()[:-1], dtype=float).tobytes())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for r in self.records:
                w.writerow([r.day, repr(r.gap), repr(r.entropy), r.used_1e4, r.used_1e6, repr(r.prop_res_max), f"{r.ms:.3f}"])

    @classmethod
    def from_csv(cls, path) -> Trace:
        tr = cls()
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if tuple(rows[0]) != TRACE_HEADER:
            raise ValueError("not a trace file")
        for row in rows[1:]:
            tr.append(TraceRecord(int(row[0]), float(row[1]), float(row[2]), int(row[3]), int(row[4]), float(row[5]), float(row[6])))
        return tr


# ---------------------------------------------------------------------------
# Lipschitz estimate


def _random_strategy(rs: RouteSet, rng: np.random.Generator) -> np.ndarray:
    g = rng.exponential(size=rs.n_routes)
    return g / rs.od_sum(g)[rs.od_of]


def estimate_lipschitz(net: Network, rs: RouteSet, n_pairs: int = 200, seed: int = 0) -> float:
    """Max of ``|c(p) - c(p')| / |p - p'|`` over random feasible pairs."""
    rng = np.random.default_rng(seed)
    q = rs.route_demand()
    best = 0.0
    for _ in range(n_pairs):
        p, p2 = _random_strategy(rs, rng), _random_strategy(rs, rng)
        c1 = route_cost(rs, link_costs(net, rs.lam @ (q * p)))
        c2 = route_cost(rs, link_costs(net, rs.lam @ (q * p2)))
        den = np.linalg.norm(p - p2)
        if den > 0:
            best = max(best, float(np.linalg.norm(c1 - c2) / den))
    return best


# ---------------------------------------------------------------------------
# run loop


def _step(config: RunConfig, state: StrategyState, c, eta, rs) -> StrategyState:
    k = config.kind
    if k is DynamicsKind.culo:
        return culo_step(state, c, eta, config.r, rs)
    if k is DynamicsKind.averaging:
        return averaging_step(state, c, eta, config.r, rs)
    if k is DynamicsKind.best_response:
        return best_response_step(state, c, eta, rs)
    if k is DynamicsKind.projection:
        return projection_step(state, c, eta, rs)
    return pairwise_step(k, state, c, eta, rs)


def initial_state(rs: RouteSet, config: RunConfig, s0=None, p0=None) -> StrategyState:
    if config.kind.logit_based:
        s0 = np.zeros(rs.n_routes) if s0 is None else np.asarray(s0, dtype=float).copy()
        log_p = log_logit_choice(s0, config.r, rs)
        return StrategyState(p=np.exp(log_p), s=s0, day=0, log_p=log_p)
    if p0 is None:
        if s0 is None:
            p0 = rs.uniform()
        else:
            p0 = logit_choice(s0, config.r, rs)
    p0 = check_strategy(rs, p0).copy()
    return StrategyState(p=p0, s=None if s0 is None else np.asarray(s0, dtype=float), day=0)


def run_dynamics(
    net: Network,
    rs: RouteSet,
    config: RunConfig,
    s0=None,
    p0=None,
    *,
    basis: KernelBasis | None | str = "auto",
    lipschitz: bool = False,
    callback=None,
) -> tuple[StrategyState, Trace]:
    """Iterate one step rule until ``gap <= gap_tol`` or ``max_days``.

    Logit-based kinds start from ``p = q_r(s0)`` (``s0 = 0`` by default);
    the others from ``p0`` (uniform by default). Proportionality residuals are
    measured against the starting point, ``<e, log p^t> - <e, log p^0>``,
    which for logit starts equals ``<e, log p^t> + r <e, s0>``.
    """
    if basis == "auto":
        basis = kernel_basis(rs) if rs.n_routes <= AUTO_BASIS_LIMIT else None
    state = initial_state(rs, config, s0, p0)
    d = net.demand
    q = rs.route_demand(d)
    d_total = float(d.sum())
    unit = 1.0
    if config.cost_scale == "uniform":
        x_u = rs.lam @ (q * rs.uniform())
        unit = float(link_costs(net, x_u) @ x_u) / d_total
        if not unit > 0:
            raise ConfigError("uniform cost unit is zero")
    trace = Trace()
    if lipschitz:
        L = estimate_lipschitz(net, rs, seed=config.seed)
        trace.lipschitz = {"L_hat": L, "eta_bound": 1.0 / (2.0 * config.r * L) if L > 0 else math.inf}

    ref = None
    if basis is not None and len(basis):
        ref = basis.apply(_log_p(state)[0])

    t0 = time.perf_counter()
    while True:
        if not np.all(np.isfinite(state.p)):
            raise FloatingPointError(f"non-finite strategy on day {state.day}")
        x = rs.lam @ (q * state.p)
        u = link_costs(net, x)
        c = route_cost(rs, u)
        gap = gap_from_flows(net, u, x, d)
        res = math.nan
        if ref is not None:
            log_p, clamped = _log_p(state)
            res = float(np.max(np.abs(basis.apply(log_p) - ref)))
            if clamped:
                trace.clamped_days.append(state.day)
        now = time.perf_counter()
        trace.append(
            TraceRecord(
                state.day,
                gap,
                -entropy(state.p, q),
                int(np.count_nonzero(state.p > 1e-4)),
                int(np.count_nonzero(state.p > 1e-6)),
                res,
                (now - t0) * 1e3 if config.record_time else 0.0,
            )
        )
        t0 = now
        if callback is not None:
            callback(state, c, gap)
        if gap <= config.gap_tol:
            trace.converged = True
            trace.message = f"converged on day {state.day}"
            break
        if state.day >= config.max_days:
            trace.message = f"not converged after {config.max_days} days (gap {gap:.3g})"
            break
        if config.cost_scale == "mean":
            c = c * (d_total / float(u @ x))
        elif config.cost_scale == "uniform":
            c = c / unit
        state = _step(config, state, c, config.schedule(state.day + 1), rs)
    return state, trace


def _log_p(state: StrategyState) -> tuple[np.ndarray, bool]:
    if state.log_p is not None:
        return state.log_p, False
    return np.log(np.maximum(state.p, LOG_FLOOR)), bool(np.any(state.p < LOG_FLOOR))
