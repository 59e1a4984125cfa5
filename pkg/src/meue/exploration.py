"""Cumulative logit dynamics with on-the-fly route discovery."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import entropy
from .dynamics import ConfigError, Trace, TraceRecord, log_logit_choice
from .network import Network, link_costs
from .routing import RouteSet, StrategyState, extend_routes, shortest_routes

__all__ = ["ExploreConfig", "ExploreResult", "explore_run", "default_noise_sigma0", "read_discovery_log"]

VARIANTS = ("route_valuation", "link_valuation")


@dataclass(frozen=True)
class ExploreConfig:
    """Settings of one exploration run.

    ``noise_sigma0=None`` selects 0.1 x mean free-flow link cost; 0 disables
    noise. Noise only applies to the ``link_valuation`` variant.
    """

    variant: str = "link_valuation"
    r: float = 1.0
    noise_sigma0: float | None = 0.0
    noise_stop_window: int = 50
    gap_tol: float = 1e-5
    max_days: int = 3000
    seed: int = 0
    eta: float = 1.0
    min_days: int = 0
    record_time: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown exploration variant {self.variant!r}")
        if not (self.r > 0 and math.isfinite(self.r)):
            raise ConfigError("r must be positive")
        if self.noise_sigma0 is not None and self.noise_sigma0 < 0:
            raise ConfigError("noise_sigma0 must be non-negative")
        if self.noise_stop_window < 1:
            raise ConfigError("noise_stop_window must be at least 1")
        if not self.gap_tol > 0:
            raise ConfigError("gap_tol must be positive")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")


def default_noise_sigma0(net: Network) -> float:
    return 0.1 * float(np.mean(net.free_flow_costs()))


@dataclass
class ExploreResult:
    routes: RouteSet
    state: StrategyState
    trace: Trace
    discoveries: list[tuple[int, int, tuple[int, ...]]] = field(default_factory=list)
    noise_off_day: int | None = None
    last_new_day: int = 0
    stabilization_v: np.ndarray | None = None

    def __iter__(self):
        # allows ``rs, state, trace = explore_run(...)``
        return iter((self.routes, self.state, self.trace))

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("day,od_index,link_sequence\n")
            for day, w, links in self.discoveries:
                fh.write(f"{day},{w},{'-'.join(map(str, links))}\n")


def read_discovery_log(path) -> list[tuple[int, int, tuple[int, ...]]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "day,od_index,link_sequence":
        raise ValueError("not a discovery log")
    out = []
    for line in lines[1:]:
        day, w, seq = line.split(",")
        out.append((int(day), int(w), tuple(int(a) for a in seq.split("-"))))
    return out


def explore_run(net: Network, config: ExploreConfig, *, log_path=None, callback=None) -> ExploreResult:
    """CULO with route discovery.

    Starts from the free-flow shortest route of every OD pair. Each day the
    travellers choose by logit over the active routes, costs are revealed,
    valuations accumulate and every OD pair adds its shortest route under the
    true link costs if it is new. The run stops on ``gap <= gap_tol`` once no
    route was added that day, or after ``max_days``.
    """
    d = net.demand
    routes0, _ = shortest_routes(net, net.free_flow_costs())
    rs = RouteSet(net, routes0, validate=False)
    link_based = config.variant == "link_valuation"
    v = np.zeros(net.n_links)
    s = np.zeros(rs.n_routes)
    sigma0 = config.noise_sigma0
    if sigma0 is None:
        sigma0 = default_noise_sigma0(net)
    noise_on = link_based and sigma0 > 0
    rng = np.random.Generator(np.random.Philox(config.seed))

    result = ExploreResult(rs, StrategyState(p=rs.uniform()), Trace())
    for w, r in enumerate(routes0):
        result.discoveries.append((0, w, r.links))
    trace = result.trace
    last_new = 0
    t0 = time.perf_counter()
    day = 0
    while True:
        if link_based:
            s = rs.lam_t @ v
        log_p = log_logit_choice(s, config.r, rs)
        p = np.exp(log_p)
        q = rs.route_demand(d)
        x = rs.lam @ (q * p)
        u = link_costs(net, x)
        total = float(u @ x)
        best, best_cost = shortest_routes(net, u)
        gap = max((total - float(d @ best_cost)) / total, 0.0)
        now = time.perf_counter()
        trace.append(
            TraceRecord(
                day,
                gap,
                -entropy(p, q),
                int(np.count_nonzero(p > 1e-4)),
                int(np.count_nonzero(p > 1e-6)),
                math.nan,
                (now - t0) * 1e3 if config.record_time else 0.0,
            )
        )
        t0 = now
        state = StrategyState(p=p, s=s.copy(), v=v.copy() if link_based else None, day=day, log_p=log_p)
        result.routes, result.state = rs, state
        if callback is not None:
            callback(rs, state, u, gap)

        new = [r for r in best if r not in rs]
        if gap <= config.gap_tol and not new and day >= config.min_days:
            trace.converged = True
            trace.message = f"converged on day {day}"
            break
        if day >= config.max_days:
            trace.message = f"not converged after {config.max_days} days (gap {gap:.3g})"
            break

        # valuations for day t+1
        if link_based:
            v = v + config.eta * u
            if noise_on:
                v = v + rng.normal(0.0, sigma0 / (1.0 + day), size=net.n_links)
        else:
            s_prev = s
            s = s + config.eta * (rs.lam_t @ u)
        if new:
            if not link_based:
                # as good as the best known route of the OD, valued before today's costs
                floor = rs.od_min(s_prev)
                s = np.concatenate([s, [floor[r.od_index] for r in new]])
            rs, _ = extend_routes(rs, new)
            for r in new:
                result.discoveries.append((day + 1, r.od_index, r.links))
            last_new = day + 1
        elif noise_on and day + 1 - last_new >= config.noise_stop_window:
            noise_on = False
            result.noise_off_day = day + 1
            result.stabilization_v = v.copy()
        day += 1

    result.last_new_day = last_new
    if log_path is not None:
        result.write_log(log_path)
    return result
