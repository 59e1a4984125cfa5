"""Routes, incidence matrices, shortest paths and flow aggregation."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .network import Network, ODPair

__all__ = [
    "ROUTES_3N4L",
    "builtin_routes",
    "Route",
    "RouteSet",
    "StrategyState",
    "RouteError",
    "SIMPLEX_TOL",
    "shortest_path",
    "shortest_routes",
    "shortest_distances",
    "route_cost",
    "aggregate_flows",
    "add_route",
    "extend_routes",
    "enumerate_acyclic_routes",
    "full_route_set",
    "enumerate_shortest_routes",
    "check_strategy",
    "write_routes",
    "read_routes",
]

# per-OD sums of a feasible strategy may drift this far from one
SIMPLEX_TOL = 1e-9
# relative slack when deciding that a link lies on a shortest path
_TIGHT_RTOL = 1e-12


class RouteError(ValueError):
    """Invalid route or route set."""


@dataclass(frozen=True)
class Route:
    od_index: int
    links: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(int(a) for a in self.links))

    def __str__(self):
        return f"{self.od_index}: " + ",".join(str(a) for a in self.links)


def _validate_route(net: Network, r: Route) -> None:
    if not 0 <= r.od_index < net.n_od:
        raise RouteError(f"route references unknown OD index {r.od_index}")
    if not r.links:
        raise RouteError("empty route")
    od = net.od_pairs[r.od_index]
    node = od.origin
    visited = {node}
    for a in r.links:
        if not 0 <= a < net.n_links:
            raise RouteError(f"route references unknown link {a}")
        if net.tails[a] != node:
            raise RouteError(f"route {r} is not a connected path (link {a} does not leave node {node})")
        node = int(net.heads[a])
        if node in visited:
            raise RouteError(f"route {r} repeats node {node}")
        visited.add(node)
    if node != od.destination:
        raise RouteError(f"route {r} ends at node {node}, not at destination {od.destination}")


class RouteSet:
    """Immutable collection of routes with link-route and OD-route incidence.

    ``lam`` is the |A| x |K| link-route matrix, ``sigma`` the |W| x |K|
    OD-route matrix. Extending a route set returns a new object.
    """

    def __init__(self, net: Network, routes, validate: bool = True):
        routes = tuple(routes)
        if validate:
            for r in routes:
                _validate_route(net, r)
        index = {}
        for k, r in enumerate(routes):
            key = (r.od_index, r.links)
            if key in index:
                raise RouteError(f"duplicate route {r}")
            index[key] = k
        od_of = np.array([r.od_index for r in routes], dtype=np.int64)
        missing = set(range(net.n_od)) - set(od_of.tolist())
        if missing:
            raise RouteError(f"OD pairs without any route: {sorted(missing)[:10]}")

        self.net = net
        self.routes = routes
        self._index = index
        self.od_of = od_of
        n = len(routes)
        rows = np.fromiter((a for r in routes for a in r.links), dtype=np.int64)
        cols = np.repeat(np.arange(n), [len(r.links) for r in routes])
        self.lam = sp.csc_matrix((np.ones(len(rows)), (rows, cols)), shape=(net.n_links, n))
        self.lam_t = self.lam.T.tocsr()
        self.sigma = sp.csr_matrix((np.ones(n), (od_of, np.arange(n))), shape=(net.n_od, n))
        order = np.argsort(od_of, kind="stable")
        bounds = np.searchsorted(od_of[order], np.arange(net.n_od + 1))
        self.per_od = [order[bounds[w]:bounds[w + 1]] for w in range(net.n_od)]
        self._order = order
        self._starts = bounds[:-1]

    def __len__(self):
        return len(self.routes)

    @property
    def n_routes(self) -> int:
        return len(self.routes)

    def __contains__(self, r: Route) -> bool:
        return (r.od_index, r.links) in self._index

    def index(self, r: Route) -> int:
        return self._index[(r.od_index, r.links)]

    def counts(self) -> np.ndarray:
        """Number of routes per OD pair."""
        return np.diff(np.append(self._starts, len(self.routes)))

    def route_demand(self, d=None) -> np.ndarray:
        """Demand of the OD pair of every route (the vector ``q``)."""
        d = self.net.demand if d is None else np.asarray(d, dtype=float)
        return d[self.od_of]

    # per-OD reductions over route vectors
    def od_sum(self, v) -> np.ndarray:
        return np.add.reduceat(np.asarray(v, dtype=float)[self._order], self._starts)

    def od_min(self, v) -> np.ndarray:
        return np.minimum.reduceat(np.asarray(v, dtype=float)[self._order], self._starts)

    def od_max(self, v) -> np.ndarray:
        return np.maximum.reduceat(np.asarray(v, dtype=float)[self._order], self._starts)

    def uniform(self) -> np.ndarray:
        return 1.0 / self.counts()[self.od_of]

    def subset(self, keep) -> RouteSet:
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return RouteSet(self.net, [self.routes[k] for k in keep], validate=False)


@dataclass
class StrategyState:
    """Route choice state of one day: probabilities, route and link valuations."""

    p: np.ndarray
    s: np.ndarray | None = None
    v: np.ndarray | None = None
    day: int = 0
    log_p: np.ndarray | None = field(default=None, repr=False)

    def advance(self, **changes) -> StrategyState:
        changes.setdefault("day", self.day + 1)
        changes.setdefault("log_p", None)
        return replace(self, **changes)


def check_strategy(rs: RouteSet, p, tol: float = SIMPLEX_TOL) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape != (rs.n_routes,):
        raise ValueError(f"strategy must have length {rs.n_routes}, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError("strategy has negative or non-finite entries")
    err = np.max(np.abs(rs.od_sum(p) - 1.0))
    if err > tol:
        raise ValueError(f"strategy violates the per-OD simplex constraint (max error {err:.3g})")
    return p


def route_cost(rs: RouteSet, u) -> np.ndarray:
    """Route costs ``c = Lambda^T u``."""
    u = np.asarray(u, dtype=float)
    if u.shape != (rs.net.n_links,):
        raise ValueError(f"link cost vector must have length {rs.net.n_links}")
    return rs.lam_t @ u


def aggregate_flows(rs: RouteSet, p, d=None) -> np.ndarray:
    """Link flows ``x = Lambda diag(q) p``."""
    p = check_strategy(rs, p)
    return rs.lam @ (rs.route_demand(d) * p)


def add_route(rs: RouteSet, r: Route) -> tuple[RouteSet, bool]:
    if r in rs:
        return rs, False
    _validate_route(rs.net, r)
    return RouteSet(rs.net, rs.routes + (r,), validate=False), True


def extend_routes(rs: RouteSet, routes) -> tuple[RouteSet, list[bool]]:
    """Append every route not yet present, in order, as one batch."""
    new, flags, seen = [], [], set()
    for r in routes:
        key = (r.od_index, r.links)
        fresh = r not in rs and key not in seen
        if fresh:
            _validate_route(rs.net, r)
            seen.add(key)
            new.append(r)
        flags.append(fresh)
    if not new:
        return rs, flags
    return RouteSet(rs.net, rs.routes + tuple(new), validate=False), flags


# ---------------------------------------------------------------------------
# shortest paths


def _check_costs(net: Network, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (net.n_links,):
        raise ValueError(f"link cost vector must have length {net.n_links}")
    if np.any(u < 0) or not np.all(np.isfinite(u)):
        raise ValueError("shortest paths need finite non-negative link costs")
    return u


def _distances_to(net: Network, u: np.ndarray, dest: int) -> np.ndarray:
    """Label-setting search on the reversed graph; heap ties broken by node id."""
    dist = np.full(net.node_count, np.inf)
    dist[dest] = 0.0
    done = np.zeros(net.node_count, dtype=bool)
    heap = [(0.0, dest)]
    tails = net.tails
    while heap:
        dj, j = heapq.heappop(heap)
        if done[j]:
            continue
        done[j] = True
        for a in net.in_links(j):
            i = int(tails[a])
            nd = dj + u[a]
            if nd < dist[i]:
                dist[i] = nd
                heapq.heappush(heap, (nd, i))
    return dist


def _distances_from(net: Network, u: np.ndarray, origin: int) -> np.ndarray:
    dist = np.full(net.node_count, np.inf)
    dist[origin] = 0.0
    done = np.zeros(net.node_count, dtype=bool)
    heap = [(0.0, origin)]
    heads = net.heads
    while heap:
        di, i = heapq.heappop(heap)
        if done[i]:
            continue
        done[i] = True
        for a in net.out_links(i):
            j = int(heads[a])
            nd = di + u[a]
            if nd < dist[j]:
                dist[j] = nd
                heapq.heappush(heap, (nd, j))
    return dist


def _lexmin_tight_path(net: Network, u: np.ndarray, origin: int, dest: int, dist_to: np.ndarray) -> tuple[int, ...]:
    """Lexicographically smallest link sequence among shortest simple paths.

    Depth-first search over links that lie on some shortest path to ``dest``,
    visiting out-links in id order; the first complete path found is the
    lexicographic minimum.
    """
    heads = net.heads

    def tight(a: int, i: int) -> bool:
        j = int(heads[a])
        target = dist_to[i]
        return abs(u[a] + dist_to[j] - target) <= _TIGHT_RTOL * abs(target)

    path: list[int] = []
    on_path = {origin}
    stack = [iter([a for a in net.out_links(origin) if tight(a, origin)])]
    while stack:
        a = next(stack[-1], None)
        if a is None:
            stack.pop()
            if path:
                on_path.discard(int(heads[path.pop()]))
            continue
        j = int(heads[a])
        if j in on_path:
            continue
        path.append(a)
        if j == dest:
            return tuple(path)
        on_path.add(j)
        stack.append(iter([b for b in net.out_links(j) if tight(b, j)]))
    raise RouteError(f"no simple shortest path from {origin} to {dest}")


def _od_index(net: Network, od) -> int:
    if isinstance(od, ODPair):
        for w, o in enumerate(net.od_pairs):
            if o == od:
                return w
        raise ValueError(f"OD pair {od} not in network")
    return int(od)


def shortest_path(net: Network, u, od) -> Route:
    """Minimum-cost simple route for one OD pair (given as index or ODPair).

    Ties are broken by the lexicographically smallest link-id sequence.
    """
    u = _check_costs(net, u)
    w = _od_index(net, od)
    o, d = net.od_pairs[w].origin, net.od_pairs[w].destination
    dist_to = _distances_to(net, u, d)
    if not np.isfinite(dist_to[o]):
        raise RouteError(f"destination {d} unreachable from {o}")
    return Route(w, _lexmin_tight_path(net, u, o, d, dist_to))


def shortest_routes(net: Network, u) -> tuple[list[Route], np.ndarray]:
    """Shortest route and its cost for every OD pair (one search per destination)."""
    u = _check_costs(net, u)
    by_dest: dict[int, list[int]] = {}
    for w, od in enumerate(net.od_pairs):
        by_dest.setdefault(od.destination, []).append(w)
    routes: list[Route | None] = [None] * net.n_od
    costs = np.empty(net.n_od)
    for d, ws in by_dest.items():
        dist_to = _distances_to(net, u, d)
        for w in ws:
            o = net.od_pairs[w].origin
            if not np.isfinite(dist_to[o]):
                raise RouteError(f"destination {d} unreachable from {o}")
            routes[w] = Route(w, _lexmin_tight_path(net, u, o, d, dist_to))
            costs[w] = dist_to[o]
    return routes, costs


def shortest_distances(net: Network, u) -> np.ndarray:
    """Shortest-path cost per OD pair over the full network."""
    u = _check_costs(net, u)
    origins = {od.origin for od in net.od_pairs}
    dests = {od.destination for od in net.od_pairs}
    out = np.empty(net.n_od)
    if len(origins) <= len(dests):
        cache = {o: _distances_from(net, u, o) for o in origins}
        for w, od in enumerate(net.od_pairs):
            out[w] = cache[od.origin][od.destination]
    else:
        cache = {d: _distances_to(net, u, d) for d in dests}
        for w, od in enumerate(net.od_pairs):
            out[w] = cache[od.destination][od.origin]
    if not np.all(np.isfinite(out)):
        raise RouteError("some OD pair is unreachable")
    return out


def enumerate_acyclic_routes(net: Network, od, cap: int = 10**6) -> list[Route]:
    """All simple directed paths of one OD pair in depth-first, link-id order."""
    if cap <= 0:
        raise ValueError("cap must be positive")
    w = _od_index(net, od)
    origin, dest = net.od_pairs[w].origin, net.od_pairs[w].destination
    heads = net.heads
    out: list[Route] = []
    path: list[int] = []
    on_path = {origin}
    stack = [iter(net.out_links(origin))]
    while stack:
        a = next(stack[-1], None)
        if a is None:
            stack.pop()
            if path:
                on_path.discard(int(heads[path.pop()]))
            continue
        j = int(heads[a])
        if j in on_path:
            continue
        if j == dest:
            out.append(Route(w, tuple(path + [a])))
            if len(out) > cap:
                raise RouteError(f"more than {cap} acyclic routes for OD {w}")
            continue
        path.append(a)
        on_path.add(j)
        stack.append(iter(net.out_links(j)))
    return out


def enumerate_shortest_routes(net: Network, u, od, rtol: float = 1e-9, cap: int = 10**5) -> list[Route]:
    """All simple routes of one OD pair whose cost is within ``rtol`` of the minimum."""
    u = _check_costs(net, u)
    w = _od_index(net, od)
    origin, dest = net.od_pairs[w].origin, net.od_pairs[w].destination
    dist_to = _distances_to(net, u, dest)
    if not np.isfinite(dist_to[origin]):
        raise RouteError(f"destination {dest} unreachable from {origin}")
    budget = dist_to[origin] * rtol
    heads = net.heads
    out: list[Route] = []

    def walk(i, path, on_path, spent):
        for a in net.out_links(i):
            j = int(heads[a])
            if j in on_path:
                continue
            cost = spent + u[a]
            # prune branches whose best completion exceeds the slack
            if cost + dist_to[j] - dist_to[origin] > budget:
                continue
            if j == dest:
                out.append(Route(w, tuple(path + [int(a)])))
                if len(out) > cap:
                    raise RouteError(f"more than {cap} near-shortest routes for OD {w}")
                continue
            on_path.add(j)
            walk(j, path + [int(a)], on_path, cost)
            on_path.discard(j)

    walk(origin, [], {origin}, 0.0)
    return out


def full_route_set(net: Network, cap: int = 10**6) -> RouteSet:
    routes = []
    for w in range(net.n_od):
        routes.extend(enumerate_acyclic_routes(net, w, cap))
    return RouteSet(net, routes, validate=False)


ROUTES_3N4L = ((0, 2), (1, 3), (0, 3), (1, 2))


def builtin_routes(net: Network) -> RouteSet:
    """Route set in the conventional order for a builtin network.

    3N4L routes are ordered {1,3}, {2,4}, {1,4}, {2,3} in 1-based link ids;
    other networks get their full acyclic enumeration.
    """
    if net.name == "3n4l":
        return RouteSet(net, [Route(0, links) for links in ROUTES_3N4L])
    return full_route_set(net)


def write_routes(rs: RouteSet, path) -> None:
    Path(path).write_text("".join(f"{r}\n" for r in rs.routes))


def read_routes(net: Network, path) -> RouteSet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    routes = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            od_s, links_s = line.split(":")
            routes.append(Route(int(od_s), tuple(int(a) for a in links_s.split(","))))
        except ValueError:
            raise RouteError(f"{path}:{lineno}: malformed route line {line!r}") from None
    return RouteSet(net, routes)
