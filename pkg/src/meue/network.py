"""Road network: links, separable cost functions, OD demand, TNTP input/output."""
from __future__ import annotations

import re
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "CostSpec",
    "Link",
    "ODPair",
    "Network",
    "NetworkFormatError",
    "load_tntp",
    "write_tntp",
    "builtin_network",
    "link_costs",
    "link_cost_derivatives",
    "BUILTIN_NAMES",
]


class NetworkFormatError(ValueError):
    """Raised when a network or trips file cannot be parsed."""


@dataclass(frozen=True)
class CostSpec:
    """Cost function of a single link.

    ``polynomial``: ``h + w * x**m``; ``bpr``: ``fft * (1 + b * (x / capacity)**power)``;
    ``constant``: ``h``.
    """

    kind: str
    h: float = 0.0
    w: float = 0.0
    m: float = 1.0
    free_flow_time: float = 0.0
    capacity: float = 1.0
    b: float = 0.0
    power: float = 1.0

    def __post_init__(self):
        if self.kind not in ("polynomial", "bpr", "constant"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        coeffs = (self.h, self.w, self.m, self.free_flow_time, self.b, self.power)
        if any(c < 0 for c in coeffs):
            raise ValueError("cost coefficients must be non-negative")
        if self.kind == "bpr" and not self.capacity > 0:
            raise ValueError("BPR link with zero capacity has undefined cost")

    @classmethod
    def polynomial(cls, h: float, w: float, m: float) -> CostSpec:
        return cls("polynomial", h=float(h), w=float(w), m=float(m))

    @classmethod
    def bpr(cls, free_flow_time: float, capacity: float, b: float = 0.15, power: float = 4.0) -> CostSpec:
        return cls("bpr", free_flow_time=float(free_flow_time), capacity=float(capacity), b=float(b), power=float(power))

    @classmethod
    def constant(cls, h: float) -> CostSpec:
        return cls("constant", h=float(h))

    def __call__(self, x: float) -> float:
        if self.kind == "polynomial":
            return self.h + self.w * x**self.m
        if self.kind == "bpr":
            return self.free_flow_time * (1.0 + self.b * (x / self.capacity) ** self.power)
        return self.h


@dataclass(frozen=True)
class Link:
    id: int
    tail: int
    head: int
    cost: CostSpec

    def __post_init__(self):
        if self.tail == self.head:
            raise ValueError(f"link {self.id} is a self-loop at node {self.tail}")


@dataclass(frozen=True)
class ODPair:
    origin: int
    destination: int
    demand: float

    def __post_init__(self):
        if self.origin == self.destination:
            raise ValueError(f"OD pair with origin == destination ({self.origin})")
        if not self.demand >= 0:
            raise ValueError("OD demand must be non-negative")


@dataclass(frozen=True, eq=False)
class Network:
    """Immutable directed network with separable link costs and an OD table.

    Vectorised coefficient arrays are precomputed so that :func:`link_costs`
    evaluates all links at once.
    """

    node_count: int
    links: tuple[Link, ...]
    od_pairs: tuple[ODPair, ...]
    name: str = ""
    _arrays: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "od_pairs", tuple(self.od_pairs))
        for i, link in enumerate(self.links):
            if link.id != i:
                raise ValueError(f"link ids must be dense 0..|A|-1, got {link.id} at position {i}")
            for node in (link.tail, link.head):
                if not 0 <= node < self.node_count:
                    raise ValueError(f"link {i} references unknown node {node}")
        for od in self.od_pairs:
            for node in (od.origin, od.destination):
                if not 0 <= node < self.node_count:
                    raise ValueError(f"OD pair references unknown node {node}")

        kinds = [lk.cost.kind for lk in self.links]
        a = self._arrays
        a["tail"] = np.array([lk.tail for lk in self.links], dtype=np.int64)
        a["head"] = np.array([lk.head for lk in self.links], dtype=np.int64)
        a["is_poly"] = np.array([k == "polynomial" for k in kinds])
        a["is_bpr"] = np.array([k == "bpr" for k in kinds])
        a["h"] = np.array([lk.cost.h for lk in self.links], dtype=float)
        a["w"] = np.array([lk.cost.w if k == "polynomial" else 0.0 for lk, k in zip(self.links, kinds)])
        a["m"] = np.array([lk.cost.m for lk in self.links], dtype=float)
        a["fft"] = np.array([lk.cost.free_flow_time for lk in self.links], dtype=float)
        a["cap"] = np.array([lk.cost.capacity for lk in self.links], dtype=float)
        a["b"] = np.array([lk.cost.b for lk in self.links], dtype=float)
        a["power"] = np.array([lk.cost.power for lk in self.links], dtype=float)
        a["demand"] = np.array([od.demand for od in self.od_pairs], dtype=float)

        out = defaultdict(list)
        for lk in self.links:
            out[lk.tail].append(lk.id)
        a["out_links"] = [sorted(out[n]) for n in range(self.node_count)]
        inc = defaultdict(list)
        for lk in self.links:
            inc[lk.head].append(lk.id)
        a["in_links"] = [sorted(inc[n]) for n in range(self.node_count)]

        for w, od in enumerate(self.od_pairs):
            if not self._reachable(od.origin, od.destination):
                raise ValueError(f"OD pair {w} ({od.origin}->{od.destination}) is not connected")

    def _reachable(self, origin: int, destination: int) -> bool:
        seen = {origin}
        queue = deque([origin])
        heads = self._arrays["head"]
        while queue:
            n = queue.popleft()
            if n == destination:
                return True
            for a in self._arrays["out_links"][n]:
                h = int(heads[a])
                if h not in seen:
                    seen.add(h)
                    queue.append(h)
        return False

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_od(self) -> int:
        return len(self.od_pairs)

    @property
    def demand(self) -> np.ndarray:
        return self._arrays["demand"].copy()

    @property
    def tails(self) -> np.ndarray:
        return self._arrays["tail"]

    @property
    def heads(self) -> np.ndarray:
        return self._arrays["head"]

    def out_links(self, node: int) -> list[int]:
        return self._arrays["out_links"][node]

    def in_links(self, node: int) -> list[int]:
        return self._arrays["in_links"][node]

    def free_flow_costs(self) -> np.ndarray:
        return link_costs(self, np.zeros(self.n_links))

    def with_demand(self, demand) -> Network:
        demand = np.asarray(demand, dtype=float)
        ods = [ODPair(od.origin, od.destination, float(d)) for od, d in zip(self.od_pairs, demand)]
        return Network(self.node_count, self.links, ods, name=self.name)


def link_costs(net: Network, x) -> np.ndarray:
    """Evaluate every link cost at link flow ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (net.n_links,):
        raise ValueError(f"link flow must have length {net.n_links}, got shape {x.shape}")
    if np.any(x < 0):
        raise ValueError("negative flow entry in link flow vector")
    a = net._arrays
    u = a["h"].copy()
    poly = a["is_poly"]
    if poly.any():
        u[poly] += a["w"][poly] * x[poly] ** a["m"][poly]
    bpr = a["is_bpr"]
    if bpr.any():
        u[bpr] = a["fft"][bpr] * (1.0 + a["b"][bpr] * (x[bpr] / a["cap"][bpr]) ** a["power"][bpr])
    return u


def link_cost_derivatives(net: Network, x) -> np.ndarray:
    """Derivative of every link cost with respect to its own flow."""
    x = np.asarray(x, dtype=float)
    if x.shape != (net.n_links,) or np.any(x < 0):
        raise ValueError("link flow must be a non-negative vector with one entry per link")
    a = net._arrays
    g = np.zeros(net.n_links)
    poly = a["is_poly"] & (a["m"] > 0)
    if poly.any():
        m = a["m"][poly]
        g[poly] = a["w"][poly] * m * x[poly] ** (m - 1)
    bpr = a["is_bpr"]
    if bpr.any():
        pw, cap = a["power"][bpr], a["cap"][bpr]
        g[bpr] = a["fft"][bpr] * a["b"][bpr] * pw * x[bpr] ** (pw - 1) / cap**pw
    return g


# ---------------------------------------------------------------------------
# builtins

BUILTIN_NAMES = ("3n4l", "counterexample", "siouxfalls")
_DATA = Path(__file__).with_name("data")


def builtin_network(name: str) -> Network:
    """Return one of the packaged test networks.

    ``3n4l``: nodes 0 -> 1 -> 2 with two parallel links per hop, polynomial
    costs of degree 4 and 10 travelers from node 0 to node 2.
    ``counterexample``: three parallel constant-cost links ``[1, 1, 2]``, demand 1.
    ``siouxfalls``: the standard TNTP Sioux-Falls instance.
    """
    key = name.lower().replace("_", "").replace("-", "")
    if key == "3n4l":
        h = [4, 20, 1, 30]
        w = [1, 5, 30, 1]
        ends = [(0, 1), (0, 1), (1, 2), (1, 2)]
        links = [Link(i, t, hd, CostSpec.polynomial(h[i], w[i], 4)) for i, (t, hd) in enumerate(ends)]
        return Network(3, links, [ODPair(0, 2, 10.0)], name="3n4l")
    if key == "counterexample":
        links = [Link(i, 0, 1, CostSpec.constant(c)) for i, c in enumerate([1.0, 1.0, 2.0])]
        return Network(2, links, [ODPair(0, 1, 1.0)], name="counterexample")
    if key == "siouxfalls":
        net = load_tntp(_DATA / "SiouxFalls_net.tntp", _DATA / "SiouxFalls_trips.tntp")
        object.__setattr__(net, "name", "siouxfalls")
        return net
    raise ValueError(f"unknown builtin network {name!r} (choose from {', '.join(BUILTIN_NAMES)})")


# ---------------------------------------------------------------------------
# TNTP

_TAG = re.compile(r"<([^>]+)>\s*(.*)")


def _read_lines(path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    return path.read_text().splitlines()


def _split_metadata(lines: list[str], path) -> tuple[dict[str, str], list[str]]:
    meta = {}
    for i, line in enumerate(lines):
        m = _TAG.match(line.strip())
        if not m:
            continue
        tag = m.group(1).strip().upper()
        if tag == "END OF METADATA":
            return meta, lines[i + 1:]
        meta[tag] = m.group(2).strip()
    raise NetworkFormatError(f"malformed header in {path}: missing <END OF METADATA>")


def load_tntp(net_path, trips_path, name: str = "") -> Network:
    """Read a TNTP network/trips file pair.

    Node ids are converted to 0-based. Toll and link-type columns are read but
    not used. OD pairs with zero demand are dropped, repeated entries summed.
    """
    net_lines = _read_lines(net_path)
    meta, body = _split_metadata(net_lines, net_path)
    try:
        n_nodes = int(meta["NUMBER OF NODES"])
        n_links = int(meta["NUMBER OF LINKS"])
    except (KeyError, ValueError) as exc:
        raise NetworkFormatError(f"malformed header in {net_path}: {exc}") from None

    links = []
    for lineno, raw in enumerate(body):
        line = raw.strip()
        if not line or line.startswith("~"):
            continue
        fields = line.rstrip(";").split()
        if len(fields) < 7:
            raise NetworkFormatError(f"{net_path}: link row too short: {raw!r}")
        try:
            tail, head = int(fields[0]), int(fields[1])
            cap, _length, fft, b, power = (float(v) for v in fields[2:7])
            for extra in fields[7:]:
                float(extra)
        except ValueError:
            raise NetworkFormatError(f"{net_path}: non-numeric field in link row {raw!r}") from None
        if not (1 <= tail <= n_nodes and 1 <= head <= n_nodes):
            raise NetworkFormatError(f"{net_path}: link row references unknown node: {raw!r}")
        if cap <= 0:
            raise NetworkFormatError(f"{net_path}: zero-capacity link {tail}->{head}")
        links.append(Link(len(links), tail - 1, head - 1, CostSpec.bpr(fft, cap, b, power)))
    if len(links) != n_links:
        raise NetworkFormatError(f"{net_path}: header announces {n_links} links, found {len(links)}")

    trip_lines = _read_lines(trips_path)
    _, body = _split_metadata(trip_lines, trips_path)
    demand: dict[tuple[int, int], float] = {}
    origin = None
    for raw in body:
        line = raw.strip()
        if not line or line.startswith("~"):
            continue
        if line.lower().startswith("origin"):
            try:
                origin = int(line.split()[1])
            except (IndexError, ValueError):
                raise NetworkFormatError(f"{trips_path}: bad origin line {raw!r}") from None
            if not 1 <= origin <= n_nodes:
                raise NetworkFormatError(f"{trips_path}: unknown node {origin} in origin line")
            continue
        if origin is None:
            raise NetworkFormatError(f"{trips_path}: demand entry before any origin line")
        for entry in line.split(";"):
            entry = entry.strip()
            if not entry:
                continue
            try:
                dest_s, val_s = entry.split(":")
                dest, val = int(dest_s), float(val_s)
            except ValueError:
                raise NetworkFormatError(f"{trips_path}: bad demand entry {entry!r}") from None
            if not 1 <= dest <= n_nodes:
                raise NetworkFormatError(f"{trips_path}: unknown node {dest} in demand entry")
            if val > 0 and dest != origin:
                key = (origin - 1, dest - 1)
                demand[key] = demand.get(key, 0.0) + val
    ods = [ODPair(o, d, v) for (o, d), v in sorted(demand.items())]
    return Network(n_nodes, links, ods, name=name or Path(net_path).stem)


def write_tntp(net: Network, net_path, trips_path) -> None:
    """Write ``net`` in TNTP form; only BPR networks are representable."""
    if not all(lk.cost.kind == "bpr" for lk in net.links):
        raise ValueError("only BPR networks can be written as TNTP")
    zones = max([net.node_count] + [1])
    lines = [
        f"<NUMBER OF ZONES> {zones}",
        f"<NUMBER OF NODES> {net.node_count}",
        "<FIRST THRU NODE> 1",
        f"<NUMBER OF LINKS> {net.n_links}",
        "<END OF METADATA>",
        "",
        "~\tinit_node\tterm_node\tcapacity\tlength\tfree_flow_time\tb\tpower\tspeed\ttoll\tlink_type\t;",
    ]
    for lk in net.links:
        c = lk.cost
        lines.append(
            f"\t{lk.tail + 1}\t{lk.head + 1}\t{c.capacity!r}\t{c.free_flow_time!r}\t{c.free_flow_time!r}"
            f"\t{c.b!r}\t{c.power!r}\t0\t0\t1\t;"
        )
    Path(net_path).write_text("\n".join(lines) + "\n")

    by_origin = defaultdict(list)
    for od in net.od_pairs:
        by_origin[od.origin].append(od)
    total = sum(od.demand for od in net.od_pairs)
    out = [f"<NUMBER OF ZONES> {zones}", f"<TOTAL OD FLOW> {total!r}", "<END OF METADATA>", ""]
    for o in sorted(by_origin):
        out.append(f"Origin {o + 1}")
        out.append(" ".join(f"{od.destination + 1} : {od.demand!r};" for od in by_origin[o]))
    Path(trips_path).write_text("\n".join(out) + "\n")
