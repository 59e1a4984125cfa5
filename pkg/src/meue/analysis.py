"""Entropy and KL measures, proportionality diagnostics and independent oracles."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from math import lcm

import numpy as np
import scipy.sparse as sp

from .network import Network, link_cost_derivatives, link_costs
from .routing import (
    RouteSet,
    check_strategy,
    enumerate_shortest_routes,
    extend_routes,
    route_cost,
    shortest_routes,
)

__all__ = [
    "KernelBasis",
    "ProportionalityReport",
    "OracleResult",
    "LOG_FLOOR",
    "entropy",
    "kl_divergence",
    "kernel_basis",
    "verify_kernel_basis",
    "proportionality_residuals",
    "lambda_3n4l",
    "ue_strategy_3n4l",
    "kl_projection_oracle",
    "entropy_count_oracle",
    "used_route_count",
    "analysis_report",
    "UEResult",
    "solve_user_equilibrium",
    "meue_reference",
]

LOG_FLOOR = 1e-300


def _xlogy(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(y[pos])
    return out


def entropy(p, d=None, rs: RouteSet | None = None) -> float:
    """Negative entropy ``phi(p) = sum_k q_k p_k log p_k`` (0 log 0 = 0).

    ``d`` is the OD demand vector; with ``rs`` given, per-route demand is
    looked up through the OD-route incidence, otherwise ``d`` is taken as a
    single OD demand (scalar) or already per route.
    """
    p = np.asarray(p, dtype=float)
    q = _route_demand(p, d, rs)
    return float(np.sum(q * _xlogy(p, p)))


def _route_demand(p, d, rs):
    if rs is not None:
        return rs.route_demand(d)
    if d is None:
        return np.ones_like(p)
    d = np.asarray(d, dtype=float)
    if d.ndim == 0 or d.size == 1:
        return np.full_like(p, float(d.reshape(-1)[0]))
    return d


def kl_divergence(p, p0, d=None, rs: RouteSet | None = None) -> float:
    """Demand-weighted KL divergence ``D(p, p0)``; ``inf`` when supp(p) is not within supp(p0)."""
    p = np.asarray(p, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    if np.any((p > 0) & (p0 <= 0)):
        return math.inf
    q = _route_demand(p, d, rs)
    pos = p > 0
    return float(np.sum(q[pos] * p[pos] * (np.log(p[pos]) - np.log(p0[pos]))))


def used_route_count(p, tau_threshold: float) -> int:
    return int(np.count_nonzero(np.asarray(p) > tau_threshold))


# ---------------------------------------------------------------------------
# kernel basis


@dataclass
class KernelBasis:
    """Integer basis of ker(Sigma) ∩ ker(Lambda); one row per basis vector."""

    vectors: list[np.ndarray]
    n_routes: int
    matrix: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        if self.vectors:
            self.matrix = sp.csr_matrix(np.vstack(self.vectors).astype(float))
        else:
            self.matrix = sp.csr_matrix((0, self.n_routes))

    def __len__(self):
        return len(self.vectors)

    def apply(self, v) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=float)


def _rref_nullspace(rows: list[dict[int, int]], ncols: int) -> list[dict[int, Fraction]]:
    """Exact null space of a sparse integer matrix via reduced row echelon form."""
    pivots: dict[int, dict[int, Fraction]] = {}
    col_rows: dict[int, set[int]] = {}  # column -> pivot columns whose row has an entry there
    for raw in rows:
        r = {c: Fraction(v) for c, v in raw.items() if v}
        for c in [c for c in r if c in pivots]:
            f = r.get(c)
            if not f:
                continue
            for cc, vv in pivots[c].items():
                nv = r.get(cc, 0) - f * vv
                if nv:
                    r[cc] = nv
                else:
                    r.pop(cc, None)
        if not r:
            continue
        pc = min(r, key=lambda c: (len(col_rows.get(c, ())), c))
        inv = 1 / r[pc]
        r = {c: v * inv for c, v in r.items()}
        for other in list(col_rows.get(pc, ())):
            R = pivots[other]
            f = R[pc]
            for cc, vv in r.items():
                nv = R.get(cc, 0) - f * vv
                if nv:
                    if cc not in R:
                        col_rows.setdefault(cc, set()).add(other)
                    R[cc] = nv
                else:
                    if cc in R:
                        del R[cc]
                        col_rows[cc].discard(other)
        pivots[pc] = r
        for cc in r:
            col_rows.setdefault(cc, set()).add(pc)

    null = []
    for f in range(ncols):
        if f in pivots:
            continue
        e = {f: Fraction(1)}
        for pc in col_rows.get(f, ()):
            if pc != f:
                e[pc] = -pivots[pc][f]
        null.append(e)
    return null


def kernel_basis(rs: RouteSet) -> KernelBasis:
    """Basis of ker(Sigma) ∩ ker(Lambda) in exact rational arithmetic.

    Per OD pair the first route is a reference; kernel vectors of Sigma are
    differences against it, which reduces the problem to the null space of the
    link-difference matrix. Vectors are scaled to integers.
    """
    n = rs.n_routes
    lam = rs.lam.tocsc()
    link_sets = [set(lam.indices[lam.indptr[k]:lam.indptr[k + 1]].tolist()) for k in range(n)]
    ref = {int(ks[0]): None for ks in rs.per_od}
    ref_of = np.empty(n, dtype=np.int64)
    for ks in rs.per_od:
        ref_of[ks] = ks[0]
    free = [k for k in range(n) if k not in ref]
    col_of = {k: j for j, k in enumerate(free)}

    # rows = links, columns = non-reference routes, entry = Lambda_k - Lambda_ref(k)
    link_rows: dict[int, dict[int, int]] = {}
    for k in free:
        j = col_of[k]
        base = link_sets[ref_of[k]]
        for a in link_sets[k] - base:
            link_rows.setdefault(a, {})[j] = 1
        for a in base - link_sets[k]:
            link_rows.setdefault(a, {})[j] = -1
    null = _rref_nullspace([link_rows[a] for a in sorted(link_rows)], len(free))

    vectors = []
    for y in null:
        scale = lcm(*(v.denominator for v in y.values()))
        e = [0] * n
        for j, v in y.items():
            k = free[j]
            iv = int(v * scale)
            e[k] += iv
            e[ref_of[k]] -= iv
        vec = np.array(e, dtype=object)
        g = math.gcd(*[int(t) for t in e if t])
        vec = vec // g
        if max(abs(int(t)) for t in vec) >= 2**53:
            raise OverflowError("kernel basis entries exceed exact float range")
        vectors.append(vec.astype(np.int64))
    return KernelBasis(vectors, n)


def verify_kernel_basis(rs: RouteSet, basis: KernelBasis) -> bool:
    """Check Sigma e = 0 and Lambda e = 0 exactly in integer arithmetic."""
    lam = rs.lam.tocsc()
    for e in basis.vectors:
        link_sum: dict[int, int] = {}
        od_sum = [0] * rs.net.n_od
        for k in np.flatnonzero(e):
            ek = int(e[k])
            od_sum[rs.od_of[k]] += ek
            for a in lam.indices[lam.indptr[k]:lam.indptr[k + 1]]:
                link_sum[int(a)] = link_sum.get(int(a), 0) + ek
        if any(od_sum) or any(link_sum.values()):
            return False
    return True


@dataclass
class ProportionalityReport:
    residuals: np.ndarray
    culo_residuals: np.ndarray
    max_abs: float
    clamped: bool


def proportionality_residuals(p, basis: KernelBasis, r: float = 0.0, s0=None, log_p=None) -> ProportionalityReport:
    """Residuals ``<e_m, log p>`` and ``<e_m, log p> + r <e_m, s0>``.

    ``log_p`` may be supplied directly (e.g. a log-softmax of valuations) to
    avoid underflow; otherwise ``log p`` is floored at ``LOG_FLOOR`` and the
    report is flagged as clamped when any entry in a basis support hits it.
    """
    clamped = False
    if log_p is None:
        p = np.asarray(p, dtype=float)
        support = np.asarray(abs(basis.matrix).sum(axis=0)).ravel() > 0 if len(basis) else np.zeros(p.size, bool)
        clamped = bool(np.any(p[support] < LOG_FLOOR))
        log_p = np.log(np.maximum(p, LOG_FLOOR))
    res = basis.apply(log_p)
    culo = res.copy()
    if s0 is not None and r:
        culo = culo + r * basis.apply(s0)
    max_abs = float(np.max(np.abs(culo))) if culo.size else 0.0
    return ProportionalityReport(res, culo, max_abs, clamped)


# ---------------------------------------------------------------------------
# 3N4L helpers


def lambda_3n4l(p) -> float:
    """Position of a 3N4L UE strategy in the one-parameter UE family."""
    p = np.asarray(p, dtype=float)
    if p.shape != (4,):
        raise ValueError("lambda_3n4l expects a 4-vector in 3N4L route order")
    return float(((0.3 - p[0]) + (0.4 - p[1]) + (p[2] - 0.3) + p[3]) / 4.0)


def ue_strategy_3n4l(lam: float) -> np.ndarray:
    return np.array([0.3 - lam, 0.4 - lam, 0.3 + lam, lam])


# ---------------------------------------------------------------------------
# KL projection oracle


@dataclass
class OracleResult:
    p_star: np.ndarray
    objective: float
    dual_beta: np.ndarray | None
    residual_norm: float
    converged: bool = True
    iterations: int = 0
    support: np.ndarray | None = None
    dual_alpha: np.ndarray | None = None
    kkt_residual: float = 0.0

    def to_dict(self) -> dict:
        return {
            "p_star": self.p_star.tolist(),
            "objective": self.objective,
            "dual_beta": None if self.dual_beta is None else self.dual_beta.tolist(),
            "dual_alpha": None if self.dual_alpha is None else self.dual_alpha.tolist(),
            "residual_norm": self.residual_norm,
            "kkt_residual": self.kkt_residual,
            "converged": self.converged,
            "iterations": self.iterations,
        }


def _golden_section(f, lo: float, hi: float, tol: float) -> float:
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    cand = [(f(x), x) for x in (a, (a + b) / 2, b)]
    return min(cand)[1]


def kl_projection_oracle(
    net: Network,
    rs: RouteSet,
    p0,
    mode: str = "dual_ascent",
    x_star=None,
    *,
    tol: float = 1e-9,
    max_iter: int = 10**6,
    stall_window: int = 10**4,
    support_rtol: float = 1e-6,
) -> OracleResult:
    """KL projection of ``p0`` onto the UE set.

    ``parametric_3n4l`` searches the closed-form 3N4L UE family by golden
    section. ``dual_ascent`` needs the UE link flow ``x_star`` and ascends the
    dual of ``min D(p, p0) s.t. Lambda diag(q) p = x_star``, where
    ``p(beta) ∝ p0 * exp(Lambda^T beta)`` per OD. Routes that are not
    shortest under ``u(x_star)`` (relative slack ``support_rtol``) or have
    ``p0 = 0`` are fixed at zero.
    """
    p0 = check_strategy(rs, p0)
    d = net.demand
    if mode == "parametric_3n4l":
        if net.name != "3n4l" or rs.n_routes != 4:
            raise ValueError("parametric_3n4l applies to the builtin 3N4L network only")
        lam = _golden_section(lambda t: kl_divergence(ue_strategy_3n4l(t), p0, d, rs), 0.0, 0.3, 1e-12)
        p_star = ue_strategy_3n4l(lam)
        x = rs.lam @ (rs.route_demand(d) * p_star)
        x_ref = x if x_star is None else np.asarray(x_star, dtype=float)
        return OracleResult(p_star, kl_divergence(p_star, p0, d, rs), None, float(np.max(np.abs(x - x_ref))))
    if mode != "dual_ascent":
        raise ValueError(f"unknown oracle mode {mode!r}")
    if x_star is None:
        raise ValueError("dual_ascent requires the UE link flow x_star")
    x_star = np.asarray(x_star, dtype=float)

    c = route_cost(rs, link_costs(net, x_star))
    cmin = rs.od_min(c)[rs.od_of]
    support = (c - cmin <= support_rtol * np.maximum(cmin, 1.0)) & (p0 > 0)
    if np.any(rs.od_sum(support) == 0):
        raise ValueError("some OD pair has no admissible route under x_star")
    q = rs.route_demand(d)
    lam_s = rs.lam[:, support].tocsr()
    lamT = lam_s.T.tocsr()
    log_p0 = np.log(p0[support])
    od_s = rs.od_of[support]
    n_od = net.n_od
    q_s = q[support]

    def evaluate(beta):
        z = log_p0 + lamT @ beta
        zmax = np.full(n_od, -np.inf)
        np.maximum.at(zmax, od_s, z)
        ez = np.exp(z - zmax[od_s])
        tot = np.bincount(od_s, weights=ez, minlength=n_od)
        p = ez / tot[od_s]
        # dual objective to minimise: sum_w d_w log Z_w - beta^T x_star
        obj = float(np.sum(d * (np.log(tot) + zmax)) - beta @ x_star)
        return p, obj, z - zmax[od_s] - np.log(tot)[od_s]

    max_len = float(np.max(rs.lam.sum(axis=0)))
    step = 1.0 / (float(np.max(d)) * max_len)
    beta = np.zeros(net.n_links)
    p, obj, log_p = evaluate(beta)
    resid = lam_s @ (q_s * p) - x_star
    best = (float(np.max(np.abs(resid))), beta.copy(), p.copy(), log_p.copy())
    since_best = 0
    it = 0
    converged = best[0] <= tol
    while not converged and it < max_iter:
        it += 1
        trial = beta - step * resid
        p_t, obj_t, log_t = evaluate(trial)
        # changes below rounding noise are accepted, otherwise steps collapse near the optimum
        if obj_t > obj + 1e-13 * max(1.0, abs(obj)):
            step *= 0.5
            if step < 1e-300:
                break
            continue
        beta, p, obj, log_p = trial, p_t, obj_t, log_t
        resid = lam_s @ (q_s * p) - x_star
        rn = float(np.max(np.abs(resid)))
        if rn < best[0] * (1 - 1e-12):
            best = (rn, beta.copy(), p.copy(), log_p.copy())
            since_best = 0
        else:
            since_best += 1
            if since_best >= stall_window:
                break
        converged = rn <= tol

    rn, beta, p_sup, log_sup = best
    p_star = np.zeros(rs.n_routes)
    p_star[support] = p_sup
    # recover alpha per OD from the stationarity condition on the support
    gap_vec = log_sup - log_p0 - lamT @ beta
    alpha = np.bincount(od_s, weights=gap_vec, minlength=n_od) / np.bincount(od_s, minlength=n_od)
    kkt = float(np.max(np.abs(gap_vec - alpha[od_s])))
    return OracleResult(
        p_star,
        kl_divergence(p_star, p0, d, rs),
        beta,
        rn,
        converged=rn <= tol,
        iterations=it,
        support=support,
        dual_alpha=alpha,
        kkt_residual=kkt,
    )


# ---------------------------------------------------------------------------
# state counting


def entropy_count_oracle(p, d, tau: float, rs: RouteSet | None = None) -> tuple[float, float]:
    """Log number of traveller arrangements versus the scaled entropy.

    Returns ``(log_count, -phi(p) / tau)`` where ``log_count`` is the log
    multinomial coefficient computed with ``lgamma``.
    """
    p = np.asarray(p, dtype=float)
    q = _route_demand(p, d, rs)
    m = q * p / tau
    mi = np.rint(m)
    if np.any(mi < 0) or np.any(np.abs(m - mi) > 1e-9 * np.maximum(1.0, np.abs(m))):
        raise ValueError("route counts d_w p_k / tau must be non-negative integers")
    od = np.zeros(p.size, dtype=np.int64) if rs is None else rs.od_of
    log_count = 0.0
    for w in np.unique(od):
        mk = mi[od == w]
        n = mk.sum()
        log_count += math.lgamma(n + 1) - sum(math.lgamma(x + 1) for x in mk)
    return log_count, -entropy(p, q) / tau


def analysis_report(p, rs: RouteSet, d=None, basis: KernelBasis | None = None, r: float = 0.0, s0=None) -> dict:
    """JSON-ready summary of one strategy."""
    d = rs.net.demand if d is None else np.asarray(d, dtype=float)
    p = np.asarray(p, dtype=float)
    report = {
        "entropy": -entropy(p, d, rs),
        "kl": kl_divergence(p, rs.uniform(), d, rs),
        "residuals": [],
        "used_counts": {"1e-4": used_route_count(p, 1e-4), "1e-6": used_route_count(p, 1e-6)},
    }
    if basis is None and rs.n_routes <= 5000:
        basis = kernel_basis(rs)
    if basis is not None and len(basis):
        pr = proportionality_residuals(p, basis, r, s0)
        report["residuals"] = pr.residuals.tolist()
        report["residuals_clamped"] = pr.clamped
    if rs.net.name == "3n4l" and rs.n_routes == 4:
        report["lambda"] = lambda_3n4l(p)
    return report


# ---------------------------------------------------------------------------
# reference UE and MEUE solutions


@dataclass
class UEResult:
    x: np.ndarray
    routes: RouteSet
    p: np.ndarray
    gap: float
    iterations: int
    converged: bool


def solve_user_equilibrium(net: Network, gap_tol: float = 1e-12, max_iter: int = 5000) -> UEResult:
    """Link flows at UE by path-based gradient projection with route generation.

    Each sweep adds the current shortest route of every OD pair and then, OD by
    OD, moves flow from costlier routes to the cheapest one with a Newton step
    scaled by the summed cost derivatives of the links the two routes do not
    share. Used as an independent reference; the UE link flow is unique under
    strictly increasing costs.
    """
    d = net.demand
    routes, _ = shortest_routes(net, net.free_flow_costs())
    rs = RouteSet(net, routes, validate=False)
    f = [np.array([d[w]]) for w in range(net.n_od)]
    x = rs.lam @ d
    gap = math.inf
    it = 0
    while it < max_iter:
        it += 1
        u = link_costs(net, x)
        best, best_cost = shortest_routes(net, u)
        total = float(u @ x)
        gap = max((total - float(d @ best_cost)) / total, 0.0)
        if gap <= gap_tol:
            break
        new = [r for r in best if r not in rs]
        if new:
            rs, _ = extend_routes(rs, new)
            grow = np.bincount([r.od_index for r in new], minlength=net.n_od)
            f = [np.append(f[w], np.zeros(grow[w])) if grow[w] else f[w] for w in range(net.n_od)]
        lam = rs.lam.tocsc()
        for w, ks in enumerate(rs.per_od):
            if ks.size == 1:
                continue
            L = lam[:, ks].toarray()
            u = link_costs(net, x)
            g = link_cost_derivatives(net, x)
            c = L.T @ u
            b = int(np.argmin(c))
            diff = np.abs(L - L[:, [b]])
            curv = diff.T @ g
            fw = f[w]
            move = np.zeros(ks.size)
            other = np.arange(ks.size) != b
            with np.errstate(divide="ignore", invalid="ignore"):
                step = np.where(curv > 0, (c - c[b]) / curv, np.inf)
            move[other] = np.minimum(fw[other], step[other])
            if not move.any():
                continue
            fw = fw - move
            fw[b] += move.sum()
            x = x + L @ (fw - f[w])
            f[w] = fw
        x = np.maximum(x, 0.0)
    q = rs.route_demand(d)
    flow = np.empty(rs.n_routes)
    for w, ks in enumerate(rs.per_od):
        flow[ks] = f[w]
    return UEResult(rs.lam @ flow, rs, flow / q, gap, it, gap <= gap_tol)


def meue_reference(net: Network, ue: UEResult | None = None, rtol: float = 1e-8, **oracle_kw):
    """Maximum-entropy UE strategy over every route that is shortest at the UE costs.

    Returns ``(route_set, OracleResult)``; the strategy is the KL projection of
    the per-OD uniform strategy onto the UE set.
    """
    ue = solve_user_equilibrium(net) if ue is None else ue
    u = link_costs(net, ue.x)
    routes = []
    for w in range(net.n_od):
        routes.extend(enumerate_shortest_routes(net, u, w, rtol=rtol))
    rs = RouteSet(net, routes, validate=False)
    oracle_kw.setdefault("support_rtol", rtol)
    res = kl_projection_oracle(net, rs, rs.uniform(), "dual_ascent", x_star=ue.x, **oracle_kw)
    return rs, res
