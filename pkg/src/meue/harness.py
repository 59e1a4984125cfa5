"""Scenario definitions, initial-point samplers and batch execution."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .analysis import (
    entropy,
    kernel_basis,
    lambda_3n4l,
    meue_reference,
    proportionality_residuals,
    solve_user_equilibrium,
)
from .dynamics import ConfigError, RunConfig, StepSchedule, log_logit_choice, run_dynamics
from .exploration import ExploreConfig, explore_run
from .network import Network, builtin_network, load_tntp
from .routing import RouteSet, builtin_routes, read_routes, write_routes

log = logging.getLogger(__name__)

__all__ = [
    "InitSampler",
    "Scenario",
    "SCENARIOS",
    "sample_initial",
    "make_scenario",
    "run_scenario",
    "DATA_DIR",
    "SF_R",
    "SF_NOISE_SIGMA0",
    "SF_NOISE_WINDOW",
]

DATA_DIR = Path(__file__).with_name("data")
COVER_FILE = DATA_DIR / "sf_route_cover.txt"
REFERENCE_ROUTES = DATA_DIR / "sf_meue_routes.txt"
REFERENCE_P = DATA_DIR / "sf_meue_p.txt"
REFERENCE_X = DATA_DIR / "sf_ue_flows.txt"
REFERENCE_ENTROPY = 59235.10

# Sioux-Falls settings; r is not given for these runs and was chosen by a sweep.
# Rates r * eta above about 0.1 oscillate on this network.
SF_R = 0.05
SF_NOISE_SIGMA0 = 50.0
SF_NOISE_WINDOW = 3000
SF_MAX_DAYS = 6000
# new routes enter at the best known valuation, which needs a much smaller r
SF_R_ROUTE_VALUATION = 0.005
SF_MAX_DAYS_ROUTE_VALUATION = 10000
SF_COVER_SEEDS = (0, 1, 2, 3, 4)

SAMPLER_KINDS = ("zero_valuation", "uniform_p0", "normal_s0", "normal_v0")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator, reproducible across platforms."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class InitSampler:
    kind: str = "zero_valuation"
    count: int = 1
    seed: int = 0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ConfigError(f"unknown sampler kind {self.kind!r}")
        if self.count < 1:
            raise ConfigError("sampler count must be at least 1")


def sample_initial(sampler: InitSampler, rs: RouteSet, r: float = 1.0) -> list[np.ndarray]:
    """Initial route valuations drawn according to ``sampler``."""
    rng = make_rng(sampler.seed)
    n = rs.n_routes
    out = []
    for _ in range(sampler.count):
        if sampler.kind == "zero_valuation":
            out.append(np.zeros(n))
        elif sampler.kind == "uniform_p0":
            if not r > 0:
                raise ConfigError("uniform_p0 needs r > 0")
            # uniform on each OD simplex
            g = rng.exponential(size=n)
            p0 = g / rs.od_sum(g)[rs.od_of]
            out.append(-np.log(p0) / r)
        elif sampler.kind == "normal_s0":
            out.append(rng.normal(0.0, sampler.scale, size=n))
        else:
            v0 = rng.normal(0.0, sampler.scale, size=rs.net.n_links)
            out.append(rs.lam_t @ v0)
    return out


@dataclass
class Scenario:
    name: str
    network: str | tuple[str, str] = "3n4l"
    grid: list = field(default_factory=list)
    sampler: InitSampler | list[InitSampler] | None = None
    out_dir: Path = Path("out")
    route_file: str | None = None
    notes: str = ""

    def __post_init__(self):
        if not self.grid:
            raise ConfigError(f"scenario {self.name!r} has an empty run grid")
        self.out_dir = Path(self.out_dir)

    def load_network(self) -> Network:
        if isinstance(self.network, (tuple, list)):
            return load_tntp(*self.network)
        return builtin_network(self.network)


# ---------------------------------------------------------------------------
# scenario catalogue

CULO_3N4L = dict(kind="culo", r=1.0, gap_tol=1e-10, max_days=20000, cost_scale="uniform", record_time=False)


def _grid(lo, hi, step):
    k = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(k + 1)]


def _stepsize_grid() -> list[RunConfig]:
    grid = []
    for eta in _grid(0.05, 1.0, 0.05):
        grid.append(RunConfig(schedule=StepSchedule("constant", eta), **CULO_3N4L))
    kw = dict(r=1.0, cost_scale="uniform", max_days=200000, record_time=False)
    for eta in _grid(0.05, 0.95, 0.05):
        grid.append(RunConfig("best_response", schedule=StepSchedule("harmonic", eta), gap_tol=1e-5, **kw))
    for eta in _grid(0.02, 0.2, 0.02):
        grid.append(RunConfig("projection", schedule=StepSchedule("constant", eta), gap_tol=1e-5, **kw))
    for eta in _grid(0.005, 0.13, 0.005):
        grid.append(RunConfig("smith", schedule=StepSchedule("constant", eta), gap_tol=1e-10, **kw))
    for eta in _grid(0.02, 0.4, 0.02):
        grid.append(RunConfig("replicator", schedule=StepSchedule("constant", eta), gap_tol=1e-10, **kw))
    return grid


def _noisy_config(seed: int) -> ExploreConfig:
    return ExploreConfig(
        "link_valuation",
        r=SF_R,
        noise_sigma0=SF_NOISE_SIGMA0,
        noise_stop_window=SF_NOISE_WINDOW,
        gap_tol=1e-5,
        max_days=SF_MAX_DAYS,
        seed=seed,
        record_time=False,
    )


def _sf_grid(seed: int) -> list:
    base = dict(r=SF_R, gap_tol=1e-5, max_days=SF_MAX_DAYS, seed=seed, record_time=False)
    culo = RunConfig("culo", schedule=StepSchedule("constant", 1.0), r=SF_R, gap_tol=1e-5, max_days=3000, seed=seed, record_time=False)
    return [
        ("A", culo),
        ("B", ExploreConfig("route_valuation", r=SF_R_ROUTE_VALUATION, noise_sigma0=0.0, gap_tol=1e-5,
                            max_days=SF_MAX_DAYS_ROUTE_VALUATION, seed=seed, record_time=False)),
        ("C", ExploreConfig("link_valuation", noise_sigma0=0.0, **base)),
        ("D", _noisy_config(seed)),
    ]


def make_scenario(name: str, out_dir="out", seed: int = 0, overrides: dict | None = None) -> Scenario:
    """Build a named scenario; ``overrides`` may replace scenario fields."""
    overrides = dict(overrides or {})
    if name == "3n4l-histogram":
        sc = Scenario(
            name,
            "3n4l",
            [RunConfig(schedule=StepSchedule("constant", 1.0), **CULO_3N4L)],
            [InitSampler("uniform_p0", 5000, seed), InitSampler("normal_s0", 5000, seed + 1)],
            out_dir,
        )
    elif name == "3n4l-entropy":
        sc = Scenario(
            name,
            "3n4l",
            [RunConfig(schedule=StepSchedule("constant", 1.0), **CULO_3N4L)],
            [InitSampler("normal_s0", 250, seed), InitSampler("normal_v0", 250, seed + 1)],
            out_dir,
        )
    elif name == "3n4l-stepsize":
        sc = Scenario(name, "3n4l", _stepsize_grid(), InitSampler("zero_valuation", 1, seed), out_dir)
    elif name == "sf-scenarios":
        sc = Scenario(
            name,
            "siouxfalls",
            _sf_grid(seed),
            InitSampler("zero_valuation", 1, seed),
            out_dir,
            route_file=str(COVER_FILE),
            notes=(
                "Scenario A runs over a route cover made of the union of routes found by "
                f"{len(SF_COVER_SEEDS)} seeded noisy link-valuation runs (sf-route-cover); "
                "no externally predetermined route set is shipped."
            ),
        )
    elif name == "sf-route-cover":
        grid = [_noisy_config(s) for s in SF_COVER_SEEDS]
        sc = Scenario(name, "siouxfalls", grid, None, out_dir, route_file=str(COVER_FILE))
    elif name == "sf-reference":
        sc = Scenario(name, "siouxfalls", ["reference"], None, out_dir)
    else:
        raise ConfigError(f"unknown scenario {name!r} (choose from {', '.join(SCENARIOS)})")
    for key, value in overrides.items():
        if key == "sampler" and isinstance(value, dict):
            value = InitSampler(**value)
        elif key == "sampler" and isinstance(value, list):
            value = [InitSampler(**v) for v in value]
        elif key == "grid":
            value = [_config_from_dict(v) for v in value]
        elif key == "network" and isinstance(value, list):
            value = tuple(value)
        if not hasattr(sc, key):
            raise ConfigError(f"unknown scenario field {key!r}")
        setattr(sc, key, value)
    sc.__post_init__()
    return sc


SCENARIOS = ("3n4l-histogram", "3n4l-entropy", "3n4l-stepsize", "sf-scenarios", "sf-route-cover", "sf-reference")


def _config_from_dict(d: dict):
    d = {"record_time": False, **d}
    try:
        if "variant" in d:
            return ExploreConfig(**d)
        if "schedule" in d and isinstance(d["schedule"], dict):
            d["schedule"] = StepSchedule(**d["schedule"])
        return RunConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# execution


def _write_summary(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in keys})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _culo_job(args):
    net_spec, route_file, cfg, s0, trace_path, tag = args
    net = builtin_network(net_spec) if isinstance(net_spec, str) else load_tntp(*net_spec)
    rs = read_routes(net, route_file) if route_file else builtin_routes(net)
    return _run_one(net, rs, cfg, s0, trace_path, tag)


def _run_one(net, rs, cfg, s0, trace_path, tag) -> dict:
    row = {"run": tag, "status": "ok", "kind": cfg.kind.value, "schedule": cfg.schedule.kind, "eta": cfg.schedule.eta0, "r": cfg.r}
    q = rs.route_demand()
    try:
        if s0 is None:
            p0 = rs.uniform() if not cfg.kind.logit_based else np.exp(log_logit_choice(np.zeros(rs.n_routes), cfg.r, rs))
            st, tr = run_dynamics(net, rs, cfg)
        elif cfg.kind.logit_based:
            p0 = np.exp(log_logit_choice(s0, cfg.r, rs))
            st, tr = run_dynamics(net, rs, cfg, s0=s0)
        else:
            p0 = np.exp(log_logit_choice(s0, 1.0, rs))
            st, tr = run_dynamics(net, rs, cfg, p0=p0)
    except Exception as exc:  # one failed run must not abort the batch
        log.warning("run %s failed: %s", tag, exc)
        row.update(status="failed", error=str(exc))
        return row
    tr.to_csv(trace_path)
    last = tr.records[-1]
    row.update(
        converged=tr.converged,
        days=last.day,
        gap=last.gap,
        entropy0=-entropy(p0, q),
        entropy=last.entropy,
        used_1e6=last.used_1e6,
        prop_res_max=last.prop_res_max,
    )
    if net.name == "3n4l":
        row["lambda"] = lambda_3n4l(st.p)
        row.update({f"p{k + 1}": float(v) for k, v in enumerate(st.p)})
    return row


def _pool_map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def run_scenario(sc: Scenario, workers: int = 1) -> int:
    """Run every job of a scenario and write traces plus ``summary.csv``.

    Returns 0 when every run succeeded and 1 otherwise.
    """
    out = sc.out_dir
    (out / "traces").mkdir(parents=True, exist_ok=True)
    if sc.name == "sf-scenarios":
        rows = _run_sf(sc)
    elif sc.name == "sf-route-cover":
        rows = _run_cover(sc, workers)
    elif sc.name == "sf-reference":
        rows = _run_reference(sc)
    else:
        rows = _run_batch(sc, workers)
    _write_summary(out / "summary.csv", rows)
    meta = {"scenario": sc.name, "notes": sc.notes, "runs": len(rows)}
    if sc.sampler is not None:
        samplers = sc.sampler if isinstance(sc.sampler, list) else [sc.sampler]
        meta["samplers"] = [asdict(s) for s in samplers]
    (out / "scenario.json").write_text(json.dumps(meta, indent=2) + "\n")
    failed = sum(r.get("status") == "failed" for r in rows)
    return 1 if failed else 0


def _run_batch(sc: Scenario, workers: int) -> list[dict]:
    net = sc.load_network()
    rs = read_routes(net, sc.route_file) if sc.route_file else builtin_routes(net)
    samplers = sc.sampler if isinstance(sc.sampler, list) else [sc.sampler or InitSampler()]
    jobs, kinds = [], []
    for cfg in sc.grid:
        for sm in samplers:
            for i, s0 in enumerate(sample_initial(sm, rs, cfg.r)):
                tag = f"{cfg.kind.value}_eta{cfg.schedule.eta0:g}_{sm.kind}_{i:05d}"
                s0 = None if sm.kind == "zero_valuation" else s0
                jobs.append((sc.network, sc.route_file, cfg, s0, sc.out_dir / "traces" / f"{tag}.csv", tag))
                kinds.append(sm.kind)
    rows = _pool_map(_culo_job, jobs, workers)
    for row, kind in zip(rows, kinds):
        row["sampler"] = kind
    return rows


def _reference_routes(net: Network) -> tuple[RouteSet, np.ndarray] | None:
    if not REFERENCE_ROUTES.is_file() or not REFERENCE_P.is_file():
        return None
    return read_routes(net, REFERENCE_ROUTES), np.loadtxt(REFERENCE_P)


def _route_diff(rs: RouteSet, ref: RouteSet, p_ref: np.ndarray) -> dict:
    missing = [r for r in ref.routes if r not in rs]
    share = float(sum(p_ref[ref.index(r)] * ref.net.demand[r.od_index] for r in missing))
    return {"ref_routes_found": ref.n_routes - len(missing), "ref_routes_missing": len(missing), "missing_ref_flow": share}


def _run_sf(sc: Scenario) -> list[dict]:
    net = sc.load_network()
    ref = _reference_routes(net) if net.name == "siouxfalls" else None
    rows = []
    for label, cfg in sc.grid:
        trace_path = sc.out_dir / "traces" / f"scenario_{label}.csv"
        row = {"run": label, "r": cfg.r, "seed": cfg.seed}
        try:
            if isinstance(cfg, RunConfig):
                if not sc.route_file or not Path(sc.route_file).is_file():
                    raise FileNotFoundError(f"route cover not found: {sc.route_file}")
                rs = read_routes(net, sc.route_file)
                st, tr = run_dynamics(net, rs, cfg)
                p = st.p
                row["variant"] = "culo_route_cover"
            else:
                res = explore_run(net, cfg, log_path=sc.out_dir / f"discovered_{label}.csv")
                rs, st, tr = res
                p = st.p
                row["variant"] = cfg.variant + ("_noise" if (cfg.noise_sigma0 or 0) > 0 else "")
                row["noise_off_day"] = res.noise_off_day
        except Exception as exc:
            log.warning("scenario %s failed: %s", label, exc)
            row.update(status="failed", error=str(exc))
            rows.append(row)
            continue
        tr.to_csv(trace_path)
        last = tr.records[-1]
        row.update(
            status="ok",
            converged=tr.converged,
            days=last.day,
            gap=last.gap,
            entropy=last.entropy,
            entropy_rel_err=(last.entropy - REFERENCE_ENTROPY) / REFERENCE_ENTROPY,
            used_1e4=last.used_1e4,
            used_1e6=last.used_1e6,
            routes=rs.n_routes,
        )
        if ref is not None:
            row.update(_route_diff(rs, *ref))
        rows.append(row)
    return rows


def _explore_job(args):
    cfg, log_path = args
    net = builtin_network("siouxfalls")
    res = explore_run(net, cfg, log_path=log_path)
    return res.routes.routes, res.trace.records[-1].gap, res.trace.records[-1].entropy


def _run_cover(sc: Scenario, workers: int) -> list[dict]:
    net = sc.load_network()
    jobs = [(cfg, sc.out_dir / f"discovered_seed{cfg.seed}.csv") for cfg in sc.grid]
    results = _pool_map(_explore_job, jobs, workers)
    union: dict = {}
    rows = []
    for cfg, (routes, gap, ent) in zip(sc.grid, results):
        for r in routes:
            union.setdefault((r.od_index, r.links), r)
        rows.append({"run": f"seed{cfg.seed}", "status": "ok", "routes": len(routes), "gap": gap, "entropy": ent})
    rs = RouteSet(net, list(union.values()), validate=False)
    target = Path(sc.route_file) if sc.route_file else sc.out_dir / "route_cover.txt"
    write_routes(rs, target)
    if target != sc.out_dir / "route_cover.txt":
        write_routes(rs, sc.out_dir / "route_cover.txt")
    rows.append({"run": "union", "status": "ok", "routes": rs.n_routes})
    return rows


def _run_reference(sc: Scenario) -> list[dict]:
    net = sc.load_network()
    ue = solve_user_equilibrium(net, gap_tol=1e-12)
    rs, res = meue_reference(net, ue, rtol=1e-8, tol=1e-9, max_iter=10**6)
    write_routes(rs, sc.out_dir / "meue_routes.txt")
    np.savetxt(sc.out_dir / "meue_p.txt", res.p_star, fmt="%.17g")
    np.savetxt(sc.out_dir / "ue_flows.txt", ue.x, fmt="%.17g")
    residual = proportionality_residuals(res.p_star, kernel_basis(rs)).max_abs
    return [
        {
            "run": "reference",
            "status": "ok" if ue.converged and res.converged else "failed",
            "ue_gap": ue.gap,
            "routes": rs.n_routes,
            "entropy": -entropy(res.p_star, net.demand, rs),
            "flow_residual": res.residual_norm,
            "proportionality_residual": residual,
        }
    ]

