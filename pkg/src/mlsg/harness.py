"""Experiment configuration, orchestration, slope fitting and CSV output."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import schedules as sch
from .estimators import LevelStats, fit_rate_constant, level_slope, screen_levels
from .fem import FeField
from .field import Streams
from .optimizers import (
    RunTrace,
    content_hash,
    load_reference,
    run_mlsg,
    run_rm_baseline,
    run_rmlsg,
    save_reference,
    solve_reference,
)
from .pde import ProblemData

log = logging.getLogger(__name__)

STRATEGIES = ("mlsg", "rmlsg", "rm-baseline", "reference", "screen", "validate-rates")
PARAM_KEYS = {f.name for f in fields(sch.AlgoParams)} - {"strategy"}
REFERENCE_KEYS = {"path", "sha256", "level", "q", "max_iters", "grad_tol", "cache_dir"}
SCREEN_KEYS = {"L_max", "M", "band"}
TOP_KEYS = {
    "strategy", "params", "repetitions", "iterations", "seed", "reference",
    "output", "level", "screen", "workers", "slope_window",
}
RATE_BAND = (-5.0, -3.0)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    strategy: str = "mlsg"
    params: dict = field(default_factory=dict)
    repetitions: int = 1
    iterations: int = 10
    seed: int = 0
    reference: dict | None = None
    output: str = "out"
    level: int = 0
    screen: dict = field(default_factory=lambda: {"L_max": 3, "M": 100})
    workers: int = 1
    slope_window: list | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        for key in self.params:
            if key not in PARAM_KEYS:
                raise ConfigError(f"unknown params key {key!r}")
        if self.reference is not None:
            for key in self.reference:
                if key not in REFERENCE_KEYS:
                    raise ConfigError(f"unknown reference key {key!r}")
        for key in self.screen:
            if key not in SCREEN_KEYS:
                raise ConfigError(f"unknown screen key {key!r}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        for key in raw:
            if key not in TOP_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**copy.deepcopy(raw))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def algo_params(self) -> sch.AlgoParams:
        strategy = sch.RMLSG if self.strategy == "rmlsg" else sch.MLSG
        return sch.default_params(strategy, **self.params)

    def problem(self) -> ProblemData:
        p = self.algo_params()
        return ProblemData(beta=p.beta, h0=p.h0)

    def resolved(self) -> dict:
        out = asdict(self)
        params = asdict(self.algo_params())
        del params["strategy"]  # implied by the top-level strategy
        out["params"] = params
        return out


# ------------------------------------------------------------ utilities


def fit_slope(xs, ys, window=None) -> float:
    """OLS slope of ``log ys`` against ``log xs`` over ``xs[window[0]:window[1]]``."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if window is not None:
        xs, ys = xs[window[0]:window[1]], ys[window[0]:window[1]]
    if xs.size < 3:
        raise ValueError("need at least 3 points to fit a slope")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("slope fit needs positive values")
    lx = np.log(xs)
    if np.ptp(lx) == 0:
        raise ValueError("degenerate abscissae")
    ly = np.log(ys)
    lx0 = lx - lx.mean()
    return float(lx0 @ (ly - ly.mean()) / (lx0 @ lx0))


def j_window(j_lo: int, j_hi: int) -> tuple[int, int]:
    """Index window of rows ``j_lo <= j <= j_hi`` in a trace starting at ``j = 1``."""
    return j_lo - 1, j_hi


def fmt(x) -> str:
    return f"{float(x):.17g}"


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


# ------------------------------------------------------------ reference


def reference_key(spec: dict, data: ProblemData) -> str:
    payload = json.dumps(
        {"level": spec.get("level", 4), "q": spec.get("q", 3),
         "grad_tol": spec.get("grad_tol", 1e-10), "max_iters": spec.get("max_iters", 60),
         "beta": data.beta, "h0": data.h0},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def resolve_reference(spec: dict | None, data: ProblemData, out_dir: Path) -> FeField | None:
    """Load the reference control named by ``spec``, computing and caching it if needed."""
    if spec is None:
        return None
    if "path" in spec:
        path = Path(spec["path"])
        if not path.exists():
            raise FileNotFoundError(f"reference file {path} does not exist")
        u = load_reference(path)
    else:
        cache_dir = Path(spec.get("cache_dir", out_dir / "cache"))
        path = cache_dir / f"reference_{reference_key(spec, data)}.txt"
        if path.exists():
            u = load_reference(path)
        else:
            log.info("computing reference control -> %s", path)
            sol = solve_reference(data, q=spec.get("q", 3), level=spec.get("level", 4),
                                  max_iters=spec.get("max_iters", 60),
                                  grad_tol=spec.get("grad_tol", 1e-10))
            save_reference(path, sol.control, q=sol.q, grad_norm=f"{sol.grad_norm:.6e}")
            u = sol.control
    if "sha256" in spec and spec["sha256"] != content_hash(u):
        raise ConfigError(f"reference content hash mismatch for {path}")
    return u


# ----------------------------------------------------------- experiments


def _one_run(args) -> RunTrace:
    cfg, rep, u_ref = args
    params = cfg.algo_params()
    data = cfg.problem()
    if cfg.strategy == "mlsg":
        return run_mlsg(params, data, cfg.iterations, cfg.seed, rep, u_ref=u_ref)
    if cfg.strategy == "rmlsg":
        return run_rmlsg(params, data, cfg.iterations, cfg.seed, rep, u_ref=u_ref)
    return run_rm_baseline(params, data, cfg.level, cfg.iterations, cfg.seed, rep, u_ref=u_ref)


def run_repetitions(cfg: ExperimentConfig, u_ref: FeField | None) -> list[RunTrace]:
    jobs = [(cfg, rep, u_ref) for rep in range(cfg.repetitions)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            return list(pool.map(_one_run, jobs))
    return [_one_run(job) for job in jobs]


@dataclass
class Aggregate:
    j: np.ndarray
    L: np.ndarray
    errors: np.ndarray | None
    columns: dict

    @property
    def mean_error(self):
        return None if self.errors is None else self.errors.mean(axis=0)


def aggregate(cfg: ExperimentConfig, traces: list[RunTrace]) -> Aggregate:
    """Arithmetic mean of L2 errors across repetitions plus cost columns."""
    t0 = traces[0]
    errors = None
    if t0.error is not None:
        errors = np.array([t.error for t in traces])
    params = cfg.algo_params()
    cols = {}
    if cfg.strategy == "rmlsg":
        cm = sch.cost_models(params, levels=t0.L,
                             sampled_levels=np.array([t.sampled_level for t in traces]))
        cols["expected_W"] = cm["expected_W"]
        cols["mean_W"] = cm["mean_W"]
        cols["var_W"] = cm["var_W"]
        cols["cv_W"] = cm["cv_W"]
    else:
        cols["W"] = np.mean([t.W for t in traces], axis=0)
    return Aggregate(t0.j, t0.L, errors, cols)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Run the configured stochastic gradient experiment and write its CSV files."""
    if cfg.strategy not in ("mlsg", "rmlsg", "rm-baseline"):
        raise ConfigError(f"run does not handle strategy {cfg.strategy!r}")
    out = Path(out_dir or cfg.output)
    data = cfg.problem()
    u_ref = resolve_reference(cfg.reference, data, out)
    traces = run_repetitions(cfg, u_ref)
    agg = aggregate(cfg, traces)

    header = ["j", "L_j"]
    if agg.errors is not None:
        header.append("mean_error")
        header += [f"error_rep{r}" for r in range(cfg.repetitions)]
    header += list(agg.columns)
    rows = []
    for k, j in enumerate(agg.j):
        row = [str(int(j)), str(int(agg.L[k]))]
        if agg.errors is not None:
            row.append(fmt(agg.mean_error[k]))
            row += [fmt(e) for e in agg.errors[:, k]]
        row += [fmt(c[k]) for c in agg.columns.values()]
        rows.append(row)
    stem = cfg.strategy
    csv_path = out / f"{stem}_trace.csv"
    _write_csv(csv_path, header, rows)
    resolved = cfg.resolved()
    if u_ref is not None:
        resolved["reference_sha256"] = content_hash(u_ref)
    _write_json(out / f"{stem}_config.json", resolved)

    summary = {"csv": str(csv_path), "rows": len(rows)}
    if agg.errors is not None and cfg.slope_window:
        win = j_window(*cfg.slope_window)
        summary["slope_vs_j"] = fit_slope(agg.j, agg.mean_error, win)
        cost = agg.columns.get("W", agg.columns.get("expected_W"))
        summary["slope_vs_cost"] = fit_slope(cost, agg.mean_error, win)
        _write_json(out / f"{stem}_summary.json", summary)
    summary["aggregate"] = agg
    summary["traces"] = traces
    return summary


def run_screen(cfg: ExperimentConfig) -> LevelStats:
    data = cfg.problem()
    s = cfg.screen
    return screen_levels(FeField.zeros(0, data.h0), s.get("L_max", 3), s.get("M", 100),
                         data, Streams(cfg.seed))


def write_screen(stats: LevelStats, path: Path):
    rows = [[str(l), fmt(stats.h[l]), fmt(stats.moments[l])] for l in range(stats.moments.size)]
    _write_csv(path, ["level", "h", "E_l"], rows)


def validate_rates(cfg: ExperimentConfig | None = None, stats: LevelStats | None = None,
                   band=RATE_BAND) -> dict:
    """Screen the level differences and check their decay against ``band``.

    ``stats`` may be injected directly, bypassing the solves.
    """
    if stats is None:
        if cfg is None:
            raise ValueError("need a config or precomputed level statistics")
        stats = run_screen(cfg)
        band = tuple(cfg.screen.get("band", band))
    params = cfg.algo_params() if cfg is not None else sch.AlgoParams()
    slope = level_slope(stats)
    C = fit_rate_constant(stats, params.q_s)
    return {
        "moments": stats.moments.tolist(),
        "h": stats.h.tolist(),
        "M": stats.M,
        "slope": slope,
        "expected_slope": -params.q_s,
        "band": list(band),
        "passed": bool(band[0] <= slope <= band[1]),
        "C_star": C,
    }


def plot_data(inputs, out_path) -> Path:
    """Merge trace CSVs into one long-format table ``series, j, cost, mean_error``."""
    rows = []
    for path in inputs:
        path = Path(path)
        series = path.stem.replace("_trace", "")
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                if "mean_error" not in rec:
                    raise ValueError(f"{path} has no error column")
                cost = rec.get("W") or rec.get("expected_W")
                rows.append([series, rec["j"], cost, rec["mean_error"]])
    out_path = Path(out_path)
    _write_csv(out_path, ["series", "j", "cost", "mean_error"], rows)
    return out_path
