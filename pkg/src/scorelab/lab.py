"""Config-driven experiments E1 to E5 and their artifacts.

A run writes, under its output directory:

- ``results.csv``: append-only metric ledger (name, value, stderr, n, seed, config_hash)
- one CSV table per experiment view, rows merged in seed order
- ``checks.csv``: one row per acceptance check
- serialized networks (``*.relunet`` / ``*.scoremodel``) and sample CSVs
- ``manifest.json``: config hash, package versions and wall time
"""

import csv
import json
import logging
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
import scipy
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__, builders, dsm, metrics, relu, sampler
from .errors import ConfigError, ScoreLabError
from .ou import forward_sample
from .score import ScoreQuadrature
from .targets import TargetSpec, sample_p0

log = logging.getLogger(__name__)

EXPERIMENTS = ("E1_score_approx", "E2_train_sample", "E3_builders", "E4_kl_short_time",
               "E5_generalization_trend")


# configuration models

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ComponentModel(_Strict):
    weight: float
    mean: List[float]
    variance: float


class TargetModel(_Strict):
    form: Literal["standard_gaussian", "gaussian_mixture", "relu_tilted"]
    dim: int = Field(ge=1)
    alpha: float = 0.0
    beta: float = 0.0
    r_f: Optional[float] = None
    components: List[ComponentModel] = []
    f_net: Optional[str] = None

    def build(self):
        return TargetSpec.from_dict(self.model_dump(exclude_none=True))


class TrainModel(_Strict):
    L: int = Field(3, ge=2)
    width: int = Field(32, ge=1)
    K: Optional[float] = Field(None, gt=0)
    steps: int = Field(5000, ge=1)
    lr: float = Field(0.05, gt=0)
    batch: int = Field(256, ge=1)
    log_every: int = Field(50, ge=1)


class E1Params(_Strict):
    t: float = Field(0.5, gt=0)
    eps0: float = Field(0.1, gt=0)
    levels: int = Field(3, ge=1)
    m0: int = Field(2500, ge=1)
    radius_const: float = Field(2.5, gt=0)
    nodes: Optional[Literal["mc", "quantile"]] = None
    n_eval: int = Field(20000, ge=10)
    max_rel_error: float = 0.1


class E2Params(_Strict):
    N: int = Field(50000, ge=1)
    T: float = Field(5.0, gt=0)
    t0: float = Field(0.01, gt=0)
    M: int = Field(200, ge=1)
    n_samples: int = Field(100000, ge=10)
    bins: int = Field(64, ge=1)
    hist_range: Tuple[float, float] = (-6.0, 6.0)
    trained: bool = True
    train: TrainModel = TrainModel(steps=2000)
    tv_oracle_max: float = 0.05
    tv_trained_max: float = 0.12

    @model_validator(mode="after")
    def _horizon(self):
        if not self.t0 < self.T:
            raise ValueError("early-stop time t0 must be smaller than the horizon T")
        return self


class E3Params(_Strict):
    eps: float = Field(1e-2, gt=0)
    C: float = Field(10.0, gt=0)
    rate_ms: List[int] = [2**k for k in range(8, 15)]
    rate_seeds: int = Field(20, ge=2)
    slope_range: Tuple[float, float] = (-0.7, -0.3)


class E4Params(_Strict):
    t_grid: List[float] = [0.01, 0.05, 0.1, 0.2]
    C: float = Field(10.0, gt=0)
    n: int = Field(4000, ge=8)
    extra_targets: List[TargetModel] = []

    @field_validator("t_grid")
    @classmethod
    def _times(cls, v):
        if not v or any(t <= 0 for t in v):
            raise ValueError("t_grid must hold positive times")
        return v


class E5Params(_Strict):
    t: float = Field(0.5, gt=0)
    Ns: List[int] = [1000, 10000, 100000]
    train: TrainModel = TrainModel(steps=8000, batch=512)
    n_eval: int = Field(20000, ge=10)
    S: float = 6.0
    R: float = 8.0
    risk_N: int = Field(10000, ge=1)
    n_inner: int = Field(1, ge=1)
    max_truncation_gap: float = 0.05

    @model_validator(mode="after")
    def _truncation(self):
        if not 0 < self.S < self.R:
            raise ValueError(f"truncation requires 0 < S < R (got S={self.S}, R={self.R})")
        return self


PARAMS = {"E1_score_approx": E1Params, "E2_train_sample": E2Params, "E3_builders": E3Params,
          "E4_kl_short_time": E4Params, "E5_generalization_trend": E5Params}


class ExperimentConfig(_Strict):
    experiment: Literal[EXPERIMENTS]
    seeds: List[int] = Field(min_length=1)
    target: TargetModel
    params: dict = {}
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _params(self):
        self.params = PARAMS[self.experiment](**self.params).model_dump()
        return self

    @property
    def typed_params(self):
        return PARAMS[self.experiment](**self.params)

    def semantic_dict(self):
        return self.model_dump(exclude={"output_dir"})

    def config_hash(self):
        return metrics.config_hash(self.semantic_dict())


def _format_validation(exc):
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        parts.append(f"{loc}: {err['msg']}" if loc else err["msg"])
    return "; ".join(parts)


def parse_config(doc):
    """Validate a config mapping (all sub-configs included); raises ConfigError."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    try:
        cfg = ExperimentConfig(**doc)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_validation(exc)}") from None
    cfg.target.build()
    for extra in cfg.params.get("extra_targets", []):
        TargetModel(**extra).build()
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(doc)


# per-seed results

@dataclass
class SeedResult:
    seed: int
    tables: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    files: dict = field(default_factory=dict)

    def add_row(self, table, row):
        self.tables.setdefault(table, []).append(row)

    def check(self, name, passed, detail=""):
        self.checks.append({"seed": self.seed, "check": name, "passed": bool(passed),
                            "detail": detail})


def run_e1(cfg, seed):
    p = cfg.typed_params
    spec = cfg.target.build()
    out = SeedResult(seed)
    q = ScoreQuadrature(spec)
    errors = []
    for level, budget in enumerate(builders.budget_schedule(p.eps0, p.levels, spec.dim, p.m0,
                                                            p.radius_const)):
        reach = (np.exp(-p.t) + np.sqrt(-np.expm1(-2 * p.t))) * budget.R
        phi_f = builders.log_density_net(spec, reach, budget.eps / 4)
        net = builders.build_score_net(spec, phi_f, p.t, budget, seed, nodes=p.nodes)
        rep = metrics.score_l2_error(net, spec, p.t, p.n_eval, seed, q)
        rep.config.update(level=level, eps=budget.eps, R=budget.R, m=budget.m_neurons)
        out.reports.append(rep)
        errors.append(rep.extra["relative_rms"])
        out.add_row("e1_levels", {
            "seed": seed, "level": level, "eps": budget.eps, "R": budget.R, "m": budget.m_neurons,
            "relative_l2": rep.extra["relative_rms"], "mse": rep.value, "mse_stderr": rep.stderr,
            "eta": budget.eta, "L_f": budget.L_f, "path_norm_bound": net.path_norm(),
            "quot_R": net.meta["quot_domain"]["R"], "quot_a": net.meta["quot_domain"]["a"],
            "quot_b": net.meta["quot_domain"]["b"]})
        if level == 0:
            out.files["phi_f.relunet"] = relu.to_text(phi_f)
    out.check("final_relative_l2", errors[-1] <= p.max_rel_error,
              f"{errors[-1]:.4g} <= {p.max_rel_error}")
    out.check("monotone_in_budget", all(b < a for a, b in zip(errors, errors[1:])),
              " > ".join(f"{e:.4g}" for e in errors))
    return out


def run_e2(cfg, seed):
    p = cfg.typed_params
    spec = cfg.target.build()
    out = SeedResult(seed)
    sched = sampler.SamplerSchedule.uniform(p.T, p.t0, p.M)
    ss = np.random.SeedSequence(seed).spawn(4)
    pdf = lambda X: np.exp(spec.log_density(X))
    y = sampler.sample(sampler.oracle_source(spec), sched, p.n_samples, ss[0], spec.dim)
    tv = metrics.tv_histogram(y, pdf, p.bins, p.hist_range, seed=seed)
    tv.config.update(score="oracle", T=p.T, t0=p.t0, M=p.M)
    tv.name = "tv_oracle"
    out.reports.append(tv)
    out.add_row("e2_tv", {"seed": seed, "score": "oracle", "tv": tv.value, "stderr": tv.stderr})
    out.check("tv_oracle", tv.value <= p.tv_oracle_max, f"{tv.value:.4g} <= {p.tv_oracle_max}")
    out.files[f"samples_oracle_seed{seed}.csv"] = sampler.format_samples(y, sched, seed, "oracle")
    if p.trained:
        data = sample_p0(spec, p.N, ss[1])
        times = [sched.T - tau for tau in sched.steps[:-1]]
        model = dsm.train(spec, times, data, arch=p.train.model_dump(include={"L", "width", "K"}),
                          opt=p.train.model_dump(include={"steps", "lr", "batch", "log_every"}),
                          seed=int(ss[2].generate_state(1)[0]))
        y2 = sampler.sample(model.score, sched, p.n_samples, ss[3], spec.dim)
        tv2 = metrics.tv_histogram(y2, pdf, p.bins, p.hist_range, seed=seed)
        tv2.config.update(score="trained", T=p.T, t0=p.t0, M=p.M, N=p.N)
        tv2.name = "tv_trained"
        out.reports.append(tv2)
        out.add_row("e2_tv", {"seed": seed, "score": "trained", "tv": tv2.value, "stderr": tv2.stderr})
        out.check("tv_trained", tv2.value <= p.tv_trained_max, f"{tv2.value:.4g} <= {p.tv_trained_max}")
        out.files[f"samples_trained_seed{seed}.csv"] = sampler.format_samples(y2, sched, seed, "trained")
        for row in model.meta["telemetry"]:
            out.add_row("e2_telemetry", {"seed": seed, **row})
    return out


def rate_experiment(ms, n_seeds, seed=0, n_grid=2000):
    """Median sup error of the i.i.d. rebuild of e^x - (1 + x) on [0, 1] against m."""
    piece = [builders.HingePiece("exp", 0.0, 1.0)]
    grid = np.linspace(0.0, 1.0, n_grid)[:, None]
    target = np.exp(grid[:, 0]) - 1 - grid[:, 0]
    med = []
    for m in ms:
        errs = []
        for k in range(n_seeds):
            net = builders.mc_discretize(piece, m, seed=seed * 100_003 + 1000 * k + m)
            errs.append(float(np.abs(net(grid)[:, 0] - target).max()))
        med.append(float(np.median(errs)))
    slope = float(np.polyfit(np.log(ms), np.log(med), 1)[0])
    return med, slope


def run_e3(cfg, seed):
    p = cfg.typed_params
    out = SeedResult(seed)
    jobs = [("exp", lambda: builders.build_exp(-1.0, 1.0, p.eps, seed=seed, C=p.C)),
            ("prod", lambda: builders.build_prod(2.0, p.eps, seed=seed, C=p.C)),
            ("inv", lambda: builders.build_inv(0.5, 2.0, p.eps, seed=seed, C=p.C)),
            ("quot", lambda: builders.build_quot(2.0, 0.5, 2.0, p.eps, seed=seed, C=p.C))]
    for name, job in jobs:
        try:
            net = job()
        except ScoreLabError as exc:
            out.check(f"certify_{name}", False, str(exc))
            continue
        cert = net.meta["certificate"]
        out.add_row("e3_certificates", {"seed": seed, **{k: v for k, v in cert.to_dict().items()}})
        out.reports.append(metrics.MetricReport(f"grid_error_{name}", cert.fine_grid_error, 0.0,
                                                cert.n_fine, seed, {"eps": p.eps}))
        out.files[f"{name}_seed{seed}.relunet"] = relu.to_text(net)
        ok = cert.fine_grid_error <= 2 * cert.eps and cert.path_norm <= cert.C * cert.path_norm_order
        out.check(f"certify_{name}", ok,
                  f"err={cert.grid_error:.3g} fine={cert.fine_grid_error:.3g} "
                  f"path_norm={cert.path_norm:.4g} <= {cert.C}x{cert.path_norm_order:.4g}")
    med, slope = rate_experiment(p.rate_ms, p.rate_seeds, seed)
    for m, e in zip(p.rate_ms, med):
        out.add_row("e3_rate", {"seed": seed, "m": m, "median_sup_error": e})
    lo, hi = p.slope_range
    out.reports.append(metrics.MetricReport("mc_rate_slope", slope, 0.0, p.rate_seeds, seed,
                                            {"ms": list(p.rate_ms)}))
    out.add_row("e3_rate_fit", {"seed": seed, "slope": slope})
    out.check("mc_rate_slope", lo <= slope <= hi, f"{slope:.4f} in [{lo}, {hi}]")
    return out


def run_e4(cfg, seed):
    p = cfg.typed_params
    out = SeedResult(seed)
    targets = [cfg.target] + list(p.extra_targets)
    for k, tm in enumerate(targets):
        spec = tm.build()
        rep = metrics.kl_short_time_check(spec, p.t_grid, p.n, p.C)
        for row in rep.rows:
            out.reports.append(metrics.MetricReport("kl_to_p0", row["kl"], 0.0, p.n, seed,
                                                    {"t": row["t"], "target": k}))
            out.add_row("e4_kl", {"seed": seed, "target": k, "form": spec.form, "t": row["t"],
                                  "kl": row["kl"], "bound": row["bound"], "m_beta": rep.m_beta})
        out.add_row("e4_fit", {"seed": seed, "target": k, "slope": rep.slope, "m_beta": rep.m_beta,
                               "ratio": rep.slope / rep.m_beta if rep.m_beta > 0 else 0.0})
        out.check(f"kl_bound_target{k}", rep.passed,
                  ", ".join(f"t={r['t']}: {r['kl']:.3g} <= {r['bound']:.3g}" for r in rep.rows))
    return out


def run_e5(cfg, seed):
    p = cfg.typed_params
    spec = cfg.target.build()
    out = SeedResult(seed)
    q = ScoreQuadrature(spec)
    ss = np.random.SeedSequence(seed).spawn(len(p.Ns) + 1)
    arch = p.train.model_dump(include={"L", "width", "K"})
    opt = p.train.model_dump(include={"steps", "lr", "batch", "log_every"})
    last = None
    for k, N in enumerate(p.Ns):
        data = sample_p0(spec, N, ss[k])
        model = dsm.train(spec, [p.t], data, arch, opt, seed=seed * 1000 + k)
        rep = metrics.score_l2_error(model, spec, p.t, p.n_eval, seed, q)
        rep.config.update(N=N)
        out.reports.append(rep)
        out.add_row("e5_errors", {"seed": seed, "N": N, "mse": rep.value, "stderr": rep.stderr,
                                  "relative_l2": rep.extra["relative_rms"]})
        last = model
    data = sample_p0(spec, p.risk_N, ss[-1])
    plain = dsm.RiskConfig(p.t, p.n_inner, seed=seed)
    trunc = dsm.RiskConfig(p.t, p.n_inner, S=p.S, R=p.R, seed=seed)
    r_full = dsm.empirical_risk(last, p.t, data, plain)
    r_trunc = dsm.truncated_risk(last, p.t, data, trunc)
    gap = abs(r_full - r_trunc) / r_full
    out.add_row("e5_truncation", {"seed": seed, "S": p.S, "R": p.R, "risk": r_full,
                                  "truncated_risk": r_trunc, "relative_gap": gap})
    out.check("truncation_gap", gap < p.max_truncation_gap, f"{gap:.3g} < {p.max_truncation_gap}")
    return out


RUNNERS = {"E1_score_approx": run_e1, "E2_train_sample": run_e2, "E3_builders": run_e3,
           "E4_kl_short_time": run_e4, "E5_generalization_trend": run_e5}


def _cross_seed_checks(cfg, results):
    """Checks that need all seeds (median trends)."""
    checks = []
    if cfg.experiment == "E5_generalization_trend":
        rows = [r for res in results for r in res.tables.get("e5_errors", [])]
        Ns = cfg.typed_params.Ns
        med = [float(np.median([r["mse"] for r in rows if r["N"] == N])) for N in Ns]
        ok = all(b <= a for a, b in zip(med, med[1:]))
        checks.append({"seed": "all", "check": "median_error_nonincreasing_in_N", "passed": ok,
                       "detail": " >= ".join(f"{m:.4g}" for m in med)})
    return checks


# orchestration

@dataclass
class RunResult:
    status: int
    out_dir: str
    config_hash: str
    checks: list
    wall_time: float


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def _write_table(path, rows):
    cols = list(rows[0].keys())
    for r in rows[1:]:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])


def _run_seed(args):
    doc, seed = args
    cfg = parse_config(doc)
    return RUNNERS[cfg.experiment](cfg, seed)


def run(cfg, out_dir=None, seed_override=None, parallel_seeds=False):
    """Run an experiment; returns a RunResult whose status is 0 (pass) or 1 (a check failed).

    Module failures propagate as ScoreLabError subclasses.
    """
    start = time.time()
    doc = cfg.model_dump()
    if seed_override is not None:
        doc["seeds"] = [int(seed_override)]
        cfg = parse_config(doc)
    out_dir = out_dir or cfg.output_dir or os.path.join("runs", cfg.experiment)
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(cfg.model_dump(), s) for s in cfg.seeds]
    if parallel_seeds and len(jobs) > 1:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]
    results.sort(key=lambda r: cfg.seeds.index(r.seed))
    tables = {}
    for res in results:
        for name, rows in res.tables.items():
            tables.setdefault(name, []).extend(rows)
        for name, text in res.files.items():
            with open(os.path.join(out_dir, name), "w", encoding="ascii") as fh:
                fh.write(text)
    for name, rows in tables.items():
        _write_table(os.path.join(out_dir, f"{name}.csv"), rows)
    h = cfg.config_hash()
    reports = [r for res in results for r in res.reports]
    for rep in reports:
        rep.config["run_config_hash"] = h
    metrics.append_reports(os.path.join(out_dir, "results.csv"), reports)
    checks = [c for res in results for c in res.checks] + _cross_seed_checks(cfg, results)
    _write_table(os.path.join(out_dir, "checks.csv"), checks)
    wall = time.time() - start
    manifest = {"experiment": cfg.experiment, "config_hash": h, "config": cfg.semantic_dict(),
                "seeds": cfg.seeds, "versions": {"scorelab": __version__, "numpy": np.__version__,
                                                 "scipy": scipy.__version__,
                                                 "python": platform.python_version()},
                "wall_time_s": wall, "checks_passed": all(c["passed"] for c in checks)}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    status = 0 if manifest["checks_passed"] else 1
    for c in checks:
        log.info("%s [%s] %s: %s", "PASS" if c["passed"] else "FAIL", c["seed"], c["check"], c["detail"])
    return RunResult(status, out_dir, h, checks, wall)


def report(results_dir):
    """Aggregate every results.csv and checks.csv under a directory into summary rows."""
    metric_rows, check_rows = [], []
    for root, _, files in sorted(os.walk(results_dir)):
        for fn in sorted(files):
            path = os.path.join(root, fn)
            if fn == "results.csv":
                with open(path, newline="") as fh:
                    for r in csv.DictReader(fh):
                        metric_rows.append({**r, "run": os.path.relpath(root, results_dir)})
            elif fn == "checks.csv":
                with open(path, newline="") as fh:
                    for r in csv.DictReader(fh):
                        check_rows.append({**r, "run": os.path.relpath(root, results_dir)})
    if not metric_rows and not check_rows:
        raise ConfigError(f"no results found under {results_dir}")
    summary = []
    keys = sorted({(r["run"], r["name"]) for r in metric_rows})
    for run_name, name in keys:
        vals = np.array([float(r["value"]) for r in metric_rows
                         if r["run"] == run_name and r["name"] == name])
        summary.append({"run": run_name, "metric": name, "count": len(vals),
                        "mean": float(vals.mean()), "median": float(np.median(vals)),
                        "min": float(vals.min()), "max": float(vals.max())})
    checks = [{"run": r["run"], "seed": r["seed"], "check": r["check"], "passed": r["passed"]}
              for r in check_rows]
    if summary:
        _write_table(os.path.join(results_dir, "summary.csv"), summary)
    if checks:
        _write_table(os.path.join(results_dir, "summary_checks.csv"), checks)
    return summary, checks
