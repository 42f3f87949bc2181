"""Spec-driven experiments: strategy comparisons, skew tables, frequency
profiles and bound tables.

A spec is a flat YAML mapping validated against ``SPEC_SCHEMA``. Strategies
are written as ``rand``, ``rand_norep`` or ``<kind>:<d>`` (``pow_d:9``).

Output layout of ``run_experiment``::

    <out>/metrics/<label>_seed<s>.csv   one row per round
    <out>/runs.json                     (label, seed, task_seed, file) per run
    <out>/tasks.json                    data fractions p per task seed
    <out>/comparison.csv                mean/std global loss per round
    <out>/summary.json                  final loss and rounds-to-target
"""

from __future__ import annotations

import csv
import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .engine import (
    AvailabilityModel,
    LRSchedule,
    RunConfig,
    read_metrics,
    rounds_to_target,
    run_training,
    write_metrics,
    write_summary,
)
from .selection import SelectionConfig, frequency_profile
from .skew import (
    BoundInputs,
    GridSpec,
    TheoryParams,
    bound_table,
    estimate_rho_bounds,
    estimate_theory_params,
    fixed_lr_cap,
    write_skew_report,
)
from .tasks import generate_quadratic, generate_synthetic

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STRATEGY_PATTERN = r"^(rand|rand_norep|(pow_d|cpow_d|rpow_d):[1-9][0-9]*)$"
_METRICS_NAME = re.compile(r"^(?P<label>.+)_seed(?P<seed>\d+)\.csv$")

_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_pos_num = {"type": "number", "exclusiveMinimum": 0}

SPEC_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "experiment", "strategies"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "experiment": {"enum": ["quadratic", "synthetic"]},
        "n_clients": _pos_int,
        "dim": _pos_int,
        "power_law_a": _pos_num,
        "alpha": {"type": "number", "minimum": 0},
        "beta": {"type": "number", "minimum": 0},
        "total_samples": _pos_int,
        "task_seed": _nonneg_int,
        "vary_task": {"type": "boolean"},
        "tau": _pos_int,
        "rounds": _pos_int,
        "batch_size": {"oneOf": [_pos_int, {"type": "null"}]},
        "lr_schedule": {"enum": ["fixed", "decaying", "step", "theorem"]},
        "eta": _pos_num,
        "lr_beta": {"oneOf": [_pos_num, {"type": "null"}]},
        "lr_gamma": {"oneOf": [_pos_num, {"type": "null"}]},
        "lr_milestones": {"type": "array", "items": _nonneg_int},
        "lr_factor": _pos_num,
        "aggregation": {"enum": ["simple", "weighted"]},
        "m": _pos_int,
        "strategies": {"type": "array", "minItems": 1,
                       "items": {"type": "string", "pattern": STRATEGY_PATTERN}},
        "availability": {"enum": ["always_on", "alternating_groups"]},
        "exclusion_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "estimate_batch_size": {"oneOf": [_pos_int, {"type": "null"}]},
        "seeds": _pos_int,
        "base_seed": _nonneg_int,
        "target_loss": {"oneOf": [{"type": "number"}, {"type": "null"}]},
        "skew_draws": _pos_int,
        "skew_grid": _nonneg_int,
        "skew_pairing": {"enum": ["diagonal", "product"]},
        "skew_seed": _nonneg_int,
        "bound_T": {"type": "array", "items": _nonneg_int, "minItems": 1},
        "bound_eta": {"oneOf": [_pos_num, {"type": "null"}]},
        "output_dir": {"oneOf": [{"type": "string"}, {"type": "null"}]},
    },
}


class SpecError(ValueError):
    """Unreadable, schema-invalid or inconsistent experiment spec."""


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: str
    strategies: tuple
    schema_version: int = SCHEMA_VERSION
    n_clients: int = 30
    dim: int = 5
    power_law_a: float = 3.0
    alpha: float = 1.0
    beta: float = 1.0
    total_samples: int = 10000
    task_seed: int = 0
    vary_task: bool = False
    tau: int = 1
    rounds: int = 100
    batch_size: int | None = None
    lr_schedule: str = "fixed"
    eta: float = 0.01
    lr_beta: float | None = None
    lr_gamma: float | None = None
    lr_milestones: tuple = ()
    lr_factor: float = 0.5
    aggregation: str = "simple"
    m: int = 3
    availability: str = "always_on"
    exclusion_fraction: float = 0.1
    estimate_batch_size: int | None = None
    seeds: int = 1
    base_seed: int = 0
    target_loss: float | None = None
    skew_draws: int = 10000
    skew_grid: int = 1000
    skew_pairing: str = "diagonal"
    skew_seed: int = 0
    bound_T: tuple = (100, 1000, 10000)
    bound_eta: float | None = None
    output_dir: str | None = None

    def __post_init__(self):
        for name in ("strategies", "lr_milestones", "bound_T"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.lr_schedule == "theorem" and self.experiment != "quadratic":
            raise SpecError("lr_schedule 'theorem' needs the quadratic task (closed-form L and mu)")
        if self.lr_schedule == "decaying" and not (self.lr_beta and self.lr_gamma):
            raise SpecError("lr_schedule 'decaying' needs lr_beta and lr_gamma")
        try:
            for s in self.strategies:
                parse_strategy(s, self).check(self.n_clients)
        except ValueError as exc:
            raise SpecError(str(exc)) from exc

    @property
    def run_seeds(self):
        return [self.base_seed + i for i in range(self.seeds)]

    def task_seed_for(self, run_seed):
        return run_seed if self.vary_task else self.task_seed

    def to_dict(self):
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


def parse_strategy(text, spec):
    """``"pow_d:9"`` -> SelectionConfig(kind="pow_d", d=9, m=spec.m)."""
    if not re.match(STRATEGY_PATTERN, text):
        raise SpecError(f"bad strategy {text!r}")
    if text in ("rand", "rand_norep"):
        return SelectionConfig(kind="rand", m=spec.m, replacement=text == "rand")
    kind, d = text.split(":")
    return SelectionConfig(kind=kind, m=spec.m, d=int(d),
                           estimate_batch_size=spec.estimate_batch_size)


def load_spec(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"spec file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise SpecError(f"{path}: not valid YAML: {exc}") from exc
    return spec_from_dict(data, source=str(path))


def spec_from_dict(data, source="<spec>"):
    if not isinstance(data, dict):
        raise SpecError(f"{source}: expected a mapping at the top level")
    try:
        jsonschema.validate(data, SPEC_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SpecError(f"{source}: {where}: {exc.message}") from exc
    return ExperimentSpec(**data)


def bundled_spec_path(name):
    return Path(__file__).parent / "specs" / name


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def make_task(spec, task_seed):
    if spec.experiment == "quadratic":
        return generate_quadratic(spec.n_clients, spec.dim, spec.power_law_a, seed=task_seed)
    return generate_synthetic(alpha=spec.alpha, beta=spec.beta, n_clients=spec.n_clients,
                              power_law_a=spec.power_law_a, seed=task_seed,
                              total_samples=spec.total_samples)


def make_schedule(spec, task):
    if spec.lr_schedule == "theorem":
        return LRSchedule.theorem(float(task.h.max()), float(task.h.min()))
    if spec.lr_schedule == "decaying":
        return LRSchedule(kind="decaying", beta=spec.lr_beta, gamma=spec.lr_gamma)
    return LRSchedule(kind=spec.lr_schedule, eta=spec.eta, milestones=spec.lr_milestones,
                      factor=spec.lr_factor)


def _eval_fn(task):
    # quadratic: optimality gap F(w) - F*; synthetic: training accuracy
    if task.kind == "quadratic":
        f_star = task.optima()[2]
        return lambda w: task.global_loss(w) - f_star
    X = np.vstack(task.X)
    y = np.concatenate(task.y)
    return lambda w: float(np.mean(np.argmax(task.predict_proba(w, X), axis=1) == y))


def run_config(spec, strategy, seed, task=None):
    task = task if task is not None else make_task(spec, spec.task_seed_for(seed))
    return RunConfig(
        task=task, selection=parse_strategy(strategy, spec), tau=spec.tau, rounds=spec.rounds,
        batch_size=spec.batch_size, lr=make_schedule(spec, task), aggregation=spec.aggregation,
        availability=AvailabilityModel(spec.availability, spec.exclusion_fraction),
        seed=seed, eval_fn=_eval_fn(task),
    )


def metrics_name(label, seed):
    return f"{label}_seed{seed}.csv"


def _one_run(args):
    spec, strategy, seed, metrics_dir = args
    cfg = run_config(spec, strategy, seed)
    records = run_training(cfg)
    path = Path(metrics_dir) / metrics_name(cfg.selection.label, seed)
    write_metrics(records, path)
    logger.info("%s seed %d: final loss %.6g", cfg.selection.label, seed, records[-1].global_loss)
    return path.name


def resolve_parallelism(value):
    if value in (None, "max", 0, "0"):
        return os.cpu_count() or 1
    n = int(value)
    if n < 1:
        raise ValueError("parallelism must be >= 1")
    return n


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def run_experiment(spec, out_dir, parallelism=1):
    """Every (strategy, seed) run, then the comparison summary."""
    out = Path(out_dir)
    metrics_dir = out / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, s, seed, str(metrics_dir)) for s in spec.strategies for seed in spec.run_seeds]
    workers = min(resolve_parallelism(parallelism), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            names = list(ex.map(_one_run, jobs))
    else:
        names = [_one_run(j) for j in jobs]

    runs = [{"strategy": s, "label": parse_strategy(s, spec).label, "seed": seed,
             "task_seed": spec.task_seed_for(seed), "metrics": f"metrics/{name}"}
            for (_, s, seed, _), name in zip(jobs, names)]
    tasks = {str(ts): [float(v) for v in make_task(spec, ts).p]
             for ts in sorted({r["task_seed"] for r in runs})}
    (out / "runs.json").write_text(json.dumps({"spec": spec.to_dict(), "runs": runs},
                                              indent=2, sort_keys=True) + "\n")
    (out / "tasks.json").write_text(json.dumps(tasks, indent=2, sort_keys=True) + "\n")
    return summarize(out, spec.target_loss)


def _metrics_files(metrics_dir):
    metrics_dir = Path(metrics_dir)
    if not metrics_dir.is_dir():
        raise FileNotFoundError(f"metrics directory not found: {metrics_dir}")
    groups = {}
    for path in sorted(metrics_dir.glob("*.csv")):
        m = _METRICS_NAME.match(path.name)
        if m:
            groups.setdefault(m["label"], []).append((int(m["seed"]), path))
    if not groups:
        raise FileNotFoundError(f"no <label>_seed<n>.csv metrics files in {metrics_dir}")
    return {label: sorted(files) for label, files in groups.items()}


def summarize(out_dir, target_loss=None):
    """Comparison table and summary, computed only from the metrics files."""
    out = Path(out_dir)
    summary = {"target_loss": target_loss, "strategies": {}}
    rows = []
    for label, files in _metrics_files(out / "metrics").items():
        runs = {seed: read_metrics(path) for seed, path in files}
        n_rounds = min(len(r) for r in runs.values())
        losses = np.array([[rec.global_loss for rec in r[:n_rounds]] for r in runs.values()])
        first = next(iter(runs.values()))
        mean, std = losses.mean(axis=0), losses.std(axis=0)
        for i in range(n_rounds):
            rows.append([label, first[i].round, first[i].t, repr(float(mean[i])),
                         repr(float(std[i])), len(runs)])
        entry = {
            "seeds": sorted(runs),
            "rounds": n_rounds,
            "final_loss_mean": float(mean[-1]),
            "final_loss_std": float(std[-1]),
        }
        if target_loss is not None:
            hits = {str(s): rounds_to_target(r, target_loss) for s, r in runs.items()}
            reached = [v for v in hits.values() if v is not None]
            entry["rounds_to_target"] = hits
            entry["rounds_to_target_mean"] = (float(np.mean(reached))
                                              if len(reached) == len(hits) else None)
        summary["strategies"][label] = entry
    with (out / "comparison.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "round", "t", "global_loss_mean", "global_loss_std", "n_seeds"])
        w.writerows(rows)
    write_summary(summary, out / "summary.json")
    return summary


def run_skew(spec, out_dir, seed=None):
    """rho_bar, rho_tilde and Gamma for each strategy on the spec's task."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = make_task(spec, spec.task_seed)
    grid_seed = spec.skew_seed if seed is None else seed
    entries, rows = {}, []
    for s in spec.strategies:
        cfg = parse_strategy(s, spec)
        if cfg.kind == "rpow_d":
            logger.warning("skipping %s: its selection depends on training history", s)
            continue
        grid = GridSpec(n_samples=spec.skew_grid, pairing=spec.skew_pairing, seed=grid_seed)
        est = estimate_rho_bounds(cfg, task, grid=grid, draws=spec.skew_draws)
        entry = est.to_dict()
        entry.update(strategy=cfg.kind, d=cfg.d, m=cfg.m, label=cfg.label)
        entries[cfg.label] = entry
        rows.append([cfg.label, "" if cfg.d is None else cfg.d, repr(est.rho_bar), repr(est.ratio)])
        logger.info("%s: rho_bar=%.4f rho_tilde/rho_bar=%.4f", cfg.label, est.rho_bar, est.ratio)
    write_skew_report(entries, out / "skew_report.json")
    with (out / "skew_table.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "d", "rho_bar", "rho_tilde_over_rho_bar"])
        w.writerows(rows)
    return entries


def run_freq(metrics_dir, out_path=None):
    """Descending selection-frequency profile per strategy."""
    metrics_dir = Path(metrics_dir)
    root = metrics_dir.parent if metrics_dir.name == "metrics" else metrics_dir
    if (metrics_dir / "metrics").is_dir():
        metrics_dir = metrics_dir / "metrics"
    p_by_label = _fractions_by_label(root)
    table = []
    for label, files in _metrics_files(metrics_dir).items():
        history = [rec.selected for _, path in files for rec in read_metrics(path)]
        p = p_by_label.get(label)
        ratio = frequency_profile(history, n_clients=None if p is None else len(p))
        for k in sorted(range(len(ratio)), key=lambda k: (-ratio[k], k)):
            table.append([label, k, repr(float(ratio[k])), "" if p is None else repr(float(p[k]))])
    out_path = Path(out_path) if out_path else root / "freq_profile.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "client", "ratio", "p_k"])
        w.writerows(table)
    return out_path


def _fractions_by_label(root):
    runs_file, tasks_file = root / "runs.json", root / "tasks.json"
    if not (runs_file.is_file() and tasks_file.is_file()):
        return {}
    runs = json.loads(runs_file.read_text())["runs"]
    tasks = json.loads(tasks_file.read_text())
    out = {}
    for label in {r["label"] for r in runs}:
        ps = [tasks[str(r["task_seed"])] for r in runs if r["label"] == label]
        # several task seeds: compare against the average fractions
        out[label] = np.mean(np.array(ps), axis=0)
    return out


# ---------------------------------------------------------------------------
# Bounds
# ---------------------------------------------------------------------------

EXPLICIT_BOUND_KEYS = {"L", "mu", "G", "sigma", "tau", "m", "gap", "rho_bar", "rho_tilde",
                       "init_dist_sq", "init_gap", "T", "eta"}


def load_bound_params(path):
    """Either explicit constants or an experiment spec to derive them from."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"params file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise SpecError(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise SpecError(f"{path}: expected a mapping at the top level")
    if "experiment" in data:
        return spec_from_dict(data, source=str(path))
    unknown = set(data) - EXPLICIT_BOUND_KEYS
    missing = {"L", "mu", "G", "gap", "rho_bar", "rho_tilde", "init_dist_sq"} - set(data)
    if unknown or missing:
        raise SpecError(f"{path}: unknown keys {sorted(unknown)}, missing keys {sorted(missing)}")
    return data


def _explicit_inputs(data):
    try:
        params = TheoryParams(L=float(data["L"]), mu=float(data["mu"]), G=float(data["G"]),
                              sigma=float(data.get("sigma", 0.0)), tau=int(data.get("tau", 1)),
                              m=int(data.get("m", 1)))
        return BoundInputs(params=params, gap=float(data["gap"]), rho_bar=float(data["rho_bar"]),
                           rho_tilde=float(data["rho_tilde"]),
                           init_dist_sq=float(data["init_dist_sq"]),
                           init_gap=None if data.get("init_gap") is None else float(data["init_gap"]))
    except (TypeError, ValueError) as exc:
        raise SpecError(f"invalid bound constants: {exc}") from exc


def derive_bound_inputs(spec, strategy, seed=None):
    """Theory constants and grid skew for one strategy on the spec's task."""
    if spec.experiment != "quadratic":
        raise SpecError("bound constants can only be derived for the quadratic task")
    task = make_task(spec, spec.task_seed)
    cfg = parse_strategy(strategy, spec)
    grid = GridSpec(n_samples=spec.skew_grid, pairing=spec.skew_pairing,
                    seed=spec.skew_seed if seed is None else seed)
    est = estimate_rho_bounds(cfg, task, grid=grid, draws=spec.skew_draws)
    params = estimate_theory_params(task, tau=spec.tau, m=spec.m)
    w_star, _, f_star = task.optima()
    w0 = np.zeros(task.dim)
    return BoundInputs(params=params, gap=est.gamma, rho_bar=est.rho_bar, rho_tilde=est.rho_tilde,
                       init_dist_sq=float(np.sum((w0 - w_star) ** 2)),
                       init_gap=task.global_loss(w0) - f_star)


def run_bound(source, out_dir, seed=None):
    """Decaying-rate and fixed-rate bound tables; ``source`` is a params dict or spec."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(source, ExperimentSpec):
        jobs = [(parse_strategy(s, source).label, derive_bound_inputs(source, s, seed))
                for s in source.strategies if not s.startswith("rpow_d")]
        Ts, eta = source.bound_T, source.bound_eta
    else:
        jobs = [("explicit", _explicit_inputs(source))]
        Ts, eta = tuple(source.get("T", (100, 1000, 10000))), source.get("eta")
    rows = []
    for label, inputs in jobs:
        step = eta if eta is not None else fixed_lr_cap(inputs)
        t2 = step if inputs.init_gap is not None else None
        try:
            table = bound_table(inputs, Ts, eta=t2)
        except ValueError as exc:
            raise SpecError(str(exc)) from exc
        rows.extend([label, *row] for row in table)
    with (out / "bound_table.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "theorem", "T", "vanishing", "bias", "total"])
        for label, name, T, v, b, tot in rows:
            w.writerow([label, name, T, repr(float(v)), repr(float(b)), repr(float(tot))])
    return rows


def with_overrides(spec, **kw):
    return replace(spec, **{k: v for k, v in kw.items() if v is not None})
