"""Experiment configuration, seeded orchestration and result files."""

from __future__ import annotations

import datetime as _dt
import functools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import benchmarks, random_models
from .cdp import FactoredMdp, plan
from .errors import ConfigError, InconsistencyError, VersionSpaceEmptyError, WitnessLabError
from .io import dumps, load_models, write_csv, write_json
from .misfit import bellman_error_exact, witnessed_misfit_exact
from .olime import AlgoConfig, instance_parameters, run_doubling, run_factored, run_main
from .rng import stream
from .test_functions import TvBall, bellman_class, build_scheffe_class
from .witness_rank import build_matrix, factored_factorization, numerical_rank, rank_report

KINDS = ("plan", "misfit", "rank", "run-main", "run-doubling", "run-factored", "separation-demo", "scheffe-check")
WORKERS_ENV = "WITNESS_LAB_WORKERS"


@dataclass
class ExperimentConfig:
    """One experiment. ``source`` names a model file or a builder with parameters."""

    kind: str
    source: dict[str, Any] = field(default_factory=dict)
    algo: dict[str, Any] = field(default_factory=dict)
    test_functions: str = "tv"
    seeds: list[int] = field(default_factory=lambda: [0])
    params: dict[str, Any] = field(default_factory=dict)
    out: str = "results"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.test_functions not in ("tv", "bellman", "scheffe"):
            raise ConfigError(f"test_functions must be tv, bellman or scheffe, got {self.test_functions!r}")
        if not isinstance(self.seeds, list) or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds must be a list of integers")
        if self.algo.get("mode") == "sampling" and not self.seeds:
            raise ConfigError("sampling mode needs at least one seed")
        AlgoConfig.from_dict(self.algo)
        path = self.source.get("file")
        if path is not None and not Path(path).exists():
            raise ConfigError(f"model file {path} does not exist")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        if "kind" not in data:
            raise ConfigError("configuration needs a 'kind'")
        return cls(**data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as err:
            raise ConfigError(f"configuration is not valid YAML: {err}") from err
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text())


# --------------------------------------------------------------------------
# sources


def load_source(source: dict[str, Any]) -> tuple[list[Any], int]:
    """Build or read a model class and the index of the true model."""
    src = dict(source)
    if "file" in src:
        models, ti = load_models(src["file"])
        ti = src.get("true_index", ti)
        return models, int(ti or 0)
    builder = src.pop("builder", None)
    if builder == "mab_tree":
        return benchmarks.build_mab_tree_family(int(src["H"]), int(src["K"]), float(src["eps"]), src.get("true_arm"))
    if builder == "random_class":
        rng = stream(int(src.get("seed", 0)), "random_class")
        return random_models.random_class(rng, int(src["size"]), int(src["horizon"]), int(src["actions"]),
                                          int(src.get("max_states", 5)))
    if builder == "random_factored_class":
        rng = stream(int(src.get("seed", 0)), "random_factored_class")
        return random_models.random_factored_class(
            rng, int(src["size"]), int(src["d"]), int(src.get("values", 2)), int(src["horizon"]),
            int(src.get("actions", 2)), int(src.get("max_parents", 2)))
    if builder == "separation":
        fam = list(_separation_family(int(src["d"])))
        path = src.get("true_path")
        ti = benchmarks.all_paths(int(src["d"])).index(tuple(path)) if path is not None else len(fam) - 1
        return fam, ti
    raise ConfigError(f"unknown model source {source!r}")


@functools.lru_cache(maxsize=4)
def _separation_family(d: int) -> tuple[Any, ...]:
    # models are immutable, so sharing them lets plans be reused across seeds
    return tuple(benchmarks.build_separation_family(d))


def _test_class(name: str, models: list[Any]):
    if name == "tv":
        return TvBall(1)
    if name == "bellman":
        return bellman_class(models)
    return build_scheffe_class(models)


def _algo(cfg: ExperimentConfig, models: list[Any], true_model: Any, F: Any) -> AlgoConfig:
    algo = dict(cfg.algo)
    if algo.get("wrank") == "auto" or algo.get("beta") == "auto":
        ip = instance_parameters(models, true_model, F)
        if algo.get("wrank") == "auto":
            algo["wrank"] = ip["wrank"]
        if algo.get("beta") == "auto":
            algo["beta"] = ip["beta"]
    return AlgoConfig.from_dict(algo)


# --------------------------------------------------------------------------
# experiments


def _exp_plan(cfg: ExperimentConfig) -> dict[str, Any]:
    models, ti = load_source(cfg.source)
    true_model = models[ti]
    p = plan(true_model)
    return {"json": {
        "kind": cfg.kind, "true_index": ti, "v_star": p.value,
        "policy": [a.tolist() for a in p.actions],
        "V": [v.tolist() for v in p.V],
    }}


def _exp_misfit(cfg: ExperimentConfig) -> dict[str, Any]:
    models, ti = load_source(cfg.source)
    true_model = models[ti]
    F = _test_class(cfg.test_functions, models)
    rows = []
    for h in range(1, true_model.horizon + 1):
        for i, M in enumerate(models):
            for j, Mp in enumerate(models):
                rows.append([h, i, j, witnessed_misfit_exact(M, Mp, true_model, h, F),
                             bellman_error_exact(M, Mp, true_model, h)])
    return {"csv": (["h", "roll_in", "target", "misfit", "bellman_error"], rows),
            "json": {"kind": cfg.kind, "true_index": ti, "test_functions": cfg.test_functions, "entries": len(rows)}}


def _exp_rank(cfg: ExperimentConfig) -> dict[str, Any]:
    models, ti = load_source(cfg.source)
    true_model = models[ti]
    tol = float(cfg.params.get("tol", 1e-8))
    if isinstance(true_model, FactoredMdp):
        levels = []
        for h in range(1, true_model.horizon + 1):
            fac = factored_factorization(models, true_model, h)
            W = build_matrix(models, true_model, h, "factored")
            levels.append({"h": h, "rank": numerical_rank(W, tol), "dim": fac.dim, "beta": fac.beta})
        return {"json": {"kind": cfg.kind, "factored": True, "tolerance": tol, "levels": levels}}
    F = _test_class(cfg.test_functions, models)
    report = rank_report(models, true_model, F, float(cfg.params.get("kappa", 1.0)), tol)
    return {"json": {"kind": cfg.kind, "factored": False, **report}}


def _run_one(args: tuple[str, dict[str, Any], int]) -> dict[str, Any]:
    kind, cfg_dict, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    models, ti = load_source(cfg.source)
    true_model = models[ti]
    try:
        if kind == "run-factored":
            rec = run_factored(models, true_model, AlgoConfig.from_dict(cfg.algo), seed=seed, true_index=ti)
        else:
            F = _test_class(cfg.test_functions, models)
            if kind == "run-main":
                rec = run_main(models, true_model, F, _algo(cfg, models, true_model, F), seed=seed, true_index=ti)
            else:
                a = cfg.algo
                rec = run_doubling(models, true_model, F, float(a.get("epsilon", 0.1)), float(a.get("delta", 0.1)),
                                   seed=seed, mode=a.get("mode", "sampling"), beta=float(a.get("beta", 2.0)),
                                   c_n=float(a.get("c_n", 1.0)), c_ne=float(a.get("c_ne", 1.0)),
                                   max_epochs=int(cfg.params.get("max_epochs", 12)),
                                   trajectory_budget=a.get("trajectory_budget"), true_index=ti)
    except (InconsistencyError, VersionSpaceEmptyError) as err:
        # a failed run is an outcome to tabulate; budget overruns abort the experiment
        rec = err.record
        if rec is None:
            raise
    return rec.to_dict()


def _map(fn: Callable, items: list) -> list:
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _exp_runs(cfg: ExperimentConfig) -> dict[str, Any]:
    eps = float(cfg.algo.get("epsilon", 0.1))
    records = _map(_run_one, [(cfg.kind, cfg.to_dict(), s) for s in cfg.seeds])
    rows = []
    for s, r in zip(cfg.seeds, records):
        ok = r["v_output"] is not None and r["v_output"] >= r["v_star"] - eps
        rows.append([s, r["status"], r["output"], len(r["rounds"]), r["total_trajectories"],
                     r["v_output"], r["v_star"], ok])
    header = ["seed", "status", "output", "rounds", "trajectories", "v_pi", "v_star", "eps_optimal"]
    return {"csv": (header, rows), "json": {"kind": cfg.kind, "records": records,
                                            "eps_optimal": sum(int(r[-1]) for r in rows), "runs": len(rows)}}


def _separation_seed(args: tuple[dict[str, Any], int]) -> list[list[Any]]:
    cfg_dict, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    d = int(cfg.params.get("d", cfg.source.get("d", 4)))
    fam = list(_separation_family(d))
    ti = int(stream(seed, "separation", "planted").integers(0, len(fam)))
    algo = {"epsilon": 0.5, "delta": 0.1, "mode": "sampling", "n": 1, "n_e": 1, **cfg.algo}
    rec = run_factored(fam, fam[ti], AlgoConfig.from_dict(algo), seed=seed, true_index=ti)
    v_model = rec.v_output if rec.v_output is not None else 0.0
    learner = benchmarks.profile_restricted_learner(
        fam, ti, None, int(cfg.params.get("budget", 2**d)), stream(seed, "separation", "profile-learner"))
    v_prof = 0.0
    if learner.path is not None:
        v_prof = benchmarks.path_reward(fam[ti], benchmarks.action_indices(learner.path))
    return [["model-based", seed, rec.total_trajectories, v_model],
            ["profile-restricted", seed, learner.trajectories, v_prof]]


def _exp_separation(cfg: ExperimentConfig) -> dict[str, Any]:
    blocks = _map(_separation_seed, [(cfg.to_dict(), s) for s in cfg.seeds])
    rows = [row for block in blocks for row in block]
    mb = [r[2] for r in rows if r[0] == "model-based"]
    pr = [r[2] for r in rows if r[0] == "profile-restricted"]
    d = int(cfg.params.get("d", cfg.source.get("d", 4)))
    summary = {
        "kind": cfg.kind, "d": d, "seeds": len(cfg.seeds),
        "mean_model_based": float(np.mean(mb)), "max_model_based": int(max(mb)),
        "mean_profile_restricted": float(np.mean(pr)),
        "uniform_search_expectation": (2**d + 1) / 2,
    }
    return {"csv": (["learner", "seed", "trajectories", "v_pi"], rows), "json": summary}


def _exp_scheffe(cfg: ExperimentConfig) -> dict[str, Any]:
    models, ti = load_source(cfg.source)
    true_model = models[ti]
    sc = build_scheffe_class(models)
    tv = TvBall(1)
    gap = 0.0
    rows = []
    for h in range(1, true_model.horizon + 1):
        for i, M in enumerate(models):
            for j, Mp in enumerate(models):
                a = witnessed_misfit_exact(M, Mp, true_model, h, tv)
                b = witnessed_misfit_exact(M, Mp, true_model, h, sc)
                gap = max(gap, abs(a - b))
                rows.append([h, i, j, a, b])
    return {"csv": (["h", "roll_in", "target", "tv_ball", "scheffe"], rows),
            "json": {"kind": cfg.kind, "class_size": len(sc.functions), "max_gap": gap, "equal": gap <= 1e-9}}


EXPERIMENTS: dict[str, Callable[[ExperimentConfig], dict[str, Any]]] = {
    "plan": _exp_plan,
    "misfit": _exp_misfit,
    "rank": _exp_rank,
    "run-main": _exp_runs,
    "run-doubling": _exp_runs,
    "run-factored": _exp_runs,
    "separation-demo": _exp_separation,
    "scheffe-check": _exp_scheffe,
}


def run(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> Path:
    """Execute an experiment and write ``result.json`` (and ``results.csv`` for tables).

    ``run_meta.json`` carries the wall-clock timestamp and is the only
    non-reproducible output.
    """
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result = EXPERIMENTS[cfg.kind](cfg)
    write_json(out / "result.json", {"config": cfg.to_dict(), **result["json"]})
    if "csv" in result:
        header, rows = result["csv"]
        write_csv(out / "results.csv", header, rows)
    write_json(out / "run_meta.json", {"timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat()})
    return out


def error_document(err: Exception) -> str:
    doc = err.to_dict() if isinstance(err, WitnessLabError) else {"error": "internal", "message": str(err)}
    return dumps(doc)

