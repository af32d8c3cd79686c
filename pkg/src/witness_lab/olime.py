"""Optimistic model elimination: the main loop, the doubling wrapper and the factored variant.

Each run is driven by an :class:`AlgoConfig`. In ``"oracle"`` mode every
sampled quantity (value estimate, Bellman errors, misfits) is replaced by its
exact expectation and no trajectories are drawn; ``"sampling"`` mode follows
the procedure literally with seeded substreams.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Sequence

import numpy as np

from .cdp import FactoredMdp, align_rewards, plan, policy_value, sample_batch
from .errors import BudgetExceededError, ConfigError, InconsistencyError, VersionSpaceEmptyError
from .misfit import (
    MisfitSample,
    bellman_error_estimates,
    bellman_error_exact,
    factored_misfit_estimate,
    factored_misfit_exact,
    witnessed_misfit_estimate,
    witnessed_misfit_exact,
)
from .rng import stream
from .test_functions import FiniteClass, ScheffeClass, TestFunctionClass

MODES = ("oracle", "sampling")


@dataclass
class AlgoConfig:
    """Inputs of the elimination loop.

    Any of ``phi``, ``max_rounds``, ``n``, ``n_e`` left as ``None`` is derived
    from ``(epsilon, delta, kappa, wrank, beta)`` by :meth:`resolve` using the
    sample-size formulas with leading constants ``c_n`` and ``c_ne``.
    """

    epsilon: float = 0.1
    delta: float = 0.1
    mode: str = "oracle"
    phi: float | None = None
    n: int | None = None
    n_e: int | None = None
    max_rounds: int | None = None
    kappa: float = 1.0
    wrank: float | None = None
    beta: float = 2.0
    c_n: float = 1.0
    c_ne: float = 1.0
    trajectory_budget: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0 < self.epsilon <= 1 and 0 < self.delta <= 1):
            raise ConfigError("epsilon and delta must lie in (0, 1]")
        if not 0 < self.kappa <= 1:
            raise ConfigError("kappa must lie in (0, 1]")
        if self.phi is not None and self.phi < 0:
            raise ConfigError("phi must be nonnegative")
        for name in ("n", "n_e"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be at least 1")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AlgoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown algorithm settings: {sorted(unknown)}")
        return cls(**data)

    def resolve(self, horizon: int, num_actions: int, num_models: int, class_size: float) -> "Params":
        """Fill unset parameters from the general-class formulas."""
        w = 1.0 if self.wrank is None else max(float(self.wrank), 1.0)
        phi = self.kappa * self.epsilon / (48 * horizon * math.sqrt(w)) if self.phi is None else self.phi
        T = self.max_rounds if self.max_rounds is not None else round_cap(horizon, w, self.beta, phi)
        n_e = self.n_e
        if n_e is None:
            n_e = math.ceil(self.c_ne * horizon**2 * math.log(horizon * T / self.delta) / self.epsilon**2)
        n = self.n
        if n is None and self.mode == "sampling":
            if not math.isfinite(class_size):
                raise ConfigError("n cannot be derived for an infinite test-function class; set n explicitly")
            n = math.ceil(
                self.c_n * horizon**2 * num_actions * w
                * math.log(T * num_models * class_size / self.delta) / (self.kappa * self.epsilon) ** 2
            )
        return Params(phi=phi, max_rounds=T, n=n or 0, n_e=max(int(n_e), 1), kappa=self.kappa, wrank=w,
                      beta=self.beta)


@dataclass(frozen=True)
class Params:
    phi: float
    max_rounds: int
    n: int
    n_e: int
    kappa: float
    wrank: float
    beta: float


def round_cap(horizon: int, wrank: float, beta: float, phi: float) -> int:
    """``ceil(H * wrank * log(beta / 2 phi) / log(5/3))``, at least 1."""
    if phi <= 0 or beta <= 2 * phi:
        return 1
    return max(1, math.ceil(horizon * wrank * math.log(beta / (2 * phi)) / math.log(5 / 3)))


def factored_params(cfg: AlgoConfig, true_model: FactoredMdp) -> Params:
    """Parameters of the factored variant: ``kappa = 1/K``, ``wrank = L_h/|O|``, ``beta = L/K``."""
    H, K, d, o = true_model.horizon, true_model.num_actions, true_model.d, true_model.num_values
    L, L_h = true_model.num_parameters, true_model.level_parameters
    kappa = 1.0 / K
    w = L_h / o
    beta = L / K
    phi = kappa * cfg.epsilon / (48 * H * math.sqrt(w)) if cfg.phi is None else cfg.phi
    T = cfg.max_rounds if cfg.max_rounds is not None else round_cap(H, w, beta, phi)
    n_e = cfg.n_e
    if n_e is None:
        n_e = math.ceil(cfg.c_ne * H**2 * math.log(H * T / cfg.delta) / cfg.epsilon**2)
    n = cfg.n
    if n is None:
        n = math.ceil(
            cfg.c_n * d**2 * (L * math.log(d * K * L / cfg.epsilon) + math.log(3 * T / cfg.delta))
            * L * H * K**2 / (o * cfg.epsilon**2)
        )
    return Params(phi=phi, max_rounds=T, n=int(n), n_e=int(n_e), kappa=kappa, wrank=w, beta=beta)


# --------------------------------------------------------------------------
# records


@dataclass
class RoundRecord:
    t: int
    chosen: int
    chosen_name: str
    v_model: float
    v_hat: float
    terminated: bool
    h_t: int | None = None
    bellman_estimates: list[float] = field(default_factory=list)
    qualifying_levels: list[int] = field(default_factory=list)
    misfit_estimates: dict[int, float] = field(default_factory=dict)
    eliminated: list[int] = field(default_factory=list)
    survivors: list[int] = field(default_factory=list)
    trajectories: int = 0

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["misfit_estimates"] = {str(k): v for k, v in self.misfit_estimates.items()}
        return d


@dataclass
class RunRecord:
    """Per-round log plus outcome. ``output`` is the index of the model whose policy is returned."""

    mode: str
    params: dict[str, Any]
    rounds: list[RoundRecord] = field(default_factory=list)
    status: str = "running"
    output: int | None = None
    total_trajectories: int = 0
    true_index: int | None = None
    v_star: float | None = None
    v_output: float | None = None
    seed: int | None = None
    inner_runs: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "params": self.params,
            "status": self.status,
            "output": self.output,
            "total_trajectories": self.total_trajectories,
            "true_index": self.true_index,
            "v_star": self.v_star,
            "v_output": self.v_output,
            "rounds": [r.to_dict() for r in self.rounds],
            "inner_runs": self.inner_runs,
        }

    @property
    def succeeded(self) -> bool:
        return self.status == "terminated"

    def epsilon_optimal(self, epsilon: float) -> bool:
        return self.v_output is not None and self.v_star is not None and self.v_output >= self.v_star - epsilon

    def true_never_eliminated(self) -> bool:
        return all(self.true_index not in r.eliminated for r in self.rounds)


# --------------------------------------------------------------------------
# the loop


def eliminate(version_space: Sequence[int], estimates: dict[int, float], phi: float) -> list[int]:
    """Keep the models whose estimated misfit is at most ``phi``, in order."""
    return [m for m in version_space if estimates[m] <= phi]


def _class_size(F: TestFunctionClass, num_models: int, horizon: int) -> float:
    if isinstance(F, ScheffeClass):
        return 2.0 * num_models**3 * horizon
    return F.size()


@dataclass(frozen=True)
class _Hooks:
    exact_misfit: Callable[[Any, Any, Any, int], float]
    estimate_misfit: Callable[[MisfitSample, Any], float]


def _tabular_hooks(F: TestFunctionClass, models: Sequence[Any], true_model: Any) -> _Hooks:
    support = getattr(F, "reward_values", None)
    if support is None:
        support = align_rewards(list(models) + [true_model])
    return _Hooks(
        exact_misfit=lambda M, Mp, true, h: witnessed_misfit_exact(M, Mp, true, h, F),
        estimate_misfit=lambda data, Mp: witnessed_misfit_estimate(data, Mp, F, support),
    )


def _factored_hooks() -> _Hooks:
    return _Hooks(
        exact_misfit=factored_misfit_exact,
        estimate_misfit=lambda data, Mp: factored_misfit_estimate(data, Mp),
    )


def _loop(
    models: Sequence[Any],
    true_model: Any,
    params: Params,
    cfg: AlgoConfig,
    hooks: _Hooks,
    seed: int,
    purpose: tuple,
    true_index: int | None,
    budget_used: int = 0,
) -> RunRecord:
    H = true_model.horizon
    eps = cfg.epsilon
    plans = [plan(m) for m in models]
    record = RunRecord(mode=cfg.mode, params=asdict(params), true_index=true_index, seed=seed,
                       v_star=plan(true_model).value)
    survivors = list(range(len(models)))
    for t in range(1, params.max_rounds + 1):
        # optimistic choice, ties to the lowest index
        values = [plans[m].value for m in survivors]
        chosen = survivors[int(np.argmax(values))]
        M_t, p_t = models[chosen], plans[chosen]
        used = 0
        if cfg.mode == "oracle":
            v_hat = policy_value(true_model, p_t.policy)
            eb = [bellman_error_exact(M_t, M_t, true_model, h) for h in range(1, H + 1)]
        else:
            _check_budget(cfg, budget_used + record.total_trajectories + params.n_e, record)
            batch = sample_batch(true_model, p_t.policy, params.n_e, stream(seed, *purpose, t, "value"))
            used += params.n_e
            v_hat = float(batch.returns.mean())
            eb = bellman_error_estimates(batch, p_t).tolist()
        rnd = RoundRecord(t=t, chosen=chosen, chosen_name=M_t.name, v_model=p_t.value, v_hat=v_hat,
                          terminated=False, bellman_estimates=[float(e) for e in eb])
        record.rounds.append(rnd)
        if abs(v_hat - p_t.value) <= eps / 2:
            rnd.terminated = True
            rnd.survivors = list(survivors)
            rnd.trajectories = used
            record.total_trajectories += used
            return _finish(record, "terminated", chosen, models, true_model)
        rnd.qualifying_levels = [h for h in range(1, H + 1) if eb[h - 1] >= eps / (4 * H)]
        if not rnd.qualifying_levels:
            rnd.trajectories = used
            record.total_trajectories += used
            _finish(record, "inconsistent", None, models, true_model)
            raise InconsistencyError(f"round {t}: no level has estimated Bellman error >= eps/(4H)", record)
        h_t = rnd.qualifying_levels[0]
        rnd.h_t = h_t
        if cfg.mode == "oracle":
            est = {m: hooks.exact_misfit(M_t, models[m], true_model, h_t) for m in survivors}
        else:
            _check_budget(cfg, budget_used + record.total_trajectories + used + params.n, record)
            batch = sample_batch(true_model, p_t.policy, params.n, stream(seed, *purpose, t, "misfit"),
                                 uniform_levels=(h_t,))
            used += params.n
            data = MisfitSample.from_batch(batch, h_t, "uniform", roll_in=chosen, seed=seed, round=t)
            est = {m: hooks.estimate_misfit(data, models[m]) for m in survivors}
        rnd.misfit_estimates = {m: float(v) for m, v in est.items()}
        kept = eliminate(survivors, est, params.phi)
        rnd.eliminated = [m for m in survivors if m not in kept]
        rnd.survivors = kept
        rnd.trajectories = used
        record.total_trajectories += used
        survivors = kept
        if not survivors:
            _finish(record, "empty", None, models, true_model)
            raise VersionSpaceEmptyError(f"round {t}: every model was eliminated (phi={params.phi:.3g})", record)
    return _finish(record, "round_cap", None, models, true_model)


def _check_budget(cfg: AlgoConfig, needed: int, record: RunRecord) -> None:
    if cfg.trajectory_budget is not None and needed > cfg.trajectory_budget:
        record.status = "budget"
        raise BudgetExceededError(
            f"trajectory budget {cfg.trajectory_budget} exceeded (would reach {needed})", record
        )


def _finish(record: RunRecord, status: str, output: int | None, models: Sequence[Any], true_model: Any) -> RunRecord:
    record.status = status
    record.output = output
    if output is not None:
        record.v_output = policy_value(true_model, plan(models[output]).policy)
    return record


def _true_index(models: Sequence[Any], true_model: Any) -> int | None:
    for j, m in enumerate(models):
        if m is true_model:
            return j
    return None


def run_main(
    model_class: Sequence[Any],
    true_model: Any,
    F: TestFunctionClass,
    cfg: AlgoConfig,
    seed: int = 0,
    true_index: int | None = None,
) -> RunRecord:
    """Run the elimination loop on an enumerated class with test functions ``F``."""
    models = list(model_class)
    H, K = true_model.horizon, true_model.num_actions
    params = cfg.resolve(H, K, len(models), _class_size(F, len(models), H))
    ti = _true_index(models, true_model) if true_index is None else true_index
    return _loop(models, true_model, params, cfg, _tabular_hooks(F, models, true_model), seed, ("main",), ti)


def run_factored(
    model_class: Sequence[FactoredMdp],
    true_model: FactoredMdp,
    cfg: AlgoConfig,
    seed: int = 0,
    true_index: int | None = None,
) -> RunRecord:
    """The loop with the factored sum class and the unweighted factored estimator."""
    models = list(model_class)
    params = factored_params(cfg, true_model)
    ti = _true_index(models, true_model) if true_index is None else true_index
    return _loop(models, true_model, params, cfg, _factored_hooks(), seed, ("factored",), ti)


def doubling_schedule(i: int, delta: float) -> list[dict[str, float]]:
    """Inner settings for epoch ``i``: stop before the first ``j`` with ``wrank_ij < 1``."""
    N_i = 2 ** (i - 1)
    delta_i = delta / (i * (i + 1))
    out = []
    j = 1
    while True:
        kappa = 0.5 ** (j - 1)
        w = N_i * kappa
        if w < 1:
            break
        out.append({"i": i, "j": j, "kappa": kappa, "wrank": w, "delta": delta_i / (j * (j + 1))})
        j += 1
    return out


def run_doubling(
    model_class: Sequence[Any],
    true_model: Any,
    F: TestFunctionClass,
    epsilon: float,
    delta: float,
    seed: int = 0,
    mode: str = "sampling",
    beta: float = 2.0,
    c_n: float = 1.0,
    c_ne: float = 1.0,
    max_epochs: int = 12,
    trajectory_budget: int | None = None,
    true_index: int | None = None,
) -> RunRecord:
    """Nested guesses of ``(kappa, wrank)``; returns the first inner run that terminates.

    Inner runs that hit their round cap, empty the version space or find no
    qualifying level are logged in ``inner_runs`` and the search moves on.
    """
    models = list(model_class)
    H, K = true_model.horizon, true_model.num_actions
    size = _class_size(F, len(models), H)
    ti = _true_index(models, true_model) if true_index is None else true_index
    hooks = _tabular_hooks(F, models, true_model)
    spent = 0
    log: list[dict[str, Any]] = []
    for i in range(1, max_epochs + 1):
        for inner in doubling_schedule(i, delta):
            cfg = AlgoConfig(epsilon=epsilon, delta=inner["delta"], mode=mode, kappa=inner["kappa"],
                             wrank=inner["wrank"], beta=beta, c_n=c_n, c_ne=c_ne,
                             trajectory_budget=None if trajectory_budget is None else trajectory_budget - spent)
            params = cfg.resolve(H, K, len(models), size)
            try:
                rec = _loop(models, true_model, params, cfg, hooks, seed, ("doubling", i, inner["j"]), ti)
            except (InconsistencyError, VersionSpaceEmptyError) as err:
                rec = err.record
            except BudgetExceededError as err:
                err.record.inner_runs = log
                raise BudgetExceededError(f"{err}; progress: {len(log)} inner runs, {spent} trajectories",
                                          err.record) from None
            spent += rec.total_trajectories
            log.append({**inner, "status": rec.status, "rounds": len(rec.rounds),
                        "trajectories": rec.total_trajectories, "max_rounds": params.max_rounds})
            if rec.status == "terminated":
                rec.inner_runs = log
                rec.total_trajectories = spent
                rec.params = {**rec.params, "epoch": i, "inner": inner["j"]}
                return rec
    final = RunRecord(mode=mode, params={"max_epochs": max_epochs}, status="exhausted", true_index=ti,
                      v_star=plan(true_model).value, seed=seed, inner_runs=log, total_trajectories=spent)
    return final


def instance_parameters(
    models: Sequence[Any], true_model: Any, F: TestFunctionClass, tol: float = 1e-8
) -> dict[str, float]:
    """Computable ``(kappa, wrank, beta)`` surrogates: ``kappa = 1`` and the misfit matrix's rank and SVD norm product."""
    from .witness_rank import build_matrix, numerical_rank, svd_beta

    ranks, betas = [], []
    for h in range(1, true_model.horizon + 1):
        W = build_matrix(models, true_model, h, "misfit", F)
        ranks.append(numerical_rank(W, tol))
        betas.append(svd_beta(W, tol))
    return {"kappa": 1.0, "wrank": float(max(max(ranks), 1)), "beta": float(max(max(betas), 1e-12)),
            "rank_by_level": ranks}


def default_finite_class(models: Sequence[Any]) -> FiniteClass:
    from .test_functions import bellman_class

    return bellman_class(models)
