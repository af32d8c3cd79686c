"""Witnessed model misfit, average Bellman error and the factored misfit.

Exact functions evaluate expectations by occupancy-weighted sums. Estimators
consume sampled level-``h`` transitions collected by :func:`collect_samples`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Any, Sequence

import numpy as np

from .cdp import (
    FactoredMdp,
    PlanResult,
    Policy,
    TrajectoryBatch,
    align_rewards,
    conditional,
    occupancy,
    plan,
    same_shape,
    sample_batch,
)
from .errors import InconsistencyError, StructureError
from .test_functions import FactoredSum, TestFunctionClass, cells_supremum

FORM_TOL = 1e-9


def _plan(m: Any) -> PlanResult:
    return m if isinstance(m, PlanResult) else plan(m)


def _check_level(model: Any, h: int) -> None:
    if not 1 <= h <= model.horizon:
        raise StructureError(f"level {h} outside 1..{model.horizon}")


def _support(F: TestFunctionClass | None, models: Sequence[Any]) -> np.ndarray:
    rv = getattr(F, "reward_values", None)
    return align_rewards(models) if rv is None else np.asarray(rv)


def action_weights(target_plan: PlanResult, h: int, n: int, K: int, actions: str) -> np.ndarray:
    """``(n_h, K)`` action distribution: the target's greedy policy or uniform."""
    if actions == "policy":
        w = np.zeros((n, K))
        w[np.arange(n), target_plan.actions[h - 1]] = 1.0
        return w
    if actions == "uniform":
        return np.full((n, K), 1.0 / K)
    raise StructureError(f"unknown action mode {actions!r}")


def rollin_weights(roll_in: Any, target: Any, true_model: Any, h: int, actions: str = "policy") -> np.ndarray:
    """Joint weight of ``(x_h, a_h)``: ``x_h`` from ``pi_M`` run in the true model."""
    _check_level(true_model, h)
    d = occupancy(true_model, _plan(roll_in).policy, h)
    return d[:, None] * action_weights(_plan(target), h, d.shape[0], true_model.num_actions, actions)


def witnessed_misfit_exact(
    roll_in: Any,
    target: Any,
    true_model: Any,
    h: int,
    F: TestFunctionClass,
    actions: str = "policy",
) -> float:
    """Exact ``W(M, M', h; F)``.

    ``actions="uniform"`` gives the variant with ``a_h ~ U(A)``.
    """
    same_shape(roll_in, target, true_model)
    w = rollin_weights(roll_in, target, true_model, h, actions)
    rv = _support(F, [roll_in, target, true_model])
    diff = conditional(target, h, rv) - conditional(true_model, h, rv)
    value, _ = F.supremum(w[:, :, None, None] * diff, h)
    return value


def bellman_error_forms(M: Any, M_prime: Any, true_model: Any, h: int) -> tuple[float, float]:
    """The residual form and the model-difference form of ``E_B(M, M', h)``."""
    same_shape(M, M_prime, true_model)
    _check_level(true_model, h)
    pp = _plan(M_prime)
    w = rollin_weights(M, M_prime, true_model, h, "policy")
    v_next = pp.V[h]
    # E[Q'(x_h, a_h) - r_h - Q'(x_{h+1}, a_{h+1})], a_{h+1} ~ pi_{M'}
    residual = pp.Q[h - 1] - true_model.mean_reward(h) - true_model.transition(h) @ v_next
    form_residual = float((w * residual).sum())
    # E[E_{M'}[r + V'(x')] - E_{M*}[r + V'(x')]]
    target_side = M_prime.mean_reward(h) + M_prime.transition(h) @ v_next
    true_side = true_model.mean_reward(h) + true_model.transition(h) @ v_next
    form_model = float((w * (target_side - true_side)).sum())
    return form_residual, form_model


def bellman_error_exact(M: Any, M_prime: Any, true_model: Any, h: int) -> float:
    """Exact average Bellman error; raises if the two forms disagree beyond 1e-9."""
    residual, model_form = bellman_error_forms(M, M_prime, true_model, h)
    if abs(residual - model_form) > FORM_TOL:
        raise InconsistencyError(
            f"Bellman error forms disagree at level {h}: {residual!r} vs {model_form!r}"
        )
    return residual


# --------------------------------------------------------------------------
# samples and estimators


@dataclass(frozen=True)
class MisfitSample:
    """Level-``h`` transitions ``(x_h, a_h, r_h, x_{h+1})`` with their collection metadata."""

    h: int
    x: np.ndarray
    a: np.ndarray
    r: np.ndarray
    x_next: np.ndarray
    mode: str = "uniform"
    roll_in: Any = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @classmethod
    def from_batch(cls, batch: TrajectoryBatch, h: int, mode: str, roll_in: Any = None, **meta: Any) -> "MisfitSample":
        x, a, r, x_next = batch.transitions_at(h)
        return cls(h, x, a, r, x_next, mode, roll_in, dict(meta))

    def to_records(self) -> list[dict[str, Any]]:
        """One JSON-ready dict per transition."""
        return [
            {"h": self.h, "x": int(x), "a": int(a), "r": float(r), "x_next": int(y), "mode": self.mode,
             "roll_in": self.roll_in}
            for x, a, r, y in zip(self.x, self.a, self.r, self.x_next)
        ]


def collect_samples(
    true_model: Any,
    roll_in_policy: Policy,
    h: int,
    n: int,
    rng: np.random.Generator,
    mode: str = "uniform",
    roll_in: Any = None,
) -> MisfitSample:
    """Run ``roll_in_policy`` in the true model, acting uniformly at level ``h`` if ``mode="uniform"``."""
    uniform = (h,) if mode == "uniform" else ()
    batch = sample_batch(true_model, roll_in_policy, n, rng, uniform_levels=uniform)
    return MisfitSample.from_batch(batch, h, mode, roll_in, n=n)


def _reward_index(r: np.ndarray, support: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(support, r)
    idx = np.minimum(idx, support.shape[0] - 1)
    if not np.allclose(support[idx], r, atol=1e-12, rtol=0):
        raise StructureError("observed rewards fall outside the reward support")
    return idx


def empirical_residual_measure(data: MisfitSample, target: Any, support: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``(1/N) sum_n rho_n (P'(.|x_n, a_n) - delta_{(r_n, x'_n)})`` as a dense level-``h`` measure."""
    h = data.h
    cond = conditional(target, h, support)
    D = np.zeros(cond.shape)
    counts = np.zeros(cond.shape[:2])
    np.add.at(counts, (data.x, data.a), weights)
    D += counts[:, :, None, None] * cond
    r_idx = _reward_index(data.r, support)
    np.add.at(D, (data.x, data.a, r_idx, data.x_next), -weights)
    return D / len(data)


def importance_weights(data: MisfitSample, target: Any) -> np.ndarray:
    """``rho = K * pi_{M'}(a | x)``; values in ``{0, K}`` for greedy targets."""
    if data.mode != "uniform":
        raise StructureError("importance-weighted misfit needs data with uniformly drawn actions")
    K = target.num_actions
    return K * (_plan(target).actions[data.h - 1][data.x] == data.a).astype(float)


def witnessed_misfit_estimate(
    data: MisfitSample, target: Any, F: TestFunctionClass, support: np.ndarray | None = None
) -> float:
    """Importance-weighted empirical supremum over ``F``."""
    if len(data) == 0:
        raise StructureError("empty dataset")
    rho = importance_weights(data, target)
    rv = support if support is not None else _support(F, [target])
    D = empirical_residual_measure(data, target, rv, rho)
    value, _ = F.supremum(D, data.h)
    return value


def bellman_error_estimate(data: MisfitSample, target: Any) -> float:
    """Mean of ``Q_M(x_h, a_h) - r_h - V_M(x_{h+1})`` over on-policy samples."""
    if len(data) == 0:
        raise StructureError("empty dataset")
    p = _plan(target)
    h = data.h
    return float(np.mean(p.Q[h - 1][data.x, data.a] - data.r - p.V[h][data.x_next]))


def bellman_error_estimates(batch: TrajectoryBatch, target: Any) -> np.ndarray:
    """``[E_B-hat(M, M, h)]_{h=1..H}`` from one batch of on-policy trajectories."""
    p = _plan(target)
    H = batch.actions.shape[1]
    return np.array([
        bellman_error_estimate(MisfitSample.from_batch(batch, h, "policy"), p) for h in range(1, H + 1)
    ])


def describe_estimate(value: float, data: MisfitSample) -> dict[str, Any]:
    return {"value": float(value), "n": len(data), "mode": data.mode, **data.meta}


# --------------------------------------------------------------------------
# factored misfit


def check_same_structure(*models: FactoredMdp) -> None:
    first = models[0]
    for m in models:
        if not isinstance(m, FactoredMdp):
            raise StructureError("factored misfit needs FactoredMdp models")
        if (m.d, m.values, m.parents, m.horizon, m.num_actions) != (
            first.d, first.values, first.parents, first.horizon, first.num_actions
        ):
            raise StructureError("factored models differ in variables, values, parent sets, horizon or actions")


def factor_tv(true_model: FactoredMdp, target: FactoredMdp, h: int) -> list[np.ndarray]:
    """Per-factor TV tables ``chi_i[u, a] = sum_o |P*_i(o|u,a) - P'_i(o|u,a)|``."""
    check_same_structure(true_model, target)
    return [np.abs(target.cpts[h - 1][i] - true_model.cpts[h - 1][i]).sum(axis=-1) for i in range(true_model.d)]


def parent_marginals(true_model: FactoredMdp, roll_in: Any, h: int) -> list[np.ndarray]:
    """Law of ``x_h[pa_i]`` when ``pi_M`` runs in the true model, per factor."""
    d = occupancy(true_model, _plan(roll_in).policy, h)
    out = []
    for i in range(true_model.d):
        marg = np.zeros(true_model.num_values ** len(true_model.parents[i]))
        np.add.at(marg, true_model.parent_index(i), d)
        out.append(marg)
    return out


def factored_misfit_exact(roll_in: FactoredMdp, target: FactoredMdp, true_model: FactoredMdp, h: int) -> float:
    """``W_F``: expected sum of per-factor TV distances, ``x_h ~ pi_M`` in truth, ``a ~ U(A)``."""
    check_same_structure(roll_in, target, true_model)
    _check_level(true_model, h)
    marg = parent_marginals(true_model, roll_in, h)
    chi = factor_tv(true_model, target, h)
    K = true_model.num_actions
    return float(sum((marg[i][:, None] * chi[i]).sum() / K for i in range(true_model.d)))


def factored_residual_cells(data: MisfitSample, target: FactoredMdp) -> list[np.ndarray]:
    """Per-cell empirical residual ``(1/n) sum_n (P'_i(.|u_n, a_n) - delta_{x'_n[i]})``."""
    if data.mode != "uniform":
        raise StructureError("factored misfit needs data with uniformly drawn actions")
    if len(data) == 0:
        raise StructureError("empty dataset")
    h = data.h
    nxt = target.assignments[data.x_next]
    cells = []
    for i in range(target.d):
        u = target.parent_index(i, data.x)
        cpt = target.cpts[h - 1][i]
        c = np.zeros(cpt.shape)
        np.add.at(c, (u, data.a), cpt[u, data.a])
        np.add.at(c, (u, data.a, nxt[:, i]), -1.0)
        cells.append(c / len(data))
    return cells


def factored_misfit_estimate(data: MisfitSample, target: FactoredMdp, F: FactoredSum | None = None) -> float:
    """Empirical supremum over the factored sum class, no importance weights."""
    return cells_supremum(factored_residual_cells(data, target))


# --------------------------------------------------------------------------
# deviation widths and tensorization helpers


def bernstein_width(K: int, num_models: int, class_size: float, delta: float, n: int) -> float:
    """Uniform deviation width of the importance-weighted misfit estimator."""
    log_term = math.log(2 * num_models * class_size / delta)
    return math.sqrt(2 * K * log_term / n) + 2 * K * log_term / (3 * n)


def hoeffding_width(horizon: int, delta: float, n: int) -> float:
    """Deviation width of the per-level Bellman error estimate."""
    return math.sqrt(math.log(2 * horizon / delta) / (2 * n))


def product_tv(factors_p: Sequence[np.ndarray], factors_q: Sequence[np.ndarray]) -> float:
    """``sum_z |prod_i p_i(z_i) - prod_i q_i(z_i)|`` by enumerating the joint support."""
    total = 0.0
    for z in itertools.product(*(range(len(p)) for p in factors_p)):
        pz = reduce(lambda acc, iz: acc * factors_p[iz[0]][iz[1]], enumerate(z), 1.0)
        qz = reduce(lambda acc, iz: acc * factors_q[iz[0]][iz[1]], enumerate(z), 1.0)
        total += abs(pz - qz)
    return total

