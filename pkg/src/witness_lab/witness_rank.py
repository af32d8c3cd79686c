"""Pairwise misfit/Bellman matrices, numerical ranks and the factored factorization."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import CapacityError, InconsistencyError, StructureError
from .misfit import (
    bellman_error_exact,
    check_same_structure,
    factor_tv,
    factored_misfit_exact,
    parent_marginals,
    witnessed_misfit_exact,
)
from .test_functions import TestFunctionClass

DEFAULT_CLASS_CAP = 256
IDENTITY_TOL = 1e-9


@dataclass(frozen=True)
class PairwiseMatrix:
    """Rows index the roll-in model, columns the target model."""

    values: np.ndarray
    h: int
    kind: str
    model_ids: tuple[str, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["roll_in\\target", *self.model_ids])
        for mid, row in zip(self.model_ids, self.values):
            w.writerow([mid, *(repr(float(v)) for v in row)])
        return buf.getvalue()


def _ids(models: Sequence[Any]) -> tuple[str, ...]:
    return tuple(getattr(m, "name", "") or f"m{j}" for j, m in enumerate(models))


def build_matrix(
    models: Sequence[Any],
    true_model: Any,
    h: int,
    kind: str,
    F: TestFunctionClass | None = None,
    actions: str = "policy",
    cap: int = DEFAULT_CLASS_CAP,
) -> PairwiseMatrix:
    """Exact ``E_B``, ``W(F)`` or ``W_F`` for every ``(M, M')`` pair at level ``h``.

    ``kind`` is ``"bellman"``, ``"misfit"`` (needs ``F``; ``actions`` selects
    greedy or uniform action sampling) or ``"factored"``.
    """
    models = list(models)
    if not models:
        raise StructureError("empty model class")
    if len(models) > cap:
        raise CapacityError(f"model class of size {len(models)} exceeds the matrix cap {cap}")
    n = len(models)
    out = np.zeros((n, n))
    for i, M in enumerate(models):
        for j, Mp in enumerate(models):
            if kind == "bellman":
                out[i, j] = bellman_error_exact(M, Mp, true_model, h)
            elif kind == "misfit":
                if F is None:
                    raise StructureError("misfit matrix needs a test-function class")
                out[i, j] = witnessed_misfit_exact(M, Mp, true_model, h, F, actions)
            elif kind == "factored":
                out[i, j] = factored_misfit_exact(M, Mp, true_model, h)
            else:
                raise StructureError(f"unknown matrix kind {kind!r}")
    label = kind if kind != "misfit" else f"misfit({getattr(F, 'kind', '?')},{actions})"
    return PairwiseMatrix(out, h, label, _ids(models))


def numerical_rank(matrix: Any, tol: float = 1e-8) -> int:
    """Number of singular values above ``tol`` times the largest one."""
    A = np.asarray(getattr(matrix, "values", matrix), dtype=float)
    if A.size == 0:
        return 0
    s = np.linalg.svd(A, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


def svd_beta(matrix: Any, tol: float = 1e-8) -> float:
    """``max ||u_M|| ||v_M'||`` for the balanced SVD factorization truncated at the numerical rank."""
    A = np.asarray(getattr(matrix, "values", matrix), dtype=float)
    k = numerical_rank(A, tol)
    if k == 0:
        return 0.0
    U, s, Vt = np.linalg.svd(A)
    left = U[:, :k] * np.sqrt(s[:k])
    right = Vt[:k].T * np.sqrt(s[:k])
    return float(np.linalg.norm(left, axis=1).max() * np.linalg.norm(right, axis=1).max())


@dataclass(frozen=True)
class Factorization:
    """``zeta[M]`` and ``chi[M']`` with ``<zeta[M], chi[M']> = W_F(M, M', h)``.

    Coordinates are ordered by factor ``i``, then action ``a``, then parent assignment ``u``.
    """

    zeta: np.ndarray
    chi: np.ndarray
    index: tuple[tuple[int, int, int], ...]
    h: int

    @property
    def dim(self) -> int:
        return self.zeta.shape[1]

    @property
    def beta(self) -> float:
        return float(np.linalg.norm(self.zeta, axis=1).max() * np.linalg.norm(self.chi, axis=1).max())

    def matrix(self) -> np.ndarray:
        return self.zeta @ self.chi.T


def factored_factorization(models: Sequence[Any], true_model: Any, h: int) -> Factorization:
    """Build ``zeta``/``chi`` and assert they reproduce the exact ``W_F`` matrix within 1e-9."""
    models = list(models)
    check_same_structure(true_model, *models)
    K = true_model.num_actions
    index = tuple(
        (i, a, u)
        for i in range(true_model.d)
        for a in range(K)
        for u in range(true_model.num_values ** len(true_model.parents[i]))
    )
    zeta = np.zeros((len(models), len(index)))
    chi = np.zeros((len(models), len(index)))
    for j, M in enumerate(models):
        marg = parent_marginals(true_model, M, h)
        tv = factor_tv(true_model, M, h)
        zeta[j] = np.concatenate([np.tile(marg[i] / K, K) for i in range(true_model.d)])
        chi[j] = np.concatenate([tv[i].T.reshape(-1) for i in range(true_model.d)])
    fac = Factorization(zeta, chi, index, h)
    exact = np.array([[factored_misfit_exact(M, Mp, true_model, h) for Mp in models] for M in models])
    gap = float(np.abs(fac.matrix() - exact).max()) if exact.size else 0.0
    if gap > IDENTITY_TOL:
        raise InconsistencyError(f"factorization misses the factored misfit matrix by {gap:.3g} at level {h}")
    return fac


def sandwich_check(A: Any, kappa: float, bellman: Any, misfit: Any, tol: float = 1e-9) -> bool:
    """``kappa * E_B <= A <= W`` entrywise within ``tol``."""
    if not 0 < kappa <= 1:
        raise StructureError(f"kappa must lie in (0, 1], got {kappa}")
    A, B, W = (np.asarray(getattr(m, "values", m), dtype=float) for m in (A, bellman, misfit))
    if not (A.shape == B.shape == W.shape):
        raise StructureError(f"matrix shapes differ: {A.shape}, {B.shape}, {W.shape}")
    return bool(np.all(kappa * B <= A + tol) and np.all(A <= W + tol))


def round_bound(horizon: int, rank: int, beta: float, phi: float) -> float:
    """``H * rank * log(beta / 2 phi) / log(5/3)``, floored at 0 when ``beta <= 2 phi``."""
    if rank == 0 or beta <= 2 * phi:
        return 0.0
    return horizon * rank * math.log(beta / (2 * phi)) / math.log(5 / 3)


def rank_report(
    models: Sequence[Any],
    true_model: Any,
    F: TestFunctionClass,
    kappa: float = 1.0,
    tol: float = 1e-8,
) -> dict[str, Any]:
    """Per-level certificates: ranks of ``kappa * E_B`` and ``W`` and a sandwich check of ``W`` itself."""
    levels = []
    for h in range(1, true_model.horizon + 1):
        B = build_matrix(models, true_model, h, "bellman")
        W = build_matrix(models, true_model, h, "misfit", F)
        levels.append({
            "h": h,
            "bellman_rank": numerical_rank(kappa * B.values, tol),
            "misfit_rank": numerical_rank(W, tol),
            "misfit_beta": svd_beta(W, tol),
            "misfit_sandwiched": sandwich_check(W, kappa, B, W),
            "bellman_sandwiched": sandwich_check(kappa * B.values, kappa, B, W),
        })
    return {"tolerance": tol, "kappa": kappa, "num_models": len(models), "levels": levels}
