"""Benchmark constructions: the bandit tree, the factored separation family and its twin.

Action-history contexts are indexed in base ``K`` with the first action most
significant. In the separation family, action index 0 means ``-1`` and index
1 means ``+1``; variables take values ``(-1, 0, 1, 2)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .cdp import DEFAULT_EXPANSION_CAP, FactoredMdp, TabularCdp, expand, plan
from .errors import CapacityError, StructureError

DEFAULT_FAMILY_CAP = 4096
SEPARATION_VALUES = (-1, 0, 1, 2)
SEPARATION_ACTIONS = (-1, 1)


# --------------------------------------------------------------------------
# bandit tree


def history_index(actions: Sequence[int], num_actions: int) -> int:
    idx = 0
    for a in actions:
        idx = idx * num_actions + int(a)
    return idx


def build_mab_tree_family(
    H: int, K: int, eps: float, true_arm: int | None = None, cap: int = DEFAULT_FAMILY_CAP
) -> tuple[list[TabularCdp], int]:
    """``K^(H-1)`` models, one per arm (action sequence of length ``H - 1``).

    Level ``h < H`` contexts are action histories; level ``H`` has two contexts,
    the paying one (index 0) and the other (index 1). Pulling the planted arm
    reaches the paying context with probability ``0.5 + eps``, every other arm
    with probability ``0.5``. The true model defaults to the last arm.
    """
    if H < 2 or K < 2:
        raise StructureError(f"bandit tree needs H >= 2 and K >= 2, got H={H}, K={K}")
    if not 0 <= eps < np.sqrt(1 / 8):
        raise StructureError(f"gap must lie in [0, sqrt(1/8)), got {eps}")
    num_arms = K ** (H - 1)
    if num_arms > cap:
        raise CapacityError(f"K^(H-1) = {num_arms} models exceed the family cap {cap}")
    sizes = [K ** (h - 1) for h in range(1, H)] + [2, 1]
    shared = []
    for h in range(1, H - 1):
        t = np.zeros((sizes[h - 1], K, sizes[h]))
        for x in range(sizes[h - 1]):
            for a in range(K):
                t[x, a, x * K + a] = 1.0
        shared.append(t)
    final = np.zeros((2, K, 1))
    final[:, :, 0] = 1.0
    rewards = [np.tile([1.0, 0.0], (sizes[h - 1], K, 1)) for h in range(1, H)]
    pay = np.zeros((2, K, 2))
    pay[0, :, 1] = 1.0
    pay[1, :, 0] = 1.0
    rewards.append(pay)
    models = []
    for arm in range(num_arms):
        last = np.zeros((sizes[H - 2], K, 2))
        last[:, :, 0] = 0.5
        last[:, :, 1] = 0.5
        x, a = divmod(arm, K)
        last[x, a] = (0.5 + eps, 0.5 - eps)
        models.append(TabularCdp(
            horizon=H, num_actions=K, initial=np.ones(1),
            transitions=tuple(shared) + (last, final),
            reward_values=np.array([0.0, 1.0]), rewards=tuple(rewards), name=f"arm{arm}",
        ))
    true_idx = num_arms - 1 if true_arm is None else int(true_arm)
    if not 0 <= true_idx < num_arms:
        raise StructureError(f"true arm {true_idx} outside 0..{num_arms - 1}")
    return models, true_idx


# --------------------------------------------------------------------------
# factored separation family


def all_paths(d: int) -> list[tuple[int, ...]]:
    """Every path in ``{-1, 1}^d``, lexicographic in action index."""
    return [tuple(SEPARATION_ACTIONS[b] for b in bits) for bits in itertools.product((0, 1), repeat=d)]


def _separation_reward(n_states: int, H: int, level_h_reward: np.ndarray):
    rewards = []
    for h in range(1, H + 1):
        r = np.zeros((n_states, 2, 2))
        pay = level_h_reward if h == H else np.zeros(n_states)
        r[:, :, 1] = pay[:, None]
        r[:, :, 0] = 1.0 - pay[:, None]
        rewards.append(r)
    return np.array([0.0, 1.0]), tuple(rewards)


def _copy_cpt(o: int, K: int) -> np.ndarray:
    c = np.zeros((o, K, o))
    for v in range(o):
        c[v, :, v] = 1.0
    return c


def separation_model(
    p: Sequence[int], reward_fn: Callable[[np.ndarray], np.ndarray] | None = None, name: str = "",
    cap: int = DEFAULT_EXPANSION_CAP,
) -> FactoredMdp:
    """The factored model ``P^p`` with planted path ``p`` in ``{-1, 1}^d``."""
    d = len(p)
    if d < 1:
        raise StructureError("separation family needs d >= 1")
    if any(v not in SEPARATION_ACTIONS for v in p):
        raise StructureError(f"path entries must be -1 or 1, got {tuple(p)}")
    o, K, H = len(SEPARATION_VALUES), 2, d + 2
    if o**d > cap:
        raise CapacityError(f"|O|^d = {o}^{d} = {o ** d} exceeds the expansion cap {cap}")
    vi = {v: i for i, v in enumerate(SEPARATION_VALUES)}
    cpts = []
    for h in range(1, H + 1):
        level = []
        for i in range(d):
            if h <= d and i == h - 1:
                c = np.zeros((o, K, o))
                for a, act in enumerate(SEPARATION_ACTIONS):
                    c[:, a, vi[act]] = 1.0
            elif h == H - 1:
                c = np.zeros((o, K, o))
                for v in range(o):
                    c[v, :, v if SEPARATION_VALUES[v] == p[i] else vi[2]] = 1.0
            else:
                c = _copy_cpt(o, K)
            level.append(c)
        cpts.append(tuple(level))
    n = o**d
    assign_values = np.array(SEPARATION_VALUES)[np.array(list(itertools.product(range(o), repeat=d))).reshape(n, d)]
    pay = (reward_fn or default_separation_reward)(assign_values)
    initial = np.zeros(n)
    initial[sum(vi[0] * o ** (d - 1 - i) for i in range(d))] = 1.0
    rv, rewards = _separation_reward(n, H, pay.astype(float))
    return FactoredMdp(
        d=d, values=SEPARATION_VALUES, horizon=H, num_actions=K, parents=tuple((i,) for i in range(d)),
        cpts=tuple(cpts), initial=initial, reward_values=rv, rewards=rewards,
        name=name or "P" + "".join("+" if v > 0 else "-" for v in p), expansion_cap=cap,
    )


def default_separation_reward(values: np.ndarray) -> np.ndarray:
    """``prod_i 1{x_i != 2}`` on value labels of shape ``(n, d)``."""
    return np.all(values != 2, axis=1).astype(float)


def build_separation_family(d: int, cap: int = DEFAULT_EXPANSION_CAP) -> list[FactoredMdp]:
    """All ``2^d`` models ``P^p``, ordered as :func:`all_paths`."""
    return [separation_model(p, cap=cap) for p in all_paths(d)]


def build_tilde_family(d: int, cap: int = DEFAULT_EXPANSION_CAP) -> list[TabularCdp]:
    """The unfactored twins: any history other than ``p`` jumps to the all-2 context at level ``H``."""
    out = []
    for p in all_paths(d):
        base = separation_model(p, cap=cap)
        tab = expand(base, cap)
        H = base.horizon
        target = base.encode(p)
        all_two = base.encode((2,) * d)
        last = np.zeros_like(tab.transitions[H - 2])
        last[:, :, all_two] = 1.0
        last[target, :, all_two] = 0.0
        last[target, :, target] = 1.0
        trans = tab.transitions[: H - 2] + (last,) + tab.transitions[H - 1:]
        out.append(TabularCdp(H, tab.num_actions, tab.initial, trans, tab.reward_values, tab.rewards,
                              name="~" + base.name))
    return out


def path_states(model: Any, actions: Sequence[int]) -> list[int]:
    """Contexts ``x_1..x_H`` visited by a fixed action-index sequence in a deterministic model.

    Levels past the sequence play action index 1.
    """
    H = model.horizon
    x = int(np.argmax(model.initial))
    states = [x]
    for h in range(1, H):
        a = actions[h - 1] if h - 1 < len(actions) else 1
        row = _rows(model, h, np.array([x]))[0, a]
        if not np.isclose(row.max(), 1.0):
            raise StructureError(f"level {h} transition from context {x} is not deterministic")
        x = int(np.argmax(row))
        states.append(x)
    return states


def path_reward(model: Any, actions: Sequence[int]) -> float:
    """Expected return of an open-loop action-index sequence."""
    H = model.horizon
    d = model.initial.copy()
    total = 0.0
    for h in range(1, H + 1):
        a = actions[h - 1] if h - 1 < len(actions) else 1
        total += float(d @ model.mean_reward(h)[:, a])
        live = np.flatnonzero(d)
        d = d[live] @ _rows(model, h, live)[:, a, :]
    return total


def _rows(model: Any, h: int, states: np.ndarray) -> np.ndarray:
    if hasattr(model, "transition_rows"):
        return model.transition_rows(h, states)
    return model.transition(h)[states]


def action_indices(path: Sequence[int]) -> list[int]:
    return [SEPARATION_ACTIONS.index(v) for v in path]


# --------------------------------------------------------------------------
# G-profiles


@dataclass(frozen=True)
class GFunction:
    """A tabulated state-action function, ``tables[h-1]`` of shape ``(n_h, K)``."""

    tables: tuple[np.ndarray, ...]
    label: str = ""

    def __call__(self, h: int, x: int) -> np.ndarray:
        return self.tables[h - 1][x]


def op_functions(models: Sequence[Any], include_policies: bool = True) -> list[GFunction]:
    """``OP(M)`` as a function list: every Q table, then every greedy policy table."""
    plans = [plan(m) for m in models]
    G = [GFunction(tuple(p.Q), f"Q[{m.name or j}]") for j, (m, p) in enumerate(zip(models, plans))]
    if include_policies:
        G += [GFunction(tuple(p.policy.probs), f"pi[{m.name or j}]") for j, (m, p) in enumerate(zip(models, plans))]
    return G


def g_profile(G: Sequence[GFunction], h: int, x: int) -> np.ndarray:
    """``[g(x, a)]_{g, a}``: the ``|G| x K`` view of context ``x`` at level ``h``."""
    rows = []
    for g in G:
        if not 1 <= h <= len(g.tables) or not 0 <= x < g.tables[h - 1].shape[0]:
            raise StructureError(f"context ({h}, {x}) outside the domain of {g.label or 'g'}")
        rows.append(g(h, x))
    return np.array(rows)


def profile_trace(model: Any, G: Sequence[GFunction], actions: Sequence[int]) -> list[np.ndarray]:
    """Profiles seen along an action sequence."""
    return [g_profile(G, h, x) for h, x in enumerate(path_states(model, actions), start=1)]


def profile_equivalence_check(
    d: int,
    family: Sequence[Any] | None = None,
    tilde: Sequence[Any] | None = None,
    report: list | None = None,
) -> bool:
    """Whether ``P^p`` and ``P~^p`` show identical profiles and rewards along every action sequence.

    Profiles use ``OP`` of each family, aligned by planted path. Pass
    ``family``/``tilde`` to check perturbed variants; ``report`` collects
    per-path differences.
    """
    family = build_separation_family(d) if family is None else list(family)
    tilde = build_tilde_family(d) if tilde is None else list(tilde)
    G = op_functions(family)
    G_tilde = op_functions(tilde)
    ok = True
    for p, m, mt in zip(all_paths(d), family, tilde):
        for seq in all_paths(d):
            acts = action_indices(seq)
            same_reward = np.isclose(path_reward(m, acts), path_reward(mt, acts))
            tr, tr_t = profile_trace(m, G, acts), profile_trace(mt, G_tilde, acts)
            diff_levels = [h for h, (u, v) in enumerate(zip(tr, tr_t), start=1) if not np.allclose(u, v)]
            if diff_levels or not same_reward:
                ok = False
                if report is not None:
                    report.append({"planted": list(p), "actions": list(seq), "levels": diff_levels,
                                   "reward_differs": bool(not same_reward)})
    return ok


# --------------------------------------------------------------------------
# overparameterization


def build_overparam_class(d: int) -> tuple[list[FactoredMdp], list[tuple[int, int] | None]]:
    """Each transition paired with the true reward and with every ``1{x_i != j}``, ``j`` in ``{-1, 1, 2}``.

    Returns the models and, per model, ``(i, j)`` of its reward variant (``None`` for the true reward).
    """
    models, tags = [], []
    variants: list[tuple[int, int] | None] = [None] + [(i, j) for i in range(d) for j in (-1, 1, 2)]
    for p in all_paths(d):
        for var in variants:
            if var is None:
                fn = None
                suffix = ""
            else:
                i, j = var
                fn = (lambda vals, i=i, j=j: (vals[:, i] != j).astype(float))
                suffix = f"|R{i}{j:+d}"
            base = separation_model(p, reward_fn=fn)
            models.append(FactoredMdp(
                d=base.d, values=base.values, horizon=base.horizon, num_actions=base.num_actions,
                parents=base.parents, cpts=base.cpts, initial=base.initial,
                reward_values=base.reward_values, rewards=base.rewards, name=base.name + suffix,
            ))
            tags.append(var)
    return models, tags


def decode_level_h_state(profile: np.ndarray, tags: Sequence[tuple[int, int] | None], d: int) -> tuple[int, ...]:
    """Recover variable values from the Q part of a level-``H`` profile over the overparameterized class.

    For variable ``i`` exactly one indicator ``1{x_i != j}`` is 0 when
    ``x_i`` is in ``{-1, 1, 2}``; if none is 0, ``x_i = 0``.
    """
    q_rows = profile[: len(tags), 0]
    out = []
    for i in range(d):
        zeros = sorted({j for t, v in zip(tags, q_rows) if t is not None and t[0] == i for j in [t[1]] if v == 0})
        if len(zeros) > 1:
            raise StructureError(f"variable {i}: indicators {zeros} all vanish")
        out.append(zeros[0] if zeros else 0)
    return tuple(out)


def overparam_recovery(d: int) -> tuple[int, int]:
    """``(recovered, total)`` level-``H`` contexts whose assignment is decoded exactly from profiles."""
    models, tags = build_overparam_class(d)
    G = op_functions(models, include_policies=False)
    ref = models[0]
    H = ref.horizon
    ok = 0
    for x in range(ref.num_states):
        if decode_level_h_state(g_profile(G, H, x), tags, d) == ref.decode(x):
            ok += 1
    return ok, ref.num_states


# --------------------------------------------------------------------------
# profile-restricted learner


@dataclass(frozen=True)
class LearnerResult:
    path: tuple[int, ...] | None
    trajectories: int
    found: bool
    budget_exhausted: bool


def profile_restricted_learner(
    family: Sequence[Any],
    true_index: int,
    G: Sequence[GFunction] | None,
    budget: int,
    rng: np.random.Generator,
) -> LearnerResult:
    """Uniform best-arm search that sees contexts only through ``G``-profiles.

    Each trajectory follows one untried path, chosen uniformly at random, and
    the learner observes the profile at every level plus the rewards. In the
    separation family every pre-terminal profile is the same under all planted
    paths, so the only usable signal is the final reward; the search stops at
    the first paying trajectory.
    """
    true_model = family[true_index]
    d = true_model.horizon - 2
    G = op_functions(family) if G is None else list(G)
    candidates = all_paths(d)
    used = 0
    for k in rng.permutation(len(candidates)):
        if used >= budget:
            return LearnerResult(None, used, False, True)
        seq = candidates[k]
        acts = action_indices(seq)
        profile_trace(true_model, G, acts)  # the learner's observation stream
        used += 1
        if path_reward(true_model, acts) > 0.5:
            return LearnerResult(tuple(seq), used, True, False)
    return LearnerResult(None, used, False, False)
