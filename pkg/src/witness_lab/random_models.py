"""Seeded generators for random tabular and factored instances."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .cdp import FactoredMdp, TabularCdp


def _simplex(rng: np.random.Generator, shape: tuple[int, ...], sparsity: float = 0.0) -> np.ndarray:
    """Random rows on the simplex; ``sparsity`` zeroes that fraction of entries (keeping one)."""
    w = rng.exponential(size=shape)
    if sparsity > 0:
        mask = rng.random(shape) < sparsity
        keep = rng.integers(0, shape[-1], size=shape[:-1])
        np.put_along_axis(mask, keep[..., None], False, axis=-1)
        w = np.where(mask, 0.0, w)
    return w / w.sum(axis=-1, keepdims=True)


def random_level_sizes(rng: np.random.Generator, horizon: int, max_states: int) -> tuple[int, ...]:
    return tuple(int(s) for s in rng.integers(1, max_states + 1, size=horizon + 1))


def random_tabular(
    rng: np.random.Generator,
    horizon: int,
    num_actions: int,
    level_sizes: Sequence[int],
    initial: np.ndarray | None = None,
    sparsity: float = 0.3,
    name: str = "",
) -> TabularCdp:
    """Random layered model with reward support ``{0, 1/H}`` so returns stay in ``[0, 1]``."""
    sizes = tuple(level_sizes)
    if initial is None:
        initial = _simplex(rng, (sizes[0],))
    transitions = tuple(
        _simplex(rng, (sizes[h], num_actions, sizes[h + 1]), sparsity) for h in range(horizon)
    )
    p_pay = rng.random(horizon)
    rewards = []
    for h in range(horizon):
        p = rng.random((sizes[h], num_actions)) * p_pay[h]
        rewards.append(np.stack([1 - p, p], axis=-1))
    return TabularCdp(
        horizon=horizon,
        num_actions=num_actions,
        initial=initial,
        transitions=transitions,
        reward_values=np.array([0.0, 1.0 / horizon]),
        rewards=tuple(rewards),
        name=name,
    )


def random_class(
    rng: np.random.Generator,
    size: int,
    horizon: int,
    num_actions: int,
    max_states: int,
    sparsity: float = 0.3,
) -> tuple[list[TabularCdp], int]:
    """``size`` random models sharing levels and initial distribution; returns the class and a true index."""
    sizes = random_level_sizes(rng, horizon, max_states)
    initial = _simplex(rng, (sizes[0],))
    models = [
        random_tabular(rng, horizon, num_actions, sizes, initial, sparsity, name=f"m{j}") for j in range(size)
    ]
    return models, int(rng.integers(0, size))


def random_factored(
    rng: np.random.Generator,
    d: int,
    num_values: int,
    horizon: int,
    num_actions: int,
    parents: Sequence[Sequence[int]] | None = None,
    max_parents: int = 2,
    initial: np.ndarray | None = None,
    reward: tuple[np.ndarray, tuple[np.ndarray, ...]] | None = None,
    sparsity: float = 0.3,
    name: str = "",
) -> FactoredMdp:
    """Random factored model; pass ``parents``/``initial``/``reward`` to share them across a class."""
    if parents is None:
        parents = []
        for i in range(d):
            k = int(rng.integers(1, min(max_parents, d) + 1))
            others = [j for j in range(d) if j != i]
            extra = list(rng.choice(others, size=k - 1, replace=False)) if k > 1 else []
            parents.append(tuple(sorted([i] + [int(e) for e in extra])))
    parents = tuple(tuple(p) for p in parents)
    n = num_values**d
    if initial is None:
        initial = _simplex(rng, (n,))
    if reward is None:
        reward = random_factored_reward(rng, n, horizon, num_actions)
    cpts = tuple(
        tuple(_simplex(rng, (num_values ** len(pa), num_actions, num_values), sparsity) for pa in parents)
        for _ in range(horizon)
    )
    return FactoredMdp(
        d=d, values=tuple(range(num_values)), horizon=horizon, num_actions=num_actions, parents=parents,
        cpts=cpts, initial=initial, reward_values=reward[0], rewards=reward[1], name=name,
    )


def random_factored_reward(rng: np.random.Generator, n: int, horizon: int, num_actions: int):
    p = rng.random((horizon, n, num_actions))
    rewards = tuple(np.stack([1 - p[h], p[h]], axis=-1) for h in range(horizon))
    return np.array([0.0, 1.0 / horizon]), rewards


def random_factored_class(
    rng: np.random.Generator,
    size: int,
    d: int,
    num_values: int,
    horizon: int,
    num_actions: int,
    max_parents: int = 2,
    sparsity: float = 0.3,
) -> tuple[list[FactoredMdp], int]:
    """Factored models sharing parents, initial law and reward; CPTs differ."""
    first = random_factored(rng, d, num_values, horizon, num_actions, max_parents=max_parents, sparsity=sparsity,
                            name="f0")
    models = [first]
    for j in range(1, size):
        models.append(random_factored(
            rng, d, num_values, horizon, num_actions, parents=first.parents, initial=first.initial,
            reward=(first.reward_values, first.rewards), sparsity=sparsity, name=f"f{j}",
        ))
    return models, int(rng.integers(0, size))
