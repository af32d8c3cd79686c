"""Finite layered decision processes: representation, planning, evaluation, sampling.

Levels are numbered ``1..H`` in every public function; level ``H + 1`` holds
the terminal contexts. Array storage is zero-based, so the transition kernel
of level ``h`` lives at ``transitions[h - 1]``.

Two model types share one duck-typed surface (``horizon``, ``num_actions``,
``level_sizes``, ``initial``, ``reward_values``, ``transition(h)``,
``reward_probs(h)``, ``sample_step``): :class:`TabularCdp` stores its kernels,
:class:`FactoredMdp` computes them from conditional probability tables.
"""

from __future__ import annotations

import itertools
import weakref
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import CapacityError, ModelValidationError, StructureError

TOL = 1e-12
DEFAULT_EXPANSION_CAP = 10**6


def _as_prob_array(a: Any) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=float))


@dataclass(frozen=True, eq=False)
class TabularCdp:
    """A finite-horizon layered CDP with discrete rewards.

    Attributes
    ----------
    horizon:
        Number of decision levels ``H``.
    num_actions:
        Action count ``K``.
    initial:
        Distribution over level-1 contexts.
    transitions:
        ``H`` arrays, the ``h``-th of shape ``(n_h, K, n_{h+1})``.
    reward_values:
        Sorted support of the reward distributions, values in ``[0, 1]``.
    rewards:
        ``H`` arrays of shape ``(n_h, K, m)``; probabilities over ``reward_values``.
    """

    horizon: int
    num_actions: int
    initial: np.ndarray
    transitions: tuple[np.ndarray, ...]
    reward_values: np.ndarray
    rewards: tuple[np.ndarray, ...]
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "initial", _as_prob_array(self.initial))
        object.__setattr__(self, "transitions", tuple(_as_prob_array(t) for t in self.transitions))
        object.__setattr__(self, "reward_values", np.asarray(self.reward_values, dtype=float))
        object.__setattr__(self, "rewards", tuple(_as_prob_array(r) for r in self.rewards))
        check_structure(self)

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return tuple(t.shape[0] for t in self.transitions) + (self.transitions[-1].shape[2],)

    def transition(self, h: int) -> np.ndarray:
        return self.transitions[h - 1]

    def reward_probs(self, h: int) -> np.ndarray:
        return self.rewards[h - 1]

    def mean_reward(self, h: int) -> np.ndarray:
        return self.rewards[h - 1] @ self.reward_values

    def sample_step(self, h: int, x: np.ndarray, a: np.ndarray, rng: np.random.Generator):
        """Draw ``(reward, next context)`` for a batch of ``(x, a)`` pairs."""
        r_idx = _categorical(self.rewards[h - 1][x, a], rng)
        x_next = _categorical(self.transitions[h - 1][x, a], rng)
        return self.reward_values[r_idx], x_next


def _categorical(rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling of one index per row."""
    u = rng.random(rows.shape[0])
    cdf = np.cumsum(rows, axis=1)
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, rows.shape[1] - 1)


def check_structure(model: Any) -> None:
    """Dimension checks shared by both model types (no normalization checks)."""
    H, K = model.horizon, model.num_actions
    if H < 1 or K < 1:
        raise StructureError(f"horizon and action count must be positive, got H={H}, K={K}")
    sizes = model.level_sizes
    if len(sizes) != H + 1:
        raise StructureError(f"expected {H + 1} level sizes, got {len(sizes)}")
    if model.initial.shape != (sizes[0],):
        raise StructureError(f"initial distribution has shape {model.initial.shape}, level 1 has {sizes[0]} contexts")
    if isinstance(model, TabularCdp):
        if len(model.transitions) != H or len(model.rewards) != H:
            raise StructureError("need one transition and one reward array per level")
        m = model.reward_values.shape[0]
        for h in range(1, H + 1):
            t = model.transitions[h - 1]
            if t.ndim != 3 or t.shape[1] != K:
                raise StructureError(f"level {h}: transition array shape {t.shape} is not (n_h, {K}, n_next)")
            if h < H and t.shape[2] != model.transitions[h].shape[0]:
                raise StructureError(
                    f"level {h} maps into {t.shape[2]} contexts but level {h + 1} has {model.transitions[h].shape[0]}"
                )
            if model.rewards[h - 1].shape != (t.shape[0], K, m):
                raise StructureError(f"level {h}: reward array shape {model.rewards[h - 1].shape} != {(t.shape[0], K, m)}")


# --------------------------------------------------------------------------
# factored models


@dataclass(frozen=True, eq=False)
class FactoredMdp:
    """Factored transition model over ``d`` variables taking ``|O|`` values.

    A context is an assignment in ``O^d`` encoded in mixed radix with the
    first variable most significant. ``cpts[h-1][i]`` has shape
    ``(|O|^{|pa_i|}, K, |O|)``; the parent assignment index uses the order of
    ``parents[i]``, first parent most significant. The reward is a table over
    expanded contexts, shared across a model class.
    """

    d: int
    values: tuple[Any, ...]
    horizon: int
    num_actions: int
    parents: tuple[tuple[int, ...], ...]
    cpts: tuple[tuple[np.ndarray, ...], ...]
    initial: np.ndarray
    reward_values: np.ndarray
    rewards: tuple[np.ndarray, ...]
    name: str = ""
    expansion_cap: int = DEFAULT_EXPANSION_CAP
    _assign: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n_states = len(self.values) ** self.d
        if n_states > self.expansion_cap:
            raise CapacityError(f"|O|^d = {len(self.values)}^{self.d} = {n_states} exceeds the expansion cap {self.expansion_cap}")
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "parents", tuple(tuple(int(p) for p in pa) for pa in self.parents))
        object.__setattr__(self, "cpts", tuple(tuple(_as_prob_array(c) for c in level) for level in self.cpts))
        object.__setattr__(self, "initial", _as_prob_array(self.initial))
        object.__setattr__(self, "reward_values", np.asarray(self.reward_values, dtype=float))
        object.__setattr__(self, "rewards", tuple(_as_prob_array(r) for r in self.rewards))
        o = len(self.values)
        assign = np.array(list(itertools.product(range(o), repeat=self.d)), dtype=np.int64).reshape(n_states, self.d)
        object.__setattr__(self, "_assign", assign)
        if len(self.parents) != self.d:
            raise StructureError(f"need {self.d} parent sets, got {len(self.parents)}")
        for i, pa in enumerate(self.parents):
            if any(p < 0 or p >= self.d for p in pa) or len(set(pa)) != len(pa):
                raise StructureError(f"parent set of variable {i} is not a subset of [d]: {pa}")
        if len(self.cpts) != self.horizon:
            raise StructureError(f"need CPTs for {self.horizon} levels, got {len(self.cpts)}")
        for h, level in enumerate(self.cpts, start=1):
            if len(level) != self.d:
                raise StructureError(f"level {h}: need {self.d} CPTs, got {len(level)}")
            for i, c in enumerate(level):
                want = (o ** len(self.parents[i]), self.num_actions, o)
                if c.shape != want:
                    raise StructureError(f"level {h}, variable {i}: CPT shape {c.shape} != {want}")
        for h, r in enumerate(self.rewards, start=1):
            if r.shape != (n_states, self.num_actions, self.reward_values.shape[0]):
                raise StructureError(f"level {h}: reward table shape {r.shape} does not match expanded states")
        if len(self.rewards) != self.horizon:
            raise StructureError("need one reward table per level")
        check_structure(self)

    @property
    def num_values(self) -> int:
        return len(self.values)

    @property
    def num_states(self) -> int:
        return self.num_values**self.d

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return (self.num_states,) * (self.horizon + 1)

    @property
    def assignments(self) -> np.ndarray:
        """``(n, d)`` value indices of every expanded context."""
        return self._assign

    def parent_index(self, i: int, states: np.ndarray | None = None) -> np.ndarray:
        """Parent-assignment index ``u`` of variable ``i`` for each context."""
        assign = self._assign if states is None else self._assign[states]
        u = np.zeros(assign.shape[0], dtype=np.int64)
        for p in self.parents[i]:
            u = u * self.num_values + assign[:, p]
        return u

    def state_index(self, assignment: Sequence[int]) -> int:
        idx = 0
        for v in assignment:
            idx = idx * self.num_values + int(v)
        return idx

    def encode(self, labels: Sequence[Any]) -> int:
        """Context index of an assignment given by value labels."""
        return self.state_index([self.values.index(v) for v in labels])

    def decode(self, x: int) -> tuple[Any, ...]:
        return tuple(self.values[v] for v in self._assign[x])

    @property
    def num_parameters(self) -> int:
        """``L = sum_i H K |O|^{1 + |pa_i|}``."""
        return sum(self.horizon * self.num_actions * self.num_values ** (1 + len(pa)) for pa in self.parents)

    @property
    def level_parameters(self) -> int:
        """``L_h = sum_i K |O|^{1 + |pa_i|}``."""
        return sum(self.num_actions * self.num_values ** (1 + len(pa)) for pa in self.parents)

    def factor_rows(self, h: int, i: int, states: np.ndarray | None = None) -> np.ndarray:
        """CPT rows of variable ``i`` at level ``h``: shape ``(n, K, |O|)``."""
        return self.cpts[h - 1][i][self.parent_index(i, states)]

    def transition(self, h: int) -> np.ndarray:
        """Expanded kernel ``(n, K, n)`` as the product of factor rows."""
        return self.transition_rows(h)

    def transition_rows(self, h: int, states: np.ndarray | None = None) -> np.ndarray:
        """Kernel rows for the given contexts only, shape ``(len(states), K, n)``."""
        joint = self.factor_rows(h, 0, states)
        n = joint.shape[0]
        for i in range(1, self.d):
            rows = self.factor_rows(h, i, states)
            joint = (joint[:, :, :, None] * rows[:, :, None, :]).reshape(n, self.num_actions, -1)
        return joint

    def reward_probs(self, h: int) -> np.ndarray:
        return self.rewards[h - 1]

    def mean_reward(self, h: int) -> np.ndarray:
        return self.rewards[h - 1] @ self.reward_values

    def sample_step(self, h: int, x: np.ndarray, a: np.ndarray, rng: np.random.Generator):
        r_idx = _categorical(self.rewards[h - 1][x, a], rng)
        nxt = np.zeros(x.shape[0], dtype=np.int64)
        for i in range(self.d):
            rows = self.cpts[h - 1][i][self.parent_index(i, x), a]
            nxt = nxt * self.num_values + _categorical(rows, rng)
        return self.reward_values[r_idx], nxt

    def with_reward(self, reward_values: np.ndarray, rewards: Sequence[np.ndarray], name: str = "") -> "FactoredMdp":
        return FactoredMdp(
            d=self.d, values=self.values, horizon=self.horizon, num_actions=self.num_actions,
            parents=self.parents, cpts=self.cpts, initial=self.initial,
            reward_values=reward_values, rewards=tuple(rewards), name=name or self.name,
            expansion_cap=self.expansion_cap,
        )


def expand(fmdp: FactoredMdp, cap: int = DEFAULT_EXPANSION_CAP) -> TabularCdp:
    """Materialize a factored model as a :class:`TabularCdp` over ``O^d`` contexts."""
    if fmdp.num_states > cap:
        raise CapacityError(f"|O|^d = {fmdp.num_values}^{fmdp.d} = {fmdp.num_states} exceeds the expansion cap {cap}")
    return TabularCdp(
        horizon=fmdp.horizon,
        num_actions=fmdp.num_actions,
        initial=fmdp.initial,
        transitions=tuple(fmdp.transition(h) for h in range(1, fmdp.horizon + 1)),
        reward_values=fmdp.reward_values,
        rewards=fmdp.rewards,
        name=fmdp.name,
    )


# --------------------------------------------------------------------------
# policies and planning


@dataclass(frozen=True, eq=False)
class Policy:
    """Per-level action distributions, ``probs[h-1]`` of shape ``(n_h, K)``."""

    probs: tuple[np.ndarray, ...]

    @classmethod
    def deterministic(cls, actions: Sequence[np.ndarray], num_actions: int) -> "Policy":
        probs = []
        for acts in actions:
            acts = np.asarray(acts, dtype=np.int64)
            p = np.zeros((acts.shape[0], num_actions))
            p[np.arange(acts.shape[0]), acts] = 1.0
            probs.append(p)
        return cls(tuple(probs))

    @classmethod
    def uniform(cls, model: Any) -> "Policy":
        K = model.num_actions
        return cls(tuple(np.full((n, K), 1.0 / K) for n in model.level_sizes[:-1]))

    @property
    def horizon(self) -> int:
        return len(self.probs)

    def at(self, h: int) -> np.ndarray:
        return self.probs[h - 1]

    def is_deterministic(self) -> bool:
        return all(np.all((p == 0) | (p == 1)) for p in self.probs)

    def greedy_actions(self, h: int) -> np.ndarray:
        return np.argmax(self.probs[h - 1], axis=1)

    def validate_for(self, model: Any) -> None:
        if self.horizon != model.horizon:
            raise StructureError(f"policy covers {self.horizon} levels, model has {model.horizon}")
        for h, p in enumerate(self.probs, start=1):
            want = (model.level_sizes[h - 1], model.num_actions)
            if p.shape != want:
                raise StructureError(f"policy level {h} has shape {p.shape}, model needs {want}")
            if np.any(np.abs(p.sum(axis=1) - 1) > 1e-9) or np.any(p < 0):
                raise StructureError(f"policy level {h} rows are not distributions")


@dataclass(frozen=True, eq=False)
class PlanResult:
    """Optimal ``Q``, ``V``, greedy policy and value of a model, computed inside that model.

    ``V`` has ``H + 1`` entries; ``V[H]`` (level ``H + 1``) is zero.
    """

    Q: tuple[np.ndarray, ...]
    V: tuple[np.ndarray, ...]
    actions: tuple[np.ndarray, ...]
    value: float

    @property
    def policy(self) -> Policy:
        K = self.Q[0].shape[1]
        return Policy.deterministic(self.actions, K)

    def q(self, h: int) -> np.ndarray:
        return self.Q[h - 1]

    def v(self, h: int) -> np.ndarray:
        return self.V[h - 1]


_PLAN_CACHE: "weakref.WeakKeyDictionary[Any, PlanResult]" = weakref.WeakKeyDictionary()


def plan(model: Any) -> PlanResult:
    """Exact backward induction; ties go to the lowest action index.

    Results are cached per model object (models are immutable).
    """
    cached = _PLAN_CACHE.get(model)
    if cached is not None:
        return cached
    H = model.horizon
    V: list[np.ndarray] = [np.zeros(model.level_sizes[H])]
    Q: list[np.ndarray] = []
    acts: list[np.ndarray] = []
    for h in range(H, 0, -1):
        q = model.mean_reward(h) + model.transition(h) @ V[0]
        a = np.argmax(q, axis=1)
        Q.insert(0, q)
        acts.insert(0, a)
        V.insert(0, q[np.arange(q.shape[0]), a])
    result = PlanResult(tuple(Q), tuple(V), tuple(acts), float(model.initial @ V[0]))
    _PLAN_CACHE[model] = result
    return result


def occupancies(true_model: Any, pi: Policy, upto: int | None = None) -> list[np.ndarray]:
    """Context marginals ``d_1..d_upto`` of ``pi`` executed in ``true_model``."""
    pi.validate_for(true_model)
    upto = true_model.horizon if upto is None else upto
    d = [true_model.initial.copy()]
    for h in range(1, upto):
        P = true_model.transition(h)
        d.append(np.einsum("x,xa,xay->y", d[-1], pi.at(h), P))
    return d


def occupancy(true_model: Any, pi: Policy, h: int) -> np.ndarray:
    """Exact marginal of ``x_h`` when ``pi`` runs in ``true_model``."""
    if not 1 <= h <= true_model.horizon + 1:
        raise StructureError(f"level {h} outside 1..{true_model.horizon + 1}")
    if h == true_model.horizon + 1:
        d = occupancies(true_model, pi)[-1]
        P = true_model.transition(true_model.horizon)
        return np.einsum("x,xa,xay->y", d, pi.at(true_model.horizon), P)
    return occupancies(true_model, pi, upto=h)[h - 1]


def policy_value(true_model: Any, pi: Policy) -> float:
    """Exact ``v^pi`` by forward propagation of occupancies."""
    total = 0.0
    for h, d in enumerate(occupancies(true_model, pi), start=1):
        total += float(np.einsum("x,xa,xa->", d, pi.at(h), true_model.mean_reward(h)))
    return total


# --------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class Trajectory:
    """One episode: contexts ``x_1..x_{H+1}``, actions and rewards ``1..H``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    stream_id: tuple = ()

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())


@dataclass(frozen=True)
class TrajectoryBatch:
    """``n`` episodes stacked: ``states (n, H+1)``, ``actions (n, H)``, ``rewards (n, H)``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def transitions_at(self, h: int):
        """``(x_h, a_h, r_h, x_{h+1})`` arrays for level ``h``."""
        return self.states[:, h - 1], self.actions[:, h - 1], self.rewards[:, h - 1], self.states[:, h]


def sample_batch(
    true_model: Any,
    pi: Policy,
    n: int,
    rng: np.random.Generator,
    uniform_levels: Sequence[int] = (),
) -> TrajectoryBatch:
    """Sample ``n`` trajectories of ``pi``; levels in ``uniform_levels`` act uniformly at random."""
    H, K = true_model.horizon, true_model.num_actions
    states = np.zeros((n, H + 1), dtype=np.int64)
    actions = np.zeros((n, H), dtype=np.int64)
    rewards = np.zeros((n, H))
    states[:, 0] = _categorical(np.broadcast_to(true_model.initial, (n, true_model.initial.shape[0])), rng)
    for h in range(1, H + 1):
        x = states[:, h - 1]
        if h in uniform_levels:
            a = rng.integers(0, K, size=n)
        else:
            a = _categorical(pi.at(h)[x], rng)
        r, x_next = true_model.sample_step(h, x, a, rng)
        actions[:, h - 1] = a
        rewards[:, h - 1] = r
        states[:, h] = x_next
    return TrajectoryBatch(states, actions, rewards)


def sample_trajectory(true_model: Any, pi: Policy, rng: np.random.Generator, stream_id: tuple = ()) -> Trajectory:
    """Draw one trajectory; the same generator state yields the same trajectory."""
    pi.validate_for(true_model)
    b = sample_batch(true_model, pi, 1, rng)
    return Trajectory(b.states[0], b.actions[0], b.rewards[0], stream_id)


# --------------------------------------------------------------------------
# validation


def max_cumulative_reward(model: Any) -> tuple[float, int, int]:
    """Largest achievable ``sum_h r_h`` over reachable paths and reward supports.

    Returns the value together with the level-1 ``(x, a)`` that attains it.
    """
    H = model.horizon
    best_next = np.zeros(model.level_sizes[H])
    for h in range(H, 0, -1):
        R = model.reward_probs(h)
        rmax = np.where(R > 0, model.reward_values, -np.inf).max(axis=2)
        P = model.transition(h)
        cont = np.where(P > 0, best_next[None, None, :], -np.inf).max(axis=2)
        total = rmax + cont
        if h > 1:
            best_next = total.max(axis=1)
    reach = model.initial > 0
    masked = np.where(reach[:, None], total, -np.inf)
    x, a = np.unravel_index(int(np.argmax(masked)), masked.shape)
    return float(masked[x, a]), int(x), int(a)


def validate(model: Any) -> None:
    """Check every model invariant; raise :class:`ModelValidationError` listing all violations."""
    issues: list[dict[str, Any]] = []

    def rows(kind: str, arr: np.ndarray, h: int) -> None:
        bad_neg = np.argwhere((arr < 0).any(axis=-1))
        sums = arr.sum(axis=-1)
        bad_sum = np.argwhere(np.abs(sums - 1) > TOL)
        for x, a in bad_neg:
            issues.append({"kind": kind, "message": f"negative {kind} probability", "h": h, "x": int(x), "a": int(a)})
        for x, a in bad_sum:
            issues.append({
                "kind": kind, "message": f"{kind} row sums to {sums[x, a]:.12g}",
                "h": h, "x": int(x), "a": int(a),
            })

    if np.any(model.initial < 0) or abs(model.initial.sum() - 1) > TOL:
        issues.append({"kind": "initial", "message": f"initial distribution sums to {model.initial.sum():.12g}"})
    rv = model.reward_values
    if np.any(rv < 0) or np.any(rv > 1):
        issues.append({"kind": "reward_support", "message": f"reward support {rv.tolist()} leaves [0, 1]"})
    if isinstance(model, FactoredMdp):
        for h, level in enumerate(model.cpts, start=1):
            for i, c in enumerate(level):
                sums = c.sum(axis=-1)
                for u, a in np.argwhere((np.abs(sums - 1) > TOL) | (c < 0).any(axis=-1)):
                    issues.append({
                        "kind": "cpt", "message": f"CPT row of variable {i} (parents={int(u)}) sums to {sums[u, a]:.12g}",
                        "h": h, "variable": i, "x": int(u), "a": int(a),
                    })
    else:
        for h in range(1, model.horizon + 1):
            rows("transition", model.transition(h), h)
    for h in range(1, model.horizon + 1):
        rows("reward", model.reward_probs(h), h)
    if not issues:
        total, x, a = max_cumulative_reward(model)
        if total > 1 + TOL:
            issues.append({
                "kind": "cumulative_reward",
                "message": f"achievable cumulative reward {total:.12g} exceeds 1",
                "h": 1, "x": x, "a": a,
            })
    if issues:
        raise ModelValidationError(issues)


def align_rewards(models: Sequence[Any]) -> np.ndarray:
    """Union of the reward supports of ``models``."""
    return np.unique(np.concatenate([m.reward_values for m in models]))


def reward_probs_on(model: Any, h: int, support: np.ndarray) -> np.ndarray:
    """Re-express the level-``h`` reward law of ``model`` on a superset ``support``."""
    own = model.reward_values
    if own.shape == support.shape and np.array_equal(own, support):
        return model.reward_probs(h)
    pos = np.searchsorted(support, own)
    if np.any(pos >= support.shape[0]) or not np.allclose(support[np.minimum(pos, support.shape[0] - 1)], own):
        raise StructureError(f"reward support {own.tolist()} is not contained in {support.tolist()}")
    R = model.reward_probs(h)
    out = np.zeros(R.shape[:2] + (support.shape[0],))
    out[:, :, pos] = R
    return out


def conditional(model: Any, h: int, support: np.ndarray | None = None) -> np.ndarray:
    """Joint law of ``(r, x')`` per ``(x, a)``: shape ``(n_h, K, m, n_{h+1})``."""
    R = model.reward_probs(h) if support is None else reward_probs_on(model, h, support)
    return R[:, :, :, None] * model.transition(h)[:, :, None, :]


def same_shape(*models: Any) -> None:
    """Raise unless all models share horizon, actions and level sizes."""
    first = models[0]
    for m in models[1:]:
        if (m.horizon, m.num_actions, m.level_sizes) != (first.horizon, first.num_actions, first.level_sizes):
            raise StructureError("models do not share (X, A, H)")
