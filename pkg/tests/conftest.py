import itertools

import numpy as np
import pytest

from witness_lab.cdp import TabularCdp
from witness_lab.random_models import random_class, random_tabular
from witness_lab.rng import stream


def tabular_suite(count, seed=0, max_h=5, max_states=10, max_k=3):
    """Random instances within the acceptance-suite bounds."""
    rng = stream(seed, "suite")
    out = []
    for _ in range(count):
        H = int(rng.integers(1, max_h + 1))
        K = int(rng.integers(1, max_k + 1))
        sizes = tuple(int(s) for s in rng.integers(1, max_states + 1, size=H + 1))
        out.append(random_tabular(rng, H, K, sizes))
    return out


def class_suite(count, size, seed=0, max_h=4, max_states=5, max_k=3):
    rng = stream(seed, "class-suite")
    out = []
    for _ in range(count):
        H = int(rng.integers(1, max_h + 1))
        K = int(rng.integers(2, max_k + 1))
        n = int(rng.integers(2, size + 1))
        out.append(random_class(rng, n, H, K, max_states))
    return out


def brute_force_optimum(model):
    """Best value over every deterministic Markov policy, by forward propagation."""
    H, K = model.horizon, model.num_actions
    sizes = model.level_sizes
    choices = [list(itertools.product(range(K), repeat=sizes[h])) for h in range(H)]
    best = -np.inf
    for pol in itertools.product(*choices):
        d = model.initial.copy()
        total = 0.0
        for h in range(1, H + 1):
            a = np.array(pol[h - 1])
            idx = np.arange(sizes[h - 1])
            total += float(d @ model.mean_reward(h)[idx, a])
            d = d @ model.transition(h)[idx, a, :]
        best = max(best, total)
    return best


def chain_model(H=3, K=2, name="chain"):
    """One context per level, action 1 pays 1/H."""
    trans = tuple(np.ones((1, K, 1)) for _ in range(H))
    rew = np.zeros((1, K, 2))
    rew[0, :, 0] = 1.0
    rew[0, 1] = [0.0, 1.0]
    return TabularCdp(H, K, np.ones(1), trans, np.array([0.0, 1.0 / H]), tuple(rew.copy() for _ in range(H)), name)


@pytest.fixture
def two_state_pair():
    """Two one-step models that differ only at (x=0, a=0) where the next-context law
    moves from (1, 0) to (0.7, 0.3); x=0 has initial mass 0.5."""
    init = np.array([0.5, 0.5])
    base = np.zeros((2, 1, 2))
    base[:, 0, 0] = 1.0
    other = base.copy()
    other[0, 0] = [0.7, 0.3]
    rew = np.zeros((2, 1, 1))
    rew[..., 0] = 1.0
    rv = np.array([0.0])
    truth = TabularCdp(1, 1, init, (base,), rv, (rew,), "truth")
    cand = TabularCdp(1, 1, init, (other,), rv, (rew,), "cand")
    return truth, cand


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
