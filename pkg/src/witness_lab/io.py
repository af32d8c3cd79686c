"""JSON model files and deterministic result writers.

See ``docs/schemas.md`` for the file formats.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .cdp import FactoredMdp, TabularCdp, validate
from .errors import ModelValidationError, StructureError


def _tabular_to_dict(m: TabularCdp) -> dict[str, Any]:
    levels = []
    for h in range(1, m.horizon + 1):
        R = m.reward_probs(h)
        rewards = [
            [[[float(v), float(p)] for v, p in zip(m.reward_values, R[x, a]) if p > 0] for a in range(m.num_actions)]
            for x in range(R.shape[0])
        ]
        levels.append({
            "states": int(m.transition(h).shape[0]),
            "transitions": m.transition(h).tolist(),
            "rewards": rewards,
        })
    return {
        "format": "tabular",
        "name": m.name,
        "horizon": m.horizon,
        "actions": m.num_actions,
        "initial": m.initial.tolist(),
        "terminal_states": int(m.level_sizes[-1]),
        "levels": levels,
    }


def _factored_to_dict(m: FactoredMdp) -> dict[str, Any]:
    return {
        "format": "factored",
        "name": m.name,
        "d": m.d,
        "values": list(m.values),
        "horizon": m.horizon,
        "actions": m.num_actions,
        "parents": [list(p) for p in m.parents],
        "cpts": [[c.tolist() for c in level] for level in m.cpts],
        "initial": m.initial.tolist(),
        "reward": {"values": m.reward_values.tolist(), "tables": [r.tolist() for r in m.rewards]},
    }


def model_to_dict(model: Any) -> dict[str, Any]:
    if isinstance(model, FactoredMdp):
        return _factored_to_dict(model)
    if isinstance(model, TabularCdp):
        return _tabular_to_dict(model)
    raise StructureError(f"cannot serialize {type(model).__name__}")


def _require(data: dict[str, Any], *keys: str) -> None:
    missing = [k for k in keys if k not in data]
    if missing:
        raise StructureError(f"model document lacks fields {missing}")


def _tabular_from_dict(data: dict[str, Any]) -> TabularCdp:
    _require(data, "horizon", "actions", "levels", "initial")
    H, K = int(data["horizon"]), int(data["actions"])
    levels = data["levels"]
    if len(levels) != H:
        raise StructureError(f"expected {H} levels, found {len(levels)}")
    support = sorted({
        float(v)
        for lvl in levels for per_x in lvl["rewards"] for per_a in per_x for v, _ in per_a
    } | {0.0})
    index = {v: i for i, v in enumerate(support)}
    transitions, rewards = [], []
    for h, lvl in enumerate(levels, start=1):
        t = np.asarray(lvl["transitions"], dtype=float)
        n = int(lvl.get("states", t.shape[0] if t.ndim else 0))
        if t.ndim != 3 or t.shape[:2] != (n, K):
            raise StructureError(f"level {h}: transitions must be a states x actions x next-states array")
        r = np.zeros((n, K, len(support)))
        if len(lvl["rewards"]) != n or any(len(per_x) != K for per_x in lvl["rewards"]):
            raise StructureError(f"level {h}: rewards must list one distribution per (x, a)")
        for x, per_x in enumerate(lvl["rewards"]):
            for a, per_a in enumerate(per_x):
                for v, p in per_a:
                    r[x, a, index[float(v)]] += float(p)
        transitions.append(t)
        rewards.append(r)
    model = TabularCdp(H, K, np.asarray(data["initial"], dtype=float), tuple(transitions),
                       np.asarray(support), tuple(rewards), name=str(data.get("name", "")))
    term = data.get("terminal_states")
    if term is not None and int(term) != model.level_sizes[-1]:
        raise StructureError(f"terminal_states={term} but level {H} maps into {model.level_sizes[-1]} contexts")
    return model


def _factored_from_dict(data: dict[str, Any]) -> FactoredMdp:
    _require(data, "d", "values", "horizon", "actions", "parents", "cpts", "initial", "reward")
    rew = data["reward"]
    return FactoredMdp(
        d=int(data["d"]),
        values=tuple(data["values"]),
        horizon=int(data["horizon"]),
        num_actions=int(data["actions"]),
        parents=tuple(tuple(p) for p in data["parents"]),
        cpts=tuple(tuple(np.asarray(c, dtype=float) for c in level) for level in data["cpts"]),
        initial=np.asarray(data["initial"], dtype=float),
        reward_values=np.asarray(rew["values"], dtype=float),
        rewards=tuple(np.asarray(r, dtype=float) for r in rew["tables"]),
        name=str(data.get("name", "")),
    )


def model_from_dict(data: dict[str, Any], check: bool = True) -> Any:
    """Parse a model document; with ``check`` every invariant is validated."""
    fmt = data.get("format", "factored" if "cpts" in data else "tabular")
    try:
        model = _factored_from_dict(data) if fmt == "factored" else _tabular_from_dict(data)
    except (KeyError, TypeError, ValueError) as err:
        raise StructureError(f"malformed model document: {err}") from err
    if check:
        validate(model)
    return model


def load_models(path: str | Path) -> tuple[list[Any], int | None]:
    """Read a model file: one model, or ``{"models": [...], "true_index": k}``."""
    data = json.loads(Path(path).read_text())
    if "models" in data:
        return [model_from_dict(m) for m in data["models"]], data.get("true_index")
    return [model_from_dict(data)], 0


def save_models(path: str | Path, models: Sequence[Any], true_index: int | None = None) -> None:
    doc: dict[str, Any] = {"models": [model_to_dict(m) for m in models]}
    if true_index is not None:
        doc["true_index"] = true_index
    write_json(path, doc)


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o: Any) -> Any:
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(dumps(obj))


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


__all__ = [
    "ModelValidationError",
    "dumps",
    "load_models",
    "model_from_dict",
    "model_to_dict",
    "save_models",
    "write_csv",
    "write_json",
]
