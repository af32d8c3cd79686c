"""``witness-lab <subcommand> --config FILE [--seed-offset N] [--out DIR]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ConfigError, ModelValidationError, StructureError, WitnessLabError
from .harness import KINDS, ExperimentConfig, error_document, run

EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="witness-lab", description="Model-based exploration experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind, help=f"run a {kind} experiment")
        sp.add_argument("--config", required=True, type=Path, help="YAML experiment file")
        sp.add_argument("--seed-offset", type=int, default=0, help="added to every configured seed")
        sp.add_argument("--out", type=Path, default=None, help="output directory (overrides the config)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    out = args.out
    try:
        data = ExperimentConfig.load(args.config).to_dict()
        if data["kind"] != args.command:
            raise ConfigError(f"config kind {data['kind']!r} does not match subcommand {args.command!r}")
        data["seeds"] = [s + args.seed_offset for s in data["seeds"]]
        cfg = ExperimentConfig.from_dict(data)
        out = Path(out or cfg.out)
        run(cfg, out)
    except (ConfigError, ModelValidationError, StructureError, FileNotFoundError) as err:
        _report(err, out)
        return EXIT_USAGE
    except WitnessLabError as err:
        _report(err, out)
        return EXIT_RUNTIME
    return 0


def _report(err: Exception, out: Path | None) -> None:
    doc = error_document(err)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(doc)
    sys.stderr.write(doc)


if __name__ == "__main__":
    sys.exit(main())
