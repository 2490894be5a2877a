"""Command-line entry point.

Subcommands: gen-data, pretrain, finetune, fixed-mlt, eval, sweep,
gradcheck, oracle-check. A run is fully determined by its JSON config and
seed; ``--section.key=value`` flags override individual leaves and are
echoed, with the effective config and tool versions, into a ``manifest.json``
beside the outputs. Every CSV an output directory receives gets a companion
PNG figure (skippable with ``--no-figures``).

Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.
The default output root is ``$STREAMLAT_OUT`` (falling back to
``./streamlat-out``); each subcommand writes under ``<root>/<subcommand>``
unless ``--out`` is given.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, config_from_dict, config_to_dict, load_config
from .synthdata import load_dataset, save_dataset

_OVERRIDE_RE = re.compile(r"^--([a-z_]+\.[a-z_0-9]+)=(.*)$")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we want 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="streamlat", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", help="JSON config file (defaults if omitted)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--data-dir", dest="data_dir",
                       help="directory with train/dev/test dataset files")
        p.add_argument("--no-figures", dest="figures", action="store_false",
                       help="skip PNG rendering next to the CSV outputs")

    p = sub.add_parser("gen-data", help="generate and write the synthetic datasets")
    common(p)
    p.add_argument("--print-config", action="store_true",
                   help="print the effective config JSON and exit")

    p = sub.add_parser("pretrain", help="stage one: train and record triggering points")
    common(p)

    p = sub.add_parser("finetune",
                       help="stage two: boundary-masked training from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--records", help="boundary-record file (required in srmlt mode)")

    p = sub.add_parser("fixed-mlt",
                       help="fine-tune against frozen ground-truth boundaries")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("eval", help="decode a split and report error rate and latency")
    common(p, needs_config=False)
    p.add_argument("--config", help="overrides on top of the checkpoint's config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="dev", choices=["train", "dev", "test"])

    p = sub.add_parser("sweep", help="fine-tune across offset or granularity values")
    common(p)
    p.add_argument("--axis", required=True, choices=["delta", "granularity"])
    p.add_argument("--values", required=True,
                   help="comma-separated values, e.g. 0,1,2,3,4")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("oracle-check", help="alignment recursion vs path enumeration")
    common(p)
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    plain, overrides = [], []
    for arg in argv:
        m = _OVERRIDE_RE.match(arg)
        if m:
            overrides.append(f"{m.group(1)}={m.group(2)}")
        else:
            plain.append(arg)
    return plain, overrides


def _out_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        root = os.environ.get("STREAMLAT_OUT", "streamlat-out")
        out = Path(root) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config: RunConfig,
                    overrides: list[str], extra: dict | None = None) -> None:
    import numpy

    manifest = {
        "command": command,
        "config": config_to_dict(config),
        "overrides": overrides,
        "seed": config.run.seed,
        "versions": {
            "streamlat": __version__,
            "numpy": numpy.__version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
        },
    }
    manifest.update(extra or {})
    with open(out / "manifest.json", "w", encoding="utf-8") as fp:
        json.dump(manifest, fp, indent=2, sort_keys=True)
        fp.write("\n")


def _load_bundle(args, config: RunConfig):
    from .harness import DataBundle, prepare_data

    if getattr(args, "data_dir", None):
        base = Path(args.data_dir)
        for name in ("train", "dev", "test"):
            if not (base / f"{name}.txt").exists():
                raise UsageError(f"dataset file {base / f'{name}.txt'} not found")
        return DataBundle(train=load_dataset(base / "train.txt"),
                          dev=load_dataset(base / "dev.txt"),
                          test=load_dataset(base / "test.txt"))
    return prepare_data(config)


def _progress(entry) -> None:
    print(f"[{entry.phase}] epoch {entry.epoch}: loss {entry.loss:.4f} "
          f"acc {entry.train_accuracy:.4f} cov {entry.train_coverage:.4f} "
          f"devTER {entry.dev_token_error_rate:.4f} "
          f"devDelta {entry.dev_delta_corpus:.3f} updates {entry.records_updated}",
          flush=True)


def _load_state_with_overrides(args, overrides: list[str]):
    from .harness import load_checkpoint

    path = Path(args.checkpoint)
    if not path.exists():
        raise UsageError(f"checkpoint {path} not found")
    state = load_checkpoint(path)
    base = config_to_dict(state.config)
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fp:
            file_data = json.load(fp)
        for section, entries in file_data.items():
            if section not in base:
                raise ConfigError(f"unknown config section {section!r}")
            base[section].update(entries)
    config = config_from_dict(base)
    if overrides:
        tmp = config_to_dict(config)
        for item in overrides:
            dotted, value = item.split("=", 1)
            section, key = dotted.split(".", 1)
            if section not in tmp or key not in tmp[section]:
                raise ConfigError(f"unknown config key {dotted}")
            tmp[section][key] = value
        config = config_from_dict(tmp)
    if config_to_dict(config)["model"] != config_to_dict(state.config)["model"]:
        raise UsageError("model settings may not be changed when resuming a checkpoint")
    return state, config


def _finish_training(out: Path, outcome, figures: bool) -> None:
    from .harness import save_checkpoint
    from .reporting import render_training_figure, write_trainlog_csv

    save_checkpoint(outcome.state, out / "checkpoint.json")
    outcome.store.save(out / "records.txt")
    write_trainlog_csv(out / "trainlog.csv", outcome.log)
    if figures and outcome.log:
        render_training_figure(outcome.log, out / "training-curves.png")


def _cmd_gen_data(args, overrides) -> int:
    config = load_config(args.config, overrides)
    if args.print_config:
        print(json.dumps(config_to_dict(config), indent=2, sort_keys=True))
        return 0
    from .harness import prepare_data

    out = _out_dir(args, "gen-data")
    bundle = prepare_data(config)
    save_dataset(bundle.train, out / "train.txt")
    save_dataset(bundle.dev, out / "dev.txt")
    save_dataset(bundle.test, out / "test.txt")
    _write_manifest(out, "gen-data", config, overrides,
                    {"sizes": {"train": len(bundle.train), "dev": len(bundle.dev),
                               "test": len(bundle.test)}})
    print(f"wrote {len(bundle.train)}/{len(bundle.dev)}/{len(bundle.test)} "
          f"train/dev/test utterances to {out}")
    return 0


def _cmd_pretrain(args, overrides) -> int:
    from .harness import pretrain

    config = load_config(args.config, overrides)
    out = _out_dir(args, "pretrain")
    data = _load_bundle(args, config)
    outcome = pretrain(config, data, out_dir=out, progress=_progress)
    _finish_training(out, outcome, args.figures)
    _write_manifest(out, "pretrain", config, overrides)
    print(f"pretrain complete: {len(outcome.log)} epochs, outputs in {out}")
    return 0


def _cmd_finetune(args, overrides) -> int:
    from .harness import finetune, run_baseline, run_fixed_mlt
    from .srmlt import RecordStore

    state, config = _load_state_with_overrides(args, overrides)
    out = _out_dir(args, "finetune")
    data = _load_bundle(args, config)
    mode = config.run.mode
    if mode == "fixed-mlt":
        outcome = run_fixed_mlt(state, config, data, out_dir=out, progress=_progress)
    elif mode == "baseline":
        if not args.records:
            raise UsageError("baseline mode needs --records from the pretrain run")
        store = RecordStore.load(args.records)
        outcome = run_baseline(state, store, config, data, out_dir=out,
                               progress=_progress)
    else:
        if not args.records:
            raise UsageError("srmlt fine-tuning needs --records from the pretrain run")
        records = Path(args.records)
        if not records.exists():
            raise UsageError(f"record file {records} not found")
        store = RecordStore.load(records)
        outcome = finetune(state, store, config, data, out_dir=out, progress=_progress)
    _finish_training(out, outcome, args.figures)
    _write_manifest(out, "finetune", config, overrides, {"mode": mode})
    print(f"{mode} fine-tuning complete: outputs in {out}")
    return 0


def _cmd_fixed_mlt(args, overrides) -> int:
    from .harness import run_fixed_mlt

    state, config = _load_state_with_overrides(args, overrides)
    out = _out_dir(args, "fixed-mlt")
    data = _load_bundle(args, config)
    outcome = run_fixed_mlt(state, config, data, out_dir=out, progress=_progress)
    _finish_training(out, outcome, args.figures)
    _write_manifest(out, "fixed-mlt", config, overrides)
    print(f"fixed-boundary fine-tuning complete: outputs in {out}")
    return 0


def _cmd_eval(args, overrides) -> int:
    from .harness import evaluate_model
    from .reporting import render_latency_figure, write_results_csv

    state, config = _load_state_with_overrides(args, overrides)
    out = _out_dir(args, "eval")
    data = _load_bundle(args, config)
    dataset = getattr(data, args.split)
    result = evaluate_model(state.model, dataset, config.run.max_decode_steps)
    write_results_csv(out / "results.csv", args.split, result)
    if args.figures:
        render_latency_figure(result, out / "latency-offsets.png")
    _write_manifest(out, "eval", config, overrides,
                    {"split": args.split, "checkpoint": str(args.checkpoint)})
    print(f"{args.split}: token error rate {result.token_error_rate:.4f}, "
          f"latency {result.delta_corpus:.3f} frames "
          f"over {result.aligned_tokens} aligned tokens")
    return 0


def _cmd_sweep(args, overrides) -> int:
    from .harness import sweep
    from .reporting import render_sweep_figure, write_sweep_csv

    config = load_config(args.config, overrides)
    out = _out_dir(args, "sweep")
    data = _load_bundle(args, config)
    raw = [v for v in args.values.split(",") if v]
    values = [int(v) for v in raw] if args.axis == "delta" else raw
    rows, pretrained, errors = sweep(config, args.axis, values, data,
                                     progress=_progress)
    write_sweep_csv(out / "sweep.csv", rows)
    if args.figures:
        render_sweep_figure(rows, out / "sweep-tradeoff.png")
    _finish_training(out, pretrained, figures=False)
    _write_manifest(out, "sweep", config, overrides,
                    {"axis": args.axis, "values": raw, "errors": errors})
    for row in rows:
        status = row.error or (f"TER {row.dev_token_error_rate:.4f} "
                               f"delta {row.dev_delta_corpus:.3f}")
        print(f"{row.axis}={row.value} [{row.mode}]: {status}")
    if errors:
        print(f"{len(errors)} sweep member(s) failed", file=sys.stderr)
        return 2
    return 0


def _run_checks(args, overrides, command: str, results) -> int:
    out = _out_dir(args, command)
    config = load_config(getattr(args, "config", None), overrides)
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    with open(out / "checks.txt", "w", encoding="utf-8") as fp:
        fp.write("\n".join(lines) + "\n")
    _write_manifest(out, command, config, overrides,
                    {"passed": all(r.passed for r in results)})
    return 0 if all(r.passed for r in results) else 2


def _cmd_gradcheck(args, overrides) -> int:
    from .checks import run_grad_suite

    return _run_checks(args, overrides, "gradcheck", run_grad_suite(seed=args.seed))


def _cmd_oracle_check(args, overrides) -> int:
    from .checks import run_oracle_suite

    return _run_checks(args, overrides, "oracle-check",
                       run_oracle_suite(cases=args.cases, seed=args.seed))


_DISPATCH = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "fixed-mlt": _cmd_fixed_mlt,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "gradcheck": _cmd_gradcheck,
    "oracle-check": _cmd_oracle_check,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    plain, overrides = _split_overrides(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(plain)
        return _DISPATCH[args.command](args, overrides)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
