"""Command-line entry point wiring the toolkit into reproducible runs.

Exit codes: 0 success, 1 usage/validation error, 2 runtime failure. Every
machine-readable output is written atomically and contains no timestamps,
so identical flags and seeds reproduce byte-identical files. Flags
override config-file values, which override defaults; each run logs its
resolved configuration to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evaluate, fusion, nn, priors, store, synth

log = logging.getLogger("plantreg")


class UsageError(Exception):
    """Bad flags or arguments; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


TRAIN_DEFAULTS = {
    "learning_rate": 0.001,
    "batch_size": 64,
    "epochs": 10,
    "seed": 0,
    "shuffle": True,
}
LEVEL_TRAIN_DEFAULTS = dict(TRAIN_DEFAULTS, epochs=priors.LEVEL_REGRESSOR_EPOCHS)

SENSITIVITY_DEFAULT_PERCENTAGES = (
    "0,12.5,25,37.5,50,62.5,75,87.5,95.8"
)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lr", dest="learning_rate", type=float, default=None)
    parser.add_argument("--batch", dest="batch_size", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument(
        "--no-shuffle", dest="shuffle", action="store_false", default=None
    )


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plantreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("validate-cache", help="check a cache's content invariants")
    p.add_argument("cache", help="cache base path (without .manifest.json)")
    _add_common(p)

    p = sub.add_parser("synth", help="generate a synthetic cache + priors + truth csv")
    p.add_argument("--out", required=True)
    p.add_argument("--plants", type=int, default=None)
    p.add_argument("--days", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--crops", default=None, help="comma-separated crop names")
    _add_common(p)

    p = sub.add_parser("train-level", help="train the auxiliary level regressor")
    p.add_argument("--cache", default=None)
    p.add_argument("--out", default=None)
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("train", help="train the unimodal or multimodal regressor")
    p.add_argument("--mode", choices=("unimodal", "multimodal"), default=None)
    p.add_argument("--cache", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--priors", default=None, help="prior table base (multimodal)")
    p.add_argument(
        "--hold-out",
        action="append",
        default=None,
        help="crop:plant_id plants excluded from training, e.g. mustard:3",
    )
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("eval", help="plant-held-out evaluation report")
    p.add_argument("--model", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--hold-out", action="append", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--priors", default=None)
    p.add_argument(
        "--level-source", choices=("metadata", "regressor"), default="metadata"
    )
    p.add_argument("--level-model", default=None)
    p.add_argument(
        "--unit",
        choices=("image", "group"),
        default=None,
        help="evaluation unit; defaults to image for unimodal, group otherwise",
    )
    _add_common(p)

    p = sub.add_parser("sensitivity", help="view-removal robustness sweep")
    p.add_argument("--model", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--hold-out", action="append", required=True)
    p.add_argument("--out", required=True, help="output base (.json and .csv)")
    p.add_argument("--priors", default=None)
    p.add_argument(
        "--level-source", choices=("metadata", "regressor"), default="metadata"
    )
    p.add_argument("--level-model", default=None)
    p.add_argument("--percentages", default=None)
    p.add_argument("--trials", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("report", help="re-emit a JSON report/curve as csv or markdown")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("json", "csv", "markdown"), required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    return parser


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as handle:
        data = json.load(handle)
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config file must hold a JSON object")
    return data


def _resolve(args, file_config: dict, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    for key in defaults:
        if key in file_config:
            resolved[key] = file_config[key]
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _parse_hold_out(specs) -> dict[str, int]:
    if isinstance(specs, dict):
        return {str(crop).lower(): int(plant) for crop, plant in specs.items()}
    if isinstance(specs, str):
        specs = [specs]
    held = {}
    for spec in specs or []:
        for part in str(spec).split(","):
            part = part.strip()
            if not part:
                continue
            if ":" not in part:
                raise UsageError(f"--hold-out expects crop:plant_id, got {part!r}")
            crop, _, plant = part.partition(":")
            try:
                held[crop.strip().lower()] = int(plant)
            except ValueError:
                raise UsageError(f"--hold-out plant id must be an integer: {part!r}")
    if not held:
        raise UsageError("--hold-out requires at least one crop:plant_id entry")
    return held


def _train_config(args, file_config: dict, defaults: dict) -> fusion.TrainConfig:
    resolved = _resolve(args, file_config, defaults)
    return fusion.TrainConfig(
        learning_rate=float(resolved["learning_rate"]),
        batch_size=int(resolved["batch_size"]),
        epochs=int(resolved["epochs"]),
        seed=int(resolved["seed"]),
        shuffle=bool(resolved["shuffle"]),
    )


def _fill_from_config(args, file_config: dict, keys) -> None:
    """Paths/mode may come from the config file; flags still win."""
    for key in keys:
        if getattr(args, key, None) is None and key in file_config:
            setattr(args, key, file_config[key])


def _require(args, keys) -> None:
    for key in keys:
        if getattr(args, key, None) is None:
            raise UsageError(f"--{key.replace('_', '-')} is required (flag or config file)")


def _model_info(base: str, loaded: nn.LoadedModel) -> dict:
    return {
        "path": str(base),
        "layer_sizes": list(loaded.model.spec.layer_sizes),
        "seed": loaded.model.rng_seed,
        "mode": loaded.mode,
    }


def _load_eval_pieces(args):
    """Shared plumbing for eval and sensitivity: model + fn + cases."""
    held_out = _parse_hold_out(args.hold_out)
    loaded = nn.load_model(args.model)
    cache = store.read_cache(args.cache)
    split = evaluate.split_by_plant(cache.records, held_out)
    groups = evaluate.test_groups(cache, split)
    if not groups:
        raise ValueError("hold-out selects no complete test groups")
    cases = evaluate.group_cases(cache, groups)

    mode = loaded.mode or ("multimodal" if loaded.model.spec.input_size == fusion.FUSED_DIM else "unimodal")
    if mode == "multimodal":
        if not args.priors:
            raise UsageError("multimodal evaluation requires --priors")
        table = priors.load_priors(args.priors)
        if not table.normalized:
            table = priors.normalize_priors(table)
        level_model = None
        if args.level_source == "regressor":
            if not args.level_model:
                raise UsageError("--level-source regressor requires --level-model")
            level_model = nn.load_model(args.level_model).model
        predict_fn = evaluate.make_multimodal_group_fn(
            loaded.model,
            cache,
            table,
            level_source=args.level_source,
            level_model=level_model,
        )
    else:
        predict_fn = evaluate.make_unimodal_group_fn(loaded.model, cache)
    return loaded, cache, split, cases, predict_fn, mode, held_out


def _cmd_validate_cache(args) -> int:
    cache = store.read_cache(args.cache)
    report = store.validate_cache(cache)
    if report.passed:
        print(f"cache OK: {cache.record_count} records, dim {store.EMBED_DIM}")
        return 0
    for finding in report.findings:
        print(f"{finding.kind}: {finding.message}")
    print(f"cache FAILED validation with {len(report.findings)} finding(s)")
    return 1


def _cmd_synth(args) -> int:
    file_config = _load_config_file(args.config)
    defaults = {
        "plants": 3,
        "days": 20,
        "noise": 0.0,
        "seed": 7,
        "crops": ",".join(synth.DEFAULT_CROPS),
    }
    resolved = _resolve(args, file_config, defaults)
    crops = tuple(c.strip().lower() for c in str(resolved["crops"]).split(",") if c.strip())
    spec = synth.SynthSpec(
        n_plants=int(resolved["plants"]),
        n_days=int(resolved["days"]),
        noise_std=float(resolved["noise"]),
        seed=int(resolved["seed"]),
        crops=crops,
    )
    log.info("resolved config: %s", resolved)
    cache, truth_rows = synth.generate_synthetic_cache(spec)
    store.write_cache(cache.records, cache.matrix, args.out)
    store.write_metadata_csv(truth_rows, f"{args.out}.truth.csv")
    priors.save_priors(synth.synthetic_priors(spec.seed), args.out)
    log.info(
        "wrote %d records to %s(.manifest.json|.f32bin), truth csv, priors",
        cache.record_count,
        args.out,
    )
    return 0


def _cmd_train_level(args) -> int:
    file_config = _load_config_file(args.config)
    _fill_from_config(args, file_config, ("cache", "out"))
    _require(args, ("cache", "out"))
    config = _train_config(args, file_config, LEVEL_TRAIN_DEFAULTS)
    log.info("resolved config: %s", config.to_dict())
    cache = store.read_cache(args.cache)
    model, history = priors.train_level_regressor(cache, config)
    nn.save_model(model, args.out, mode="level")
    log.info("final epoch loss %.6f; checkpoint at %s", history[-1]["loss"], args.out)
    return 0


def _cmd_train(args) -> int:
    file_config = _load_config_file(args.config)
    _fill_from_config(args, file_config, ("mode", "cache", "out", "priors", "hold_out"))
    _require(args, ("mode", "cache", "out"))
    if args.mode not in ("unimodal", "multimodal"):
        raise UsageError(f"unknown mode {args.mode!r}")
    config = _train_config(args, file_config, TRAIN_DEFAULTS)
    log.info("resolved config: %s mode=%s", config.to_dict(), args.mode)
    cache = store.read_cache(args.cache)
    record_indices = None
    if args.hold_out:
        held_out = _parse_hold_out(args.hold_out)
        split = evaluate.split_by_plant(cache.records, held_out)
        record_indices = split.train_indices
    prior_table = None
    if args.mode == "multimodal":
        if not args.priors:
            raise UsageError("--mode multimodal requires --priors")
        prior_table = priors.load_priors(args.priors)
        if not prior_table.normalized:
            prior_table = priors.normalize_priors(prior_table)
    model, history = fusion.train_model(
        args.mode, cache, config, prior_table=prior_table, record_indices=record_indices
    )
    nn.save_model(model, args.out, mode=args.mode)
    log.info("final epoch loss %.6f; checkpoint at %s", history[-1]["loss"], args.out)
    return 0


def _cmd_eval(args) -> int:
    loaded, cache, split, cases, predict_fn, mode, held_out = _load_eval_pieces(args)
    unit = args.unit or ("image" if mode == "unimodal" else "group")
    config = {
        "cache": str(args.cache),
        "hold_out": {crop: held_out[crop] for crop in sorted(held_out)},
        "level_source": args.level_source if mode == "multimodal" else None,
        "unit": unit,
        "priors": str(args.priors) if args.priors else None,
    }
    log.info("resolved config: %s", config)
    if unit == "image":
        if mode != "unimodal":
            raise UsageError("--unit image is only available for unimodal models")
        report = evaluate.evaluate_unimodal_images(
            loaded.model,
            cache,
            split.test_indices,
            _model_info(args.model, loaded),
            config,
        )
    else:
        report = evaluate.evaluate_group_predictor(
            predict_fn, cases, _model_info(args.model, loaded), config
        )
    evaluate.emit_report(report, "json", args.out)
    log.info("report written to %s", args.out)
    return 0


def _cmd_sensitivity(args) -> int:
    file_config = _load_config_file(args.config)
    defaults = {
        "percentages": SENSITIVITY_DEFAULT_PERCENTAGES,
        "trials": 5,
        "seed": 0,
    }
    resolved = _resolve(args, file_config, defaults)
    loaded, cache, split, cases, predict_fn, mode, held_out = _load_eval_pieces(args)
    percentages = [
        float(p) for p in str(resolved["percentages"]).split(",") if p.strip()
    ]
    config = {
        "cache": str(args.cache),
        "hold_out": {crop: held_out[crop] for crop in sorted(held_out)},
        "model": _model_info(args.model, loaded),
        "level_source": args.level_source if mode == "multimodal" else None,
        "percentages": percentages,
    }
    log.info("resolved config: %s trials=%s seed=%s", config, resolved["trials"], resolved["seed"])
    curve = evaluate.sensitivity_sweep(
        predict_fn,
        cases,
        percentages,
        trials=int(resolved["trials"]),
        seed=int(resolved["seed"]),
        config=config,
    )
    evaluate.emit_report(curve, "json", f"{args.out}.json")
    evaluate.emit_report(curve, "csv", f"{args.out}.csv")
    summary = curve.degradation_summary()
    log.info(
        "degradation: age %.2f%% leaf %.2f%%; curve at %s.(json|csv)",
        summary["age"],
        summary["leaf_count"],
        args.out,
    )
    return 0


def _cmd_report(args) -> int:
    data = evaluate.load_report(args.input)
    evaluate.emit_report(data, args.format, args.out)
    log.info("wrote %s as %s", args.out, args.format)
    return 0


_COMMANDS = {
    "validate-cache": _cmd_validate_cache,
    "synth": _cmd_synth,
    "train-level": _cmd_train_level,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sensitivity": _cmd_sensitivity,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        logging.basicConfig(
            stream=sys.stderr,
            level=logging.WARNING if args.quiet else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except Exception as exc:  # runtime failure contract
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
