"""Command-line entry point: ``m2l generate | train | eval | compare``.

Exit codes: 0 success, 2 configuration/validation error, 3 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import backbone
from .core import M2LConfig, NumericalError, train, write_curves_csv
from .data import (
    ConfigError,
    DataFormatError,
    SyntheticConfig,
    apply_normalization,
    generate_synthetic,
    load_dataset_dir,
    normalize,
    subject_split,
    write_manifest,
    write_ndjson,
)
from .evaluation import compare, evaluate_reduced

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SPLIT_DEFAULTS = {"train_fraction": 0.7, "val_fraction_of_train": 0.1}


def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        out[key.strip()] = _parse_value(value.strip())
    return out


def resolve_run_config(path=None, overrides=None) -> tuple[M2LConfig, dict, dict]:
    """Merge a JSON config file with KEY=VALUE overrides; unknown keys are rejected.

    Returns the training config, the split settings and the fully resolved
    flat document that reproduces the run when passed back as ``--config``.
    """
    doc = _read_json(path) if path else {}
    doc.update(overrides or {})
    split = dict(SPLIT_DEFAULTS)
    for key in SPLIT_DEFAULTS:
        if key in doc:
            split[key] = float(doc.pop(key))
    try:
        cfg = M2LConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    resolved = {**cfg.to_dict(), **split}
    return cfg, split, resolved


def _prepare(cfg: M2LConfig, split: dict, data_dir):
    dataset = load_dataset_dir(data_dir)
    tr, va, te = subject_split(dataset, split["train_fraction"], split["val_fraction_of_train"], cfg.seed)
    (tr, va, te), stats = normalize(tr, va, te)
    return dataset, (tr, va, te), stats


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = SyntheticConfig.from_dict(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = generate_synthetic(cfg)
    write_ndjson(dataset, out / "data.ndjson")
    write_manifest(dataset.specs, out / "manifest.json")
    _write_json(out / "generator_config.json", cfg.to_dict())
    print(f"wrote {dataset.N} samples ({', '.join(dataset.names)}) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, split, resolved = resolve_run_config(args.config, parse_overrides(args.set))
    _, (tr, va, te), stats = _prepare(cfg, split, args.data)
    out = Path(args.out)
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", resolved)
    result = train(cfg, tr, va)
    write_curves_csv(result.curves, out / "curves.csv")
    for name, net in result.networks.items():
        backbone.save_checkpoint(net, ckpt / f"{name}.json")
    _write_json(ckpt / "index.json", {"modalities": list(result.networks), "best_epoch": result.best_epoch})
    _write_json(ckpt / "normalization.json", stats)
    _write_json(
        ckpt / "split.json",
        {k: sorted(d.subject_set()) for k, d in (("train", tr), ("val", va), ("test", te))},
    )
    print(f"trained {len(result.networks)} networks for {result.epochs_run} epochs; artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoints)
    index = _read_json(ckpt / "index.json")
    nets = {name: backbone.load_checkpoint(ckpt / f"{name}.json") for name in index["modalities"]}
    dataset = load_dataset_dir(args.data)
    for name, net in nets.items():
        if name not in dataset.names:
            raise ConfigError(f"checkpoint modality {name!r} missing from dataset ({', '.join(dataset.names)})")
        spec = dataset.spec(name)
        if (net.config.input_dim, net.config.seq_len) != (spec.feature_dim, spec.seq_len):
            raise ConfigError(
                f"{name}: checkpoint expects D={net.config.input_dim}, T={net.config.seq_len}; "
                f"dataset has D={spec.feature_dim}, T={spec.seq_len}"
            )
    if args.modalities.strip() == "all":
        testing = list(nets)
    else:
        testing = [m.strip() for m in args.modalities.split(",") if m.strip()]
        unknown = [m for m in testing if m not in nets]
        if unknown or not testing:
            raise ConfigError(f"unknown modality {unknown[0] if unknown else ''!r}; available: {', '.join(nets)}")
    split_path = ckpt / "split.json"
    if split_path.exists():
        test_subjects = set(_read_json(split_path)["test"])
        dataset = dataset.subset([i for i, s in enumerate(dataset.subjects) if s in test_subjects])
    dataset = apply_normalization(dataset.with_modalities(list(nets)), _read_json(ckpt / "normalization.json"))
    report = evaluate_reduced(nets, dataset, testing).to_dict()
    _write_json(ckpt / f"eval_{'+'.join(testing)}.json", report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg, split, resolved = resolve_run_config(args.config, parse_overrides(getattr(args, "set", None)))
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects a comma-separated list of integers, got {args.seeds!r}") from None
    if not seeds:
        raise ConfigError("--seeds must list at least one seed")
    dataset = load_dataset_dir(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", resolved)
    table = compare(cfg, dataset, seeds, split["train_fraction"], split["val_fraction_of_train"], workers=args.workers)
    table.write_csv(out / "comparison.csv")
    (out / "comparison.json").write_text(table.to_json() + "\n")
    print((out / "comparison.csv").read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m2l", description="More-to-less cooperative multimodal training")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic NDJSON dataset and manifest")
    g.add_argument("--config", help="SyntheticConfig JSON (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="split, normalise and train all modality networks")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--set", nargs="+", action="extend", metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score checkpoints on the held-out subjects")
    e.add_argument("--checkpoints", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--modalities", default="all", help="comma-separated names or 'all'")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="unimodal / fusion / M2L table over seeds")
    c.add_argument("--config")
    c.add_argument("--data", required=True)
    c.add_argument("--seeds", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--set", nargs="+", action="extend", metavar="KEY=VALUE")
    c.add_argument("--workers", type=int, default=1)
    c.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
