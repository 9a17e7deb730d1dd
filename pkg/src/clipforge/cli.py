"""Command line entry points: datagen, train, eval, report.

Configuration precedence for train: built-in defaults, then the --config
key=value file, then CLIPFORGE_* environment variables, then explicit flags.
The effective configuration is always written into the output directory, and
every error path exits nonzero with a single machine-parsable E_* prefix line
on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import shutil
import sys
from pathlib import Path

from . import evaluation as E
from . import model as M
from .data import (
    Dataset,
    Vocabulary,
    aesthetic_filter,
    generate_synthetic_corpus,
    load_dataset,
    load_split,
    manifest_digest,
    save_dataset,
    save_split,
    split,
)
from .errors import ClipforgeError, ConfigError, EvaluationError
from .training import (
    RECORD_FILE,
    RunConfig,
    coerce_field,
    read_config_file,
    run_training,
)

ENV_PREFIX = "CLIPFORGE_"
SUPPORTED_K = (1, 5, 10)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the package error path."""

    def error(self, message):
        raise ConfigError(message)


def _write_effective(path: Path, values: dict) -> None:
    lines = [f"{key}={values[key]}" for key in sorted(values)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fresh_output_dir(out: Path, force: bool, command: str) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(
                f"{command}: output dir {out} already exists; pass --force to overwrite"
            )
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# datagen
# ---------------------------------------------------------------------------

def cmd_datagen(args) -> int:
    out = Path(args.output).resolve()
    _fresh_output_dir(out, args.force, "datagen")
    dataset = generate_synthetic_corpus(
        args.images, args.languages, image_size=args.image_size, seed=args.seed
    )
    kept = aesthetic_filter(dataset.records, threshold=args.threshold)
    train_records, val_records = split(kept, args.val_fraction, seed=args.seed)
    save_dataset(dataset, out)
    save_split(out, [r.id for r in train_records], [r.id for r in val_records])
    _write_effective(
        out / "datagen.effective",
        {
            "images": args.images,
            "languages": args.languages,
            "seed": args.seed,
            "image_size": args.image_size,
            "val_fraction": args.val_fraction,
            "threshold": args.threshold,
        },
    )
    dropped = len(dataset.records) - len(kept)
    print(f"generated {len(dataset.records)} images in {len(dataset.languages)} languages")
    print(f"kept {len(kept)}, dropped {dropped} at aesthetic threshold {args.threshold}")
    print(f"split: {len(train_records)} train / {len(val_records)} validation")
    print(f"dataset written to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _merged_run_config(args) -> RunConfig:
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for field in dataclasses.fields(RunConfig):
        env_name = ENV_PREFIX + field.name.upper()
        if env_name in os.environ:
            values[field.name] = coerce_field(field.name, os.environ[env_name])
    for field in dataclasses.fields(RunConfig):
        flag = getattr(args, field.name, None)
        if flag is not None:
            values[field.name] = coerce_field(field.name, flag)
    return RunConfig(**values)


def cmd_train(args) -> int:
    config = _merged_run_config(args)
    if args.force and config.output_dir and Path(config.output_dir).exists():
        shutil.rmtree(config.output_dir)
    result = run_training(config, log=print)
    print(
        f"run {result.run_id} finished after {result.total_steps} steps;"
        f" best val loss {result.best_val_loss:.4f}"
    )
    print(f"checkpoints: {result.last_checkpoint} (last), {result.best_checkpoint} (best)")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _parse_k(text: str) -> tuple:
    try:
        ks = tuple(sorted(int(part) for part in text.split(",") if part))
    except ValueError as exc:
        raise ConfigError(f"bad --k value {text!r}: {exc}") from exc
    if ks != SUPPORTED_K:
        raise ConfigError(
            f"metric columns are fixed at k={','.join(map(str, SUPPORTED_K))}; got {text!r}"
        )
    return ks


def _select_records(dataset, dataset_dir, which: str):
    if which == "all":
        return dataset.records
    train_ids, val_ids = load_split(dataset_dir)
    wanted = set(train_ids if which == "train" else val_ids)
    return [r for r in dataset.records if r.id in wanted]


def cmd_eval(args) -> int:
    _parse_k(args.k)
    model = M.load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    vocab = Vocabulary.for_dataset(dataset)
    if vocab.size != model.config.vocab_size:
        raise EvaluationError(
            f"vocabulary mismatch: checkpoint expects {model.config.vocab_size} tokens"
            f" but this dataset yields {vocab.size}; evaluate against the dataset the"
            " model was trained on"
        )
    side = dataset.records[0].get_pixels().shape[0] if dataset.records else 0
    if side != model.config.image_size:
        raise EvaluationError(
            f"image size mismatch: checkpoint expects {model.config.image_size}px,"
            f" dataset has {side}px"
        )
    records = _select_records(dataset, args.dataset, args.split)
    subset = Dataset(records=records, languages=list(dataset.languages))
    languages = [part for part in args.languages.split(",") if part] if args.languages else None

    out = Path(args.output).resolve()
    out.mkdir(parents=True, exist_ok=True)
    effective = {
        "checkpoint": str(Path(args.checkpoint).resolve()),
        "dataset": str(Path(args.dataset).resolve()),
        "split": args.split,
        "direction": args.direction,
        "caption_mode": args.caption_mode,
        "languages": ",".join(languages or []),
        "k": args.k,
        "baseline": args.baseline or "",
    }
    dataset_id = manifest_digest(args.dataset)
    # hash content digests instead of paths so identical runs in different
    # directories produce byte-identical reports
    identity = dict(
        effective,
        checkpoint=hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()[:12],
        dataset=dataset_id,
    )
    config_hash = hashlib.sha256(
        "\n".join(f"{k}={v}" for k, v in sorted(identity.items())).encode("utf-8")
    ).hexdigest()[:12]
    metadata = {
        "config_hash": config_hash,
        "seed": str(model.metadata.get("seeds", "")),
        "dataset_id": dataset_id,
        "run_id": str(model.metadata.get("run_id", "")),
        "split": args.split,
    }
    report = E.evaluate(
        model,
        subset,
        vocab,
        direction=args.direction,
        caption_mode=args.caption_mode,
        languages=languages,
        metadata=metadata,
    )
    E.write_report_csv(report, out / "report.csv")
    E.write_report_jsonl(report, out / "report.jsonl")
    _write_effective(out / "eval.effective", effective)
    if (out / RECORD_FILE).exists():
        with open(out / RECORD_FILE, "a", encoding="utf-8") as fh:
            fh.write(
                json.dumps(
                    {"record": "report", "path": str(out / "report.jsonl")}, sort_keys=True
                )
                + "\n"
            )

    print(f"evaluated {len(records)} images, direction {report.direction}")
    header = ["language"] + list(E.METRIC_NAMES)
    print("  ".join(f"{cell:>9}" for cell in header))
    for language, row in list(report.rows.items()) + [("average", report.average)]:
        cells = [f"{getattr(row, name):9.2f}" for name in E.METRIC_NAMES]
        print("  ".join([f"{language:>9}"] + cells))
    print(f"report written to {out / 'report.csv'}")

    if args.baseline:
        _baseline_section(report, args.baseline, out)
    return 0


def _baseline_section(report, spec_text: str, out: Path) -> None:
    source, sep, model_name = spec_text.partition(":")
    if not sep or not source or not model_name:
        raise ConfigError(
            f"--baseline wants <source>:<model>, got {spec_text!r};"
            f" available: {E.list_baseline_tables()}"
        )
    table = E.load_baseline_table(source, model_name)
    recomputed = table.recompute_average()
    for metric, value in sorted(recomputed.items()):
        stored = table.average.get(metric)
        note = f" (published average {stored})" if stored is not None else ""
        print(f"baseline {source}:{model_name} mean {metric} = {value:.2f}{note}")
    for metric, gap in sorted(table.average_discrepancies().items()):
        print(f"warning: published {metric} average differs from recomputed mean by {gap:.3f}")
    shared = [lang for lang in report.rows if lang in table.entries]
    if not shared:
        print("no shared languages with the baseline; skipping per-language deltas")
        return
    cmp = E.compare_to_baseline(report, table)
    path = out / f"deltas_{source}_{model_name}.csv"
    lines = ["language," + ",".join(E.METRIC_NAMES)]
    for language in cmp.languages:
        cells = [repr(cmp.deltas[language].get(m)) if m in cmp.deltas[language] else "" for m in E.METRIC_NAMES]
        lines.append(",".join([language] + cells))
    lines.append(
        ",".join(["average"] + [repr(cmp.average_delta.get(m)) if m in cmp.average_delta else "" for m in E.METRIC_NAMES])
    )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"deltas against {source}:{model_name} written to {path}")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _load_run(run_dir: Path):
    record_path = run_dir / RECORD_FILE
    if not record_path.exists():
        raise ConfigError(f"{run_dir} has no {RECORD_FILE}; is it a training output dir?")
    run_line, report_path = None, None
    for line in record_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        if entry.get("record") == "run" and run_line is None:
            run_line = entry
        elif entry.get("record") == "report":
            report_path = entry.get("path")
    if run_line is None:
        raise ConfigError(f"{record_path} has no run entry")
    if report_path is None:
        raise ConfigError(
            f"run {run_line.get('run_id')} in {run_dir} has no evaluation report;"
            " run the eval command with this directory as --output first"
        )
    return run_line, E.read_report_jsonl(report_path)


def cmd_report(args) -> int:
    run_dirs = [Path(p).resolve() for p in args.runs]
    if len(run_dirs) < 2:
        raise ConfigError(f"need at least 2 runs to compare, got {len(run_dirs)}")
    loaded = [_load_run(run_dir) for run_dir in run_dirs]
    dataset_ids = {report.metadata.get("dataset_id", "") for _, report in loaded}
    if len(dataset_ids) > 1 and not args.allow_mixed:
        raise ConfigError(
            f"runs were evaluated on {len(dataset_ids)} different datasets;"
            " pass --allow-mixed to compare anyway"
        )
    out = Path(args.output).resolve()
    out.mkdir(parents=True, exist_ok=True)
    columns = ["run_id", "regime", "optimizer", "preset", "direction"] + list(E.METRIC_NAMES)
    lines = [",".join(columns)]
    for run_line, report in loaded:
        config = run_line.get("config", {})
        cells = [
            str(run_line.get("run_id", "")),
            str(config.get("regime", "")),
            str(config.get("optimizer", "")),
            str(config.get("preset", "")),
            report.direction,
        ] + [repr(getattr(report.average, name)) for name in E.METRIC_NAMES]
        lines.append(",".join(cells))
    (out / "comparison.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_effective(
        out / "report.effective",
        {"runs": ";".join(str(d) for d in run_dirs), "allow_mixed": args.allow_mixed},
    )
    print("  ".join(f"{c:>12}" for c in columns))
    for line in lines[1:]:
        cells = line.split(",")
        shown = cells[:5] + [f"{float(v):.2f}" for v in cells[5:]]
        print("  ".join(f"{c:>12}" for c in shown))
    print(f"comparison written to {out / 'comparison.csv'}")
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clipforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("datagen", help="generate a synthetic captioned-image corpus")
    p.add_argument("--output", required=True, help="dataset directory to create")
    p.add_argument("--images", type=int, default=2000)
    p.add_argument("--languages", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--val-fraction", type=float, default=0.15)
    p.add_argument("--threshold", type=float, default=4.5)
    p.add_argument("--force", action="store_true", help="replace an existing output dir")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train a dual encoder on a generated dataset")
    p.add_argument("--config", help="key=value config file (flags and env override it)")
    p.add_argument("--force", action="store_true", help="discard any previous run in the output dir")
    flags = {
        "dataset_dir": ("--dataset", "dataset directory from datagen"),
        "output_dir": ("--output", "run output directory"),
        "preset": ("--preset", "tower preset pair, e.g. l-b"),
        "regime": ("--regime", "freeze regime: full, text-encoder, or projection"),
        "optimizer": ("--optimizer", "lion, lion8, or adamw"),
        "lr": ("--lr", "peak learning rate"),
        "weight_decay": ("--weight-decay", "decoupled weight decay"),
        "batch_size": ("--batch-size", "contrastive batch size (>= 2)"),
        "epochs": ("--epochs", "training epochs"),
        "warmup_steps": ("--warmup-steps", "linear warmup steps"),
        "data_seed": ("--data-seed", "batch order seed"),
        "init_seed": ("--init-seed", "weight init seed"),
        "sampler_seed": ("--sampler-seed", "caption language sampler seed"),
        "languages": ("--languages", "comma-separated training language subset"),
        "init_from": ("--init-from", "checkpoint to initialize weights from"),
    }
    for dest, (flag, help_text) in flags.items():
        p.add_argument(flag, dest=dest, default=None, help=help_text)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on retrieval metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.add_argument("--direction", choices=E.DIRECTIONS, default=E.TEXT_TO_IMAGE)
    p.add_argument("--caption-mode", choices=E.CAPTION_MODES, default=E.FIRST_CAPTION)
    p.add_argument("--languages", default="", help="comma-separated language subset")
    p.add_argument("--k", default="1,5,10", help="recall/MRR cutoffs (fixed set)")
    p.add_argument("--baseline", default="", help="published table to compare: <source>:<model>")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tabulate evaluation results across runs")
    p.add_argument("--runs", nargs="+", required=True, help="two or more run directories")
    p.add_argument("--output", required=True)
    p.add_argument("--allow-mixed", action="store_true", help="permit different eval datasets")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ClipforgeError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
