"""Training orchestration: run configuration, the epoch loop, and run records.

A run is fully described by a RunConfig: preset pair, freeze regime,
optimizer, schedule knobs, and three independent seeds (data order, weight
init, language sampler).  Identical configs produce bit-identical checkpoints,
so any run can be reproduced or resumed from its output directory alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as M
from . import optim
from .contrastive import clip_loss, similarity
from .data import (
    Vocabulary,
    load_dataset,
    load_split,
    manifest_digest,
    sample_epoch,
    tokenize,
)
from .errors import ConfigError, DatasetFormatError, TrainingError

OPTIMIZERS = ("lion", "lion8", "adamw")
REGIMES = tuple(r.value for r in M.FreezeRegime)

MAX_TEXT_LEN = 16

LAST_CHECKPOINT = "last.nclp"
BEST_CHECKPOINT = "best.nclp"
STATE_FILE = "last.optstate"
RECORD_FILE = "run_record.jsonl"
EFFECTIVE_CONFIG = "config.effective"


@dataclass(frozen=True)
class RunConfig:
    dataset_dir: str = ""
    output_dir: str = ""
    preset: str = "l-b"
    regime: str = "full"
    optimizer: str = "lion"
    lr: float = 3e-4
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 10
    warmup_steps: int = 20
    data_seed: int = 0
    init_seed: int = 0
    sampler_seed: int = 4
    languages: tuple = ()
    init_from: str = ""

    def __post_init__(self):
        parts = self.preset.split("-")
        if len(parts) == 1:
            parts = parts * 2
        if len(parts) != 2 or any(p not in M.PRESETS for p in parts):
            raise ConfigError(
                f"unknown preset pair {self.preset!r}; expected letters from"
                f" {sorted(M.PRESETS)} joined by '-'"
            )
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(
                f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}"
            )
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size must be >= 2 (the loss needs in-batch negatives),"
                f" got {self.batch_size}"
            )
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        for name in ("data_seed", "init_seed", "sampler_seed"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ConfigError(f"{name} must be a non-negative int, got {value!r}")
        if len(set(self.languages)) != len(self.languages):
            raise ConfigError(f"duplicate entries in languages {self.languages}")

    def resolved(self) -> "RunConfig":
        """Absolute-path copy; all paths are fixed before the run starts."""
        return dataclasses.replace(
            self,
            dataset_dir=str(Path(self.dataset_dir).resolve()),
            output_dir=str(Path(self.output_dir).resolve()),
            init_from=str(Path(self.init_from).resolve()) if self.init_from else "",
        )


_FIELD_PARSERS = {
    "lr": float,
    "weight_decay": float,
    "batch_size": int,
    "epochs": int,
    "warmup_steps": int,
    "data_seed": int,
    "init_seed": int,
    "sampler_seed": int,
    "languages": lambda s: tuple(part for part in s.split(",") if part),
}

_FIELD_NAMES = tuple(f.name for f in dataclasses.fields(RunConfig))


def coerce_field(name: str, text: str):
    """Parse one key=value assignment into a RunConfig field value."""
    if name not in _FIELD_NAMES:
        raise ConfigError(f"unknown config key {name!r}; known keys: {sorted(_FIELD_NAMES)}")
    parser = _FIELD_PARSERS.get(name, str)
    try:
        return parser(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r} ({exc})") from exc


def read_config_file(path) -> dict:
    """Line-oriented key=value file; blank lines and # comments are skipped."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    values = {}
    for number, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{number}: expected key=value, got {line!r}")
        values[key.strip()] = coerce_field(key.strip(), value.strip())
    return values


def config_to_text(config: RunConfig, skip=()) -> str:
    lines = []
    for field in sorted(dataclasses.fields(config), key=lambda f: f.name):
        if field.name in skip:
            continue
        value = getattr(config, field.name)
        if field.name == "languages":
            value = ",".join(value)
        lines.append(f"{field.name}={value}")
    return "\n".join(lines) + "\n"


def run_id_of(config: RunConfig) -> str:
    """Content-addressed run identity.

    Paths are replaced by digests of what they point at, so the same
    training run gets the same id no matter where its inputs and outputs
    live on disk.
    """
    text = config_to_text(config, skip=("dataset_dir", "output_dir", "init_from"))
    text += f"dataset_digest={manifest_digest(config.dataset_dir)}\n"
    if config.init_from:
        digest = hashlib.sha256(Path(config.init_from).read_bytes()).hexdigest()
        text += f"init_from_digest={digest}\n"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def _scheduled_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    # 1-based warmup count so the very first step is never a zero-lr no-op
    if step < warmup_steps:
        return optim.lr_schedule(step + 1, total_steps, base_lr, warmup_steps)
    return optim.lr_schedule(step, total_steps, base_lr, warmup_steps)


def _iter_batches(items, batch_size: int, rng=None):
    order = rng.permutation(len(items)) if rng is not None else np.arange(len(items))
    for start in range(0, len(items), batch_size):
        chunk = order[start : start + batch_size]
        if chunk.size >= 2:  # a single leftover row has no in-batch negatives
            yield [items[i] for i in chunk]


def batch_loss(model: M.DualEncoderModel, records, choices: dict, vocab: Vocabulary):
    """Symmetric contrastive loss of one batch under a language plan."""
    pixels = np.stack([r.get_pixels() for r in records]).transpose(0, 3, 1, 2)
    image_emb = M.encode_image(model, pixels)
    encoded = [
        tokenize(r.captions[choices[r.id]], vocab, model.config.max_text_len)
        for r in records
    ]
    tokens = np.stack([ids for ids, _ in encoded])
    lengths = np.asarray([n for _, n in encoded])
    text_emb = M.encode_text(model, tokens, lengths)
    return clip_loss(similarity(image_emb, text_emb, model.logit_scale))


def dataset_loss(model, records, choices, vocab, batch_size: int) -> float:
    total, count = 0.0, 0
    for batch in _iter_batches(records, batch_size):
        loss = float(batch_loss(model, batch, choices, vocab).data)
        total += loss * len(batch)
        count += len(batch)
    if count == 0:
        raise TrainingError("fewer than 2 records; cannot compute a contrastive loss")
    return total / count


# ---------------------------------------------------------------------------
# run state on disk
# ---------------------------------------------------------------------------

def _save_state(path, optimizer: str, state: optim.OptimizerState) -> None:
    meta, arrays = optim.state_to_arrays(state)
    M.write_tensor_file(path, {"optimizer": optimizer, "state": meta}, arrays)


def _load_state(path, optimizer: str, params: dict) -> optim.OptimizerState:
    header, arrays = M.read_tensor_file(path)
    if header.get("optimizer") != optimizer:
        raise ConfigError(
            f"cannot resume: saved optimizer {header.get('optimizer')!r}"
            f" does not match configured {optimizer!r}"
        )
    return optim.state_from_arrays(header["state"], arrays, params)


def _append_record(out: Path, entry: dict) -> None:
    with open(out / RECORD_FILE, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    last_lr: float
    seconds: float


@dataclass
class RunResult:
    run_id: str
    config: RunConfig
    stats: list
    best_val_loss: float
    total_steps: int
    last_checkpoint: str
    best_checkpoint: str
    model: M.DualEncoderModel


def _step_fn(config: RunConfig):
    if config.optimizer == "adamw":
        return optim.adamw_step, lambda lr: optim.AdamWConfig(
            lr=lr, weight_decay=config.weight_decay
        )
    step = optim.lion8_step if config.optimizer == "lion8" else optim.lion_step
    return step, lambda lr: optim.LionConfig(lr=lr, weight_decay=config.weight_decay)


def run_training(config: RunConfig, log=None) -> RunResult:
    """Execute (or resume) one training run and return its summary.

    The output directory accumulates: the effective config, a line-delimited
    run record, the latest checkpoint + optimizer state, and the best
    checkpoint by validation loss.
    """
    if not config.dataset_dir or not config.output_dir:
        raise ConfigError("training needs both dataset_dir and output_dir")
    config = config.resolved()
    say = log if log is not None else (lambda _: None)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    dataset = load_dataset(config.dataset_dir)
    train_ids, val_ids = load_split(config.dataset_dir)
    by_id = {r.id: r for r in dataset.records}
    missing = [i for i in (*train_ids, *val_ids) if i not in by_id]
    if missing:
        raise DatasetFormatError(
            f"split references {len(missing)} unknown record ids (first: {missing[0]})"
        )
    train_records = [by_id[i] for i in train_ids]
    val_records = [by_id[i] for i in val_ids]
    if len(train_records) < 2 or len(val_records) < 2:
        raise TrainingError(
            f"need at least 2 train and 2 validation records, got"
            f" {len(train_records)}/{len(val_records)}"
        )

    languages = list(config.languages) if config.languages else list(dataset.languages)
    unknown = sorted(set(languages) - set(dataset.languages))
    if unknown:
        raise ConfigError(f"languages not in dataset: {unknown}")

    vocab = Vocabulary.for_dataset(dataset)
    image_size = train_records[0].get_pixels().shape[0]
    model_config = M.ModelConfig.from_presets(
        config.preset, vocab.size, MAX_TEXT_LEN, image_size=image_size
    )

    run_id = run_id_of(config)
    effective = config_to_text(config)
    config_path = out / EFFECTIVE_CONFIG
    if config_path.exists():
        if config_path.read_text(encoding="utf-8") != effective:
            raise ConfigError(
                f"output dir {out} belongs to a different run configuration;"
                " use --force to start over"
            )
    else:
        config_path.write_text(effective, encoding="utf-8")

    last_path, best_path = out / LAST_CHECKPOINT, out / BEST_CHECKPOINT
    if last_path.exists():
        model = M.load_checkpoint(last_path)
        if model.config != model_config:
            raise ConfigError(
                "cannot resume: checkpoint model config does not match the run config"
            )
        state = _load_state(out / STATE_FILE, config.optimizer, model.params)
        next_epoch = int(model.metadata["next_epoch"])
        best_val = float(model.metadata["best_val"])
        say(f"resuming run {run_id} at epoch {next_epoch}")
    else:
        if config.init_from:
            model = M.load_checkpoint(config.init_from)
            if model.config != model_config:
                raise ConfigError(
                    f"init checkpoint {config.init_from} model config does not match"
                    " the run config (different preset, vocabulary, or image size)"
                )
        else:
            model = M.DualEncoderModel(model_config, init_seed=config.init_seed)
        state = optim.OptimizerState()
        next_epoch = 0
        best_val = float("inf")
        _append_record(
            out,
            {
                "record": "run",
                "run_id": run_id,
                "config": {f.name: getattr(config, f.name) for f in dataclasses.fields(config)},
            },
        )

    M.apply_freeze(model, M.FreezeRegime(config.regime))
    step_fn, make_cfg = _step_fn(config)

    steps_per_epoch = sum(1 for _ in _iter_batches(train_ids, config.batch_size))
    total_steps = steps_per_epoch * config.epochs
    global_step = state.step_count
    seeds = f"{config.data_seed}/{config.init_seed}/{config.sampler_seed}"

    stats = []
    val_plan = sample_epoch(val_records, 0, config.sampler_seed, languages)
    for epoch in range(next_epoch, config.epochs):
        start = time.perf_counter()
        plan = sample_epoch(train_records, epoch, config.sampler_seed, languages)
        rng = np.random.default_rng([config.data_seed, epoch])
        epoch_total, epoch_count, last_lr = 0.0, 0, 0.0
        for batch_ids in _iter_batches(train_ids, config.batch_size, rng):
            batch = [by_id[i] for i in batch_ids]
            loss = batch_loss(model, batch, plan.choices, vocab)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch} step {global_step}"
                )
            model.zero_grad()
            loss.backward()
            grads = {name: p.grad for name, p in model.params.items()}
            last_lr = _scheduled_lr(global_step, total_steps, config.lr, config.warmup_steps)
            step_fn(model.params, grads, state, make_cfg(last_lr), model.trainable_mask)
            global_step += 1
            epoch_total += value * len(batch)
            epoch_count += len(batch)

        val_loss = dataset_loss(model, val_records, val_plan.choices, vocab, config.batch_size)
        entry = EpochStats(
            epoch=epoch,
            train_loss=epoch_total / epoch_count,
            val_loss=val_loss,
            last_lr=last_lr,
            seconds=time.perf_counter() - start,
        )
        stats.append(entry)

        if val_loss < best_val:
            best_val = val_loss
            M.save_checkpoint(
                model,
                best_path,
                {"run_id": run_id, "epoch": epoch, "val_loss": val_loss, "seeds": seeds},
            )
        M.save_checkpoint(
            model,
            last_path,
            {
                "run_id": run_id,
                "next_epoch": epoch + 1,
                "best_val": best_val,
                "val_loss": val_loss,
                "seeds": seeds,
            },
        )
        _save_state(out / STATE_FILE, config.optimizer, state)
        _append_record(
            out,
            {
                "record": "epoch",
                "run_id": run_id,
                "epoch": epoch,
                "train_loss": entry.train_loss,
                "val_loss": entry.val_loss,
                "last_lr": entry.last_lr,
                "seconds": entry.seconds,
            },
        )
        say(
            f"epoch {epoch + 1}/{config.epochs}: train {entry.train_loss:.4f}"
            f" val {entry.val_loss:.4f} lr {entry.last_lr:.2e} ({entry.seconds:.1f}s)"
        )

    return RunResult(
        run_id=run_id,
        config=config,
        stats=stats,
        best_val_loss=best_val,
        total_steps=global_step,
        last_checkpoint=str(last_path),
        best_checkpoint=str(best_path),
        model=model,
    )
