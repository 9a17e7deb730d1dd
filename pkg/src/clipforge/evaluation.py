"""Retrieval metrics, per-language reports, and published-baseline comparison.

The primitive is the 1-based rank of the first relevant candidate under
descending inner-product score (ties broken by ascending candidate index).
Recall@K and MRR@K are pure functions of those ranks.  Reports carry one row
per language plus an average row that is the exact arithmetic mean of the
language rows; rounding to two decimals happens only at serialization time.

Baseline numbers for four public benchmarks ship as CSV files next to this
module.  The package never claims to reproduce them, it only compares runs
against them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import model as M
from .data import UNK_ID, tokenize
from .errors import ComparisonError, ConfigError, EvaluationError

TEXT_TO_IMAGE = "text_to_image"
IMAGE_TO_TEXT = "image_to_text"
DIRECTIONS = (TEXT_TO_IMAGE, IMAGE_TO_TEXT)

FIRST_CAPTION = "first_caption"
ALL_CAPTIONS = "all_captions"
CAPTION_MODES = (FIRST_CAPTION, ALL_CAPTIONS)

METRIC_NAMES = ("r_at_1", "r_at_5", "r_at_10", "mrr_at_1", "mrr_at_5", "mrr_at_10")

AVERAGE_ROW = "average"
AVERAGE_TOLERANCE = 0.005


# ---------------------------------------------------------------------------
# ranking primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalTask:
    """Queries with per-query relevance sets against a candidate pool."""

    direction: str
    queries: np.ndarray
    relevance: tuple
    candidates: np.ndarray

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise EvaluationError(
                f"unknown direction {self.direction!r}; expected one of {DIRECTIONS}"
            )
        if self.queries.ndim != 2 or self.candidates.ndim != 2:
            raise EvaluationError(
                f"queries and candidates must be 2-D, got {self.queries.shape}"
                f" and {self.candidates.shape}"
            )
        if self.candidates.shape[0] == 0:
            raise EvaluationError("candidate pool is empty")
        if self.queries.shape[1] != self.candidates.shape[1]:
            raise EvaluationError(
                f"embedding widths differ: queries {self.queries.shape[1]},"
                f" candidates {self.candidates.shape[1]}"
            )
        if len(self.relevance) != self.queries.shape[0]:
            raise EvaluationError(
                f"{len(self.relevance)} relevance sets for {self.queries.shape[0]} queries"
            )
        n = self.candidates.shape[0]
        for i, relevant in enumerate(self.relevance):
            if not relevant:
                raise EvaluationError(f"query {i}: relevance set is empty")
            if min(relevant) < 0 or max(relevant) >= n:
                raise EvaluationError(
                    f"query {i}: relevance set {sorted(relevant)} outside 0..{n - 1}"
                )


def rank_items(task: RetrievalTask) -> np.ndarray:
    """1-based rank of the best-ranked relevant candidate for each query."""
    scores = task.queries @ task.candidates.T
    ranks = np.empty(scores.shape[0], dtype=np.int64)
    for i, relevant in enumerate(task.relevance):
        # stable sort of the negated scores: descending score, ties by index
        order = np.argsort(-scores[i], kind="stable")
        position = np.empty(order.size, dtype=np.int64)
        position[order] = np.arange(order.size)
        ranks[i] = position[sorted(relevant)].min() + 1
    return ranks


def _check_ranks(ranks, k) -> np.ndarray:
    if k < 1:
        raise EvaluationError(f"k must be >= 1, got {k}")
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise EvaluationError("no query ranks to aggregate")
    return ranks


def recall_at_k(ranks, k: int) -> float:
    """Fraction of queries whose first relevant hit lands in the top k."""
    ranks = _check_ranks(ranks, k)
    return float(np.mean(ranks <= k))


def mrr_at_k(ranks, k: int) -> float:
    """Mean reciprocal rank, truncated to 0 for ranks beyond k."""
    ranks = _check_ranks(ranks, k)
    return float(np.mean(np.where(ranks <= k, 1.0 / ranks, 0.0)))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricRow:
    """Six retrieval metrics in percent."""

    r_at_1: float
    r_at_5: float
    r_at_10: float
    mrr_at_1: float
    mrr_at_5: float
    mrr_at_10: float

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_NAMES}


@dataclass(frozen=True)
class MetricReport:
    direction: str
    caption_mode: str
    rows: dict
    average: MetricRow
    metadata: dict


def metric_row_from_ranks(ranks) -> MetricRow:
    return MetricRow(
        r_at_1=100.0 * recall_at_k(ranks, 1),
        r_at_5=100.0 * recall_at_k(ranks, 5),
        r_at_10=100.0 * recall_at_k(ranks, 10),
        mrr_at_1=100.0 * mrr_at_k(ranks, 1),
        mrr_at_5=100.0 * mrr_at_k(ranks, 5),
        mrr_at_10=100.0 * mrr_at_k(ranks, 10),
    )


def _mean_row(rows: dict) -> MetricRow:
    return MetricRow(
        **{
            name: float(np.mean([getattr(row, name) for row in rows.values()]))
            for name in METRIC_NAMES
        }
    )


def _captions_of(record, language: str):
    value = record.captions[language]
    return (value,) if isinstance(value, str) else tuple(value)


def _batched(apply, arrays, batch_size: int):
    n = len(arrays[0])
    outs = []
    for start in range(0, n, batch_size):
        outs.append(apply(*(a[start : start + batch_size] for a in arrays)))
    return np.concatenate(outs, axis=0)


def evaluate(
    model: M.DualEncoderModel,
    dataset,
    vocab,
    direction: str = TEXT_TO_IMAGE,
    caption_mode: str = FIRST_CAPTION,
    languages=None,
    batch_size: int = 256,
    metadata: dict | None = None,
) -> MetricReport:
    """Embed a dataset once and score retrieval per language.

    text_to_image ranks the image pool for every caption query; image_to_text
    ranks the language's caption pool for every image.  first_caption keeps
    one caption per image and language; all_captions uses every caption, with
    an image's full caption set counting as relevant in image_to_text mode.
    """
    if direction not in DIRECTIONS:
        raise ConfigError(f"unknown direction {direction!r}; expected one of {DIRECTIONS}")
    if caption_mode not in CAPTION_MODES:
        raise ConfigError(
            f"unknown caption mode {caption_mode!r}; expected one of {CAPTION_MODES}"
        )
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    records = dataset.records
    if not records:
        raise EvaluationError("dataset has no records")
    if languages is None:
        languages = list(dataset.languages)
    shared = [lang for lang in languages if lang in dataset.languages]
    if not shared:
        raise EvaluationError(
            f"no requested language is present in the dataset; asked for"
            f" {sorted(languages)}, dataset has {sorted(dataset.languages)}"
        )

    pixels = np.stack([r.get_pixels() for r in records]).transpose(0, 3, 1, 2)
    image_emb = _batched(
        lambda chunk: M.encode_image(model, chunk).data, (pixels,), batch_size
    )

    max_len = model.config.max_text_len
    rows = {}
    covered = False
    for language in shared:
        texts, owners = [], []
        for index, record in enumerate(records):
            captions = _captions_of(record, language)
            if caption_mode == FIRST_CAPTION:
                captions = captions[:1]
            for caption in captions:
                texts.append(caption)
                owners.append(index)
        encoded = [tokenize(text, vocab, max_len) for text in texts]
        tokens = np.stack([ids for ids, _ in encoded])
        lengths = np.asarray([n for _, n in encoded])
        covered = covered or bool((tokens[:, 1:] > UNK_ID).any())
        text_emb = _batched(
            lambda t, n: M.encode_text(model, t, n).data, (tokens, lengths), batch_size
        )
        if direction == TEXT_TO_IMAGE:
            task = RetrievalTask(
                direction=direction,
                queries=text_emb,
                relevance=tuple(frozenset({owner}) for owner in owners),
                candidates=image_emb,
            )
        else:
            mine = {i: set() for i in range(len(records))}
            for caption_index, owner in enumerate(owners):
                mine[owner].add(caption_index)
            task = RetrievalTask(
                direction=direction,
                queries=image_emb,
                relevance=tuple(frozenset(mine[i]) for i in range(len(records))),
                candidates=text_emb,
            )
        rows[language] = metric_row_from_ranks(rank_items(task))
    if not covered:
        raise EvaluationError(
            "model vocabulary covers no caption token in any requested language"
        )
    return MetricReport(
        direction=direction,
        caption_mode=caption_mode,
        rows=rows,
        average=_mean_row(rows),
        metadata=dict(metadata or {}),
    )


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------

def write_report_csv(report: MetricReport, path) -> None:
    """Two-decimal CSV: one row per language, average row last."""
    lines = ["language," + ",".join(METRIC_NAMES)]
    for language, row in report.rows.items():
        cells = ",".join(f"{getattr(row, name):.2f}" for name in METRIC_NAMES)
        lines.append(f"{language},{cells}")
    cells = ",".join(f"{getattr(report.average, name):.2f}" for name in METRIC_NAMES)
    lines.append(f"{AVERAGE_ROW},{cells}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report_jsonl(report: MetricReport, path) -> None:
    """Line-delimited full-precision variant carrying run metadata."""
    lines = [
        json.dumps(
            {
                "record": "run",
                "direction": report.direction,
                "caption_mode": report.caption_mode,
                "metadata": report.metadata,
            },
            sort_keys=True,
        )
    ]
    for language, row in report.rows.items():
        lines.append(
            json.dumps({"record": "language", "language": language, **row.as_dict()}, sort_keys=True)
        )
    lines.append(json.dumps({"record": AVERAGE_ROW, **report.average.as_dict()}, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report_jsonl(path) -> MetricReport:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        entries = [json.loads(line) for line in lines if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise EvaluationError(f"cannot read report {path}: {exc}") from exc
    if not entries or entries[0].get("record") != "run" or entries[-1].get("record") != AVERAGE_ROW:
        raise EvaluationError(f"report {path} is missing its run or average line")
    head, *language_lines, tail = entries
    rows = {}
    try:
        for entry in language_lines:
            rows[entry["language"]] = MetricRow(**{m: entry[m] for m in METRIC_NAMES})
        average = MetricRow(**{m: tail[m] for m in METRIC_NAMES})
        return MetricReport(
            direction=head["direction"],
            caption_mode=head["caption_mode"],
            rows=rows,
            average=average,
            metadata=head.get("metadata", {}),
        )
    except KeyError as exc:
        raise EvaluationError(f"report {path} is missing field {exc}") from exc


# ---------------------------------------------------------------------------
# bundled baselines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BaselineTable:
    """Published per-language metrics for one model on one benchmark."""

    model: str
    source: str
    entries: dict
    average: dict

    def recompute_average(self) -> dict:
        out = {}
        for metric in METRIC_NAMES:
            values = [e[metric] for e in self.entries.values() if metric in e]
            if values:
                out[metric] = float(np.mean(values))
        return out

    def average_discrepancies(self, tolerance: float = AVERAGE_TOLERANCE) -> dict:
        """Stored-average cells that disagree with the recomputed mean."""
        recomputed = self.recompute_average()
        return {
            metric: abs(recomputed[metric] - stored)
            for metric, stored in self.average.items()
            if metric in recomputed and abs(recomputed[metric] - stored) > tolerance
        }


def _baseline_root():
    return resources.files(__package__).joinpath("baselines")


def list_baseline_tables() -> list:
    """Sorted (source, model) pairs available via load_baseline_table."""
    pairs = set()
    for entry in _baseline_root().iterdir():
        if entry.name.endswith(".csv"):
            lines = entry.read_text(encoding="utf-8").splitlines()[1:]
            pairs.update((line.split(",")[8], line.split(",")[0]) for line in lines if line)
    return sorted(pairs)


def load_baseline_table(source: str, model: str) -> BaselineTable:
    path = _baseline_root().joinpath(f"{source}.csv")
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (FileNotFoundError, OSError):
        known = sorted({s for s, _ in list_baseline_tables()})
        raise ComparisonError(f"no baseline source {source!r}; bundled: {known}") from None
    entries, average = {}, {}
    for line in lines[1:]:
        if not line:
            continue
        cells = line.split(",")
        if cells[0] != model:
            continue
        metrics = {
            name: float(cell) for name, cell in zip(METRIC_NAMES, cells[2:8]) if cell
        }
        if cells[1] == AVERAGE_ROW:
            average = metrics
        else:
            entries[cells[1]] = metrics
    if not entries:
        known = sorted({m for s, m in list_baseline_tables() if s == source})
        raise ComparisonError(f"no model {model!r} in source {source!r}; has {known}")
    return BaselineTable(model=model, source=source, entries=entries, average=average)


def baseline_from_report(report: MetricReport, model: str, source: str) -> BaselineTable:
    """View a run report as a baseline table (useful for run-to-run deltas)."""
    return BaselineTable(
        model=model,
        source=source,
        entries={language: row.as_dict() for language, row in report.rows.items()},
        average=report.average.as_dict(),
    )


@dataclass(frozen=True)
class BaselineComparison:
    model: str
    source: str
    languages: tuple
    deltas: dict
    average_delta: dict
    recomputed_average: dict
    average_flags: dict


def compare_to_baseline(report: MetricReport, baseline: BaselineTable) -> BaselineComparison:
    """Per-language and average report-minus-baseline deltas.

    The baseline average is recomputed from its own per-language entries;
    any stored average cell further than 0.005 from the recomputed mean is
    flagged.  Average deltas use the stored cell when present, otherwise the
    recomputed mean.
    """
    shared = [lang for lang in report.rows if lang in baseline.entries]
    if not shared:
        raise ComparisonError(
            f"no shared languages: report has {sorted(report.rows)},"
            f" baseline {baseline.source}/{baseline.model} has {sorted(baseline.entries)}"
        )
    deltas = {}
    for language in shared:
        row = report.rows[language]
        deltas[language] = {
            metric: getattr(row, metric) - value
            for metric, value in baseline.entries[language].items()
        }
    recomputed = baseline.recompute_average()
    reference = dict(recomputed)
    reference.update(baseline.average)
    average_delta = {
        metric: getattr(report.average, metric) - value
        for metric, value in reference.items()
    }
    flags = baseline.average_discrepancies()
    return BaselineComparison(
        model=baseline.model,
        source=baseline.source,
        languages=tuple(shared),
        deltas=deltas,
        average_delta=average_delta,
        recomputed_average=recomputed,
        average_flags=flags,
    )
