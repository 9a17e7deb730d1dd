"""Dataset machinery: schema, filtering, splitting, epoch sampling,
tokenization, and a procedural multilingual corpus generator.

A dataset is a directory holding a tab-separated manifest plus one raw RGB
file per image.  Every record carries one caption per language in the
dataset's language set; the loader rejects anything else, which keeps all
languages represented exactly equally.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetFormatError

MANIFEST_NAME = "manifest.tsv"
SPLIT_NAME = "splits.tsv"
PIXEL_DIR = "pixels"

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

BASE_LANGUAGE = "eng_Latn"

SIZES = {"small": 0.30, "medium": 0.45, "large": 0.60}
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 220, 50),
    "purple": (150, 60, 200),
    "orange": (240, 140, 30),
    "white": (240, 240, 240),
    "cyan": (60, 210, 220),
}
SHAPES = ("circle", "square", "triangle", "cross")
VERTICALS = ("top", "bottom")
HORIZONTALS = ("left", "right")
BASE_WORDS = tuple(SIZES) + tuple(COLORS) + SHAPES + VERTICALS + HORIZONTALS
BACKGROUND_DIV = 4  # background is the fill color dimmed by this factor


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

@dataclass
class CaptionedImage:
    id: str
    aesthetic_score: float
    captions: dict
    pixels: np.ndarray | None = None  # uint8 [H, W, 3]
    pixel_path: Path | None = None

    def get_pixels(self) -> np.ndarray:
        if self.pixels is None:
            if self.pixel_path is None:
                raise DatasetFormatError(f"record {self.id}: no pixel data or path")
            self.pixels = read_pixel_file(self.pixel_path)
        return self.pixels


@dataclass
class Dataset:
    records: list
    languages: list
    root: Path | None = None
    ciphers: dict | None = None  # language -> {base word -> surface form}

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class EpochPlan:
    seed: int
    epoch: int
    choices: dict  # image id -> language code


@dataclass
class Vocabulary:
    token_to_id: dict

    @property
    def size(self) -> int:
        return len(self.token_to_id) + len(RESERVED_TOKENS)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def ordered_tokens(self) -> list:
        """Non-reserved tokens in id order, for serialization."""
        return sorted(self.token_to_id, key=self.token_to_id.get)

    @staticmethod
    def build(captions) -> "Vocabulary":
        tokens = sorted({word for text in captions for word in text.lower().split()})
        return Vocabulary.from_tokens(tokens)

    @staticmethod
    def from_tokens(tokens) -> "Vocabulary":
        base = len(RESERVED_TOKENS)
        return Vocabulary({tok: base + i for i, tok in enumerate(tokens)})

    @staticmethod
    def for_dataset(dataset: Dataset) -> "Vocabulary":
        return Vocabulary.build(
            caption for record in dataset.records for caption in record.captions.values()
        )


# ---------------------------------------------------------------------------
# filtering, splitting, sampling
# ---------------------------------------------------------------------------

def aesthetic_filter(records, threshold: float = 4.5) -> list:
    """Keep records scoring strictly above the threshold, in input order."""
    return [r for r in records if r.aesthetic_score > threshold]


def split(records, val_fraction: float = 0.15, seed: int = 0):
    """Seeded disjoint train/validation split.

    The validation size is round(val_fraction * N); both sides keep the
    original record order.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"split: val_fraction must be in (0, 1), got {val_fraction}")
    if not records:
        raise DatasetFormatError("split: empty record list")
    n = len(records)
    n_val = int(round(val_fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val


def choose_language(image_id: str, languages, epoch: int, seed: int) -> str:
    """Deterministic uniform language pick for one image in one epoch.

    Hash-based so the choice depends only on (seed, epoch, image id) and the
    language set, never on record order or subset iteration.
    """
    ordered = sorted(languages)
    digest = hashlib.sha256(f"{seed}:{epoch}:{image_id}".encode("utf-8")).digest()
    return ordered[int.from_bytes(digest[:8], "big") % len(ordered)]


def sample_epoch(records, epoch: int, seed: int, languages=None) -> EpochPlan:
    """Pick one caption language per image for an epoch."""
    if languages is None:
        if not records:
            raise ConfigError("sample_epoch: no records and no explicit language set")
        languages = list(records[0].captions)
    languages = list(languages)
    if not languages:
        raise ConfigError("sample_epoch: empty language set")
    choices = {r.id: choose_language(r.id, languages, epoch, seed) for r in records}
    return EpochPlan(seed=seed, epoch=epoch, choices=choices)


def tokenize(text: str, vocab: Vocabulary, max_len: int):
    """Lowercase whitespace tokenization with BOS/EOS framing and padding.

    Returns (ids array of length max_len, valid length).  Over-long text is
    truncated to max_len with BOS and EOS preserved.
    """
    if max_len < 3:
        raise ConfigError(f"tokenize: max_len must be >= 3, got {max_len}")
    ids = [BOS_ID] + [vocab.id_of(w) for w in text.lower().split()] + [EOS_ID]
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [EOS_ID]
    length = len(ids)
    ids = ids + [PAD_ID] * (max_len - length)
    return np.asarray(ids, dtype=np.int64), length


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def cipher_code(index: int) -> str:
    """Language code for cipher language #index (1-based): 'aab_Ciph', ..."""
    letters = []
    value = index
    for _ in range(3):
        letters.append(chr(ord("a") + value % 26))
        value //= 26
    return "".join(reversed(letters)) + "_Ciph"


def _cipher_map(corpus_seed: int, lang_index: int) -> dict:
    """Bijective word substitution for one cipher language.

    Surface forms carry the language's three-letter prefix, so tokens never
    collide across languages or with the base language.
    """
    rng = np.random.default_rng([corpus_seed, 7919, lang_index])
    perm = rng.permutation(len(BASE_WORDS))
    prefix = cipher_code(lang_index)[:3]
    return {BASE_WORDS[i]: prefix + BASE_WORDS[perm[i]] for i in range(len(BASE_WORDS))}


def render_image(shape: str, color: str, size_name: str, cx: int, cy: int, image_size: int) -> np.ndarray:
    """Draw one filled shape over a dark tint of the same color; uint8 [H, W, 3].

    The whole canvas carries the color cue so that global image statistics
    distinguish records even at small shape sizes; the bright region encodes
    shape, size, and quadrant.
    """
    img = np.empty((image_size, image_size, 3), dtype=np.uint8)
    img[:] = tuple(v // BACKGROUND_DIV for v in COLORS[color])
    half = max(1, round(image_size * SIZES[size_name])) / 2.0
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    if shape == "circle":
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= half * half
    elif shape == "square":
        mask = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    elif shape == "triangle":
        rel = yy - (cy - half)
        mask = (rel >= 0) & (yy <= cy + half) & (np.abs(xx - cx) <= rel / 2.0)
    else:  # cross
        bar = max(1, round(half / 2.0))
        mask = ((np.abs(xx - cx) < bar) & (np.abs(yy - cy) <= half)) | (
            (np.abs(yy - cy) < bar) & (np.abs(xx - cx) <= half)
        )
    img[mask] = COLORS[color]
    return img


def generate_synthetic_corpus(
    n_images: int, n_languages: int, image_size: int = 32, seed: int = 0
) -> Dataset:
    """Procedural captioned-image corpus.

    Each image shows one shape (4 shapes x 8 colors x 3 sizes x 4 position
    quadrants) and carries a base caption like "small red circle top left"
    plus one deterministically ciphered caption per extra language.
    Aesthetic scores are uniform on [3.5, 6.5] so a 4.5 threshold keeps
    roughly two thirds.
    """
    if n_languages < 1:
        raise ConfigError(f"corpus: n_languages must be >= 1, got {n_languages}")
    if image_size < 8:
        raise ConfigError(f"corpus: image_size must be >= 8, got {image_size}")
    languages = [BASE_LANGUAGE] + [cipher_code(i) for i in range(1, n_languages)]
    ciphers = {
        cipher_code(i): _cipher_map(seed, i) for i in range(1, n_languages)
    }
    rng = np.random.default_rng(seed)
    quarter = image_size // 4
    jitter = max(1, image_size // 16)
    records = []
    for i in range(n_images):
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = list(COLORS)[rng.integers(len(COLORS))]
        size_name = list(SIZES)[rng.integers(len(SIZES))]
        vert = VERTICALS[rng.integers(2)]
        horiz = HORIZONTALS[rng.integers(2)]
        cx = quarter + (image_size // 2) * (horiz == "right") + int(rng.integers(-jitter, jitter + 1))
        cy = quarter + (image_size // 2) * (vert == "bottom") + int(rng.integers(-jitter, jitter + 1))
        score = float(rng.uniform(3.5, 6.5))
        base = f"{size_name} {color} {shape} {vert} {horiz}"
        captions = {BASE_LANGUAGE: base}
        for lang in languages[1:]:
            table = ciphers[lang]
            captions[lang] = " ".join(table[w] for w in base.split())
        records.append(
            CaptionedImage(
                id=f"img{i:06d}",
                aesthetic_score=score,
                captions=captions,
                pixels=render_image(shape, color, size_name, cx, cy, image_size),
            )
        )
    return Dataset(records=records, languages=languages, ciphers=ciphers)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def read_pixel_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 3:
        raise DatasetFormatError(f"pixel file {path}: size {len(raw)} is not a multiple of 3")
    side = math.isqrt(len(raw) // 3)
    if side * side * 3 != len(raw):
        raise DatasetFormatError(f"pixel file {path}: {len(raw)} bytes is not a square RGB image")
    return np.frombuffer(raw, dtype=np.uint8).reshape(side, side, 3).copy()


def save_dataset(dataset: Dataset, path) -> None:
    """Write manifest + raw pixel files under a directory."""
    root = Path(path)
    (root / PIXEL_DIR).mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(["id", "aesthetic_score", "pixels"] + list(dataset.languages))]
    for record in dataset.records:
        if set(record.captions) != set(dataset.languages):
            raise DatasetFormatError(
                f"record {record.id}: caption languages do not match the dataset language set"
            )
        rel = f"{PIXEL_DIR}/{record.id}.rgb"
        pixels = record.get_pixels()
        (root / rel).write_bytes(pixels.astype(np.uint8).tobytes())
        cells = [record.id, repr(float(record.aesthetic_score)), rel]
        cells += [record.captions[lang] for lang in dataset.languages]
        lines.append("\t".join(cells))
    (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    """Parse a dataset directory; pixel files are opened lazily."""
    root = Path(path)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetFormatError(f"no manifest at {manifest}")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetFormatError(f"{manifest}: empty manifest")
    header = lines[0].split("\t")
    if header[:3] != ["id", "aesthetic_score", "pixels"]:
        raise DatasetFormatError(
            f"{manifest}: header must start with id/aesthetic_score/pixels, got {header[:3]}"
        )
    languages = header[3:]
    if not languages:
        raise DatasetFormatError(f"{manifest}: no language columns in header")
    if len(set(languages)) != len(languages):
        raise DatasetFormatError(f"{manifest}: duplicate language column in header")
    if any(not lang for lang in languages):
        raise DatasetFormatError(f"{manifest}: empty language code in header")

    records = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split("\t")
        if len(cells) != 3 + len(languages):
            raise DatasetFormatError(
                f"{manifest}:{lineno}: record {cells[0]!r} has {len(cells)} fields,"
                f" expected {3 + len(languages)}"
            )
        rid, score_text, rel = cells[0], cells[1], cells[2]
        if rid in seen:
            raise DatasetFormatError(f"{manifest}:{lineno}: duplicate record id {rid!r}")
        seen.add(rid)
        try:
            score = float(score_text)
        except ValueError:
            raise DatasetFormatError(
                f"{manifest}:{lineno}: record {rid!r} has bad aesthetic score {score_text!r}"
            ) from None
        if not math.isfinite(score):
            raise DatasetFormatError(
                f"{manifest}:{lineno}: record {rid!r} has non-finite aesthetic score"
            )
        captions = {}
        for lang, caption in zip(languages, cells[3:]):
            if not caption:
                raise DatasetFormatError(
                    f"{manifest}:{lineno}: record {rid!r} is missing its {lang} caption"
                )
            captions[lang] = caption
        records.append(
            CaptionedImage(
                id=rid,
                aesthetic_score=score,
                captions=captions,
                pixel_path=root / rel,
            )
        )
    return Dataset(records=records, languages=languages, root=root)


def save_split(dataset_path, train_ids, val_ids) -> None:
    lines = [f"{rid}\ttrain" for rid in train_ids] + [f"{rid}\tval" for rid in val_ids]
    (Path(dataset_path) / SPLIT_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_split(dataset_path):
    path = Path(dataset_path) / SPLIT_NAME
    if not path.is_file():
        raise DatasetFormatError(f"no split file at {path}")
    train_ids, val_ids = [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        rid, _, label = line.partition("\t")
        if label == "train":
            train_ids.append(rid)
        elif label == "val":
            val_ids.append(rid)
        else:
            raise DatasetFormatError(f"{path}:{lineno}: bad split label {label!r}")
    return train_ids, val_ids


def manifest_digest(dataset_path) -> str:
    """Stable identity of a dataset: sha256 of its manifest bytes."""
    manifest = Path(dataset_path) / MANIFEST_NAME
    return hashlib.sha256(manifest.read_bytes()).hexdigest()
