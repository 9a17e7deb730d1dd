"""Dual-encoder image-text model.

A patch-based transformer encodes images, a token-based transformer encodes
text, and two linear projections map both towers into one shared embedding
space where similarity is cosine.  A learnable scalar stores the log of the
similarity temperature.

Parameters live in a flat name -> Tensor dict.  Names are hierarchical
("image/block0/attn/q/w", "text/token_embed", "proj/visual", "logit_scale"),
which keeps freeze masks, optimizers and checkpoints trivially aligned.
"""

from __future__ import annotations

import enum
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import (
    CheckpointFormatError,
    CheckpointIntegrityError,
    ConfigError,
    DimensionError,
)

CHANNELS = 3
MLP_RATIO = 4
INIT_STD = 0.02
LOGIT_SCALE_INIT = math.log(1.0 / 0.07)  # ~2.659

# preset name -> (layers, width, heads) per tower
PRESETS = {
    "b": (2, 64, 4),
    "l": (4, 128, 8),
    "h": (6, 192, 12),
}


@dataclass(frozen=True)
class ModelConfig:
    image_size: int
    patch_size: int
    image_layers: int
    image_heads: int
    image_dim: int
    text_layers: int
    text_heads: int
    text_dim: int
    vocab_size: int
    max_text_len: int
    embed_dim: int

    def __post_init__(self):
        for field, value in asdict(self).items():
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"model config: {field} must be a positive int, got {value!r}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"model config: image_size {self.image_size} not divisible by"
                f" patch_size {self.patch_size}"
            )
        if self.image_dim % self.image_heads:
            raise ConfigError(
                f"model config: image_dim {self.image_dim} not divisible by"
                f" image_heads {self.image_heads}"
            )
        if self.text_dim % self.text_heads:
            raise ConfigError(
                f"model config: text_dim {self.text_dim} not divisible by"
                f" text_heads {self.text_heads}"
            )

    @property
    def num_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @staticmethod
    def from_presets(
        pair: str,
        vocab_size: int,
        max_text_len: int,
        image_size: int = 32,
        patch_size: int = 8,
        embed_dim: int = 64,
    ) -> "ModelConfig":
        """Build a config from a preset pair like "l-b" (image tower, text
        tower) or a single letter applied to both towers."""
        parts = pair.split("-")
        if len(parts) == 1:
            parts = [parts[0], parts[0]]
        if len(parts) != 2 or any(p not in PRESETS for p in parts):
            raise ConfigError(
                f"unknown preset pair {pair!r}; expected letters from {sorted(PRESETS)}"
                " joined by '-'"
            )
        (il, idim, ih), (tl, tdim, th) = PRESETS[parts[0]], PRESETS[parts[1]]
        return ModelConfig(
            image_size=image_size,
            patch_size=patch_size,
            image_layers=il,
            image_heads=ih,
            image_dim=idim,
            text_layers=tl,
            text_heads=th,
            text_dim=tdim,
            vocab_size=vocab_size,
            max_text_len=max_text_len,
            embed_dim=embed_dim,
        )


class FreezeRegime(enum.Enum):
    FULL = "full"
    TEXT_ENCODER = "text-encoder"
    PROJECTION_ONLY = "projection"


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

def _block_specs(prefix: str, dim: int):
    yield f"{prefix}/ln1/g", (dim,), "ones"
    yield f"{prefix}/ln1/b", (dim,), "zeros"
    for name in ("q", "k", "v", "out"):
        yield f"{prefix}/attn/{name}/w", (dim, dim), "normal"
        yield f"{prefix}/attn/{name}/b", (dim,), "zeros"
    yield f"{prefix}/ln2/g", (dim,), "ones"
    yield f"{prefix}/ln2/b", (dim,), "zeros"
    yield f"{prefix}/mlp/fc1/w", (dim, MLP_RATIO * dim), "normal"
    yield f"{prefix}/mlp/fc1/b", (MLP_RATIO * dim,), "zeros"
    yield f"{prefix}/mlp/fc2/w", (MLP_RATIO * dim, dim), "normal"
    yield f"{prefix}/mlp/fc2/b", (dim,), "zeros"


def _param_specs(config: ModelConfig):
    """Ordered (name, shape, init kind) triples for every parameter."""
    patch_in = config.patch_size * config.patch_size * CHANNELS
    yield "image/patch_embed/w", (patch_in, config.image_dim), "normal"
    yield "image/patch_embed/b", (config.image_dim,), "zeros"
    yield "image/pos_embed", (config.num_patches, config.image_dim), "zeros"
    for i in range(config.image_layers):
        yield from _block_specs(f"image/block{i}", config.image_dim)
    yield "image/final_ln/g", (config.image_dim,), "ones"
    yield "image/final_ln/b", (config.image_dim,), "zeros"

    yield "text/token_embed", (config.vocab_size, config.text_dim), "normal"
    yield "text/pos_embed", (config.max_text_len, config.text_dim), "zeros"
    for i in range(config.text_layers):
        yield from _block_specs(f"text/block{i}", config.text_dim)
    yield "text/final_ln/g", (config.text_dim,), "ones"
    yield "text/final_ln/b", (config.text_dim,), "zeros"

    yield "proj/visual", (config.image_dim, config.embed_dim), "normal"
    yield "proj/text", (config.text_dim, config.embed_dim), "normal"
    yield "logit_scale", (), "logit_scale"


def _init_params(config: ModelConfig, rng: np.random.Generator) -> dict:
    params = {}
    for name, shape, kind in _param_specs(config):
        if kind == "normal":
            data = rng.normal(0.0, INIT_STD, size=shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.asarray(LOGIT_SCALE_INIT)
        params[name] = T.Tensor(data.astype(np.float32), requires_grad=True)
    return params


class DualEncoderModel:
    def __init__(self, config: ModelConfig, init_seed: int = 0, params: dict | None = None):
        self.config = config
        if params is None:
            params = _init_params(config, np.random.default_rng(init_seed))
        self.params = params
        self.trainable_mask = {name: True for name in params}
        self.metadata: dict = {}

    @property
    def logit_scale(self) -> T.Tensor:
        return self.params["logit_scale"]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _linear(x, w, b=None):
    out = T.matmul(x, w)
    return T.add(out, b) if b is not None else out


def _attention(x, params, prefix: str, heads: int, bias):
    batch, seq, dim = x.shape
    head_dim = dim // heads

    def split(t):
        return T.swap_axes(T.reshape(t, (batch, seq, heads, head_dim)), 1, 2)

    q = split(_linear(x, params[f"{prefix}/q/w"], params[f"{prefix}/q/b"]))
    k = split(_linear(x, params[f"{prefix}/k/w"], params[f"{prefix}/k/b"]))
    v = split(_linear(x, params[f"{prefix}/v/w"], params[f"{prefix}/v/b"]))
    scores = T.scale(T.matmul(q, T.swap_axes(k, 2, 3)), 1.0 / math.sqrt(head_dim))
    if bias is not None:
        scores = T.add(scores, T.Tensor(bias, dtype=scores.dtype))
    ctx = T.matmul(T.softmax(scores), v)
    ctx = T.reshape(T.swap_axes(ctx, 1, 2), (batch, seq, dim))
    return _linear(ctx, params[f"{prefix}/out/w"], params[f"{prefix}/out/b"])


def _mlp(x, params, prefix: str):
    h = T.gelu(_linear(x, params[f"{prefix}/fc1/w"], params[f"{prefix}/fc1/b"]))
    return _linear(h, params[f"{prefix}/fc2/w"], params[f"{prefix}/fc2/b"])


def _encoder(x, params, tower: str, layers: int, heads: int, attn_bias, pool_mask):
    for i in range(layers):
        blk = f"{tower}/block{i}"
        normed = T.layer_norm(x, params[f"{blk}/ln1/g"], params[f"{blk}/ln1/b"])
        x = T.add(x, _attention(normed, params, f"{blk}/attn", heads, attn_bias))
        normed = T.layer_norm(x, params[f"{blk}/ln2/g"], params[f"{blk}/ln2/b"])
        x = T.add(x, _mlp(normed, params, f"{blk}/mlp"))
    x = T.layer_norm(x, params[f"{tower}/final_ln/g"], params[f"{tower}/final_ln/b"])
    return T.masked_mean(x, pool_mask)


def _patchify(images: np.ndarray, patch: int) -> np.ndarray:
    b, c, h, w = images.shape
    side = h // patch
    x = images.reshape(b, c, side, patch, side, patch)
    x = x.transpose(0, 2, 4, 3, 5, 1)  # rows of pixels, then channels, per patch
    return x.reshape(b, side * side, patch * patch * c)


def encode_image(model: DualEncoderModel, images) -> T.Tensor:
    """Embed a batch of RGB images (values in 0..255) to unit-norm rows."""
    cfg = model.config
    raw = images.data if isinstance(images, T.Tensor) else np.asarray(images)
    if raw.ndim != 4 or raw.shape[1] != CHANNELS:
        raise DimensionError(
            f"encode_image: expected [batch, {CHANNELS}, H, W], got {raw.shape}"
        )
    if raw.shape[2] != cfg.image_size or raw.shape[3] != cfg.image_size:
        raise DimensionError(
            f"encode_image: expected {cfg.image_size}x{cfg.image_size} images,"
            f" got {raw.shape[2]}x{raw.shape[3]}"
        )
    pixels = raw.astype(np.float32) / 127.5 - 1.0
    patches = _patchify(pixels, cfg.patch_size)
    p = model.params
    x = _linear(T.Tensor(patches), p["image/patch_embed/w"], p["image/patch_embed/b"])
    x = T.add(x, p["image/pos_embed"])
    pool_mask = np.ones((raw.shape[0], cfg.num_patches), dtype=np.float32)
    pooled = _encoder(x, p, "image", cfg.image_layers, cfg.image_heads, None, pool_mask)
    return T.l2_normalize(T.matmul(pooled, p["proj/visual"]))


def encode_text(model: DualEncoderModel, tokens, lengths) -> T.Tensor:
    """Embed padded token id batches to unit-norm rows.

    tokens: int array [batch, seq]; lengths: valid token counts per row.
    Padding positions are excluded from both attention and pooling, so a
    sequence's embedding does not depend on how far it was padded.
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    lengths = np.asarray(lengths)
    if tokens.ndim != 2:
        raise DimensionError(f"encode_text: tokens must be 2-D, got {tokens.shape}")
    batch, seq = tokens.shape
    if seq > cfg.max_text_len:
        raise DimensionError(
            f"encode_text: sequence length {seq} exceeds max_text_len {cfg.max_text_len}"
        )
    if lengths.shape != (batch,):
        raise DimensionError(
            f"encode_text: lengths shape {lengths.shape} does not match batch {batch}"
        )
    if lengths.size and (lengths.min() < 1 or lengths.max() > seq):
        raise DimensionError(
            f"encode_text: lengths must lie in [1, {seq}], got"
            f" [{lengths.min()}, {lengths.max()}]"
        )
    p = model.params
    x = T.embedding(p["text/token_embed"], tokens)
    x = T.add(x, T.narrow_rows(p["text/pos_embed"], seq))
    valid = np.arange(seq)[None, :] < lengths[:, None]
    # additive key mask: padded keys get a large negative score pre-softmax
    bias = np.where(valid, 0.0, -1e9).astype(np.float32)
    bias = np.broadcast_to(
        bias[:, None, None, :], (batch, cfg.text_heads, seq, seq)
    )
    pooled = _encoder(
        x, p, "text", cfg.text_layers, cfg.text_heads, bias, valid.astype(np.float32)
    )
    return T.l2_normalize(T.matmul(pooled, p["proj/text"]))


# ---------------------------------------------------------------------------
# freeze regimes and accounting
# ---------------------------------------------------------------------------

_PROJECTION_NAMES = ("proj/visual", "proj/text", "logit_scale")


def apply_freeze(model: DualEncoderModel, regime: FreezeRegime) -> None:
    """Set the per-parameter trainable mask for a training regime.

    The logit scale and both projections stay trainable in every regime;
    text-encoder mode additionally trains the text tower, full mode trains
    everything.
    """
    for name in model.params:
        if regime is FreezeRegime.FULL:
            trainable = True
        elif regime is FreezeRegime.TEXT_ENCODER:
            trainable = not name.startswith("image/")
        elif regime is FreezeRegime.PROJECTION_ONLY:
            trainable = name in _PROJECTION_NAMES
        else:
            raise ConfigError(f"unknown freeze regime {regime!r}")
        model.trainable_mask[name] = trainable


def count_parameters(model: DualEncoderModel) -> dict:
    counts = {"image_encoder": 0, "text_encoder": 0, "projections": 0, "logit_scale": 0}
    for name, p in model.params.items():
        if name.startswith("image/"):
            counts["image_encoder"] += p.size
        elif name.startswith("text/"):
            counts["text_encoder"] += p.size
        elif name.startswith("proj/"):
            counts["projections"] += p.size
        else:
            counts["logit_scale"] += p.size
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"NCLP"
CHECKPOINT_VERSION = 1


def write_tensor_file(path, header: dict, arrays: dict) -> None:
    """Serialize named float32 arrays with a JSON header.

    Layout (little-endian): magic, version u32, header length u32 + canonical
    JSON, entry count u32, then per entry sorted by name: name length + utf-8
    name, ndim u32, dims u32 each, raw float32 payload.  A crc32 over all
    payload bytes closes the file.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks.append(struct.pack("<I", len(head)))
    chunks.append(head)
    names = sorted(arrays)
    chunks.append(struct.pack("<I", len(names)))
    crc = 0
    for name in names:
        arr = np.asarray(arrays[name], dtype="<f4")  # keeps 0-d shapes intact
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.extend(struct.pack("<I", d) for d in arr.shape)
        payload = arr.tobytes()
        crc = zlib.crc32(payload, crc)
        chunks.append(payload)
    chunks.append(struct.pack("<I", crc))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Cursor:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointIntegrityError(
                f"truncated file: wanted {n} bytes at offset {self.pos},"
                f" only {len(self.raw) - self.pos} left"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_tensor_file(path):
    """Inverse of write_tensor_file; returns (header dict, name->array)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    cur = _Cursor(raw)
    magic = cur.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = cur.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )
    try:
        header = json.loads(cur.take(cur.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"unreadable header: {exc}") from exc
    arrays = {}
    crc = 0
    for _ in range(cur.u32()):
        name = cur.take(cur.u32()).decode("utf-8")
        shape = tuple(cur.u32() for _ in range(cur.u32()))
        payload = cur.take(int(np.prod(shape, dtype=np.int64)) * 4)
        crc = zlib.crc32(payload, crc)
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    stored = cur.u32()
    if stored != crc:
        raise CheckpointIntegrityError(
            f"checksum mismatch: payload crc {crc:#010x} != stored {stored:#010x}"
        )
    if cur.pos != len(raw):
        raise CheckpointIntegrityError(f"{len(raw) - cur.pos} unexpected trailing bytes")
    return header, arrays


def save_checkpoint(model: DualEncoderModel, path, metadata: dict | None = None) -> None:
    header = {
        "config": asdict(model.config),
        "metadata": metadata if metadata is not None else model.metadata,
    }
    write_tensor_file(path, header, {n: p.data for n, p in model.params.items()})


def load_checkpoint(path) -> DualEncoderModel:
    header, arrays = read_tensor_file(path)
    try:
        config = ModelConfig(**header["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"bad config block: {exc}") from exc
    expected = {name: shape for name, shape, _ in _param_specs(config)}
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointFormatError(
            f"parameter table does not match config (missing {missing}, extra {extra})"
        )
    for name, arr in arrays.items():
        if arr.shape != expected[name]:
            raise CheckpointFormatError(
                f"parameter {name}: shape {arr.shape} does not match config"
                f" {expected[name]}"
            )
    params = {name: T.Tensor(arrays[name], requires_grad=True) for name in expected}
    model = DualEncoderModel(config, params=params)
    model.metadata = header.get("metadata", {})
    return model
