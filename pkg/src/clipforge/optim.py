"""Optimizers: Lion, Lion with 8-bit quantized momentum, and AdamW.

All steps mutate parameters in place and share one OptimizerState.  Only
parameters marked trainable are touched; frozen parameters keep their exact
bit pattern and never acquire state buffers.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TrainingError

DEFAULT_BLOCK_SIZE = 256


@dataclass(frozen=True)
class LionConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lion: lr must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"lion: {name} must be in (0, 1), got {value}")
        if self.weight_decay < 0:
            raise ConfigError(f"lion: weight_decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class AdamWConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"adamw: lr must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"adamw: {name} must be in (0, 1), got {value}")
        if self.eps <= 0:
            raise ConfigError(f"adamw: eps must be > 0, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"adamw: weight_decay must be >= 0, got {self.weight_decay}")


# ---------------------------------------------------------------------------
# blockwise 8-bit quantization
# ---------------------------------------------------------------------------

@dataclass
class QuantizedBuffer:
    """Signed 8-bit codes with one absmax scale per fixed-size block.

    Blocks tile the flattened buffer; the last block may be short.  The
    roundtrip error is at most absmax/127 per element of each block.
    """

    codes: np.ndarray  # int8, flat
    absmax: np.ndarray  # float32, one per block
    block_size: int
    shape: tuple

    @property
    def nbytes(self) -> int:
        return self.codes.nbytes + self.absmax.nbytes


def quantize_block(x, block_size: int = DEFAULT_BLOCK_SIZE) -> QuantizedBuffer:
    if block_size < 1:
        raise ConfigError(f"quantize: block_size must be >= 1, got {block_size}")
    arr = np.asarray(x, dtype=np.float32)
    flat = arr.reshape(-1)
    n_blocks = max(1, -(-flat.size // block_size))
    padded = np.zeros(n_blocks * block_size, dtype=np.float32)
    padded[: flat.size] = flat
    blocks = padded.reshape(n_blocks, block_size)
    absmax = np.abs(blocks).max(axis=1).astype(np.float32)
    # float64 keeps tiny absmax values from overflowing the reciprocal
    inv = np.zeros(n_blocks, dtype=np.float64)
    nonzero = absmax > 0
    inv[nonzero] = 127.0 / absmax[nonzero].astype(np.float64)
    codes = np.clip(np.rint(blocks.astype(np.float64) * inv[:, None]), -127, 127).astype(np.int8)
    return QuantizedBuffer(
        codes=codes.reshape(-1)[: flat.size].copy(),
        absmax=absmax,
        block_size=block_size,
        shape=arr.shape,
    )


def dequantize_block(buf: QuantizedBuffer) -> np.ndarray:
    n_blocks = buf.absmax.size
    padded = np.zeros(n_blocks * buf.block_size, dtype=np.float32)
    padded[: buf.codes.size] = buf.codes.astype(np.float32)
    blocks = padded.reshape(n_blocks, buf.block_size)
    # multiply before dividing so codes at +-127 reproduce absmax exactly
    values = blocks * buf.absmax[:, None] / np.float32(127.0)
    return values.reshape(-1)[: buf.codes.size].reshape(buf.shape)


# ---------------------------------------------------------------------------
# optimizer state
# ---------------------------------------------------------------------------

class OptimizerState:
    """Per-parameter buffers, created lazily on the first step."""

    def __init__(self, block_size: int = DEFAULT_BLOCK_SIZE):
        self.momentum: dict = {}
        self.second_moment: dict = {}
        self.step_count = 0
        self.block_size = block_size

    def memory_bytes(self) -> int:
        total = 0
        for buf in self.momentum.values():
            total += buf.nbytes
        for buf in self.second_moment.values():
            total += buf.nbytes
        return total


def state_to_arrays(state: OptimizerState):
    """Flatten state into (metadata, name->array) for the checkpoint container.

    int8 codes ride along as float32 values, which is exact for integers of
    magnitude <= 127.
    """
    meta = {
        "step_count": state.step_count,
        "block_size": state.block_size,
        "quantized": sorted(
            name for name, buf in state.momentum.items() if isinstance(buf, QuantizedBuffer)
        ),
    }
    arrays = {}
    for name, buf in state.momentum.items():
        if isinstance(buf, QuantizedBuffer):
            arrays[f"m_codes/{name}"] = buf.codes.astype(np.float32)
            arrays[f"m_absmax/{name}"] = buf.absmax
        else:
            arrays[f"m/{name}"] = buf
    for name, buf in state.second_moment.items():
        arrays[f"v/{name}"] = buf
    return meta, arrays


def state_from_arrays(meta: dict, arrays: dict, params: dict) -> OptimizerState:
    state = OptimizerState(block_size=int(meta["block_size"]))
    state.step_count = int(meta["step_count"])
    for name in meta["quantized"]:
        codes = arrays[f"m_codes/{name}"].astype(np.int8)
        state.momentum[name] = QuantizedBuffer(
            codes=codes,
            absmax=arrays[f"m_absmax/{name}"],
            block_size=state.block_size,
            shape=params[name].data.shape,
        )
    for key, arr in arrays.items():
        kind, _, name = key.partition("/")
        if kind == "m":
            state.momentum[name] = arr
        elif kind == "v":
            state.second_moment[name] = arr
    return state


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def _iter_trainable(params: dict, grads: dict, trainable):
    for name in sorted(params):
        if trainable is not None and not trainable.get(name, True):
            continue
        p = params[name]
        if name not in grads or grads[name] is None:
            raise TrainingError(f"missing gradient for parameter {name}")
        g = np.asarray(grads[name], dtype=np.float32)
        if g.shape != p.data.shape:
            raise TrainingError(
                f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}"
            )
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name}")
        yield name, p, g


def _lion_update(p, g, m, cfg: LionConfig):
    interp = cfg.beta1 * m + (1.0 - cfg.beta1) * g
    update = np.sign(interp)
    if cfg.weight_decay:
        update = update + cfg.weight_decay * p.data
    p.data = p.data - cfg.lr * update
    return cfg.beta2 * m + (1.0 - cfg.beta2) * g


def lion_step(params: dict, grads: dict, state: OptimizerState, cfg: LionConfig, trainable=None):
    state.step_count += 1
    for name, p, g in _iter_trainable(params, grads, trainable):
        m = state.momentum.get(name)
        if m is None:
            m = np.zeros_like(p.data)
        state.momentum[name] = _lion_update(p, g, m, cfg)


def lion8_step(params: dict, grads: dict, state: OptimizerState, cfg: LionConfig, trainable=None):
    """Lion with the momentum buffer held in blockwise 8-bit form."""
    state.step_count += 1
    for name, p, g in _iter_trainable(params, grads, trainable):
        buf = state.momentum.get(name)
        m = dequantize_block(buf) if buf is not None else np.zeros_like(p.data)
        state.momentum[name] = quantize_block(_lion_update(p, g, m, cfg), state.block_size)


def adamw_step(params: dict, grads: dict, state: OptimizerState, cfg: AdamWConfig, trainable=None):
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - cfg.beta1**t
    bias2 = 1.0 - cfg.beta2**t
    for name, p, g in _iter_trainable(params, grads, trainable):
        m = state.momentum.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        update = m_hat / (np.sqrt(v_hat) + cfg.eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data = p.data - cfg.lr * update
        state.momentum[name] = m
        state.second_moment[name] = v


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at total_steps."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
