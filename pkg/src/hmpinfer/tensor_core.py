"""Dense 2-D kernels shared by the reference forward pass and every distributed path.

Tensors are plain C-contiguous 2-D ``numpy.ndarray`` objects of dtype float32
or float64. All kernels are pure: identical inputs give bitwise identical
outputs.

``gemm`` is a compiled i-k-j loop, so every output element is accumulated
strictly left to right over the inner dimension in the tensor's own dtype.
That makes column tiling and row tiling of a product bitwise exact, which
the tensor-parallel and tile-overlap paths rely on.

Compute throttling
------------------
A worker can emulate a slower device with :func:`set_compute_throttle`.
After each kernel the calling thread is padded until its wall time reaches
``multiplier * cpu_time``. The thread's CPU time is used as the unthrottled
duration because several emulated devices may share one physical core, and
wall time would then include time-slicing by the OS. The emulated duration
of every kernel is also added to a per-thread device clock
(:func:`device_clock`), which the engine uses for straggler analysis.
"""
from __future__ import annotations

import functools
import math
import os
import threading
import time
from typing import Sequence

import numba
import numpy as np

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
LAYER_NORM_EPS = 1e-5

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when tensor shapes or dtypes are incompatible."""


# --------------------------------------------------------------------------
# throttle + device clock


class _ThrottleState(threading.local):
    def __init__(self) -> None:
        self.multiplier: float | None = None
        self.clock = 0.0


_state = _ThrottleState()
_default_multiplier = 1.0

# Padding never sleeps: an idle core makes the next kernel run on cold
# caches and inflates its CPU time. Yielding lets other processes sharing
# the core make progress instead.


def set_compute_throttle(multiplier: float, *, thread_only: bool = False) -> None:
    """Slow every subsequent kernel down to ``multiplier`` x its CPU time.

    With ``thread_only`` the setting applies to the calling thread alone,
    which lets in-process ring tests emulate several devices at once.
    """
    global _default_multiplier
    if not multiplier >= 1.0:
        raise ValueError(f"compute throttle must be >= 1, got {multiplier}")
    if thread_only:
        _state.multiplier = float(multiplier)
    else:
        _default_multiplier = float(multiplier)
        _state.multiplier = None


def compute_throttle() -> float:
    m = _state.multiplier
    return _default_multiplier if m is None else m


def device_clock() -> float:
    """Seconds of emulated compute accumulated on this thread."""
    return _state.clock


def pad_until(deadline: float) -> None:
    while time.perf_counter() < deadline:
        os.sched_yield()


def kernel(fn):
    """Wrap a public kernel with throttle padding and device-clock accounting."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        c0 = time.thread_time()
        w0 = time.perf_counter()
        out = fn(*args, **kwargs)
        cpu = time.thread_time() - c0
        m = compute_throttle()
        _state.clock += m * cpu
        if m > 1.0:
            pad_until(w0 + m * cpu)
        return out

    wrapper.unthrottled = fn
    return wrapper


# --------------------------------------------------------------------------
# helpers


def _check2d(x: np.ndarray, name: str = "tensor") -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D ndarray, got {getattr(x, 'shape', type(x))}")
    if x.dtype not in SUPPORTED_DTYPES:
        raise ShapeError(f"{name} has unsupported dtype {x.dtype}")


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    out = np.ascontiguousarray(x, dtype=dtype)
    if out.ndim == 1:
        out = out.reshape(1, -1)
    _check2d(out)
    return out


@numba.njit(cache=True, nogil=True)
def _gemm_ikj(a, b, out):
    m, inner = a.shape
    n = b.shape[1]
    for i in range(m):
        for k in range(inner):
            aik = a[i, k]
            for j in range(n):
                out[i, j] += aik * b[k, j]


# --------------------------------------------------------------------------
# kernels


@kernel
def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check2d(a, "a")
    _check2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"gemm: dtype mismatch {a.dtype} vs {b.dtype}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    if out.size and a.shape[1]:
        _gemm_ikj(np.ascontiguousarray(a), np.ascontiguousarray(b), out)
    return out


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    if x.shape[1] == 0:
        return x.copy()
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@kernel
def softmax_rows(x: np.ndarray) -> np.ndarray:
    _check2d(x)
    return _softmax_rows(x)


@kernel
def self_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, head_dim: int) -> np.ndarray:
    """Per-head scaled dot-product attention over column slices of width ``head_dim``."""
    for name, t in (("q", q), ("k", k), ("v", v)):
        _check2d(t, name)
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"self_attention: q{q.shape} k{k.shape} v{v.shape}")
    if head_dim <= 0 or q.shape[1] % head_dim:
        raise ShapeError(f"self_attention: {q.shape[1]} cols not a multiple of head_dim={head_dim}")
    seq = q.shape[0]
    out = np.empty_like(v)
    scale = v.dtype.type(1.0 / math.sqrt(head_dim))
    gemm_ = gemm.unthrottled
    for c in range(0, q.shape[1], head_dim):
        qh = np.ascontiguousarray(q[:, c : c + head_dim])
        kh_t = np.ascontiguousarray(k[:, c : c + head_dim].T)
        vh = np.ascontiguousarray(v[:, c : c + head_dim])
        if seq == 0:
            continue
        w = _softmax_rows(gemm_(qh, kh_t) * scale)
        out[:, c : c + head_dim] = gemm_(w, vh)
    return out


@kernel
def layer_norm(x: np.ndarray, gamma, beta, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    _check2d(x)
    gamma = np.asarray(gamma, dtype=x.dtype).reshape(-1)
    beta = np.asarray(beta, dtype=x.dtype).reshape(-1)
    if gamma.shape[0] != x.shape[1] or beta.shape[0] != x.shape[1]:
        raise ShapeError(f"layer_norm: gamma/beta length must be {x.shape[1]}")
    if x.shape[0] == 0:
        return x.copy()
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    return centered / np.sqrt(var + x.dtype.type(eps)) * gamma + beta


@kernel
def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximation GELU."""
    _check2d(x)
    t = x.dtype.type
    inner = t(_GELU_C) * (x + t(0.044715) * x * x * x)
    return t(0.5) * x * (t(1.0) + np.tanh(inner))


@kernel
def residual_add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check2d(x, "x")
    _check2d(y, "y")
    if x.shape != y.shape or x.dtype != y.dtype:
        raise ShapeError(f"residual_add: {x.shape}/{x.dtype} vs {y.shape}/{y.dtype}")
    return x + y


def dropout_inference(x: np.ndarray) -> np.ndarray:
    # inference mode: dropout is the identity, the slot keeps the connective block's shape
    return x


def add_bias(x: np.ndarray, bias) -> np.ndarray:
    if bias is None:
        return x
    return x + np.asarray(bias, dtype=x.dtype).reshape(1, -1)


def concat_rows(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeError("concat_rows: no parts")
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {sorted(cols)}")
    return np.ascontiguousarray(np.concatenate(parts, axis=0))


def concat_cols(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeError("concat_cols: no parts")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {sorted(rows)}")
    return np.ascontiguousarray(np.concatenate(parts, axis=1))


def _offsets(sizes: Sequence[int], total: int, what: str) -> list[int]:
    if any(s < 0 for s in sizes):
        raise ShapeError(f"{what}: negative size in {list(sizes)}")
    if sum(sizes) != total:
        raise ShapeError(f"{what}: sizes {list(sizes)} sum to {sum(sizes)}, expected {total}")
    return np.concatenate([[0], np.cumsum(sizes)]).astype(int).tolist()


def split_rows(x: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    off = _offsets(sizes, x.shape[0], "split_rows")
    return [np.ascontiguousarray(x[off[i] : off[i + 1]]) for i in range(len(sizes))]


def split_cols(x: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    off = _offsets(sizes, x.shape[1], "split_cols")
    return [np.ascontiguousarray(x[:, off[i] : off[i + 1]]) for i in range(len(sizes))]


def max_rel_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """max |a - e| / max(|e|) -- scale-aware error used by all equivalence checks."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeError(f"max_rel_error: {actual.shape} vs {expected.shape}")
    if expected.size == 0:
        return 0.0
    scale = max(float(np.abs(expected).max()), np.finfo(np.float64).tiny)
    return float(np.abs(actual - expected).max() / scale)
