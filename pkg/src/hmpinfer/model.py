"""Transformer layer definition, checkpoints, memory accounting and the reference forward pass.

Layers are post-norm::

    x1 = LayerNorm1(x + MHA(x))
    y  = LayerNorm2(x1 + MLP(x1))

Activations are ``seq x hidden`` row-major and weights are applied on the right
(``x @ W``), so a column shard of ``W`` yields a column slice of the output.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor_core as tc

DTYPE_BYTES = {"float16": 2, "float32": 4, "float64": 8}
COMPUTE_DTYPES = ("float32", "float64")

CHECKPOINT_MAGIC = b"HMPW"
CHECKPOINT_VERSION = 1
WEIGHT_SCALE = 0.02


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    hidden: int
    dtype: str = "float32"
    max_seq: int = 4096
    bias: bool = True

    def __post_init__(self):
        if self.num_layers < 1 or self.num_heads < 1 or self.hidden < 1:
            raise ValueError(f"invalid model config {self}")
        if self.hidden % self.num_heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by num_heads={self.num_heads}")
        if self.dtype not in DTYPE_BYTES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.num_heads

    @property
    def intermediate(self) -> int:
        return 4 * self.hidden

    @property
    def dtype_bytes(self) -> int:
        return DTYPE_BYTES[self.dtype]

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# layers / heads / hidden of the evaluated model family
PRESETS = {
    "distilbert": ModelConfig(6, 12, 768),
    "bert-l": ModelConfig(24, 16, 1024),
    "gpt2-l": ModelConfig(36, 20, 1280),
    "opt-l": ModelConfig(24, 16, 2048),
    "opt-xl": ModelConfig(32, 32, 2560),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return base.replace(**overrides) if overrides else base


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wb: np.ndarray
    wd: np.ndarray
    we: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    bq: np.ndarray | None = None
    bk: np.ndarray | None = None
    bv: np.ndarray | None = None
    bb: np.ndarray | None = None
    bd: np.ndarray | None = None
    be: np.ndarray | None = None

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                yield f.name, value

    def expected_shapes(self, h: int) -> dict[str, tuple[int, ...]]:
        shapes = {
            "wq": (h, h), "wk": (h, h), "wv": (h, h), "wb": (h, h),
            "wd": (h, 4 * h), "we": (4 * h, h),
            "ln1_gamma": (h,), "ln1_beta": (h,), "ln2_gamma": (h,), "ln2_beta": (h,),
            "bq": (h,), "bk": (h,), "bv": (h,), "bb": (h,), "bd": (4 * h,), "be": (h,),
        }
        return shapes

    def validate(self, h: int) -> None:
        shapes = self.expected_shapes(h)
        for name, value in self.named_tensors():
            if value.shape != shapes[name]:
                raise ValueError(f"{name}: shape {value.shape}, expected {shapes[name]}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name}: non-finite values")


@dataclass
class Model:
    config: ModelConfig
    layers: list[LayerWeights] = field(default_factory=list)

    def __post_init__(self):
        if len(self.layers) != self.config.num_layers:
            raise ValueError(f"{len(self.layers)} layers for a {self.config.num_layers}-layer config")

    def astype(self, dtype: str) -> "Model":
        layers = [
            LayerWeights(**{n: v.astype(dtype) for n, v in lw.named_tensors()}) for lw in self.layers
        ]
        return Model(self.config.replace(dtype=dtype), layers)

    def permute_heads(self, order) -> "Model":
        """Reorder heads in every layer; the output projection rows follow."""
        cfg = self.config
        hd = cfg.head_dim
        cols = np.concatenate([np.arange(p * hd, (p + 1) * hd) for p in order])
        layers = []
        for lw in self.layers:
            kw = dict(lw.named_tensors())
            for n in ("wq", "wk", "wv"):
                kw[n] = np.ascontiguousarray(kw[n][:, cols])
            for n in ("bq", "bk", "bv"):
                if n in kw:
                    kw[n] = np.ascontiguousarray(kw[n][cols])
            kw["wb"] = np.ascontiguousarray(kw["wb"][cols, :])
            layers.append(LayerWeights(**kw))
        return Model(cfg, layers)


def _require_compute_dtype(config: ModelConfig) -> None:
    if config.dtype not in COMPUTE_DTYPES:
        raise ValueError(f"{config.dtype} is supported for memory accounting only, not compute")


def init_random(config: ModelConfig, seed: int = 0) -> Model:
    """Deterministic small random weights (std 0.02); layer norms near identity.

    Values are drawn in float32 and cast, so float32 and float64 models with
    the same seed hold the same numbers.
    """
    _require_compute_dtype(config)
    h = config.hidden
    layer_seeds = np.random.SeedSequence(seed).spawn(config.num_layers)
    layers = []
    for ss in layer_seeds:
        rng = np.random.default_rng(ss)

        def mat(*shape, scale=WEIGHT_SCALE):
            return (rng.standard_normal(shape, dtype=np.float32) * np.float32(scale)).astype(config.dtype)

        kw = dict(
            wq=mat(h, h), wk=mat(h, h), wv=mat(h, h), wb=mat(h, h),
            wd=mat(h, 4 * h), we=mat(4 * h, h),
            ln1_gamma=1 + mat(h, scale=0.1), ln1_beta=mat(h, scale=0.1),
            ln2_gamma=1 + mat(h, scale=0.1), ln2_beta=mat(h, scale=0.1),
        )
        if config.bias:
            kw.update(bq=mat(h), bk=mat(h), bv=mat(h), bb=mat(h), bd=mat(4 * h), be=mat(h))
        layers.append(LayerWeights(**kw))
    return Model(config, layers)


def random_input(config: ModelConfig, seq: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EC]))
    return rng.standard_normal((seq, config.hidden), dtype=np.float32).astype(config.dtype)


# --------------------------------------------------------------------------
# checkpoint format: magic | version u32 | header-len u32 | header json | payloads


def save_weights(model: Model, path) -> None:
    table = []
    payloads = []
    offset = 0
    for i, lw in enumerate(model.layers):
        for name, arr in lw.named_tensors():
            data = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            table.append(
                {"name": f"layers.{i}.{name}", "shape": list(arr.shape), "dtype": arr.dtype.name,
                 "offset": offset, "nbytes": len(data)}
            )
            payloads.append(data)
            offset += len(data)
    header = json.dumps({"config": model.config.to_dict(), "tensors": table}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for p in payloads:
            f.write(p)


def load_weights(path) -> Model:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[12 : 12 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    config = ModelConfig.from_dict(header["config"])
    base = 12 + hlen
    per_layer: list[dict] = [{} for _ in range(config.num_layers)]
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if count * dtype.itemsize != entry["nbytes"]:
            raise CheckpointError(f"{entry['name']}: shape {entry['shape']} disagrees with {entry['nbytes']} bytes")
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start).reshape(entry["shape"])
        _, idx, name = entry["name"].split(".", 2)
        per_layer[int(idx)][name] = arr.astype(dtype.newbyteorder("="))
    layers = [LayerWeights(**kw) for kw in per_layer]
    for lw in layers:
        lw.validate(config.hidden)
    return Model(config, layers)


# --------------------------------------------------------------------------
# reference forward (the oracle)


def mha_block(lw: LayerWeights, x: np.ndarray, config: ModelConfig) -> np.ndarray:
    q = tc.add_bias(tc.gemm(x, lw.wq), lw.bq)
    k = tc.add_bias(tc.gemm(x, lw.wk), lw.bk)
    v = tc.add_bias(tc.gemm(x, lw.wv), lw.bv)
    b = tc.self_attention(q, k, v, config.head_dim)
    return tc.add_bias(tc.gemm(b, lw.wb), lw.bb)


def mlp_block(lw: LayerWeights, x: np.ndarray) -> np.ndarray:
    e = tc.gelu(tc.add_bias(tc.gemm(x, lw.wd), lw.bd))
    return tc.add_bias(tc.gemm(e, lw.we), lw.be)


def connective_block(g: np.ndarray, residual: np.ndarray, gamma, beta) -> np.ndarray:
    return tc.layer_norm(tc.residual_add(tc.dropout_inference(g), residual), gamma, beta)


def reference_layer(lw: LayerWeights, x: np.ndarray, config: ModelConfig) -> np.ndarray:
    x1 = connective_block(mha_block(lw, x, config), x, lw.ln1_gamma, lw.ln1_beta)
    return connective_block(mlp_block(lw, x1), x1, lw.ln2_gamma, lw.ln2_beta)


def reference_forward(model: Model, x: np.ndarray) -> np.ndarray:
    cfg = model.config
    _require_compute_dtype(cfg)
    tc._check2d(x, "input")
    if x.shape[1] != cfg.hidden:
        raise tc.ShapeError(f"input has {x.shape[1]} cols, model hidden is {cfg.hidden}")
    if x.shape[0] > cfg.max_seq:
        raise tc.ShapeError(f"sequence {x.shape[0]} exceeds max_seq {cfg.max_seq}")
    if x.dtype != cfg.np_dtype:
        raise tc.ShapeError(f"input dtype {x.dtype} != model dtype {cfg.dtype}")
    for lw in model.layers:
        x = reference_layer(lw, x, cfg)
    return x


# --------------------------------------------------------------------------
# memory accounting


def block_weight_bytes(config: ModelConfig) -> tuple[int, int]:
    """(bytes of one MHA block, bytes of one MLP block), weights plus biases."""
    h = config.hidden
    bias = 1 if config.bias else 0
    m_att = (4 * h * h + bias * (3 * h + h)) * config.dtype_bytes
    m_mlp = (8 * h * h + bias * (4 * h + h)) * config.dtype_bytes
    return m_att, m_mlp


def estimate_memory(config: ModelConfig, plan, d: int) -> Fraction:
    """Weight bytes resident on device ``d``: l * (M_att * a_d/sum(A) + M_mlp * b_d/sum(B)).

    Returned as an exact ``Fraction`` so per-device estimates sum to the
    single-device total without rounding and budget comparisons stay strict.
    """
    m_att, m_mlp = block_weight_bytes(config)
    a, b = plan.A, plan.B
    return config.num_layers * (Fraction(m_att * a[d], sum(a)) + Fraction(m_mlp * b[d], sum(b)))


def model_weight_bytes(config: ModelConfig) -> int:
    m_att, m_mlp = block_weight_bytes(config)
    return config.num_layers * (m_att + m_mlp)
