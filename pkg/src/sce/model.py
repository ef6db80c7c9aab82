"""Transformer encoder with a convolutional classification head.

ids [n, t] -> token + position embeddings [n, t, d] -> N post-norm encoder
layers -> swap to [n, d, t] -> conv (k=2, 100 channels) -> ReLU -> global max
pool [n, 100, 1] -> squeeze [n, 100] -> linear [n, 2].

Positions strictly after the first EOS (and PAD positions) are excluded as
attention keys and zeroed before the head, so nothing past the end of a
document can reach the logits.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tokenizer import EOS, PAD


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 4000
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ff_dim: int = 128
    max_len: int = 64
    conv_out_channels: int = 100
    conv_kernel: int = 2
    num_classes: int = 2
    dropout_rate: float = 0.0
    eps_layernorm: float = 1e-5

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.conv_kernel > self.max_len:
            raise ValueError("conv_kernel must not exceed max_len")
        if self.num_classes != 2:
            raise ValueError("only two-class heads are supported")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @classmethod
    def full_scale(cls, vocab_size: int = 4000, max_len: int = 256) -> "ModelConfig":
        return cls(vocab_size=vocab_size, hidden_dim=768, num_layers=12, num_heads=12,
                   ff_dim=3072, max_len=max_len)

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(config: ModelConfig) -> dict:
    """Name -> shape for every learnable tensor, in a fixed order."""
    d, f = config.hidden_dim, config.ff_dim
    shapes = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_len, d),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + proj + "_w"] = (d, d)
            shapes[p + proj + "_b"] = (d,)
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        shapes[p + "ff1_w"] = (d, f)
        shapes[p + "ff1_b"] = (f,)
        shapes[p + "ff2_w"] = (f, d)
        shapes[p + "ff2_b"] = (d,)
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
    c, k = config.conv_out_channels, config.conv_kernel
    shapes["conv_w"] = (c, d, k)
    shapes["conv_b"] = (c,)
    shapes["fc_w"] = (c, config.num_classes)
    shapes["fc_b"] = (config.num_classes,)
    return shapes


def count_params(config: ModelConfig) -> int:
    d, f, c, k = config.hidden_dim, config.ff_dim, config.conv_out_channels, config.conv_kernel
    per_layer = 4 * (d * d + d) + 2 * d * f + f + d + 4 * d
    return ((config.vocab_size + config.max_len) * d + config.num_layers * per_layer
            + c * d * k + c + c * config.num_classes + config.num_classes)


class ModelParams:
    """Every learnable tensor of one model, keyed by name."""

    def __init__(self, config: ModelConfig, tensors: dict):
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            raise ValueError("parameter names do not match the config")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: expected {shape}, got {tensors[name].shape}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def layer(self, i: int) -> dict:
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def num_values(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data, requires_grad=v.requires_grad)
                                         for k, v in self.tensors.items()})


def init_params(config: ModelConfig, seed: int, requires_grad: bool = True) -> ModelParams:
    """Weights ~ N(0, 0.02^2); LayerNorm gamma 1, beta 0; biases 0."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.endswith("_b") and len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = Tensor(arr, requires_grad=requires_grad)
    return ModelParams(config, tensors)


def valid_positions(ids: np.ndarray) -> np.ndarray:
    """True for positions up to and including the first EOS that are not PAD."""
    ids = np.asarray(ids)
    eos = ids == EOS
    after_eos = (np.cumsum(eos, axis=-1) - eos) > 0
    return ~after_eos & (ids != PAD)


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: Optional[np.ndarray] = None,
              return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k)) v over [n, heads, t, d_k] inputs.

    key_mask is [n, t]; False keys get zero weight.
    """
    if q.shape != k.shape or q.shape != v.shape or q.ndim != 4:
        raise T.ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    d_k = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose_last2(k)), 1.0 / math.sqrt(d_k))
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[:, None, None, :]
    weights = T.softmax(scores, axis=-1, mask=mask)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, t, d = x.shape
    return T.permute(T.reshape(x, (n, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    n, h, t, dk = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (n, t, h * dk))


def multi_head_self_attention(x: Tensor, layer: dict, heads: int,
                              key_mask: Optional[np.ndarray] = None) -> Tensor:
    q = _split_heads(T.linear(x, layer["q_w"], layer["q_b"]), heads)
    k = _split_heads(T.linear(x, layer["k_w"], layer["k_b"]), heads)
    v = _split_heads(T.linear(x, layer["v_w"], layer["v_b"]), heads)
    ctx = _merge_heads(attention(q, k, v, key_mask))
    return T.linear(ctx, layer["o_w"], layer["o_b"])


def feed_forward(x: Tensor, layer: dict) -> Tensor:
    return T.linear(T.relu(T.linear(x, layer["ff1_w"], layer["ff1_b"])), layer["ff2_w"], layer["ff2_b"])


def encoder_layer_forward(x: Tensor, layer: dict, config: ModelConfig,
                          key_mask: Optional[np.ndarray] = None,
                          rng: Optional[np.random.Generator] = None) -> Tensor:
    """Post-norm block: LN(MHSA(x) + x), then LN(FF(a) + a)."""
    if x.ndim != 3 or x.shape[-1] != config.hidden_dim:
        raise T.ShapeError(f"encoder layer expects [n, t, {config.hidden_dim}], got {x.shape}")
    eps = config.eps_layernorm
    attn = multi_head_self_attention(x, layer, config.num_heads, key_mask)
    if rng is not None:
        attn = T.dropout(attn, config.dropout_rate, rng)
    a = T.layer_norm(T.add(attn, x), layer["ln1_g"], layer["ln1_b"], eps)
    ff = feed_forward(a, layer)
    if rng is not None:
        ff = T.dropout(ff, config.dropout_rate, rng)
    return T.layer_norm(T.add(ff, a), layer["ln2_g"], layer["ln2_b"], eps)


def _trace(trace: Optional[list], name: str, shape) -> None:
    if trace is not None:
        trace.append((name, tuple(shape)))


def backbone_forward(ids, params: ModelParams, trace: Optional[list] = None,
                     rng: Optional[np.random.Generator] = None) -> Tensor:
    """ids [n, t] -> hidden states with the last two axes swapped, [n, d, t]."""
    cfg = params.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise T.ShapeError(f"ids must be [n, t], got {ids.shape}")
    n, t = ids.shape
    if t > cfg.max_len:
        raise T.ShapeError(f"sequence length {t} exceeds max_len {cfg.max_len}")
    _trace(trace, "ids", ids.shape)
    mask = valid_positions(ids)
    positions = np.broadcast_to(np.arange(t), (n, t))
    h = T.add(T.gather_rows(params["tok_emb"], ids), T.gather_rows(params["pos_emb"], positions))
    _trace(trace, "embedding", h.shape)
    for i in range(cfg.num_layers):
        h = encoder_layer_forward(h, params.layer(i), cfg, mask, rng)
    _trace(trace, "encoder", h.shape)
    h = T.mask_rows(h, mask)
    out = T.transpose_last2(h)
    _trace(trace, "transpose", out.shape)
    return out


def cnn_head_forward(l_n: Tensor, params: ModelParams, trace: Optional[list] = None) -> Tensor:
    """[n, d, t] -> conv -> relu -> global max pool -> squeeze -> linear -> [n, 2]."""
    conv = T.conv1d(l_n, params["conv_w"], params["conv_b"])
    _trace(trace, "conv", conv.shape)
    pooled = T.global_maxpool1d(T.relu(conv))
    _trace(trace, "maxpool", pooled.shape)
    flat = T.squeeze(pooled, axis=2)
    _trace(trace, "squeeze", flat.shape)
    logits = T.linear(flat, params["fc_w"], params["fc_b"])
    _trace(trace, "fc", logits.shape)
    return logits


def forward(ids, params: ModelParams, trace: Optional[list] = None,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Logits [n, 2].  Passing ``rng`` switches dropout on."""
    return cnn_head_forward(backbone_forward(ids, params, trace, rng), params, trace)


def bce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] < 1 or labels.shape != (logits.shape[0],):
        raise T.ShapeError(f"bce_loss: logits {logits.shape}, labels {labels.shape}")
    return T.scale(T.mean(T.pick(T.log_softmax(logits, axis=1), labels)), -1.0)


def predict_proba(ids, params: ModelParams, batch_size: int = 256) -> np.ndarray:
    """Class-1 probability per row."""
    ids = np.asarray(ids, dtype=np.int64)
    out = []
    with T.no_grad():
        for start in range(0, ids.shape[0], batch_size):
            logits = forward(ids[start:start + batch_size], params)
            out.append(T.softmax(logits, axis=1).data[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def predict_label(ids, params: ModelParams, batch_size: int = 256) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = []
    with T.no_grad():
        for start in range(0, ids.shape[0], batch_size):
            out.append(forward(ids[start:start + batch_size], params).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# checkpoints: <name>.json manifest + <name>.bin little-endian float64 blob


def manifest_path(blob_path) -> Path:
    return Path(blob_path).with_suffix(".json")


def save_checkpoint(blob_path, params: ModelParams, *, seed: int, epoch: int,
                    metrics: Optional[dict] = None) -> None:
    blob_path = Path(blob_path)
    index = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, t in params:
            raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            fh.write(raw)
            index.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "format": "sce-checkpoint v1",
        "config": params.config.to_dict(),
        "seed": seed,
        "epoch": epoch,
        "metrics": metrics or {},
        "tensors": index,
        "blob_bytes": offset,
    }
    manifest_path(blob_path).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(blob_path, requires_grad: bool = True):
    """Returns (ModelParams, manifest dict)."""
    blob_path = Path(blob_path)
    try:
        manifest = json.loads(manifest_path(blob_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{manifest_path(blob_path)}: invalid JSON ({exc})") from None
    raw = blob_path.read_bytes()
    expected = sum(entry["nbytes"] for entry in manifest["tensors"])
    if len(raw) != expected or manifest.get("blob_bytes", expected) != expected:
        raise CheckpointError(
            f"{blob_path}: blob holds {len(raw)} bytes but manifest describes {expected}")
    config = ModelConfig.from_dict(manifest["config"])
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        if int(np.prod(shape)) * 8 != entry["nbytes"]:
            raise CheckpointError(f"{entry['name']}: shape {shape} does not match {entry['nbytes']} bytes")
        chunk = raw[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        tensors[entry["name"]] = Tensor(arr, requires_grad=requires_grad)
    return ModelParams(config, tensors), manifest
