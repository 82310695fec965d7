"""Bidirectional LSTM sequence regressor with analytic backpropagation.

A model is a stack of bidirectional LSTM layers followed by a single linear
output neuron per 250 ms step. Inputs may come from several modalities: the
first ``split`` layers then run once per modality (branches) and their
outputs are concatenated to feed the remaining shared layers (trunk). With
``split = 0`` there is a single input and only a trunk.

Parameter blocks, in file order::

    branch{m}.layer{k}.{fwd,bwd}.{W,b}   k < split, for every modality m
    trunk.layer{k}.{fwd,bwd}.{W,b}       split <= k < len(widths)
    output.W, output.b

``W`` has shape (4H, in + H) acting on ``[x_t; h_{t-1}]``; gate rows are
ordered input, forget, output, candidate. Training math is float64.
"""

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.special import expit

from config import get_config
from dsp import FeatureStream, NormStats
from errors import DimMismatchError, InvalidArgumentError, LengthMismatchError, ModelFormatError
from metrics import ccc_loss_gradient

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"DMDL1"
MODEL_VERSION = 1
DEFAULT_WIDTHS = [200, 64, 32, 32]

Params = Dict[str, np.ndarray]


class ModelConfig(BaseModel):
    """Architecture of a regressor."""

    input_dims: List[int]
    widths: List[int] = Field(default_factory=lambda: list(DEFAULT_WIDTHS))
    split: int = Field(0, ge=0, description="Layers run per modality before concatenation")
    seed: int = 0
    per_direction: bool = Field(True, description="Widths count units per direction; False halves them")

    @field_validator("input_dims", "widths")
    @classmethod
    def _positive(cls, values: List[int]) -> List[int]:
        if not values or any(v < 1 for v in values):
            raise ValueError("must be a non-empty list of positive integers")
        return values

    @model_validator(mode="after")
    def _topology(self) -> "ModelConfig":
        if self.split >= len(self.widths):
            raise ValueError(f"split {self.split} leaves no shared layer out of {len(self.widths)}")
        if self.split == 0 and len(self.input_dims) != 1:
            raise ValueError("several inputs need split >= 1; concatenate features for a single-input model")
        return self

    @classmethod
    def single(cls, input_dim: int, widths: Optional[Sequence[int]] = None, seed: int = 0) -> "ModelConfig":
        return cls(input_dims=[input_dim], widths=list(widths or DEFAULT_WIDTHS), seed=seed)

    @property
    def input_dim(self) -> int:
        return sum(self.input_dims)

    @property
    def layer_widths(self) -> List[int]:
        """Units per direction actually instantiated."""
        if self.per_direction:
            return list(self.widths)
        return [max(1, w // 2) for w in self.widths]


def layer_prefixes(config: ModelConfig) -> Tuple[List[List[str]], List[str]]:
    branches = [[f"branch{m}.layer{k}" for k in range(config.split)] for m in range(len(config.input_dims))]
    trunk = [f"trunk.layer{k}" for k in range(config.split, len(config.widths))]
    return branches, trunk


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered parameter names and shapes for a configuration."""
    widths = config.layer_widths
    shapes: Dict[str, Tuple[int, ...]] = {}

    def add_layer(prefix: str, in_dim: int, hidden: int) -> None:
        for direction in ("fwd", "bwd"):
            shapes[f"{prefix}.{direction}.W"] = (4 * hidden, in_dim + hidden)
            shapes[f"{prefix}.{direction}.b"] = (4 * hidden,)

    branches, trunk = layer_prefixes(config)
    for m, prefixes in enumerate(branches):
        in_dim = config.input_dims[m]
        for k, prefix in enumerate(prefixes):
            add_layer(prefix, in_dim, widths[k])
            in_dim = 2 * widths[k]
    in_dim = config.input_dims[0] if config.split == 0 else len(config.input_dims) * 2 * widths[config.split - 1]
    for k, prefix in zip(range(config.split, len(widths)), trunk):
        add_layer(prefix, in_dim, widths[k])
        in_dim = 2 * widths[k]
    shapes["output.W"] = (in_dim,)
    shapes["output.b"] = (1,)
    return shapes


@dataclass
class RegressorModel:
    """Parameters, architecture and the normalization baked in at training time."""

    config: ModelConfig
    params: Params
    norm: List[NormStats]

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "RegressorModel":
        return RegressorModel(
            config=self.config.model_copy(deep=True),
            params={k: v.copy() for k, v in self.params.items()},
            norm=list(self.norm),
        )


def init_model(config: ModelConfig, norm: Optional[Sequence[NormStats]] = None) -> RegressorModel:
    """Initialize parameters uniformly in +/- 1/sqrt(fan-in), forget-gate bias 1.

    Args:
        config: Architecture and seed.
        norm: One NormStats per input; identity normalization when omitted.

    Returns:
        RegressorModel: Deterministic given ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    params: Params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".b"):
            bias = np.zeros(shape)
            if name != "output.b":
                hidden = shape[0] // 4
                bias[hidden:2 * hidden] = 1.0
            params[name] = bias
        else:
            limit = 1.0 / math.sqrt(shape[-1])
            params[name] = rng.uniform(-limit, limit, size=shape)

    if norm is None:
        norm = [NormStats(np.zeros(d), np.ones(d)) for d in config.input_dims]
    norm = list(norm)
    if [s.dim for s in norm] != list(config.input_dims):
        raise DimMismatchError(f"normalization dims {[s.dim for s in norm]} != input dims {config.input_dims}")
    return RegressorModel(config=config, params=params, norm=norm)


@dataclass
class _DirectionCache:
    x: np.ndarray
    gates: np.ndarray
    cell_tanh: np.ndarray
    cell: np.ndarray
    hidden: np.ndarray
    reverse: bool


def _direction_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray, reverse: bool) -> Tuple[np.ndarray, _DirectionCache]:
    steps, in_dim = x.shape
    hidden_size = b.size // 4
    three = 3 * hidden_size
    projected = x @ W[:, :in_dim].T + b
    recurrent = W[:, in_dim:]

    gates = np.empty((steps, 4 * hidden_size), dtype=x.dtype)
    cell = np.empty((steps, hidden_size), dtype=x.dtype)
    cell_tanh = np.empty_like(cell)
    hidden = np.empty_like(cell)
    h_prev = np.zeros(hidden_size, dtype=x.dtype)
    c_prev = np.zeros(hidden_size, dtype=x.dtype)
    for t in (range(steps - 1, -1, -1) if reverse else range(steps)):
        z = projected[t] + recurrent @ h_prev
        g = gates[t]
        g[:three] = expit(z[:three])
        g[three:] = np.tanh(z[three:])
        c_prev = g[hidden_size:2 * hidden_size] * c_prev + g[:hidden_size] * g[three:]
        cell[t] = c_prev
        cell_tanh[t] = np.tanh(c_prev)
        h_prev = g[2 * hidden_size:three] * cell_tanh[t]
        hidden[t] = h_prev
    return hidden, _DirectionCache(x, gates, cell_tanh, cell, hidden, reverse)


def _shift_previous(values: np.ndarray, reverse: bool) -> np.ndarray:
    """State preceding each step in processing order (zeros at the start)."""
    shifted = np.zeros_like(values)
    if reverse:
        shifted[:-1] = values[1:]
    else:
        shifted[1:] = values[:-1]
    return shifted


def _direction_backward(W: np.ndarray, d_hidden: np.ndarray, cache: _DirectionCache, need_input_grad: bool):
    steps, in_dim = cache.x.shape
    hidden_size = cache.hidden.shape[1]
    h = hidden_size
    recurrent_t = W[:, in_dim:].T
    c_before = _shift_previous(cache.cell, cache.reverse)

    dz = np.empty((steps, 4 * hidden_size))
    dh_next = np.zeros(hidden_size)
    dc_next = np.zeros(hidden_size)
    for t in (range(steps) if cache.reverse else range(steps - 1, -1, -1)):
        g = cache.gates[t]
        i, f, o, cand = g[:h], g[h:2 * h], g[2 * h:3 * h], g[3 * h:]
        tc = cache.cell_tanh[t]
        dh = d_hidden[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        row = dz[t]
        row[:h] = dc * cand * i * (1.0 - i)
        row[h:2 * h] = dc * c_before[t] * f * (1.0 - f)
        row[2 * h:3 * h] = dh * tc * o * (1.0 - o)
        row[3 * h:] = dc * i * (1.0 - cand * cand)
        dh_next = recurrent_t @ row
        dc_next = dc * f

    h_before = _shift_previous(cache.hidden, cache.reverse)
    dW = np.hstack([dz.T @ cache.x, dz.T @ h_before])
    db = dz.sum(axis=0)
    dx = dz @ W[:, :in_dim] if need_input_grad else None
    return dx, dW, db


def _bilayer_forward(params: Params, prefix: str, x: np.ndarray):
    forward_h, forward_cache = _direction_forward(params[f"{prefix}.fwd.W"], params[f"{prefix}.fwd.b"], x, reverse=False)
    backward_h, backward_cache = _direction_forward(params[f"{prefix}.bwd.W"], params[f"{prefix}.bwd.b"], x, reverse=True)
    return np.hstack([forward_h, backward_h]), (forward_cache, backward_cache)


def _bilayer_backward(params: Params, prefix: str, d_out: np.ndarray, caches, grads: Params, need_input_grad: bool):
    half = d_out.shape[1] // 2
    dx = None
    for direction, d_half, cache in (("fwd", d_out[:, :half], caches[0]), ("bwd", d_out[:, half:], caches[1])):
        d_in, dW, db = _direction_backward(params[f"{prefix}.{direction}.W"], d_half, cache, need_input_grad)
        grads[f"{prefix}.{direction}.W"] += dW
        grads[f"{prefix}.{direction}.b"] += db
        if need_input_grad:
            dx = d_in if dx is None else dx + d_in
    return dx


@dataclass
class _ForwardCache:
    branch_caches: List[list] = field(default_factory=list)
    branch_widths: List[int] = field(default_factory=list)
    trunk_caches: list = field(default_factory=list)
    top: Optional[np.ndarray] = None
    layer_outputs: List[np.ndarray] = field(default_factory=list)


def _run(params: Params, config: ModelConfig, inputs: Sequence[np.ndarray]) -> Tuple[np.ndarray, _ForwardCache]:
    branches, trunk = layer_prefixes(config)
    cache = _ForwardCache()
    outputs = []
    for m, prefixes in enumerate(branches):
        h = inputs[m]
        caches = []
        for prefix in prefixes:
            h, layer_cache = _bilayer_forward(params, prefix, h)
            caches.append(layer_cache)
            cache.layer_outputs.append(h)
        outputs.append(h)
        cache.branch_caches.append(caches)
        cache.branch_widths.append(h.shape[1])
    z = inputs[0] if config.split == 0 else np.hstack(outputs)
    for prefix in trunk:
        z, layer_cache = _bilayer_forward(params, prefix, z)
        cache.trunk_caches.append(layer_cache)
        cache.layer_outputs.append(z)
    cache.top = z
    return z @ params["output.W"] + params["output.b"][0], cache


def _backprop(params: Params, config: ModelConfig, d_pred: np.ndarray, cache: _ForwardCache) -> Params:
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    grads["output.W"] += cache.top.T @ d_pred
    grads["output.b"] += d_pred.sum()
    branches, trunk = layer_prefixes(config)

    d_z = np.outer(d_pred, params["output.W"])
    for index in range(len(trunk) - 1, -1, -1):
        need = index > 0 or config.split > 0
        d_z = _bilayer_backward(params, trunk[index], d_z, cache.trunk_caches[index], grads, need)
    if config.split == 0:
        return grads

    offset = 0
    for m, prefixes in enumerate(branches):
        width = cache.branch_widths[m]
        d_h = d_z[:, offset:offset + width]
        offset += width
        for index in range(len(prefixes) - 1, -1, -1):
            d_h = _bilayer_backward(params, prefixes[index], d_h, cache.branch_caches[m][index], grads, index > 0)
    return grads


def _as_streams(item: Union[FeatureStream, Sequence[FeatureStream]]) -> List[FeatureStream]:
    return [item] if isinstance(item, FeatureStream) else list(item)


def normalize_inputs(model: RegressorModel, item: Union[FeatureStream, Sequence[FeatureStream]]) -> List[np.ndarray]:
    """Validate one conversation's streams against the model and normalize them."""
    streams = _as_streams(item)
    dims = model.config.input_dims
    if len(streams) != len(dims):
        raise DimMismatchError(f"model expects {len(dims)} input streams, got {len(streams)}")
    lengths = {len(s) for s in streams}
    if len(lengths) != 1:
        raise LengthMismatchError(f"input streams disagree on length: {sorted(lengths)}")
    if lengths.pop() == 0:
        raise InvalidArgumentError("empty input sequence")
    arrays = []
    for stream, dim, stats in zip(streams, dims, model.norm):
        if stream.dim != dim:
            raise DimMismatchError(f"stream {stream.source!r} has dim {stream.dim}, model expects {dim}")
        arrays.append((stream.segments - stats.mean) / stats.scale)
    return arrays


def forward(model: RegressorModel, item: Union[FeatureStream, Sequence[FeatureStream]], precision: Optional[str] = None) -> np.ndarray:
    """Predict one value per segment.

    Args:
        model: The regressor.
        item: A stream, or one stream per modality for a branched model.
        precision: ``f64`` or ``f32``; defaults to ``AppConfig.precision``.

    Returns:
        Predictions as a float64 array with the input's length.
    """
    inputs = normalize_inputs(model, item)
    precision = precision or get_config().precision
    params = model.params
    if precision == "f32":
        params = {k: v.astype(np.float32) for k, v in params.items()}
        inputs = [x.astype(np.float32) for x in inputs]
    pred, _ = _run(params, model.config, inputs)
    return np.asarray(pred, dtype=np.float64)


def forward_normalized(model: RegressorModel, inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Float64 predictions from inputs already passed through ``normalize_inputs``."""
    pred, _ = _run(model.params, model.config, inputs)
    return pred


def hidden_states(model: RegressorModel, item: Union[FeatureStream, Sequence[FeatureStream]]) -> List[np.ndarray]:
    """Outputs of every bidirectional layer, branches first."""
    _, cache = _run(model.params, model.config, normalize_inputs(model, item))
    return cache.layer_outputs


def loss_and_gradients(
    model: RegressorModel,
    batch: Sequence[Sequence[np.ndarray]],
    refs: Sequence[np.ndarray],
    jobs: int = 1,
) -> Tuple[float, Params]:
    """Batch ``1 - CCC`` loss and its exact gradient, from normalized inputs.

    Per-conversation work may run on ``jobs`` threads; gradients are summed in
    batch order.
    """
    if not batch:
        raise InvalidArgumentError("empty batch")
    params, config = model.params, model.config

    def run(inputs):
        return _run(params, config, inputs)

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(run, batch))
        loss, d_preds = ccc_loss_gradient([pred for pred, _ in results], refs)
        per_conversation = list(pool.map(
            lambda args: _backprop(params, config, args[0], args[1][1]), zip(d_preds, results)
        ))

    grads = per_conversation[0]
    for other in per_conversation[1:]:
        for name in grads:
            grads[name] += other[name]
    return loss, grads


def backward(
    model: RegressorModel,
    batch: Sequence[Union[FeatureStream, Sequence[FeatureStream]]],
    refs: Sequence,
    jobs: int = 1,
) -> Tuple[float, Params]:
    """Gradient of the batch CCC loss with respect to every parameter.

    Raises:
        DegenerateStatisticError: If predictions are constant over the whole batch.
    """
    normalized = [normalize_inputs(model, item) for item in batch]
    refs = [np.asarray(getattr(r, "values", r), dtype=np.float64) for r in refs]
    return loss_and_gradients(model, normalized, refs, jobs=jobs)


@dataclass
class AdamState:
    """Adam moment accumulators and hyper-parameters."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: RegressorModel, lr: float = 0.001) -> "AdamState":
        return cls(
            lr=lr,
            m={k: np.zeros_like(p) for k, p in model.params.items()},
            v={k: np.zeros_like(p) for k, p in model.params.items()},
        )


def adam_step(model: RegressorModel, grads: Params, state: AdamState) -> Tuple[RegressorModel, AdamState]:
    """Apply one bias-corrected Adam update in place.

    Raises:
        DimMismatchError: If gradient names or shapes differ from the parameters.
        InvalidArgumentError: If a gradient is not finite.
    """
    if set(grads) != set(model.params):
        raise DimMismatchError("gradient blocks do not match parameter blocks")
    for name, g in grads.items():
        if g.shape != model.params[name].shape:
            raise DimMismatchError(f"{name}: gradient shape {g.shape} != parameter shape {model.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise InvalidArgumentError(f"{name}: non-finite gradient")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, param in model.params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)
        state.m[name] *= state.beta1
        state.m[name] += (1.0 - state.beta1) * g
        state.v[name] *= state.beta2
        state.v[name] += (1.0 - state.beta2) * (g * g)
        param -= state.lr * (state.m[name] / bc1) / (np.sqrt(state.v[name] / bc2) + state.eps)
    return model, state


def save_model(model: RegressorModel, path: Union[str, Path]) -> None:
    """Write a model in the DMDL1 format.

    Layout (little-endian): ``DMDL1``, u32 version, u32 length + JSON config,
    u32 input count then per input u32 dim, f64 mean[dim], f64 std[dim],
    u32 block count then per block u32 name length, name, u32 ndim,
    u32 shape[ndim], f64 values.
    """
    config = json.dumps(model.config.model_dump(), sort_keys=True).encode("utf-8")
    chunks = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(config)), config, struct.pack("<I", len(model.norm))]
    for stats in model.norm:
        chunks.append(struct.pack("<I", stats.dim))
        chunks.append(stats.mean.astype("<f8").tobytes())
        chunks.append(stats.std.astype("<f8").tobytes())
    chunks.append(struct.pack("<I", len(model.params)))
    for name, param in model.params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{param.ndim}I", param.ndim, *param.shape))
        chunks.append(param.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise ModelFormatError(f"{self.path}: truncated file while reading {what}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def load_model(path: Union[str, Path]) -> RegressorModel:
    """Read a DMDL1 model file.

    Raises:
        ModelFormatError: On a bad magic, unknown version, truncation, or any
            block inconsistent with the declared configuration.
    """
    path = str(path)
    reader = _Reader(Path(path).read_bytes(), path)
    if reader.take(len(MODEL_MAGIC), "magic") != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a DMDL1 model file")
    version = reader.u32("version")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    try:
        config = ModelConfig.model_validate_json(reader.take(reader.u32("config length"), "config"))
    except ValueError as e:
        raise ModelFormatError(f"{path}: invalid config block: {e}")

    count = reader.u32("norm count")
    if count != len(config.input_dims):
        raise ModelFormatError(f"{path}: norm_stats count {count} != {len(config.input_dims)} inputs")
    norm = []
    for m, expected in enumerate(config.input_dims):
        dim = reader.u32(f"norm_stats[{m}].dim")
        if dim != expected:
            raise ModelFormatError(f"{path}: norm_stats[{m}].dim {dim} != input_dims[{m}] {expected}")
        norm.append(NormStats(reader.f64(dim, f"norm_stats[{m}].mean"), reader.f64(dim, f"norm_stats[{m}].std")))

    shapes = parameter_shapes(config)
    count = reader.u32("parameter count")
    if count != len(shapes):
        raise ModelFormatError(f"{path}: {count} parameter blocks, config implies {len(shapes)}")
    params: Params = {}
    for expected_name, expected_shape in shapes.items():
        name = reader.take(reader.u32("block name length"), "block name").decode("utf-8", errors="replace")
        if name != expected_name:
            raise ModelFormatError(f"{path}: block {name!r} found where {expected_name!r} was expected")
        ndim = reader.u32(f"{name}.ndim")
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim, f"{name}.shape"))
        if tuple(shape) != expected_shape:
            raise ModelFormatError(f"{path}: {name}.shape {tuple(shape)} != {expected_shape}")
        values = reader.f64(int(np.prod(shape)), name).reshape(shape)
        if not np.all(np.isfinite(values)):
            raise ModelFormatError(f"{path}: {name} holds non-finite values")
        params[name] = values
    if reader.offset != len(reader.data):
        raise ModelFormatError(f"{path}: {len(reader.data) - reader.offset} trailing bytes")
    return RegressorModel(config=config, params=params, norm=norm)
