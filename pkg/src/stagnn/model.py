"""Graph/temporal building blocks and the six model variants.

Shapes follow a batch-first layout.  A window arrives as ``(B, w, S)``; graph
layers see nodes as rows, ``(B, S, d)``; TCN blocks use channels-first
``(B, C, L)``; temporal attention works time-major, ``(B, L, C)``.

In the cascaded variants the GCN output ``(B, S, n)`` feeds the TCN directly as
``S`` channels over ``n`` steps, so the GCN width becomes the sequence length.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .graph import AdjacencyMatrix
from .tensor import Tensor

VARIANTS = ("GNN", "AGNN", "TCN", "ATCN", "STGNN", "STAGNN")
_GRAPH = {"GNN", "AGNN", "STGNN", "STAGNN"}
_TEMPORAL = {"TCN", "ATCN", "STGNN", "STAGNN"}
_SPATIAL_ATTN = {"AGNN", "STAGNN"}
_TEMPORAL_ATTN = {"ATCN", "STAGNN"}


@dataclass
class ModelConfig:
    variant: str = "STAGNN"
    n_nodes: int = 24
    window: int = 50
    gcn_dims: tuple = (64, 64)
    tcn_dims: tuple = (64, 10)
    kernel_size: int = 2
    dropout: float = 0.5
    heads_spatial: int = 2
    heads_temporal: int = 2
    leaky_slope: float = 0.2
    seed: int = 0
    # run an attention variant with every attention layer replaced by a passthrough
    identity_attention: bool = False

    def __post_init__(self):
        self.gcn_dims = tuple(int(d) for d in self.gcn_dims)
        self.tcn_dims = tuple(int(d) for d in self.tcn_dims)
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.kernel_size < 1:
            raise ConfigError("kernel_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.heads_spatial < 1 or self.heads_temporal < 1:
            raise ConfigError("attention head counts must be >= 1")
        if self.n_nodes < 1 or self.window < 1:
            raise ConfigError("n_nodes and window must be >= 1")
        if self.uses_graph and not self.gcn_dims:
            raise ConfigError(f"{self.variant} needs at least one GCN layer")
        if self.uses_tcn and not self.tcn_dims:
            raise ConfigError(f"{self.variant} needs at least one TCN block")
        if any(d < 1 for d in self.gcn_dims + self.tcn_dims):
            raise ConfigError("layer widths must be >= 1")

    @property
    def uses_graph(self) -> bool:
        return self.variant in _GRAPH

    @property
    def uses_tcn(self) -> bool:
        return self.variant in _TEMPORAL

    @property
    def spatial_attention(self) -> bool:
        return self.variant in _SPATIAL_ATTN and not self.identity_attention

    @property
    def temporal_attention(self) -> bool:
        return self.variant in _TEMPORAL_ATTN and not self.identity_attention

    @property
    def feature_length(self) -> int:
        """Length of the flattened vector fed to the prediction head."""
        if self.uses_tcn:
            steps = self.gcn_dims[-1] if self.uses_graph else self.window
            return steps * self.tcn_dims[-1]
        return self.n_nodes * self.gcn_dims[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gcn_dims"] = list(self.gcn_dims)
        d["tcn_dims"] = list(self.tcn_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# -- layers ---------------------------------------------------------------------


def gcn_layer(H, A_hat, W) -> Tensor:
    """``relu(A_hat @ H @ W)`` for node features ``H`` of shape ``(..., S, d_in)``."""
    return T.relu(T.matmul(T.matmul(A_hat, H), W))


def spatial_attention(H, neighbourhood, head_weights, slope: float = 0.2):
    """Multi-head attention over graph neighbours, heads averaged.

    Each head weight is a ``2n`` vector split into a source half and a
    neighbour half, so the score for the pair ``(i, j)`` is
    ``w[:n] . H_i + w[n:] . H_j``.  No value projection is applied: the output
    row ``i`` is the attention-weighted mean of the neighbour rows ``H_j``.

    Returns the output tensor and a list of per-head attention arrays
    ``(..., S, S)`` that are zero outside each neighbourhood.
    """
    H = T._as_tensor(H)
    n = H.shape[-1]
    outputs, alphas = [], []
    for w in head_weights:
        if w.shape != (2 * n,):
            raise DimensionError(f"attention weight must have shape ({2 * n},), got {w.shape}")
        src = T.matmul(H, T.reshape(w[:n], (n, 1)))
        dst = T.matmul(H, T.reshape(w[n:], (n, 1)))
        scores = T.leaky_relu(src + T.transpose(dst), slope)
        alpha = T.softmax(scores, axis=-1, mask=neighbourhood)
        outputs.append(T.matmul(alpha, H))
        alphas.append(alpha.data)
    return _average(outputs), alphas


def tcn_block(X, weights, dilation: int, dropout: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """Residual block of two dilated causal convolutions.

    ``weights`` maps ``conv1.weight``, ``conv1.bias``, ``conv2.weight``,
    ``conv2.bias`` and, when the channel count changes, ``proj.weight`` and
    ``proj.bias`` (a 1x1 convolution on the residual path).
    """
    h = _conv(X, weights["conv1.weight"], weights["conv1.bias"], dilation)
    h = T.dropout(T.relu(h), dropout, training, rng)
    h = _conv(h, weights["conv2.weight"], weights["conv2.bias"], dilation)
    h = T.dropout(T.relu(h), dropout, training, rng)
    if "proj.weight" in weights:
        residual = _conv(X, weights["proj.weight"], weights["proj.bias"], 1)
    else:
        residual = X
    return h + residual


def _conv(x, w, b, dilation):
    return T.conv1d_causal(x, w, dilation) + T.reshape(b, (-1, 1))


def temporal_attention(H, heads):
    """Multi-head softmax weighting over time steps, heads averaged.

    ``H`` is time-major, ``(..., n, C)``; each head is a ``(weight (C,), bias (1,))``
    pair.  A head scores every step with ``sigmoid(H @ weight + bias)``, turns
    the ``n`` scores into a distribution with softmax and rescales each step
    of ``H`` by its weight.  Returns the output and per-head ``(..., n)`` weights.
    """
    H = T._as_tensor(H)
    c = H.shape[-1]
    outputs, betas = [], []
    for w, b in heads:
        if w.shape != (c,):
            raise DimensionError(f"temporal weight must have shape ({c},), got {w.shape}")
        score = T.sigmoid(T.matmul(H, T.reshape(w, (c, 1))) + b)
        beta = T.softmax(score, axis=-2)
        outputs.append(H * beta)
        betas.append(beta.data[..., 0])
    return _average(outputs), betas


def _average(outputs):
    out = outputs[0]
    for o in outputs[1:]:
        out = out + o
    if len(outputs) > 1:
        out = out * (1.0 / len(outputs))
    return out


# -- parameters ------------------------------------------------------------------


def parameter_shapes(config: ModelConfig) -> dict:
    """Ordered ``name -> (shape, fan_in)`` for every trainable tensor."""
    shapes = {}
    if config.uses_graph:
        d_in = config.window
        for i, d in enumerate(config.gcn_dims, 1):
            shapes[f"gcn{i}.weight"] = ((d_in, d), d_in)
            if config.spatial_attention:
                for m in range(config.heads_spatial):
                    shapes[f"spatial{i}.head{m}.weight"] = ((2 * d,), 2 * d)
            d_in = d
    if config.uses_tcn:
        c_in = config.n_nodes
        k = config.kernel_size
        for i, c in enumerate(config.tcn_dims, 1):
            p = f"tcn{i}."
            shapes[p + "conv1.weight"] = ((c, c_in, k), c_in * k)
            shapes[p + "conv1.bias"] = ((c,), None)
            shapes[p + "conv2.weight"] = ((c, c, k), c * k)
            shapes[p + "conv2.bias"] = ((c,), None)
            if c_in != c:
                shapes[p + "proj.weight"] = ((c, c_in, 1), c_in)
                shapes[p + "proj.bias"] = ((c,), None)
            if config.temporal_attention:
                for m in range(config.heads_temporal):
                    shapes[f"temporal{i}.head{m}.weight"] = ((c,), c)
                    shapes[f"temporal{i}.head{m}.bias"] = ((1,), None)
            c_in = c
    f = config.feature_length
    shapes["fc.weight"] = ((f, 1), f)
    shapes["fc.bias"] = ((1,), None)
    return shapes


def init_parameters(config: ModelConfig) -> dict:
    """Uniform ``+-sqrt(1/fan_in)`` weights and zero biases.

    Every tensor draws from its own stream keyed on ``(seed, name)`` so
    variants that share a layer name start from identical values.
    """
    params = {}
    for name, (shape, fan_in) in parameter_shapes(config).items():
        if fan_in is None:
            data = np.zeros(shape)
        else:
            rng = np.random.default_rng([config.seed, zlib.crc32(name.encode())])
            bound = np.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


# -- model -----------------------------------------------------------------------


@dataclass
class ForwardResult:
    prediction: Tensor  # (B,)
    features: Tensor  # (B, feature_length), input of the prediction head
    spatial: dict = field(default_factory=dict)  # layer -> (B, heads, S, S)
    temporal: dict = field(default_factory=dict)  # layer -> (B, heads, n)
    hidden: dict = field(default_factory=dict)  # "graph" -> H_g after the spatial stack


class Model:
    """One of the six variants, holding its parameters and graph."""

    def __init__(self, config: ModelConfig, adjacency: Optional[AdjacencyMatrix] = None, params: Optional[dict] = None):
        if config.uses_graph:
            if adjacency is None:
                raise ConfigError(f"{config.variant} needs an adjacency matrix")
            if adjacency.n_nodes != config.n_nodes:
                raise ConfigError(f"adjacency has {adjacency.n_nodes} nodes, config expects {config.n_nodes}")
        self.config = config
        self.adjacency = adjacency
        self.params = init_parameters(config) if params is None else params
        expected = {k: v[0] for k, v in parameter_shapes(config).items()}
        got = {k: tuple(v.shape) for k, v in self.params.items()}
        if got != expected:
            raise DimensionError("parameter shapes do not match the model config")

    def __repr__(self) -> str:
        return f"Model({self.config.variant}, {self.n_parameters} parameters)"

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _tcn_weights(self, i: int) -> dict:
        prefix = f"tcn{i}."
        return {k[len(prefix) :]: v for k, v in self.params.items() if k.startswith(prefix)}

    def forward(self, x, training: bool = False, rng=None) -> ForwardResult:
        """Predict RUL for a batch of windows ``(B, w, S)`` (or a single ``(w, S)``)."""
        cfg = self.config
        x = T._as_tensor(x)
        if x.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1:] != (cfg.window, cfg.n_nodes):
            raise DimensionError(f"expected windows of shape (B, {cfg.window}, {cfg.n_nodes}), got {x.shape}")
        batch = x.shape[0]
        result = ForwardResult(prediction=None, features=None)

        h = T.transpose(x)  # (B, S, w)
        if cfg.uses_graph:
            a_hat = self.adjacency.A_hat
            mask = self.adjacency.neighbourhood
            for i in range(1, len(cfg.gcn_dims) + 1):
                h = gcn_layer(h, a_hat, self.params[f"gcn{i}.weight"])
                if cfg.spatial_attention:
                    heads = [self.params[f"spatial{i}.head{m}.weight"] for m in range(cfg.heads_spatial)]
                    h, alphas = spatial_attention(h, mask, heads, cfg.leaky_slope)
                    result.spatial[f"layer{i}"] = np.stack(alphas, axis=1)
            result.hidden["graph"] = h

        if cfg.uses_tcn:
            # (B, S, n): S channels over n steps
            for i in range(1, len(cfg.tcn_dims) + 1):
                h = tcn_block(h, self._tcn_weights(i), 2 ** (i - 1), cfg.dropout, training, rng)
                if cfg.temporal_attention:
                    heads = [
                        (self.params[f"temporal{i}.head{m}.weight"], self.params[f"temporal{i}.head{m}.bias"])
                        for m in range(cfg.heads_temporal)
                    ]
                    ht, betas = temporal_attention(T.transpose(h), heads)
                    result.temporal[f"layer{i}"] = np.stack(betas, axis=1)
                    h = T.transpose(ht)
            h = T.transpose(h)  # time-major (B, n, C) before flattening

        features = T.reshape(h, (batch, -1))
        out = T.matmul(features, self.params["fc.weight"]) + self.params["fc.bias"]
        result.prediction = T.reshape(out, (batch,))
        result.features = features
        return result

    def predict(self, x, batch_size: int = 512) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        out = [self.forward(x[i : i + batch_size]).prediction.data for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.empty(0)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> "ModelState":
        return ModelState(self.config, {k: v.data.copy() for k, v in self.params.items()})

    @classmethod
    def from_state(cls, state: "ModelState", adjacency: Optional[AdjacencyMatrix] = None) -> "Model":
        params = {k: Tensor(v, requires_grad=True) for k, v in state.arrays.items()}
        return cls(state.config, adjacency, params)


def assemble(config: ModelConfig, adjacency: Optional[AdjacencyMatrix] = None) -> Model:
    return Model(config, adjacency)


# -- serialization ---------------------------------------------------------------

MAGIC = b"STAGNN-STATE\n"
FORMAT_VERSION = 1


@dataclass
class ModelState:
    """Named parameter arrays plus the architecture that owns them.

    Binary layout: magic line, little-endian u64 header length, a JSON header
    (format version, model config, array directory, free-form ``extras``),
    then every array as raw little-endian float64 in directory order.
    """

    config: ModelConfig
    arrays: dict
    extras: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        directory, chunks, offset = [], [], 0
        for name, arr in self.arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
        header = {
            "format_version": FORMAT_VERSION,
            "model_config": self.config.to_dict(),
            "arrays": directory,
            "extras": self.extras,
        }
        head = json.dumps(header, sort_keys=True).encode()
        return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelState":
        if not blob.startswith(MAGIC):
            raise FormatError("not a model state file")
        pos = len(MAGIC)
        (n,) = struct.unpack("<Q", blob[pos : pos + 8])
        pos += 8
        header = json.loads(blob[pos : pos + n])
        if header.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {header.get('format_version')}")
        body = pos + n
        arrays = {}
        for entry in header["arrays"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            start = body + entry["offset"]
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
            arrays[entry["name"]] = data.astype(np.float64).reshape(entry["shape"])
        return cls(ModelConfig.from_dict(header["model_config"]), arrays, header.get("extras", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelState":
        return cls.from_bytes(Path(path).read_bytes())
