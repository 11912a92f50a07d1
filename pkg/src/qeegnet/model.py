"""EEGNet and QEEGNet graphs built from the layers in :mod:`qeegnet.nn`.

Both share the same backbone::

    temporal conv -> BN -> depthwise (electrode) conv -> BN -> ELU -> pool -> dropout
    -> separable conv -> BN -> ELU -> pool -> dropout -> flatten

EEGNet then applies ``dense -> softmax``.  QEEGNet inserts the classical
embedding (``dense -> ELU``), squashes it to angles with ``pi * tanh``, runs
the VQC and maps the per-qubit readout through ``dense -> softmax``.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .errors import BuildError, ConfigurationError, ShapeError, StateError, TrainingError
from .vqc import VqcConfig, VqcParams, init_params, vqc_forward, vqc_param_shift_grad

EEGNET = "eegnet"
QEEGNET = "qeegnet"
MODEL_KINDS = (EEGNET, QEEGNET)


@dataclass
class ModelConfig:
    n_channels: int
    n_samples: int
    n_classes: int
    sample_rate: float = 128.0
    temporal_filters: int = 8  # F1
    depth_multiplier: int = 2  # D
    pointwise_filters: int = 16  # F2
    temporal_kernel: int | None = None  # default: sample_rate / 2
    separable_kernel: int = 16
    pool1: int = 4
    pool2: int = 8
    embedding_dim: int = 4
    vqc: VqcConfig | None = field(default_factory=VqcConfig)
    dropout_rate: float = 0.25
    elu_alpha: float = 1.0
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        if isinstance(self.vqc, dict):
            self.vqc = VqcConfig(**self.vqc)
        if self.temporal_kernel is None:
            self.temporal_kernel = max(1, int(round(self.sample_rate / 2)))
        counts = ("n_channels", "n_samples", "n_classes", "temporal_filters", "depth_multiplier",
                  "pointwise_filters", "temporal_kernel", "separable_kernel", "pool1", "pool2",
                  "embedding_dim")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vqc is not None and self.vqc.n_qubits != self.embedding_dim:
            raise ConfigurationError(
                f"embedding_dim ({self.embedding_dim}) must equal vqc.n_qubits ({self.vqc.n_qubits})"
            )
        if not 0 <= self.dropout_rate < 1:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class QuantumLayer(nn.Layer):
    kind = "vqc"

    def __init__(self, name, config: VqcConfig, rng: np.random.Generator | None = None):
        super().__init__(name)
        self.vqc = config
        self.params["weights"] = init_params(config, rng or np.random.default_rng(0)).weights

    def config(self):
        return {"n_qubits": self.vqc.n_qubits, "n_layers": self.vqc.n_layers}

    def output_shape(self, in_shape):
        if in_shape != (self.vqc.n_qubits,):
            raise ShapeError(f"expected ({self.vqc.n_qubits},) angles, got {in_shape}")
        return in_shape

    def forward(self, x, training):
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(self.params["weights"]))):
            raise TrainingError(f"{self.name}: non-finite circuit angles")
        self._cache = x
        return vqc_forward(x, VqcParams(self.params["weights"]), self.vqc)

    def backward(self, grad):
        g = vqc_param_shift_grad(self._cached(), VqcParams(self.params["weights"]), self.vqc, grad)
        self.grads["weights"] = g.d_weights
        return g.d_inputs


class ModelGraph:
    """Ordered layer list with cached-intermediate backprop."""

    def __init__(self, kind: str, config: ModelConfig, layers: list[nn.Layer]):
        self.kind = kind
        self.config = config
        self.layers = layers
        self._ready = False
        self.input_shape = (1, config.n_channels, config.n_samples)
        self.shapes = self._propagate_shapes()

    def _propagate_shapes(self) -> list[tuple]:
        return propagate_shapes(self.layers, self.input_shape)

    @property
    def feature_layer(self) -> str:
        """Layer whose output ``embed`` returns: the VQC readout or the flattened backbone."""
        return "vqc" if self.kind == QEEGNET else "flatten"

    def layer(self, name: str) -> nn.Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[:, None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match model input {self.input_shape}")
        return x

    def forward(self, x: np.ndarray, training: bool = False, upto: str | None = None) -> np.ndarray:
        x = self._check_input(x)
        for layer in self.layers:
            x = layer.forward(x, training)
            if layer.name == upto:
                self._ready = False
                return x
        self._ready = True
        return x

    def logits(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        return self.forward(x, training, upto=self.layers[-2].name)

    def backward(self, grad_probs: np.ndarray) -> dict[str, np.ndarray]:
        """Backprop d(loss)/d(probabilities); returns gradients for every parameter."""
        if not self._ready:
            raise StateError("backward requires a full forward pass first")
        return self._backward(self.layers[-1].backward(grad_probs), self.layers[:-1])

    def backward_logits(self, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Backprop starting below the softmax (e.g. the cross-entropy shortcut)."""
        if not self._ready:
            raise StateError("backward requires a full forward pass first")
        return self._backward(grad_logits, self.layers[:-1])

    def _backward(self, grad, layers) -> dict[str, np.ndarray]:
        for layer in reversed(layers):
            grad = layer.backward(grad)
        return self.gradients()

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": l.grads[k] for l in self.layers for k in l.params}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.buffers.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in {**self.parameters(), **self.buffers()}.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = {**self.parameters(), **self.buffers()}
        missing = sorted(set(mine) - set(state))
        if missing:
            raise KeyError(f"state is missing tensors: {missing}")
        for k, v in mine.items():
            if v.shape != state[k].shape:
                raise ShapeError(f"{k}: shape {state[k].shape} != {v.shape}")
            v[...] = state[k]  # in place: batch-norm state aliases these arrays

    def dropout_layers(self) -> list[nn.Dropout]:
        return [l for l in self.layers if isinstance(l, nn.Dropout)]

    def n_params(self) -> int:
        return int(sum(v.size for v in self.parameters().values()))

    def vqc_param_count(self) -> int:
        return int(sum(l.params["weights"].size for l in self.layers if isinstance(l, QuantumLayer)))

    def summary_rows(self) -> list[nn.LayerSpec]:
        return [
            nn.LayerSpec(l.name, l.kind, shape, int(sum(p.size for p in l.params.values())), l.config())
            for l, shape in zip(self.layers, self.shapes)
        ]

    def summary(self) -> str:
        rows = self.summary_rows()
        lines = [f"{self.kind}  input {self.input_shape}",
                 f"{'layer':<14}{'kind':<16}{'output':<20}{'params':>8}"]
        for r in rows:
            lines.append(f"{r.name:<14}{r.kind:<16}{str(r.output_shape):<20}{r.n_params:>8}")
        lines.append(f"total trainable parameters: {self.n_params()}")
        return "\n".join(lines)

    def descriptor(self) -> dict:
        """Architecture description stored in checkpoints."""
        return {
            "kind": self.kind,
            "config": self.config.to_dict(),
            "layers": [{"name": r.name, "kind": r.kind, "output_shape": list(r.output_shape),
                        "config": r.config} for r in self.summary_rows()],
        }


def propagate_shapes(layers: list[nn.Layer], input_shape: tuple) -> list[tuple]:
    """Symbolic per-layer output shapes (batch axis omitted)."""
    shapes, shape = [], input_shape
    for layer in layers:
        try:
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise BuildError(layer.name, str(exc)) from None
        if any(s < 1 for s in shape):
            raise BuildError(layer.name, f"output shape {shape} has an empty dimension")
        shapes.append(shape)
    return shapes


def _backbone(cfg: ModelConfig, rng: np.random.Generator, seed: int) -> list[nn.Layer]:
    f1, d, f2 = cfg.temporal_filters, cfg.depth_multiplier, cfg.pointwise_filters
    return [
        nn.DepthwiseConv2d("conv_time", 1, f1, (1, cfg.temporal_kernel), rng, input_grad=False),
        nn.BatchNorm("bn1", f1, cfg.bn_momentum, cfg.bn_epsilon),
        nn.DepthwiseConv2d("conv_space", f1, d, (cfg.n_channels, 1), rng),
        nn.BatchNorm("bn2", f1 * d, cfg.bn_momentum, cfg.bn_epsilon),
        nn.ELU("elu1", cfg.elu_alpha),
        nn.AvgPool("pool1", cfg.pool1),
        nn.Dropout("drop1", cfg.dropout_rate, seed + 1),
        nn.DepthwiseConv2d("sep_depth", f1 * d, 1, (1, cfg.separable_kernel), rng),
        nn.PointwiseConv2d("sep_point", f1 * d, f2, rng),
        nn.BatchNorm("bn3", f2, cfg.bn_momentum, cfg.bn_epsilon),
        nn.ELU("elu2", cfg.elu_alpha),
        nn.AvgPool("pool2", cfg.pool2),
        nn.Dropout("drop2", cfg.dropout_rate, seed + 2),
        nn.Flatten("flatten"),
    ]


def _flat_width(cfg: ModelConfig, backbone: list[nn.Layer]) -> int:
    return propagate_shapes(backbone, (1, cfg.n_channels, cfg.n_samples))[-1][0]


def build_eegnet(cfg: ModelConfig, seed: int = 0) -> ModelGraph:
    rng = np.random.default_rng(seed)
    layers = _backbone(cfg, rng, seed)
    layers += [nn.Dense("head", _flat_width(cfg, layers), cfg.n_classes, rng), nn.Softmax("softmax")]
    return ModelGraph(EEGNET, cfg, layers)


def build_qeegnet(cfg: ModelConfig, seed: int = 0) -> ModelGraph:
    if cfg.vqc is None:
        raise BuildError("vqc", "QEEGNet requires a VQC configuration")
    rng = np.random.default_rng(seed)
    layers = _backbone(cfg, rng, seed)
    n = cfg.vqc.n_qubits
    layers += [
        nn.Dense("embed", _flat_width(cfg, layers), n, rng),
        nn.ELU("embed_elu", cfg.elu_alpha),
        nn.AngleScale("angles"),
        QuantumLayer("vqc", cfg.vqc, rng),
        nn.Dense("head", n, cfg.n_classes, rng),
        nn.Softmax("softmax"),
    ]
    return ModelGraph(QEEGNET, cfg, layers)


def build_model(kind: str, cfg: ModelConfig, seed: int = 0) -> ModelGraph:
    if kind == EEGNET:
        return build_eegnet(cfg, seed)
    if kind == QEEGNET:
        return build_qeegnet(cfg, seed)
    raise ConfigurationError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def model_forward(graph: ModelGraph, batch: np.ndarray, training: bool = False) -> np.ndarray:
    return graph.forward(batch, training)


def model_backward(graph: ModelGraph, upstream_loss_grad: np.ndarray) -> dict[str, np.ndarray]:
    return graph.backward(upstream_loss_grad)


@dataclass
class ComplexityReport:
    C: int
    T: int
    K: int
    M: int
    n: int
    depthwise_ops: int
    pointwise_ops: int
    classical_ops: int
    quantum_ops: int
    total: int
    timing: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        lines = [
            f"C={self.C} T={self.T} K={self.K} M={self.M} n={self.n}",
            f"depthwise  C*T*K = {self.depthwise_ops}",
            f"pointwise  C*M*T = {self.pointwise_ops}",
            f"classical        = {self.classical_ops}",
        ]
        if self.quantum_ops:
            lines.append(f"quantum    n     = {self.quantum_ops}")
        lines.append(f"total            = {self.total}")
        if self.timing:
            for k, v in self.timing.items():
                lines.append(f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}")
        return "\n".join(lines)


def complexity_report(cfg: ModelConfig, K: int, M: int, n: int | None = None) -> ComplexityReport:
    """Operation counts ``C*T*K + C*M*T (+ n)``.

    ``n`` defaults to the configured qubit count, or 0 when the config has no VQC.
    """
    if n is None:
        n = cfg.vqc.n_qubits if cfg.vqc is not None else 0
    C, T = cfg.n_channels, cfg.n_samples
    if min(C, T, K, M) < 1 or n < 0:
        raise ConfigurationError("complexity arguments must be positive")
    dw, pw = C * T * K, C * M * T
    return ComplexityReport(C, T, K, M, n, dw, pw, dw + pw, n, dw + pw + n)


def time_forward(graph: ModelGraph, repeats: int = 20, batch: int = 1, seed: int = 0) -> float:
    """Median wall-clock seconds for one eval-mode forward pass."""
    x = np.random.default_rng(seed).normal(size=(batch,) + graph.input_shape)
    graph.forward(x)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        graph.forward(x)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def qubit_scaling(cfg: ModelConfig, qubits=(2, 4, 6, 8), repeats: int = 30, batch: int = 16,
                  seed: int = 0) -> list[dict]:
    """Measured forward time of QEEGNet against EEGNet as the qubit count grows.

    Simulating ``n`` qubits costs ``O(L * n * 2^n)`` per trial; ``sim_cost``
    records ``n * 2^n`` so callers can normalise the overhead by it.  Models
    are timed in interleaved rounds and the fastest round is kept, which is
    far less noisy than a median on a shared machine.
    """
    layers = cfg.vqc.n_layers if cfg.vqc is not None else 2
    graphs = {0: build_eegnet(cfg, seed)}
    for n in qubits:
        graphs[n] = build_qeegnet(replace(cfg, embedding_dim=n, vqc=VqcConfig(n, layers)), seed)
    x = np.random.default_rng(seed).normal(size=(batch,) + graphs[0].input_shape)
    best = {n: np.inf for n in graphs}
    for g in graphs.values():
        g.forward(x)
    for _ in range(repeats):
        for n, g in graphs.items():
            t0 = time.perf_counter()
            g.forward(x)
            best[n] = min(best[n], time.perf_counter() - t0)
    return [{"n": n, "eegnet_s": best[0], "qeegnet_s": best[n], "ratio": best[n] / best[0],
             "overhead_s": best[n] - best[0], "sim_cost": n * 2**n} for n in qubits]
