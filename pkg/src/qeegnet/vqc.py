"""Variational quantum circuit used as the QEEGNet quantum layer.

Circuit for ``n`` qubits and ``L`` layers acting on |0...0>:

    encoding:   RY(x_i) on qubit i
    layer l:    RY(w[l, i]) on qubit i, then CNOT(i, (i+1) % n) for i = 0..n-1
    readout:    <Z_i> for every qubit

Gradients come from the parameter-shift rule, for the trainable angles and
for the encoded features alike, so the layer can sit inside a network that is
trained end to end.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError
from .statevec import (
    StateVector,
    cnot_inplace,
    ry_inplace,
    z_expectations,
    zero_amplitudes,
)

SHIFT = np.pi / 2
INIT_SCALE = np.pi / 50


@dataclass(frozen=True)
class VqcConfig:
    n_qubits: int = 4
    n_layers: int = 2

    def __post_init__(self):
        if self.n_qubits < 1 or self.n_layers < 1:
            raise ConfigurationError(
                f"VQC needs n_qubits >= 1 and n_layers >= 1, got {self.n_qubits}, {self.n_layers}"
            )

    @property
    def n_params(self) -> int:
        return self.n_qubits * self.n_layers


@dataclass
class VqcParams:
    weights: np.ndarray  # [n_layers, n_qubits], radians

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError(f"VQC weights must be 2-D, got shape {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ConfigurationError("VQC weights must be finite")

    def check(self, config: VqcConfig) -> None:
        if self.weights.shape != (config.n_layers, config.n_qubits):
            raise ShapeError(
                f"weights shape {self.weights.shape} does not match "
                f"({config.n_layers}, {config.n_qubits})"
            )


@dataclass
class VqcGradient:
    d_weights: np.ndarray  # [n_layers, n_qubits]
    d_inputs: np.ndarray  # [n_qubits], or [batch, n_qubits] for batched calls


def init_params(config: VqcConfig, rng: np.random.Generator) -> VqcParams:
    w = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(config.n_layers, config.n_qubits))
    return VqcParams(w)


def _ring_inplace(amps: np.ndarray, n_qubits: int) -> None:
    if n_qubits == 1:
        return
    for i in range(n_qubits):
        cnot_inplace(amps, i, (i + 1) % n_qubits, n_qubits)


def ring_entangle(state: StateVector) -> StateVector:
    """CNOT(q_i, q_{(i+1) mod n}) for ascending i, in place. No-op for one qubit."""
    _ring_inplace(state.amplitudes, state.n_qubits)
    return state


def run_circuit(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Final amplitudes for a batch of feature rows.

    ``features`` has shape ``(..., n)``; ``weights`` is ``(L, n)`` or carries
    extra leading axes that broadcast against the feature batch axes.
    """
    n = features.shape[-1]
    n_layers = weights.shape[-2]
    amps = zero_amplitudes(n, features.shape[:-1])
    for i in range(n):
        ry_inplace(amps, i, n, features[..., i])
    for layer in range(n_layers):
        for i in range(n):
            ry_inplace(amps, i, n, weights[..., layer, i])
        _ring_inplace(amps, n)
    return amps


def _check_inputs(features: np.ndarray, params: VqcParams, config: VqcConfig) -> np.ndarray:
    params.check(config)
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1:] != (config.n_qubits,):
        raise ShapeError(f"expected {config.n_qubits} features, got shape {features.shape}")
    if not np.all(np.isfinite(features)):
        raise ConfigurationError("features must be finite")
    return features


def vqc_forward(features, params: VqcParams, config: VqcConfig) -> np.ndarray:
    """Per-qubit <Z> readout. Accepts one feature vector or a ``(batch, n)`` matrix."""
    features = _check_inputs(features, params, config)
    return z_expectations(run_circuit(features, params.weights), config.n_qubits)


def shifted_derivatives(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """d<Z_j>/d(angle) for every angle, shape ``(n + L*n, batch, n)``.

    Angle order: the ``n`` encoded features, then ``weights`` flattened row-major.
    All shifted circuits run as one batch.
    """
    batch, n = features.shape
    n_layers = weights.shape[0]
    n_angles = n + n_layers * n
    feats = np.broadcast_to(features, (2 * n_angles, batch, n)).copy()
    ws = np.broadcast_to(weights, (2 * n_angles, n_layers, n)).copy()
    for a in range(n):
        feats[2 * a, :, a] += SHIFT
        feats[2 * a + 1, :, a] -= SHIFT
    for k in range(n_layers * n):
        layer, q = divmod(k, n)
        ws[2 * (n + k), layer, q] += SHIFT
        ws[2 * (n + k) + 1, layer, q] -= SHIFT
    # weights get a singleton batch axis so they broadcast over feature rows
    z = z_expectations(run_circuit(feats, ws[:, None]), n)
    return 0.5 * (z[0::2] - z[1::2])


def vqc_param_shift_grad(features, params: VqcParams, config: VqcConfig, upstream) -> VqcGradient:
    """Chain ``upstream`` (dLoss/d<Z>) through the circuit by parameter shift.

    With a single feature vector, ``d_inputs`` is a vector; with a batch it is
    per-row and ``d_weights`` is summed over the batch.
    """
    features = _check_inputs(features, params, config)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != features.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != features shape {features.shape}")
    single = features.ndim == 1
    feats2 = features.reshape(-1, config.n_qubits)
    up2 = upstream.reshape(-1, config.n_qubits)
    deriv = shifted_derivatives(feats2, params.weights)
    weighted = np.einsum("abj,bj->ab", deriv, up2)
    n = config.n_qubits
    d_inputs = weighted[:n].T
    d_weights = weighted[n:].sum(axis=1).reshape(config.n_layers, n)
    return VqcGradient(d_weights=d_weights, d_inputs=d_inputs[0] if single else d_inputs)
