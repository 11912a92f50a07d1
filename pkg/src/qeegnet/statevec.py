"""Minimal statevector simulator: |0...0> preparation, RY, CNOT and Pauli-Z readout.

Bit ordering is little-endian: qubit ``i`` is bit ``i`` of the basis-state
index, so for two qubits the index ``2`` is the state with q1=1, q0=0.

The gate kernels work on arrays of shape ``(..., 2**n)`` so a whole batch of
states can be pushed through a circuit at once; :class:`StateVector` is the
single-state wrapper used by the public API.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError, ShapeError

MAX_QUBITS = 16

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)
IDENTITY = np.eye(2, dtype=np.complex128)


@dataclass
class StateVector:
    amplitudes: np.ndarray
    n_qubits: int

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.complex128)
        if self.amplitudes.shape != (1 << self.n_qubits,):
            raise ShapeError(
                f"expected {1 << self.n_qubits} amplitudes for {self.n_qubits} qubits, "
                f"got shape {self.amplitudes.shape}"
            )

    def norm_squared(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def copy(self) -> "StateVector":
        return StateVector(self.amplitudes.copy(), self.n_qubits)


def _check_qubit(qubit: int, n_qubits: int) -> None:
    if not 0 <= qubit < n_qubits:
        raise IndexError(f"qubit {qubit} out of range for {n_qubits} qubits")


def zero_amplitudes(n_qubits: int, batch_shape: tuple[int, ...] = ()) -> np.ndarray:
    if not 1 <= n_qubits <= MAX_QUBITS:
        raise ConfigurationError(f"n_qubits must be in [1, {MAX_QUBITS}], got {n_qubits}")
    amps = np.zeros(batch_shape + (1 << n_qubits,), dtype=np.complex128)
    amps[..., 0] = 1.0
    return amps


def ry_inplace(amps: np.ndarray, qubit: int, n_qubits: int, theta) -> None:
    """Apply RY(theta) to ``qubit`` of every state in ``amps`` (shape ``(..., 2**n)``).

    ``theta`` is a scalar or an array broadcastable to the batch shape.
    """
    batch = amps.shape[:-1]
    low = 1 << qubit
    view = amps.reshape(batch + ((1 << n_qubits) // (2 * low), 2, low))
    half = 0.5 * np.asarray(theta, dtype=np.float64)
    c = np.cos(half).reshape(np.shape(half) + (1, 1))
    s = np.sin(half).reshape(np.shape(half) + (1, 1))
    a0 = view[..., 0, :].copy()
    a1 = view[..., 1, :]
    view[..., 0, :] = c * a0 - s * a1
    view[..., 1, :] = s * a0 + c * a1


@lru_cache(maxsize=None)
def cnot_permutation(control: int, target: int, n_qubits: int) -> np.ndarray:
    idx = np.arange(1 << n_qubits)
    flip = ((idx >> control) & 1).astype(bool)
    perm = idx.copy()
    perm[flip] ^= 1 << target
    perm.flags.writeable = False
    return perm


def cnot_inplace(amps: np.ndarray, control: int, target: int, n_qubits: int) -> None:
    amps[...] = amps[..., cnot_permutation(control, target, n_qubits)]


@lru_cache(maxsize=None)
def _z_signs(n_qubits: int) -> np.ndarray:
    idx = np.arange(1 << n_qubits)
    # row q holds +1 where bit q is 0, -1 where it is 1
    signs = 1.0 - 2.0 * ((idx[None, :] >> np.arange(n_qubits)[:, None]) & 1)
    signs.flags.writeable = False
    return signs


def z_expectations(amps: np.ndarray, n_qubits: int) -> np.ndarray:
    """<Z_q> for every qubit; returns shape ``(..., n_qubits)``."""
    probs = amps.real**2 + amps.imag**2
    return probs @ _z_signs(n_qubits).T


# public single-state API ---------------------------------------------------


def init_zero_state(n_qubits: int) -> StateVector:
    return StateVector(zero_amplitudes(n_qubits), n_qubits)


def apply_ry(state: StateVector, qubit: int, theta: float) -> StateVector:
    """Rotate ``qubit`` by RY(theta) = exp(-i theta sigma_y / 2), in place."""
    _check_qubit(qubit, state.n_qubits)
    if not np.isfinite(theta):
        raise ConfigurationError(f"rotation angle must be finite, got {theta}")
    ry_inplace(state.amplitudes, qubit, state.n_qubits, theta)
    return state


def apply_cnot(state: StateVector, control: int, target: int) -> StateVector:
    _check_qubit(control, state.n_qubits)
    _check_qubit(target, state.n_qubits)
    if control == target:
        raise ConfigurationError("CNOT control and target must differ")
    cnot_inplace(state.amplitudes, control, target, state.n_qubits)
    return state


def expectation_z(state: StateVector, qubit: int) -> float:
    _check_qubit(qubit, state.n_qubits)
    probs = state.amplitudes.real**2 + state.amplitudes.imag**2
    return float(probs @ _z_signs(state.n_qubits)[qubit])


# dense reference path (tests and cross-checks only) ------------------------


def ry_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -s], [s, c]], dtype=np.complex128)


def embed_single_qubit(gate: np.ndarray, qubit: int, n_qubits: int) -> np.ndarray:
    """Full 2**n matrix of a one-qubit ``gate`` acting on ``qubit``."""
    full = np.ones((1, 1), dtype=np.complex128)
    # kron order is most-significant qubit first under little-endian indexing
    for q in reversed(range(n_qubits)):
        full = np.kron(full, gate if q == qubit else IDENTITY)
    return full


def cnot_matrix(control: int, target: int, n_qubits: int) -> np.ndarray:
    p0 = np.array([[1, 0], [0, 0]], dtype=np.complex128)
    p1 = np.array([[0, 0], [0, 1]], dtype=np.complex128)
    stay = embed_single_qubit(p0, control, n_qubits)
    flip = embed_single_qubit(p1, control, n_qubits) @ embed_single_qubit(SIGMA_X, target, n_qubits)
    return stay + flip


def dense_oracle_apply(state: StateVector, unitary: np.ndarray) -> StateVector:
    """Plain matrix-vector product; returns a new state."""
    unitary = np.asarray(unitary, dtype=np.complex128)
    dim = 1 << state.n_qubits
    if unitary.shape != (dim, dim):
        raise ShapeError(f"unitary shape {unitary.shape} does not match state dimension {dim}")
    if not np.allclose(unitary.conj().T @ unitary, np.eye(dim), atol=1e-10):
        raise ConfigurationError("matrix is not unitary within 1e-10")
    return StateVector(unitary @ state.amplitudes, state.n_qubits)
