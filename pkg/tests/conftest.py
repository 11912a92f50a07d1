import numpy as np
import pytest

from qeegnet.statevec import cnot_matrix, embed_single_qubit, ry_matrix, SIGMA_Z


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_state(rng, n):
    v = rng.normal(size=1 << n) + 1j * rng.normal(size=1 << n)
    return v / np.linalg.norm(v)


def dense_circuit(features, weights):
    """Full-matrix product V(theta) U(x) for the QEEGNet circuit."""
    n = len(features)
    dim = 1 << n
    u = np.eye(dim, dtype=complex)
    for i, x in enumerate(features):
        u = embed_single_qubit(ry_matrix(x), i, n) @ u
    for layer in weights:
        for i, w in enumerate(layer):
            u = embed_single_qubit(ry_matrix(w), i, n) @ u
        if n > 1:
            for i in range(n):
                u = cnot_matrix(i, (i + 1) % n, n) @ u
    return u


def dense_expectations(features, weights):
    n = len(features)
    psi0 = np.zeros(1 << n, dtype=complex)
    psi0[0] = 1
    u = dense_circuit(features, weights)
    out = []
    for j in range(n):
        z = embed_single_qubit(SIGMA_Z, j, n)
        out.append((psi0.conj() @ u.conj().T @ z @ u @ psi0).real)
    return np.array(out)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
