import numpy as np
import pytest

from qeegnet.errors import ConfigurationError, ShapeError
from qeegnet.statevec import StateVector, cnot_matrix, dense_oracle_apply
from qeegnet.vqc import (
    VqcConfig, VqcParams, init_params, ring_entangle, vqc_forward, vqc_param_shift_grad,
)

from conftest import dense_expectations


def _basis(n, index):
    return StateVector(np.eye(1 << n)[index], n)


def test_forward_trivial_circuits():
    cfg = VqcConfig(1, 1)
    p = VqcParams(np.zeros((1, 1)))
    assert np.allclose(vqc_forward([0.0], p, cfg), [1.0])
    assert np.allclose(vqc_forward([np.pi], p, cfg), [-1.0], atol=1e-15)


def test_ring_three_qubits():
    # q0=1 -> CNOT(0,1) -> CNOT(1,2) -> CNOT(2,0) leaves q1=q2=1, q0=0
    s = ring_entangle(_basis(3, 0b001))
    assert np.array_equal(s.amplitudes, np.eye(8)[0b110])


def test_ring_two_qubits():
    assert np.array_equal(ring_entangle(_basis(2, 0)).amplitudes, np.eye(4)[0])
    s = ring_entangle(_basis(2, 0b01))
    assert np.array_equal(s.amplitudes, np.eye(4)[0b10])


def test_ring_single_qubit_noop():
    s = StateVector([0.6, 0.8], 1)
    assert np.array_equal(ring_entangle(s).amplitudes, [0.6, 0.8])


@pytest.mark.parametrize("n", [2, 3, 4])
def test_ring_matches_dense_permutation(n):
    u = np.eye(1 << n)
    for i in range(n):
        u = cnot_matrix(i, (i + 1) % n, n) @ u
    for k in range(1 << n):
        out = ring_entangle(_basis(n, k)).amplitudes
        assert np.count_nonzero(out) == 1
        assert np.array_equal(out, dense_oracle_apply(_basis(n, k), u).amplitudes)


def test_forward_matches_dense(rng):
    for _ in range(50):
        n = int(rng.integers(1, 5))
        layers = int(rng.integers(1, 4))
        x = rng.uniform(-np.pi, np.pi, n)
        w = rng.uniform(-np.pi, np.pi, (layers, n))
        out = vqc_forward(x, VqcParams(w), VqcConfig(n, layers))
        assert np.max(np.abs(out - dense_expectations(x, w))) < 1e-10
        assert np.all(np.abs(out) <= 1)


def test_forward_batch_matches_rows(rng):
    cfg = VqcConfig(3, 2)
    p = init_params(cfg, rng)
    x = rng.normal(size=(5, 3))
    batch = vqc_forward(x, p, cfg)
    for row, out in zip(x, batch):
        assert np.allclose(vqc_forward(row, p, cfg), out, rtol=0, atol=1e-14)


def test_forward_deterministic(rng):
    cfg = VqcConfig(4, 2)
    p = init_params(cfg, rng)
    x = rng.normal(size=4)
    assert np.array_equal(vqc_forward(x, p, cfg), vqc_forward(x, p, cfg))


def test_shape_errors():
    cfg = VqcConfig(2, 1)
    with pytest.raises(ShapeError):
        vqc_forward([0.0], VqcParams(np.zeros((1, 2))), cfg)
    with pytest.raises(ShapeError):
        vqc_forward([0.0, 0.0], VqcParams(np.zeros((2, 2))), cfg)
    with pytest.raises(ConfigurationError):
        VqcConfig(0, 1)


def test_init_range(rng):
    p = init_params(VqcConfig(4, 2), rng)
    assert p.weights.shape == (2, 4)
    assert np.all(np.abs(p.weights) <= np.pi / 50)


def _fd_z(x, w, h=1e-4):
    """Central differences of every <Z_j> w.r.t. features and weights."""
    d_x = np.empty((len(x), len(x)))
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        d_x[i] = (dense_expectations(x + e, w) - dense_expectations(x - e, w)) / (2 * h)
    d_w = np.empty(w.shape + (len(x),))
    for idx in np.ndindex(w.shape):
        e = np.zeros_like(w)
        e[idx] = h
        d_w[idx] = (dense_expectations(x, w + e) - dense_expectations(x, w - e)) / (2 * h)
    return d_x, d_w


def test_single_qubit_encoding_gradient():
    # <Z> = cos(theta) for a lone encoding angle; weight fixed at 0
    cfg = VqcConfig(1, 1)
    p = VqcParams(np.zeros((1, 1)))
    g0 = vqc_param_shift_grad([0.0], p, cfg, [1.0])
    fd0 = _fd_z(np.array([0.0]), np.zeros((1, 1)))[0][0, 0]
    assert abs(g0.d_inputs[0] - fd0) < 1e-6 and abs(fd0) < 1e-6
    g1 = vqc_param_shift_grad([np.pi / 2], p, cfg, [1.0])
    fd1 = _fd_z(np.array([np.pi / 2]), np.zeros((1, 1)))[0][0, 0]
    assert abs(fd1 + 1) < 1e-6
    assert abs(g1.d_inputs[0] + 1) < 1e-6


def test_zero_upstream(rng):
    cfg = VqcConfig(3, 2)
    g = vqc_param_shift_grad(rng.normal(size=3), init_params(cfg, rng), cfg, np.zeros(3))
    assert not g.d_weights.any() and not g.d_inputs.any()


def test_param_shift_matches_finite_differences(rng):
    for _ in range(100):
        n = int(rng.integers(1, 5))
        layers = int(rng.integers(1, 4))
        x = rng.uniform(-np.pi, np.pi, n)
        w = rng.uniform(-np.pi, np.pi, (layers, n))
        up = rng.normal(size=n)
        g = vqc_param_shift_grad(x, VqcParams(w), VqcConfig(n, layers), up)
        d_x, d_w = _fd_z(x, w)
        assert np.max(np.abs(g.d_inputs - d_x @ up)) < 1e-6
        assert np.max(np.abs(g.d_weights - d_w @ up)) < 1e-6


def test_batched_gradient_sums_rows(rng):
    cfg = VqcConfig(3, 2)
    p = init_params(cfg, rng)
    x = rng.normal(size=(4, 3))
    up = rng.normal(size=(4, 3))
    g = vqc_param_shift_grad(x, p, cfg, up)
    rows = [vqc_param_shift_grad(x[b], p, cfg, up[b]) for b in range(4)]
    assert np.allclose(g.d_weights, sum(r.d_weights for r in rows), atol=1e-14)
    assert np.allclose(g.d_inputs, [r.d_inputs for r in rows], atol=1e-14)


def test_layer_order_sensitivity(rng):
    changed = 0
    for _ in range(20):
        n = int(rng.integers(2, 5))
        x = rng.uniform(-np.pi, np.pi, n)
        w = rng.uniform(-np.pi, np.pi, (2, n))
        swapped = w.copy()
        swapped[0, 0], swapped[1, 0] = w[1, 0], w[0, 0]
        cfg = VqcConfig(n, 2)
        a = vqc_forward(x, VqcParams(w), cfg)
        b = vqc_forward(x, VqcParams(swapped), cfg)
        changed += np.max(np.abs(a - b)) > 1e-9
    assert changed == 20
