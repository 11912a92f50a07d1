"""Extended-precision reference forward pass, written independently of qeegnet.nn.

Used as the finite-difference oracle for end-to-end gradient checks: central
differences in float64 lose ~1e-11 to cancellation, which swamps the tiny
gradients batch-norm leaves on some parameters.  np.longdouble pushes that
floor down by ~3 orders of magnitude.
"""
import numpy as np

LD = np.longdouble
CLD = np.clongdouble


def _conv(x, w, d):
    # grouped conv, valid height, "same" width (extra pad on the right)
    b, cin, h, t = x.shape
    cout, _, kh, kw = w.shape
    left, right = (kw - 1) // 2, kw // 2
    xp = np.concatenate([np.zeros((b, cin, h, left), LD), x, np.zeros((b, cin, h, right), LD)], axis=3)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("bchtij,cdij->bcdht", win, w[:, 0].reshape(cin, d, kh, kw))
    out = out.reshape(b, cout, h - kh + 1, t)
    return out


def _bn(x, gamma, beta, eps):
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = ((x - mean) ** 2).mean(axis=(0, 2, 3), keepdims=True)
    return gamma[None, :, None, None] * (x - mean) / np.sqrt(var + LD(eps)) + beta[None, :, None, None]


def _elu(x, alpha):
    return np.where(x > 0, x, LD(alpha) * (np.exp(np.minimum(x, 0)) - 1))


def _pool(x, p):
    w = x.shape[-1] // p
    return x[..., : w * p].reshape(x.shape[:3] + (w, p)).mean(axis=-1)


def _vqc(angles, weights):
    b, n = angles.shape
    dim = 1 << n
    idx = np.arange(dim)
    psi = np.zeros((b, dim), CLD)
    psi[:, 0] = 1

    def ry(psi, q, theta):
        theta = np.broadcast_to(np.asarray(theta, LD), (b,))
        c, s = np.cos(theta / 2)[:, None], np.sin(theta / 2)[:, None]
        out = psi.copy()
        zero = ((idx >> q) & 1) == 0
        lo, hi = idx[zero], idx[zero] | (1 << q)
        out[:, lo] = c * psi[:, lo] - s * psi[:, hi]
        out[:, hi] = s * psi[:, lo] + c * psi[:, hi]
        return out

    for q in range(n):
        psi = ry(psi, q, angles[:, q])
    for layer in weights:
        for q in range(n):
            psi = ry(psi, q, layer[q])
        if n > 1:
            for q in range(n):
                c, t = q, (q + 1) % n
                src = np.where(((idx >> c) & 1) == 1, idx ^ (1 << t), idx)
                psi = psi[:, src]
    probs = (psi * psi.conj()).real
    return np.stack([(probs * (1 - 2 * ((idx >> q) & 1))).sum(axis=1) for q in range(n)], axis=1)


def reference_loss(graph, x, labels, params=None):
    """Mean cross-entropy of ``graph`` in training mode (no dropout) at extended precision."""
    cfg = graph.config
    p = {k: np.asarray(v, LD) for k, v in (params or graph.parameters()).items()}
    h = np.asarray(x, LD).reshape((len(x), 1, cfg.n_channels, cfg.n_samples))
    eps = cfg.bn_epsilon
    h = _conv(h, p["conv_time.weight"], cfg.temporal_filters)
    h = _bn(h, p["bn1.gamma"], p["bn1.beta"], eps)
    h = _conv(h, p["conv_space.weight"], cfg.depth_multiplier)
    h = _elu(_bn(h, p["bn2.gamma"], p["bn2.beta"], eps), cfg.elu_alpha)
    h = _pool(h, cfg.pool1)
    h = _conv(h, p["sep_depth.weight"], 1)
    h = np.einsum("oc,bchw->bohw", p["sep_point.weight"][:, :, 0, 0], h)
    h = _elu(_bn(h, p["bn3.gamma"], p["bn3.beta"], eps), cfg.elu_alpha)
    h = _pool(h, cfg.pool2).reshape(len(x), -1)
    if graph.kind == "qeegnet":
        h = _elu(h @ p["embed.weight"].T + p["embed.bias"], cfg.elu_alpha)
        h = _vqc(LD(np.pi) * np.tanh(h), p["vqc.weights"])
    z = h @ p["head.weight"].T + p["head.bias"]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()
