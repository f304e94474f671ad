"""Independent reference implementations used as test oracles."""

import numpy as np


def central_difference(f, x, index, h):
    """d f / d x[index] by central differences, evaluated in float64."""
    x = np.array(x, dtype=np.float64)
    xp = x.copy()
    xm = x.copy()
    xp[index] += h
    xm[index] -= h
    return (float(f(xp)) - float(f(xm))) / (2 * h)


def rel_error(analytic, numeric, floor=0.0):
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor, 1e-300))


def random_indices(rng, shape, count):
    flat = rng.choice(int(np.prod(shape)), size=min(count, int(np.prod(shape))), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def conv2d_loops(x, kernel, bias):
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    n, cin, h, w = x.shape
    cout, _, k, _ = kernel.shape
    out = np.zeros((n, cout, h - k + 1, w - k + 1))
    for b in range(n):
        for o in range(cout):
            for i in range(h - k + 1):
                for j in range(w - k + 1):
                    acc = float(bias[o])
                    for c in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += x[b, c, i + u, j + v] * kernel[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def maxpool_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.zeros((n, c, h // 2, w // 2), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    best, arg = None, 0
                    for pos, (u, v) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
                        val = x[b, ch, 2 * i + u, 2 * j + v]
                        if best is None or val > best:
                            best, arg = val, pos
                    out[b, ch, i, j] = best
                    idx[b, ch, i, j] = arg
    return out, idx


def linear_loops(x, weight, bias):
    n, din = x.shape
    dout = weight.shape[0]
    out = np.zeros((n, dout))
    for b in range(n):
        for o in range(dout):
            acc = float(bias[o])
            for i in range(din):
                acc += float(x[b, i]) * float(weight[o, i])
            out[b, o] = acc
    return out


def cross_entropy64(logits, labels):
    """Mean cross-entropy in float64 via log-sum-exp, no shared code."""
    z = np.asarray(logits, dtype=np.float64)
    total = 0.0
    for row, y in zip(z, labels):
        m = max(row)
        lse = m + np.log(sum(np.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)


def network_loops64(params, x):
    """Layer-by-layer float64 forward of the LeNet-style net, built from the loop oracles."""
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params}
    h = (np.asarray(x, dtype=np.float64) - 0.5) / 0.5
    for layer in ("conv1", "conv2"):
        h = np.maximum(conv2d_loops(h, p[f"{layer}.weight"], p[f"{layer}.bias"]), 0)
        h = maxpool_loops(h)[0]
    h = h.reshape(h.shape[0], -1)
    for layer in ("fc1", "fc2"):
        h = np.maximum(linear_loops(h, p[f"{layer}.weight"], p[f"{layer}.bias"]), 0)
    return linear_loops(h, p["fc3.weight"], p["fc3.bias"])


def _params64(params):
    from snapens.models import ParameterSet

    return ParameterSet(params.arch, {k: v.astype(np.float64) for k, v in params})


def network_loss64(params, x, y):
    from snapens import models

    return cross_entropy64(models.forward(_params64(params), np.asarray(x, np.float64)), y)


def _stable_difference(f, base, index, h):
    """Central difference, or None when halving h changes it (a kink in range)."""
    d1 = central_difference(f, base, index, h)
    d2 = central_difference(f, base, index, h / 2)
    if abs(d1 - d2) > 1e-4 * max(abs(d1), abs(d2), 1e-8):
        return None
    return d2


def network_gradcheck(params, x, y, probes, rng, h=1e-3):
    """Relative errors of float32 input and parameter gradients vs float64 differences.

    Probes whose difference quotient is unstable under halving h sit on a
    ReLU kink or a pooling tie and are redrawn. Returns two arrays of errors
    (input probes, parameter probes).
    """
    from snapens import models

    _, grads, input_grad = models.backward(params, x, y)
    p64 = _params64(params)
    x64 = np.asarray(x, np.float64)

    def input_loss(v):
        return cross_entropy64(models.forward(p64, v), y)

    errors_in = []
    floor_in = 1e-3 * np.abs(input_grad).max()
    while len(errors_in) < probes:
        idx = tuple(int(rng.integers(s)) for s in x64.shape)
        num = _stable_difference(input_loss, x64, idx, h)
        if num is not None:
            errors_in.append(rel_error(input_grad[idx], num, floor_in))

    names = params.names()
    errors_p = []
    while len(errors_p) < probes:
        name = names[int(rng.integers(len(names)))]
        base = p64.tensors[name]
        idx = tuple(int(rng.integers(s)) for s in base.shape)

        def param_loss(v, name=name):
            q = p64.copy()
            q.tensors[name] = v
            return cross_entropy64(models.forward(q, x64), y)

        num = _stable_difference(param_loss, base, idx, h)
        if num is not None:
            floor = 1e-3 * np.abs(grads[name]).max()
            errors_p.append(rel_error(grads[name][idx], num, floor))
    return np.array(errors_in, dtype=float), np.array(errors_p, dtype=float)


class LinearPredictor:
    """Binary logistic model: logits [0, w.x + b]. Its loss is monotone in w.delta."""

    def __init__(self, w, b=0.0):
        self.w = np.asarray(w, dtype=np.float32)
        self.b = np.float32(b)

    def logits(self, x):
        z = x.reshape(len(x), -1) @ self.w + self.b
        return np.stack([np.zeros_like(z), z], axis=1)

    def input_gradient(self, x, y):
        from snapens import ops

        _, dlogits = ops.softmax_cross_entropy(self.logits(x), y)
        return (dlogits[:, 1:2] * self.w).reshape(x.shape).astype(x.dtype)

    def loss(self, x, y):
        return cross_entropy64(self.logits(x).astype(np.float64), y)


class BandPredictor:
    """Test double: class k for images whose mean lies in [k/10, (k+1)/10).

    Piecewise constant, so its input gradient is zero everywhere it is defined.
    """

    def logits(self, x):
        cls = np.clip((x.reshape(len(x), -1).mean(axis=1) * 10).astype(int), 0, 9)
        return np.eye(10, dtype=np.float32)[cls]

    def input_gradient(self, x, y):
        return np.zeros_like(x)


def band_images(labels, shape=(1, 28, 28)):
    labels = np.asarray(labels)
    return np.broadcast_to(((labels + 0.5) / 10).astype(np.float32)[:, None, None, None],
                           (len(labels), *shape)).copy()


def teacher_dataset(n, seed=0):
    """Synthetic MNIST-shaped images labelled by a fixed random network."""
    from snapens import models

    rng = np.random.default_rng(seed)
    x = rng.random((n, 1, 28, 28), dtype=np.float32)
    teacher = models.init_parameters(models.Architecture.MNIST_NET, 10_000 + seed)
    return x, models.forward(teacher, x).argmax(axis=1)
