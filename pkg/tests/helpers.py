import numpy as np

from bayescnn.tensor import Tensor


def numerical_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` with respect to every entry."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            up = f(*arrays)
            arr[idx] = old - h
            down = f(*arrays)
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(build, arrays):
    """Gradients of the scalar tensor returned by ``build(*tensors)``."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*tensors).backward()
    return [t.grad for t in tensors]


def relative_error(a, b):
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def max_gradcheck_error(build, arrays, h=1e-5):
    """Largest relative error between analytic and finite-difference gradients."""
    f = lambda *xs: build(*[Tensor(x) for x in xs]).item()
    numeric = numerical_grad(f, [a.copy() for a in arrays], h)
    analytic = analytic_grad(build, arrays)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def brute_conv2d(x, w, stride=1, padding=0):
    """Nested-loop cross-correlation oracle."""
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for b in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for cc in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, cc, i * stride + di, j * stride + dj] * w[o, cc, di, dj]
                    out[b, o, i, j] = acc
    return out


def brute_maxpool(x, k, stride):
    n, c, h, w = x.shape
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for b in range(n):
        for cc in range(c):
            for i in range(oh):
                for j in range(ow):
                    out[b, cc, i, j] = max(
                        x[b, cc, i * stride + di, j * stride + dj] for di in range(k) for dj in range(k)
                    )
    return out


def write_idx(path, array, magic):
    """Write ``array`` (uint8) as an IDX file with big-endian header."""
    import struct

    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    path.write_bytes(header + array.tobytes())
    return path


def write_cifar(path, labels, pixels, label_bytes=1):
    """Write CIFAR records; ``labels`` is (N,) or (N, label_bytes)."""
    labels = np.asarray(labels, dtype=np.uint8).reshape(len(pixels), -1)
    if labels.shape[1] < label_bytes:
        labels = np.concatenate([np.zeros((len(labels), label_bytes - 1), np.uint8), labels], axis=1)
    rows = np.concatenate([labels, np.asarray(pixels, dtype=np.uint8).reshape(len(pixels), -1)], axis=1)
    path.write_bytes(rows.tobytes())
    return path


class FixedNoise:
    """Noise source returning preset standard-normal arrays, one per layer key."""

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self.eps = {}

    def normal(self, key, shape, dtype=np.float64):
        if key not in self.eps or self.eps[key].shape != tuple(shape):
            self.eps[key] = self.rng.standard_normal(shape)
        return self.eps[key].astype(dtype)
