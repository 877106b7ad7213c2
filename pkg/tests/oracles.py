"""Independent reference computations used by the tests.

Nothing here calls into the tape: gradients come from central differences,
network outputs from explicit Python loops, projections from exhaustive
support enumeration.
"""
import itertools

import numpy as np


def fd_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def leaky(v, slope=0.2):
    return v if v >= 0 else slope * v


def mlp_loop(weights, biases, z, slope=0.2, head="linear"):
    """Straight-line evaluation of an MLP with scalar loops."""
    h = [float(t) for t in z]
    L = len(weights)
    for layer, (W, b) in enumerate(zip(weights, biases)):
        out = []
        for i in range(W.shape[0]):
            acc = float(b[i])
            for j in range(W.shape[1]):
                acc += float(W[i, j]) * h[j]
            if layer < L - 1:
                acc = leaky(acc, slope)
            elif head == "sigmoid":
                acc = 1.0 / (1.0 + np.exp(-acc))
            out.append(acc)
        h = out
    return np.array(h)


def best_sparse_distance(v, s):
    """min ||v - u|| over u with at most s nonzeros, by trying every support."""
    k = len(v)
    best = np.inf
    for supp in itertools.combinations(range(k), min(s, k)):
        u = np.zeros(k)
        u[list(supp)] = v[list(supp)]
        best = min(best, float(np.linalg.norm(v - u)))
    return best


def brute_regions(normals, offsets, samples=200000, box=50.0, seed=0):
    """Sign patterns hit by dense random sampling (a lower bound on cell count)."""
    rng = np.random.default_rng(seed)
    k = normals.shape[1]
    pts = rng.uniform(-box, box, size=(samples, k))
    signs = (pts @ normals.T - offsets > 0)
    return len({row.tobytes() for row in signs})
